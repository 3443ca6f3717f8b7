use ndarray::{Array2, Zip};

use crate::error::{Error, Result};

/// Reported instead of infinity when two images agree to within 1e-12 MSE.
pub const PSNR_CAP: f64 = 99.0;

fn same_dim<A, B>(a: &Array2<A>, b: &Array2<B>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Argument(format!("image sizes differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `2|A and B| / (|A| + |B|)`, or 1 when both masks are empty.
pub fn dice(pred: &Array2<bool>, truth: &Array2<bool>) -> Result<f64> {
    same_dim(pred, truth)?;
    let mut both = 0usize;
    let mut total = 0usize;
    Zip::from(pred).and(truth).for_each(|&p, &t| {
        both += (p && t) as usize;
        total += p as usize + t as usize;
    });
    Ok(if total == 0 { 1.0 } else { 2.0 * both as f64 / total as f64 })
}

pub fn mse(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    same_dim(a, b)?;
    let mut acc = 0.0;
    Zip::from(a).and(b).for_each(|x, y| acc += (x - y) * (x - y));
    Ok(acc / a.len() as f64)
}

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(pred: &Array2<f64>, truth: &Array2<f64>, peak: f64) -> Result<f64> {
    let m = mse(pred, truth)?;
    if m < 1e-12 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|k| (-((k as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Separable "valid" filtering with a normalized 1-D kernel.
fn filter_valid(img: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = k.len();
    let rows = Array2::from_shape_fn((h, w + 1 - n), |(y, x)| (0..n).map(|j| k[j] * img[[y, x + j]]).sum::<f64>());
    Array2::from_shape_fn((h + 1 - n, w + 1 - n), |(y, x)| (0..n).map(|j| k[j] * rows[[y + j, x]]).sum::<f64>())
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03 and dynamic range `peak`. Images smaller than the
/// window are compared with a window as large as the smaller side.
pub fn ssim(a: &Array2<f64>, b: &Array2<f64>, peak: f64) -> Result<f64> {
    same_dim(a, b)?;
    let (h, w) = a.dim();
    if h == 0 || w == 0 {
        return Err(Error::Argument("empty images".into()));
    }
    let size = 11.min(h).min(w);
    let k = gaussian_window(size, 1.5);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let mu_a = filter_valid(a, &k);
    let mu_b = filter_valid(b, &k);
    let aa = filter_valid(&(a * a), &k);
    let bb = filter_valid(&(b * b), &k);
    let ab = filter_valid(&(a * b), &k);
    let mut total = 0.0;
    Zip::from(&mu_a)
        .and(&mu_b)
        .and(&aa)
        .and(&bb)
        .and(&ab)
        .for_each(|&ma, &mb, &saa, &sbb, &sab| {
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        });
    Ok(total / mu_a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(n: usize, on: impl Fn(usize) -> bool) -> Array2<bool> {
        Array2::from_shape_fn((1, n), |(_, k)| on(k))
    }

    #[test]
    fn dice_examples() {
        let a = mask(300, |k| k < 100);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &mask(300, |k| k >= 200)).unwrap(), 0.0);
        assert_eq!(dice(&a, &mask(300, |k| (50..150).contains(&k))).unwrap(), 0.5);
        let empty = mask(10, |_| false);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert!(dice(&empty, &a).is_err());
    }

    #[test]
    fn psnr_examples() {
        let a = Array2::from_elem((8, 8), 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let b = Array2::from_elem((8, 8), 0.6);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let a = Array2::from_shape_fn((24, 20), |_| rng.gen::<f64>());
            let b = Array2::from_shape_fn((24, 20), |_| rng.gen::<f64>());
            assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
            let ab = ssim(&a, &b, 1.0).unwrap();
            assert!((ab - ssim(&b, &a, 1.0).unwrap()).abs() < 1e-12);
            assert!(ab < 0.5);
        }
    }

    /// Constant images reduce to the luminance term only.
    #[test]
    fn ssim_constant_images() {
        let a = Array2::from_elem((16, 16), 0.4);
        let b = Array2::from_elem((16, 16), 0.6);
        let c1 = 1e-4;
        let expect = (2.0 * 0.4 * 0.6 + c1) / (0.16 + 0.36 + c1);
        assert!((ssim(&a, &b, 1.0).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn gaussian_window_is_normalized() {
        let w = gaussian_window(11, 1.5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(w[0], w[10]);
    }
}
