use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamRole, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Numerically stable softplus.
pub fn softplus(x: f64) -> f64 {
    (-x.abs()).exp().ln_1p() + x.max(0.0)
}

/// ReLU that lets NaN through, unlike `f64::max`.
pub fn relu(x: f64) -> f64 {
    if x < 0.0 {
        0.0
    } else {
        x
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input_dim: usize,
    /// Neurons per hidden layer.
    pub width: usize,
    /// Number of hidden ReLU layers.
    pub depth: usize,
}

/// Fully connected ReLU network with a single softplus output, so the
/// predicted attenuation is never negative.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub shape: MlpShape,
    /// `(weight, bias)` per layer; weights are `out x in`, biases `1 x out`.
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Weights and biases drawn from `U(-sqrt(1/fan_in), sqrt(1/fan_in))`.
    pub fn new(store: &mut ParamStore, name: &str, role: ParamRole, shape: MlpShape, rng: &mut impl Rng) -> Self {
        let mut dims = vec![shape.input_dim];
        dims.extend(std::iter::repeat_n(shape.width, shape.depth));
        dims.push(1);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, d)| {
                let bound = (1.0 / d[0] as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                let w = Array2::from_shape_fn((d[1], d[0]), |_| dist.sample(rng));
                let b = Array2::from_shape_fn((1, d[1]), |_| dist.sample(rng));
                (
                    store.add(format!("{name}.layer{k}.weight"), role, w),
                    store.add(format!("{name}.layer{k}.bias"), role, b),
                )
            })
            .collect();
        Self { shape, layers }
    }

    /// Bias of the softplus output unit.
    pub fn output_bias(&self) -> ParamId {
        self.layers.last().expect("at least one layer").1
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|(w, b)| [*w, *b])
    }

    /// Records the network on `tape`; `input` is `n x input_dim`, the result `n x 1`.
    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Var {
        let mut h = input;
        let last = self.layers.len() - 1;
        for (k, (w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(store, *w);
            let bv = tape.param(store, *b);
            let z = tape.matmul_t(h, wv);
            let z = tape.add_row(z, bv);
            h = if k == last { tape.softplus(z) } else { tape.relu(z) };
        }
        h
    }

    /// Untracked batch evaluation.
    pub fn forward(&self, store: &ParamStore, input: ArrayView2<f64>) -> Result<Array1<f64>> {
        if input.ncols() != self.shape.input_dim {
            return Err(Error::Argument(format!(
                "network expects {} inputs, got {}",
                self.shape.input_dim,
                input.ncols()
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = input.to_owned();
        for (k, (w, b)) in self.layers.iter().enumerate() {
            let mut z = h.dot(&store.get(*w).value.t());
            z += &store.get(*b).value;
            if k == last {
                z.mapv_inplace(softplus);
            } else {
                z.mapv_inplace(relu);
            }
            h = z;
        }
        Ok(h.index_axis_move(Axis(1), 0))
    }
}

/// Evaluates one input vector.
pub fn mlp_forward(store: &ParamStore, mlp: &Mlp, input: &[f64]) -> Result<f64> {
    let x = ArrayView2::from_shape((1, input.len()), input).expect("contiguous slice");
    Ok(mlp.forward(store, x)?[0])
}

/// One learned latent code per cardiac phase, stored as a `T x dim` table.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseLatentTable {
    pub id: ParamId,
    pub phases: usize,
    pub dim: usize,
}

impl PhaseLatentTable {
    /// Codes drawn from `N(0, 0.01^2)`.
    pub fn new(store: &mut ParamStore, phases: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 0.01).unwrap();
        let table = Array2::from_shape_fn((phases, dim), |_| normal.sample(rng));
        let id = store.add("latents", ParamRole::Latent, table);
        Self { id, phases, dim }
    }

    fn rows(&self, phases: &[usize]) -> Result<Vec<usize>> {
        phases
            .iter()
            .map(|&p| {
                if (1..=self.phases).contains(&p) {
                    Ok(p - 1)
                } else {
                    Err(Error::Argument(format!("phase {p} outside 1..={}", self.phases)))
                }
            })
            .collect()
    }

    /// Codes for 1-based `phases`, one row each.
    pub fn lookup(&self, store: &ParamStore, phases: &[usize]) -> Result<Array2<f64>> {
        Ok(store.get(self.id).value.select(Axis(0), &self.rows(phases)?))
    }

    pub fn lookup_tape(&self, tape: &mut Tape, store: &ParamStore, phases: &[usize]) -> Result<Var> {
        let rows = self.rows(phases)?;
        let table = tape.param(store, self.id);
        Ok(tape.gather_rows(table, rows))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(shape: MlpShape, seed: u64) -> (ParamStore, Mlp) {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp::new(&mut store, "net", ParamRole::StaticNet, shape, &mut rng);
        (store, mlp)
    }

    #[test]
    fn zero_network_outputs_ln2() {
        let shape = MlpShape { input_dim: 5, width: 8, depth: 3 };
        let (mut store, mlp) = net(shape, 0);
        for p in store.iter_mut() {
            p.value.fill(0.0);
        }
        let y = mlp_forward(&store, &mlp, &[0.3, -1.0, 2.0, 0.0, 4.0]).unwrap();
        assert!((y - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn layer_count_and_init_bounds() {
        let shape = MlpShape { input_dim: 75, width: 128, depth: 4 };
        let (store, mlp) = net(shape, 1);
        assert_eq!(mlp.param_ids().count(), 10);
        let first = store.get(mlp.param_ids().next().unwrap());
        assert_eq!(first.value.dim(), (128, 75));
        let bound = (1.0f64 / 75.0).sqrt();
        assert!(first.value.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn dimension_mismatch_is_argument_error() {
        let (store, mlp) = net(MlpShape { input_dim: 3, width: 4, depth: 1 }, 0);
        assert!(matches!(mlp_forward(&store, &mlp, &[1.0, 2.0]), Err(Error::Argument(_))));
    }

    #[test]
    fn outputs_are_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..10 {
            let (mut store, mlp) = net(MlpShape { input_dim: 6, width: 16, depth: 2 }, seed);
            for p in store.iter_mut() {
                p.value.mapv_inplace(|v| v * 20.0);
            }
            let x = Array2::from_shape_fn((1000, 6), |_| rng.gen_range(-5.0..5.0));
            let y = mlp.forward(&store, x.view()).unwrap();
            assert!(y.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        let (store, mlp) = net(MlpShape { input_dim: 4, width: 8, depth: 2 }, 3);
        let x = Array2::from_shape_fn((7, 4), |(i, j)| (i as f64 - 3.0) * 0.3 + j as f64 * 0.1);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = mlp.forward_tape(&mut tape, &store, xv);
        let plain = mlp.forward(&store, x.view()).unwrap();
        for k in 0..7 {
            assert_eq!(tape.value(y)[[k, 0]], plain[k]);
        }
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let (mut store, mlp) = net(MlpShape { input_dim: 3, width: 6, depth: 2 }, 5);
        let input = [0.4, -0.7, 0.9];
        let x = Array2::from_shape_vec((1, 3), input.to_vec()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = mlp.forward_tape(&mut tape, &store, xv);
        let out = tape.sum(y);
        let grads = tape.backward(out).unwrap();
        let h = 1e-5;
        for id in mlp.param_ids().collect::<Vec<_>>() {
            let g = grads.get(id).unwrap().clone();
            let dim = store.get(id).value.dim();
            for r in 0..dim.0 {
                for c in 0..dim.1 {
                    let orig = store.get(id).value[[r, c]];
                    store.get_mut(id).value[[r, c]] = orig + h;
                    let fp = mlp_forward(&store, &mlp, &input).unwrap();
                    store.get_mut(id).value[[r, c]] = orig - h;
                    let fm = mlp_forward(&store, &mlp, &input).unwrap();
                    store.get_mut(id).value[[r, c]] = orig;
                    let fd = (fp - fm) / (2.0 * h);
                    let an = g[[r, c]];
                    // Dead ReLU units give exactly zero on both sides.
                    if fd == 0.0 && an == 0.0 {
                        continue;
                    }
                    let rel = (an - fd).abs() / fd.abs().max(an.abs());
                    assert!(rel < 1e-4 || (an - fd).abs() < 1e-10, "{id:?}[{r},{c}] {an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn latent_lookup_routes_phases() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let table = PhaseLatentTable::new(&mut store, 10, 8, &mut rng);
        assert_eq!(store.get(table.id).value.dim(), (10, 8));
        let rows = table.lookup(&store, &[3, 10, 3]).unwrap();
        assert_eq!(rows.row(0), store.get(table.id).value.row(2));
        assert_eq!(rows.row(1), store.get(table.id).value.row(9));
        assert!(table.lookup(&store, &[0]).is_err());
        assert!(table.lookup(&store, &[11]).is_err());
    }
}
