use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Learning rate falling linearly from `start` to `end` over `decay_steps`,
/// then held at `end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            start: 1e-3,
            end: 1e-5,
            decay_steps: 150_000,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, n: u64) -> f64 {
        if self.decay_steps == 0 || n >= self.decay_steps {
            return self.end;
        }
        let f = n as f64 / self.decay_steps as f64;
        self.start + (self.end - self.start) * f
    }
}

/// Moment estimates and the number of updates taken so far.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub updates: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| Array2::zeros(p.value.dim())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState {
                updates: 0,
                m: zeros(),
                v: zeros(),
            },
        }
    }

    /// One bias-corrected update with learning rate `lr`. Refuses to touch
    /// any value when a gradient is not finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if let Some(p) = store.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(Error::Numerical(format!("non-finite gradient in parameter '{}'", p.name)));
        }
        self.state.updates += 1;
        let t = self.state.updates as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, m), v) in store.iter_mut().zip(&mut self.state.m).zip(&mut self.state.v) {
            Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|x, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *x -= lr * mh / (vh.sqrt() + eps);
                });
        }
        if let Some(p) = store.iter().find(|p| p.value.iter().any(|x| !x.is_finite())) {
            return Err(Error::Numerical(format!("parameter '{}' became non-finite", p.name)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::ParamRole;

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::default();
        assert_eq!(s.at(0), 1e-3);
        assert_eq!(s.at(150_000), 1e-5);
        assert!((s.at(75_000) - 5.05e-4).abs() < 1e-18);
        assert_eq!(s.at(400_000), 1e-5);
    }

    #[test]
    fn zero_gradient_leaves_values() {
        let mut store = ParamStore::default();
        store.add("p", ParamRole::StaticNet, Array2::from_elem((2, 3), 0.7));
        let before = store.clone();
        let mut adam = Adam::new(&store);
        adam.step(&mut store, 1e-3).unwrap();
        assert_eq!(store.get(crate::diffnet::ParamId(0)).value, before.get(crate::diffnet::ParamId(0)).value);
    }

    #[test]
    fn quadratic_converges() {
        let mut store = ParamStore::default();
        let id = store.add("x", ParamRole::Latent, Array2::zeros((1, 1)));
        let mut adam = Adam::new(&store);
        let sched = LrSchedule {
            start: 0.05,
            end: 1e-5,
            decay_steps: 2000,
        };
        for n in 0..2000 {
            store.zero_grad();
            let x = store.get(id).value[[0, 0]];
            store.get_mut(id).grad[[0, 0]] = 2.0 * (x - 3.0);
            adam.step(&mut store, sched.at(n)).unwrap();
        }
        assert!((store.get(id).value[[0, 0]] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = ParamStore::default();
        store.add("good", ParamRole::StaticNet, Array2::zeros((1, 1)));
        let bad = store.add("dynamic.layer0.weight", ParamRole::DynamicNet, Array2::zeros((1, 1)));
        store.get_mut(bad).grad[[0, 0]] = f64::NAN;
        let mut adam = Adam::new(&store);
        let err = adam.step(&mut store, 1e-3).unwrap_err();
        assert!(err.to_string().contains("dynamic.layer0.weight"));
        assert_eq!(adam.state.updates, 0);
    }
}
