use nalgebra::Vector3;
use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{Mlp, MlpShape, ParamRole, ParamStore, PhaseLatentTable, Tape, Var};
use crate::encoding::{encode_batch, EncodingConfig};
use crate::error::{Error, Result};
use crate::losses::Variant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Neurons per hidden layer.
    pub width: usize,
    /// Hidden layers per network.
    pub depth: usize,
    /// Length of each phase code tau_i.
    pub latent_dim: usize,
    /// Initial output bias of the dynamic network. Negative values start the
    /// vessel channel near zero density.
    pub dynamic_output_bias: f64,
}

impl Default for ModelConfig {
    /// Desk-scale networks. The dynamic channel starts at softplus(-2),
    /// about 0.13, which is faint but still trainable.
    fn default() -> Self {
        Self {
            width: 64,
            depth: 2,
            latent_dim: 8,
            dynamic_output_bias: -2.0,
        }
    }
}

impl ModelConfig {
    /// Four hidden layers of 128 neurons.
    pub fn reference() -> Self {
        Self {
            width: 128,
            depth: 4,
            latent_dim: 8,
            dynamic_output_bias: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 {
            return Err(Error::Config("networks need a positive width and depth".into()));
        }
        if !self.dynamic_output_bias.is_finite() {
            return Err(Error::Config("dynamic_output_bias must be finite".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Static network(s), and for the decomposing variants the dynamic network
/// with its phase codes.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldModel {
    pub store: ParamStore,
    pub variant: Variant,
    pub phases: usize,
    /// One network, or one per phase for the sparse variant.
    pub statics: Vec<Mlp>,
    pub dynamic: Option<(Mlp, PhaseLatentTable)>,
    pub encoding: EncodingConfig,
}

/// Static and dynamic densities for a set of points.
pub struct FieldSamples {
    pub sigma_static: Array1<f64>,
    pub sigma_dynamic: Array1<f64>,
}

impl FieldModel {
    pub fn new(variant: Variant, phases: usize, config: &ModelConfig, encoding: &EncodingConfig, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::default();
        let enc = encoding.output_dim();
        let shape = |input_dim| MlpShape {
            input_dim,
            width: config.width,
            depth: config.depth,
        };
        let (statics, dynamic) = if variant == Variant::Sparse {
            let nets = (1..=phases)
                .map(|i| Mlp::new(&mut store, &format!("static{i}"), ParamRole::StaticNet, shape(enc), rng))
                .collect();
            (nets, None)
        } else {
            let s = Mlp::new(&mut store, "static", ParamRole::StaticNet, shape(enc), rng);
            let d = Mlp::new(&mut store, "dynamic", ParamRole::DynamicNet, shape(enc + config.latent_dim), rng);
            store.get_mut(d.output_bias()).value.fill(config.dynamic_output_bias);
            let codes = PhaseLatentTable::new(&mut store, phases, config.latent_dim, rng);
            (vec![s], Some((d, codes)))
        };
        Self {
            store,
            variant,
            phases,
            statics,
            dynamic,
            encoding: encoding.clone(),
        }
    }

    fn static_net(&self, phase: usize) -> &Mlp {
        if self.statics.len() == 1 {
            &self.statics[0]
        } else {
            &self.statics[phase - 1]
        }
    }

    fn check_phase(&self, phase: usize) -> Result<()> {
        if (1..=self.phases).contains(&phase) {
            Ok(())
        } else {
            Err(Error::Argument(format!("phase {phase} outside 1..={}", self.phases)))
        }
    }

    /// Untracked densities at `points`, all at `phase`, encoded as at
    /// iteration `n`.
    pub fn query(&self, points: &[Vector3<f64>], phase: usize, n: u64) -> Result<FieldSamples> {
        self.check_phase(phase)?;
        let enc = encode_batch(points, n, &self.encoding);
        let sigma_static = self.static_net(phase).forward(&self.store, enc.view())?;
        let sigma_dynamic = match &self.dynamic {
            None => Array1::zeros(points.len()),
            Some((net, codes)) => {
                let code = codes.lookup(&self.store, &[phase])?;
                let mut input = Array2::zeros((points.len(), enc.ncols() + codes.dim));
                input.slice_mut(ndarray::s![.., ..enc.ncols()]).assign(&enc);
                input.slice_mut(ndarray::s![.., enc.ncols()..]).assign(&code.broadcast((points.len(), codes.dim)).unwrap());
                net.forward(&self.store, input.view())?
            }
        };
        Ok(FieldSamples {
            sigma_static,
            sigma_dynamic,
        })
    }

    /// Records the densities of `rays x samples` points on `tape`. All rays
    /// must share one phase for the sparse variant. Returns `(static,
    /// dynamic)` as `rays x samples` nodes.
    pub fn record(
        &self,
        tape: &mut Tape,
        points: &[Vector3<f64>],
        phases: &[usize],
        samples: usize,
        n: u64,
    ) -> Result<(Var, Option<Var>)> {
        let rays = phases.len();
        debug_assert_eq!(points.len(), rays * samples);
        for p in phases {
            self.check_phase(*p)?;
        }
        let enc = tape.constant(encode_batch(points, n, &self.encoding));
        let net = self.static_net(phases[0]);
        if self.statics.len() > 1 && phases.iter().any(|p| *p != phases[0]) {
            return Err(Error::Usage("per-phase networks need single-phase chunks".into()));
        }
        let s = net.forward_tape(tape, &self.store, enc);
        let s = tape.reshape(s, rays, samples);
        let d = match &self.dynamic {
            None => None,
            Some((net, codes)) => {
                let per_point: Vec<usize> = phases.iter().flat_map(|p| std::iter::repeat_n(*p, samples)).collect();
                let code = codes.lookup_tape(tape, &self.store, &per_point)?;
                let input = tape.concat_cols(enc, code);
                let d = net.forward_tape(tape, &self.store, input);
                Some(tape.reshape(d, rays, samples))
            }
        };
        Ok((s, d))
    }
}
