//! Reverse-mode differentiation, MLP fields, phase latents and Adam.

mod adam;
mod mlp;
mod params;
mod tape;

pub use adam::{Adam, AdamState, LrSchedule};
pub use mlp::{mlp_forward, softplus, Mlp, MlpShape, PhaseLatentTable};
pub use params::{ParamId, ParamRole, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
