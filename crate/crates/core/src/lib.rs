//! Self-supervised static/dynamic decomposition of X-ray coronary
//! angiography sequences into neural attenuation fields.

pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod diffnet;
pub mod encoding;
pub mod geometry;
pub mod losses;
pub mod phantom;
pub mod renderer;
pub mod trainer;

pub use error::{Error, Result};
