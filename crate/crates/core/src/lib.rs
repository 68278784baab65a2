//! Stealth editing laboratory: small byte-level autoregressive models,
//! in-place and jet-pack edits driven by linear trigger detectors,
//! separability-based intrinsic dimension, and the worst-case
//! false-positive bounds that connect them.

pub mod attacks;
pub mod bias;
pub mod cloud;
pub mod container;
pub mod detector;
pub mod dimension;
pub mod editor;
pub mod error;
pub mod eval;
pub mod jetpack;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod theory;
pub mod tokens;

pub use error::{LabError, Result};
pub use model::{init_model, Family, ModelConfig, ToyModel};
pub use tokens::{Prompt, Token};
