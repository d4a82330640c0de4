//! Minimal neural toolkit: activations, MLPs with explicit reverse-mode
//! gradients, per-field embedding tables, and Adam.
//!
//! There is no autodiff graph. Every component exposes a `forward` that
//! returns a cache and a `backward` that consumes it, and all learnable
//! arrays live in one flat [`ParamSet`] so the optimizer and the checkpoint
//! writer stay structure-agnostic.

pub mod activations;
pub mod adam;
pub mod embedding;
pub mod mlp;
pub mod params;

pub use activations::{elu, elu_deriv, logit, one_plus_elu, one_plus_elu_deriv, sigmoid};
pub use adam::{adam_step, AdamState};
pub use embedding::EmbeddingSpec;
pub use mlp::{MlpCache, MlpSpec};
pub use params::{GradientBundle, ParamSet, TensorData};
