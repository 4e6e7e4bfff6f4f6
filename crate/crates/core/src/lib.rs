//! Deterministic narrowing-bottleneck attribution for dual image–text
//! encoders, with comparison baselines, information-theoretic checks and a
//! masking-based evaluation harness.

pub mod attribution;
pub mod autodiff;
pub mod baselines;
pub mod bundle;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod heatmap;
pub mod info;
pub mod manifest;
pub mod model;
pub mod nib;
pub mod tensor;
pub mod verify;

pub use attribution::{AttributionMap, MethodId, PassCount, SaliencyImage};
pub use dataset::Sample;
pub use error::{Error, Result};
pub use model::{DualEncoderModel, HiddenState, Modality, ModelConfig};
pub use nib::{nib_attribute, PathSpec};
pub use tensor::Tensor;
