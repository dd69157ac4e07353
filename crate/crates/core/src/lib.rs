//! Input-level information bottleneck attribution (InputIBA) with a desk-scale
//! evaluation harness.
//!
//! The crate is layered bottom-up:
//!
//! * numeric core: [`tensor`], [`tape`] (reverse-mode autodiff), [`optim`], [`rng`]
//! * [`synthdata`]: synthetic patch-image and token-sequence datasets with ground truth
//! * [`models`]: small CNN / GRU classifiers, training and checkpoints
//! * [`featbn`]: the feature-level bottleneck and its closed-form KL
//! * [`inputbn`]: adversarial estimation of the input prior and the final input mask
//! * [`eval`]: Sensitivity-N, insertion/deletion, ROAR, EHR, SSIM sanity checks and
//!   comparison attributors

pub mod attribution;
pub mod binfmt;
pub mod error;
pub mod eval;
pub mod featbn;
pub mod gradcheck;
pub mod inputbn;
mod kernels;
pub mod models;
pub mod optim;
pub mod rng;
pub mod synthdata;
pub mod tape;
pub mod tensor;

pub use attribution::AttributionMap;
pub use error::{Error, Result};
pub use rng::RngStream;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
