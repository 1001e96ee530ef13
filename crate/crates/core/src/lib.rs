//! Teacher ANN training, ANN-to-SNN conversion by threshold balancing and
//! layer-wise attention distillation into spiking students, on CPU.

pub mod ann;
pub mod archs;
pub mod checkpoint;
pub mod conversion;
pub mod datasets;
pub mod distill;
pub mod encoding;
pub mod error;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod snn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
