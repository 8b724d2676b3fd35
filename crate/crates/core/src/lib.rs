//! Convolutional denoising auto-encoders with symmetric shortcut
//! connections: tensors and layer math with analytic gradients, the
//! encoder/decoder graph, corruption, Adam, data loading, training
//! pipelines and reporting.

pub mod corruption;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod net;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod tensor;

pub use corruption::{corrupt, expected_corrupted_psnr, CorruptionKind, CorruptionSpec};
pub use data::{BatchPlan, Dataset, NormStats};
pub use error::{Error, Result};
pub use net::{Checkpoint, Head, Mode, Network, NetworkSpec, ParameterStore};
pub use optim::{AdamState, LrSchedule};
pub use rng::Rng;
pub use tensor::{DType, Element, Tensor};
