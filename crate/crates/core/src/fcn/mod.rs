//! Miniature FCN-8s with hand-written forward and backward passes.
//!
//! All arithmetic is `f64`. Training is plain minibatch SGD with momentum on
//! a class-weighted pixelwise cross-entropy.

mod infer;
pub mod layers;
mod net;
mod tensor;
mod train;
pub mod weights;

pub use infer::{forward, infer, Placement, ProbabilityMap};
pub use net::{Architecture, ForwardCache, LayerKind, LayerParams, LayerSpec, NetworkParams};
pub use tensor::Tensor;
pub use train::{class_weights, train, ClassWeightMode, Sample, TrainConfig, TrainOutcome};
