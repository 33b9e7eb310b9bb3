//! Layers, losses, optimizer and model builders.

pub mod conv;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;

use crate::tensor::Tensor;

pub use conv::{conv2d_backward, conv2d_forward, ConvSpec};
pub use loss::cross_entropy;
pub use model::{build_micro_resnet18, build_tiny_cnn, Arch, ArchKind, Model};
pub use optim::{cosine_lr, sgd_step, Sgd, TrainConfig};

/// Training mode caches activations for backward and uses batch
/// statistics in batchnorm; eval mode does neither.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Callback receiving `(name, parameter, gradient)` for every trainable
/// tensor of a layer or model.
pub type ParamVisitor<'a> = dyn FnMut(&str, &mut Tensor, &mut Tensor) + 'a;
