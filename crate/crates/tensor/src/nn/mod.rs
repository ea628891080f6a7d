//! Layers, losses, optimizers and the regime classifier built from them.

mod conv;
mod functional;
mod model;
mod optim;

pub use conv::{bilinear_sample, conv2d, deform_conv2d, ConvGeometry};
pub use functional::{
    batch_norm, dropout, leaky_relu, linear, max_pool2d, softmax, weighted_cross_entropy, RunningStats,
};
pub use model::{BlockSpec, ModelSpec, NamedArray, Network, NUM_CLASSES};
pub use optim::{adam_step, class_weights, should_stop, Adam, AdamConfig, AdamState, Goal, WeightMode};
