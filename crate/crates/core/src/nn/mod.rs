//! Minimal differentiable layer library: convolution, batch norm,
//! activations, focal loss and optimizers.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod params;

pub use activation::{clip, clip_backward, relu, relu_backward, Activation};
pub use batchnorm::{BatchNorm1d, BnGrads, BnMode};
pub use conv::{Conv1d, ConvGrads, Padding};
pub use gradcheck::finite_difference_check;
pub use loss::{focal_loss, focal_loss_per_sample};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{ParamGrads, Parameterized, TensorRole};
