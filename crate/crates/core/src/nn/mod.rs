//! Dense `f64` tensors, layers with explicit backward passes, losses, Adam,
//! and a finite-difference checker.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod tensor;

pub use gradcheck::{central_difference, finite_diff_check, relative_error};
pub use layers::{
    activation_backward, activation_forward, conv2d_backward, conv2d_forward, linear_backward,
    linear_forward, sigmoid, ConvGrads, ConvSpec, Layer, LayerSpec, PadMode, Stack, StackTrace,
};
pub use loss::{bce_loss, bce_loss_subset, smooth_l1, BCE_EPS};
pub use optim::{adam_step, Adam, AdamConfig};
pub use tensor::{Parameter, Tensor};
