//! Dense per-frame tensors, the layer kernels of the temporal network with
//! their hand-written backward passes, AdamW, and a finite-difference checker.

mod adamw;
mod gradcheck;
mod layers;
mod params;
mod tensor;

pub use adamw::{adamw_step, OptimConfig};
pub use gradcheck::{finite_diff_check, DEFAULT_FD_EPS};
pub use layers::{
    conv1d_backward, conv1d_forward, dilated_conv1d_backward, dilated_conv1d_forward,
    dropout_mask, relu, relu_backward, ConvGrads, ConvShape,
};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::SeqTensor;
