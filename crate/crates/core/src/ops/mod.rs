//! Layer primitives with hand-paired gradients.

pub mod batchnorm;
pub mod conv;
pub mod layers;
pub mod loss;
pub mod optim;

pub use batchnorm::{batchnorm, batchnorm_grad, BatchNorm, BnCache, BnLayerState, Mode};
pub use conv::{conv2d, conv2d_grad, ConvGeometry};
pub use layers::{
    global_avgpool, global_avgpool_grad, linear, linear_grad, maxpool2d, maxpool2d_grad, relu,
    relu_grad,
};
pub use loss::{argmax_rows, softmax_cross_entropy};
pub use optim::{lr_schedule, sgd_step, SgdParams};
