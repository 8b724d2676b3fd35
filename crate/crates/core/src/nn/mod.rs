//! Differentiable layer math. Every op has a forward and an analytic
//! backward; none of them keeps hidden state.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod loss;

pub use activation::{relu_backward, relu_forward, relu_in_place};
pub use batchnorm::{
    batchnorm_backward, batchnorm_infer, batchnorm_train, BatchNormParams, BnGrads, BnMode, BnStats,
    RunningStats, BN_EPS, BN_MOMENTUM,
};
pub use conv::{
    conv2d_backward, conv2d_forward, conv_output_size, deconv2d_backward, deconv2d_forward,
    deconv_output_size, ConvGrads, ConvParams,
};
pub use linear::{global_avg_pool, global_avg_pool_backward, linear_backward, linear_forward, LinearGrads};
pub use loss::{mse_backward, softmax_cross_entropy};
