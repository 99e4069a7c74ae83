//! Differentiable operator kernels: forward passes plus explicit adjoints.
//! Operators are pure functions over immutable inputs; anything stateful
//! (batchnorm running stats, dropout draws) is passed in explicitly.

pub mod conv;
pub mod elem;
pub mod gemm;
pub mod loss;
pub mod norm;
pub mod pool;

pub use conv::{conv2d_backward, conv2d_forward, deconv2d_backward, deconv2d_forward};
pub use elem::{
    add, concat_channels, dense, dense_backward, dropout, dropout_backward, mul, relu,
    relu_backward, sigmoid, sigmoid_backward, slice_channels, slice_channels_backward,
    softmax_rows, tanh, tanh_backward,
};
pub use loss::{
    detection_loss, detection_loss_backward, identity_loss, identity_loss_backward,
    regression_loss, regression_loss_backward, LOG_CLAMP,
};
pub use norm::{
    batchnorm_eval, batchnorm_eval_backward, batchnorm_train, batchnorm_train_backward, BnSaved,
    BnStats, BN_EPS, BN_MOMENTUM,
};
pub use pool::{
    avgpool_spatial, avgpool_spatial_backward, broadcast_spatial, broadcast_spatial_backward,
    maxpool2x2, maxpool2x2_backward, unpool2x2, unpool2x2_backward, PoolIndices,
};
