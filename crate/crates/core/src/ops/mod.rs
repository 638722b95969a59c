//! Layer kernels: convolutions (reference and xnor/popcount), batch
//! normalization, pooling, channel shuffle, and the fully connected head.

pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod pool;
pub mod shuffle;

pub use batchnorm::{
    batchnorm_backward, batchnorm_forward, batchnorm_forward_train, BatchNormState, BnCache,
};
pub use conv::{conv2d_backward, conv2d_reference, conv2d_xnor, ConvParams};
pub use linear::{fully_connected, fully_connected_backward};
pub use pool::{
    global_avgpool, global_avgpool_backward, maxpool2d, maxpool2d_backward, maxpool2d_with_argmax,
};
pub use shuffle::{channel_shuffle, channel_shuffle_backward};
