//! Layer blocks composed from the autodiff primitives.

mod checkpoint;
mod layers;
mod loss;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use layers::{
    adaptive_avg_pool_1x1, avg_pool2d, init_params, BasicConv2d, BasicConv3d, BatchNorm, Conv2d, Conv3dPointwise,
    DenseHead, Linear, BN_EPS, BN_MOMENTUM,
};
pub use loss::{cross_entropy, cross_entropy_labels, log_softmax, one_hot, softmax};

/// Batch-norm behaviour: batch statistics (and running-stat updates) or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
