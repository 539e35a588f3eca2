//! Differentiable building blocks. Each op has a forward function and a
//! backward function; layers with parameters accumulate gradients into their
//! own [`Parameter`]s so weights shared across branches receive the sum of
//! every path's contribution.

mod activation;
mod conv;
mod linear;
mod loss;
mod norm;
mod param;
mod pool;

pub use activation::{relu, relu_backward, sigmoid, sigmoid_backward};
pub use conv::{conv3d, conv3d_backward, conv_out_extent, Conv3d, Conv3dGrads, ConvGeometry};
pub use linear::{linear, linear_backward, Linear, LinearGrads};
pub use loss::{softmax, softmax_cross_entropy};
pub use norm::{BatchNorm3d, BnCache, BN_EPS, BN_MOMENTUM};
pub use param::{he_normal, ParamSet, Parameter};
pub use pool::{
    channel_pool, channel_pool_backward, concat_channel, global_pool3d, global_pool3d_backward,
    split_channel, PoolMode, Pooled,
};

/// Forward-pass mode. Only batch normalization behaves differently.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}
