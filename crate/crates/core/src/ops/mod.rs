//! The fixed set of differentiable layer primitives. Each exposes an explicit
//! forward and backward; there is no autodiff tape.

mod activation;
pub(crate) mod conv;
mod interp;
pub(crate) mod linear;
mod norm;
pub(crate) mod pool;

pub use activation::{dropout_mask, mul, relu, relu_backward};
pub use conv::{conv2d, conv2d_backward, ConvGeometry, ConvGrads};
pub use interp::interpolate_bilinear;
pub use linear::{linear, linear_backward, LinearGrads};
pub use norm::{batchnorm, batchnorm_backward, BatchNormCache, BatchNormGrads, BN_EPS, BN_MOMENTUM};
pub use pool::{avgpool2d, avgpool2d_backward, maxpool2d, maxpool2d_backward};
