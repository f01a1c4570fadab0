//! Differentiable building blocks with hand-written backward passes.
//!
//! Every forward returns its output together with a context value; the
//! matching backward consumes that context, so a context can be used at
//! most once and only after its forward.

mod batchnorm;
mod conv;
mod dropout;
mod linear;
mod pool;

pub use batchnorm::{DEFAULT_EPS, DEFAULT_MOMENTUM, batchnorm_backward, batchnorm_forward, BatchNorm, BatchNormCtx, BatchNormGrads};
pub use conv::{conv2d_backward, conv2d_forward, Conv2dCtx, Conv2dGrads, KERNEL};
pub use dropout::{dropout_backward, dropout_forward, DropoutCtx, DropoutMask};
pub use linear::{linear_backward, linear_forward, LinearCtx, LinearGrads};
pub use pool::{
    avgpool1d_backward, avgpool1d_forward, maxpool2d_backward, maxpool2d_forward, maxpool2d_forward_pinned,
    AvgPool1dCtx,
    MaxPool2dCtx,
};

/// Whether stochastic and batch-statistic layers run in training or inference form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
