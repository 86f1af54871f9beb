//! Differentiable layers and the reverse-mode tape they record onto.
//!
//! Forward passes build a [`Graph`]; [`Graph::backward`] replays it in
//! reverse. Parameters live in a [`ParamStore`] outside the graph so one set
//! of weights serves many forward passes.

mod functional;
pub mod gradcheck;
mod graph;
mod init;
pub mod kernels;
mod layers;
mod param;

pub use functional::{
    activation, batchnorm_forward, conv2d_forward, conv3d_forward, dropout_forward, global_avgpool,
    linear_forward, BatchNormState,
};
pub use gradcheck::{check_gradients, GradCheckOptions, GradReport};
pub use graph::{Activation, Gradients, Graph, Mode, Var};
pub use init::{glorot_bound, init_dense_uniform, init_symmetric};
pub use layers::{BatchNorm, Conv2d, Conv3d, Linear, LinearInit, BN_EPS, BN_MOMENTUM};
pub use param::{Buffer, BufferId, Param, ParamId, ParamKind, ParamStore};
