//! Minimal reverse-mode automatic differentiation on a flat-vector tape,
//! plus the layer, optimizer, checkpoint, and gradient-checking pieces the
//! estimator needs. Values are one-dimensional f64 buffers; matrix-shaped
//! parameters are interpreted row-major by the ops that consume them.

mod checkpoint;
mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{bodies_to_flat, flat_to_bodies, Activation, Graph, Value};
pub(crate) use graph::fuse_coord;
pub use layers::{DenseLayer, GruCell};
pub use optim::OptimizerState;
pub use params::{ParamGrads, ParamId, ParamSet};
