//! State estimation for gravitational N-body scenes observed through a
//! pinhole camera. The known dynamics act as the predictor; per-frame screen
//! coordinates (optionally with a depth sample) are lifted into world space
//! by small trained networks and fused with the prediction through a
//! Kalman-style gain, either constant or produced by a recurrent gain
//! network. A dataset/experiment harness and CLI sit on top.

pub mod camera;
pub mod codec;
pub mod dynamics;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod nn;

pub use error::{Error, Result};
