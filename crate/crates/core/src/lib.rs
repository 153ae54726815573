//! CQ algorithm for convex split-feasibility problems and CQnet, a network
//! whose layers are CQ steps with learned operators.
//!
//! The crate is organised bottom-up:
//!
//! * [`sets`]: closed-form projections and their Jacobian-transpose actions.
//! * [`linops`]: dense, convolutional, pooling and bias-augmented operators,
//!   plus spectral certificates used to choose stable stepsizes.
//! * [`cq`]: the classical CQ solver and its multi-set step.
//! * [`net`]: CQnet forward pass, reverse mode and checkpoints.
//! * [`train`]: losses, SGD and the smoothness penalty.
//! * [`data`]: synthetic generators and the IDX reader.
//! * [`control`]: two-agent path finding with CQ dynamics.
//! * [`verify`]: property suites shared by the CLI and tests.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod cq;
pub mod data;
mod error;
pub mod export;
pub mod linalg;
pub mod linops;
pub mod net;
pub mod sets;
pub mod train;
pub mod verify;

pub use error::{CheckpointError, Error, Result};
