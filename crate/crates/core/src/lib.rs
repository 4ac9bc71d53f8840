//! Attack-resilient cooperative adaptive cruise control: estimator, monitor
//! and controller synthesis by LMIs, reachable-set safety assessment, and a
//! platoon simulator.

// NaN-rejecting guards are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod linalg;
pub mod model;
pub mod sdp;
pub mod synthesis;
pub mod assessment;
pub mod simulator;
pub mod config;
pub mod pipeline;
pub mod report;
