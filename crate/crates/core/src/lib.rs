//! Simulated force-feedback grasping: a deformable-object gripper simulator,
//! an adaptive grasp expert, an episode dataset, a small dense network
//! stack, diffusion policies over gripper action sequences, and an
//! evaluation harness with a grasp outcome taxonomy.

// `!(x > 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dataset;
pub mod eval;
pub mod expert;
pub mod nn;
pub mod policy;
pub mod rng;
pub mod sim;
