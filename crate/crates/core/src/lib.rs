//! Feedback-loop cloth-folding trajectory optimization on a desk-scale
//! quasi-static particle simulator.
//!
//! The crate wires five pieces together:
//!
//! - [`sim`]: a mass-spring cloth on a table, stepped quasi-statically by an
//!   end-effector dragging one grasped particle;
//! - [`perception`]: labeled point-cloud observations with the bottom half
//!   frozen at t = 0 as the alignment reference;
//! - [`adaptation`]: online grid-search estimation of the cloth's physical
//!   parameters from a short observation history (multi-step prediction
//!   error), exposing the forward model used for planning;
//! - [`planner`]: sampling-based MPC (MPPI) over constrained, place-reaching
//!   candidate action sequences, re-planned every step;
//! - [`harness`]: episode orchestration, fixed/random baselines and the
//!   benchmark runner behind the CLI.
//!
//! [`mask`] implements the ensemble selection heuristics that derive
//! full/bottom/upper cloth masks from candidate segmentation masks, and
//! [`geometry`] holds the shared rasterization/IoU/convex-hull kernels.

pub mod adaptation;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod mask;
pub mod perception;
pub mod planner;
pub mod sim;

pub use error::{
    AdaptError, GeometryError, HarnessError, MaskError, PerceptionError, PlanError, SimError,
};
pub use sim::{ClothParams, ClothState, Label, Pose, SimConfig};
