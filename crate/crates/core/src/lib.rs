//! Covariance estimation for 3D point-to-plane ICP.
//!
//! Three estimators are provided: brute-force Monte-Carlo sampling of ICP
//! results ([`sampling`]), a learned weighted average of training covariances
//! in descriptor space ([`predictor`]), and the closed-form estimate built from
//! the cost Hessian and its noise sensitivity ([`censi`]). [`eval`] compares
//! them with Gaussian KL divergence and trajectory consistency.

pub mod censi;
pub mod cloud;
pub mod dataset;
pub mod dbscan;
pub mod descriptor;
pub mod error;
pub mod eval;
pub mod icp;
pub mod kdtree;
mod par;
pub mod predictor;
pub mod rng;
pub mod sampling;
pub mod scene;
pub mod se3;

pub use error::{Error, Result};
pub use se3::{Covariance, RigidTransform, Twist};
