//! Rare-event estimation for small-noise diffusions.
//!
//! The quantity of interest is `rho = E[exp(-g(X_T)/eps)]` over paths of
//! `dX = b(X,t) dt + sqrt(eps) dW`, which decays exponentially as the noise
//! shrinks and starves crude Monte Carlo of signal. This crate builds the
//! standard escape route end to end:
//!
//! - [`sde`] simulates base and drift-tilted paths (Euler-Maruyama, seeded
//!   per-trajectory streams);
//! - [`basis`] parameterizes feedback controls over a Gaussian RBF
//!   dictionary;
//! - [`measure`] computes discrete Girsanov likelihood ratios and
//!   self-normalized importance weights;
//! - [`cross_entropy`] fits the control by iteratively reweighting toward
//!   the zero-variance measure and solving ridge-regularized normal
//!   equations;
//! - [`estimators`] produces crude and importance-sampling estimates with
//!   log-space arithmetic and log-efficiency diagnostics;
//! - [`pde`] solves the associated linear backward PDE as an independent
//!   ground truth for both `rho` and the optimal control;
//! - [`experiments`] wires everything into reproducible, artifact-writing
//!   studies driven by a flat TOML config.

pub mod basis;
pub mod cross_entropy;
pub mod estimators;
pub mod experiments;
pub mod measure;
pub mod pde;
pub mod sde;

pub use basis::{ControlModel, RbfDictionary};
pub use cross_entropy::{ce_iterate, ce_run, CeConfig, CeReport, Ridge};
pub use estimators::{is_estimate, mc_estimate, EstimateReport};
pub use measure::WeightSet;
pub use pde::{solve_feynman_kac, PdeGrid, PdeSolution};
pub use sde::{euler_step, simulate_batch, SdeProblem, Trajectory, TrajectoryBatch};
