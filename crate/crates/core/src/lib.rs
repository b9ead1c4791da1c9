//! Projection robust Wasserstein (PRW) distance between discrete measures.
//!
//! The PRW distance of rank `k` between two weighted point clouds is the
//! maximum, over all k-dimensional orthonormal projections `U`, of the
//! optimal transport cost between the projected clouds. This crate computes
//! it by minimizing a smoothed dual over the product of the Stiefel manifold
//! and the dual potentials:
//!
//! * an outer Riemannian exponential augmented Lagrangian loop ([`realm`])
//!   drives a positive multiplier matrix and a penalty parameter,
//! * each subproblem is solved by an inexact Riemannian Barzilai-Borwein
//!   method ([`irbbs`]) whose dual block is updated by a flexible number of
//!   Sinkhorn iterations,
//! * every answer ships with a stationarity certificate built from a rounded
//!   feasible plan ([`transport::stationarity_certificate`]).
//!
//! Desk-scale verification comes from an exact assignment oracle and
//! finite-difference gradient checks ([`oracle`]); instances come from a
//! synthetic fragmented-hypercube generator or CSV point clouds
//! ([`datasets`]).

pub mod datasets;
pub mod error;
pub mod geometry;
pub mod irbbs;
pub mod oracle;
pub mod realm;
pub mod transport;

pub use error::{PrwError, Result};
pub use geometry::{qr_retraction, tangent_project, top_k_eigvecs, StiefelPoint, TangentVector};
pub use irbbs::{irbbs_solve, IrbbsConfig, IrbbsReport, WarmStart};
pub use realm::{realm_solve, RealmConfig, RealmReport};
pub use transport::{
    DualIterate, MultiplierState, PrwInstance, SinkhornMode, SinkhornOptions, SinkhornOutcome,
    StationarityCertificate,
};
