//! Covariance-on-covariance regression.
//!
//! Each subject contributes a predictor block and an outcome block of observations. The model
//! links the variance of a projected outcome to the variance of a projected predictor,
//!
//! ```text
//! log(γᵀ Σ_i γ) = α log(θᵀ Δ_i θ) + w_iᵀ β,
//! ```
//!
//! and estimates `(γ, θ, α, β)` jointly. Further components are extracted by deflation and the
//! number of components is chosen by a deviation-from-diagonality criterion.

pub mod baseline;
pub mod components;
pub mod data;
pub mod error;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod simgen;
pub mod solver;

pub use components::{fit_sequence, fit_sequence_pairs, FitSequence};
pub use data::{estimate_covariances, Cohort, ConstraintMode, CovariancePair, SubjectDataset};
pub use error::{CocregError, Result};
pub use solver::{fit_component, ComponentFit, SolverConfig};
