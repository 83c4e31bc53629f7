//! Multiple components by deflation, and component-count selection by deviation from diagonality.
//!
//! Component `k` is fitted on data with the spans of the earlier projections removed. The
//! deflated covariances are singular along the removed directions, so each later fit is carried
//! out in coordinates of the orthogonal complement and mapped back.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{estimate_covariances, pooled_constraints, Cohort, ConstraintMatrices, ConstraintMode, CovariancePair, PD_REL_TOL};
use crate::error::{CocregError, Result};
use crate::linalg::{is_strictly_pd, log_det_spd, orthogonal_complement, orthonormalize_columns, sign_normalize, symmetrize};
use crate::solver::{fit_component_with, objective, ComponentFit, SolverConfig};

pub const DEFAULT_THRESHOLD: f64 = 2.0;

const ORTHONORMAL_TOL: f64 = 1e-8;

/// `Y − Y B Bᵀ` for a basis `B` with orthonormal columns.
pub fn deflate(data: &DMatrix<f64>, basis: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if basis.ncols() == 0 {
        return Ok(data.clone());
    }
    if basis.nrows() != data.ncols() {
        return Err(CocregError::Validation(format!(
            "basis has {} rows but data has {} columns",
            basis.nrows(),
            data.ncols()
        )));
    }
    if basis.ncols() > data.ncols() {
        return Err(CocregError::Validation("basis has more columns than the data".into()));
    }
    let gram_err = (basis.tr_mul(basis) - DMatrix::identity(basis.ncols(), basis.ncols())).amax();
    if gram_err > ORTHONORMAL_TOL {
        return Err(CocregError::Validation(format!(
            "deflation basis is not orthonormal (max deviation {gram_err:e})"
        )));
    }
    Ok(data - (data * basis) * basis.transpose())
}

/// `log ν(A) = log det diag(A) − log det A`.
pub fn log_nu(a: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() == 1 {
        if a[(0, 0)] > 0.0 {
            return Ok(0.0);
        }
        return Err(CocregError::Factorization("1×1 matrix is not positive".into()));
    }
    let diag: f64 = a.diagonal().iter().map(|d| d.ln()).sum();
    let ld = log_det_spd(a)?;
    Ok((diag - ld).max(0.0))
}

/// `ν(A) = det diag(A) / det A`, at least 1 for SPD `A`.
pub fn nu(a: &DMatrix<f64>) -> Result<f64> {
    Ok(log_nu(a)?.exp())
}

/// Weighted geometric mean over subjects of `ν(Bᵀ M_i B)`, weights normalized to sum 1.
pub fn dfd_side<'a>(
    basis: &DMatrix<f64>,
    mats: impl IntoIterator<Item = &'a DMatrix<f64>>,
    weights: &[f64],
) -> Result<f64> {
    if basis.ncols() == 0 {
        return Err(CocregError::Validation("DfD needs at least one basis column".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(CocregError::Validation("DfD weights must have a positive sum".into()));
    }
    let mut acc = 0.0;
    let mut count = 0;
    for (m, w) in mats.into_iter().zip(weights) {
        let mut projected = basis.tr_mul(&(m * basis));
        symmetrize(&mut projected);
        acc += w / total * log_nu(&projected)?;
        count += 1;
    }
    if count != weights.len() {
        return Err(CocregError::Validation("DfD weights and matrices differ in number".into()));
    }
    Ok(acc.exp())
}

/// Both sides of the deviation-from-diagonality measure and their maximum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DfdValue {
    pub gamma_side: f64,
    pub theta_side: f64,
    pub value: f64,
}

/// DfD of the first `k` columns of the projection bases against `pairs`
/// (`v_i` weights on the outcome side, `u_i` on the predictor side).
pub fn dfd(k: usize, gamma_basis: &DMatrix<f64>, theta_basis: &DMatrix<f64>, pairs: &[CovariancePair]) -> Result<DfdValue> {
    if k == 0 || k > gamma_basis.ncols() || k > theta_basis.ncols() {
        return Err(CocregError::Validation(format!(
            "k = {k} out of range for bases with {} and {} columns",
            gamma_basis.ncols(),
            theta_basis.ncols()
        )));
    }
    if k == 1 {
        return Ok(DfdValue { gamma_side: 1.0, theta_side: 1.0, value: 1.0 });
    }
    let g = gamma_basis.columns(0, k).into_owned();
    let t = theta_basis.columns(0, k).into_owned();
    let vw: Vec<f64> = pairs.iter().map(|p| p.v as f64).collect();
    let uw: Vec<f64> = pairs.iter().map(|p| p.u as f64).collect();
    let gs = dfd_side(&g, pairs.iter().map(|p| &p.sigma_hat), &vw)?;
    let ts = dfd_side(&t, pairs.iter().map(|p| &p.delta_hat), &uw)?;
    Ok(DfdValue { gamma_side: gs, theta_side: ts, value: gs.max(ts) })
}

/// `max{k : DfD(k) ≤ threshold}`, or 0.
pub fn select_k(trace: &[(usize, f64)], threshold: f64) -> usize {
    trace
        .iter()
        .filter(|(_, d)| *d <= threshold)
        .map(|(k, _)| *k)
        .max()
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state")]
pub enum SequenceStatus {
    Complete,
    /// Fewer than the requested components could be fitted.
    Truncated { requested: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSequence {
    pub components: Vec<ComponentFit>,
    pub dfd_trace: Vec<(usize, f64)>,
    pub dfd_sides: Vec<DfdValue>,
    pub selected_k: usize,
    pub threshold: f64,
    pub constraint_mode: ConstraintMode,
    pub status: SequenceStatus,
}

impl FitSequence {
    pub fn gamma_matrix(&self) -> DMatrix<f64> {
        stack(self.components.iter().map(|c| &c.gamma))
    }

    pub fn theta_matrix(&self) -> DMatrix<f64> {
        stack(self.components.iter().map(|c| &c.theta))
    }
}

fn stack<'a>(cols: impl Iterator<Item = &'a DVector<f64>>) -> DMatrix<f64> {
    let cols: Vec<&DVector<f64>> = cols.collect();
    let rows = cols.first().map_or(0, |c| c.len());
    DMatrix::from_fn(rows, cols.len(), |i, j| cols[j][i])
}

fn project(m: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = b.tr_mul(&(m * b));
    symmetrize(&mut out);
    out
}

/// Fits up to `max_k` components on a raw cohort.
pub fn fit_sequence(cohort: &Cohort, config: &SolverConfig, max_k: usize, threshold: f64) -> Result<FitSequence> {
    let pairs = estimate_covariances(cohort)?;
    fit_sequence_pairs(&pairs, &cohort.covariates(), config, max_k, threshold)
}

/// Fits up to `max_k` components from covariance pairs.
///
/// The covariance of deflated data `Y(I − ΓΓᵀ)` is `(I − ΓΓᵀ) Σ̂ (I − ΓΓᵀ)`; restricted to an
/// orthonormal basis `B` of the complement of `span(Γ)` it is `Bᵀ Σ̂ B`, on which the next
/// component is fitted before mapping `γ = B g` back.
pub fn fit_sequence_pairs(
    pairs: &[CovariancePair],
    covariates: &[DVector<f64>],
    config: &SolverConfig,
    max_k: usize,
    threshold: f64,
) -> Result<FitSequence> {
    let first = pairs.first().ok_or_else(|| CocregError::Validation("no covariance pairs".into()))?;
    let (q, p) = (first.sigma_hat.nrows(), first.delta_hat.nrows());
    if max_k == 0 || max_k > p.min(q) {
        return Err(CocregError::Validation(format!(
            "max_k must lie in 1..={} (min(p, q)), got {max_k}",
            p.min(q)
        )));
    }
    if !(threshold > 0.0) {
        return Err(CocregError::Validation(format!("threshold must be positive, got {threshold}")));
    }
    let full_constraints = pooled_constraints(pairs, config.constraint_mode)?;
    let mut components: Vec<ComponentFit> = Vec::new();
    let mut status = SequenceStatus::Complete;

    for k in 1..=max_k {
        let fit = if k == 1 {
            fit_component_with(pairs, covariates, &full_constraints, config)?
        } else {
            match fit_deflated(pairs, covariates, config, &full_constraints, &components) {
                Ok(fit) => fit,
                Err(e) => {
                    log::warn!("component {k}: stopping the sequence: {e}");
                    status = SequenceStatus::Truncated { requested: max_k, reason: format!("component {k}: {e}") };
                    break;
                }
            }
        };
        components.push(fit);
    }

    let seq_g = stack(components.iter().map(|c| &c.gamma));
    let seq_t = stack(components.iter().map(|c| &c.theta));
    let mut dfd_trace = Vec::with_capacity(components.len());
    let mut dfd_sides = Vec::with_capacity(components.len());
    for k in 1..=components.len() {
        let d = dfd(k, &seq_g, &seq_t, pairs)?;
        dfd_trace.push((k, d.value));
        dfd_sides.push(d);
    }
    Ok(FitSequence {
        selected_k: select_k(&dfd_trace, threshold),
        components,
        dfd_trace,
        dfd_sides,
        threshold,
        constraint_mode: config.constraint_mode,
        status,
    })
}

fn fit_deflated(
    pairs: &[CovariancePair],
    covariates: &[DVector<f64>],
    config: &SolverConfig,
    full: &ConstraintMatrices,
    earlier: &[ComponentFit],
) -> Result<ComponentFit> {
    let q = full.h_y.nrows();
    let p = full.h_x.nrows();
    let by = orthogonal_complement(&orthonormalize_columns(&stack(earlier.iter().map(|c| &c.gamma))), q);
    let bx = orthogonal_complement(&orthonormalize_columns(&stack(earlier.iter().map(|c| &c.theta))), p);
    let projected: Vec<CovariancePair> = pairs
        .iter()
        .map(|pr| CovariancePair {
            sigma_hat: project(&pr.sigma_hat, &by),
            delta_hat: project(&pr.delta_hat, &bx),
            v: pr.v,
            u: pr.u,
        })
        .collect();
    if let Some(i) = projected
        .iter()
        .position(|pr| !is_strictly_pd(&pr.sigma_hat, PD_REL_TOL) || !is_strictly_pd(&pr.delta_hat, PD_REL_TOL))
    {
        return Err(CocregError::NotPositiveDefinite { subject: format!("index {i}"), which: "deflated" });
    }
    let constraints = ConstraintMatrices {
        h_y: project(&full.h_y, &by),
        h_x: project(&full.h_x, &bx),
        mode: full.mode,
    };
    let sub = fit_component_with(&projected, covariates, &constraints, config)?;
    let mut gamma = &by * &sub.gamma;
    let mut theta = &bx * &sub.theta;
    sign_normalize(&mut gamma);
    sign_normalize(&mut theta);
    let obj = objective(&gamma, &theta, sub.alpha, &sub.beta, pairs, covariates)?;
    Ok(ComponentFit { gamma, theta, objective: obj, ..sub })
}
