//! Single-component estimation.
//!
//! Minimizes the mean squared log-linear residual
//!
//! ```text
//! ℓ = (1/n) Σ_i { log(γᵀ Σ̂_i γ) − α log(θᵀ Δ̂_i θ) − w_iᵀ β }²,   γᵀ H_y γ = 1,  θᵀ H_x θ = 1
//! ```
//!
//! by block coordinate descent in the order α → β → θ → γ. The α and β blocks
//! have closed-form least-squares updates. The projection blocks freeze the
//! current quadratic forms, which turns the stationarity condition into a
//! generalized eigenproblem `A v = λ H v`; every eigenvector is scored on the
//! true objective and the best one is accepted only if it strictly improves.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{pooled_constraints, pooled_outcome, pooled_predictor, ConstraintMatrices, ConstraintMode, CovariancePair};
use crate::error::{CocregError, Result};
use crate::inference::FixedProjectionDesign;
use crate::io::serde_dvector;
use crate::linalg::{generalized_symmetric_eigen, quad_form, quad_forms_columns, sign_normalize, solve_spd_guarded, symmetric_eigen_desc};

/// Condition-number ceiling for the covariate Gram matrix.
pub const MAX_GRAM_CONDITION: f64 = 1e12;

/// Number of leading pooled eigenvectors per block used as deterministic starts.
pub const EIGEN_INIT_TOP: usize = 3;

const CONVERGENCE_FLOOR: f64 = 1e-12;

const FALLBACK_HALVINGS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Relative objective-change threshold.
    pub tol: f64,
    pub max_iter: usize,
    /// Random starts on the constraint ellipsoids.
    pub n_restarts: usize,
    pub seed: u64,
    pub constraint_mode: ConstraintMode,
    /// Also start from pairs of leading pooled-covariance eigenvectors.
    pub eigen_init: bool,
    pub selection: Selection,
    /// When no eigenvector improves a projection block, try a backtracking Riemannian-gradient
    /// step instead of keeping the iterate. Off by default.
    pub gradient_fallback: bool,
}

/// Rule for choosing among restarts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Largest share of outcome log-variance explained, `1 − ℓ / Var(log γᵀΣ̂γ)`.
    #[default]
    RSquared,
    /// Smallest objective.
    Objective,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
            n_restarts: 20,
            seed: 0,
            constraint_mode: ConstraintMode::Identity,
            eigen_init: true,
            selection: Selection::RSquared,
            gradient_fallback: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || !self.tol.is_finite() {
            return Err(CocregError::Validation(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(CocregError::Validation("max_iter must be at least 1".into()));
        }
        if self.n_restarts == 0 {
            return Err(CocregError::Validation("n_restarts must be at least 1".into()));
        }
        Ok(())
    }
}

/// One estimated component pair with its coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentFit {
    #[serde(with = "serde_dvector")]
    pub gamma: DVector<f64>,
    #[serde(with = "serde_dvector")]
    pub theta: DVector<f64>,
    pub alpha: f64,
    #[serde(with = "serde_dvector")]
    pub beta: DVector<f64>,
    pub objective: f64,
    pub n_iter: usize,
    pub converged: bool,
    pub restart_index: usize,
}

/// Outcome of a γ or θ block update.
#[derive(Debug, Clone)]
pub struct ProjectionUpdate {
    pub vector: DVector<f64>,
    /// Objective at the returned vector, other blocks held fixed.
    pub objective: f64,
    pub accepted: bool,
    /// Generalized eigenvalue (Lagrange multiplier) of the accepted eigenvector.
    pub multiplier: Option<f64>,
}

/// Per-iteration diagnostics of one coordinate-descent run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Objective after the α, β, θ and γ steps of this iteration.
    pub step_objectives: [f64; 4],
    pub gamma_constraint: f64,
    pub theta_constraint: f64,
    pub gamma_multiplier: Option<f64>,
    pub theta_multiplier: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RestartRun {
    pub fit: ComponentFit,
    /// Objective at the initialization (α = 0, β = 0).
    pub initial_objective: f64,
    pub trace: Vec<IterationRecord>,
}

fn check_inputs(pairs: &[CovariancePair], covariates: &[DVector<f64>]) -> Result<()> {
    if pairs.is_empty() {
        return Err(CocregError::Validation("no subjects".into()));
    }
    if pairs.len() != covariates.len() {
        return Err(CocregError::Validation(format!(
            "{} covariance pairs but {} covariate vectors",
            pairs.len(),
            covariates.len()
        )));
    }
    let r = covariates[0].len();
    if covariates.iter().any(|w| w.len() != r) {
        return Err(CocregError::Validation("covariate vectors differ in length".into()));
    }
    Ok(())
}

pub(crate) fn log_outcome_forms(gamma: &DVector<f64>, pairs: &[CovariancePair]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, pr)| {
            let f = quad_form(&pr.sigma_hat, gamma);
            if f > 0.0 && f.is_finite() {
                Ok(f.ln())
            } else {
                Err(CocregError::NonPositiveForm { subject: i, which: "outcome" })
            }
        })
        .collect()
}

pub(crate) fn log_predictor_forms(theta: &DVector<f64>, pairs: &[CovariancePair]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, pr)| {
            let f = quad_form(&pr.delta_hat, theta);
            if f > 0.0 && f.is_finite() {
                Ok(f.ln())
            } else {
                Err(CocregError::NonPositiveForm { subject: i, which: "predictor" })
            }
        })
        .collect()
}

fn linear_predictor(covariates: &[DVector<f64>], beta: &DVector<f64>) -> Result<Vec<f64>> {
    covariates
        .iter()
        .map(|w| {
            if w.len() != beta.len() {
                Err(CocregError::Validation(format!(
                    "beta has length {}, covariates have length {}",
                    beta.len(),
                    w.len()
                )))
            } else {
                Ok(w.dot(beta))
            }
        })
        .collect()
}

fn mean_square(res: impl Iterator<Item = f64>, n: usize) -> f64 {
    res.map(|e| e * e).sum::<f64>() / n as f64
}

/// Mean squared log-linear residual at the given parameters.
pub fn objective(
    gamma: &DVector<f64>,
    theta: &DVector<f64>,
    alpha: f64,
    beta: &DVector<f64>,
    pairs: &[CovariancePair],
    covariates: &[DVector<f64>],
) -> Result<f64> {
    check_inputs(pairs, covariates)?;
    let lg = log_outcome_forms(gamma, pairs)?;
    let lx = log_predictor_forms(theta, pairs)?;
    let wb = linear_predictor(covariates, beta)?;
    Ok(mean_square(
        (0..pairs.len()).map(|i| lg[i] - alpha * lx[i] - wb[i]),
        pairs.len(),
    ))
}

/// Closed-form minimizer of the objective in α.
pub fn update_alpha(
    theta: &DVector<f64>,
    gamma: &DVector<f64>,
    beta: &DVector<f64>,
    pairs: &[CovariancePair],
    covariates: &[DVector<f64>],
) -> Result<f64> {
    check_inputs(pairs, covariates)?;
    let lg = log_outcome_forms(gamma, pairs)?;
    let lx = log_predictor_forms(theta, pairs)?;
    let wb = linear_predictor(covariates, beta)?;
    alpha_from_forms(&lg, &lx, &wb)
}

fn alpha_from_forms(lg: &[f64], lx: &[f64], wb: &[f64]) -> Result<f64> {
    let denom: f64 = lx.iter().map(|x| x * x).sum();
    if !(denom > 0.0) {
        return Err(CocregError::DegeneratePredictor);
    }
    let numer: f64 = (0..lg.len()).map(|i| (lg[i] - wb[i]) * lx[i]).sum();
    Ok(numer / denom)
}

/// Closed-form minimizer of the objective in β (normal equations).
pub fn update_beta(
    theta: &DVector<f64>,
    gamma: &DVector<f64>,
    alpha: f64,
    pairs: &[CovariancePair],
    covariates: &[DVector<f64>],
) -> Result<DVector<f64>> {
    check_inputs(pairs, covariates)?;
    let lg = log_outcome_forms(gamma, pairs)?;
    let lx = log_predictor_forms(theta, pairs)?;
    beta_from_forms(&lg, &lx, alpha, covariates)
}

fn beta_from_forms(lg: &[f64], lx: &[f64], alpha: f64, covariates: &[DVector<f64>]) -> Result<DVector<f64>> {
    let r = covariates[0].len();
    let mut gram = DMatrix::zeros(r, r);
    let mut rhs = DVector::zeros(r);
    for (i, w) in covariates.iter().enumerate() {
        gram.ger(1.0, w, w, 1.0);
        rhs.axpy(lg[i] - alpha * lx[i], w, 1.0);
    }
    solve_spd_guarded(&gram, &rhs, MAX_GRAM_CONDITION)
}

/// Scores every eigenvector (columns of `vectors`) on `(1/n) Σ (scale·log(vᵀ M_i v) − target_i)²`.
fn score_candidates<'a>(
    vectors: &DMatrix<f64>,
    mats: impl Iterator<Item = &'a DMatrix<f64>>,
    scale: f64,
    target: &[f64],
) -> Vec<f64> {
    let k = vectors.ncols();
    let n = target.len();
    let mut acc = vec![0.0; k];
    let mut valid = vec![true; k];
    for (i, m) in mats.enumerate() {
        let forms = quad_forms_columns(m, vectors);
        for j in 0..k {
            let f = forms[j];
            if f > 0.0 && f.is_finite() {
                let e = scale * f.ln() - target[i];
                acc[j] += e * e;
            } else {
                valid[j] = false;
            }
        }
    }
    (0..k)
        .map(|j| if valid[j] { acc[j] / n as f64 } else { f64::INFINITY })
        .collect()
}

fn pick_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, &s) in scores.iter().enumerate() {
        if s.is_finite() && best.is_none_or(|b| s < scores[b]) {
            best = Some(j);
        }
    }
    best
}

/// γ block: eigenvectors of `A₁ = (2/n) Σ ((log ξ_i − U_i)/ξ_i) Σ̂_i` relative to `H_y`,
/// with `ξ_i = γ₀ᵀ Σ̂_i γ₀` and `U_i = α log(θᵀ Δ̂_i θ) + w_iᵀ β`.
pub fn update_gamma(
    previous_gamma: &DVector<f64>,
    theta: &DVector<f64>,
    alpha: f64,
    beta: &DVector<f64>,
    pairs: &[CovariancePair],
    covariates: &[DVector<f64>],
    h_y: &DMatrix<f64>,
) -> Result<ProjectionUpdate> {
    gamma_step(previous_gamma, theta, alpha, beta, pairs, covariates, h_y, false)
}

#[allow(clippy::too_many_arguments)]
fn gamma_step(
    previous_gamma: &DVector<f64>,
    theta: &DVector<f64>,
    alpha: f64,
    beta: &DVector<f64>,
    pairs: &[CovariancePair],
    covariates: &[DVector<f64>],
    h_y: &DMatrix<f64>,
    fallback: bool,
) -> Result<ProjectionUpdate> {
    check_inputs(pairs, covariates)?;
    let n = pairs.len();
    let lx = log_predictor_forms(theta, pairs)?;
    let wb = linear_predictor(covariates, beta)?;
    let target: Vec<f64> = (0..n).map(|i| alpha * lx[i] + wb[i]).collect();
    let q = previous_gamma.len();
    let mut a1 = DMatrix::zeros(q, q);
    let mut current = 0.0;
    for (i, pr) in pairs.iter().enumerate() {
        let xi = quad_form(&pr.sigma_hat, previous_gamma);
        if !(xi > 0.0) {
            return Err(CocregError::NonPositiveForm { subject: i, which: "outcome" });
        }
        let resid = xi.ln() - target[i];
        current += resid * resid;
        a1 += &pr.sigma_hat * (2.0 / n as f64 * resid / xi);
    }
    current /= n as f64;
    crate::linalg::symmetrize(&mut a1);
    let eig = generalized_symmetric_eigen(&a1, h_y)?;
    let score = |v: &DMatrix<f64>| score_candidates(v, pairs.iter().map(|p| &p.sigma_hat), 1.0, &target);
    let scores = score(&eig.vectors);
    let update = accept_if_better(previous_gamma, current, &eig.vectors, &eig.values, &scores);
    if update.accepted || !fallback {
        return Ok(update);
    }
    let grad = &a1 * previous_gamma * 2.0;
    Ok(gradient_fallback(previous_gamma, current, &grad, h_y, &score).unwrap_or(update))
}

/// θ block: eigenvectors of `A₂ = (2α/n) Σ ((α log ζ_i − V_i)/ζ_i) Δ̂_i` relative to `H_x`,
/// with `ζ_i = θ₀ᵀ Δ̂_i θ₀` and `V_i = log(γᵀ Σ̂_i γ) − w_iᵀ β`. For `α = 0` θ is unidentified
/// and returned unchanged.
pub fn update_theta(
    previous_theta: &DVector<f64>,
    gamma: &DVector<f64>,
    alpha: f64,
    beta: &DVector<f64>,
    pairs: &[CovariancePair],
    covariates: &[DVector<f64>],
    h_x: &DMatrix<f64>,
) -> Result<ProjectionUpdate> {
    theta_step(previous_theta, gamma, alpha, beta, pairs, covariates, h_x, false)
}

#[allow(clippy::too_many_arguments)]
fn theta_step(
    previous_theta: &DVector<f64>,
    gamma: &DVector<f64>,
    alpha: f64,
    beta: &DVector<f64>,
    pairs: &[CovariancePair],
    covariates: &[DVector<f64>],
    h_x: &DMatrix<f64>,
    fallback: bool,
) -> Result<ProjectionUpdate> {
    check_inputs(pairs, covariates)?;
    let n = pairs.len();
    let lg = log_outcome_forms(gamma, pairs)?;
    let wb = linear_predictor(covariates, beta)?;
    let target: Vec<f64> = (0..n).map(|i| lg[i] - wb[i]).collect();
    let p = previous_theta.len();
    let mut a2 = DMatrix::zeros(p, p);
    let mut current = 0.0;
    for (i, pr) in pairs.iter().enumerate() {
        let zeta = quad_form(&pr.delta_hat, previous_theta);
        if !(zeta > 0.0) {
            return Err(CocregError::NonPositiveForm { subject: i, which: "predictor" });
        }
        let resid = alpha * zeta.ln() - target[i];
        current += resid * resid;
        if alpha != 0.0 {
            a2 += &pr.delta_hat * (2.0 * alpha / n as f64 * resid / zeta);
        }
    }
    current /= n as f64;
    if alpha == 0.0 {
        return Ok(ProjectionUpdate {
            vector: previous_theta.clone(),
            objective: current,
            accepted: false,
            multiplier: None,
        });
    }
    crate::linalg::symmetrize(&mut a2);
    let eig = generalized_symmetric_eigen(&a2, h_x)?;
    let score = |v: &DMatrix<f64>| score_candidates(v, pairs.iter().map(|p| &p.delta_hat), alpha, &target);
    let scores = score(&eig.vectors);
    let update = accept_if_better(previous_theta, current, &eig.vectors, &eig.values, &scores);
    if update.accepted || !fallback {
        return Ok(update);
    }
    let grad = &a2 * previous_theta * 2.0;
    Ok(gradient_fallback(previous_theta, current, &grad, h_x, &score).unwrap_or(update))
}

/// Backtracking along the Riemannian gradient on `{v : vᵀ H v = 1}`, used when no eigenvector
/// improves. `grad` is the Euclidean gradient of the block objective at `previous`.
fn gradient_fallback(
    previous: &DVector<f64>,
    current: f64,
    grad: &DVector<f64>,
    h: &DMatrix<f64>,
    score: &dyn Fn(&DMatrix<f64>) -> Vec<f64>,
) -> Option<ProjectionUpdate> {
    let h_inv_grad = h.clone().cholesky()?.solve(grad);
    let hh = quad_form(h, previous);
    let dir = -(h_inv_grad - previous * (previous.dot(grad) / hh));
    let norm = quad_form(h, &dir).sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return None;
    }
    let dir = dir / norm;
    let mut step = 1.0;
    for _ in 0..FALLBACK_HALVINGS {
        let cand = normalize_to(&(previous + &dir * step), h);
        let m = DMatrix::from_column_slice(cand.len(), 1, cand.as_slice());
        let s = score(&m)[0];
        if s < current {
            return Some(ProjectionUpdate { vector: cand, objective: s, accepted: true, multiplier: None });
        }
        step *= 0.5;
    }
    None
}

fn accept_if_better(
    previous: &DVector<f64>,
    current: f64,
    vectors: &DMatrix<f64>,
    values: &[f64],
    scores: &[f64],
) -> ProjectionUpdate {
    match pick_best(scores) {
        Some(j) if scores[j] < current => ProjectionUpdate {
            vector: vectors.column(j).into_owned(),
            objective: scores[j],
            accepted: true,
            multiplier: Some(values[j]),
        },
        _ => ProjectionUpdate {
            vector: previous.clone(),
            objective: current,
            accepted: false,
            multiplier: None,
        },
    }
}

/// `|⟨a/‖a‖, b/‖b‖⟩|`.
pub fn similarity(a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CocregError::Validation(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(CocregError::Validation("similarity of a zero vector".into()));
    }
    Ok((a.dot(b) / (na * nb)).abs().min(1.0))
}

fn normalize_to(v: &DVector<f64>, h: &DMatrix<f64>) -> DVector<f64> {
    v / quad_form(h, v).sqrt()
}

fn converged(prev: f64, cur: f64, tol: f64) -> bool {
    (prev - cur).abs() <= (tol * prev.abs()).max(CONVERGENCE_FLOOR)
}

/// Runs coordinate descent from one initialization. `α⁽⁰⁾ = 0`, `β⁽⁰⁾ = 0`.
pub fn run_from_start(
    gamma0: &DVector<f64>,
    theta0: &DVector<f64>,
    pairs: &[CovariancePair],
    covariates: &[DVector<f64>],
    constraints: &ConstraintMatrices,
    config: &SolverConfig,
    restart_index: usize,
    record_trace: bool,
) -> Result<RestartRun> {
    let r = covariates[0].len();
    let mut gamma = gamma0.clone();
    let mut theta = theta0.clone();
    let mut alpha = 0.0;
    let mut beta = DVector::zeros(r);
    let initial_objective = objective(&gamma, &theta, alpha, &beta, pairs, covariates)?;
    let mut prev = initial_objective;
    let mut trace = Vec::new();
    let mut n_iter = 0;
    let mut is_converged = false;

    for iteration in 1..=config.max_iter {
        n_iter = iteration;
        let lg = log_outcome_forms(&gamma, pairs)?;
        let lx = log_predictor_forms(&theta, pairs)?;
        let wb = linear_predictor(covariates, &beta)?;
        alpha = alpha_from_forms(&lg, &lx, &wb)?;
        let after_alpha = if record_trace {
            objective(&gamma, &theta, alpha, &beta, pairs, covariates)?
        } else {
            f64::NAN
        };
        beta = beta_from_forms(&lg, &lx, alpha, covariates)?;
        let after_beta = if record_trace {
            objective(&gamma, &theta, alpha, &beta, pairs, covariates)?
        } else {
            f64::NAN
        };
        let th = theta_step(&theta, &gamma, alpha, &beta, pairs, covariates, &constraints.h_x, config.gradient_fallback)?;
        theta = th.vector;
        let after_theta = th.objective;
        let gm = gamma_step(&gamma, &theta, alpha, &beta, pairs, covariates, &constraints.h_y, config.gradient_fallback)?;
        gamma = gm.vector;
        let cur = gm.objective;
        if record_trace {
            trace.push(IterationRecord {
                iteration,
                step_objectives: [after_alpha, after_beta, after_theta, cur],
                gamma_constraint: quad_form(&constraints.h_y, &gamma),
                theta_constraint: quad_form(&constraints.h_x, &theta),
                gamma_multiplier: gm.multiplier,
                theta_multiplier: th.multiplier,
            });
        }
        if converged(prev, cur, config.tol) {
            is_converged = true;
            break;
        }
        prev = cur;
    }

    // joint least squares at the final projections: never worse than the alternating values,
    // and a fixed point of both closed-form updates
    let design = FixedProjectionDesign::new(&gamma, &theta, pairs, covariates)?;
    if let Ok((a, b)) = design.solve(0..pairs.len()) {
        alpha = a;
        beta = b;
    }
    sign_normalize(&mut gamma);
    sign_normalize(&mut theta);
    let obj = objective(&gamma, &theta, alpha, &beta, pairs, covariates)?;
    Ok(RestartRun {
        fit: ComponentFit {
            gamma,
            theta,
            alpha,
            beta,
            objective: obj,
            n_iter,
            converged: is_converged,
            restart_index,
        },
        initial_objective,
        trace,
    })
}

/// Initial `(γ, θ)` pairs: leading pooled eigenvector combinations, then seeded random draws.
pub fn initializations(
    pairs: &[CovariancePair],
    constraints: &ConstraintMatrices,
    config: &SolverConfig,
) -> Vec<(DVector<f64>, DVector<f64>)> {
    let q = constraints.h_y.nrows();
    let p = constraints.h_x.nrows();
    let mut inits = Vec::new();
    if config.eigen_init {
        if let (Some(sy), Some(sx)) = (pooled_outcome(pairs), pooled_predictor(pairs)) {
            let (_, vy) = symmetric_eigen_desc(&sy);
            let (_, vx) = symmetric_eigen_desc(&sx);
            for a in 0..EIGEN_INIT_TOP.min(q) {
                for b in 0..EIGEN_INIT_TOP.min(p) {
                    inits.push((
                        normalize_to(&vy.column(a).into_owned(), &constraints.h_y),
                        normalize_to(&vx.column(b).into_owned(), &constraints.h_x),
                    ));
                }
            }
        }
    }
    let offset = inits.len();
    for k in 0..config.n_restarts {
        let idx = offset + k;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ idx as u64);
        let g = DVector::from_fn(q, |_, _| StandardNormal.sample(&mut rng));
        let t = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
        inits.push((normalize_to(&g, &constraints.h_y), normalize_to(&t, &constraints.h_x)));
    }
    inits
}

/// Fits one component with the constraint metrics implied by `config.constraint_mode`.
pub fn fit_component(
    pairs: &[CovariancePair],
    covariates: &[DVector<f64>],
    config: &SolverConfig,
) -> Result<ComponentFit> {
    check_inputs(pairs, covariates)?;
    let constraints = pooled_constraints(pairs, config.constraint_mode)?;
    fit_component_with(pairs, covariates, &constraints, config)
}

/// Share of the across-subject variance of `log(γᵀΣ̂_iγ)` explained by the fit. NaN when that variance is zero.
pub fn r_squared(fit: &ComponentFit, pairs: &[CovariancePair]) -> Result<f64> {
    let lg = log_outcome_forms(&fit.gamma, pairs)?;
    let mean = lg.iter().sum::<f64>() / lg.len() as f64;
    let var = lg.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / lg.len() as f64;
    if var > 0.0 {
        Ok(1.0 - fit.objective / var)
    } else {
        Ok(f64::NAN)
    }
}

fn rank_key(fit: &ComponentFit, pairs: &[CovariancePair], selection: Selection) -> f64 {
    match selection {
        Selection::Objective => fit.objective,
        Selection::RSquared => match r_squared(fit, pairs) {
            Ok(r2) if r2.is_finite() => -r2,
            _ if fit.objective <= CONVERGENCE_FLOOR => -1.0,
            _ => f64::INFINITY,
        },
    }
}

/// Fits one component under explicit constraint metrics; keeps the best restart under `config.selection`,
/// ties going to the smaller objective and then the lower restart index.
pub fn fit_component_with(
    pairs: &[CovariancePair],
    covariates: &[DVector<f64>],
    constraints: &ConstraintMatrices,
    config: &SolverConfig,
) -> Result<ComponentFit> {
    config.validate()?;
    check_inputs(pairs, covariates)?;
    let n = pairs.len();
    let r = covariates[0].len();
    if n < r + 1 {
        return Err(CocregError::Precondition(format!(
            "need n >= r + 1 subjects, got n = {n}, r = {r}"
        )));
    }
    let inits = initializations(pairs, constraints, config);
    let runs: Vec<Result<RestartRun>> = inits
        .par_iter()
        .enumerate()
        .map(|(idx, (g, t))| run_from_start(g, t, pairs, covariates, constraints, config, idx, false))
        .collect();
    let mut best: Option<(f64, ComponentFit)> = None;
    let mut diagnostics = Vec::new();
    for (idx, run) in runs.into_iter().enumerate() {
        match run {
            Ok(run) if run.fit.objective.is_finite() => {
                let key = rank_key(&run.fit, pairs, config.selection);
                let better = best.as_ref().is_none_or(|(bk, b)| {
                    key < *bk || (key == *bk && run.fit.objective < b.objective)
                });
                if better {
                    best = Some((key, run.fit));
                }
            }
            Ok(_) => diagnostics.push(format!("restart {idx}: non-finite objective")),
            Err(e) => diagnostics.push(format!("restart {idx}: {e}")),
        }
    }
    best.map(|(_, fit)| fit).ok_or(CocregError::FitFailure { diagnostics })
}
