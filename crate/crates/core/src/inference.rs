//! Uncertainty for `(α, β)` with the projections held fixed: subject-level bootstrap and the
//! plug-in asymptotic covariance.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{estimate_covariances, Cohort, CovariancePair};
use crate::error::{CocregError, Result};
use crate::io::{serde_dmatrix, serde_dvector};
use crate::linalg::solve_spd_guarded;
use crate::solver::{log_outcome_forms, log_predictor_forms, ComponentFit, MAX_GRAM_CONDITION};

/// Redraws allowed for a replicate whose design is singular.
pub const MAX_REDRAWS: usize = 10;
/// Largest tolerated share of failed replicates, in percent.
pub const MAX_FAILED_PCT: u32 = 5;
pub const MIN_REPLICATES: usize = 100;

/// Per-subject log forms at fixed projections; the response and regressors of the refit.
#[derive(Debug, Clone)]
pub struct FixedProjectionDesign {
    pub log_outcome: Vec<f64>,
    pub log_predictor: Vec<f64>,
    pub covariates: Vec<DVector<f64>>,
}

impl FixedProjectionDesign {
    pub fn new(gamma: &DVector<f64>, theta: &DVector<f64>, pairs: &[CovariancePair], covariates: &[DVector<f64>]) -> Result<Self> {
        if pairs.len() != covariates.len() || pairs.is_empty() {
            return Err(CocregError::Validation(format!(
                "{} covariance pairs but {} covariate vectors",
                pairs.len(),
                covariates.len()
            )));
        }
        Ok(Self {
            log_outcome: log_outcome_forms(gamma, pairs)?,
            log_predictor: log_predictor_forms(theta, pairs)?,
            covariates: covariates.to_vec(),
        })
    }

    pub fn n(&self) -> usize {
        self.log_outcome.len()
    }

    /// Joint least squares of the log outcome form on `[log predictor form, w]` over `rows`
    /// (with repetition). Returns `(α, β)`.
    pub fn solve(&self, rows: impl Iterator<Item = usize>) -> Result<(f64, DVector<f64>)> {
        let r = self.covariates[0].len();
        let mut gram = DMatrix::zeros(r + 1, r + 1);
        let mut rhs = DVector::zeros(r + 1);
        let mut z = DVector::zeros(r + 1);
        for i in rows {
            z[0] = self.log_predictor[i];
            z.rows_mut(1, r).copy_from(&self.covariates[i]);
            gram.ger(1.0, &z, &z, 1.0);
            rhs.axpy(self.log_outcome[i], &z, 1.0);
        }
        let sol = solve_spd_guarded(&gram, &rhs, MAX_GRAM_CONDITION)?;
        Ok((sol[0], sol.rows(1, r).into_owned()))
    }
}

/// `(α, β)` by one joint least-squares solve with `(γ, θ)` fixed.
pub fn refit_coefficients(
    gamma: &DVector<f64>,
    theta: &DVector<f64>,
    pairs: &[CovariancePair],
    covariates: &[DVector<f64>],
) -> Result<(f64, DVector<f64>)> {
    let design = FixedProjectionDesign::new(gamma, theta, pairs, covariates)?;
    design.solve(0..design.n())
}

/// Percentile at probability `prob` of sorted data: linear interpolation at 1-based
/// position `N·prob + 1/2`, clamped to the sample range.
pub fn hazen_quantile(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of an empty sample");
    let h = (n as f64 * prob + 0.5).clamp(1.0, n as f64);
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo >= n {
        return sorted[n - 1];
    }
    sorted[lo - 1] + frac * (sorted[lo] - sorted[lo - 1])
}

/// Percentile interval `[q((1−level)/2), q(1−(1−level)/2)]`.
pub fn percentile_interval(values: &[f64], level: f64) -> (f64, f64) {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite draws"));
    let tail = (1.0 - level) / 2.0;
    (hazen_quantile(&v, tail), hazen_quantile(&v, 1.0 - tail))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
    /// `(α̂, β̂)` of the fit the replicates were drawn around.
    #[serde(with = "serde_dvector")]
    pub estimate: DVector<f64>,
    /// One row per successful replicate: `(α*, β*)`.
    #[serde(with = "serde_dmatrix")]
    pub draws: DMatrix<f64>,
    /// Per coefficient `(lower, upper)`, in the order `α, β₁, …, β_r`.
    pub intervals: Vec<(f64, f64)>,
    pub failed: usize,
    pub redraws: usize,
}

impl BootstrapResult {
    pub fn coefficient_names(r: usize) -> Vec<String> {
        std::iter::once("alpha".to_string())
            .chain((1..=r).map(|j| format!("beta{j}")))
            .collect()
    }

    /// Standard deviation of the draws per coefficient.
    pub fn standard_errors(&self) -> Vec<f64> {
        let b = self.draws.nrows() as f64;
        self.draws
            .column_iter()
            .map(|c| {
                let m = c.sum() / b;
                (c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (b - 1.0)).sqrt()
            })
            .collect()
    }
}

/// Subject-level bootstrap of `(α, β)` around a fitted component.
pub fn bootstrap(cohort: &Cohort, fitted: &ComponentFit, replicates: usize, level: f64, seed: u64) -> Result<BootstrapResult> {
    let pairs = estimate_covariances(cohort)?;
    bootstrap_pairs(&pairs, &cohort.covariates(), fitted, replicates, level, seed)
}

/// Bootstrap on cached covariance pairs. Replicate `b` uses stream `b` of a generator seeded
/// with `seed`, so results do not depend on scheduling.
pub fn bootstrap_pairs(
    pairs: &[CovariancePair],
    covariates: &[DVector<f64>],
    fitted: &ComponentFit,
    replicates: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapResult> {
    if replicates < MIN_REPLICATES {
        return Err(CocregError::Validation(format!(
            "need at least {MIN_REPLICATES} bootstrap replicates, got {replicates}"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(CocregError::Validation(format!("level must lie in (0, 1), got {level}")));
    }
    let design = FixedProjectionDesign::new(&fitted.gamma, &fitted.theta, pairs, covariates)?;
    bootstrap_design(&design, fitted.alpha, &fitted.beta, replicates, level, seed)
}

/// Bootstrap on precomputed log forms.
pub fn bootstrap_design(
    design: &FixedProjectionDesign,
    alpha: f64,
    beta: &DVector<f64>,
    replicates: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapResult> {
    let n = design.n();
    let r = beta.len();
    let outcomes: Vec<(Option<DVector<f64>>, usize)> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let mut redraws = 0;
            loop {
                let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                match design.solve(rows.into_iter()) {
                    Ok((a, bt)) => {
                        let mut row = DVector::zeros(r + 1);
                        row[0] = a;
                        row.rows_mut(1, r).copy_from(&bt);
                        return (Some(row), redraws);
                    }
                    Err(_) if redraws < MAX_REDRAWS => redraws += 1,
                    Err(_) => return (None, redraws),
                }
            }
        })
        .collect();

    let failed = outcomes.iter().filter(|(o, _)| o.is_none()).count();
    let redraws = outcomes.iter().map(|(_, k)| k).sum();
    if failed * 100 > replicates * MAX_FAILED_PCT as usize {
        return Err(CocregError::TooManyFailures {
            what: "bootstrap replicates",
            failed,
            total: replicates,
            limit_pct: MAX_FAILED_PCT,
        });
    }
    let ok: Vec<&DVector<f64>> = outcomes.iter().filter_map(|(o, _)| o.as_ref()).collect();
    let draws = DMatrix::from_fn(ok.len(), r + 1, |i, j| ok[i][j]);
    let intervals = (0..=r)
        .map(|j| percentile_interval(draws.column(j).as_slice(), level))
        .collect();
    let mut estimate = DVector::zeros(r + 1);
    estimate[0] = alpha;
    estimate.rows_mut(1, r).copy_from(beta);
    Ok(BootstrapResult { replicates, level, seed, estimate, draws, intervals, failed, redraws })
}

/// Plug-in limiting covariance of `(α̂, β̂)` divided by `M_n = Σ v_i`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AsymptoticCovariance {
    /// Mean squared log predictor form.
    pub g_x: f64,
    /// Mean of `w wᵀ`.
    #[serde(with = "serde_dmatrix")]
    pub q_w: DMatrix<f64>,
    /// Mean of `log(θᵀ Δ̂ θ) w`.
    #[serde(with = "serde_dvector")]
    pub h_xw: DVector<f64>,
    pub m_n: f64,
    #[serde(with = "serde_dmatrix")]
    pub cov: DMatrix<f64>,
}

impl AsymptoticCovariance {
    pub fn block(&self) -> DMatrix<f64> {
        block_matrix(self.g_x, &self.h_xw, &self.q_w)
    }

    pub fn standard_errors(&self) -> Vec<f64> {
        self.cov.diagonal().iter().map(|v| v.sqrt()).collect()
    }
}

fn block_matrix(g: f64, h: &DVector<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let r = h.len();
    let mut m = DMatrix::zeros(r + 1, r + 1);
    m[(0, 0)] = g;
    for j in 0..r {
        m[(0, j + 1)] = h[j];
        m[(j + 1, 0)] = h[j];
    }
    m.view_mut((1, 1), (r, r)).copy_from(q);
    m
}

pub fn asymptotic_covariance(gamma: &DVector<f64>, theta: &DVector<f64>, cohort: &Cohort) -> Result<AsymptoticCovariance> {
    if gamma.len() != cohort.q() || theta.len() != cohort.p() {
        return Err(CocregError::Validation("projection lengths do not match the cohort".into()));
    }
    let pairs = estimate_covariances(cohort)?;
    asymptotic_covariance_pairs(theta, &pairs, &cohort.covariates())
}

pub fn asymptotic_covariance_pairs(
    theta: &DVector<f64>,
    pairs: &[CovariancePair],
    covariates: &[DVector<f64>],
) -> Result<AsymptoticCovariance> {
    if pairs.is_empty() || pairs.len() != covariates.len() {
        return Err(CocregError::Validation("pairs and covariates must be non-empty and aligned".into()));
    }
    let lx = log_predictor_forms(theta, pairs)?;
    let n = pairs.len() as f64;
    let r = covariates[0].len();
    let g_x = lx.iter().map(|x| x * x).sum::<f64>() / n;
    let mut q_w = DMatrix::zeros(r, r);
    let mut h_xw = DVector::zeros(r);
    for (i, w) in covariates.iter().enumerate() {
        q_w.ger(1.0 / n, w, w, 1.0);
        h_xw.axpy(lx[i] / n, w, 1.0);
    }
    let m_n: f64 = pairs.iter().map(|p| p.v as f64).sum();
    let block = block_matrix(g_x, &h_xw, &q_w);
    let inv = block
        .clone()
        .try_inverse()
        .filter(|m| m.iter().all(|x| x.is_finite()))
        .ok_or_else(|| CocregError::Factorization("asymptotic block matrix is singular".into()))?;
    let cond_ok = crate::linalg::is_strictly_pd(&block, 1.0 / MAX_GRAM_CONDITION);
    if !cond_ok {
        return Err(CocregError::Factorization("asymptotic block matrix is singular".into()));
    }
    let mut cov = inv / m_n;
    crate::linalg::symmetrize(&mut cov);
    Ok(AsymptoticCovariance { g_x, q_w, h_xw, m_n, cov })
}
