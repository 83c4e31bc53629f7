//! CPCA-Reg: common principal components per block, an 85%-variance cut, and a log-linear
//! regression for every pair of retained components.
//!
//! Common eigenvectors are taken from the weighted pooled covariance rather than Flury's
//! maximum-likelihood iteration.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::CovariancePair;
use crate::error::{CocregError, Result};
use crate::inference::refit_coefficients;
use crate::io::{serde_dmatrix, serde_dvector};
use crate::linalg::{quad_forms_columns, sign_normalize, symmetric_eigen_desc, symmetrize};
use crate::solver::{log_outcome_forms, log_predictor_forms};

pub const DEFAULT_FRACTION: f64 = 0.85;

/// Running weighted sum of covariance matrices; holds one `dim × dim` matrix regardless of `n`.
#[derive(Debug, Clone)]
pub struct PooledAccumulator {
    sum: DMatrix<f64>,
    total_weight: f64,
    count: usize,
}

impl PooledAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { sum: DMatrix::zeros(dim, dim), total_weight: 0.0, count: 0 }
    }

    pub fn add(&mut self, m: &DMatrix<f64>, weight: f64) -> Result<()> {
        if m.shape() != self.sum.shape() {
            return Err(CocregError::Validation("covariance dimension mismatch".into()));
        }
        if !(weight > 0.0) {
            return Err(CocregError::Validation(format!("weight must be positive, got {weight}")));
        }
        self.sum += m * weight;
        self.total_weight += weight;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Eigenvectors of the pooled covariance, by descending pooled eigenvalue.
    pub fn finish(&self) -> Result<CommonAxes> {
        if self.count < 2 {
            return Err(CocregError::InsufficientData { what: "common PCA".into(), got: self.count, need: 2 });
        }
        let mut pooled = &self.sum / self.total_weight;
        symmetrize(&mut pooled);
        let (values, mut vectors) = symmetric_eigen_desc(&pooled);
        for j in 0..vectors.ncols() {
            let mut c = vectors.column(j).into_owned();
            sign_normalize(&mut c);
            vectors.set_column(j, &c);
        }
        Ok(CommonAxes { eigenvectors: vectors, pooled_eigenvalues: values })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommonAxes {
    #[serde(with = "serde_dmatrix")]
    pub eigenvectors: DMatrix<f64>,
    pub pooled_eigenvalues: Vec<f64>,
}

impl CommonAxes {
    /// Diagonal of `Vᵀ S V` for one subject.
    pub fn subject_eigenvalues(&self, s: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_vec(quad_forms_columns(s, &self.eigenvectors))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommonPca {
    pub axes: CommonAxes,
    /// Per subject, the diagonal of `Vᵀ S_i V`.
    pub subject_eigenvalues: Vec<Vec<f64>>,
}

/// Common PCA of one block: pooled eigenvectors and per-subject eigenvalues.
pub fn common_pca<'a>(mats: impl IntoIterator<Item = &'a DMatrix<f64>> + Clone, weights: &[f64]) -> Result<CommonPca> {
    let mut it = mats.clone().into_iter().peekable();
    let dim = it.peek().map(|m| m.nrows()).ok_or_else(|| CocregError::Validation("no covariance matrices".into()))?;
    let mut acc = PooledAccumulator::new(dim);
    let mut count = 0;
    for (m, w) in it.zip(weights) {
        acc.add(m, *w)?;
        count += 1;
    }
    if count != weights.len() || mats.clone().into_iter().count() != count {
        return Err(CocregError::Validation("matrices and weights differ in number".into()));
    }
    let axes = acc.finish()?;
    let subject_eigenvalues = mats
        .into_iter()
        .map(|m| axes.subject_eigenvalues(m).iter().copied().collect())
        .collect();
    Ok(CommonPca { axes, subject_eigenvalues })
}

/// Smallest leading index set whose share of the eigenvalue sum exceeds `fraction`.
pub fn select_top_components(pooled_eigenvalues: &[f64], fraction: f64) -> Result<Vec<usize>> {
    if pooled_eigenvalues.is_empty() || pooled_eigenvalues.iter().any(|v| !(*v > 0.0)) {
        return Err(CocregError::Validation("eigenvalues must be positive".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CocregError::Validation(format!("fraction must lie in (0, 1), got {fraction}")));
    }
    let total: f64 = pooled_eigenvalues.iter().sum();
    let mut cum = 0.0;
    for (j, v) in pooled_eigenvalues.iter().enumerate() {
        cum += v;
        if cum / total > fraction {
            return Ok((0..=j).collect());
        }
    }
    Ok((0..pooled_eigenvalues.len()).collect())
}

/// Regression for one (predictor component, outcome component) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRegression {
    pub x_index: usize,
    pub y_index: usize,
    #[serde(with = "serde_dvector")]
    pub gamma: DVector<f64>,
    #[serde(with = "serde_dvector")]
    pub theta: DVector<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<Vec<f64>>,
    pub r_squared: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpcaModel {
    pub method: String,
    pub x_axes: CommonAxes,
    pub y_axes: CommonAxes,
    pub selected_x: Vec<usize>,
    pub selected_y: Vec<usize>,
    pub regressions: Vec<PairRegression>,
}

impl CpcaModel {
    /// Successful regression with the largest R².
    pub fn best_by_r_squared(&self) -> Option<&PairRegression> {
        self.regressions
            .iter()
            .filter(|r| r.r_squared.is_some())
            .max_by(|a, b| a.r_squared.partial_cmp(&b.r_squared).expect("finite R²"))
    }
}

fn r_squared(gamma: &DVector<f64>, theta: &DVector<f64>, alpha: f64, beta: &DVector<f64>, pairs: &[CovariancePair], covariates: &[DVector<f64>]) -> Result<Option<f64>> {
    let lg = log_outcome_forms(gamma, pairs)?;
    let lx = log_predictor_forms(theta, pairs)?;
    let n = lg.len() as f64;
    let mean = lg.iter().sum::<f64>() / n;
    let sst: f64 = lg.iter().map(|y| (y - mean).powi(2)).sum();
    let sse: f64 = (0..lg.len()).map(|i| (lg[i] - alpha * lx[i] - covariates[i].dot(beta)).powi(2)).sum();
    Ok(if sst > 0.0 { Some(1.0 - sse / sst) } else { None })
}

/// One regression per (x component, y component) pair of the selections.
pub fn pairwise_regressions(
    x_axes: &CommonAxes,
    y_axes: &CommonAxes,
    selected_x: &[usize],
    selected_y: &[usize],
    pairs: &[CovariancePair],
    covariates: &[DVector<f64>],
) -> Result<CpcaModel> {
    if selected_x.is_empty() || selected_y.is_empty() {
        return Err(CocregError::Validation("component selections must be non-empty".into()));
    }
    let jobs: Vec<(usize, usize)> = selected_x.iter().flat_map(|&j| selected_y.iter().map(move |&k| (j, k))).collect();
    let regressions = jobs
        .par_iter()
        .map(|&(j, k)| {
            let theta = x_axes.eigenvectors.column(j).into_owned();
            let gamma = y_axes.eigenvectors.column(k).into_owned();
            let fit = refit_coefficients(&gamma, &theta, pairs, covariates)
                .and_then(|(a, b)| Ok((a, b.clone(), r_squared(&gamma, &theta, a, &b, pairs, covariates)?)));
            match fit {
                Ok((a, b, r2)) => PairRegression {
                    x_index: j,
                    y_index: k,
                    gamma,
                    theta,
                    alpha: Some(a),
                    beta: Some(b.iter().copied().collect()),
                    r_squared: r2,
                    failure: None,
                },
                Err(e) => PairRegression {
                    x_index: j,
                    y_index: k,
                    gamma,
                    theta,
                    alpha: None,
                    beta: None,
                    r_squared: None,
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(CpcaModel {
        method: "cpca-reg".into(),
        x_axes: x_axes.clone(),
        y_axes: y_axes.clone(),
        selected_x: selected_x.to_vec(),
        selected_y: selected_y.to_vec(),
        regressions,
    })
}

/// The full three-step procedure on covariance pairs.
pub fn fit_cpca_reg(pairs: &[CovariancePair], covariates: &[DVector<f64>], fraction: f64) -> Result<CpcaModel> {
    let vw: Vec<f64> = pairs.iter().map(|p| p.v as f64).collect();
    let uw: Vec<f64> = pairs.iter().map(|p| p.u as f64).collect();
    let mut ax = PooledAccumulator::new(pairs.first().map_or(0, |p| p.delta_hat.nrows()));
    let mut ay = PooledAccumulator::new(pairs.first().map_or(0, |p| p.sigma_hat.nrows()));
    for (i, p) in pairs.iter().enumerate() {
        ax.add(&p.delta_hat, uw[i])?;
        ay.add(&p.sigma_hat, vw[i])?;
    }
    let x_axes = ax.finish()?;
    let y_axes = ay.finish()?;
    let sx = select_top_components(&x_axes.pooled_eigenvalues, fraction)?;
    let sy = select_top_components(&y_axes.pooled_eigenvalues, fraction)?;
    pairwise_regressions(&x_axes, &y_axes, &sx, &sy, pairs, covariates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{generate_population, random_orthonormal, SimScenario};

    #[test]
    fn shared_covariance_gives_its_eigenvectors() {
        let q = random_orthonormal(3, 4);
        let c = &q * DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 2.0, 1.0])) * q.transpose();
        let mats = vec![c.clone(); 3];
        let pca = common_pca(&mats, &[1.0, 2.0, 3.0]).unwrap();
        for j in 0..3 {
            assert!(pca.axes.eigenvectors.column(j).dot(&q.column(j)).abs() > 1.0 - 1e-10);
        }
        let ev = &pca.axes.pooled_eigenvalues;
        assert!(ev.windows(2).all(|w| w[0] >= w[1]));
        assert!((pca.subject_eigenvalues[0][0] - 4.0).abs() < 1e-10);
        assert!(common_pca(&mats[..1], &[1.0]).is_err());
    }

    #[test]
    fn common_diagonalizable_cohort_has_no_off_diagonal_mass() {
        let s = SimScenario::preset("sim-i-small").unwrap();
        let g = generate_population(&s, 3).unwrap();
        let w: Vec<f64> = g.population.iter().map(|p| p.u as f64).collect();
        let pca = common_pca(g.population.iter().map(|p| &p.delta_hat), &w).unwrap();
        let v = &pca.axes.eigenvectors;
        for p in &g.population {
            let m = v.transpose() * &p.delta_hat * v;
            let off: f64 = (0..m.nrows()).flat_map(|i| (0..m.ncols()).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[(i, j)].powi(2)).sum::<f64>().sqrt();
            assert!(off <= 1e-6 * m.norm(), "off-diagonal mass {off}");
        }
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_top_components(&[0.9, 0.05, 0.05], 0.85).unwrap(), vec![0]);
        assert_eq!(select_top_components(&[0.5, 0.3, 0.2], 0.85).unwrap(), vec![0, 1, 2]);
        assert_eq!(select_top_components(&[1.0; 10], 0.85).unwrap(), (0..9).collect::<Vec<_>>());
        assert!(select_top_components(&[1.0, 0.0], 0.85).is_err());
    }

    #[test]
    fn single_pair_and_exact_model() {
        let mut s = SimScenario::preset("sim-i-small").unwrap();
        s.planted.truncate(1);
        let g = generate_population(&s, 6).unwrap();
        let model = fit_cpca_reg(&g.population, &g.covariates, DEFAULT_FRACTION).unwrap();
        assert_eq!(model.regressions.len(), model.selected_x.len() * model.selected_y.len());
        // the pooled axes are the true eigenvectors, so the planted pair fits exactly
        let best = model.best_by_r_squared().unwrap();
        assert!((best.r_squared.unwrap() - 1.0).abs() < 1e-8);
        assert!((best.alpha.unwrap() - 3.0).abs() < 1e-6);

        let one = pairwise_regressions(&model.x_axes, &model.y_axes, &[0], &[0], &g.population, &g.covariates).unwrap();
        assert_eq!(one.regressions.len(), 1);
    }
}
