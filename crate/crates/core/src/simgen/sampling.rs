//! Random orthonormal bases and multivariate samplers.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Gamma};
use statrs::function::erf::erfc;

use crate::data::center;
use crate::error::{CocregError, Result};
use crate::linalg::symmetric_eigen_desc;

pub(crate) fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Haar-distributed orthonormal matrix (QR of a Gaussian matrix, R diagonal made positive).
pub fn random_orthonormal(dim: usize, seed: u64) -> DMatrix<f64> {
    random_orthonormal_with(dim, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn random_orthonormal_with<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DMatrix<f64> {
    let g = gaussian_matrix(dim, dim, rng);
    haar_from_gaussian(g)
}

fn haar_from_gaussian(g: DMatrix<f64>) -> DMatrix<f64> {
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..q.ncols() {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Orthonormal completion of `shared` (orthonormal columns) to a full `dim × dim` basis,
/// with the completing columns drawn at random.
pub fn random_completion<R: Rng + ?Sized>(shared: &DMatrix<f64>, dim: usize, rng: &mut R) -> DMatrix<f64> {
    let k = shared.ncols();
    if k >= dim {
        return shared.columns(0, dim).into_owned();
    }
    let g = gaussian_matrix(dim, dim - k, rng);
    let projected = &g - shared * (shared.transpose() * &g);
    // second pass keeps the completion numerically orthogonal to `shared`
    let projected = &projected - shared * (shared.transpose() * &projected);
    let q = haar_from_gaussian(projected);
    let mut out = DMatrix::zeros(dim, dim);
    out.columns_mut(0, k).copy_from(shared);
    out.columns_mut(k, dim - k).copy_from(&q.columns(0, dim - k));
    out
}

/// Factor `L` with `L Lᵀ = cov`, valid for positive semidefinite input.
fn psd_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if cov.nrows() != cov.ncols() || cov.nrows() == 0 {
        return Err(CocregError::Validation("covariance must be square and non-empty".into()));
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(CocregError::Validation("covariance contains non-finite values".into()));
    }
    if let Some(ch) = cov.clone().cholesky() {
        return Ok(ch.l());
    }
    let (vals, vecs) = symmetric_eigen_desc(cov);
    let scale = vals.first().copied().unwrap_or(0.0).abs().max(1.0);
    if vals.iter().any(|&l| l < -1e-10 * scale) {
        return Err(CocregError::Validation("covariance is not positive semidefinite".into()));
    }
    let mut l = vecs;
    for (j, lam) in vals.iter().enumerate() {
        l.column_mut(j).scale_mut(lam.max(0.0).sqrt());
    }
    Ok(l)
}

/// `rows` independent draws from `N(0, cov)`, one per row.
pub fn sample_gaussian(cov: &DMatrix<f64>, rows: usize, seed: u64) -> Result<DMatrix<f64>> {
    sample_gaussian_with(cov, rows, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn sample_gaussian_with<R: Rng + ?Sized>(cov: &DMatrix<f64>, rows: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    let l = psd_factor(cov)?;
    let z = gaussian_matrix(rows, cov.nrows(), rng);
    Ok(z * l.transpose())
}

/// Multivariate t draws rescaled so that the population covariance equals `cov`.
pub fn sample_mvt(cov: &DMatrix<f64>, df: f64, rows: usize, seed: u64) -> Result<DMatrix<f64>> {
    sample_mvt_with(cov, df, rows, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn sample_mvt_with<R: Rng + ?Sized>(cov: &DMatrix<f64>, df: f64, rows: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    if !(df > 2.0) || !df.is_finite() {
        return Err(CocregError::Validation(format!(
            "multivariate t needs df > 2 for a finite covariance, got {df}"
        )));
    }
    let mut x = sample_gaussian_with(cov, rows, rng)?;
    let chi = ChiSquared::new(df).map_err(|e| CocregError::Validation(e.to_string()))?;
    let shrink = ((df - 2.0) / df).sqrt();
    for mut row in x.row_iter_mut() {
        let s: f64 = chi.sample(rng);
        row.scale_mut(shrink / (s / df).sqrt());
    }
    Ok(x)
}

/// Gamma-margin draws coupled through a Gaussian copula with the correlation matrix of `cov`;
/// margins have shape `shape` and variance `cov_jj`. Columns are centered before returning.
pub fn sample_matrix_gamma(cov: &DMatrix<f64>, shape: f64, rows: usize, seed: u64) -> Result<DMatrix<f64>> {
    sample_matrix_gamma_with(cov, shape, rows, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn sample_matrix_gamma_with<R: Rng + ?Sized>(
    cov: &DMatrix<f64>,
    shape: f64,
    rows: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if !(shape > 0.0) || !shape.is_finite() {
        return Err(CocregError::Validation(format!("gamma shape must be positive, got {shape}")));
    }
    let dim = cov.nrows();
    let sd = DVector::from_fn(dim, |j, _| cov[(j, j)].sqrt());
    if sd.iter().any(|s| !(*s > 0.0)) {
        return Err(CocregError::Validation("covariance has a non-positive diagonal".into()));
    }
    let corr = DMatrix::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { cov[(i, j)] / (sd[i] * sd[j]) });
    let z = sample_gaussian_with(&corr, rows, rng)?;
    let mut out = DMatrix::zeros(rows, dim);
    for j in 0..dim {
        let scale = sd[j] / shape.sqrt();
        if shape == 1.0 {
            for i in 0..rows {
                // upper tail Φ(−z) keeps precision where Φ(z) rounds to 1
                let upper = 0.5 * erfc(z[(i, j)] / std::f64::consts::SQRT_2);
                out[(i, j)] = -scale * upper.ln();
            }
        } else {
            let g = Gamma::new(shape, 1.0 / scale).map_err(|e| CocregError::Validation(e.to_string()))?;
            for i in 0..rows {
                let p = 0.5 * erfc(-z[(i, j)] / std::f64::consts::SQRT_2);
                out[(i, j)] = g.inverse_cdf(p.clamp(1e-300, 1.0 - 1e-16));
            }
        }
    }
    center(&out)
}
