//! Synthetic cohorts with planted log-linear components.
//!
//! Subject covariances are built from eigendecompositions `Σ_i = Π Λ_i Πᵀ`, `Δ_i = Υ Ω_i Υᵀ`.
//! Log-eigenvalues are normal with means decaying linearly over the index; for every planted
//! component the outcome eigenvalue is set so that the model holds exactly.

mod monte_carlo;
mod sampling;

pub use monte_carlo::*;
pub use sampling::*;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Cohort, CovariancePair, SubjectDataset};
use crate::error::{CocregError, Result};
use crate::io::{serde_dmatrix, serde_dvector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EigenScenario {
    FullCommon,
    PartialCommon,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum NoiseFamily {
    Gaussian,
    Mvt { df: f64 },
    MatrixGamma { shape: f64 },
}

/// A planted pair: zero-based eigenvector indices and model coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedComponent {
    pub outcome_index: usize,
    pub predictor_index: usize,
    pub alpha: f64,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenario {
    pub name: String,
    pub p: usize,
    pub q: usize,
    pub r: usize,
    pub n: usize,
    pub u: usize,
    pub v: usize,
    pub scenario: EigenScenario,
    /// Leading eigenvectors shared by all subjects under `partial_common`.
    pub common_count_y: usize,
    pub common_count_x: usize,
    pub planted: Vec<PlantedComponent>,
    pub noise: NoiseFamily,
    pub log_mean_start: f64,
    pub log_mean_end: f64,
    pub log_sd: f64,
    /// Log-sd of the predictor eigenvalues of planted components.
    pub planted_log_sd: f64,
    /// Success probability of the binary covariates `w[1..]`.
    pub covariate_prob: f64,
    pub seed: u64,
}

impl SimScenario {
    fn base(name: &str, p: usize, q: usize, nuv: usize) -> Self {
        Self {
            name: name.into(),
            p,
            q,
            r: 2,
            n: nuv,
            u: nuv,
            v: nuv,
            scenario: EigenScenario::FullCommon,
            common_count_y: q,
            common_count_x: p,
            planted: vec![
                PlantedComponent { outcome_index: 1, predictor_index: 0, alpha: 3.0, beta: vec![1.0, -1.0] },
                PlantedComponent { outcome_index: 3, predictor_index: 2, alpha: 2.0, beta: vec![-1.0, 1.0] },
            ],
            noise: NoiseFamily::Gaussian,
            log_mean_start: 1.0,
            log_mean_end: -2.0,
            log_sd: 0.1,
            planted_log_sd: 0.5,
            covariate_prob: 0.5,
            seed: 0,
        }
    }

    /// Named scenarios: `sim-i-small`, `sim-i-large`, `sim-ii`, `mvt`, `matrix-gamma`.
    pub fn preset(name: &str) -> Result<Self> {
        let mut s = Self::base(name, 10, 5, 100);
        match name {
            "sim-i-small" => {}
            "sim-i-large" => {
                s = Self::base(name, 100, 100, 500);
                s.planted.truncate(1);
                s.planted_log_sd = 0.1;
            }
            "sim-ii" => {
                s.scenario = EigenScenario::PartialCommon;
                s.common_count_y = 3;
                s.common_count_x = 5;
            }
            "mvt" => s.noise = NoiseFamily::Mvt { df: 3.0 },
            "matrix-gamma" => s.noise = NoiseFamily::MatrixGamma { shape: 1.0 },
            other => {
                return Err(CocregError::Validation(format!(
                    "unknown preset `{other}` (expected sim-i-small, sim-i-large, sim-ii, mvt, matrix-gamma)"
                )))
            }
        }
        Ok(s)
    }

    pub const PRESETS: [&'static str; 5] = ["sim-i-small", "sim-i-large", "sim-ii", "mvt", "matrix-gamma"];

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CocregError::Validation(m));
        if self.p == 0 || self.q == 0 || self.r == 0 {
            return bad("p, q and r must be positive".into());
        }
        if self.n < 2 {
            return bad(format!("n must be at least 2, got {}", self.n));
        }
        if self.u <= self.p || self.v <= self.q {
            return bad(format!(
                "need u > p and v > q for positive-definite sample covariances (u={}, p={}, v={}, q={})",
                self.u, self.p, self.v, self.q
            ));
        }
        if self.common_count_y > self.q || self.common_count_x > self.p {
            return bad("common eigenvector counts exceed dimensions".into());
        }
        if !(self.log_sd >= 0.0) || !(self.planted_log_sd >= 0.0) {
            return bad("log-sd values must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.covariate_prob) {
            return bad("covariate_prob must lie in [0, 1]".into());
        }
        let mut seen_y = Vec::new();
        let mut seen_x = Vec::new();
        for c in &self.planted {
            if c.outcome_index >= self.q || c.predictor_index >= self.p {
                return bad(format!(
                    "planted indices ({}, {}) out of range for q={}, p={}",
                    c.outcome_index, c.predictor_index, self.q, self.p
                ));
            }
            if c.beta.len() != self.r {
                return bad(format!("planted beta has length {}, expected r={}", c.beta.len(), self.r));
            }
            if seen_y.contains(&c.outcome_index) || seen_x.contains(&c.predictor_index) {
                return bad("planted components must use distinct eigenvectors".into());
            }
            seen_y.push(c.outcome_index);
            seen_x.push(c.predictor_index);
        }
        match self.noise {
            NoiseFamily::Mvt { df } if !(df > 2.0) => bad(format!("mvt df must exceed 2, got {df}")),
            NoiseFamily::MatrixGamma { shape } if !(shape > 0.0) => bad(format!("gamma shape must be positive, got {shape}")),
            _ => Ok(()),
        }
    }

    /// Whether the planted outcome eigenvector is shared by all subjects.
    pub fn gamma_identifiable(&self, c: &PlantedComponent) -> bool {
        match self.scenario {
            EigenScenario::FullCommon => true,
            EigenScenario::PartialCommon => c.outcome_index < self.common_count_y,
        }
    }

    pub fn theta_identifiable(&self, c: &PlantedComponent) -> bool {
        match self.scenario {
            EigenScenario::FullCommon => true,
            EigenScenario::PartialCommon => c.predictor_index < self.common_count_x,
        }
    }
}

/// Shared eigenvector matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenSystemSpec {
    #[serde(with = "serde_dmatrix")]
    pub pi: DMatrix<f64>,
    #[serde(with = "serde_dmatrix")]
    pub upsilon: DMatrix<f64>,
    pub common_count_y: usize,
    pub common_count_x: usize,
}

impl EigenSystemSpec {
    pub fn random<R: Rng + ?Sized>(s: &SimScenario, rng: &mut R) -> Self {
        Self {
            pi: random_orthonormal_with(s.q, rng),
            upsilon: random_orthonormal_with(s.p, rng),
            common_count_y: s.common_count_y,
            common_count_x: s.common_count_x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    #[serde(with = "serde_dvector")]
    pub gamma: DVector<f64>,
    #[serde(with = "serde_dvector")]
    pub theta: DVector<f64>,
    pub alpha: f64,
    #[serde(with = "serde_dvector")]
    pub beta: DVector<f64>,
    pub gamma_identifiable: bool,
    pub theta_identifiable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub components: Vec<PlantedTruth>,
    pub noise: NoiseFamily,
}

/// Per-subject eigenvalues (`lambda` for the outcome, `omega` for the predictor), in index order.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectEigenvalues {
    pub lambda: DVector<f64>,
    pub omega: DVector<f64>,
}

/// Linear log-mean grid from `start` (index 0) to `end` (index `dim − 1`).
pub fn log_means(dim: usize, start: f64, end: f64) -> Vec<f64> {
    if dim == 1 {
        return vec![start];
    }
    (0..dim)
        .map(|j| start + (end - start) * j as f64 / (dim - 1) as f64)
        .collect()
}

/// Draws one subject's eigenvalues; planted outcome eigenvalues are `exp(α log ω + wᵀβ)`.
pub fn plant_eigenvalues_with<R: Rng + ?Sized>(s: &SimScenario, w: &DVector<f64>, rng: &mut R) -> SubjectEigenvalues {
    let draw = |mean: f64, sd: f64, rng: &mut R| -> f64 {
        if sd == 0.0 {
            mean
        } else {
            Normal::new(mean, sd).expect("finite sd").sample(rng)
        }
    };
    let mx = log_means(s.p, s.log_mean_start, s.log_mean_end);
    let my = log_means(s.q, s.log_mean_start, s.log_mean_end);
    let mut log_omega = DVector::zeros(s.p);
    for j in 0..s.p {
        let planted = s.planted.iter().any(|c| c.predictor_index == j);
        let sd = if planted { s.planted_log_sd } else { s.log_sd };
        log_omega[j] = draw(mx[j], sd, rng);
    }
    let mut log_lambda = DVector::zeros(s.q);
    for l in 0..s.q {
        log_lambda[l] = match s.planted.iter().find(|c| c.outcome_index == l) {
            Some(c) => {
                let wb: f64 = c.beta.iter().zip(w.iter()).map(|(b, x)| b * x).sum();
                c.alpha * log_omega[c.predictor_index] + wb
            }
            None => draw(my[l], s.log_sd, rng),
        };
    }
    SubjectEigenvalues {
        lambda: log_lambda.map(f64::exp),
        omega: log_omega.map(f64::exp),
    }
}

pub fn plant_eigenvalues(s: &SimScenario, w: &DVector<f64>, seed: u64) -> SubjectEigenvalues {
    plant_eigenvalues_with(s, w, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Subject eigenvector bases: shared, or shared leading columns plus a random completion.
pub fn subject_bases<R: Rng + ?Sized>(
    spec: &EigenSystemSpec,
    scenario: EigenScenario,
    rng: &mut R,
) -> (DMatrix<f64>, DMatrix<f64>) {
    match scenario {
        EigenScenario::FullCommon => (spec.pi.clone(), spec.upsilon.clone()),
        EigenScenario::PartialCommon => {
            let q = spec.pi.nrows();
            let p = spec.upsilon.nrows();
            let by = random_completion(&spec.pi.columns(0, spec.common_count_y).into_owned(), q, rng);
            let bx = random_completion(&spec.upsilon.columns(0, spec.common_count_x).into_owned(), p, rng);
            (by, bx)
        }
    }
}

fn compose(basis: &DMatrix<f64>, eig: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = basis.clone();
    for (j, e) in eig.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*e);
    }
    let mut out = scaled * basis.transpose();
    crate::linalg::symmetrize(&mut out);
    out
}

/// `(Σ_i, Δ_i)` from one subject's eigenvalues.
pub fn build_covariances<R: Rng + ?Sized>(
    spec: &EigenSystemSpec,
    eig: &SubjectEigenvalues,
    scenario: EigenScenario,
    rng: &mut R,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (by, bx) = subject_bases(spec, scenario, rng);
    (compose(&by, &eig.lambda), compose(&bx, &eig.omega))
}

/// Everything generated for one synthetic cohort.
#[derive(Debug, Clone)]
pub struct GeneratedCohort {
    pub spec: EigenSystemSpec,
    pub truth: GroundTruth,
    pub covariates: Vec<DVector<f64>>,
    /// Population covariances with the scenario's observation counts.
    pub population: Vec<CovariancePair>,
    pub eigenvalues: Vec<SubjectEigenvalues>,
}

/// Mixes a seed with a stream index (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn truth_of(s: &SimScenario, spec: &EigenSystemSpec) -> GroundTruth {
    GroundTruth {
        components: s
            .planted
            .iter()
            .map(|c| PlantedTruth {
                gamma: spec.pi.column(c.outcome_index).into_owned(),
                theta: spec.upsilon.column(c.predictor_index).into_owned(),
                alpha: c.alpha,
                beta: DVector::from_vec(c.beta.clone()),
                gamma_identifiable: s.gamma_identifiable(c),
                theta_identifiable: s.theta_identifiable(c),
            })
            .collect(),
        noise: s.noise,
    }
}

/// Population structure of a cohort: bases, covariates, eigenvalues and covariance matrices.
pub fn generate_population(s: &SimScenario, seed: u64) -> Result<GeneratedCohort> {
    s.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = EigenSystemSpec::random(s, &mut rng);
    let bern = Bernoulli::new(s.covariate_prob).expect("validated probability");
    let mut covariates = Vec::with_capacity(s.n);
    let mut population = Vec::with_capacity(s.n);
    let mut eigenvalues = Vec::with_capacity(s.n);
    for i in 0..s.n {
        let mut srng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let w = DVector::from_fn(s.r, |j, _| if j == 0 || bern.sample(&mut srng) { 1.0 } else { 0.0 });
        let eig = plant_eigenvalues_with(s, &w, &mut srng);
        let (sigma, delta) = build_covariances(&spec, &eig, s.scenario, &mut srng);
        covariates.push(w);
        population.push(CovariancePair { sigma_hat: sigma, delta_hat: delta, v: s.v, u: s.u });
        eigenvalues.push(eig);
    }
    Ok(GeneratedCohort { truth: truth_of(s, &spec), spec, covariates, population, eigenvalues })
}

fn draw_block<R: Rng + ?Sized>(noise: NoiseFamily, cov: &DMatrix<f64>, rows: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    match noise {
        NoiseFamily::Gaussian => sample_gaussian_with(cov, rows, rng),
        NoiseFamily::Mvt { df } => sample_mvt_with(cov, df, rows, rng),
        NoiseFamily::MatrixGamma { shape } => sample_matrix_gamma_with(cov, shape, rows, rng),
    }
}

fn sample_rng(seed: u64, subject: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, subject as u64));
    rng.set_stream(1);
    rng
}

/// Draws subject `i`'s observation matrices `(X, Y)` from its population covariances.
pub fn sample_subject(s: &SimScenario, g: &GeneratedCohort, i: usize, seed: u64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut rng = sample_rng(seed, i);
    let pop = &g.population[i];
    let x = draw_block(s.noise, &pop.delta_hat, s.u, &mut rng)?;
    let y = draw_block(s.noise, &pop.sigma_hat, s.v, &mut rng)?;
    Ok((x, y))
}

/// Full synthetic cohort with observation matrices.
pub fn generate_cohort(s: &SimScenario, seed: u64) -> Result<(Cohort, GeneratedCohort)> {
    let g = generate_population(s, seed)?;
    let subjects = (0..s.n)
        .map(|i| {
            let (x, y) = sample_subject(s, &g, i, seed)?;
            SubjectDataset::new(format!("sub{:04}", i + 1), x, y, g.covariates[i].clone())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((Cohort::new(subjects)?, g))
}

/// Sample covariance pairs of a synthetic cohort, computed subject by subject so that only
/// one subject's observations are held in memory at a time. Equal to
/// `estimate_covariances(&generate_cohort(s, seed)?.0)`.
pub fn generate_sample_pairs(s: &SimScenario, seed: u64) -> Result<(Vec<CovariancePair>, GeneratedCohort)> {
    use rayon::prelude::*;
    let g = generate_population(s, seed)?;
    let pairs = (0..s.n)
        .into_par_iter()
        .map(|i| {
            let (x, y) = sample_subject(s, &g, i, seed)?;
            let subject = SubjectDataset::new(format!("sub{:04}", i + 1), x, y, g.covariates[i].clone())?;
            let c = crate::data::sample_covariance(&subject.x)?;
            let sy = crate::data::sample_covariance(&subject.y)?;
            if !crate::linalg::is_strictly_pd(&c, crate::data::PD_REL_TOL)
                || !crate::linalg::is_strictly_pd(&sy, crate::data::PD_REL_TOL)
            {
                return Err(CocregError::NotPositiveDefinite { subject: subject.subject_id, which: "sample" });
            }
            Ok(CovariancePair { sigma_hat: sy, delta_hat: c, v: s.v, u: s.u })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((pairs, g))
}
