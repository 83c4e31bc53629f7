//! Subject data, cohort validation and covariance estimation.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CocregError, Result};
use crate::linalg::{is_strictly_pd, symmetrize};

/// Relative eigenvalue floor for strict positive definiteness.
pub const PD_REL_TOL: f64 = 1e-10;

/// One subject's predictor observations `x` (u × p), outcome observations `y` (v × q)
/// and covariates `w` (length r, `w[0] == 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectDataset {
    pub subject_id: String,
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub w: DVector<f64>,
}

impl SubjectDataset {
    pub fn new(
        subject_id: impl Into<String>,
        x: DMatrix<f64>,
        y: DMatrix<f64>,
        w: DVector<f64>,
    ) -> Result<Self> {
        let subject_id = subject_id.into();
        if x.nrows() < 2 || y.nrows() < 2 {
            return Err(CocregError::InsufficientData {
                what: format!("subject `{subject_id}`"),
                got: x.nrows().min(y.nrows()),
                need: 2,
            });
        }
        if x.ncols() == 0 || y.ncols() == 0 || w.is_empty() {
            return Err(CocregError::Validation(format!(
                "subject `{subject_id}` has an empty block"
            )));
        }
        if x.iter().chain(y.iter()).chain(w.iter()).any(|v| !v.is_finite()) {
            return Err(CocregError::Validation(format!(
                "subject `{subject_id}` contains non-finite values"
            )));
        }
        if w[0] != 1.0 {
            return Err(CocregError::Validation(format!(
                "subject `{subject_id}`: first covariate must be the intercept 1, got {}",
                w[0]
            )));
        }
        Ok(Self { subject_id, x, y, w })
    }

    pub fn u(&self) -> usize {
        self.x.nrows()
    }

    pub fn v(&self) -> usize {
        self.y.nrows()
    }
}

/// Ordered collection of subjects sharing `p`, `q` and `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    subjects: Vec<SubjectDataset>,
    p: usize,
    q: usize,
    r: usize,
}

impl Cohort {
    pub fn new(subjects: Vec<SubjectDataset>) -> Result<Self> {
        if subjects.len() < 2 {
            return Err(CocregError::InsufficientData {
                what: "cohort".into(),
                got: subjects.len(),
                need: 2,
            });
        }
        let p = subjects[0].x.ncols();
        let q = subjects[0].y.ncols();
        let r = subjects[0].w.len();
        for s in &subjects {
            if s.x.ncols() != p || s.y.ncols() != q || s.w.len() != r {
                return Err(CocregError::Validation(format!(
                    "subject `{}` has dimensions (p={}, q={}, r={}), cohort has (p={p}, q={q}, r={r})",
                    s.subject_id,
                    s.x.ncols(),
                    s.y.ncols(),
                    s.w.len()
                )));
            }
        }
        Ok(Self { subjects, p, q, r })
    }

    pub fn subjects(&self) -> &[SubjectDataset] {
        &self.subjects
    }

    pub fn into_subjects(self) -> Vec<SubjectDataset> {
        self.subjects
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn covariates(&self) -> Vec<DVector<f64>> {
        self.subjects.iter().map(|s| s.w.clone()).collect()
    }

    /// Same cohort with the data blocks replaced subject-by-subject.
    pub fn map_blocks<F>(&self, f: F) -> Result<Cohort>
    where
        F: Fn(&SubjectDataset) -> (DMatrix<f64>, DMatrix<f64>),
    {
        let subjects = self
            .subjects
            .iter()
            .map(|s| {
                let (x, y) = f(s);
                SubjectDataset::new(s.subject_id.clone(), x, y, s.w.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Cohort::new(subjects)
    }
}

/// Per-subject covariance estimates and the observation counts used as weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariancePair {
    /// Outcome covariance (q × q).
    pub sigma_hat: DMatrix<f64>,
    /// Predictor covariance (p × p).
    pub delta_hat: DMatrix<f64>,
    pub v: usize,
    pub u: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintMode {
    #[default]
    Identity,
    Pooled,
}

impl std::str::FromStr for ConstraintMode {
    type Err = CocregError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(ConstraintMode::Identity),
            "pooled" => Ok(ConstraintMode::Pooled),
            other => Err(CocregError::Validation(format!(
                "unknown constraint mode `{other}` (expected identity|pooled)"
            ))),
        }
    }
}

/// Normalization metrics for the projections: `γᵀ H_y γ = 1`, `θᵀ H_x θ = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintMatrices {
    pub h_y: DMatrix<f64>,
    pub h_x: DMatrix<f64>,
    pub mode: ConstraintMode,
}

/// Removes column means.
pub fn center(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Err(CocregError::InsufficientData {
            what: "centering".into(),
            got: 0,
            need: 1,
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(CocregError::Validation("matrix contains non-finite values".into()));
    }
    let rows = m.nrows() as f64;
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / rows;
        col.add_scalar_mut(-mean);
    }
    Ok(out)
}

/// Sample covariance with divisor `m` (the row count).
pub fn sample_covariance(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() < 2 {
        return Err(CocregError::InsufficientData {
            what: "sample covariance".into(),
            got: m.nrows(),
            need: 2,
        });
    }
    let c = center(m)?;
    let mut s = c.tr_mul(&c) / m.nrows() as f64;
    symmetrize(&mut s);
    Ok(s)
}

fn subject_pair(s: &SubjectDataset, p: usize, q: usize) -> Result<CovariancePair> {
    if s.u() <= p {
        return Err(CocregError::NotPositiveDefinite {
            subject: s.subject_id.clone(),
            which: "predictor (rank-deficient: u_i <= p)",
        });
    }
    if s.v() <= q {
        return Err(CocregError::NotPositiveDefinite {
            subject: s.subject_id.clone(),
            which: "outcome (rank-deficient: v_i <= q)",
        });
    }
    let delta_hat = sample_covariance(&s.x)?;
    if !is_strictly_pd(&delta_hat, PD_REL_TOL) {
        return Err(CocregError::NotPositiveDefinite {
            subject: s.subject_id.clone(),
            which: "predictor",
        });
    }
    let sigma_hat = sample_covariance(&s.y)?;
    if !is_strictly_pd(&sigma_hat, PD_REL_TOL) {
        return Err(CocregError::NotPositiveDefinite {
            subject: s.subject_id.clone(),
            which: "outcome",
        });
    }
    Ok(CovariancePair {
        sigma_hat,
        delta_hat,
        v: s.v(),
        u: s.u(),
    })
}

/// Sample covariance pairs for every subject, in cohort order.
pub fn estimate_covariances(c: &Cohort) -> Result<Vec<CovariancePair>> {
    let (p, q) = (c.p(), c.q());
    c.subjects()
        .par_iter()
        .map(|s| subject_pair(s, p, q))
        .collect()
}

/// Observation-count weighted average of covariance matrices.
pub fn weighted_average<'a, I>(items: I) -> Option<DMatrix<f64>>
where
    I: IntoIterator<Item = (&'a DMatrix<f64>, usize)>,
{
    let mut acc: Option<DMatrix<f64>> = None;
    let mut total = 0usize;
    for (m, weight) in items {
        total += weight;
        match acc.as_mut() {
            Some(a) => *a += m * weight as f64,
            None => acc = Some(m * weight as f64),
        }
    }
    acc.map(|mut a| {
        a /= total as f64;
        symmetrize(&mut a);
        a
    })
}

pub fn pooled_outcome(pairs: &[CovariancePair]) -> Option<DMatrix<f64>> {
    weighted_average(pairs.iter().map(|pr| (&pr.sigma_hat, pr.v)))
}

pub fn pooled_predictor(pairs: &[CovariancePair]) -> Option<DMatrix<f64>> {
    weighted_average(pairs.iter().map(|pr| (&pr.delta_hat, pr.u)))
}

/// Builds `H_y`, `H_x`: identities, or the `v_i`/`u_i`-weighted pooled covariances.
pub fn pooled_constraints(pairs: &[CovariancePair], mode: ConstraintMode) -> Result<ConstraintMatrices> {
    let first = pairs
        .first()
        .ok_or_else(|| CocregError::Validation("no covariance pairs".into()))?;
    let (q, p) = (first.sigma_hat.nrows(), first.delta_hat.nrows());
    if pairs
        .iter()
        .any(|pr| pr.sigma_hat.nrows() != q || pr.delta_hat.nrows() != p)
    {
        return Err(CocregError::Validation("covariance pairs have mixed dimensions".into()));
    }
    let (h_y, h_x) = match mode {
        ConstraintMode::Identity => (DMatrix::identity(q, q), DMatrix::identity(p, p)),
        ConstraintMode::Pooled => (
            pooled_outcome(pairs).expect("non-empty"),
            pooled_predictor(pairs).expect("non-empty"),
        ),
    };
    Ok(ConstraintMatrices { h_y, h_x, mode })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn subject(id: &str, seed: u64, u: usize, p: usize, v: usize, q: usize) -> SubjectDataset {
        SubjectDataset::new(
            id,
            gaussian(u, p, seed),
            gaussian(v, q, seed + 1000),
            DVector::from_vec(vec![1.0, 0.0]),
        )
        .unwrap()
    }

    #[test]
    fn center_examples() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 5.0]);
        let c = center(&m).unwrap();
        assert_eq!(c, DMatrix::from_row_slice(2, 2, &[-1.0, -1.0, 1.0, 1.0]));
        let single = DMatrix::from_row_slice(1, 2, &[2.0, 2.0]);
        assert_eq!(center(&single).unwrap(), DMatrix::zeros(1, 2));
        let g = gaussian(17, 3, 1);
        let once = center(&g).unwrap();
        assert!((center(&once).unwrap() - &once).norm() < 1e-14);
        for col in once.column_iter() {
            assert!(col.sum().abs() / 17.0 < 1e-12);
        }
    }

    #[test]
    fn center_rejects_non_finite() {
        let m = DMatrix::from_row_slice(2, 1, &[1.0, f64::NAN]);
        assert!(matches!(center(&m), Err(CocregError::Validation(_))));
    }

    #[test]
    fn sample_covariance_examples() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]);
        assert_eq!(
            sample_covariance(&m).unwrap(),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])
        );
        let constant = DMatrix::from_row_slice(3, 2, &[4.0, 1.0, 4.0, 1.0, 4.0, 1.0]);
        assert_eq!(sample_covariance(&constant).unwrap(), DMatrix::zeros(2, 2));
        let one_row = DMatrix::from_row_slice(1, 2, &[4.0, 1.0]);
        assert!(matches!(
            sample_covariance(&one_row),
            Err(CocregError::InsufficientData { .. })
        ));
    }

    #[test]
    fn sample_covariance_concentrates_on_identity() {
        // 500 × 4 standard Gaussian draws: ‖S − I‖_F < 0.4 in more than 99% of 1000 repetitions.
        let mut hits = 0;
        for rep in 0..1000u64 {
            let s = sample_covariance(&gaussian(500, 4, 10_000 + rep)).unwrap();
            if (s - DMatrix::identity(4, 4)).norm() < 0.4 {
                hits += 1;
            }
        }
        assert!(hits > 990, "only {hits}/1000 within 0.4");
    }

    #[test]
    fn sample_covariance_error_shrinks_with_rows() {
        // median error at 4× rows is at most half
        let median_err = |rows: usize| {
            let mut errs: Vec<f64> = (0..101u64)
                .map(|rep| {
                    (sample_covariance(&gaussian(rows, 3, rep * 7 + rows as u64)).unwrap()
                        - DMatrix::identity(3, 3))
                    .norm()
                })
                .collect();
            errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            errs[50]
        };
        let e1 = median_err(100);
        let e2 = median_err(400);
        let e3 = median_err(1600);
        assert!(e2 <= 0.5 * e1 * 1.05, "{e1} -> {e2}");
        assert!(e3 <= 0.5 * e2 * 1.05, "{e2} -> {e3}");
    }

    #[test]
    fn estimate_covariances_identical_subjects() {
        let a = subject("a", 3, 30, 3, 25, 2);
        let mut b = a.clone();
        b.subject_id = "b".into();
        let cohort = Cohort::new(vec![a, b]).unwrap();
        let pairs = estimate_covariances(&cohort).unwrap();
        assert_eq!(pairs[0], pairs[1]);
    }

    #[test]
    fn estimate_covariances_rank_deficiency_names_subject() {
        let ok = subject("ok", 1, 30, 3, 25, 2);
        let bad = subject("short", 2, 3, 3, 25, 2);
        let cohort = Cohort::new(vec![ok, bad]).unwrap();
        match estimate_covariances(&cohort) {
            Err(CocregError::NotPositiveDefinite { subject, .. }) => assert_eq!(subject, "short"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn estimate_covariances_permutation_equivariant() {
        let subjects: Vec<_> = (0..4).map(|i| subject(&format!("s{i}"), i, 20, 3, 20, 2)).collect();
        let pairs = estimate_covariances(&Cohort::new(subjects.clone()).unwrap()).unwrap();
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<_> = perm.iter().map(|&i| subjects[i].clone()).collect();
        let pairs_perm = estimate_covariances(&Cohort::new(permuted).unwrap()).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(pairs_perm[k], pairs[i]);
        }
    }

    #[test]
    fn estimation_error_drops_with_more_rows() {
        use crate::simgen::{sample_gaussian, random_orthonormal};
        let q_mat = random_orthonormal(4, 9);
        let truth = &q_mat * DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0, 0.5])) * q_mat.transpose();
        let mean_err = |u: usize| {
            (0..40u64)
                .map(|i| {
                    let x = sample_gaussian(&truth, u, 500 + i).unwrap();
                    (sample_covariance(&x).unwrap() - &truth).norm()
                })
                .sum::<f64>()
                / 40.0
        };
        assert!(mean_err(500) < mean_err(50));
    }

    #[test]
    fn pooled_constraint_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0]);
        let d = DMatrix::identity(1, 1);
        let mk = |s: &DMatrix<f64>, v| CovariancePair {
            sigma_hat: s.clone(),
            delta_hat: d.clone(),
            v,
            u: 10,
        };
        let eq = pooled_constraints(&[mk(&a, 50), mk(&b, 50)], ConstraintMode::Pooled).unwrap();
        assert!((eq.h_y - (&a + &b) / 2.0).norm() < 1e-15);
        let uneq = pooled_constraints(&[mk(&a, 100), mk(&b, 300)], ConstraintMode::Pooled).unwrap();
        assert!((&uneq.h_y - (&a * 0.25 + &b * 0.75)).norm() < 1e-15);
        let id = pooled_constraints(&[mk(&a, 100), mk(&b, 300)], ConstraintMode::Identity).unwrap();
        assert_eq!(id.h_y, DMatrix::identity(2, 2));
        assert_eq!(id.h_x, DMatrix::identity(1, 1));
        assert!(is_strictly_pd(&uneq.h_y, PD_REL_TOL));
    }

    #[test]
    fn subject_validation() {
        let x = gaussian(5, 2, 1);
        let y = gaussian(5, 2, 2);
        assert!(SubjectDataset::new("s", x.clone(), y.clone(), DVector::from_vec(vec![2.0])).is_err());
        assert!(SubjectDataset::new("s", x.rows(0, 1).into_owned(), y.clone(), DVector::from_vec(vec![1.0])).is_err());
        let mut bad = x.clone();
        bad[(0, 0)] = f64::INFINITY;
        assert!(SubjectDataset::new("s", bad, y.clone(), DVector::from_vec(vec![1.0])).is_err());
        let s = SubjectDataset::new("s", x, y, DVector::from_vec(vec![1.0])).unwrap();
        assert!(Cohort::new(vec![s.clone()]).is_err());
    }
}
