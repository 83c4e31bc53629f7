//! Dense linear-algebra helpers: generalized symmetric eigenproblems,
//! log-determinants and orthogonal complements.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{CocregError, Result};

/// Eigenpairs of a symmetric-definite pencil `(A, H)`, largest eigenvalue first.
#[derive(Debug, Clone)]
pub struct EigenSolveResult {
    pub values: Vec<f64>,
    /// Column `j` pairs with `values[j]` and satisfies `vᵀ H v = 1`.
    pub vectors: DMatrix<f64>,
    /// `‖A v − λ H v‖₂` per pair.
    pub residuals: Vec<f64>,
}

impl EigenSolveResult {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn vector(&self, j: usize) -> DVector<f64> {
        self.vectors.column(j).into_owned()
    }
}

pub fn max_asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

/// Replaces `a` by `(a + aᵀ)/2`.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

#[inline]
pub fn quad_form(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    let n = v.len();
    let mut acc = 0.0;
    for j in 0..n {
        let vj = v[j];
        if vj == 0.0 {
            continue;
        }
        let col = m.column(j);
        let mut s = 0.0;
        for i in 0..n {
            s += col[i] * v[i];
        }
        acc += s * vj;
    }
    acc
}

/// `diag(Vᵀ M V)` for every column of `V`.
pub fn quad_forms_columns(m: &DMatrix<f64>, v: &DMatrix<f64>) -> Vec<f64> {
    let mv = m * v;
    (0..v.ncols())
        .map(|j| v.column(j).dot(&mv.column(j)))
        .collect()
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted descending.
pub fn symmetric_eigen_desc(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

pub fn cholesky(h: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if h.nrows() != h.ncols() {
        return Err(CocregError::Factorization(format!(
            "matrix is {}x{}, not square",
            h.nrows(),
            h.ncols()
        )));
    }
    if h.iter().any(|x| !x.is_finite()) {
        return Err(CocregError::Factorization("non-finite entries".into()));
    }
    Cholesky::new(h.clone())
        .ok_or_else(|| CocregError::Factorization("matrix is not positive definite".into()))
}

/// Solves `A v = λ H v` for symmetric `A` and SPD `H`.
///
/// `H = L Lᵀ` is factored, the standard problem is solved on `L⁻¹ A L⁻ᵀ`,
/// and eigenvectors are mapped back through `L⁻ᵀ` so that `vᵀ H v = 1`.
pub fn generalized_symmetric_eigen(a: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<EigenSolveResult> {
    let n = a.nrows();
    if a.ncols() != n || h.nrows() != n || h.ncols() != n {
        return Err(CocregError::Validation(format!(
            "dimension mismatch: A is {}x{}, H is {}x{}",
            a.nrows(),
            a.ncols(),
            h.nrows(),
            h.ncols()
        )));
    }
    let scale = a.norm().max(1.0);
    if max_asymmetry(a) > 1e-10 * scale {
        return Err(CocregError::Validation("A is not symmetric".into()));
    }
    let chol = cholesky(h)?;
    let l = chol.l();
    // C = L⁻¹ A L⁻ᵀ
    let linv_a = l
        .solve_lower_triangular(a)
        .ok_or_else(|| CocregError::Factorization("singular Cholesky factor".into()))?;
    let mut c = l
        .solve_lower_triangular(&linv_a.transpose())
        .ok_or_else(|| CocregError::Factorization("singular Cholesky factor".into()))?;
    symmetrize(&mut c);
    let (values, y) = symmetric_eigen_desc(&c);
    let vectors = l
        .transpose()
        .solve_upper_triangular(&y)
        .ok_or_else(|| CocregError::Factorization("singular Cholesky factor".into()))?;
    let av = a * &vectors;
    let hv = h * &vectors;
    let residuals = (0..n)
        .map(|j| (av.column(j) - hv.column(j) * values[j]).norm())
        .collect();
    Ok(EigenSolveResult {
        values,
        vectors,
        residuals,
    })
}

/// `log det A` for SPD `A` via Cholesky.
pub fn log_det_spd(a: &DMatrix<f64>) -> Result<f64> {
    let chol = cholesky(a)?;
    let l = chol.l_dirty();
    Ok((0..a.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0)
}

/// Smallest over largest eigenvalue check used for strict positive definiteness.
pub fn is_strictly_pd(a: &DMatrix<f64>, rel_tol: f64) -> bool {
    if a.nrows() == 0 || a.iter().any(|x| !x.is_finite()) {
        return false;
    }
    let eig = SymmetricEigen::new(a.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    max > 0.0 && min > rel_tol * max
}

/// Orthonormal basis (as columns) for the orthogonal complement of `span(basis)` in `R^dim`.
///
/// `basis` must have orthonormal columns.
pub fn orthogonal_complement(basis: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    let k = basis.ncols();
    if k == 0 {
        return DMatrix::identity(dim, dim);
    }
    let proj = DMatrix::identity(dim, dim) - basis * basis.transpose();
    let (values, vectors) = symmetric_eigen_desc(&proj);
    let keep = values.iter().filter(|&&v| v > 0.5).count();
    vectors.columns(0, keep).into_owned()
}

/// Orthonormalizes the columns of `m` (thin QR, positive diagonal).
pub fn orthonormalize_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.ncols() == 0 {
        return m.clone();
    }
    let qr = m.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..q.ncols() {
        if r[(j, j)] < 0.0 {
            let mut col = q.column_mut(j);
            col.neg_mut();
        }
    }
    q
}

/// Largest-|entry| positive sign convention.
pub fn sign_normalize(v: &mut DVector<f64>) {
    let mut idx = 0;
    let mut best = -1.0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > best {
            best = x.abs();
            idx = i;
        }
    }
    if !v.is_empty() && v[idx] < 0.0 {
        v.neg_mut();
    }
}

/// Solves an SPD system with a condition-number guard. Returns the solution and the condition number.
pub fn solve_spd_guarded(
    gram: &DMatrix<f64>,
    rhs: &DVector<f64>,
    max_condition: f64,
) -> Result<DVector<f64>> {
    let eig = SymmetricEigen::new(gram.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition < max_condition) {
        return Err(CocregError::Collinear { condition });
    }
    let chol = cholesky(gram).map_err(|_| CocregError::Collinear { condition })?;
    let mut x = chol.solve(rhs);
    // one round of iterative refinement
    let resid = rhs - gram * &x;
    x += chol.solve(&resid);
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poly_roots_2x2(a: &DMatrix<f64>, h: &DMatrix<f64>) -> (f64, f64) {
        // det(A − λH) = 0 as a quadratic in λ
        let (a11, a12, a22) = (a[(0, 0)], a[(0, 1)], a[(1, 1)]);
        let (h11, h12, h22) = (h[(0, 0)], h[(0, 1)], h[(1, 1)]);
        let qa = h11 * h22 - h12 * h12;
        let qb = -(a11 * h22 + a22 * h11 - 2.0 * a12 * h12);
        let qc = a11 * a22 - a12 * a12;
        let disc = (qb * qb - 4.0 * qa * qc).sqrt();
        let r1 = (-qb + disc) / (2.0 * qa);
        let r2 = (-qb - disc) / (2.0 * qa);
        (r1.max(r2), r1.min(r2))
    }

    #[test]
    fn diagonal_pencil() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
        let h = DMatrix::identity(2, 2);
        let res = generalized_symmetric_eigen(&a, &h).unwrap();
        assert!((res.values[0] - 2.0).abs() < 1e-14);
        assert!((res.values[1] - 1.0).abs() < 1e-14);
        assert!((res.vectors[(0, 0)].abs() - 1.0).abs() < 1e-14);
        assert!((res.vectors[(1, 1)].abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn scaled_metric() {
        let a = DMatrix::identity(3, 3);
        let h = DMatrix::identity(3, 3) * 4.0;
        let res = generalized_symmetric_eigen(&a, &h).unwrap();
        for j in 0..3 {
            assert!((res.values[j] - 0.25).abs() < 1e-14);
            assert!((res.vector(j).norm() - 0.5).abs() < 1e-14);
        }
    }

    #[test]
    fn random_pencils_match_characteristic_polynomial() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let g = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
            let a = &g + g.transpose();
            let b = DMatrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0));
            let h = &b * b.transpose() + DMatrix::identity(2, 2) * 0.1;
            let (hi, lo) = poly_roots_2x2(&a, &h);
            let res = generalized_symmetric_eigen(&a, &h).unwrap();
            assert!((res.values[0] - hi).abs() < 1e-9, "{} vs {}", res.values[0], hi);
            assert!((res.values[1] - lo).abs() < 1e-9);
        }
    }

    #[test]
    fn residual_and_normalization_dim6() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let g = DMatrix::from_fn(6, 8, |_, _| rng.random_range(-1.0..1.0));
            let a = &g * g.transpose();
            let b = DMatrix::from_fn(6, 9, |_, _| rng.random_range(-1.0..1.0));
            let h = &b * b.transpose();
            let res = generalized_symmetric_eigen(&a, &h).unwrap();
            for j in 0..6 {
                assert!(res.residuals[j] <= 1e-8 * a.norm());
                let v = res.vector(j);
                assert!((quad_form(&h, &v) - 1.0).abs() < 1e-8);
                if j > 0 {
                    assert!(res.values[j - 1] >= res.values[j]);
                }
            }
            // H-orthogonality
            let gram = res.vectors.transpose() * &h * &res.vectors;
            assert!((gram - DMatrix::identity(6, 6)).norm() < 1e-8);
        }
    }

    #[test]
    fn non_spd_metric_is_rejected() {
        let a = DMatrix::identity(2, 2);
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            generalized_symmetric_eigen(&a, &h),
            Err(CocregError::Factorization(_))
        ));
    }

    #[test]
    fn complement_is_orthonormal_and_orthogonal() {
        let basis = orthonormalize_columns(&DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0]));
        let comp = orthogonal_complement(&basis, 4);
        assert_eq!(comp.ncols(), 2);
        assert!((comp.transpose() * &comp - DMatrix::identity(2, 2)).norm() < 1e-12);
        assert!((comp.transpose() * &basis).norm() < 1e-12);
    }

    #[test]
    fn log_det_matches_product_of_eigenvalues() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert!((log_det_spd(&a).unwrap() - (1.75f64).ln()).abs() < 1e-14);
    }
}
