//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

/// Condition number above which a block or edge matrix is treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

/// Singular values of `m`, descending.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Ratio of the largest to the smallest singular value (infinite when singular).
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let s = singular_values(m);
    match (s.first(), s.last()) {
        (Some(&max), Some(&min)) if min > 0.0 => max / min,
        _ => f64::INFINITY,
    }
}

/// Inverse of `m` together with its condition number, or `None` when the
/// condition number exceeds `max_cond`.
pub fn checked_inverse(m: &DMatrix<f64>, max_cond: f64) -> (Option<DMatrix<f64>>, f64) {
    let cond = condition_number(m);
    if !cond.is_finite() || cond > max_cond {
        return (None, cond);
    }
    (m.clone().try_inverse(), cond)
}

/// Inverse assumed to exist; falls back to the pseudo-inverse.
pub fn inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone()
        .try_inverse()
        .unwrap_or_else(|| m.clone().pseudo_inverse(1e-300).expect("pseudo-inverse"))
}

/// Frobenius-nearest orthogonal matrix, `U V^T` from the SVD `U S V^T`.
pub fn project_orthogonal(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    u * v_t
}

/// `||M^T M - I||_F`.
pub fn orthogonality_defect(m: &DMatrix<f64>) -> f64 {
    let d = m.ncols();
    (m.transpose() * m - DMatrix::<f64>::identity(d, d)).norm()
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Column-stacking vectorization.
pub fn vec_cols(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec_cols`] for a `rows x cols` matrix.
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v)
}

/// `(A - A^T) / 2`.
pub fn skew(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a - a.transpose()) * 0.5
}

/// Rows `[block * d, (block + 1) * d)` of a tall matrix.
pub fn row_block(m: &DMatrix<f64>, block: usize, d: usize) -> DMatrix<f64> {
    m.rows(block * d, d).into_owned()
}

/// Vertically stacks equally sized blocks.
pub fn stack_rows(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let Some(first) = blocks.first() else {
        return DMatrix::zeros(0, 0);
    };
    let (r, c) = first.shape();
    let mut out = DMatrix::zeros(r * blocks.len(), c);
    for (k, b) in blocks.iter().enumerate() {
        out.view_mut((k * r, 0), (r, c)).copy_from(b);
    }
    out
}

/// Minimum-norm solution `A^+ rhs` of a symmetric system. Eigenvalues below
/// `rel_tol * max|λ|` are treated as zero.
pub fn symmetric_pinv_solve(a: &DMatrix<f64>, rhs: &DVector<f64>, rel_tol: f64) -> DVector<f64> {
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cutoff = rel_tol * max;
    let mut x = DVector::zeros(a.nrows());
    if max == 0.0 {
        return x;
    }
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda.abs() > cutoff {
            let v = eig.eigenvectors.column(k);
            x += v * (v.dot(rhs) / lambda);
        }
    }
    x
}
