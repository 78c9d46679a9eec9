//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance for the PSD test: `λ_min ≥ −PSD_TOL · (1 + λ_max)`.
pub const PSD_TOL: f64 = 1e-9;

/// Tolerance for accepting a matrix as symmetric before symmetrizing it.
pub const SYM_TOL: f64 = 1e-10;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &DMatrix<f64>) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= SYM_TOL * (1.0 + m.amax())
}

/// Extreme eigenvalues `(min, max)` of the symmetric part of `m`.
pub fn eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    if m.nrows() == 0 {
        return (0.0, 0.0);
    }
    let ev = symmetrize(m).symmetric_eigenvalues();
    (ev.min(), ev.max())
}

pub fn is_psd(m: &DMatrix<f64>) -> bool {
    let (lo, hi) = eig_range(m);
    lo >= -PSD_TOL * (1.0 + hi.abs())
}

pub fn is_pd(m: &DMatrix<f64>) -> bool {
    let (lo, hi) = eig_range(m);
    lo > PSD_TOL * (1.0 + hi.abs())
}

pub fn is_zero(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| *v == 0.0)
}

/// Factor `F` with `F Fᵀ = m` for a PSD matrix (negative rounding eigenvalues clipped).
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = symmetrize(m).symmetric_eigen();
    let mut f = eig.eigenvectors.clone();
    for (j, lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        f.column_mut(j).scale_mut(s);
    }
    f
}

/// Symmetric square root `m^{1/2}` of a PSD matrix.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = symmetrize(m).symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Solve `a x = b` for symmetric positive definite `a`.
///
/// Fails when the smallest eigenvalue is not safely positive relative to the
/// largest one.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let a = symmetrize(a);
    let (lo, hi) = eig_range(&a);
    if !(lo > 1e-13 * hi.abs().max(f64::MIN_POSITIVE)) {
        return Err(Error::singular(context));
    }
    let chol = a.cholesky().ok_or_else(|| Error::singular(context))?;
    Ok(chol.solve(b))
}

/// Solve a general square system via LU.
pub fn lu_solve(a: &DMatrix<f64>, b: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let lu = a.clone().lu();
    lu.solve(b).ok_or_else(|| Error::singular(context))
}

pub fn inverse(a: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    a.clone()
        .try_inverse()
        .filter(|inv| inv.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::singular(context))
}

/// Column-major vectorization.
pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex<f64>> {
    m.map(|v| Complex::new(v, 0.0))
}

/// Numerical rank with threshold `max(rows, cols) · σ_max · rel`.
pub fn numerical_rank(m: &DMatrix<Complex<f64>>, rel: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    let thresh = m.nrows().max(m.ncols()) as f64 * smax * rel;
    sv.iter().filter(|s| **s > thresh).count()
}

/// Smallest singular value relative to the largest (1 for the empty matrix).
pub fn relative_min_singular(m: &DMatrix<Complex<f64>>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 1.0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return 0.0;
    }
    // Column-rank deficiency shows up in the min(rows, cols) smallest value;
    // a wide matrix cannot have full column rank.
    if m.ncols() > m.nrows() {
        return 0.0;
    }
    sv.min() / smax
}

pub fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(&b.transpose()).sum()
}

/// Stack `n × n` grid of equal-sized blocks into one matrix.
pub fn from_blocks(blocks: &[Vec<DMatrix<f64>>], rows: usize, cols: usize) -> DMatrix<f64> {
    let nb = blocks.len();
    let mut out = DMatrix::zeros(nb * rows, nb * cols);
    for (i, row) in blocks.iter().enumerate() {
        for (j, blk) in row.iter().enumerate() {
            out.view_mut((i * rows, j * cols), (rows, cols)).copy_from(blk);
        }
    }
    out
}

/// `I_n ⊗ diag + (J_n − I_n) ⊗ off`, the exchangeable block pattern.
pub fn exchangeable_blocks(n_blocks: usize, diag: &DMatrix<f64>, off: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = diag.shape();
    let mut out = DMatrix::zeros(n_blocks * r, n_blocks * c);
    for i in 0..n_blocks {
        for j in 0..n_blocks {
            let blk = if i == j { diag } else { off };
            out.view_mut((i * r, j * c), (r, c)).copy_from(blk);
        }
    }
    out
}

/// Neumaier-compensated sum; order of `values` fixes the result bitwise.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_reproduces_psd_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let f = psd_factor(&m);
        assert!((&f * f.transpose() - &m).amax() < 1e-12);
        let s = psd_sqrt(&m);
        assert!((&s * &s - &m).amax() < 1e-12);
    }

    #[test]
    fn psd_tolerance_is_scale_relative() {
        let m = DMatrix::from_row_slice(2, 2, &[1e6, 0.0, 0.0, -1e-4]);
        assert!(is_psd(&m));
        let m = DMatrix::from_row_slice(1, 1, &[-1e-3]);
        assert!(!is_psd(&m));
        assert!(!is_pd(&DMatrix::from_element(1, 1, 0.0)));
    }

    #[test]
    fn rank_of_rank_one() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert_eq!(numerical_rank(&to_complex(&m), 1e-12), 1);
    }

    #[test]
    fn compensated_sum_handles_cancellation() {
        let v = vec![1e16, 1.0, -1e16];
        assert_eq!(compensated_sum(v), 1.0);
    }
}
