//! Discrete-time Riccati recursion, DARE fixed point and PBH tests.

use nalgebra::{Complex, DMatrix};

use crate::error::{Error, Result};
use crate::linalg;

/// Unit-circle margin: eigenvalues with `|λ| ≥ 1 − UNIT_MARGIN` need control.
pub const UNIT_MARGIN: f64 = 1e-10;
/// Relative singular-value threshold for numerical rank.
pub const RANK_TOL: f64 = 1e-12;

pub const DEFAULT_DARE_TOL: f64 = 1e-10;
pub const DEFAULT_DARE_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct DareSolution {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    /// Max-abs defect `‖P − step(P)‖` at the returned fixed point.
    pub residual: f64,
    pub iterations: usize,
    pub closed_loop_radius: f64,
}

/// One backward step: returns `(P, K)` with
/// `K = −(R + BᵀPB)⁻¹BᵀPA` and `P = Q + AᵀPA + AᵀPB·K`.
pub fn riccati_step(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p_next: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let s = DMatrix::zeros(a.ncols(), b.ncols());
    riccati_step_cross(a, b, q, r, &s, p_next, "riccati step")
}

/// Backward step with cross weight `S` and rectangular `A` (`n_out × n_in`),
/// `B` (`n_out × m`):
/// `K = −(R + BᵀXB)⁻¹(Sᵀ + BᵀXA)`, `X = Q + AᵀXA − (S + AᵀXB)(R + BᵀXB)⁻¹(Sᵀ + BᵀXA)`.
pub fn riccati_step_cross(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    s: &DMatrix<f64>,
    x_next: &DMatrix<f64>,
    context: &str,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let xb = x_next * b;
    let inner = r + b.transpose() * &xb;
    let coupling = s.transpose() + xb.transpose() * a;
    let k = -linalg::spd_solve(&inner, &coupling, context)?;
    let x = q + a.transpose() * x_next * a + coupling.transpose() * &k;
    Ok((linalg::symmetrize(&x), k))
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// PBH test: `rank [A − λI, B] = n` for every eigenvalue with `|λ| ≥ 1 − margin`.
pub fn is_stabilizable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    if n == 0 {
        return true;
    }
    let ac = linalg::to_complex(a);
    let bc = linalg::to_complex(b);
    a.complex_eigenvalues().iter().all(|lam| {
        if lam.norm() < 1.0 - UNIT_MARGIN {
            return true;
        }
        let mut pbh = DMatrix::<Complex<f64>>::zeros(n, n + b.ncols());
        let shifted = &ac - DMatrix::<Complex<f64>>::identity(n, n) * *lam;
        pbh.view_mut((0, 0), (n, n)).copy_from(&shifted);
        pbh.view_mut((0, n), (n, b.ncols())).copy_from(&bc);
        linalg::numerical_rank(&pbh, RANK_TOL) == n
    })
}

/// Detectability of `(A, C)` as stabilizability of `(Aᵀ, Cᵀ)`.
pub fn is_detectable(a: &DMatrix<f64>, c: &DMatrix<f64>) -> bool {
    is_stabilizable(&a.transpose(), &c.transpose())
}

/// Stabilizing DARE solution by fixed-point iteration from `P = 0`.
pub fn dare_solve(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DareSolution> {
    let s = DMatrix::zeros(a.nrows(), b.ncols());
    dare_solve_cross(a, b, q, r, &s, tol, max_iter)
}

/// DARE with cross weight `S`, solved on the completed-square data
/// `Ā = A − BR⁻¹Sᵀ`, `Q̄ = Q − SR⁻¹Sᵀ` and mapped back via `K = K̄ − R⁻¹Sᵀ`.
pub fn dare_solve_cross(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    s: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DareSolution> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.nrows() != b.ncols() {
        return Err(Error::Dimension("DARE data have inconsistent shapes".into()));
    }
    let r_inv_st = linalg::spd_solve(r, &s.transpose(), "DARE control weight")?;
    let a_bar = a - b * &r_inv_st;
    let q_bar = linalg::symmetrize(&(q - s * &r_inv_st));
    if !linalg::is_psd(&q_bar) {
        return Err(Error::precondition(
            "stacked cost PSD",
            "Q − S R⁻¹ Sᵀ is not positive semidefinite",
        ));
    }
    if !is_stabilizable(a, b) {
        return Err(Error::precondition(
            "stabilizable",
            "(A, B) fails the PBH stabilizability test",
        ));
    }
    let c = linalg::psd_sqrt(&q_bar);
    if !is_detectable(&a_bar, &c) {
        return Err(Error::precondition(
            "detectable",
            "(A, Q^{1/2}) fails the PBH detectability test",
        ));
    }

    let mut p = DMatrix::zeros(n, n);
    let mut diff = f64::INFINITY;
    for it in 1..=max_iter {
        let (p_new, _) = riccati_step(&a_bar, b, &q_bar, r, &p)?;
        diff = (&p_new - &p).amax();
        p = p_new;
        if diff < tol * (1.0 + p.amax()) {
            let (p_check, k_bar) = riccati_step(&a_bar, b, &q_bar, r, &p)?;
            let residual = (&p_check - &p).amax();
            let k = k_bar - &r_inv_st;
            let closed_loop_radius = spectral_radius(&(a + b * &k));
            if closed_loop_radius >= 1.0 {
                return Err(Error::precondition(
                    "closed-loop stability",
                    format!("spectral radius of A + BK is {closed_loop_radius}"),
                ));
            }
            return Ok(DareSolution {
                p,
                k,
                residual,
                iterations: it,
                closed_loop_radius,
            });
        }
    }
    Err(Error::NonConvergence {
        context: "DARE fixed-point iteration".into(),
        iterations: max_iter,
        residual: diff,
        series: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    const PHI: f64 = 1.618_033_988_749_895;

    #[test]
    fn step_examples() {
        let one = m1(1.0);
        let (p, k) = riccati_step(&one, &one, &one, &one, &m1(0.0)).unwrap();
        assert_eq!((p[0], k[0]), (1.0, 0.0));
        let (p, k) = riccati_step(&one, &one, &one, &one, &one).unwrap();
        assert!((p[0] - 1.5).abs() < 1e-15 && (k[0] + 0.5).abs() < 1e-15);
        let (p, k) = riccati_step(&m1(0.0), &one, &m1(2.0), &one, &m1(7.0)).unwrap();
        assert_eq!((p[0], k[0]), (2.0, 0.0));
    }

    #[test]
    fn dare_examples() {
        let one = m1(1.0);
        let sol = dare_solve(&m1(0.0), &one, &one, &one, 1e-10, 10_000).unwrap();
        assert!((sol.p[0] - 1.0).abs() < 1e-12);

        let sol = dare_solve(&one, &one, &one, &one, 1e-10, 10_000).unwrap();
        // positive root of P² − P − 1 = 0
        let root = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((sol.p[0] - root).abs() < 1e-8);
        assert!((sol.k[0] + root / (1.0 + root)).abs() < 1e-8);
        assert!(sol.closed_loop_radius < 1.0);
        assert!((sol.p[0] - PHI).abs() < 1e-8);

        let sol = dare_solve(&m1(0.5), &one, &m1(0.0), &one, 1e-10, 10_000).unwrap();
        assert_eq!(sol.p[0], 0.0);
    }

    #[test]
    fn dare_rejects_uncontrollable_unstable() {
        let err = dare_solve(&m1(2.0), &m1(0.0), &m1(1.0), &m1(1.0), 1e-10, 100).unwrap_err();
        assert!(matches!(err, Error::Precondition { ref check, .. } if check == "stabilizable"));
        let err = dare_solve(&m1(2.0), &m1(1.0), &m1(0.0), &m1(1.0), 1e-10, 100).unwrap_err();
        assert!(matches!(err, Error::Precondition { ref check, .. } if check == "detectable"));
    }

    #[test]
    fn dare_iteration_cap_reports_residual() {
        let err = dare_solve(&m1(1.0), &m1(1.0), &m1(1.0), &m1(1.0), 1e-10, 3).unwrap_err();
        match err {
            Error::NonConvergence { iterations, residual, .. } => {
                assert_eq!(iterations, 3);
                assert!(residual > 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cross_term_matches_expanded_recursion() {
        // Oracle: iterate the cross-term step directly on the original data.
        let a = DMatrix::from_row_slice(2, 2, &[1.1, 0.3, 0.0, 0.9]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.2, 0.2, 1.0]);
        let r = m1(1.0);
        let s = DMatrix::from_row_slice(2, 1, &[0.3, 0.1]);
        let sol = dare_solve_cross(&a, &b, &q, &r, &s, 1e-12, 10_000).unwrap();
        let mut x = DMatrix::zeros(2, 2);
        let mut k = DMatrix::zeros(1, 2);
        for _ in 0..5000 {
            (x, k) = riccati_step_cross(&a, &b, &q, &r, &s, &x, "oracle").unwrap();
        }
        assert!((&x - &sol.p).amax() < 1e-9);
        assert!((&k - &sol.k).amax() < 1e-9);
    }

    #[test]
    fn pbh_examples() {
        assert!(!is_stabilizable(&m1(2.0), &m1(0.0)));
        assert!(is_stabilizable(&m1(2.0), &m1(1.0)));
        assert!(is_stabilizable(&m1(0.5), &m1(0.0)));
        assert!(!is_stabilizable(&m1(1.0), &m1(0.0)));
        assert!(is_detectable(&m1(2.0), &m1(1.0)));
        assert!(!is_detectable(&m1(2.0), &m1(0.0)));
    }

    #[test]
    fn spectral_radius_examples() {
        assert_eq!(spectral_radius(&m1(0.5)), 0.5);
        let nil = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(spectral_radius(&nil), 0.0);
        let rot = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert!((spectral_radius(&rot) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn horizon_monotone_from_zero() {
        let a = DMatrix::from_row_slice(2, 2, &[1.2, 0.5, -0.3, 0.8]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = DMatrix::identity(2, 2);
        let r = m1(0.7);
        let mut p = DMatrix::zeros(2, 2);
        for _ in 0..60 {
            let (p_new, _) = riccati_step(&a, &b, &q, &r, &p).unwrap();
            let (lo, _) = linalg::eig_range(&(&p_new - &p));
            assert!(lo >= -1e-9);
            p = p_new;
        }
    }

    #[test]
    fn cesaro_mean_of_value_sequence() {
        // P_t^{(T)} equals the (T − t)-th iterate from zero, so the average over t
        // is the running mean of the iterates.
        let one = m1(1.0);
        let horizon = 50_000;
        let mut p = m1(0.0);
        let mut norms = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            p = riccati_step(&one, &one, &one, &one, &p).unwrap().0;
            norms.push(p[0].abs());
        }
        let mean = linalg::compensated_sum(norms) / horizon as f64;
        assert!((mean - PHI).abs() < 1e-4);
    }

    fn psd_strategy(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
        proptest::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| {
            let f = DMatrix::from_vec(n, n, v);
            &f * f.transpose()
        })
    }

    proptest! {
        #[test]
        fn step_preserves_symmetry_and_psd(
            a in proptest::collection::vec(-2.0f64..2.0, 4),
            b in proptest::collection::vec(-2.0f64..2.0, 2),
            q in psd_strategy(2),
            p in psd_strategy(2),
            r in 0.1f64..3.0,
        ) {
            let a = DMatrix::from_vec(2, 2, a);
            let b = DMatrix::from_vec(2, 1, b);
            let (p_out, _) = riccati_step(&a, &b, &q, &m1(r), &p).unwrap();
            prop_assert!(linalg::is_symmetric(&p_out));
            prop_assert!(linalg::is_psd(&p_out));
        }

        #[test]
        fn dare_is_fixed_point_and_stabilizing(
            a in proptest::collection::vec(-1.5f64..1.5, 4),
            b in proptest::collection::vec(-2.0f64..2.0, 2),
            r in 0.2f64..3.0,
        ) {
            let a = DMatrix::from_vec(2, 2, a);
            let b = DMatrix::from_vec(2, 1, b);
            prop_assume!(is_stabilizable(&a, &b));
            let q = DMatrix::identity(2, 2);
            let sol = dare_solve(&a, &b, &q, &m1(r), 1e-10, 100_000).unwrap();
            let (p_next, _) = riccati_step(&a, &b, &q, &m1(r), &sol.p).unwrap();
            prop_assert!((p_next - &sol.p).amax() < 1e-8 * (1.0 + sol.p.amax()));
            prop_assert!(spectral_radius(&(&a + &b * &sol.k)) < 1.0);
        }
    }
}
