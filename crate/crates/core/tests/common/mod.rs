//! Random instance generators and reference computations shared by the
//! integration suites.

#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use symteam::team_model::{
    self, CostSpec, DelayMatrix, Dynamics, InfoStructure, NoiseFamily, NoiseSpec, TeamSpec,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn m1(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

pub fn uniform_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// `G Gᵀ + floor·I` with `G` uniform on `[−1, 1]`.
pub fn spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let g = uniform_mat(rng, n, n, -1.0, 1.0);
    let m = &g * g.transpose() + DMatrix::identity(n, n) * floor;
    (&m + m.transpose()) * 0.5
}

pub fn valid(spec: &TeamSpec) -> bool {
    team_model::validate(spec).map(|r| r.passed()).unwrap_or(false)
}

/// Homogeneous tree instance with a control coupling and correlated initial states.
pub fn random_tree_spec(rng: &mut ChaCha8Rng, n: usize, m: usize, n_dm: usize, horizon: usize) -> TeamSpec {
    loop {
        let a = uniform_mat(rng, n, n, -1.2, 1.2);
        let b = uniform_mat(rng, n, m, -1.0, 1.0);
        let q = spd(rng, n, 0.2);
        let r = spd(rng, m, 0.5);
        let r_tilde = spd(rng, m, 0.1) * rng.random_range(0.05..0.4);
        let init_diag = spd(rng, n, 0.3);
        let alpha = rng.random_range(-0.8 / (n_dm as f64 - 1.0)..0.8);
        let wiggle = uniform_mat(rng, n, n, -0.1, 0.1);
        let init_offdiag = &init_diag * alpha + (&wiggle + wiggle.transpose()) * 0.5;
        let spec = TeamSpec {
            n_dm,
            horizon,
            dynamics: Dynamics::Homogeneous { a, b },
            cost: CostSpec {
                q,
                r,
                r_tilde: Some(r_tilde),
                q_tilde: None,
                s: None,
            },
            noise: NoiseSpec {
                sigma_w: spd(rng, n, 0.1),
                init_diag,
                init_offdiag,
                family: NoiseFamily::Gaussian,
            },
            info: InfoStructure::Tree,
        };
        if valid(&spec) && team_model::conditional_gain(&spec.noise).is_ok() {
            return spec;
        }
    }
}

/// `diag` on the block diagonal and `off` everywhere else.
pub fn exchangeable(nd: usize, diag: &DMatrix<f64>, off: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = diag.shape();
    let mut out = DMatrix::zeros(nd * r, nd * c);
    for i in 0..nd {
        for j in 0..nd {
            let block = if i == j { diag } else { off };
            out.view_mut((i * r, j * c), (r, c)).copy_from(block);
        }
    }
    out
}

/// Single-DM blocked instance `(A, B, Q, R, S)` under delayed information,
/// with a cross weight and a terminal weight equal to `Q`.
pub fn random_single_dm(rng: &mut ChaCha8Rng, n: usize, m: usize, horizon: usize) -> TeamSpec {
    let a = uniform_mat(rng, n, n, -1.3, 1.3);
    let b = uniform_mat(rng, n, m, -1.0, 1.0);
    let w = spd(rng, n + m, 0.1);
    let q = w.view((0, 0), (n, n)).into_owned();
    let s = w.view((0, n), (n, m)).into_owned();
    let r = w.view((n, n), (m, m)).into_owned() + DMatrix::identity(m, m) * 0.3;
    TeamSpec {
        n_dm: 1,
        horizon,
        dynamics: Dynamics::Blocked {
            a_blocks: vec![vec![a]],
            b_blocks: vec![vec![b]],
        },
        cost: CostSpec {
            q,
            r,
            r_tilde: None,
            q_tilde: None,
            s: Some(s),
        },
        noise: NoiseSpec {
            sigma_w: spd(rng, n, 0.1),
            init_diag: spd(rng, n, 0.2),
            init_offdiag: DMatrix::zeros(n, n),
            family: NoiseFamily::Gaussian,
        },
        info: InfoStructure::Delayed {
            delays: DelayMatrix::new(vec![vec![Some(0)]]),
        },
    }
}

/// Exchangeable coupled instance under one-step delayed sharing.
pub fn random_delayed_spec(rng: &mut ChaCha8Rng, n: usize, m: usize, n_dm: usize, horizon: usize) -> TeamSpec {
    let a_self = uniform_mat(rng, n, n, -1.0, 1.0);
    let a_other = uniform_mat(rng, n, n, -0.4, 0.4);
    let b_self = uniform_mat(rng, n, m, -1.0, 1.0);
    let b_other = uniform_mat(rng, n, m, -0.3, 0.3);
    let grid = |d: &DMatrix<f64>, o: &DMatrix<f64>| -> Vec<Vec<DMatrix<f64>>> {
        (0..n_dm)
            .map(|i| (0..n_dm).map(|j| if i == j { d.clone() } else { o.clone() }).collect())
            .collect()
    };
    let w = spd(rng, n + m, 0.1);
    let qd = w.view((0, 0), (n, n)).into_owned();
    let sd = w.view((0, n), (n, m)).into_owned();
    let rd = w.view((n, n), (m, m)).into_owned() + DMatrix::identity(m, m) * 0.3;
    let qc = spd(rng, n, 0.0) * 0.1;
    let rc = spd(rng, m, 0.0) * 0.1;
    let q = exchangeable(n_dm, &(&qd + &qc), &qc);
    let r = exchangeable(n_dm, &(&rd + &rc), &rc);
    let s = exchangeable(n_dm, &sd, &DMatrix::zeros(n, m));
    TeamSpec {
        n_dm,
        horizon,
        dynamics: Dynamics::Blocked {
            a_blocks: grid(&a_self, &a_other),
            b_blocks: grid(&b_self, &b_other),
        },
        cost: CostSpec {
            q,
            r,
            r_tilde: None,
            q_tilde: None,
            s: Some(s),
        },
        noise: NoiseSpec {
            sigma_w: spd(rng, n, 0.1),
            init_diag: spd(rng, n, 0.2),
            init_offdiag: DMatrix::zeros(n, n),
            family: NoiseFamily::Gaussian,
        },
        info: InfoStructure::Delayed {
            delays: DelayMatrix::one_step(n_dm),
        },
    }
}

/// Scalar two-DM family with `A = B = Q = R = 1`, `R̃ = 1/2`.
pub fn golden_ratio_spec() -> TeamSpec {
    TeamSpec {
        n_dm: 2,
        horizon: 3,
        dynamics: Dynamics::Homogeneous { a: m1(1.0), b: m1(1.0) },
        cost: CostSpec {
            q: m1(1.0),
            r: m1(1.0),
            r_tilde: Some(m1(0.5)),
            q_tilde: None,
            s: None,
        },
        noise: NoiseSpec {
            sigma_w: m1(1.0),
            init_diag: m1(1.0),
            init_offdiag: m1(0.5),
            family: NoiseFamily::Gaussian,
        },
        info: InfoStructure::Tree,
    }
}

/// Scalar mean-field family with a non-zero state coupling.
pub fn meanfield_spec(n_dm: usize) -> TeamSpec {
    TeamSpec {
        n_dm,
        horizon: 3,
        dynamics: Dynamics::Homogeneous { a: m1(1.0), b: m1(1.0) },
        cost: CostSpec {
            q: m1(1.0),
            r: m1(1.0),
            r_tilde: Some(m1(0.5)),
            q_tilde: Some(m1(0.2)),
            s: None,
        },
        noise: NoiseSpec {
            sigma_w: m1(1.0),
            init_diag: m1(1.0),
            init_offdiag: m1(0.5),
            family: NoiseFamily::Gaussian,
        },
        info: InfoStructure::MeanFieldTree,
    }
}

/// Least-squares slope of `y` against `x`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
