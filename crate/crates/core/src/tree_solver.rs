//! Optimal symmetric policies under tree (own-history) information.
//!
//! Every DM applies `u_t^i = K_t x_t^i + κ L_t Σ x_0^i`, where `Σ x_0^i` is the
//! conditional mean of another DM's initial state and `κ` counts how many
//! such conditional means the coupling statistic adds up. `K_t` comes from the
//! standard Riccati recursion. The coupling gains `L_t` minimize the exact
//! second-moment cost with `K` fixed; that problem is a deterministic LQ
//! problem on the coefficient matrix `X_t` (with `x_t^i = X_t x_0^i + noise terms`)
//! and is solved by one backward sweep on `vec(X_t)`.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::riccati;
use crate::team_model::{self, InfoStructure, TeamSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PopulationMode {
    TwoDm,
    NDm(usize),
    MeanFieldN(usize),
    MeanFieldLimit,
}

impl PopulationMode {
    /// Number of conditional means summed in the coupling statistic.
    pub fn kappa(&self) -> f64 {
        match self {
            PopulationMode::NDm(n) => n.saturating_sub(1) as f64,
            _ => 1.0,
        }
    }

    /// Weight of the coupling terms in one DM's share of the cost.
    pub fn coupling_weight(&self) -> f64 {
        match self {
            PopulationMode::NDm(n) => n.saturating_sub(1) as f64,
            _ => 1.0,
        }
    }

    /// Factor turning the per-DM share into the reported cost (before `1/T`).
    pub fn cost_multiplier(&self) -> f64 {
        match self {
            PopulationMode::TwoDm => 2.0,
            PopulationMode::NDm(n) => *n as f64,
            PopulationMode::MeanFieldN(_) | PopulationMode::MeanFieldLimit => 1.0,
        }
    }

    pub fn n_dm(&self) -> Option<usize> {
        match self {
            PopulationMode::TwoDm => Some(2),
            PopulationMode::NDm(n) | PopulationMode::MeanFieldN(n) => Some(*n),
            PopulationMode::MeanFieldLimit => None,
        }
    }
}

impl fmt::Display for PopulationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PopulationMode::TwoDm => write!(f, "two_dm"),
            PopulationMode::NDm(n) => write!(f, "n_dm({n})"),
            PopulationMode::MeanFieldN(n) => write!(f, "mean_field_N({n})"),
            PopulationMode::MeanFieldLimit => write!(f, "mean_field_limit"),
        }
    }
}

/// Mode implied by the spec's information structure and population size.
pub fn mode_for(spec: &TeamSpec) -> Result<PopulationMode> {
    match spec.info {
        InfoStructure::Tree if spec.n_dm == 2 => Ok(PopulationMode::TwoDm),
        InfoStructure::Tree => Ok(PopulationMode::NDm(spec.n_dm)),
        InfoStructure::MeanFieldTree => Ok(PopulationMode::MeanFieldN(spec.n_dm)),
        InfoStructure::Delayed { .. } => Err(Error::Unsupported(
            "tree solver needs tree or mean-field information".into(),
        )),
    }
}

fn check_mode(spec: &TeamSpec, mode: PopulationMode) -> Result<()> {
    let ok = match mode {
        PopulationMode::TwoDm => spec.n_dm == 2 && spec.info == InfoStructure::Tree,
        PopulationMode::NDm(n) => n == spec.n_dm && spec.info == InfoStructure::Tree,
        PopulationMode::MeanFieldN(n) => n == spec.n_dm && spec.info == InfoStructure::MeanFieldTree,
        PopulationMode::MeanFieldLimit => spec.info == InfoStructure::MeanFieldTree,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Unsupported(format!(
            "population mode {mode} does not match a {} spec with {} DMs",
            spec.info.name(),
            spec.n_dm
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreePolicy {
    pub horizon: usize,
    pub mode: PopulationMode,
    pub k: Vec<DMatrix<f64>>,
    pub l: Vec<DMatrix<f64>>,
    /// `P_0 .. P_T` with `P_T = 0`.
    pub p: Vec<DMatrix<f64>>,
    /// Initial-state coefficient of the closed-loop state, `G_0 = I`.
    pub g: Vec<DMatrix<f64>>,
    /// Conditional-mean gain the policy was computed with.
    pub sigma: DMatrix<f64>,
}

impl TreePolicy {
    /// Control of one DM given its current and initial state.
    pub fn control(&self, t: usize, x: &DVector<f64>, x0: &DVector<f64>) -> DVector<f64> {
        &self.k[t] * x + &self.l[t] * (&self.sigma * x0) * self.mode.kappa()
    }
}

/// Backward Riccati sweep from `P_T = 0`; returns `(K_0..K_{T−1}, P_0..P_T)`.
pub fn solve_k_p(spec: &TeamSpec, horizon: usize) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
    let (a, b) = spec.homogeneous()?;
    let (q, r) = (&spec.cost.q, &spec.cost.r);
    let n = a.nrows();
    let mut p = vec![DMatrix::zeros(n, n); horizon + 1];
    let mut k = vec![DMatrix::zeros(b.ncols(), n); horizon];
    for t in (0..horizon).rev() {
        let (p_t, k_t) = riccati::riccati_step(a, b, q, r, &p[t + 1])
            .map_err(|_| Error::singular(format!("R + BᵀP_{{{}}}B at stage {t}", t + 1)))?;
        p[t] = p_t;
        k[t] = k_t;
    }
    Ok((k, p))
}

/// Coupling gains `L_0..L_{T−1}` and state coefficients `G_0..G_{T−1}`.
pub fn solve_coupling_gains(
    spec: &TeamSpec,
    k: &[DMatrix<f64>],
    mode: PopulationMode,
) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
    let (a, b) = spec.homogeneous()?;
    let (n, m) = (a.nrows(), b.ncols());
    let horizon = k.len();
    let sigma = team_model::conditional_gain(&spec.noise)?.0;
    let kappa = mode.kappa();
    let weight = mode.coupling_weight();
    let sd = linalg::symmetrize(&spec.noise.init_diag);
    let so = linalg::symmetrize(&spec.noise.init_offdiag);
    let id_n = DMatrix::<f64>::identity(n, n);
    let id_m = DMatrix::<f64>::identity(m, m);

    let lifted_q = sd.kronecker(&spec.cost.q) + so.kronecker(&spec.q_tilde()) * weight;
    let lifted_r = sd.kronecker(&spec.cost.r) + so.kronecker(&spec.r_tilde()) * weight;
    let lifted_d = sigma.transpose().kronecker(&id_m) * kappa;
    let lifted_b = sigma.transpose().kronecker(b) * kappa;
    let lifted_k: Vec<DMatrix<f64>> = k.iter().map(|kt| id_n.kronecker(kt)).collect();
    let lifted_a: Vec<DMatrix<f64>> = k.iter().map(|kt| id_n.kronecker(&(a + b * kt))).collect();

    let mut l = vec![DMatrix::zeros(m, n); horizon];
    let mut g = Vec::with_capacity(horizon);
    // Without cost coupling the Riccati feedback is already optimal for each DM.
    let no_coupling = kappa == 0.0
        || linalg::is_zero(&sigma)
        || (linalg::is_zero(&spec.r_tilde()) && linalg::is_zero(&spec.q_tilde()));

    let mut feedback = Vec::new();
    if !no_coupling {
        let dim = n * n;
        let mut pi = DMatrix::<f64>::zeros(dim, dim);
        feedback = vec![DMatrix::zeros(m * n, dim); horizon];
        for t in (0..horizon).rev() {
            let pi_b = &pi * &lifted_b;
            let hvv = lifted_d.transpose() * &lifted_r * &lifted_d + lifted_b.transpose() * &pi_b;
            let hvx = lifted_d.transpose() * &lifted_r * &lifted_k[t] + pi_b.transpose() * &lifted_a[t];
            let f = -linalg::spd_solve(&hvv, &hvx, "coupling stage").map_err(|_| {
                Error::CouplingSingular(format!(
                    "stationarity system for L_{t} is singular (degenerate Σ or R̃ combination)"
                ))
            })?;
            pi = &lifted_q
                + lifted_k[t].transpose() * &lifted_r * &lifted_k[t]
                + lifted_a[t].transpose() * &pi * &lifted_a[t]
                + hvx.transpose() * &f;
            pi = linalg::symmetrize(&pi);
            feedback[t] = f;
        }
    }

    let mut xi = linalg::vec_of(&id_n);
    for t in 0..horizon {
        g.push(linalg::unvec(&xi, n, n));
        let v = if no_coupling {
            DVector::zeros(m * n)
        } else {
            &feedback[t] * &xi
        };
        l[t] = linalg::unvec(&v, m, n);
        xi = &lifted_a[t] * &xi + &lifted_b * &v;
    }
    Ok((l, g))
}

/// Full finite-horizon solve for the spec's own population mode.
pub fn solve_tree(spec: &TeamSpec) -> Result<TreePolicy> {
    let mode = mode_for(spec)?;
    solve_tree_mode(spec, spec.horizon, mode)
}

pub fn solve_tree_mode(spec: &TeamSpec, horizon: usize, mode: PopulationMode) -> Result<TreePolicy> {
    team_model::validate(spec)?.into_result()?;
    check_mode(spec, mode)?;
    if horizon == 0 {
        return Err(Error::Validation("horizon positive".into()));
    }
    let (k, p) = solve_k_p(spec, horizon)?;
    let (l, g) = solve_coupling_gains(spec, &k, mode)?;
    let sigma = team_model::conditional_gain(&spec.noise)?.0;
    Ok(TreePolicy {
        horizon,
        mode,
        k,
        l,
        p,
        g,
        sigma,
    })
}

/// One literal evaluation of the closed-form cost with a given power of `Aᵀ`
/// in the cross term and a given value-matrix index in the noise term.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVariant {
    pub name: String,
    pub value: f64,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedCost {
    /// Exact second-moment propagation of the closed loop.
    pub value: f64,
    /// Same cost through completion of squares around the Riccati feedback.
    pub completed_square: f64,
    /// Literal closed-form variants (two-DM mode only).
    pub variants: Vec<CostVariant>,
    pub best_variant: Option<String>,
}

/// Per-DM cost share, summed over stages (not yet scaled).
fn moment_share(spec: &TeamSpec, policy: &TreePolicy) -> Result<f64> {
    let (a, b) = spec.homogeneous()?;
    let n = a.nrows();
    let kappa = policy.mode.kappa();
    let weight = policy.mode.coupling_weight();
    let sd = &spec.noise.init_diag;
    let so = &spec.noise.init_offdiag;
    let (q, r, rt, qt) = (&spec.cost.q, &spec.cost.r, spec.r_tilde(), spec.q_tilde());
    let mut x = DMatrix::<f64>::identity(n, n);
    let mut v = DMatrix::<f64>::zeros(n, n);
    let mut terms = Vec::with_capacity(policy.horizon);
    for t in 0..policy.horizon {
        let kt = &policy.k[t];
        let u = kt * &x + &policy.l[t] * &policy.sigma * kappa;
        let mut stage = linalg::trace_product(q, &(&x * sd * x.transpose()))
            + linalg::trace_product(r, &(&u * sd * u.transpose()))
            + weight
                * (linalg::trace_product(&rt, &(&u * so * u.transpose()))
                    + linalg::trace_product(&qt, &(&x * so * x.transpose())));
        stage += linalg::trace_product(&(q + kt.transpose() * r * kt), &v);
        terms.push(stage);
        let phi = a + b * kt;
        x = &phi * &x + b * &policy.l[t] * &policy.sigma * kappa;
        v = &phi * &v * phi.transpose() + &spec.noise.sigma_w;
    }
    Ok(linalg::compensated_sum(terms))
}

fn completed_square_share(spec: &TeamSpec, policy: &TreePolicy) -> Result<f64> {
    let (a, b) = spec.homogeneous()?;
    let n = a.nrows();
    let kappa = policy.mode.kappa();
    let weight = policy.mode.coupling_weight();
    let sd = &spec.noise.init_diag;
    let so = &spec.noise.init_offdiag;
    let (r, rt, qt) = (&spec.cost.r, spec.r_tilde(), spec.q_tilde());
    let mut terms = vec![linalg::trace_product(&policy.p[0], sd)];
    let mut x = DMatrix::<f64>::identity(n, n);
    for t in 0..policy.horizon {
        let p_next = &policy.p[t + 1];
        terms.push(linalg::trace_product(p_next, &spec.noise.sigma_w));
        let offset = &policy.l[t] * &policy.sigma * kappa;
        let h = r + b.transpose() * p_next * b;
        terms.push(linalg::trace_product(&h, &(&offset * sd * offset.transpose())));
        let u = &policy.k[t] * &x + &offset;
        terms.push(
            weight
                * (linalg::trace_product(&rt, &(&u * so * u.transpose()))
                    + linalg::trace_product(&qt, &(&x * so * x.transpose()))),
        );
        x = (a + b * &policy.k[t]) * &x + b * &offset;
    }
    Ok(linalg::compensated_sum(terms))
}

fn literal_variants(spec: &TeamSpec, policy: &TreePolicy, reference: f64) -> Result<Vec<CostVariant>> {
    let (a, b) = spec.homogeneous()?;
    let horizon = policy.horizon;
    let sd = &spec.noise.init_diag;
    let c_cov = &policy.sigma * sd * policy.sigma.transpose();
    let scale = policy.mode.cost_multiplier() / horizon as f64;
    let mut out = Vec::new();
    for (exp_name, shift) in [("t", 0i64), ("t-1", -1)] {
        for (noise_name, noise_shift) in [("t", 0usize), ("t+1", 1)] {
            let mut terms = vec![linalg::trace_product(&policy.p[0], sd)];
            for t in 0..horizon {
                terms.push(linalg::trace_product(&policy.p[t + noise_shift], &spec.noise.sigma_w));
                let bl = b * &policy.l[t];
                terms.push(linalg::trace_product(
                    &(bl.transpose() * &policy.p[t + 1] * &bl),
                    &c_cov,
                ));
                if t >= 1 {
                    let power = (t as i64 + shift) as u32;
                    let at_pow = a.transpose().pow(power);
                    let cross = at_pow * &policy.p[t + 1] * &bl * &policy.sigma * sd;
                    terms.push(cross.trace());
                }
            }
            let value = scale * linalg::compensated_sum(terms);
            out.push(CostVariant {
                name: format!("exponent {exp_name}, noise index {noise_name}"),
                value,
                deviation: (value - reference).abs(),
            });
        }
    }
    Ok(out)
}

/// Predicted average cost of a tree policy for the spec it was solved for.
pub fn predicted_cost(spec: &TeamSpec, policy: &TreePolicy) -> Result<PredictedCost> {
    check_mode(spec, policy.mode)?;
    let horizon = policy.horizon;
    if policy.k.len() != horizon || policy.l.len() != horizon || policy.p.len() != horizon + 1 {
        return Err(Error::Dimension("policy schedule lengths disagree with its horizon".into()));
    }
    let scale = policy.mode.cost_multiplier() / horizon as f64;
    let value = scale * moment_share(spec, policy)?;
    let completed_square = scale * completed_square_share(spec, policy)?;
    let (variants, best_variant) = if policy.mode == PopulationMode::TwoDm {
        let variants = literal_variants(spec, policy, value)?;
        let best = variants
            .iter()
            .min_by(|x, y| x.deviation.total_cmp(&y.deviation))
            .map(|v| v.name.clone());
        (variants, best)
    } else {
        (Vec::new(), None)
    };
    Ok(PredictedCost {
        value,
        completed_square,
        variants,
        best_variant,
    })
}

pub const DEFAULT_INF_TOL: f64 = 1e-7;
pub const INF_START_HORIZON: usize = 16;
pub const INF_HORIZON_CAP: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct InfiniteTreeSolution {
    pub mode: PopulationMode,
    pub k: DMatrix<f64>,
    pub p: DMatrix<f64>,
    /// `L_t^{(∞)}` for `t` in the converged window.
    pub l: Vec<DMatrix<f64>>,
    pub sigma: DMatrix<f64>,
    pub closed_loop_radius: f64,
    pub dare_iterations: usize,
    pub dare_residual: f64,
    /// Horizon pair `(T, 2T)` whose prefix disagreement met the tolerance.
    pub converged_horizon: usize,
    /// `(T, max_t ‖L_t^{(T)} − L_t^{(2T)}‖)` for every doubling tried.
    pub disagreement: Vec<(usize, f64)>,
    /// First stage after which every `‖L_t‖` stays below the tolerance.
    pub decay_horizon: Option<usize>,
    /// `(T, (1/T) Σ_t ‖P_t^{(T)} − P‖)` along the doubling schedule.
    pub cesaro_series: Vec<(usize, f64)>,
    pub average_cost: f64,
}

impl InfiniteTreeSolution {
    /// Finite policy applying the stationary `K` and `L_t^{(∞)}` (zero past the window).
    pub fn truncated_policy(&self, horizon: usize) -> TreePolicy {
        let (m, n) = self.k.shape();
        let l = (0..horizon)
            .map(|t| self.l.get(t).cloned().unwrap_or_else(|| DMatrix::zeros(m, n)))
            .collect();
        TreePolicy {
            horizon,
            mode: self.mode,
            k: vec![self.k.clone(); horizon],
            l,
            p: vec![self.p.clone(); horizon + 1],
            g: Vec::new(),
            sigma: self.sigma.clone(),
        }
    }
}

fn max_abs_diff(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

/// Stationary `K`, `P` and the pointwise horizon limit of `L_t`.
pub fn solve_infinite_tree(spec: &TeamSpec, tol: f64) -> Result<InfiniteTreeSolution> {
    team_model::validate(spec)?.into_result()?;
    let mode = mode_for(spec)?;
    let (a, b) = spec.homogeneous()?;
    let dare = riccati::dare_solve(
        a,
        b,
        &spec.cost.q,
        &spec.cost.r,
        riccati::DEFAULT_DARE_TOL,
        riccati::DEFAULT_DARE_MAX_ITER,
    )?;
    let sigma = team_model::conditional_gain(&spec.noise)?.0;

    let mut disagreement = Vec::new();
    let mut cesaro_series = Vec::new();
    let mut horizon = INF_START_HORIZON;
    let (k, mut p_sched) = solve_k_p(spec, horizon)?;
    let mut l_prev = solve_coupling_gains(spec, &k, mode)?.0;
    cesaro_series.push((horizon, cesaro_gap(&p_sched, &dare.p)));
    loop {
        let next = horizon * 2;
        if next > INF_HORIZON_CAP {
            let last = disagreement.last().map_or(f64::INFINITY, |d: &(usize, f64)| d.1);
            return Err(Error::NonConvergence {
                context: "coupling gains under horizon doubling".into(),
                iterations: disagreement.len(),
                residual: last,
                series: disagreement.iter().map(|d| d.1).collect(),
            });
        }
        let (k_next, p_next) = solve_k_p(spec, next)?;
        let l_next = solve_coupling_gains(spec, &k_next, mode)?.0;
        let diff = max_abs_diff(&l_prev, &l_next[..horizon]);
        disagreement.push((horizon, diff));
        p_sched = p_next;
        cesaro_series.push((next, cesaro_gap(&p_sched, &dare.p)));
        if diff < tol {
            let decay_horizon = (0..=l_next.len())
                .find(|&t| l_next[t..].iter().all(|lt| lt.amax() < tol));
            let average_cost =
                mode.cost_multiplier() * linalg::trace_product(&dare.p, &spec.noise.sigma_w);
            return Ok(InfiniteTreeSolution {
                mode,
                k: dare.k,
                p: dare.p,
                l: l_next,
                sigma,
                closed_loop_radius: dare.closed_loop_radius,
                dare_iterations: dare.iterations,
                dare_residual: dare.residual,
                converged_horizon: horizon,
                disagreement,
                decay_horizon,
                cesaro_series,
                average_cost,
            });
        }
        l_prev = l_next;
        horizon = next;
    }
}

fn cesaro_gap(p_sched: &[DMatrix<f64>], p: &DMatrix<f64>) -> f64 {
    let horizon = p_sched.len() - 1;
    let gaps = p_sched[..horizon].iter().map(|pt| (pt - p).amax());
    linalg::compensated_sum(gaps) / horizon as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldPoint {
    pub n: usize,
    pub l: Vec<DMatrix<f64>>,
    /// `max_t ‖L_t^{(N)} − L_t^{(N/2)}‖`, absent for the first point.
    pub successive_diff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldLimit {
    pub policy: TreePolicy,
    pub series: Vec<MeanFieldPoint>,
    /// Smallest schedule point whose successive difference met the tolerance.
    pub detected_at: usize,
}

pub const DEFAULT_MF_N_MAX: usize = 512;
pub const DEFAULT_MF_TOL: f64 = 1e-7;

/// Doubling schedule `2, 4, …` up to `n_max`.
pub fn doubling_schedule(n_max: usize) -> Vec<usize> {
    std::iter::successors(Some(2usize), |n| n.checked_mul(2))
        .take_while(|n| *n <= n_max)
        .collect()
}

/// Limit of the mean-field coupling gains over a doubling population schedule.
pub fn meanfield_limit_policy(spec: &TeamSpec, n_max: usize, tol: f64) -> Result<MeanFieldLimit> {
    if spec.info != InfoStructure::MeanFieldTree {
        return Err(Error::Unsupported(
            "mean-field limit needs mean-field information".into(),
        ));
    }
    let schedule = doubling_schedule(n_max);
    if schedule.len() < 2 {
        return Err(Error::Input(format!(
            "population cap {n_max} leaves fewer than two schedule points"
        )));
    }
    let mut series: Vec<MeanFieldPoint> = Vec::with_capacity(schedule.len());
    let mut k_sched = None;
    for &n in &schedule {
        let spec_n = spec.with_n_dm(n);
        let policy = solve_tree_mode(&spec_n, spec.horizon, PopulationMode::MeanFieldN(n))?;
        let successive_diff = series.last().map(|prev| max_abs_diff(&prev.l, &policy.l));
        k_sched.get_or_insert(policy.clone());
        series.push(MeanFieldPoint {
            n,
            l: policy.l,
            successive_diff,
        });
    }
    let detected_at = series
        .iter()
        .find(|pt| pt.successive_diff.is_some_and(|d| d < tol))
        .map(|pt| pt.n);
    let last_diff = series.last().and_then(|pt| pt.successive_diff).unwrap_or(f64::INFINITY);
    let Some(detected_at) = detected_at.filter(|_| last_diff < tol) else {
        return Err(Error::NonConvergence {
            context: "mean-field coupling gains over the population schedule".into(),
            iterations: series.len(),
            residual: last_diff,
            series: series.iter().filter_map(|pt| pt.successive_diff).collect(),
        });
    };
    let base = k_sched.expect("schedule has at least two points");
    let policy = TreePolicy {
        mode: PopulationMode::MeanFieldLimit,
        l: series.last().expect("nonempty series").l.clone(),
        ..base
    };
    let g = solve_coupling_gains(spec, &policy.k, PopulationMode::MeanFieldLimit)?.1;
    Ok(MeanFieldLimit {
        policy: TreePolicy { g, ..policy },
        series,
        detected_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::team_model::{CostSpec, Dynamics, NoiseFamily, NoiseSpec};
    use proptest::prelude::*;

    fn m1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn scalar(n_dm: usize, horizon: usize, rt: f64, so: f64) -> TeamSpec {
        TeamSpec {
            n_dm,
            horizon,
            dynamics: Dynamics::Homogeneous { a: m1(1.0), b: m1(1.0) },
            cost: CostSpec {
                q: m1(1.0),
                r: m1(1.0),
                r_tilde: (rt != 0.0).then(|| m1(rt)),
                q_tilde: None,
                s: None,
            },
            noise: NoiseSpec {
                sigma_w: m1(1.0),
                init_diag: m1(1.0),
                init_offdiag: m1(so),
                family: NoiseFamily::Gaussian,
            },
            info: InfoStructure::Tree,
        }
    }

    /// Test-only joint cost of the stacked coupling gains with `K` fixed,
    /// propagating each DM's initial-state coefficient explicitly.
    fn oracle_cost(spec: &TeamSpec, k: &[DMatrix<f64>], l: &[f64]) -> f64 {
        let (a, b) = (spec.homogeneous().unwrap().0[0], spec.homogeneous().unwrap().1[0]);
        let (sd, so) = (spec.noise.init_diag[0], spec.noise.init_offdiag[0]);
        let sig = so / sd;
        let rt = spec.r_tilde()[0];
        let (q, r) = (spec.cost.q[0], spec.cost.r[0]);
        // x^1_t = α x^1_0 + β x^2_0 with the policy u = k x + l σ x_0.
        let mut x = [1.0, 0.0];
        let mut total = 0.0;
        for t in 0..k.len() {
            let u1 = [k[t][0] * x[0] + l[t] * sig, k[t][0] * x[1]];
            let u2 = [u1[1], u1[0]];
            let second = |p: [f64; 2], r: [f64; 2]| p[0] * r[0] * sd + p[1] * r[1] * sd + (p[0] * r[1] + p[1] * r[0]) * so;
            total += 2.0 * (q * second(x, x) + r * second(u1, u1)) + 2.0 * rt * second(u1, u2);
            x = [a * x[0] + b * u1[0], a * x[1] + b * u1[1]];
        }
        total
    }

    #[test]
    fn kp_examples() {
        let spec = scalar(2, 1, 0.0, 0.5);
        let (k, p) = solve_k_p(&spec, 1).unwrap();
        assert_eq!((k[0][0], p[0][0], p[1][0]), (0.0, 1.0, 0.0));
        let (k, p) = solve_k_p(&spec, 2).unwrap();
        assert_eq!((k[1][0], p[1][0]), (0.0, 1.0));
        assert!((k[0][0] + 0.5).abs() < 1e-15 && (p[0][0] - 1.5).abs() < 1e-15);
        let (k, _) = solve_k_p(&spec, 200).unwrap();
        assert!((k[0][0] + 0.618_033_988_7).abs() < 1e-9);
    }

    #[test]
    fn zero_coupling_gives_zero_l() {
        let policy = solve_tree(&scalar(2, 4, 0.0, 0.5)).unwrap();
        assert!(policy.l.iter().all(|l| l.amax() < 1e-14));
        let cost = predicted_cost(&scalar(2, 4, 0.0, 0.5), &policy).unwrap();
        let p = &policy.p;
        let expected = 0.5 * (p[0][0] + (1..=4).map(|t| p[t][0]).sum::<f64>());
        assert!((cost.value - expected).abs() < 1e-12);
    }

    #[test]
    fn single_stage_cost_and_gain() {
        let spec = scalar(2, 1, 0.5, 0.5);
        let policy = solve_tree(&spec).unwrap();
        assert!(policy.l[0].amax() < 1e-14);
        let cost = predicted_cost(&spec, &policy).unwrap();
        assert!((cost.value - 2.0).abs() < 1e-14);
        assert_eq!(policy.g[0], m1(1.0));
    }

    #[test]
    fn scalar_two_stage_matches_oracle_minimizer() {
        let spec = scalar(2, 2, 0.5, 0.5);
        let policy = solve_tree(&spec).unwrap();
        // The oracle is quadratic in (l0, l1): recover it from 6 evaluations
        // and solve the 2×2 normal equations.
        let f = |l0: f64, l1: f64| oracle_cost(&spec, &policy.k, &[l0, l1]);
        let h = 1.0;
        let c = f(0.0, 0.0);
        let g0 = (f(h, 0.0) - f(-h, 0.0)) / (2.0 * h);
        let g1 = (f(0.0, h) - f(0.0, -h)) / (2.0 * h);
        let h00 = (f(h, 0.0) - 2.0 * c + f(-h, 0.0)) / (h * h);
        let h11 = (f(0.0, h) - 2.0 * c + f(0.0, -h)) / (h * h);
        let h01 = (f(h, h) - f(h, 0.0) - f(0.0, h) + c) / (h * h);
        let det = h00 * h11 - h01 * h01;
        let l0 = -(h11 * g0 - h01 * g1) / det;
        let l1 = -(-h01 * g0 + h00 * g1) / det;
        assert!((policy.l[0][0] - l0).abs() < 1e-8, "{} vs {l0}", policy.l[0][0]);
        assert!((policy.l[1][0] - l1).abs() < 1e-8, "{} vs {l1}", policy.l[1][0]);
    }

    #[test]
    fn gains_do_not_depend_on_coupling_or_noise() {
        let base = solve_tree(&scalar(2, 5, 0.0, 0.0)).unwrap();
        let mut other = scalar(2, 5, 0.4, 0.3);
        other.noise.sigma_w = m1(3.0);
        other.noise.family = NoiseFamily::Uniform;
        let varied = solve_tree(&other).unwrap();
        assert_eq!(base.k, varied.k);
        assert_eq!(base.p, varied.p);
    }

    #[test]
    fn completed_square_matches_moment_propagation() {
        for (n_dm, info) in [(2, InfoStructure::Tree), (4, InfoStructure::Tree), (5, InfoStructure::MeanFieldTree)] {
            let mut spec = scalar(n_dm, 6, 0.3, 0.4);
            spec.info = info;
            if matches!(spec.info, InfoStructure::MeanFieldTree) {
                spec.cost.q_tilde = Some(m1(0.5));
            }
            let policy = solve_tree(&spec).unwrap();
            let cost = predicted_cost(&spec, &policy).unwrap();
            assert!((cost.value - cost.completed_square).abs() < 1e-10);
        }
    }

    #[test]
    fn literal_variant_with_shifted_noise_index_matches() {
        let spec = scalar(2, 6, 0.5, 0.5);
        let policy = solve_tree(&spec).unwrap();
        let cost = predicted_cost(&spec, &policy).unwrap();
        assert_eq!(cost.variants.len(), 4);
        assert!(cost.best_variant.unwrap().ends_with("noise index t+1"));
    }

    #[test]
    fn infinite_horizon_examples() {
        let sol = solve_infinite_tree(&scalar(2, 1, 0.0, 0.5), 1e-7).unwrap();
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((sol.average_cost - 2.0 * phi).abs() < 1e-8);
        assert!(sol.l.iter().all(|l| l[0] == 0.0));

        let sol = solve_infinite_tree(&scalar(2, 1, 0.5, 0.5), 1e-8).unwrap();
        let decay = sol.decay_horizon.unwrap();
        assert!(sol.l[decay..].iter().all(|l| l[0].abs() < 1e-8));
        assert!(sol.closed_loop_radius < 1.0);
        let gaps: Vec<f64> = sol.cesaro_series.iter().map(|c| c.1).collect();
        assert!(gaps.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn mean_field_limit_zero_coupling() {
        let mut spec = scalar(2, 3, 0.0, 0.5);
        spec.info = InfoStructure::MeanFieldTree;
        let lim = meanfield_limit_policy(&spec, 64, 1e-7).unwrap();
        assert!(lim.series.iter().all(|pt| pt.l.iter().all(|l| l.amax() < 1e-14)));
        assert_eq!(lim.policy.mode, PopulationMode::MeanFieldLimit);
    }

    #[test]
    fn single_dm_has_no_coupling() {
        let spec = scalar(1, 3, 0.0, 0.0);
        let policy = solve_tree(&spec).unwrap();
        assert_eq!(policy.mode, PopulationMode::NDm(1));
        assert!(policy.l.iter().all(|l| l.amax() == 0.0));
    }

    proptest! {
        #[test]
        fn value_matrices_symmetric_psd(
            a in -1.5f64..1.5, b in 0.2f64..2.0, q in 0.0f64..2.0, r in 0.1f64..2.0, horizon in 1usize..8
        ) {
            let mut spec = scalar(2, horizon, 0.0, 0.0);
            spec.dynamics = Dynamics::Homogeneous { a: m1(a), b: m1(b) };
            spec.cost.q = m1(q);
            spec.cost.r = m1(r);
            let policy = solve_tree(&spec).unwrap();
            prop_assert_eq!(policy.p[horizon].amax(), 0.0);
            prop_assert!(policy.p.iter().all(linalg::is_psd));
        }
    }
}
