//! Riccati recursions on the information graph for one-step delayed sharing.
//!
//! The joint state is split into node states `ζ^r`, one per graph node, with
//! `x_t = Σ_r I^{V,r} ζ_t^r`. Primitives of DM `i` (initial state and
//! disturbances) enter at the node `s_0^i` and then move one node along the
//! chain per stage, so different nodes carry independent primitives and the
//! cost splits into one Riccati recursion per node.

use std::f64::consts::TAU;

use nalgebra::{Complex, DMatrix};

use crate::error::{Error, Result};
use crate::info_graph::{self, InfoGraph};
use crate::linalg;
use crate::riccati;
use crate::team_model::{self, InfoStructure, TeamSpec};

/// Relative singular-value threshold of the unit-circle rank condition.
pub const RANK_CONDITION_TOL: f64 = 1e-10;
/// Grid points on `[0, 2π)` for the unit-circle rank condition.
pub const THETA_GRID: usize = 720;

/// Node-partitioned model data; index `r` follows the graph's node order.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphModel {
    pub graph: InfoGraph,
    pub n: usize,
    pub m: usize,
    /// `A^{sr}` with `s` the successor of `r`.
    pub a_sr: Vec<DMatrix<f64>>,
    pub b_sr: Vec<DMatrix<f64>>,
    pub q_rr: Vec<DMatrix<f64>>,
    pub r_rr: Vec<DMatrix<f64>>,
    pub s_rr: Vec<DMatrix<f64>>,
}

impl GraphModel {
    pub fn from_spec(spec: &TeamSpec) -> Result<Self> {
        let InfoStructure::Delayed { delays } = &spec.info else {
            return Err(Error::Unsupported(
                "delayed solver needs delayed-sharing information".into(),
            ));
        };
        let graph = info_graph::build_info_graph(delays)?;
        let (n, m) = (spec.state_dim(), spec.input_dim());
        let (a, b) = spec.joint_dynamics();
        let jc = spec.joint_cost();
        let mut model = GraphModel {
            graph,
            n,
            m,
            a_sr: Vec::new(),
            b_sr: Vec::new(),
            q_rr: Vec::new(),
            r_rr: Vec::new(),
            s_rr: Vec::new(),
        };
        for r in 0..model.graph.nodes.len() {
            let rs = &model.graph.nodes[r];
            let ss = &model.graph.nodes[model.graph.successor[r]];
            model.a_sr.push(info_graph::partition(&a, ss, rs, n, n)?);
            model.b_sr.push(info_graph::partition(&b, ss, rs, n, m)?);
            model.q_rr.push(info_graph::partition(&jc.q, rs, rs, n, n)?);
            model.r_rr.push(info_graph::partition(&jc.r, rs, rs, m, m)?);
            model.s_rr.push(info_graph::partition(&jc.s, rs, rs, n, m)?);
        }
        Ok(model)
    }

    pub fn node_count(&self) -> usize {
        self.graph.nodes.len()
    }

    fn step(&self, r: usize, x_next: &DMatrix<f64>, context: &str) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        riccati::riccati_step_cross(
            &self.a_sr[r],
            &self.b_sr[r],
            &self.q_rr[r],
            &self.r_rr[r],
            &self.s_rr[r],
            x_next,
            context,
        )
    }

    /// `(X^s)_{ii}` block for DM `i` at node `s`.
    fn diag_block(&self, x: &DMatrix<f64>, s: usize, i: usize) -> DMatrix<f64> {
        let pos = self.graph.position(s, i).expect("DM belongs to its root node");
        x.view((pos * self.n, pos * self.n), (self.n, self.n)).into_owned()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphPolicy {
    pub model: GraphModel,
    pub horizon: usize,
    /// `gains[t][r] = K_t^r`.
    pub gains: Vec<Vec<DMatrix<f64>>>,
    /// `values[t][r] = X_t^r` for `t = 0..=T`.
    pub values: Vec<Vec<DMatrix<f64>>>,
}

fn check_spec(spec: &TeamSpec) -> Result<GraphModel> {
    team_model::validate(spec)?.into_result()?;
    GraphModel::from_spec(spec)
}

/// Backward recursion from `X_T^r = Q^{rr}`; returns the policy and its
/// predicted average cost (terminal cost included).
pub fn solve_delayed_finite(spec: &TeamSpec) -> Result<(GraphPolicy, f64)> {
    let model = check_spec(spec)?;
    let horizon = spec.horizon;
    let nodes = model.node_count();
    let mut values = vec![Vec::new(); horizon + 1];
    let mut gains = vec![Vec::new(); horizon];
    values[horizon] = model.q_rr.clone();
    for t in (0..horizon).rev() {
        let mut x_t = Vec::with_capacity(nodes);
        let mut k_t = Vec::with_capacity(nodes);
        for r in 0..nodes {
            let s = model.graph.successor[r];
            let context = format!("node {} stage {t}", model.graph.label(r));
            let (x, k) = model.step(r, &values[t + 1][s], &context)?;
            x_t.push(x);
            k_t.push(k);
        }
        values[t] = x_t;
        gains[t] = k_t;
    }
    let policy = GraphPolicy {
        model,
        horizon,
        gains,
        values,
    };
    let cost = predicted_cost(spec, &policy);
    Ok((policy, cost))
}

/// Average cost from the node value matrices at each DM's root node.
pub fn predicted_cost(spec: &TeamSpec, policy: &GraphPolicy) -> f64 {
    let model = &policy.model;
    let mut terms = Vec::new();
    for i in 0..model.graph.n_dm() {
        let s = model.graph.root[i];
        let x0 = model.diag_block(&policy.values[0][s], s, i);
        terms.push(linalg::trace_product(&x0, &spec.noise.init_diag));
        for t in 0..policy.horizon {
            let x = model.diag_block(&policy.values[t + 1][s], s, i);
            terms.push(linalg::trace_product(&x, &spec.noise.sigma_w));
        }
    }
    linalg::compensated_sum(terms) / policy.horizon as f64
}

/// Node states, controls and true states for a batch of primitive columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorRun {
    /// `zeta[t][r]`, `|r|·n × columns`, for `t = 0..=T`.
    pub zeta: Vec<Vec<DMatrix<f64>>>,
    /// Joint control `u_t`, `N·m × columns`.
    pub controls: Vec<DMatrix<f64>>,
    /// Joint state `x_t`, `N·n × columns`, for `t = 0..=T`.
    pub states: Vec<DMatrix<f64>>,
}

/// Propagate the node estimators on given initial states (`N·n × c`) and
/// disturbances (`T` matrices of `N·n × c`), with joint dynamics `(A, B)`.
pub fn simulate_estimator(
    policy: &GraphPolicy,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    x0: &DMatrix<f64>,
    noises: &[DMatrix<f64>],
) -> Result<EstimatorRun> {
    let model = &policy.model;
    let graph = &model.graph;
    let (n, m) = (model.n, model.m);
    let nd = graph.n_dm();
    let cols = x0.ncols();
    let nodes = model.node_count();
    if noises.len() < policy.horizon {
        return Err(Error::Dimension("fewer disturbance stages than the horizon".into()));
    }
    if policy.gains.len() != policy.horizon || policy.gains.iter().any(|g| g.len() != nodes) {
        return Err(Error::Input("missing node gain in graph policy".into()));
    }

    let inject = |target: &mut Vec<DMatrix<f64>>, source: &DMatrix<f64>| {
        for i in 0..nd {
            let s = graph.root[i];
            let pos = graph.position(s, i).expect("DM belongs to its root node");
            let mut block = target[s].view_mut((pos * n, 0), (n, cols));
            block += source.view((i * n, 0), (n, cols));
        }
    };

    let mut zeta: Vec<DMatrix<f64>> = graph
        .nodes
        .iter()
        .map(|r| DMatrix::zeros(r.len() * n, cols))
        .collect();
    inject(&mut zeta, x0);
    let mut run = EstimatorRun {
        zeta: Vec::with_capacity(policy.horizon + 1),
        controls: Vec::with_capacity(policy.horizon),
        states: vec![x0.clone()],
    };
    for t in 0..policy.horizon {
        let mut u = DMatrix::zeros(nd * m, cols);
        let mut next: Vec<DMatrix<f64>> = graph
            .nodes
            .iter()
            .map(|r| DMatrix::zeros(r.len() * n, cols))
            .collect();
        for r in 0..nodes {
            let ur = &policy.gains[t][r] * &zeta[r];
            for (pos, &i) in graph.nodes[r].iter().enumerate() {
                let mut block = u.view_mut((i * m, 0), (m, cols));
                block += ur.view((pos * m, 0), (m, cols));
            }
            let s = graph.successor[r];
            next[s] += &model.a_sr[r] * &zeta[r] + &model.b_sr[r] * &ur;
        }
        inject(&mut next, &noises[t]);
        let x_next = a * &run.states[t] + b * &u + &noises[t];
        run.states.push(x_next);
        run.controls.push(u);
        run.zeta.push(std::mem::replace(&mut zeta, next));
    }
    run.zeta.push(zeta);
    Ok(run)
}

/// Outcome of the unit-circle rank condition at one self-loop node.
#[derive(Debug, Clone, PartialEq)]
pub struct RankCheck {
    pub node: String,
    /// Smallest relative singular value over the θ grid.
    pub min_relative_sv: f64,
    pub worst_theta: f64,
    pub passed: bool,
    /// Passed, but within two decades of the threshold.
    pub marginal: bool,
    /// Same scan with the control weight in place of the cost factor's input
    /// block; `None` when that matrix cannot be formed.
    pub literal_min_relative_sv: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryGraphPolicy {
    pub model: GraphModel,
    pub gains: Vec<DMatrix<f64>>,
    pub values: Vec<DMatrix<f64>>,
    pub rank_checks: Vec<RankCheck>,
    pub closed_loop_radius: f64,
    pub average_cost: f64,
}

impl StationaryGraphPolicy {
    /// Finite-horizon policy repeating the stationary gains.
    pub fn truncated(&self, horizon: usize) -> GraphPolicy {
        GraphPolicy {
            model: self.model.clone(),
            horizon,
            gains: vec![self.gains.clone(); horizon],
            values: vec![self.values.clone(); horizon + 1],
        }
    }
}

fn scan_unit_circle(top_right: &DMatrix<f64>, a: &DMatrix<f64>, bottom: &DMatrix<f64>) -> (f64, f64) {
    let n = a.nrows();
    let cols = n + top_right.ncols();
    let rows = n + bottom.nrows();
    let mut worst = (f64::INFINITY, 0.0);
    for k in 0..THETA_GRID {
        let theta = TAU * k as f64 / THETA_GRID as f64;
        let z = Complex::from_polar(1.0, theta);
        let mut m = DMatrix::<Complex<f64>>::zeros(rows, cols);
        let shifted = linalg::to_complex(a) - DMatrix::<Complex<f64>>::identity(n, n) * z;
        m.view_mut((0, 0), (n, n)).copy_from(&shifted);
        m.view_mut((0, n), (n, top_right.ncols()))
            .copy_from(&linalg::to_complex(top_right));
        m.view_mut((n, 0), (bottom.nrows(), cols))
            .copy_from(&linalg::to_complex(bottom));
        let rel = linalg::relative_min_singular(&m);
        if rel < worst.0 {
            worst = (rel, theta);
        }
    }
    worst
}

fn rank_check(model: &GraphModel, s: usize) -> RankCheck {
    let (a, b) = (&model.a_sr[s], &model.b_sr[s]);
    let (q, r, sc) = (&model.q_rr[s], &model.r_rr[s], &model.s_rr[s]);
    let (ns, ms) = (q.nrows(), r.nrows());
    let mut stacked = DMatrix::zeros(ns + ms, ns + ms);
    stacked.view_mut((0, 0), (ns, ns)).copy_from(q);
    stacked.view_mut((0, ns), (ns, ms)).copy_from(sc);
    stacked.view_mut((ns, 0), (ms, ns)).copy_from(&sc.transpose());
    stacked.view_mut((ns, ns), (ms, ms)).copy_from(r);
    // [C D] with [C D]ᵀ[C D] equal to the stacked cost.
    let cd = linalg::psd_factor(&stacked).transpose();
    let (min_relative_sv, worst_theta) = scan_unit_circle(b, a, &cd);
    let literal_min_relative_sv = (ns == ms).then(|| {
        let c = linalg::psd_sqrt(q);
        let mut bottom = DMatrix::zeros(ns, ns + ms);
        bottom.view_mut((0, 0), (ns, ns)).copy_from(&c);
        bottom.view_mut((0, ns), (ms, ms)).copy_from(r);
        scan_unit_circle(b, a, &bottom).0
    });
    let passed = min_relative_sv > RANK_CONDITION_TOL;
    RankCheck {
        node: model.graph.label(s),
        min_relative_sv,
        worst_theta,
        passed,
        marginal: passed && min_relative_sv < 100.0 * RANK_CONDITION_TOL,
        literal_min_relative_sv,
    }
}

/// Closed-loop matrix of the stacked node states under stationary gains.
pub fn closed_loop_matrix(model: &GraphModel, gains: &[DMatrix<f64>]) -> DMatrix<f64> {
    let offsets: Vec<usize> = model
        .graph
        .nodes
        .iter()
        .scan(0, |acc, r| {
            let start = *acc;
            *acc += r.len() * model.n;
            Some(start)
        })
        .collect();
    let dim: usize = model.graph.nodes.iter().map(|r| r.len() * model.n).sum();
    let mut out = DMatrix::zeros(dim, dim);
    for r in 0..model.node_count() {
        let s = model.graph.successor[r];
        let blk = &model.a_sr[r] + &model.b_sr[r] * &gains[r];
        out.view_mut((offsets[s], offsets[r]), blk.shape()).copy_from(&blk);
    }
    out
}

/// Stationary per-node gains for the average-cost problem.
pub fn solve_delayed_infinite(spec: &TeamSpec, tol: f64) -> Result<StationaryGraphPolicy> {
    let model = check_spec(spec)?;
    let nodes = model.node_count();
    let mut values: Vec<Option<DMatrix<f64>>> = vec![None; nodes];
    let mut gains: Vec<Option<DMatrix<f64>>> = vec![None; nodes];
    let mut rank_checks = Vec::new();

    for s in (0..nodes).filter(|&s| model.graph.is_self_loop(s)) {
        let label = model.graph.label(s);
        if !riccati::is_stabilizable(&model.a_sr[s], &model.b_sr[s]) {
            return Err(Error::precondition(
                "stabilizable",
                format!("(A^{{ss}}, B^{{ss}}) at node {label} fails the PBH test"),
            ));
        }
        let check = rank_check(&model, s);
        if !check.passed {
            return Err(Error::precondition(
                "unit-circle rank condition",
                format!(
                    "node {label} loses column rank near θ = {:.6} (relative σ_min {:.3e})",
                    check.worst_theta, check.min_relative_sv
                ),
            ));
        }
        rank_checks.push(check);
        let sol = riccati::dare_solve_cross(
            &model.a_sr[s],
            &model.b_sr[s],
            &model.q_rr[s],
            &model.r_rr[s],
            &model.s_rr[s],
            tol,
            riccati::DEFAULT_DARE_MAX_ITER,
        )
        .map_err(|e| match e {
            Error::Precondition { check, detail } => Error::Precondition {
                check,
                detail: format!("node {label}: {detail}"),
            },
            other => other,
        })?;
        values[s] = Some(sol.p);
        gains[s] = Some(sol.k);
    }

    while values.iter().any(Option::is_none) {
        let mut progressed = false;
        for r in 0..nodes {
            if values[r].is_some() {
                continue;
            }
            let s = model.graph.successor[r];
            if let Some(x_s) = values[s].clone() {
                let (x, k) = model.step(r, &x_s, &format!("node {}", model.graph.label(r)))?;
                values[r] = Some(x);
                gains[r] = Some(k);
                progressed = true;
            }
        }
        if !progressed {
            return Err(Error::Unsupported("information graph has a chain without a self-loop".into()));
        }
    }
    let values: Vec<DMatrix<f64>> = values.into_iter().map(Option::unwrap).collect();
    let gains: Vec<DMatrix<f64>> = gains.into_iter().map(Option::unwrap).collect();

    let closed_loop_radius = riccati::spectral_radius(&closed_loop_matrix(&model, &gains));
    if closed_loop_radius >= 1.0 {
        return Err(Error::precondition(
            "closed-loop stability",
            format!("node-state closed loop has spectral radius {closed_loop_radius}"),
        ));
    }
    let average_cost = linalg::compensated_sum((0..model.graph.n_dm()).map(|i| {
        let s = model.graph.root[i];
        linalg::trace_product(&model.diag_block(&values[s], s, i), &spec.noise.sigma_w)
    }));
    Ok(StationaryGraphPolicy {
        model,
        gains,
        values,
        rank_checks,
        closed_loop_radius,
        average_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::team_model::{CostSpec, DelayMatrix, Dynamics, NoiseFamily, NoiseSpec};

    fn m1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn single(a: f64, b: f64, q: f64, r: f64, s: f64, horizon: usize) -> TeamSpec {
        TeamSpec {
            n_dm: 1,
            horizon,
            dynamics: Dynamics::Blocked {
                a_blocks: vec![vec![m1(a)]],
                b_blocks: vec![vec![m1(b)]],
            },
            cost: CostSpec {
                q: m1(q),
                r: m1(r),
                r_tilde: None,
                q_tilde: None,
                s: Some(m1(s)),
            },
            noise: NoiseSpec {
                sigma_w: m1(0.5),
                init_diag: m1(2.0),
                init_offdiag: m1(0.0),
                family: NoiseFamily::Gaussian,
            },
            info: InfoStructure::Delayed {
                delays: DelayMatrix::one_step(1),
            },
        }
    }

    fn coupled_pair(horizon: usize) -> TeamSpec {
        let blk = |v: &[f64]| -> Vec<Vec<DMatrix<f64>>> {
            vec![vec![m1(v[0]), m1(v[1])], vec![m1(v[2]), m1(v[3])]]
        };
        TeamSpec {
            n_dm: 2,
            horizon,
            dynamics: Dynamics::Blocked {
                a_blocks: blk(&[1.0, 0.3, 0.2, 0.9]),
                b_blocks: blk(&[1.0, 0.0, 0.1, 1.0]),
            },
            cost: CostSpec {
                q: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0]),
                r: DMatrix::identity(2, 2),
                r_tilde: None,
                q_tilde: None,
                s: None,
            },
            noise: NoiseSpec {
                sigma_w: m1(1.0),
                init_diag: m1(1.0),
                init_offdiag: m1(0.0),
                family: NoiseFamily::Gaussian,
            },
            info: InfoStructure::Delayed {
                delays: DelayMatrix::one_step(2),
            },
        }
    }

    #[test]
    fn single_dm_golden_ratio() {
        let sol = solve_delayed_infinite(&single(1.0, 1.0, 1.0, 1.0, 0.0, 1), 1e-12).unwrap();
        assert!((sol.gains[0][0] + 0.618_033_988_7).abs() < 1e-9);
        assert!(sol.rank_checks[0].passed);
    }

    #[test]
    fn single_dm_estimator_is_the_state() {
        let spec = single(1.2, 0.7, 1.0, 0.5, 0.1, 4);
        let (policy, _) = solve_delayed_finite(&spec).unwrap();
        let (a, b) = spec.joint_dynamics();
        let x0 = DMatrix::from_row_slice(1, 3, &[0.3, -1.0, 2.0]);
        let noises: Vec<_> = (0..4)
            .map(|t| DMatrix::from_row_slice(1, 3, &[0.1 * t as f64, -0.2, 0.05]))
            .collect();
        let run = simulate_estimator(&policy, &a, &b, &x0, &noises).unwrap();
        for t in 0..=4 {
            assert!((&run.zeta[t][0] - &run.states[t]).amax() < 1e-12);
        }
    }

    #[test]
    fn zero_primitives_give_zero_controls() {
        let spec = coupled_pair(3);
        let (policy, _) = solve_delayed_finite(&spec).unwrap();
        let (a, b) = spec.joint_dynamics();
        let zeros = vec![DMatrix::zeros(2, 1); 3];
        let run = simulate_estimator(&policy, &a, &b, &DMatrix::zeros(2, 1), &zeros).unwrap();
        assert!(run.controls.iter().all(|u| u.amax() == 0.0));
    }

    #[test]
    fn decoupled_pair_matches_standalone_lqr() {
        let mut spec = coupled_pair(4);
        spec.dynamics = Dynamics::Blocked {
            a_blocks: vec![vec![m1(1.1), m1(0.0)], vec![m1(0.0), m1(0.8)]],
            b_blocks: vec![vec![m1(1.0), m1(0.0)], vec![m1(0.0), m1(0.5)]],
        };
        spec.cost.q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        spec.info = InfoStructure::Delayed {
            delays: DelayMatrix::disconnected(2),
        };
        let (policy, _) = solve_delayed_finite(&spec).unwrap();
        for (i, (a, b, q)) in [(1.1, 1.0, 1.0), (0.8, 0.5, 2.0)].into_iter().enumerate() {
            let mut x = m1(q);
            for t in (0..4).rev() {
                let (x_new, k) = riccati::riccati_step(&m1(a), &m1(b), &m1(q), &m1(1.0), &x).unwrap();
                assert!((&policy.gains[t][i] - &k).amax() < 1e-14);
                x = x_new;
            }
        }
    }

    #[test]
    fn value_arrays_are_diagonal_constant_in_horizon() {
        let (short, _) = solve_delayed_finite(&coupled_pair(5)).unwrap();
        let (long, _) = solve_delayed_finite(&coupled_pair(6)).unwrap();
        for t in 0..=5 {
            for r in 0..short.model.node_count() {
                assert!((&short.values[t][r] - &long.values[t + 1][r]).amax() < 1e-12);
                assert!(linalg::is_psd(&short.values[t][r]));
            }
        }
    }

    #[test]
    fn finite_gains_approach_stationary_gains() {
        let stat = solve_delayed_infinite(&coupled_pair(1), 1e-13).unwrap();
        let mut prev = f64::INFINITY;
        for horizon in [25, 50, 100, 200] {
            let (policy, _) = solve_delayed_finite(&coupled_pair(horizon)).unwrap();
            let diff = (0..stat.gains.len())
                .map(|r| (&policy.gains[0][r] - &stat.gains[r]).amax())
                .fold(0.0, f64::max);
            assert!(diff <= prev);
            prev = diff;
        }
        assert!(prev < 1e-8);
        assert!(stat.closed_loop_radius < 1.0);
    }

    #[test]
    fn rank_condition_fails_without_cost_on_unstable_mode() {
        // Unit-circle mode with no state or cross weight: [C D] cannot see it.
        let spec = single(1.0, 1.0, 0.0, 1.0, 0.0, 1);
        let err = solve_delayed_infinite(&spec, 1e-12).unwrap_err();
        assert!(matches!(err, Error::Precondition { ref check, .. } if check == "unit-circle rank condition"));
    }

    #[test]
    fn correlated_initial_states_are_rejected() {
        let mut spec = coupled_pair(3);
        spec.noise.init_offdiag = m1(0.2);
        assert!(matches!(solve_delayed_finite(&spec), Err(Error::Validation(_))));
    }
}
