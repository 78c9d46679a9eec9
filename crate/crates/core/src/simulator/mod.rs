//! Monte Carlo closed-loop engine and structural property checks.
//!
//! Rollout `k` draws its primitives from a ChaCha stream keyed by `(seed, k)`,
//! so results do not depend on how rollouts are scheduled across threads.

pub mod checks;
pub mod mft;
pub mod model;
pub mod sampling;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::delayed_solver::GraphPolicy;
use crate::error::{Error, Result};
use crate::linalg;
use crate::team_model::{NoiseFamily, TeamSpec};
use crate::tree_solver::TreePolicy;

pub use model::{
    exact_cost, AffineMap, FeedbackSet, JointDynamics, JointModel, LinearPolicySet, Measurability,
    StageCost,
};
pub use sampling::Sampler;

/// A policy profile in a form the engine can roll out.
#[derive(Debug, Clone, PartialEq)]
pub enum SimPolicy {
    /// Own-history state feedback, rolled out in `O(N)` per stage.
    Feedback(FeedbackSet),
    /// General affine maps on primitives.
    Linear(LinearPolicySet),
}

impl SimPolicy {
    pub fn from_tree(policy: &TreePolicy, model: &JointModel) -> Result<Self> {
        if policy.horizon != model.horizon {
            return Err(Error::Dimension(format!(
                "policy horizon {} differs from model horizon {}",
                policy.horizon, model.horizon
            )));
        }
        let set = FeedbackSet::from_tree(policy, model.n_dm);
        let sim = SimPolicy::Feedback(set);
        sim.check(model)?;
        Ok(sim)
    }

    pub fn from_graph(policy: &GraphPolicy, model: &JointModel) -> Result<Self> {
        Ok(SimPolicy::Linear(model::graph_to_linear(policy, model)?))
    }

    pub fn to_linear(&self, model: &JointModel) -> Result<LinearPolicySet> {
        match self {
            SimPolicy::Feedback(f) => f.to_linear(model),
            SimPolicy::Linear(l) => Ok(l.clone()),
        }
    }

    /// Shape and information-measurability check against the model.
    pub fn check(&self, model: &JointModel) -> Result<()> {
        match self {
            SimPolicy::Feedback(f) => {
                let JointDynamics::PerDm { a, b } = &model.dynamics else {
                    return Err(Error::Unsupported(
                        "own-history feedback needs decoupled per-DM dynamics".into(),
                    ));
                };
                let shapes_ok = f.k.len() == model.n_dm
                    && f.c.len() == model.n_dm
                    && f.k.iter().chain(&f.c).all(|row| row.len() == model.horizon)
                    && f.k.iter().flatten().all(|k| k.shape() == (b.ncols(), a.nrows()))
                    && f.c.iter().flatten().all(|c| c.shape() == (b.ncols(), a.nrows()));
                if !shapes_ok {
                    return Err(Error::Dimension("feedback schedule does not fit the model".into()));
                }
                Ok(())
            }
            SimPolicy::Linear(l) => l.check_measurable(model),
        }
    }
}

/// Per-DM states (`t = 0..=T`) and controls (`t = 0..T`) of one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<DVector<f64>>>,
    pub controls: Vec<Vec<DVector<f64>>>,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub mean_cost: f64,
    pub std_error: f64,
    pub n_rollouts: usize,
    pub seed: u64,
    pub family: NoiseFamily,
    pub diagnostics: Vec<(String, f64)>,
}

impl SimReport {
    pub fn from_costs(costs: &[f64], seed: u64, family: NoiseFamily) -> Self {
        let (mean_cost, std_error) = mean_and_se(costs);
        SimReport {
            mean_cost,
            std_error,
            n_rollouts: costs.len(),
            seed,
            family,
            diagnostics: Vec::new(),
        }
    }

    /// Whether `value` lies within `k` standard errors of the estimate.
    pub fn within(&self, value: f64, k: f64) -> bool {
        (self.mean_cost - value).abs() <= k * self.std_error
    }
}

/// Sample mean and standard error (`sample std / √n`).
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = linalg::compensated_sum(values.iter().copied()) / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = linalg::compensated_sum(values.iter().map(|v| (v - mean) * (v - mean))) / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Primitives of rollout `index`, as used by every simulation entry point.
pub fn sample_primitives(model: &JointModel, seed: u64, index: u64) -> Vec<DVector<f64>> {
    Sampler::new(model).sample(seed, index)
}

fn controls_at(
    model: &JointModel,
    policy: &SimPolicy,
    t: usize,
    prims: &[DVector<f64>],
    states: &[DVector<f64>],
) -> Vec<DVector<f64>> {
    let n = model.n;
    match policy {
        SimPolicy::Feedback(f) => (0..model.n_dm)
            .map(|i| &f.k[i][t] * &states[i] + &f.c[i][t] * prims[i].rows(0, n))
            .collect(),
        SimPolicy::Linear(l) => l
            .maps
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let map = &row[t];
                let mut u = &map.own * &prims[i] + &map.offset;
                for (j, f) in &map.foreign {
                    u += f * &prims[*j];
                }
                u
            })
            .collect(),
    }
}

fn quad(x: &DVector<f64>, m: &nalgebra::DMatrix<f64>, y: &DVector<f64>) -> f64 {
    x.dot(&(m * y))
}

fn stage_cost(model: &JointModel, xs: &[DVector<f64>], us: &[DVector<f64>]) -> f64 {
    match &model.cost {
        StageCost::Exchangeable {
            q,
            r,
            q_tilde,
            r_tilde,
            rho,
        } => {
            let own: f64 = linalg::compensated_sum(
                xs.iter().zip(us).map(|(x, u)| quad(x, q, x) + quad(u, r, u)),
            );
            let mut coupling = 0.0;
            if *rho != 0.0 && !linalg::is_zero(r_tilde) {
                let total = us.iter().fold(DVector::zeros(model.m), |acc, u| acc + u);
                let diag = linalg::compensated_sum(us.iter().map(|u| quad(u, r_tilde, u)));
                coupling += quad(&total, r_tilde, &total) - diag;
            }
            if *rho != 0.0 && !linalg::is_zero(q_tilde) {
                let total = xs.iter().fold(DVector::zeros(model.n), |acc, x| acc + x);
                let diag = linalg::compensated_sum(xs.iter().map(|x| quad(x, q_tilde, x)));
                coupling += quad(&total, q_tilde, &total) - diag;
            }
            own + rho * coupling
        }
        StageCost::Joint { q, r, s } => {
            let x = stack(xs);
            let u = stack(us);
            quad(&x, q, &x) + 2.0 * quad(&x, s, &u) + quad(&u, r, &u)
        }
    }
}

fn stack(parts: &[DVector<f64>]) -> DVector<f64> {
    let len = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(len);
    let mut at = 0;
    for p in parts {
        out.rows_mut(at, p.len()).copy_from(p);
        at += p.len();
    }
    out
}

/// Roll out one trajectory from given primitives.
pub fn rollout(
    model: &JointModel,
    policy: &SimPolicy,
    prims: &[DVector<f64>],
    record: bool,
) -> (f64, Option<Trajectory>) {
    let (n, nd) = (model.n, model.n_dm);
    let mut xs: Vec<DVector<f64>> = prims.iter().map(|p| p.rows(0, n).into_owned()).collect();
    let mut terms = Vec::with_capacity(model.horizon + 1);
    let mut states = Vec::new();
    let mut controls = Vec::new();
    for t in 0..model.horizon {
        let us = controls_at(model, policy, t, prims, &xs);
        terms.push(stage_cost(model, &xs, &us));
        let next: Vec<DVector<f64>> = match &model.dynamics {
            JointDynamics::PerDm { a, b } => (0..nd)
                .map(|i| a * &xs[i] + b * &us[i] + prims[i].rows(n * (t + 1), n))
                .collect(),
            JointDynamics::Joint { a, b } => {
                let x = a * stack(&xs) + b * stack(&us);
                (0..nd)
                    .map(|i| x.rows(i * n, n) + prims[i].rows(n * (t + 1), n))
                    .collect()
            }
        };
        if record {
            states.push(std::mem::replace(&mut xs, next));
            controls.push(us);
        } else {
            xs = next;
        }
    }
    if let Some(qt) = &model.terminal {
        let x = stack(&xs);
        terms.push(quad(&x, qt, &x));
    }
    let cost = model.cost_scale * linalg::compensated_sum(terms);
    let trajectory = record.then(|| {
        states.push(xs);
        Trajectory {
            states,
            controls,
            cost,
        }
    });
    (cost, trajectory)
}

fn require_rollouts(n_rollouts: usize) -> Result<()> {
    if n_rollouts < 2 {
        return Err(Error::Input(format!(
            "need at least 2 rollouts for a standard error, got {n_rollouts}"
        )));
    }
    Ok(())
}

/// Per-rollout costs of several policies on common random numbers:
/// `result[p][k]` is policy `p` on rollout `k`.
pub fn paired_costs(
    model: &JointModel,
    policies: &[&SimPolicy],
    n_rollouts: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    for p in policies {
        p.check(model)?;
    }
    let sampler = Sampler::new(model);
    let per_rollout: Vec<Vec<f64>> = (0..n_rollouts as u64)
        .into_par_iter()
        .map(|k| {
            let prims = sampler.sample(seed, k);
            policies.iter().map(|p| rollout(model, p, &prims, false).0).collect()
        })
        .collect();
    Ok((0..policies.len())
        .map(|p| per_rollout.iter().map(|row| row[p]).collect())
        .collect())
}

pub fn rollout_costs(
    model: &JointModel,
    policy: &SimPolicy,
    n_rollouts: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    Ok(paired_costs(model, &[policy], n_rollouts, seed)?.remove(0))
}

pub fn simulate_model(
    model: &JointModel,
    policy: &SimPolicy,
    n_rollouts: usize,
    seed: u64,
) -> Result<SimReport> {
    require_rollouts(n_rollouts)?;
    let costs = rollout_costs(model, policy, n_rollouts, seed)?;
    Ok(SimReport::from_costs(&costs, seed, model.family))
}

/// Monte Carlo estimate of the expected cost of `policy` on `spec`.
pub fn simulate(spec: &TeamSpec, policy: &SimPolicy, n_rollouts: usize, seed: u64) -> Result<SimReport> {
    let model = JointModel::from_spec(spec)?;
    simulate_model(&model, policy, n_rollouts, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::team_model::{CostSpec, Dynamics, InfoStructure, NoiseSpec};
    use crate::tree_solver;
    use nalgebra::DMatrix;

    fn m1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn spec(n_dm: usize, horizon: usize, rt: f64, sw: f64) -> TeamSpec {
        TeamSpec {
            n_dm,
            horizon,
            dynamics: Dynamics::Homogeneous { a: m1(1.0), b: m1(1.0) },
            cost: CostSpec {
                q: m1(1.0),
                r: m1(1.0),
                r_tilde: Some(m1(rt)),
                q_tilde: None,
                s: None,
            },
            noise: NoiseSpec {
                sigma_w: m1(sw),
                init_diag: m1(1.0),
                init_offdiag: m1(0.5),
                family: NoiseFamily::Gaussian,
            },
            info: InfoStructure::Tree,
        }
    }

    #[test]
    fn zero_policy_single_stage_state_cost() {
        let s = spec(2, 1, 0.0, 0.0);
        let model = JointModel::from_spec(&s).unwrap();
        let zero = SimPolicy::Linear(LinearPolicySet::zero(2, 1, 1, 1));
        let report = simulate_model(&model, &zero, 20_000, 3).unwrap();
        assert!(report.within(2.0, 3.0), "{report:?}");
    }

    #[test]
    fn rollout_matches_exact_cost_for_each_path() {
        let s = spec(3, 3, 0.4, 0.6);
        let model = JointModel::from_spec(&s).unwrap();
        let policy = tree_solver::solve_tree_mode(&s, 3, tree_solver::PopulationMode::NDm(3)).unwrap();
        let fb = SimPolicy::from_tree(&policy, &model).unwrap();
        let lin = SimPolicy::Linear(fb.to_linear(&model).unwrap());
        let prims = sample_primitives(&model, 1, 0);
        let (c1, _) = rollout(&model, &fb, &prims, false);
        let (c2, tr) = rollout(&model, &lin, &prims, true);
        assert!((c1 - c2).abs() < 1e-12);
        let tr = tr.unwrap();
        assert_eq!(tr.states.len(), 4);
        assert_eq!(tr.controls.len(), 3);
        // The joint-matrix cost form gives the same stage sums.
        let mut joint = model.clone();
        let (q, r, sm) = model.joint_cost();
        joint.cost = StageCost::Joint { q, r, s: sm };
        let (c3, _) = rollout(&joint, &lin, &prims, false);
        assert!((c1 - c3).abs() < 1e-12);
    }

    #[test]
    fn deterministic_under_thread_counts() {
        let s = spec(2, 4, 0.5, 0.7);
        let model = JointModel::from_spec(&s).unwrap();
        let policy = SimPolicy::from_tree(&tree_solver::solve_tree(&s).unwrap(), &model).unwrap();
        let a = simulate_model(&model, &policy, 500, 9).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| simulate_model(&model, &policy, 500, 9).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.mean_cost.to_bits(), b.mean_cost.to_bits());
    }

    #[test]
    fn too_few_rollouts_rejected() {
        let s = spec(2, 1, 0.0, 0.0);
        let model = JointModel::from_spec(&s).unwrap();
        let zero = SimPolicy::Linear(LinearPolicySet::zero(2, 1, 1, 1));
        assert!(matches!(simulate_model(&model, &zero, 1, 0), Err(Error::Input(_))));
    }
}
