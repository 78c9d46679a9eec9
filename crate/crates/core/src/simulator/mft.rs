//! Mean-field sweep: N-optimal policies against the frozen limit policy.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::team_model::{InfoStructure, TeamSpec};
use crate::tree_solver::{self, PopulationMode, TreePolicy, DEFAULT_MF_N_MAX, DEFAULT_MF_TOL};

use super::model::JointModel;
use super::{mean_and_se, rollout, Sampler, SimPolicy, Trajectory};

pub const MIN_SCHEDULE_POINTS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct MftRow {
    pub n: usize,
    pub l: Vec<DMatrix<f64>>,
    /// `max_t ‖L_t^{(N)} − L_t^{(prev)}‖_max`, absent for the first row.
    pub l_diff: Option<f64>,
    pub predicted_opt: f64,
    pub predicted_limit: f64,
    /// `|J^N(opt) − J^N(prev opt)|` on the predicted costs.
    pub cost_diff: Option<f64>,
    pub mc_opt: f64,
    pub mc_opt_se: f64,
    pub mc_limit: f64,
    pub mc_limit_se: f64,
    /// Paired `J^N(limit) − J^N(opt)` and its standard error.
    pub gap: f64,
    pub gap_se: f64,
    /// Mean over rollouts of the largest per-stage distance between the
    /// empirical (control, state) moments under the two policies.
    pub moment_distance: f64,
    /// `Ê|u^N − u^∞|²` averaged over DMs and stages.
    pub ui_surrogate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MftTable {
    pub rows: Vec<MftRow>,
    pub limit_l: Vec<DMatrix<f64>>,
    pub limit_detected_at: usize,
    pub ui_sup: f64,
    pub n_rollouts: usize,
    pub seed: u64,
}

/// Empirical first and second moments of `z^i = [u^i; x^i]` across DMs.
fn empirical_moments(us: &[DVector<f64>], xs: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let dim = us[0].len() + xs[0].len();
    let count = us.len() as f64;
    let mut mean = DVector::zeros(dim);
    let mut second = DMatrix::zeros(dim, dim);
    for (u, x) in us.iter().zip(xs) {
        let mut z = DVector::zeros(dim);
        z.rows_mut(0, u.len()).copy_from(u);
        z.rows_mut(u.len(), x.len()).copy_from(x);
        second += &z * z.transpose();
        mean += z;
    }
    (mean / count, second / count)
}

fn moment_distance(a: &Trajectory, b: &Trajectory) -> f64 {
    a.controls
        .iter()
        .zip(&b.controls)
        .enumerate()
        .map(|(t, (ua, ub))| {
            let (ma, sa) = empirical_moments(ua, &a.states[t]);
            let (mb, sb) = empirical_moments(ub, &b.states[t]);
            (ma - mb).norm() + (sa - sb).norm()
        })
        .fold(0.0, f64::max)
}

fn control_gap(a: &Trajectory, b: &Trajectory) -> f64 {
    let terms = a.controls.iter().zip(&b.controls).flat_map(|(ua, ub)| {
        ua.iter().zip(ub).map(|(x, y)| (x - y).norm_squared())
    });
    let count = (a.controls.len() * a.controls[0].len()) as f64;
    linalg::compensated_sum(terms) / count
}

fn check_schedule(schedule: &[usize]) -> Result<()> {
    if schedule.len() < MIN_SCHEDULE_POINTS {
        return Err(Error::Input(format!(
            "mean-field schedule needs at least {MIN_SCHEDULE_POINTS} points, got {}",
            schedule.len()
        )));
    }
    if schedule[0] < 2 || schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Input(
            "mean-field schedule must be strictly increasing and start at 2 or more".into(),
        ));
    }
    Ok(())
}

/// Sweep the population sizes of a mean-field family.
pub fn mft_sweep(spec: &TeamSpec, schedule: &[usize], n_rollouts: usize, seed: u64) -> Result<MftTable> {
    check_schedule(schedule)?;
    if spec.info != InfoStructure::MeanFieldTree {
        return Err(Error::Unsupported("mean-field sweep needs mean-field information".into()));
    }
    if n_rollouts < 2 {
        return Err(Error::Input(format!(
            "need at least 2 rollouts for a standard error, got {n_rollouts}"
        )));
    }
    let n_cap = DEFAULT_MF_N_MAX.max(*schedule.last().expect("checked length"));
    let limit = tree_solver::meanfield_limit_policy(spec, n_cap, DEFAULT_MF_TOL)?;
    let mut rows: Vec<MftRow> = Vec::with_capacity(schedule.len());
    for &n in schedule {
        let spec_n = spec.with_n_dm(n);
        let mode = PopulationMode::MeanFieldN(n);
        let opt = tree_solver::solve_tree_mode(&spec_n, spec.horizon, mode)?;
        let frozen = TreePolicy {
            mode,
            ..limit.policy.clone()
        };
        let predicted_opt = tree_solver::predicted_cost(&spec_n, &opt)?.value;
        let predicted_limit = tree_solver::predicted_cost(&spec_n, &frozen)?.value;
        let model = JointModel::from_spec(&spec_n)?;
        let p_opt = SimPolicy::from_tree(&opt, &model)?;
        let p_lim = SimPolicy::from_tree(&frozen, &model)?;
        let sampler = Sampler::new(&model);
        let per_rollout: Vec<[f64; 4]> = (0..n_rollouts as u64)
            .into_par_iter()
            .map(|k| {
                let prims = sampler.sample(seed, k);
                let (c_opt, t_opt) = rollout(&model, &p_opt, &prims, true);
                let (c_lim, t_lim) = rollout(&model, &p_lim, &prims, true);
                let (t_opt, t_lim) = (t_opt.expect("recorded"), t_lim.expect("recorded"));
                [c_opt, c_lim, moment_distance(&t_opt, &t_lim), control_gap(&t_opt, &t_lim)]
            })
            .collect();
        let column = |c: usize| -> Vec<f64> { per_rollout.iter().map(|r| r[c]).collect() };
        let (mc_opt, mc_opt_se) = mean_and_se(&column(0));
        let (mc_limit, mc_limit_se) = mean_and_se(&column(1));
        let gaps: Vec<f64> = per_rollout.iter().map(|r| r[1] - r[0]).collect();
        let (gap, gap_se) = mean_and_se(&gaps);
        let prev = rows.last();
        rows.push(MftRow {
            n,
            l_diff: prev.map(|p| max_abs_diff(&p.l, &opt.l)),
            cost_diff: prev.map(|p| (p.predicted_opt - predicted_opt).abs()),
            l: opt.l,
            predicted_opt,
            predicted_limit,
            mc_opt,
            mc_opt_se,
            mc_limit,
            mc_limit_se,
            gap,
            gap_se,
            moment_distance: mean_and_se(&column(2)).0,
            ui_surrogate: mean_and_se(&column(3)).0,
        });
    }
    let ui_sup = rows.iter().map(|r| r.ui_surrogate).fold(0.0, f64::max);
    Ok(MftTable {
        rows,
        limit_l: limit.policy.l,
        limit_detected_at: limit.detected_at,
        ui_sup,
        n_rollouts,
        seed,
    })
}

fn max_abs_diff(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}
