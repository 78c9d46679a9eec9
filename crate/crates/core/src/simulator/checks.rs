//! Property checks: exchangeability, symmetrization, convexity in policies,
//! person-by-person stationarity and certainty equivalence.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::team_model::{NoiseFamily, TeamSpec};
use crate::tree_solver;

use super::model::{exact_cost, AffineMap, FeedbackSet, JointModel, LinearPolicySet};
use super::{mean_and_se, paired_costs, simulate_model, SimPolicy, SimReport};

/// Acceptance band in standard errors.
pub const SE_BAND: f64 = 3.0;
pub const DEFAULT_PBP_STEP: f64 = 1e-4;
pub const PBP_THRESHOLD: f64 = 1e-7;

/// Paired Monte Carlo difference `J(b) − J(a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaEstimate {
    pub delta_mean: f64,
    pub std_error: f64,
    pub n_rollouts: usize,
}

impl DeltaEstimate {
    fn from_pairs(a: &[f64], b: &[f64]) -> Self {
        let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
        let (delta_mean, std_error) = mean_and_se(&diffs);
        DeltaEstimate {
            delta_mean,
            std_error,
            n_rollouts: diffs.len(),
        }
    }

    /// `|delta| ≤ 3 SE`.
    pub fn consistent_with_zero(&self) -> bool {
        self.delta_mean.abs() <= SE_BAND * self.std_error
    }
}

/// Relabel the DMs of a policy profile: DM `i` runs the policy of DM `perm[i]`.
pub fn permute_policy(policy: &SimPolicy, perm: &[usize]) -> SimPolicy {
    match policy {
        SimPolicy::Feedback(f) => SimPolicy::Feedback(FeedbackSet {
            k: perm.iter().map(|&p| f.k[p].clone()).collect(),
            c: perm.iter().map(|&p| f.c[p].clone()).collect(),
        }),
        SimPolicy::Linear(l) => SimPolicy::Linear(l.permute(perm)),
    }
}

fn check_perm(perm: &[usize], n_dm: usize) -> Result<()> {
    let mut seen = vec![false; n_dm];
    if perm.len() != n_dm || perm.iter().any(|&p| p >= n_dm || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Input(format!("{perm:?} is not a permutation of {n_dm} DMs")));
    }
    Ok(())
}

/// `J(γ^σ) − J(γ)` on common random numbers.
pub fn exchangeability_check(
    model: &JointModel,
    policy: &SimPolicy,
    perm: &[usize],
    n_rollouts: usize,
    seed: u64,
) -> Result<DeltaEstimate> {
    check_perm(perm, model.n_dm)?;
    let permuted = permute_policy(policy, perm);
    let costs = paired_costs(model, &[policy, &permuted], n_rollouts, seed)?;
    Ok(DeltaEstimate::from_pairs(&costs[0], &costs[1]))
}

/// Same difference with independent streams for the two policies.
pub fn independent_delta(
    model: &JointModel,
    a: &SimPolicy,
    b: &SimPolicy,
    n_rollouts: usize,
    seed: u64,
) -> Result<DeltaEstimate> {
    let both = paired_costs(model, &[a, b], 2 * n_rollouts, seed)?;
    Ok(DeltaEstimate::from_pairs(
        &both[0][..n_rollouts],
        &both[1][n_rollouts..],
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Symmetrized {
    pub policy: LinearPolicySet,
    /// The input was already invariant under relabeling and is returned as is.
    pub already_symmetric: bool,
}

/// Equal-weight average of the policy over all `N!` DM relabelings.
///
/// The average has a closed form: every DM gets the mean own map and offset,
/// and the same coefficient on every other DM, equal to the mean over ordered
/// pairs `(i, j)` of DM `i`'s coefficient on DM `j`. Building it this way
/// makes the result exactly, not just approximately, symmetric.
pub fn symmetrize(policy: &LinearPolicySet) -> Symmetrized {
    if policy.is_symmetric() {
        return Symmetrized {
            policy: policy.clone(),
            already_symmetric: true,
        };
    }
    let nd = policy.n_dm;
    let mut out = policy.clone();
    for t in 0..policy.horizon {
        let first = &policy.maps[0][t];
        let mut own = DMatrix::zeros(first.own.nrows(), first.own.ncols());
        let mut offset = DVector::zeros(first.offset.len());
        let mut foreign: Option<DMatrix<f64>> = None;
        for row in &policy.maps {
            let map = &row[t];
            own += &map.own;
            offset += &map.offset;
            for (_, f) in &map.foreign {
                match foreign.as_mut() {
                    Some(acc) => *acc += f,
                    None => foreign = Some(f.clone()),
                }
            }
        }
        own /= nd as f64;
        offset /= nd as f64;
        let foreign = foreign.map(|f| f / (nd * (nd - 1)) as f64);
        for i in 0..nd {
            out.maps[i][t] = AffineMap {
                own: own.clone(),
                foreign: match &foreign {
                    Some(f) => (0..nd).filter(|&j| j != i).map(|j| (j, f.clone())).collect(),
                    None => Vec::new(),
                },
                offset: offset.clone(),
            };
        }
    }
    Symmetrized {
        policy: out,
        already_symmetric: false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymmetrizationCheck {
    pub cost_sym: f64,
    pub cost_orig: f64,
    /// Standard error of the paired difference `cost_sym − cost_orig`.
    pub std_error: f64,
    pub exact_sym: f64,
    pub exact_orig: f64,
    pub already_symmetric: bool,
    pub passed: bool,
}

pub fn symmetrization_check(
    model: &JointModel,
    policy: &LinearPolicySet,
    n_rollouts: usize,
    seed: u64,
) -> Result<SymmetrizationCheck> {
    let sym = symmetrize(policy);
    sym.policy.check_measurable(model)?;
    let orig = SimPolicy::Linear(policy.clone());
    let symp = SimPolicy::Linear(sym.policy.clone());
    let costs = paired_costs(model, &[&orig, &symp], n_rollouts, seed)?;
    let delta = DeltaEstimate::from_pairs(&costs[0], &costs[1]);
    let (cost_orig, _) = mean_and_se(&costs[0]);
    let (cost_sym, _) = mean_and_se(&costs[1]);
    Ok(SymmetrizationCheck {
        cost_sym,
        cost_orig,
        std_error: delta.std_error,
        exact_sym: exact_cost(model, &sym.policy)?,
        exact_orig: exact_cost(model, policy)?,
        already_symmetric: sym.already_symmetric,
        passed: delta.delta_mean <= SE_BAND * delta.std_error,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexityCheck {
    pub alpha: f64,
    /// `J(αγ₁ + (1−α)γ₂)`.
    pub combined: f64,
    /// `αJ(γ₁) + (1−α)J(γ₂)`.
    pub mixture: f64,
    pub std_error: f64,
    pub passed: bool,
}

pub fn convexity_check(
    model: &JointModel,
    first: &LinearPolicySet,
    second: &LinearPolicySet,
    alpha: f64,
    n_rollouts: usize,
    seed: u64,
) -> Result<ConvexityCheck> {
    let combined = LinearPolicySet::combine(&[(alpha, first), (1.0 - alpha, second)]);
    let [p0, p1, p2] = [combined, first.clone(), second.clone()].map(SimPolicy::Linear);
    let costs = paired_costs(model, &[&p0, &p1, &p2], n_rollouts, seed)?;
    let gaps: Vec<f64> = (0..n_rollouts)
        .map(|k| costs[0][k] - alpha * costs[1][k] - (1.0 - alpha) * costs[2][k])
        .collect();
    let (gap, std_error) = mean_and_se(&gaps);
    let combined = mean_and_se(&costs[0]).0;
    Ok(ConvexityCheck {
        alpha,
        combined,
        mixture: combined - gap,
        std_error,
        passed: gap <= SE_BAND * std_error,
    })
}

/// Random information-measurable affine profile, different for every DM.
pub fn random_measurable_policy(model: &JointModel, seed: u64, scale: f64) -> LinearPolicySet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = LinearPolicySet::zero(model.n_dm, model.horizon, model.n, model.m);
    let (n, m) = (model.n, model.m);
    let own_dim = model.own_dim();
    for i in 0..model.n_dm {
        for t in 0..model.horizon {
            let mut map = AffineMap::zero(m, own_dim);
            for j in 0..model.n_dm {
                let mut coef = DMatrix::zeros(m, own_dim);
                let mut any = false;
                for cb in 0..=model.horizon {
                    if model.readable(i, j, t, cb) {
                        any = true;
                        for r in 0..m {
                            for c in 0..n {
                                coef[(r, cb * n + c)] = scale * rng.random_range(-1.0..1.0);
                            }
                        }
                    }
                }
                if j == i {
                    map.own = coef;
                } else if any {
                    map.foreign.push((j, coef));
                }
            }
            map.offset = DVector::from_fn(m, |_, _| 0.1 * scale * rng.random_range(-1.0..1.0));
            set.maps[i][t] = map;
        }
    }
    set
}

#[derive(Debug, Clone, PartialEq)]
pub struct PbpReport {
    pub base_cost: f64,
    /// Largest `J(γ) − J(γ + perturbation)` over all single-entry moves.
    pub max_decrease: f64,
    /// Largest central-difference slope magnitude.
    pub max_slope: f64,
    /// Largest second difference divided by `step²`.
    pub curvature_scale: f64,
    pub worst_entry: String,
    pub evaluations: usize,
    pub step: f64,
    pub threshold: f64,
    pub passed: bool,
}

struct Probe {
    base: f64,
    max_decrease: f64,
    max_slope: f64,
    curvature: f64,
    worst: String,
    evaluations: usize,
}

impl Probe {
    fn record(&mut self, label: String, plus: f64, minus: f64, step: f64) {
        self.evaluations += 2;
        let decrease = (self.base - plus).max(self.base - minus);
        if decrease > self.max_decrease || self.worst.is_empty() {
            self.max_decrease = decrease;
            self.worst = label;
        }
        self.max_slope = self.max_slope.max(((plus - minus) / (2.0 * step)).abs());
        self.curvature = self.curvature.max((plus + minus - 2.0 * self.base) / (step * step));
    }
}

/// Perturb every admissible gain entry of each DM by `±step` and evaluate
/// the exact moment-propagated cost.
pub fn pbp_check(model: &JointModel, policy: &SimPolicy, step: f64) -> Result<PbpReport> {
    policy.check(model)?;
    let base = exact_cost(model, &policy.to_linear(model)?)?;
    let mut probe = Probe {
        base,
        max_decrease: f64::NEG_INFINITY,
        max_slope: 0.0,
        curvature: 0.0,
        worst: String::new(),
        evaluations: 0,
    };
    match policy {
        SimPolicy::Feedback(f) => {
            for i in 0..model.n_dm {
                for t in 0..model.horizon {
                    for (which, gains) in [("K", &f.k), ("C", &f.c)] {
                        let g = &gains[i][t];
                        for r in 0..g.nrows() {
                            for c in 0..g.ncols() {
                                let eval = |delta: f64| -> Result<f64> {
                                    let mut moved = f.clone();
                                    let target = if which == "K" { &mut moved.k } else { &mut moved.c };
                                    target[i][t][(r, c)] += delta;
                                    exact_cost(model, &moved.to_linear(model)?)
                                };
                                let label = format!("DM {} {which}_{t}[{r},{c}]", i + 1);
                                probe.record(label, eval(step)?, eval(-step)?, step);
                            }
                        }
                    }
                }
            }
        }
        SimPolicy::Linear(l) => {
            let n = model.n;
            for i in 0..model.n_dm {
                for t in 0..model.horizon {
                    for j in 0..model.n_dm {
                        for cb in 0..=model.horizon {
                            if !model.readable(i, j, t, cb) {
                                continue;
                            }
                            for r in 0..model.m {
                                for c in 0..n {
                                    let eval = |delta: f64| -> Result<f64> {
                                        let mut moved = l.clone();
                                        let map = &mut moved.maps[i][t];
                                        let col = cb * n + c;
                                        if j == i {
                                            map.own[(r, col)] += delta;
                                        } else {
                                            match map.foreign.iter_mut().find(|(k, _)| *k == j) {
                                                Some((_, f)) => f[(r, col)] += delta,
                                                None => {
                                                    let mut coef = DMatrix::zeros(model.m, model.own_dim());
                                                    coef[(r, col)] = delta;
                                                    map.foreign.push((j, coef));
                                                }
                                            }
                                        }
                                        exact_cost(model, &moved)
                                    };
                                    let label =
                                        format!("DM {} stage {t} coefficient on DM {} block {cb} [{r},{c}]", i + 1, j + 1);
                                    probe.record(label, eval(step)?, eval(-step)?, step);
                                }
                            }
                        }
                    }
                    for r in 0..model.m {
                        let eval = |delta: f64| -> Result<f64> {
                            let mut moved = l.clone();
                            moved.maps[i][t].offset[r] += delta;
                            exact_cost(model, &moved)
                        };
                        let label = format!("DM {} stage {t} offset [{r}]", i + 1);
                        probe.record(label, eval(step)?, eval(-step)?, step);
                    }
                }
            }
        }
    }
    Ok(PbpReport {
        base_cost: base,
        max_decrease: probe.max_decrease,
        max_slope: probe.max_slope,
        curvature_scale: probe.curvature,
        worst_entry: probe.worst,
        evaluations: probe.evaluations,
        step,
        threshold: PBP_THRESHOLD,
        passed: probe.max_decrease < PBP_THRESHOLD,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertaintyEquivalenceReport {
    pub gains_identical: bool,
    pub pbp_uniform: PbpReport,
    pub predicted_cost: f64,
    pub uniform_mc: SimReport,
    pub mc_agrees: bool,
    pub passed: bool,
}

/// Gains and costs under Gaussian versus uniform noise with equal moments.
pub fn certainty_equivalence_check(
    spec: &TeamSpec,
    n_rollouts: usize,
    seed: u64,
) -> Result<CertaintyEquivalenceReport> {
    certainty_equivalence_between(spec, &spec.with_family(NoiseFamily::Uniform), n_rollouts, seed)
}

/// Solve on `reference` under Gaussian noise and test the policy against
/// `actual` (normally the same spec under uniform noise). A mismatch in the
/// second moments between the two shows up as Monte Carlo disagreement.
pub fn certainty_equivalence_between(
    reference: &TeamSpec,
    actual: &TeamSpec,
    n_rollouts: usize,
    seed: u64,
) -> Result<CertaintyEquivalenceReport> {
    let gaussian = reference.with_family(NoiseFamily::Gaussian);
    let uniform = actual.with_family(NoiseFamily::Uniform);
    let pg = tree_solver::solve_tree(&gaussian)?;
    let pu = tree_solver::solve_tree(&uniform)?;
    let gains_identical = pg.k == pu.k && pg.l == pu.l;
    let model = JointModel::from_spec(&uniform)?;
    let policy = SimPolicy::from_tree(&pg, &model)?;
    let pbp_uniform = pbp_check(&model, &policy, DEFAULT_PBP_STEP)?;
    let predicted_cost = tree_solver::predicted_cost(&gaussian, &pg)?.value;
    let uniform_mc = simulate_model(&model, &policy, n_rollouts, seed)?;
    let mc_agrees = uniform_mc.within(predicted_cost, SE_BAND);
    Ok(CertaintyEquivalenceReport {
        gains_identical,
        passed: gains_identical && pbp_uniform.passed && mc_agrees,
        pbp_uniform,
        predicted_cost,
        uniform_mc,
        mc_agrees,
    })
}
