//! Joint closed-loop model and linear policies in disturbance-feedback form.
//!
//! A DM's control at stage `t` is an affine function of primitive random
//! variables: its own initial state and past disturbances, plus (under delayed
//! sharing) other DMs' primitives it has already learned. Writing policies this
//! way makes convex combinations and permutation averages well defined and
//! keeps the cost a convex quadratic in the policy coefficients.

use nalgebra::{DMatrix, DVector};

use crate::delayed_solver::{self, GraphPolicy};
use crate::error::{Error, Result};
use crate::info_graph;
use crate::linalg;
use crate::team_model::{Dynamics, InfoStructure, NoiseFamily, TeamSpec};
use crate::tree_solver::TreePolicy;

#[derive(Debug, Clone, PartialEq)]
pub enum JointDynamics {
    /// Same `(A, B)` for every DM, no cross-coupling.
    PerDm { a: DMatrix<f64>, b: DMatrix<f64> },
    /// Full joint matrices.
    Joint { a: DMatrix<f64>, b: DMatrix<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageCost {
    /// `Σ_i (x^iᵀQx^i + u^iᵀRu^i) + ρ Σ_i Σ_{j≠i} (u^iᵀR̃u^j + x^iᵀQ̃x^j)`.
    Exchangeable {
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        q_tilde: DMatrix<f64>,
        r_tilde: DMatrix<f64>,
        rho: f64,
    },
    /// `xᵀQx + 2xᵀSu + uᵀRu` on the stacked vectors.
    Joint {
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        s: DMatrix<f64>,
    },
}

/// Which primitives a DM may read at a given stage.
#[derive(Debug, Clone, PartialEq)]
pub enum Measurability {
    OwnOnly,
    /// Shortest delay `dist[i][j]` with which DM `i` learns DM `j`'s state.
    Delays(Vec<Vec<Option<u64>>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    pub n_dm: usize,
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    pub dynamics: JointDynamics,
    pub cost: StageCost,
    /// Joint terminal weight on `x_T`.
    pub terminal: Option<DMatrix<f64>>,
    pub init_diag: DMatrix<f64>,
    pub init_offdiag: DMatrix<f64>,
    pub sigma_w: DMatrix<f64>,
    pub family: NoiseFamily,
    /// Factor applied to the accumulated cost (`1/T`, or `1/(N·T)` for mean-field).
    pub cost_scale: f64,
    pub measurability: Measurability,
}

impl JointModel {
    pub fn from_spec(spec: &TeamSpec) -> Result<Self> {
        let (n, m) = (spec.state_dim(), spec.input_dim());
        let nd = spec.n_dm;
        let dynamics = match &spec.dynamics {
            Dynamics::Homogeneous { a, b } => JointDynamics::PerDm {
                a: a.clone(),
                b: b.clone(),
            },
            Dynamics::Blocked { .. } => {
                let (a, b) = spec.joint_dynamics();
                JointDynamics::Joint { a, b }
            }
        };
        let cost = match &spec.dynamics {
            Dynamics::Homogeneous { .. } => StageCost::Exchangeable {
                q: spec.cost.q.clone(),
                r: spec.cost.r.clone(),
                q_tilde: spec.q_tilde(),
                r_tilde: spec.r_tilde(),
                rho: spec.pair_weight(),
            },
            Dynamics::Blocked { .. } => {
                let jc = spec.joint_cost();
                StageCost::Joint {
                    q: jc.q,
                    r: jc.r,
                    s: jc.s,
                }
            }
        };
        let (terminal, measurability) = match &spec.info {
            InfoStructure::Delayed { delays } => (
                Some(spec.joint_cost().q),
                Measurability::Delays(info_graph::shortest_delays(delays)),
            ),
            _ => (None, Measurability::OwnOnly),
        };
        let cost_scale = match spec.info {
            InfoStructure::MeanFieldTree => 1.0 / (nd * spec.horizon) as f64,
            _ => 1.0 / spec.horizon as f64,
        };
        Ok(JointModel {
            n_dm: nd,
            n,
            m,
            horizon: spec.horizon,
            dynamics,
            cost,
            terminal,
            init_diag: spec.noise.init_diag.clone(),
            init_offdiag: spec.noise.init_offdiag.clone(),
            sigma_w: spec.noise.sigma_w.clone(),
            family: spec.noise.family,
            cost_scale,
            measurability,
        })
    }

    /// Columns of one DM's own primitive block `[x_0^i; w_0^i; …; w_{T−1}^i]`.
    pub fn own_dim(&self) -> usize {
        self.n * (self.horizon + 1)
    }

    pub fn joint_a_b(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        match &self.dynamics {
            JointDynamics::PerDm { a, b } => {
                let id = DMatrix::<f64>::identity(self.n_dm, self.n_dm);
                (id.kronecker(a), id.kronecker(b))
            }
            JointDynamics::Joint { a, b } => (a.clone(), b.clone()),
        }
    }

    pub fn joint_cost(&self) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let nd = self.n_dm;
        match &self.cost {
            StageCost::Exchangeable {
                q,
                r,
                q_tilde,
                r_tilde,
                rho,
            } => (
                linalg::exchangeable_blocks(nd, q, &(q_tilde * *rho)),
                linalg::exchangeable_blocks(nd, r, &(r_tilde * *rho)),
                DMatrix::zeros(nd * self.n, nd * self.m),
            ),
            StageCost::Joint { q, r, s } => (q.clone(), r.clone(), s.clone()),
        }
    }

    /// Whether DM `i` may read column block `cb` of DM `j`'s primitives at
    /// stage `t` (block 0 is `x_0^j`, block `s+1` is `w_s^j`).
    pub fn readable(&self, i: usize, j: usize, t: usize, cb: usize) -> bool {
        let lag = if i == j {
            Some(0)
        } else {
            match &self.measurability {
                Measurability::OwnOnly => None,
                Measurability::Delays(dist) => dist[i][j],
            }
        };
        let Some(d) = lag else { return false };
        let d = d as usize;
        if cb == 0 {
            t >= d
        } else {
            cb + d <= t
        }
    }

    /// Covariance of the stacked primitives `[x_0; w_0; …; w_{T−1}]`.
    pub fn primitive_cov(&self) -> DMatrix<f64> {
        let block = self.n_dm * self.n;
        let mut cov = DMatrix::zeros(block * (self.horizon + 1), block * (self.horizon + 1));
        let init = linalg::exchangeable_blocks(self.n_dm, &self.init_diag, &self.init_offdiag);
        cov.view_mut((0, 0), (block, block)).copy_from(&init);
        let noise = DMatrix::<f64>::identity(self.n_dm, self.n_dm).kronecker(&self.sigma_w);
        for t in 0..self.horizon {
            let at = block * (t + 1);
            cov.view_mut((at, at), (block, block)).copy_from(&noise);
        }
        cov
    }
}

/// One DM's control map at one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    /// `m × n(T+1)` coefficients on the DM's own primitives.
    pub own: DMatrix<f64>,
    /// Coefficients on other DMs' primitive blocks.
    pub foreign: Vec<(usize, DMatrix<f64>)>,
    pub offset: DVector<f64>,
}

impl AffineMap {
    pub fn zero(m: usize, own_dim: usize) -> Self {
        AffineMap {
            own: DMatrix::zeros(m, own_dim),
            foreign: Vec::new(),
            offset: DVector::zeros(m),
        }
    }

    fn scale(&self, w: f64) -> AffineMap {
        AffineMap {
            own: &self.own * w,
            foreign: self.foreign.iter().map(|(j, f)| (*j, f * w)).collect(),
            offset: &self.offset * w,
        }
    }

    fn add_assign(&mut self, other: &AffineMap) {
        self.own += &other.own;
        self.offset += &other.offset;
        for (j, f) in &other.foreign {
            match self.foreign.iter_mut().find(|(k, _)| k == j) {
                Some((_, g)) => *g += f,
                None => self.foreign.push((*j, f.clone())),
            }
        }
        self.foreign.sort_by_key(|(j, _)| *j);
    }
}

/// Per-DM, per-stage affine maps: `maps[i][t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPolicySet {
    pub n_dm: usize,
    pub horizon: usize,
    pub n: usize,
    pub m: usize,
    pub maps: Vec<Vec<AffineMap>>,
}

impl LinearPolicySet {
    pub fn zero(n_dm: usize, horizon: usize, n: usize, m: usize) -> Self {
        let own_dim = n * (horizon + 1);
        LinearPolicySet {
            n_dm,
            horizon,
            n,
            m,
            maps: vec![vec![AffineMap::zero(m, own_dim); horizon]; n_dm],
        }
    }

    fn check_shape(&self, model: &JointModel) -> Result<()> {
        if self.n_dm != model.n_dm
            || self.horizon != model.horizon
            || self.n != model.n
            || self.m != model.m
            || self.maps.len() != self.n_dm
            || self.maps.iter().any(|row| row.len() != self.horizon)
        {
            return Err(Error::Dimension(format!(
                "policy set for {} DMs / horizon {} does not fit a model with {} DMs / horizon {}",
                self.n_dm, self.horizon, model.n_dm, model.horizon
            )));
        }
        let own_dim = model.own_dim();
        for row in &self.maps {
            for map in row {
                let foreign_ok = map
                    .foreign
                    .iter()
                    .all(|(j, f)| *j < self.n_dm && f.shape() == (self.m, own_dim));
                if map.own.shape() != (self.m, own_dim) || map.offset.len() != self.m || !foreign_ok {
                    return Err(Error::Dimension("policy map has the wrong shape".into()));
                }
            }
        }
        Ok(())
    }

    /// Reject maps that read primitives outside the DM's information.
    pub fn check_measurable(&self, model: &JointModel) -> Result<()> {
        self.check_shape(model)?;
        let n = self.n;
        for (i, row) in self.maps.iter().enumerate() {
            for (t, map) in row.iter().enumerate() {
                let mut blocks: Vec<(usize, &DMatrix<f64>)> = vec![(i, &map.own)];
                blocks.extend(map.foreign.iter().map(|(j, f)| (*j, f)));
                for (j, coef) in blocks {
                    for cb in 0..=self.horizon {
                        let block = coef.view((0, cb * n), (self.m, n));
                        if !model.readable(i, j, t, cb) && block.iter().any(|v| *v != 0.0) {
                            let what = if cb == 0 {
                                format!("x_0 of DM {}", j + 1)
                            } else {
                                format!("w_{} of DM {}", cb - 1, j + 1)
                            };
                            return Err(Error::NotMeasurable(format!(
                                "DM {} at stage {t} reads {what}",
                                i + 1
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Relabel DMs: DM `i` of the result runs the policy of DM `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> LinearPolicySet {
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let maps = (0..self.n_dm)
            .map(|i| {
                self.maps[perm[i]]
                    .iter()
                    .map(|map| {
                        let mut foreign: Vec<(usize, DMatrix<f64>)> =
                            map.foreign.iter().map(|(j, f)| (inv[*j], f.clone())).collect();
                        foreign.sort_by_key(|(j, _)| *j);
                        AffineMap {
                            own: map.own.clone(),
                            foreign,
                            offset: map.offset.clone(),
                        }
                    })
                    .collect()
            })
            .collect();
        LinearPolicySet { maps, ..self.clone() }
    }

    /// `Σ_k w_k · set_k` for sets of identical shape.
    pub fn combine(sets: &[(f64, &LinearPolicySet)]) -> LinearPolicySet {
        let first = sets[0].1;
        let mut out = LinearPolicySet::zero(first.n_dm, first.horizon, first.n, first.m);
        for (w, set) in sets {
            for i in 0..first.n_dm {
                for t in 0..first.horizon {
                    out.maps[i][t].add_assign(&set.maps[i][t].scale(*w));
                }
            }
        }
        out
    }

    /// Invariant under every relabeling of the DMs (checked on the
    /// transpositions `(0 k)`, which generate all permutations).
    pub fn is_symmetric(&self) -> bool {
        (1..self.n_dm).all(|k| {
            let mut perm: Vec<usize> = (0..self.n_dm).collect();
            perm.swap(0, k);
            self.permute(&perm) == *self
        })
    }
}

/// Disturbance-feedback form of `u_t = K_t x_t + C_t x_0` for one DM with
/// decoupled dynamics.
pub fn feedback_maps(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    k: &[DMatrix<f64>],
    c: &[DMatrix<f64>],
) -> Vec<AffineMap> {
    let n = a.nrows();
    let m = b.ncols();
    let horizon = k.len();
    let own_dim = n * (horizon + 1);
    let mut xi = DMatrix::zeros(n, own_dim);
    xi.view_mut((0, 0), (n, n)).fill_with_identity();
    let mut maps = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let mut u = &k[t] * &xi;
        let mut init = u.view_mut((0, 0), (m, n));
        init += &c[t];
        let mut next = a * &xi + b * &u;
        let mut w_block = next.view_mut((0, n * (t + 1)), (n, n));
        w_block += DMatrix::<f64>::identity(n, n);
        maps.push(AffineMap {
            own: u,
            foreign: Vec::new(),
            offset: DVector::zeros(m),
        });
        xi = next;
    }
    maps
}

/// Per-DM own-history feedback `u_t^i = K_t^i x_t^i + C_t^i x_0^i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackSet {
    pub k: Vec<Vec<DMatrix<f64>>>,
    pub c: Vec<Vec<DMatrix<f64>>>,
}

impl FeedbackSet {
    pub fn from_tree(policy: &TreePolicy, n_dm: usize) -> Self {
        let c: Vec<DMatrix<f64>> = policy
            .l
            .iter()
            .map(|l| l * &policy.sigma * policy.mode.kappa())
            .collect();
        FeedbackSet {
            k: vec![policy.k.clone(); n_dm],
            c: vec![c; n_dm],
        }
    }

    pub fn to_linear(&self, model: &JointModel) -> Result<LinearPolicySet> {
        let JointDynamics::PerDm { a, b } = &model.dynamics else {
            return Err(Error::Unsupported(
                "own-history feedback needs decoupled per-DM dynamics".into(),
            ));
        };
        if self.k.len() != model.n_dm || self.k.iter().any(|k| k.len() != model.horizon) {
            return Err(Error::Dimension("feedback schedule does not fit the model".into()));
        }
        let maps = (0..model.n_dm)
            .map(|i| feedback_maps(a, b, &self.k[i], &self.c[i]))
            .collect();
        Ok(LinearPolicySet {
            n_dm: model.n_dm,
            horizon: model.horizon,
            n: model.n,
            m: model.m,
            maps,
        })
    }
}

/// Tree policy applied by every DM.
pub fn tree_to_linear(policy: &TreePolicy, model: &JointModel) -> Result<LinearPolicySet> {
    if policy.horizon != model.horizon {
        return Err(Error::Dimension(format!(
            "policy horizon {} differs from model horizon {}",
            policy.horizon, model.horizon
        )));
    }
    FeedbackSet::from_tree(policy, model.n_dm).to_linear(model)
}

/// Graph policy expressed on primitives by running the estimator on a basis.
pub fn graph_to_linear(policy: &GraphPolicy, model: &JointModel) -> Result<LinearPolicySet> {
    let (n, m, nd, horizon) = (model.n, model.m, model.n_dm, model.horizon);
    if policy.horizon != horizon || policy.model.graph.n_dm() != nd {
        return Err(Error::Dimension("graph policy does not fit the model".into()));
    }
    let block = nd * n;
    let cols = block * (horizon + 1);
    let basis = DMatrix::<f64>::identity(cols, cols);
    let x0 = basis.rows(0, block).into_owned();
    let noises: Vec<DMatrix<f64>> = (0..horizon)
        .map(|t| basis.rows(block * (t + 1), block).into_owned())
        .collect();
    let (a, b) = model.joint_a_b();
    let run = delayed_solver::simulate_estimator(policy, &a, &b, &x0, &noises)?;
    let own_dim = model.own_dim();
    let gather = |u: &DMatrix<f64>, i: usize, j: usize| -> DMatrix<f64> {
        let mut out = DMatrix::zeros(m, own_dim);
        for cb in 0..=horizon {
            out.view_mut((0, cb * n), (m, n))
                .copy_from(&u.view((i * m, cb * block + j * n), (m, n)));
        }
        out
    };
    let maps = (0..nd)
        .map(|i| {
            run.controls
                .iter()
                .map(|u| AffineMap {
                    own: gather(u, i, i),
                    foreign: (0..nd)
                        .filter(|&j| j != i)
                        .map(|j| (j, gather(u, i, j)))
                        .filter(|(_, f)| !linalg::is_zero(f))
                        .collect(),
                    offset: DVector::zeros(m),
                })
                .collect()
        })
        .collect();
    Ok(LinearPolicySet {
        n_dm: nd,
        horizon,
        n,
        m,
        maps,
    })
}

/// Exact expected cost of a policy set by propagating primitive coefficients.
pub fn exact_cost(model: &JointModel, policies: &LinearPolicySet) -> Result<f64> {
    policies.check_shape(model)?;
    let (n, m, nd, horizon) = (model.n, model.m, model.n_dm, model.horizon);
    let block = nd * n;
    let cols = block * (horizon + 1);
    let cov = model.primitive_cov();
    let (a, b) = model.joint_a_b();
    let (q, r, s) = model.joint_cost();

    // Coefficient matrices on the stacked primitives.
    let mut x = DMatrix::<f64>::zeros(block, cols);
    x.view_mut((0, 0), (block, block)).fill_with_identity();
    let mut x_mean = DVector::<f64>::zeros(block);
    let mut terms = Vec::with_capacity(horizon + 1);
    for t in 0..horizon {
        let mut u = DMatrix::<f64>::zeros(nd * m, cols);
        let mut u_mean = DVector::<f64>::zeros(nd * m);
        for i in 0..nd {
            let map = &policies.maps[i][t];
            let mut reads = vec![(i, &map.own)];
            reads.extend(map.foreign.iter().map(|(j, f)| (*j, f)));
            for (j, coef) in reads {
                for cb in 0..=horizon {
                    let mut dst = u.view_mut((i * m, cb * block + j * n), (m, n));
                    dst += coef.view((0, cb * n), (m, n));
                }
            }
            u_mean.rows_mut(i * m, m).copy_from(&map.offset);
        }
        let xc = &x * &cov;
        let uc = &u * &cov;
        let stage = linalg::trace_product(&q, &(&xc * x.transpose()))
            + 2.0 * linalg::trace_product(&s, &(&uc * x.transpose()))
            + linalg::trace_product(&r, &(&uc * u.transpose()))
            + (x_mean.transpose() * &q * &x_mean)[0]
            + 2.0 * (x_mean.transpose() * &s * &u_mean)[0]
            + (u_mean.transpose() * &r * &u_mean)[0];
        terms.push(stage);
        let mut next = &a * &x + &b * &u;
        let mut w = next.view_mut((0, block * (t + 1)), (block, block));
        w += DMatrix::<f64>::identity(block, block);
        x = next;
        x_mean = &a * &x_mean + &b * &u_mean;
    }
    if let Some(qt) = &model.terminal {
        terms.push(
            linalg::trace_product(qt, &(&x * &cov * x.transpose()))
                + (x_mean.transpose() * qt * &x_mean)[0],
        );
    }
    Ok(model.cost_scale * linalg::compensated_sum(terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::team_model::{CostSpec, NoiseSpec};
    use crate::tree_solver;

    fn m1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn spec(rt: f64, so: f64) -> TeamSpec {
        TeamSpec {
            n_dm: 2,
            horizon: 4,
            dynamics: Dynamics::Homogeneous { a: m1(1.0), b: m1(1.0) },
            cost: CostSpec {
                q: m1(1.0),
                r: m1(1.0),
                r_tilde: Some(m1(rt)),
                q_tilde: None,
                s: None,
            },
            noise: NoiseSpec {
                sigma_w: m1(0.7),
                init_diag: m1(1.0),
                init_offdiag: m1(so),
                family: NoiseFamily::Gaussian,
            },
            info: InfoStructure::Tree,
        }
    }

    #[test]
    fn exact_cost_matches_tree_prediction() {
        let spec = spec(0.5, 0.5);
        let policy = tree_solver::solve_tree(&spec).unwrap();
        let model = JointModel::from_spec(&spec).unwrap();
        let set = tree_to_linear(&policy, &model).unwrap();
        set.check_measurable(&model).unwrap();
        let exact = exact_cost(&model, &set).unwrap();
        let predicted = tree_solver::predicted_cost(&spec, &policy).unwrap().value;
        assert!((exact - predicted).abs() < 1e-12, "{exact} vs {predicted}");
    }

    #[test]
    fn zero_policy_single_stage() {
        let mut s = spec(0.0, 0.0);
        s.horizon = 1;
        s.cost.r_tilde = None;
        let model = JointModel::from_spec(&s).unwrap();
        let zero = LinearPolicySet::zero(2, 1, 1, 1);
        assert!((exact_cost(&model, &zero).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn foreign_reads_are_rejected_under_tree_info() {
        let model = JointModel::from_spec(&spec(0.5, 0.5)).unwrap();
        let mut set = LinearPolicySet::zero(2, 4, 1, 1);
        set.maps[0][2].foreign.push((1, DMatrix::from_element(1, 5, 0.1)));
        assert!(matches!(set.check_measurable(&model), Err(Error::NotMeasurable(_))));
        let mut set = LinearPolicySet::zero(2, 4, 1, 1);
        set.maps[0][1].own[(0, 2)] = 1.0; // w_1 at stage 1
        assert!(matches!(set.check_measurable(&model), Err(Error::NotMeasurable(_))));
    }

    #[test]
    fn permutation_twice_is_identity() {
        let model = JointModel::from_spec(&spec(0.5, 0.5)).unwrap();
        let mut set = LinearPolicySet::zero(2, 4, 1, 1);
        set.maps[0][1].own[(0, 0)] = 0.3;
        set.maps[1][2].own[(0, 1)] = -0.2;
        let swapped = set.permute(&[1, 0]);
        assert_eq!(swapped.maps[1][1].own[(0, 0)], 0.3);
        assert_eq!(swapped.permute(&[1, 0]), set);
        swapped.check_measurable(&model).unwrap();
    }
}
