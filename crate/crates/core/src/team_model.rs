//! Problem-instance data model shared by the solvers and the simulator.
//!
//! A [`TeamSpec`] describes `N` decision makers (DMs), each with an `n`-dimensional
//! state and an `m`-dimensional control. Homogeneous dynamics give every DM the
//! same `(A, B)` and per-DM cost blocks; blocked dynamics carry the full
//! `N × N` grid of `(A^{ij}, B^{ij})` blocks and joint cost matrices, as used by
//! the delayed-sharing model.

use std::fmt;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::info_graph;
use crate::linalg;

#[derive(Debug, Clone, PartialEq)]
pub enum Dynamics {
    /// `x^i_{t+1} = A x^i_t + B u^i_t + w^i_t` for every DM.
    Homogeneous { a: DMatrix<f64>, b: DMatrix<f64> },
    /// `x^i_{t+1} = Σ_j A^{ij} x^j_t + B^{ij} u^j_t + w^i_t`.
    Blocked {
        a_blocks: Vec<Vec<DMatrix<f64>>>,
        b_blocks: Vec<Vec<DMatrix<f64>>>,
    },
}

/// Quadratic cost weights.
///
/// With homogeneous dynamics `q`, `r` are per-DM blocks and the optional
/// `r_tilde`/`q_tilde` weight the pairwise couplings `u^iᵀ R̃ u^j`, `x^iᵀ Q̃ x^j`.
/// With blocked dynamics `q` (`Nn × Nn`), `r` (`Nm × Nm`) and `s` (`Nn × Nm`)
/// are the joint matrices of the stage cost `[x; u]ᵀ [Q S; Sᵀ R] [x; u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub r_tilde: Option<DMatrix<f64>>,
    pub q_tilde: Option<DMatrix<f64>>,
    pub s: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseFamily {
    Gaussian,
    Uniform,
}

impl fmt::Display for NoiseFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseFamily::Gaussian => write!(f, "gaussian"),
            NoiseFamily::Uniform => write!(f, "uniform"),
        }
    }
}

/// Second-moment description of the zero-mean primitives.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    /// Per-DM disturbance covariance, i.i.d. across DMs and stages.
    pub sigma_w: DMatrix<f64>,
    /// `E(x^i_0 x^iᵀ_0)`, identical for every DM.
    pub init_diag: DMatrix<f64>,
    /// `E(x^i_0 x^jᵀ_0)` for `i ≠ j`, identical for every pair.
    pub init_offdiag: DMatrix<f64>,
    pub family: NoiseFamily,
}

/// Link delays: `entries[i][j]` is the delay with which DM `i` learns DM `j`'s
/// state; `None` means no link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DelayMatrix {
    pub entries: Vec<Vec<Option<u32>>>,
}

impl DelayMatrix {
    pub fn new(entries: Vec<Vec<Option<u32>>>) -> Self {
        Self { entries }
    }

    pub fn n_dm(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<u32> {
        self.entries[i][j]
    }

    /// Every pair linked with delay one.
    pub fn one_step(n_dm: usize) -> Self {
        let entries = (0..n_dm)
            .map(|i| (0..n_dm).map(|j| Some(if i == j { 0 } else { 1 })).collect())
            .collect();
        Self { entries }
    }

    /// No links between distinct DMs.
    pub fn disconnected(n_dm: usize) -> Self {
        let entries = (0..n_dm)
            .map(|i| (0..n_dm).map(|j| if i == j { Some(0) } else { None }).collect())
            .collect();
        Self { entries }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InfoStructure {
    /// Each DM sees its own state and action history.
    Tree,
    /// Tree information with `1/(N−1)`-scaled couplings.
    MeanFieldTree,
    /// Delayed state sharing over a link graph.
    Delayed { delays: DelayMatrix },
}

impl InfoStructure {
    pub fn name(&self) -> &'static str {
        match self {
            InfoStructure::Tree => "tree",
            InfoStructure::MeanFieldTree => "meanfield",
            InfoStructure::Delayed { .. } => "delayed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeamSpec {
    pub n_dm: usize,
    pub horizon: usize,
    pub dynamics: Dynamics,
    pub cost: CostSpec,
    pub noise: NoiseSpec,
    pub info: InfoStructure,
}

/// Joint stage-cost matrices over the stacked state and control.
#[derive(Debug, Clone)]
pub struct JointCost {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub s: DMatrix<f64>,
}

impl TeamSpec {
    /// Per-DM state dimension `n`.
    pub fn state_dim(&self) -> usize {
        match &self.dynamics {
            Dynamics::Homogeneous { a, .. } => a.nrows(),
            Dynamics::Blocked { a_blocks, .. } => a_blocks
                .first()
                .and_then(|r| r.first())
                .map_or(0, |b| b.nrows()),
        }
    }

    /// Per-DM control dimension `m`.
    pub fn input_dim(&self) -> usize {
        match &self.dynamics {
            Dynamics::Homogeneous { b, .. } => b.ncols(),
            Dynamics::Blocked { b_blocks, .. } => b_blocks
                .first()
                .and_then(|r| r.first())
                .map_or(0, |b| b.ncols()),
        }
    }

    /// Homogeneous `(A, B)`, or an error for blocked dynamics.
    pub fn homogeneous(&self) -> Result<(&DMatrix<f64>, &DMatrix<f64>)> {
        match &self.dynamics {
            Dynamics::Homogeneous { a, b } => Ok((a, b)),
            Dynamics::Blocked { .. } => Err(Error::Unsupported(
                "this operation requires homogeneous per-DM dynamics".into(),
            )),
        }
    }

    /// Weight `ρ` applied to each ordered pair coupling term.
    pub fn pair_weight(&self) -> f64 {
        match self.info {
            InfoStructure::MeanFieldTree if self.n_dm > 1 => 1.0 / (self.n_dm as f64 - 1.0),
            _ => 1.0,
        }
    }

    pub fn r_tilde(&self) -> DMatrix<f64> {
        let m = self.input_dim();
        self.cost
            .r_tilde
            .clone()
            .unwrap_or_else(|| DMatrix::zeros(m, m))
    }

    pub fn q_tilde(&self) -> DMatrix<f64> {
        let n = self.state_dim();
        self.cost
            .q_tilde
            .clone()
            .unwrap_or_else(|| DMatrix::zeros(n, n))
    }

    pub fn joint_dynamics(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let nd = self.n_dm;
        match &self.dynamics {
            Dynamics::Homogeneous { a, b } => {
                let id = DMatrix::<f64>::identity(nd, nd);
                (id.kronecker(a), id.kronecker(b))
            }
            Dynamics::Blocked { a_blocks, b_blocks } => {
                let (n, m) = (self.state_dim(), self.input_dim());
                (
                    linalg::from_blocks(a_blocks, n, n),
                    linalg::from_blocks(b_blocks, n, m),
                )
            }
        }
    }

    /// Joint `[Q S; Sᵀ R]` blocks of the total stage cost summed over DMs.
    pub fn joint_cost(&self) -> JointCost {
        let nd = self.n_dm;
        let (n, m) = (self.state_dim(), self.input_dim());
        match &self.dynamics {
            Dynamics::Homogeneous { .. } => {
                let rho = self.pair_weight();
                let q = linalg::exchangeable_blocks(nd, &self.cost.q, &(self.q_tilde() * rho));
                let r = linalg::exchangeable_blocks(nd, &self.cost.r, &(self.r_tilde() * rho));
                JointCost {
                    q: linalg::symmetrize(&q),
                    r: linalg::symmetrize(&r),
                    s: DMatrix::zeros(nd * n, nd * m),
                }
            }
            Dynamics::Blocked { .. } => JointCost {
                q: linalg::symmetrize(&self.cost.q),
                r: linalg::symmetrize(&self.cost.r),
                s: self
                    .cost
                    .s
                    .clone()
                    .unwrap_or_else(|| DMatrix::zeros(nd * n, nd * m)),
            },
        }
    }

    /// Joint covariance of the stacked initial state.
    pub fn joint_init_cov(&self) -> DMatrix<f64> {
        linalg::exchangeable_blocks(self.n_dm, &self.noise.init_diag, &self.noise.init_offdiag)
    }

    pub fn joint_noise_cov(&self) -> DMatrix<f64> {
        DMatrix::<f64>::identity(self.n_dm, self.n_dm).kronecker(&self.noise.sigma_w)
    }

    pub fn with_family(&self, family: NoiseFamily) -> Self {
        let mut spec = self.clone();
        spec.noise.family = family;
        spec
    }

    pub fn with_n_dm(&self, n_dm: usize) -> Self {
        let mut spec = self.clone();
        spec.n_dm = n_dm;
        spec
    }

    pub fn with_horizon(&self, horizon: usize) -> Self {
        let mut spec = self.clone();
        spec.horizon = horizon;
        spec
    }
}

/// One named pass/fail entry of a validation report.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn push(&mut self, name: impl Into<String>, passed: bool, message: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            message: message.into(),
        });
    }

    pub fn extend(&mut self, other: ValidationReport) {
        self.checks.extend(other.checks);
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn find(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failed(&self, name: &str) -> bool {
        self.find(name).is_some_and(|c| !c.passed)
    }

    /// Turn a failed report into a [`Error::Validation`] naming the failed checks.
    pub fn into_result(self) -> Result<ValidationReport> {
        if self.passed() {
            Ok(self)
        } else {
            let names: Vec<_> = self.failures().map(|c| c.name.clone()).collect();
            Err(Error::Validation(names.join("; ")))
        }
    }
}

fn shape_check(what: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::Dimension(format!(
            "{what} is {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn check_dimensions(spec: &TeamSpec) -> Result<()> {
    let nd = spec.n_dm;
    let (n, m) = (spec.state_dim(), spec.input_dim());
    match &spec.dynamics {
        Dynamics::Homogeneous { a, b } => {
            shape_check("A", a, n, n)?;
            shape_check("B", b, n, m)?;
            shape_check("Q", &spec.cost.q, n, n)?;
            shape_check("R", &spec.cost.r, m, m)?;
            if let Some(rt) = &spec.cost.r_tilde {
                shape_check("R_tilde", rt, m, m)?;
            }
            if let Some(qt) = &spec.cost.q_tilde {
                shape_check("Q_tilde", qt, n, n)?;
            }
            if spec.cost.s.is_some() {
                return Err(Error::Dimension(
                    "cross term S is only defined for blocked dynamics".into(),
                ));
            }
        }
        Dynamics::Blocked { a_blocks, b_blocks } => {
            if a_blocks.len() != nd || b_blocks.len() != nd {
                return Err(Error::Dimension(format!(
                    "blocked dynamics must have {nd}x{nd} blocks"
                )));
            }
            for i in 0..nd {
                if a_blocks[i].len() != nd || b_blocks[i].len() != nd {
                    return Err(Error::Dimension(format!(
                        "blocked dynamics row {} must have {nd} blocks",
                        i + 1
                    )));
                }
                for j in 0..nd {
                    shape_check(&format!("A^{{{}{}}}", i + 1, j + 1), &a_blocks[i][j], n, n)?;
                    shape_check(&format!("B^{{{}{}}}", i + 1, j + 1), &b_blocks[i][j], n, m)?;
                }
            }
            shape_check("Q", &spec.cost.q, nd * n, nd * n)?;
            shape_check("R", &spec.cost.r, nd * m, nd * m)?;
            if let Some(s) = &spec.cost.s {
                shape_check("S", s, nd * n, nd * m)?;
            }
            if spec.cost.r_tilde.is_some() || spec.cost.q_tilde.is_some() {
                return Err(Error::Dimension(
                    "R_tilde/Q_tilde are only defined for homogeneous dynamics".into(),
                ));
            }
        }
    }
    shape_check("sigma_w", &spec.noise.sigma_w, n, n)?;
    shape_check("init_diag", &spec.noise.init_diag, n, n)?;
    shape_check("init_offdiag", &spec.noise.init_offdiag, n, n)?;
    if let InfoStructure::Delayed { delays } = &spec.info {
        if delays.n_dm() != nd || delays.entries.iter().any(|r| r.len() != nd) {
            return Err(Error::Dimension(format!("delay matrix must be {nd}x{nd}")));
        }
    }
    Ok(())
}

fn symmetric_check(report: &mut ValidationReport, name: &str, m: &DMatrix<f64>) {
    let ok = linalg::is_symmetric(m);
    report.push(
        format!("{name} symmetric"),
        ok,
        if ok {
            String::new()
        } else {
            format!("{name} differs from its transpose by more than the tolerance")
        },
    );
}

fn psd_check(report: &mut ValidationReport, name: &str, m: &DMatrix<f64>) {
    let (lo, _) = linalg::eig_range(m);
    let ok = linalg::is_psd(m);
    report.push(
        format!("{name} positive semidefinite"),
        ok,
        if ok {
            String::new()
        } else {
            format!("smallest eigenvalue {lo:.3e}")
        },
    );
}

fn pd_check(report: &mut ValidationReport, name: &str, m: &DMatrix<f64>) {
    let (lo, _) = linalg::eig_range(m);
    let ok = linalg::is_pd(m);
    report.push(
        format!("{name} positive definite"),
        ok,
        if ok {
            String::new()
        } else {
            format!("smallest eigenvalue {lo:.3e}")
        },
    );
}

fn is_block_exchangeable(blocks: &[Vec<DMatrix<f64>>]) -> bool {
    let nd = blocks.len();
    if nd == 0 {
        return true;
    }
    let diag = &blocks[0][0];
    let off = if nd > 1 { Some(&blocks[0][1]) } else { None };
    (0..nd).all(|i| {
        (0..nd).all(|j| {
            let reference = if i == j { diag } else { off.unwrap() };
            (&blocks[i][j] - reference).amax() <= linalg::SYM_TOL * (1.0 + reference.amax())
        })
    })
}

fn split_blocks(m: &DMatrix<f64>, nd: usize, rows: usize, cols: usize) -> Vec<Vec<DMatrix<f64>>> {
    (0..nd)
        .map(|i| {
            (0..nd)
                .map(|j| m.view((i * rows, j * cols), (rows, cols)).into_owned())
                .collect()
        })
        .collect()
}

/// Check every structural invariant of a spec.
///
/// Dimension mismatches are hard errors; every other violated invariant is a
/// named failed check in the returned report.
pub fn validate(spec: &TeamSpec) -> Result<ValidationReport> {
    let mut report = ValidationReport::default();
    report.push(
        "decision makers positive",
        spec.n_dm >= 1,
        format!("n_dm = {}", spec.n_dm),
    );
    report.push(
        "horizon positive",
        spec.horizon >= 1,
        format!("horizon = {}", spec.horizon),
    );
    if spec.n_dm == 0 {
        return Ok(report);
    }
    check_dimensions(spec)?;

    let nd = spec.n_dm;
    let (n, m) = (spec.state_dim(), spec.input_dim());
    let homogeneous = matches!(spec.dynamics, Dynamics::Homogeneous { .. });

    symmetric_check(&mut report, "Q", &spec.cost.q);
    symmetric_check(&mut report, "R", &spec.cost.r);
    psd_check(&mut report, "Q", &spec.cost.q);
    pd_check(&mut report, "R", &spec.cost.r);

    let rho = spec.pair_weight();
    if let Some(rt) = spec.cost.r_tilde.as_ref().filter(|rt| !linalg::is_zero(rt)) {
        symmetric_check(&mut report, "R_tilde", rt);
        pd_check(&mut report, "R_tilde", rt);
    }
    if let Some(qt) = spec.cost.q_tilde.as_ref().filter(|qt| !linalg::is_zero(qt)) {
        symmetric_check(&mut report, "Q_tilde", qt);
        psd_check(&mut report, "Q_tilde", qt);
        let ok = matches!(spec.info, InfoStructure::MeanFieldTree);
        report.push(
            "state coupling requires mean-field info",
            ok,
            if ok { "" } else { "Q_tilde is only part of the mean-field cost" },
        );
    }

    if homogeneous && nd > 1 {
        let (r, rt) = (&spec.cost.r, spec.r_tilde());
        let (q, qt) = (&spec.cost.q, spec.q_tilde());
        let spread = nd as f64 - 1.0;
        let ok = linalg::is_pd(&(r - &rt * rho)) && linalg::is_pd(&(r + &rt * (spread * rho)));
        report.push(
            "joint control weight positive definite",
            ok,
            if ok { "" } else { "cost is not strictly convex in the joint controls" },
        );
        let ok = linalg::is_psd(&(q - &qt * rho)) && linalg::is_psd(&(q + &qt * (spread * rho)));
        report.push(
            "joint state weight positive semidefinite",
            ok,
            if ok { "" } else { "cost is not convex in the joint states" },
        );
    }

    if !homogeneous {
        let jc = spec.joint_cost();
        let mut stacked = DMatrix::zeros(nd * (n + m), nd * (n + m));
        stacked.view_mut((0, 0), (nd * n, nd * n)).copy_from(&jc.q);
        stacked.view_mut((0, nd * n), (nd * n, nd * m)).copy_from(&jc.s);
        stacked
            .view_mut((nd * n, 0), (nd * m, nd * n))
            .copy_from(&jc.s.transpose());
        stacked.view_mut((nd * n, nd * n), (nd * m, nd * m)).copy_from(&jc.r);
        psd_check(&mut report, "stacked [Q S; S^T R]", &stacked);
    }

    let noise = &spec.noise;
    symmetric_check(&mut report, "sigma_w", &noise.sigma_w);
    psd_check(&mut report, "sigma_w", &noise.sigma_w);
    symmetric_check(&mut report, "init_diag", &noise.init_diag);
    psd_check(&mut report, "init_diag", &noise.init_diag);
    if nd > 1 {
        symmetric_check(&mut report, "init_offdiag", &noise.init_offdiag);
        let spread = nd as f64 - 1.0;
        let lower = &noise.init_diag - &noise.init_offdiag;
        let upper = &noise.init_diag + &noise.init_offdiag * spread;
        let ok = linalg::is_psd(&lower) && linalg::is_psd(&upper);
        let (lo_l, _) = linalg::eig_range(&lower);
        let (lo_u, _) = linalg::eig_range(&upper);
        report.push(
            "joint initial covariance PSD",
            ok,
            if ok {
                String::new()
            } else {
                format!("eig_min(Σd − Σo) = {lo_l:.3e}, eig_min(Σd + (N−1)Σo) = {lo_u:.3e}")
            },
        );
    }

    match &spec.info {
        InfoStructure::Tree | InfoStructure::MeanFieldTree => {
            if matches!(spec.info, InfoStructure::MeanFieldTree) {
                report.push(
                    "mean-field requires at least two DMs",
                    nd >= 2,
                    format!("n_dm = {nd}"),
                );
            }
            match &spec.dynamics {
                Dynamics::Homogeneous { .. } => {
                    report.push("exchangeable structure", true, "identical per-DM blocks");
                }
                Dynamics::Blocked { a_blocks, b_blocks } => {
                    let decoupled = (0..nd).all(|i| {
                        (0..nd).all(|j| {
                            i == j || (linalg::is_zero(&a_blocks[i][j]) && linalg::is_zero(&b_blocks[i][j]))
                        })
                    });
                    report.push(
                        "tree info requires decoupled dynamics",
                        decoupled,
                        if decoupled { "" } else { "off-diagonal A/B blocks must vanish" },
                    );
                    let jc = spec.joint_cost();
                    let exch = is_block_exchangeable(a_blocks)
                        && is_block_exchangeable(b_blocks)
                        && is_block_exchangeable(&split_blocks(&jc.q, nd, n, n))
                        && is_block_exchangeable(&split_blocks(&jc.r, nd, m, m))
                        && is_block_exchangeable(&split_blocks(&jc.s, nd, n, m));
                    report.push(
                        "exchangeable structure",
                        exch,
                        if exch { "" } else { "blocks differ across DMs" },
                    );
                }
            }
        }
        InfoStructure::Delayed { delays } => {
            let indep = linalg::is_zero(&noise.init_offdiag) || nd == 1;
            report.push(
                "delayed sharing requires independent initial states",
                indep,
                if indep { "" } else { "init_offdiag must be zero" },
            );
            let (a_blocks, b_blocks) = match &spec.dynamics {
                Dynamics::Blocked { a_blocks, b_blocks } => (a_blocks.clone(), b_blocks.clone()),
                Dynamics::Homogeneous { .. } => {
                    let (a, b) = spec.joint_dynamics();
                    (split_blocks(&a, nd, n, n), split_blocks(&b, nd, n, m))
                }
            };
            report.extend(info_graph::validate_sparsity(delays, &a_blocks, &b_blocks));
        }
    }
    Ok(report)
}

/// `Σ = Σ_o Σ_d⁻¹`, so that `E(x^j_0 | x^i_0) = Σ x^i_0` for exchangeable
/// zero-mean Gaussian initial states.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalGain(pub DMatrix<f64>);

impl ConditionalGain {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

pub fn conditional_gain(noise: &NoiseSpec) -> Result<ConditionalGain> {
    let sd = linalg::symmetrize(&noise.init_diag);
    let (lo, hi) = linalg::eig_range(&sd);
    if !(lo > 1e-12 * hi.abs().max(f64::MIN_POSITIVE)) {
        return Err(Error::precondition(
            "init_diag invertible",
            format!(
                "init_diag is singular (smallest eigenvalue {lo:.3e}); \
                 add a small ridge to its diagonal to regularize"
            ),
        ));
    }
    let sd_inv = linalg::inverse(&sd, "init_diag")?;
    Ok(ConditionalGain(&noise.init_offdiag * sd_inv))
}
