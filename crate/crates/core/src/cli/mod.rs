//! Command-line front end: one spec file in, a summary on stdout, an
//! optional JSON report and an optional CSV table out.

pub mod report;
pub mod spec_file;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::delayed_solver::{self, RANK_CONDITION_TOL};
use crate::error::{Error, Result};
use crate::riccati::{self, DEFAULT_DARE_MAX_ITER, DEFAULT_DARE_TOL};
use crate::simulator::checks::{self, DEFAULT_PBP_STEP};
use crate::simulator::mft;
use crate::simulator::{self, JointModel, SimPolicy};
use crate::team_model::{self, Dynamics, InfoStructure, TeamSpec, ValidationReport};
use crate::tree_solver::{self, DEFAULT_INF_TOL, DEFAULT_MF_N_MAX, DEFAULT_MF_TOL};

use report::{cell, matrices_value, matrix_value, PolicyFile, Table};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_USAGE: i32 = 3;

/// Exact costs are attached to reports when the primitive vector is at most this long.
const EXACT_COST_MAX_DIM: usize = 600;

#[derive(Debug, Parser)]
#[command(name = "symteam", version, about = "Optimal decentralized policies for symmetric LQG teams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Io {
    /// Spec file (JSON).
    spec: PathBuf,
    /// Write the machine-readable report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write a CSV table here.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a spec and list every check.
    Check {
        #[command(flatten)]
        io: Io,
    },
    /// Finite-horizon tree solution.
    SolveTree {
        #[command(flatten)]
        io: Io,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Stationary tree solution by horizon doubling.
    SolveTreeInf {
        #[command(flatten)]
        io: Io,
        #[arg(long, default_value_t = DEFAULT_INF_TOL)]
        tol: f64,
    },
    /// Tree solution for a population of N DMs.
    SolveNdm {
        #[command(flatten)]
        io: Io,
        #[arg(long)]
        n: usize,
    },
    /// Mean-field limit over a doubling population schedule.
    SolveMf {
        #[command(flatten)]
        io: Io,
        #[arg(long, default_value_t = DEFAULT_MF_N_MAX)]
        n_max: usize,
        #[arg(long, default_value_t = DEFAULT_MF_TOL)]
        tol: f64,
    },
    /// Finite-horizon delayed-sharing solution.
    SolveDelayed {
        #[command(flatten)]
        io: Io,
    },
    /// Stationary delayed-sharing solution.
    SolveDelayedInf {
        #[command(flatten)]
        io: Io,
        #[arg(long, default_value_t = DEFAULT_DARE_TOL)]
        tol: f64,
    },
    /// Single-DM discrete algebraic Riccati equation.
    Dare {
        #[command(flatten)]
        io: Io,
        #[arg(long, default_value_t = DEFAULT_DARE_TOL)]
        tol: f64,
        #[arg(long, default_value_t = DEFAULT_DARE_MAX_ITER)]
        max_iter: usize,
    },
    /// Monte Carlo cost of a policy (the optimal one when --policy is absent).
    Simulate {
        #[command(flatten)]
        io: Io,
        /// Report or policy file to simulate.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        rollouts: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Mean-field convergence table over population sizes.
    SweepMft {
        #[command(flatten)]
        io: Io,
        #[arg(long, value_delimiter = ',', required = true)]
        schedule: Vec<usize>,
        #[arg(long, default_value_t = 10_000)]
        rollouts: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Structural checks on a policy (the optimal one when --policy is absent).
    Verify {
        #[command(flatten)]
        io: Io,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        rollouts: usize,
        #[arg(long)]
        seed: u64,
    },
}

impl Command {
    fn io(&self) -> &Io {
        match self {
            Command::Check { io }
            | Command::SolveTree { io, .. }
            | Command::SolveTreeInf { io, .. }
            | Command::SolveNdm { io, .. }
            | Command::SolveMf { io, .. }
            | Command::SolveDelayed { io }
            | Command::SolveDelayedInf { io, .. }
            | Command::Dare { io, .. }
            | Command::Simulate { io, .. }
            | Command::SweepMft { io, .. }
            | Command::Verify { io, .. } => io,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Check { .. } => "check",
            Command::SolveTree { .. } => "solve-tree",
            Command::SolveTreeInf { .. } => "solve-tree-inf",
            Command::SolveNdm { .. } => "solve-ndm",
            Command::SolveMf { .. } => "solve-mf",
            Command::SolveDelayed { .. } => "solve-delayed",
            Command::SolveDelayedInf { .. } => "solve-delayed-inf",
            Command::Dare { .. } => "dare",
            Command::Simulate { .. } => "simulate",
            Command::SweepMft { .. } => "sweep-mft",
            Command::Verify { .. } => "verify",
        }
    }

    /// Module whose failure a numerical error reports.
    fn module(&self) -> &'static str {
        match self {
            Command::Check { .. } => "team_model",
            Command::SolveTree { .. }
            | Command::SolveTreeInf { .. }
            | Command::SolveNdm { .. }
            | Command::SolveMf { .. } => "tree_solver",
            Command::SolveDelayed { .. } | Command::SolveDelayedInf { .. } => "delayed_solver",
            Command::Dare { .. } => "riccati",
            Command::Simulate { .. } | Command::SweepMft { .. } | Command::Verify { .. } => "simulator",
        }
    }
}

struct Outcome {
    summary: String,
    report: Value,
    table: Table,
    /// Failed check names; a non-empty list exits with status 1.
    failures: Vec<String>,
}

/// Run one command; returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let command = cli.command;
    match execute(&command).and_then(|outcome| emit(&command, outcome)) {
        Ok(code) => code,
        Err(e) => {
            let module = match &e {
                Error::Validation(_) => "team_model",
                Error::NotMeasurable(_) => "simulator",
                Error::Input(_) | Error::Io(_) | Error::Parse(_) => "cli",
                _ => command.module(),
            };
            eprintln!("error: {} [{module}]: {e}", command.name());
            e.exit_code()
        }
    }
}

fn emit(command: &Command, outcome: Outcome) -> Result<i32> {
    let io = command.io();
    if let Some(path) = &io.out {
        report::write_json(path, &outcome.report)?;
    }
    if let Some(path) = &io.table {
        std::fs::write(path, outcome.table.to_csv())?;
    }
    println!("{}", outcome.summary.trim_end());
    if outcome.failures.is_empty() {
        Ok(EXIT_OK)
    } else {
        eprintln!("{} failed: {}", command.name(), outcome.failures.join(", "));
        Ok(EXIT_VALIDATION)
    }
}

fn validated(spec: &TeamSpec) -> Result<ValidationReport> {
    team_model::validate(spec)?.into_result()
}

fn execute(command: &Command) -> Result<Outcome> {
    let spec = spec_file::load_spec(&command.io().spec)?;
    match command {
        Command::Check { .. } => check(&spec),
        Command::SolveTree { horizon, .. } => {
            let spec = match horizon {
                Some(h) => spec.with_horizon(*h),
                None => spec,
            };
            validated(&spec)?;
            tree_outcome(command.name(), &spec, &tree_solver::solve_tree(&spec)?)
        }
        Command::SolveNdm { n, .. } => {
            if spec.info != InfoStructure::Tree {
                return Err(Error::Unsupported("solve-ndm needs tree information".into()));
            }
            let spec = spec.with_n_dm(*n);
            validated(&spec)?;
            tree_outcome(command.name(), &spec, &tree_solver::solve_tree(&spec)?)
        }
        Command::SolveTreeInf { tol, .. } => solve_tree_inf(&spec, *tol),
        Command::SolveMf { n_max, tol, .. } => solve_mf(&spec, *n_max, *tol),
        Command::SolveDelayed { .. } => solve_delayed(&spec),
        Command::SolveDelayedInf { tol, .. } => solve_delayed_inf(&spec, *tol),
        Command::Dare { tol, max_iter, .. } => dare(&spec, *tol, *max_iter),
        Command::Simulate {
            policy,
            rollouts,
            seed,
            ..
        } => simulate(&spec, policy.as_ref(), *rollouts, *seed),
        Command::SweepMft {
            schedule,
            rollouts,
            seed,
            ..
        } => sweep_mft(&spec, schedule, *rollouts, *seed),
        Command::Verify {
            policy,
            rollouts,
            seed,
            ..
        } => verify(&spec, policy.as_ref(), *rollouts, *seed),
    }
}

fn header(command: &str, spec: &TeamSpec) -> serde_json::Map<String, Value> {
    let mut obj = serde_json::Map::new();
    obj.insert("command".into(), json!(command));
    obj.insert("info".into(), json!(spec.info.name()));
    obj.insert("n_dm".into(), json!(spec.n_dm));
    obj.insert("horizon".into(), json!(spec.horizon));
    obj
}

fn check(spec: &TeamSpec) -> Result<Outcome> {
    let validation = team_model::validate(spec)?;
    let mut obj = header("check", spec);
    obj.insert("passed".into(), json!(validation.passed()));
    obj.insert(
        "checks".into(),
        Value::Array(
            validation
                .checks
                .iter()
                .map(|c| json!({"name": c.name, "passed": c.passed, "message": c.message}))
                .collect(),
        ),
    );
    let mut table = Table::new(&["check", "passed", "message"]);
    let mut summary = String::new();
    for c in &validation.checks {
        table.push(vec![c.name.replace(',', ";"), c.passed.to_string(), c.message.replace(',', ";")]);
        summary.push_str(&format!("[{}] {}", if c.passed { "pass" } else { "FAIL" }, c.name));
        if !c.passed {
            summary.push_str(&format!(": {}", c.message));
        }
        summary.push('\n');
    }
    Ok(Outcome {
        summary,
        report: Value::Object(obj),
        table,
        failures: validation.failures().map(|c| format!("team_model check '{}'", c.name)).collect(),
    })
}

fn flat_header(prefix: &str, rows: usize, cols: usize) -> Vec<String> {
    (0..rows)
        .flat_map(|r| (0..cols).map(move |c| format!("{prefix}[{r},{c}]")))
        .collect()
}

fn flat_cells(m: &nalgebra::DMatrix<f64>) -> Vec<String> {
    (0..m.nrows())
        .flat_map(|r| (0..m.ncols()).map(move |c| m[(r, c)].to_string()))
        .collect()
}

fn tree_outcome(command: &str, spec: &TeamSpec, policy: &tree_solver::TreePolicy) -> Result<Outcome> {
    let predicted = tree_solver::predicted_cost(spec, policy)?;
    let mut obj = header(command, spec);
    obj.insert("mode".into(), json!(policy.mode.to_string()));
    obj.insert(
        "predicted_cost".into(),
        json!({
            "value": predicted.value,
            "completed_square": predicted.completed_square,
            "variants": predicted.variants.iter()
                .map(|v| json!({"name": v.name, "value": v.value, "deviation": v.deviation}))
                .collect::<Vec<_>>(),
            "best_variant": predicted.best_variant,
        }),
    );
    obj.insert("policy".into(), serde_json::to_value(PolicyFile::from_tree(policy))?);
    let (m, n) = policy.k[0].shape();
    let mut head = vec!["t".to_string()];
    head.extend(flat_header("K", m, n));
    head.extend(flat_header("L", m, n));
    let mut table = Table {
        header: head,
        rows: Vec::new(),
    };
    for t in 0..policy.horizon {
        let mut row = vec![t.to_string()];
        row.extend(flat_cells(&policy.k[t]));
        row.extend(flat_cells(&policy.l[t]));
        table.push(row);
    }
    let summary = format!(
        "{command}: mode {}, horizon {}\npredicted cost {}\ncompleted-square cost {}\n{}",
        policy.mode,
        policy.horizon,
        predicted.value,
        predicted.completed_square,
        predicted
            .best_variant
            .map(|b| format!("closest literal variant: {b}\n"))
            .unwrap_or_default()
    );
    Ok(Outcome {
        summary,
        report: Value::Object(obj),
        table,
        failures: Vec::new(),
    })
}

fn solve_tree_inf(spec: &TeamSpec, tol: f64) -> Result<Outcome> {
    validated(spec)?;
    let sol = tree_solver::solve_infinite_tree(spec, tol)?;
    let mut obj = header("solve-tree-inf", spec);
    obj.insert("mode".into(), json!(sol.mode.to_string()));
    obj.insert("K".into(), matrix_value(&sol.k));
    obj.insert("P".into(), matrix_value(&sol.p));
    obj.insert("L".into(), matrices_value(&sol.l));
    obj.insert("sigma".into(), matrix_value(&sol.sigma));
    obj.insert("closed_loop_radius".into(), json!(sol.closed_loop_radius));
    obj.insert("dare_iterations".into(), json!(sol.dare_iterations));
    obj.insert("dare_residual".into(), json!(sol.dare_residual));
    obj.insert("converged_horizon".into(), json!(sol.converged_horizon));
    obj.insert("disagreement".into(), json!(sol.disagreement));
    obj.insert("decay_horizon".into(), json!(sol.decay_horizon));
    obj.insert("cesaro_series".into(), json!(sol.cesaro_series));
    obj.insert("average_cost".into(), json!(sol.average_cost));
    obj.insert(
        "policy".into(),
        serde_json::to_value(PolicyFile::from_tree(&sol.truncated_policy(spec.horizon)))?,
    );
    let mut table = Table::new(&["horizon", "l_disagreement", "cesaro_gap"]);
    for (i, (h, d)) in sol.disagreement.iter().enumerate() {
        let ces = sol.cesaro_series.get(i).map(|c| c.1);
        table.push(vec![h.to_string(), d.to_string(), cell(ces)]);
    }
    let summary = format!(
        "solve-tree-inf: mode {}\nspectral radius of A+BK {}\nL converged at horizon {} (tol {tol})\naverage cost {}\n",
        sol.mode, sol.closed_loop_radius, sol.converged_horizon, sol.average_cost
    );
    Ok(Outcome {
        summary,
        report: Value::Object(obj),
        table,
        failures: Vec::new(),
    })
}

fn solve_mf(spec: &TeamSpec, n_max: usize, tol: f64) -> Result<Outcome> {
    validated(spec)?;
    let limit = tree_solver::meanfield_limit_policy(spec, n_max, tol)?;
    let predicted = tree_solver::predicted_cost(spec, &limit.policy)?;
    let mut obj = header("solve-mf", spec);
    obj.insert(
        "series".into(),
        Value::Array(
            limit
                .series
                .iter()
                .map(|pt| json!({"n": pt.n, "successive_diff": pt.successive_diff, "L": matrices_value(&pt.l)}))
                .collect(),
        ),
    );
    obj.insert("detected_at".into(), json!(limit.detected_at));
    obj.insert("predicted_cost".into(), json!(predicted.value));
    obj.insert("policy".into(), serde_json::to_value(PolicyFile::from_tree(&limit.policy))?);
    let mut table = Table::new(&["n", "successive_diff"]);
    for pt in &limit.series {
        table.push(vec![pt.n.to_string(), cell(pt.successive_diff)]);
    }
    let summary = format!(
        "solve-mf: limit gains detected at N = {} (tol {tol})\nper-DM predicted cost of the limit policy {}\n",
        limit.detected_at, predicted.value
    );
    Ok(Outcome {
        summary,
        report: Value::Object(obj),
        table,
        failures: Vec::new(),
    })
}

fn graph_value(graph: &crate::info_graph::InfoGraph) -> Value {
    json!({
        "nodes": (0..graph.nodes.len()).map(|r| graph.label(r)).collect::<Vec<_>>(),
        "edges": graph.edges().iter().map(|(r, s)| [graph.label(*r), graph.label(*s)]).collect::<Vec<_>>(),
        "roots": graph.root.iter().map(|&r| graph.label(r)).collect::<Vec<_>>(),
    })
}

fn solve_delayed(spec: &TeamSpec) -> Result<Outcome> {
    validated(spec)?;
    let (policy, cost) = delayed_solver::solve_delayed_finite(spec)?;
    let graph = &policy.model.graph;
    let mut obj = header("solve-delayed", spec);
    obj.insert("graph".into(), graph_value(graph));
    obj.insert("predicted_cost".into(), json!(cost));
    obj.insert("policy".into(), serde_json::to_value(PolicyFile::from_graph(&policy))?);
    let mut table = Table::new(&["t", "node", "value_trace", "gain_max_abs"]);
    for t in 0..policy.horizon {
        for r in 0..graph.nodes.len() {
            table.push(vec![
                t.to_string(),
                graph.label(r),
                policy.values[t][r].trace().to_string(),
                policy.gains[t][r].amax().to_string(),
            ]);
        }
    }
    let summary = format!(
        "solve-delayed: {} graph nodes\n{}predicted cost {cost}\n",
        graph.nodes.len(),
        graph.listing()
    );
    Ok(Outcome {
        summary,
        report: Value::Object(obj),
        table,
        failures: Vec::new(),
    })
}

fn solve_delayed_inf(spec: &TeamSpec, tol: f64) -> Result<Outcome> {
    validated(spec)?;
    let sol = delayed_solver::solve_delayed_infinite(spec, tol)?;
    let graph = &sol.model.graph;
    let mut obj = header("solve-delayed-inf", spec);
    obj.insert("graph".into(), graph_value(graph));
    obj.insert("gains".into(), matrices_value(&sol.gains));
    obj.insert("values".into(), matrices_value(&sol.values));
    obj.insert(
        "rank_checks".into(),
        Value::Array(
            sol.rank_checks
                .iter()
                .map(|c| {
                    json!({
                        "node": c.node,
                        "min_relative_sv": c.min_relative_sv,
                        "worst_theta": c.worst_theta,
                        "passed": c.passed,
                        "marginal": c.marginal,
                        "literal_min_relative_sv": c.literal_min_relative_sv,
                        "tolerance": RANK_CONDITION_TOL,
                    })
                })
                .collect(),
        ),
    );
    obj.insert("closed_loop_radius".into(), json!(sol.closed_loop_radius));
    obj.insert("average_cost".into(), json!(sol.average_cost));
    obj.insert(
        "policy".into(),
        serde_json::to_value(PolicyFile::from_graph(&sol.truncated(spec.horizon)))?,
    );
    let mut table = Table::new(&["node", "min_relative_sv", "worst_theta", "passed", "marginal"]);
    for c in &sol.rank_checks {
        table.push(vec![
            c.node.replace(',', ";"),
            c.min_relative_sv.to_string(),
            c.worst_theta.to_string(),
            c.passed.to_string(),
            c.marginal.to_string(),
        ]);
    }
    let marginal: Vec<&str> = sol
        .rank_checks
        .iter()
        .filter(|c| c.marginal)
        .map(|c| c.node.as_str())
        .collect();
    let summary = format!(
        "solve-delayed-inf: {} nodes, closed-loop spectral radius {}\naverage cost {}\n{}",
        graph.nodes.len(),
        sol.closed_loop_radius,
        sol.average_cost,
        if marginal.is_empty() {
            String::new()
        } else {
            format!("rank condition marginal at {}\n", marginal.join(" "))
        }
    );
    Ok(Outcome {
        summary,
        report: Value::Object(obj),
        table,
        failures: Vec::new(),
    })
}

fn dare(spec: &TeamSpec, tol: f64, max_iter: usize) -> Result<Outcome> {
    let (a, b, q, r, s) = match &spec.dynamics {
        Dynamics::Homogeneous { a, b } => (
            a.clone(),
            b.clone(),
            spec.cost.q.clone(),
            spec.cost.r.clone(),
            spec.cost.s.clone().unwrap_or_else(|| nalgebra::DMatrix::zeros(a.nrows(), b.ncols())),
        ),
        Dynamics::Blocked { .. } => {
            let (a, b) = spec.joint_dynamics();
            let jc = spec.joint_cost();
            (a, b, jc.q, jc.r, jc.s)
        }
    };
    let sol = riccati::dare_solve_cross(&a, &b, &q, &r, &s, tol, max_iter)?;
    let mut obj = header("dare", spec);
    obj.insert("P".into(), matrix_value(&sol.p));
    obj.insert("K".into(), matrix_value(&sol.k));
    obj.insert("residual".into(), json!(sol.residual));
    obj.insert("iterations".into(), json!(sol.iterations));
    obj.insert("closed_loop_radius".into(), json!(sol.closed_loop_radius));
    let mut table = Table::new(&["quantity", "value"]);
    for (name, value) in flat_header("P", sol.p.nrows(), sol.p.ncols())
        .into_iter()
        .zip(flat_cells(&sol.p))
        .chain(flat_header("K", sol.k.nrows(), sol.k.ncols()).into_iter().zip(flat_cells(&sol.k)))
    {
        table.push(vec![format!("\"{name}\""), value]);
    }
    table.push(vec!["residual".into(), sol.residual.to_string()]);
    table.push(vec!["closed_loop_radius".into(), sol.closed_loop_radius.to_string()]);
    let summary = format!(
        "dare: converged in {} iterations (residual {:e})\nP = {}\nK = {}\nspectral radius of A+BK {}\n",
        sol.iterations,
        sol.residual,
        matrix_value(&sol.p),
        matrix_value(&sol.k),
        sol.closed_loop_radius
    );
    Ok(Outcome {
        summary,
        report: Value::Object(obj),
        table,
        failures: Vec::new(),
    })
}

/// Optimal policy for the spec's information structure, with its predicted cost.
fn optimal_policy(spec: &TeamSpec, model: &JointModel) -> Result<(SimPolicy, PolicyFile, f64)> {
    match spec.info {
        InfoStructure::Delayed { .. } => {
            let (policy, cost) = delayed_solver::solve_delayed_finite(spec)?;
            Ok((SimPolicy::from_graph(&policy, model)?, PolicyFile::from_graph(&policy), cost))
        }
        _ => {
            let policy = tree_solver::solve_tree(spec)?;
            let cost = tree_solver::predicted_cost(spec, &policy)?.value;
            Ok((SimPolicy::from_tree(&policy, model)?, PolicyFile::from_tree(&policy), cost))
        }
    }
}

fn load_or_solve(
    spec: &TeamSpec,
    model: &JointModel,
    path: Option<&PathBuf>,
) -> Result<(SimPolicy, PolicyFile, Option<f64>, String)> {
    match path {
        Some(p) => {
            let file = report::load_policy(p)?;
            Ok((file.to_sim(spec, model)?, file, None, p.display().to_string()))
        }
        None => {
            let (policy, file, cost) = optimal_policy(spec, model)?;
            Ok((policy, file, Some(cost), "optimal".into()))
        }
    }
}

fn exact_if_small(model: &JointModel, policy: &SimPolicy) -> Result<Option<f64>> {
    if model.n_dm * model.own_dim() > EXACT_COST_MAX_DIM {
        return Ok(None);
    }
    Ok(Some(simulator::exact_cost(model, &policy.to_linear(model)?)?))
}

fn simulate(spec: &TeamSpec, policy_path: Option<&PathBuf>, rollouts: usize, seed: u64) -> Result<Outcome> {
    validated(spec)?;
    let model = JointModel::from_spec(spec)?;
    let (policy, file, predicted, source) = load_or_solve(spec, &model, policy_path)?;
    let sim = simulator::simulate_model(&model, &policy, rollouts, seed)?;
    let exact = exact_if_small(&model, &policy)?;
    let mut obj = header("simulate", spec);
    obj.insert(
        "simulation".into(),
        json!({
            "mean_cost": sim.mean_cost,
            "std_error": sim.std_error,
            "n_rollouts": sim.n_rollouts,
            "seed": sim.seed,
            "family": sim.family.to_string(),
        }),
    );
    obj.insert("policy_source".into(), json!(source));
    obj.insert("predicted_cost".into(), json!(predicted));
    obj.insert("exact_cost".into(), json!(exact));
    obj.insert("policy".into(), serde_json::to_value(&file)?);
    let mut table = Table::new(&["mean_cost", "std_error", "n_rollouts", "seed", "exact_cost"]);
    table.push(vec![
        sim.mean_cost.to_string(),
        sim.std_error.to_string(),
        sim.n_rollouts.to_string(),
        sim.seed.to_string(),
        cell(exact),
    ]);
    let mut summary = format!(
        "simulate: {} rollouts, seed {}, {} noise\nmean cost {} ± {} (1 SE)\n",
        sim.n_rollouts, sim.seed, sim.family, sim.mean_cost, sim.std_error
    );
    if let Some(e) = exact {
        summary.push_str(&format!(
            "exact cost {e} ({:.2} SE away)\n",
            (sim.mean_cost - e).abs() / sim.std_error
        ));
    }
    Ok(Outcome {
        summary,
        report: Value::Object(obj),
        table,
        failures: Vec::new(),
    })
}

fn sweep_mft(spec: &TeamSpec, schedule: &[usize], rollouts: usize, seed: u64) -> Result<Outcome> {
    validated(spec)?;
    let table_data = mft::mft_sweep(spec, schedule, rollouts, seed)?;
    let mut obj = header("sweep-mft", spec);
    obj.insert("n_rollouts".into(), json!(table_data.n_rollouts));
    obj.insert("seed".into(), json!(table_data.seed));
    obj.insert("limit_L".into(), matrices_value(&table_data.limit_l));
    obj.insert("limit_detected_at".into(), json!(table_data.limit_detected_at));
    obj.insert("ui_sup".into(), json!(table_data.ui_sup));
    obj.insert(
        "rows".into(),
        Value::Array(
            table_data
                .rows
                .iter()
                .map(|r| {
                    json!({
                        "n": r.n,
                        "L": matrices_value(&r.l),
                        "l_diff": r.l_diff,
                        "predicted_opt": r.predicted_opt,
                        "predicted_limit": r.predicted_limit,
                        "cost_diff": r.cost_diff,
                        "mc_opt": r.mc_opt,
                        "mc_opt_se": r.mc_opt_se,
                        "mc_limit": r.mc_limit,
                        "mc_limit_se": r.mc_limit_se,
                        "gap": r.gap,
                        "gap_se": r.gap_se,
                        "moment_distance": r.moment_distance,
                        "ui_surrogate": r.ui_surrogate,
                    })
                })
                .collect(),
        ),
    );
    let mut table = Table::new(&[
        "n",
        "l_diff",
        "predicted_opt",
        "predicted_limit",
        "cost_diff",
        "mc_opt",
        "mc_opt_se",
        "mc_limit",
        "mc_limit_se",
        "gap",
        "gap_se",
        "moment_distance",
        "ui_surrogate",
    ]);
    let mut summary = format!(
        "sweep-mft: {} rollouts per point, seed {}\n{:>6} {:>12} {:>14} {:>12} {:>12}\n",
        rollouts, seed, "N", "L diff", "predicted", "gap", "gap SE"
    );
    for r in &table_data.rows {
        table.push(vec![
            r.n.to_string(),
            cell(r.l_diff),
            r.predicted_opt.to_string(),
            r.predicted_limit.to_string(),
            cell(r.cost_diff),
            r.mc_opt.to_string(),
            r.mc_opt_se.to_string(),
            r.mc_limit.to_string(),
            r.mc_limit_se.to_string(),
            r.gap.to_string(),
            r.gap_se.to_string(),
            r.moment_distance.to_string(),
            r.ui_surrogate.to_string(),
        ]);
        summary.push_str(&format!(
            "{:>6} {:>12.3e} {:>14.8} {:>12.3e} {:>12.3e}\n",
            r.n,
            r.l_diff.unwrap_or(f64::NAN),
            r.predicted_opt,
            r.gap,
            r.gap_se
        ));
    }
    summary.push_str(&format!("uniform-integrability surrogate sup {}\n", table_data.ui_sup));
    Ok(Outcome {
        summary,
        report: Value::Object(obj),
        table,
        failures: Vec::new(),
    })
}

/// One entry of the verify report.
struct CheckRow {
    name: &'static str,
    status: &'static str,
    detail: Value,
}

fn skipped(name: &'static str, why: String) -> CheckRow {
    CheckRow {
        name,
        status: "skipped",
        detail: json!({"reason": why}),
    }
}

fn status(passed: bool) -> &'static str {
    if passed {
        "pass"
    } else {
        "fail"
    }
}

fn verify(spec: &TeamSpec, policy_path: Option<&PathBuf>, rollouts: usize, seed: u64) -> Result<Outcome> {
    validated(spec)?;
    let model = JointModel::from_spec(spec)?;
    let (policy, _, _, source) = load_or_solve(spec, &model, policy_path)?;
    let mut rows = Vec::new();

    let pbp = checks::pbp_check(&model, &policy, DEFAULT_PBP_STEP)?;
    rows.push(CheckRow {
        name: "pbp_check",
        status: status(pbp.passed),
        detail: json!({
            "max_decrease": pbp.max_decrease,
            "threshold": pbp.threshold,
            "step": pbp.step,
            "max_slope": pbp.max_slope,
            "curvature_scale": pbp.curvature_scale,
            "worst_entry": pbp.worst_entry,
            "evaluations": pbp.evaluations,
        }),
    });

    // Structural checks run on a random asymmetric profile.
    let probe = checks::random_measurable_policy(&model, seed, 0.5);
    let probe_policy = SimPolicy::Linear(probe.clone());
    if spec.n_dm < 2 {
        rows.push(skipped("exchangeability_check", "needs at least two DMs".into()));
        rows.push(skipped("symmetrization_check", "needs at least two DMs".into()));
    } else {
        let perm: Vec<usize> = (0..spec.n_dm).rev().collect();
        match checks::exchangeability_check(&model, &probe_policy, &perm, rollouts, seed) {
            Ok(d) => rows.push(CheckRow {
                name: "exchangeability_check",
                status: status(d.consistent_with_zero()),
                detail: json!({
                    "permutation": perm,
                    "delta_mean": d.delta_mean,
                    "std_error": d.std_error,
                    "n_rollouts": d.n_rollouts,
                }),
            }),
            Err(Error::NotMeasurable(why)) => rows.push(skipped(
                "exchangeability_check",
                format!("relabeled profile leaves the information structure: {why}"),
            )),
            Err(e) => return Err(e),
        }
        match checks::symmetrization_check(&model, &probe, rollouts, seed) {
            Ok(s) => rows.push(CheckRow {
                name: "symmetrization_check",
                status: status(s.passed),
                detail: json!({
                    "cost_sym": s.cost_sym,
                    "cost_orig": s.cost_orig,
                    "std_error": s.std_error,
                    "exact_sym": s.exact_sym,
                    "exact_orig": s.exact_orig,
                    "already_symmetric": s.already_symmetric,
                }),
            }),
            Err(Error::NotMeasurable(why)) => rows.push(skipped(
                "symmetrization_check",
                format!("relabeled profile leaves the information structure: {why}"),
            )),
            Err(e) => return Err(e),
        }
    }

    if matches!(spec.info, InfoStructure::Delayed { .. }) {
        rows.push(skipped(
            "certainty_equivalence_check",
            "applies to tree and mean-field information".into(),
        ));
    } else {
        let ce = checks::certainty_equivalence_check(spec, rollouts, seed)?;
        rows.push(CheckRow {
            name: "certainty_equivalence_check",
            status: status(ce.passed),
            detail: json!({
                "gains_identical": ce.gains_identical,
                "pbp_uniform_max_decrease": ce.pbp_uniform.max_decrease,
                "pbp_uniform_passed": ce.pbp_uniform.passed,
                "predicted_cost": ce.predicted_cost,
                "uniform_mean_cost": ce.uniform_mc.mean_cost,
                "uniform_std_error": ce.uniform_mc.std_error,
                "mc_agrees": ce.mc_agrees,
            }),
        });
    }

    let failures: Vec<String> = rows
        .iter()
        .filter(|r| r.status == "fail")
        .map(|r| r.name.to_string())
        .collect();
    let mut obj = header("verify", spec);
    obj.insert("policy_source".into(), json!(source));
    obj.insert("n_rollouts".into(), json!(rollouts));
    obj.insert("seed".into(), json!(seed));
    obj.insert("passed".into(), json!(failures.is_empty()));
    obj.insert(
        "checks".into(),
        Value::Array(
            rows.iter()
                .map(|r| json!({"name": r.name, "status": r.status, "detail": r.detail}))
                .collect(),
        ),
    );
    let mut table = Table::new(&["check", "status"]);
    let mut summary = format!("verify: policy {source}, {rollouts} rollouts, seed {seed}\n");
    for r in &rows {
        table.push(vec![r.name.to_string(), r.status.to_string()]);
        summary.push_str(&format!("[{}] {}\n", r.status, r.name));
    }
    Ok(Outcome {
        summary,
        report: Value::Object(obj),
        table,
        failures,
    })
}

pub use spec_file::{load_spec, parse_spec, spec_to_json};
