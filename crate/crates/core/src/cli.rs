//! The `fbsdelta` command line.
//!
//! Exit codes: 0 success, 2 solver failure (not solvable, continuation or
//! oracle failure, tolerance not met), 3 validation failure, 4 I/O or parse
//! error.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bsde::{solve_bsde, BsdeError};
use crate::filtration::{AdaptedProcess, ProbabilityTree};
use crate::linear::{solve_linear_with, LinearError, RiccatiSequence, SINGULAR_TOL};
use crate::nonlinear::{check_monotone, solve_continuation, ContinuationTrace, NonlinearError};
use crate::oracle::solve_oracle;
use crate::scenario::{Payload, Scenario, ScenarioError};
use crate::system::{FbsdeSolution, ResidualReport};

#[derive(Debug, Parser)]
#[command(name = "fbsdelta", version, about = "Solve stochastic difference equations on probability trees")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a scenario and check its tree and model.
    Validate(Common),
    /// Solve a backward equation.
    SolveBsde(Common),
    /// Solve a linear coupled system through the Riccati recursion.
    SolveLinear(Common),
    /// Solve a nonlinear coupled system by continuation from the anchor.
    SolveNonlinear(Common),
    /// Sample the monotone conditions of a nonlinear model.
    CheckMonotone(Common),
    /// Solve with the structured solver and with global Newton, and compare.
    CompareOracle(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Scenario JSON file.
    pub scenario: PathBuf,
    /// Directory for CSV output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Residual tolerance for solve commands, difference tolerance for compare-oracle.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Seed for monotone sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// First continuation step.
    #[arg(long)]
    pub delta_init: Option<f64>,
}

/// A failed command: exit code and message.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn solver(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
    fn invalid(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
    fn io(message: impl Into<String>) -> Self {
        Self { code: 4, message: message.into() }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Parse(_) => Failure::io(e.to_string()),
            ScenarioError::Invalid(_) => Failure::invalid(e.to_string()),
        }
    }
}

impl From<BsdeError> for Failure {
    fn from(e: BsdeError) -> Self {
        match e {
            BsdeError::NonFinite { .. } => Failure::solver(e.to_string()),
            _ => Failure::invalid(e.to_string()),
        }
    }
}

impl From<LinearError> for Failure {
    fn from(e: LinearError) -> Self {
        match e {
            LinearError::NotSolvable { .. } | LinearError::System(_) => Failure::solver(e.to_string()),
            _ => Failure::invalid(e.to_string()),
        }
    }
}

impl From<NonlinearError> for Failure {
    fn from(e: NonlinearError) -> Self {
        match e {
            NonlinearError::Linear(inner) => inner.into(),
            NonlinearError::ContinuationFailed { .. } | NonlinearError::System(_) => {
                Failure::solver(e.to_string())
            }
            _ => Failure::invalid(e.to_string()),
        }
    }
}

/// Runs the CLI on `args` (program name first), writing the report to `out`
/// and errors to `err`. Returns the exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = if code == 0 {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    let mut report = String::new();
    let result = execute(&cli.command, &mut report);
    let _ = out.write_all(report.as_bytes());
    match result {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

struct Loaded {
    scenario: Scenario,
    tree: ProbabilityTree,
}

fn load(common: &Common) -> Result<Loaded, Failure> {
    let text = fs::read_to_string(&common.scenario)
        .map_err(|e| Failure::io(format!("cannot read {}: {e}", common.scenario.display())))?;
    let mut scenario = Scenario::from_json(&text)?;
    if let Some(seed) = common.seed {
        scenario.solver.seed = seed;
    }
    if let Some(delta) = common.delta_init {
        scenario.solver.delta_init = delta;
    }
    let tree = scenario.build_tree()?;
    Ok(Loaded { scenario, tree })
}

fn execute(command: &Command, report: &mut String) -> Result<(), Failure> {
    match command {
        Command::Validate(c) => validate(c, report),
        Command::SolveBsde(c) => solve_bsde_cmd(c, report),
        Command::SolveLinear(c) => solve_linear_cmd(c, report),
        Command::SolveNonlinear(c) => solve_nonlinear_cmd(c, report),
        Command::CheckMonotone(c) => check_monotone_cmd(c, report),
        Command::CompareOracle(c) => compare_oracle_cmd(c, report),
    }
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn header(report: &mut String, l: &Loaded) {
    let _ = writeln!(report, "kind: {}", l.scenario.payload.kind());
    let _ = writeln!(report, "horizon: {}", l.tree.horizon());
    let _ = writeln!(report, "noise dimension: {}", l.tree.dim());
    let _ = writeln!(report, "nodes: {}", l.tree.node_total(0..=l.tree.horizon()));
}

fn validate(c: &Common, report: &mut String) -> Result<(), Failure> {
    let l = load(c)?;
    match &l.scenario.payload {
        Payload::Bsde(_) => {
            let (gen, _) = l.scenario.bsde(&l.tree)?;
            if !gen.terminal_z_independent {
                return Err(BsdeError::TerminalDependsOnZ.into());
            }
        }
        Payload::Linear(_) => {
            l.scenario.linear(&l.tree)?;
        }
        Payload::Nonlinear(_) => {
            l.scenario.nonlinear()?;
            l.scenario.solver.continuation()?;
        }
    }
    header(report, &l);
    report.push_str("status: valid\n");
    Ok(())
}

fn tolerance_gate(report: &mut String, what: &str, value: f64, tol: f64) -> Result<(), Failure> {
    let _ = writeln!(report, "{what}: {} (tolerance {})", num(value), num(tol));
    if value <= tol {
        Ok(())
    } else {
        Err(Failure::solver(format!("{what} {value:.3e} exceeds tolerance {tol:.3e}")))
    }
}

fn write_residuals(report: &mut String, r: &ResidualReport) {
    for (name, v) in [
        ("forward", r.forward),
        ("backward", r.backward),
        ("initial", r.initial),
        ("terminal", r.terminal),
        ("martingale", r.martingale),
        ("orthogonality", r.orthogonality),
    ] {
        let _ = writeln!(report, "residual.{name}: {}", num(v));
    }
}

/// One row per node: `time,node,<name>1,...`, components in `{:.16e}`.
pub fn process_csv(tree: &ProbabilityTree, name: &str, p: &AdaptedProcess) -> String {
    let (rows, cols) = p.shape();
    let mut s = String::from("time,node");
    for i in 1..=rows {
        for j in 1..=cols {
            if cols == 1 {
                let _ = write!(s, ",{name}{i}");
            } else {
                let _ = write!(s, ",{name}{i}_{j}");
            }
        }
    }
    s.push('\n');
    for t in p.domain() {
        for node in 0..tree.node_count(t) {
            let _ = write!(s, "{t},{}", tree.path_label(t, node));
            let v = p.at(t, node);
            for i in 0..rows {
                for j in 0..cols {
                    let _ = write!(s, ",{}", num(v[(i, j)]));
                }
            }
            s.push('\n');
        }
    }
    s
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Failure::io(format!("cannot write {}: {e}", path.display())))
}

fn write_outputs(c: &Common, files: &[(&str, String)], report: &str) -> Result<(), Failure> {
    let Some(dir) = &c.out else { return Ok(()) };
    fs::create_dir_all(dir).map_err(|e| Failure::io(format!("cannot create {}: {e}", dir.display())))?;
    for (name, contents) in files {
        write_file(dir, name, contents)?;
    }
    write_file(dir, "summary.txt", report)
}

fn solution_files(tree: &ProbabilityTree, sol: &FbsdeSolution) -> Vec<(&'static str, String)> {
    vec![
        ("X.csv", process_csv(tree, "x", &sol.x)),
        ("Y.csv", process_csv(tree, "y", &sol.y)),
        ("Z.csv", process_csv(tree, "z", &sol.z)),
        ("N.csv", process_csv(tree, "n", &sol.n)),
    ]
}

fn solve_bsde_cmd(c: &Common, report: &mut String) -> Result<(), Failure> {
    let l = load(c)?;
    let (gen, eta) = l.scenario.bsde(&l.tree)?;
    header(report, &l);
    let sol = solve_bsde(&l.tree, &gen, &eta)?;
    let r = sol.residuals(&l.tree, &gen, &eta)?;
    for (name, v) in [
        ("equation", r.equation),
        ("terminal", r.terminal),
        ("initial_n", r.initial_n),
        ("martingale", r.martingale),
        ("orthogonality", r.orthogonality),
    ] {
        let _ = writeln!(report, "residual.{name}: {}", num(v));
    }
    let y0 = sol.y.at(0, 0);
    let _ = writeln!(
        report,
        "Y_0: {}",
        y0.iter().map(|v| num(*v)).collect::<Vec<_>>().join(" ")
    );
    let files = [
        ("Y.csv", process_csv(&l.tree, "y", &sol.y)),
        ("Z.csv", process_csv(&l.tree, "z", &sol.z)),
        ("N.csv", process_csv(&l.tree, "n", &sol.n)),
    ];
    let gate = tolerance_gate(report, "max residual", r.max(), c.tol.unwrap_or(1e-8));
    write_outputs(c, &files, report)?;
    gate
}

fn riccati_report(report: &mut String, seq: &RiccatiSequence) {
    report.push_str("gamma table (t, min singular value, invertible):\n");
    for g in &seq.gamma_reports {
        let _ = writeln!(report, "  {} {} {}", g.t, num(g.min_singular_value), g.invertible);
    }
    report.push_str("P_t:\n");
    for (t, p) in seq.p_matrix.iter().enumerate() {
        if let Some(p) = p {
            let rows: Vec<String> = p
                .row_iter()
                .map(|r| r.iter().map(|v| num(*v)).collect::<Vec<_>>().join(" "))
                .collect();
            let _ = writeln!(report, "  t={t}: [{}]", rows.join("; "));
        }
    }
}

fn riccati_csv(seq: &RiccatiSequence) -> (String, String) {
    let mut gamma = String::from("time,min_singular_value,invertible\n");
    for g in &seq.gamma_reports {
        let _ = writeln!(gamma, "{},{},{}", g.t, num(g.min_singular_value), g.invertible);
    }
    let mut p_csv = String::from("time,row,col,value\n");
    for (t, p) in seq.p_matrix.iter().enumerate() {
        if let Some(p) = p {
            for i in 0..p.nrows() {
                for j in 0..p.ncols() {
                    let _ = writeln!(p_csv, "{t},{i},{j},{}", num(p[(i, j)]));
                }
            }
        }
    }
    (gamma, p_csv)
}

fn solve_linear_cmd(c: &Common, report: &mut String) -> Result<(), Failure> {
    let l = load(c)?;
    let coeffs = l.scenario.linear(&l.tree)?;
    header(report, &l);
    let (sol, seq) = match solve_linear_with(&coeffs, &l.tree, SINGULAR_TOL) {
        Ok(v) => v,
        Err(e) => {
            if let LinearError::NotSolvable { partial, .. } = &e {
                riccati_report(report, partial);
            }
            return Err(e.into());
        }
    };
    riccati_report(report, &seq);
    let _ = writeln!(report, "riccati display gap: {}", num(seq.display_gap));
    write_residuals(report, &sol.residuals);
    let (gamma, p_csv) = riccati_csv(&seq);
    let mut files = solution_files(&l.tree, &sol);
    files.push(("gamma.csv", gamma));
    files.push(("P.csv", p_csv));
    let gate = tolerance_gate(report, "max residual", sol.residuals.max(), c.tol.unwrap_or(1e-8));
    write_outputs(c, &files, report)?;
    gate
}

fn trace_report(report: &mut String, trace: &ContinuationTrace) {
    report.push_str("continuation stages (alpha, delta, iterations, residual):\n");
    for s in &trace.stages {
        let _ = writeln!(
            report,
            "  {} {} {} {}",
            num(s.alpha),
            num(s.delta),
            s.iterations,
            num(s.residual)
        );
    }
    for r in &trace.rejected {
        let _ = writeln!(
            report,
            "  rejected: from {} with delta {}: {}",
            num(r.from_alpha),
            num(r.delta),
            r.reason
        );
    }
    let _ = writeln!(report, "linear solves: {}", trace.linear_solves);
    let _ = writeln!(report, "assumption: {}", trace.assumption.tag());
}

fn trace_csv(trace: &ContinuationTrace) -> String {
    let mut s = String::from("stage,alpha,delta,iterations,residual\n");
    for (k, st) in trace.stages.iter().enumerate() {
        let _ = writeln!(
            s,
            "{k},{},{},{},{}",
            num(st.alpha),
            num(st.delta),
            st.iterations,
            num(st.residual)
        );
    }
    s
}

fn solve_nonlinear_cmd(c: &Common, report: &mut String) -> Result<(), Failure> {
    let l = load(c)?;
    let model = l.scenario.nonlinear()?;
    let cfg = l.scenario.solver.continuation()?;
    header(report, &l);
    let (sol, trace) = match solve_continuation(&model, &l.tree, &cfg) {
        Ok(v) => v,
        Err(e) => {
            if let NonlinearError::ContinuationFailed { trace, .. } = &e {
                trace_report(report, trace);
            }
            return Err(e.into());
        }
    };
    trace_report(report, &trace);
    write_residuals(report, &sol.residuals);
    let mut files = solution_files(&l.tree, &sol);
    files.push(("trace.csv", trace_csv(&trace)));
    let gate = tolerance_gate(report, "max residual", sol.residuals.max(), c.tol.unwrap_or(1e-8));
    write_outputs(c, &files, report)?;
    gate
}

fn check_monotone_cmd(c: &Common, report: &mut String) -> Result<(), Failure> {
    let l = load(c)?;
    let model = l.scenario.nonlinear()?;
    let solver = &l.scenario.solver;
    header(report, &l);
    let r = check_monotone(&model, &l.tree, solver.monotone_samples, solver.seed, &solver.monotone());
    let _ = writeln!(report, "samples: {}", r.samples);
    let _ = writeln!(report, "seed: {}", solver.seed);
    let _ = writeln!(report, "worst slack: {}", num(r.worst_slack));
    let _ = writeln!(
        report,
        "coefficient slack range: {} {}",
        num(r.coefficient_slack_range.0),
        num(r.coefficient_slack_range.1)
    );
    let _ = writeln!(report, "violations: {}", r.violations);
    if let Some(w) = &r.worst {
        let _ = writeln!(
            report,
            "tightest sample: {:?} at t={} node {}",
            w.condition,
            w.t,
            l.tree.path_label(w.t, w.node)
        );
    }
    let verdict = if r.holds() { "holds" } else { "violated" };
    let _ = writeln!(report, "monotone conditions: {verdict}");
    write_outputs(c, &[], report)?;
    if r.holds() {
        Ok(())
    } else {
        Err(Failure::invalid(format!(
            "monotone conditions violated in {} samples",
            r.violations
        )))
    }
}

fn compare_oracle_cmd(c: &Common, report: &mut String) -> Result<(), Failure> {
    let l = load(c)?;
    let newton = l.scenario.solver.newton();
    let oracle_err = |e: crate::oracle::OracleError| Failure::solver(e.to_string());
    let (structured, oracle, steps) = match &l.scenario.payload {
        Payload::Linear(_) => {
            let coeffs = l.scenario.linear(&l.tree)?;
            header(report, &l);
            let (sol, _) = solve_linear_with(&coeffs, &l.tree, SINGULAR_TOL)?;
            let (o, trace) = solve_oracle(&coeffs, &l.tree, None, &newton).map_err(oracle_err)?;
            (sol, o, trace.steps.len())
        }
        Payload::Nonlinear(_) => {
            let model = l.scenario.nonlinear()?;
            let cfg = l.scenario.solver.continuation()?;
            header(report, &l);
            let (sol, _) = solve_continuation(&model, &l.tree, &cfg)?;
            let (o, trace) = solve_oracle(&model, &l.tree, None, &newton).map_err(oracle_err)?;
            (sol, o, trace.steps.len())
        }
        Payload::Bsde(_) => {
            return Err(Failure::invalid(
                "compare-oracle needs a linear or nonlinear scenario",
            ))
        }
    };
    let _ = writeln!(report, "newton steps: {steps}");
    for (name, a, b) in [
        ("X", &structured.x, &oracle.x),
        ("Y", &structured.y, &oracle.y),
        ("Z", &structured.z, &oracle.z),
        ("N", &structured.n, &oracle.n),
    ] {
        let _ = writeln!(report, "sup difference {name}: {}", num(a.sup_distance(b)));
    }
    let files = [
        ("oracle_X.csv", process_csv(&l.tree, "x", &oracle.x)),
        ("oracle_Y.csv", process_csv(&l.tree, "y", &oracle.y)),
        ("oracle_Z.csv", process_csv(&l.tree, "z", &oracle.z)),
        ("oracle_N.csv", process_csv(&l.tree, "n", &oracle.n)),
    ];
    let gate = tolerance_gate(
        report,
        "sup difference",
        structured.sup_distance(&oracle),
        c.tol.unwrap_or(1e-6),
    );
    write_outputs(c, &files, report)?;
    gate
}
