//! The `sip` command line: `run`, `verify` and `list`.
//!
//! Exit codes: 0 on success, 1 when a solver or check fails, 2 on bad
//! configuration or input.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::diagnostics::{estimate_order, feasibility_measure, stationarity_residual, OrderEstimate};
use crate::driver::{run, Algorithm, DiscretizationState, DriverOptions, FinalStatus, RunResult, TerminationMode};
use crate::lower_level::index_bounding_box;
use crate::model::{halton_points, validate_problem, verify_derivatives, Interval, SipProblem};
use crate::problems;
use crate::spec_loader::{load_problem_file, parse_spec, SpecError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "sip",
    version,
    about = "Adaptive discretization solvers for semi-infinite programs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve a problem and write the iterate history.
    Run(RunArgs),
    /// Check a problem definition, its derivatives and its known solution.
    Verify(SourceArgs),
    /// List the built-in problems and any problem files in a directory.
    List {
        /// Directory scanned for *.toml problem files.
        #[arg(long)]
        spec_dir: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct SourceArgs {
    /// Built-in problem name.
    #[arg(long)]
    problem: Option<String>,
    /// Problem file (TOML).
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AlgArg {
    Bf,
    Qcad,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Known,
    Practical,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, value_enum, default_value = "qcad")]
    alg: AlgArg,
    /// Termination: distance to the known solution, or feasibility plus
    /// stationarity.
    #[arg(long, value_enum, default_value = "practical")]
    mode: ModeArg,
    #[arg(long, default_value_t = 1e-4)]
    tol_dist: f64,
    #[arg(long, default_value_t = 1e-6)]
    tol_feas: f64,
    #[arg(long, default_value_t = 1e-6)]
    tol_stat: f64,
    #[arg(long, default_value_t = 50)]
    max_iter: usize,
    /// Known-solution termination at 1e-4 (overrides --mode and --tol-dist).
    #[arg(long)]
    paper_mode: bool,
    /// Start point as comma-separated values; defaults to the problem's
    /// initial point or the center of the x box.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
    /// Grid nodes per index dimension for the lower-level multistart.
    #[arg(long, default_value_t = 64)]
    grid_per_dim: usize,
    /// Local lower-level solves per constraint.
    #[arg(long, default_value_t = 8)]
    n_starts: usize,
    /// KKT tolerance of the master and lower-level NLP solves.
    #[arg(long, default_value_t = 1e-9)]
    nlp_tol: f64,
    /// Directory for the CSV histories and the JSON summary.
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
    /// Fill the wall_time_ms column (makes the CSV run-dependent).
    #[arg(long)]
    timing: bool,
    /// Do not print the iterate table.
    #[arg(long)]
    quiet: bool,
}

/// Runs the CLI with explicit arguments (including the program name) and
/// returns the exit code.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{e}")
            } else {
                write!(out, "{e}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(&a, out),
        Command::Verify(s) => cmd_verify(&s, out),
        Command::List { spec_dir } => cmd_list(spec_dir.as_deref(), out, err),
    };
    match result {
        Ok(code) => code,
        Err(CliError::Config(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_CONFIG
        }
        Err(CliError::Io(e)) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_FAILURE
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(std::io::Error::other(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(std::io::Error::other(e))
    }
}

fn load_source(s: &SourceArgs) -> Result<SipProblem, CliError> {
    if let Some(name) = &s.problem {
        return problems::by_name(name).ok_or_else(|| {
            CliError::Config(format!(
                "unknown problem '{name}'; available: {}",
                problems::REGISTRY_NAMES.join(", ")
            ))
        });
    }
    let path = s.spec.as_ref().expect("clap enforces one source");
    load_problem_file(path).map_err(|e| match e {
        SpecError::Io { .. } => CliError::Config(e.to_string()),
        e => CliError::Config(format!("{}: {e}", path.display())),
    })
}

fn fmt_num(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

/// Iterate history as CSV. `wall_time_ms` stays empty unless `timing`.
pub fn write_history_csv<W: Write>(run: &RunResult, n: usize, timing: bool, w: W) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["k".to_string()];
    header.extend((1..=n).map(|j| format!("x_{j}")));
    header.extend(
        [
            "objective",
            "feasibility",
            "stationarity_residual",
            "dist_to_known",
            "step_norm",
            "beta_norm",
            "alpha_max",
            "n_master_constraints",
            "wall_time_ms",
        ]
        .map(String::from),
    );
    wtr.write_record(&header)?;
    for r in &run.history {
        let mut row = vec![r.k.to_string()];
        row.extend(r.x.iter().map(|&v| fmt_num(v)));
        row.push(fmt_num(r.objective));
        row.push(fmt_num(r.feasibility));
        row.push(fmt_num(r.stationarity_residual));
        row.push(fmt_opt(r.dist_to_known));
        row.push(fmt_opt(r.step_norm));
        row.push(fmt_opt(r.beta_norm));
        row.push(fmt_opt(r.alpha_max));
        row.push(r.n_master_constraints.to_string());
        row.push(if timing {
            fmt_num(r.wall_time * 1e3)
        } else {
            String::new()
        });
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct RunSummary {
    algorithm: Algorithm,
    final_status: FinalStatus,
    iterations: usize,
    final_x: Vec<f64>,
    final_objective: f64,
    final_feasibility: f64,
    final_stationarity_residual: f64,
    final_dist_to_known: Option<f64>,
    estimated_order: Option<OrderEstimate>,
    warnings: Vec<String>,
    wall_time_ms: f64,
    csv: String,
}

#[derive(Serialize)]
struct Summary {
    problem: String,
    n: usize,
    m: usize,
    termination: TerminationMode,
    max_iter: usize,
    x0: Vec<f64>,
    runs: Vec<RunSummary>,
    /// `bf iterations - qcad iterations` when both ran.
    iteration_savings: Option<i64>,
}

fn summarize(run: &RunResult, csv: &Path) -> RunSummary {
    let last = run.last();
    RunSummary {
        algorithm: run.algorithm,
        final_status: run.final_status,
        iterations: run.iterations(),
        final_x: last.x.clone(),
        final_objective: last.objective,
        final_feasibility: last.feasibility,
        final_stationarity_residual: last.stationarity_residual,
        final_dist_to_known: last.dist_to_known,
        estimated_order: run.errors().and_then(|e| estimate_order(&e).ok()),
        warnings: run.warnings.clone(),
        wall_time_ms: last.wall_time * 1e3,
        csv: csv.display().to_string(),
    }
}

fn print_table(out: &mut dyn Write, p: &SipProblem, run: &RunResult) -> std::io::Result<()> {
    writeln!(out, "{} / {}", p.name, run.algorithm.label())?;
    writeln!(
        out,
        "{:>4}  {:>12}  {:>10}  {:>10}  {:>10}  {:>6}",
        "k", "objective", "feas", "stat", "dist", "cons"
    )?;
    for r in &run.history {
        writeln!(
            out,
            "{:>4}  {:>12.6}  {:>10.3e}  {:>10.3e}  {:>10}  {:>6}",
            r.k,
            r.objective,
            r.feasibility,
            r.stationarity_residual,
            r.dist_to_known.map_or("-".into(), |d| format!("{d:.3e}")),
            r.n_master_constraints
        )?;
    }
    writeln!(
        out,
        "status: {:?} after {} iterations, {} warnings",
        run.final_status,
        run.iterations(),
        run.warnings.len()
    )?;
    Ok(())
}

fn cmd_run(a: &RunArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let p = load_source(&a.source)?;
    let termination = if a.paper_mode || a.mode == ModeArg::Known {
        let tol_dist = if a.paper_mode { 1e-4 } else { a.tol_dist };
        if p.known_solution.is_none() {
            return Err(CliError::Config(format!(
                "problem '{}' has no known solution; use --mode practical",
                p.name
            )));
        }
        TerminationMode::Known { tol_dist }
    } else {
        TerminationMode::Practical {
            tol_feas: a.tol_feas,
            tol_stat: a.tol_stat,
        }
    };
    for (name, v) in [
        ("--tol-dist", a.tol_dist),
        ("--tol-feas", a.tol_feas),
        ("--tol-stat", a.tol_stat),
        ("--nlp-tol", a.nlp_tol),
    ] {
        if !(v > 0.0) {
            return Err(CliError::Config(format!("{name} must be positive")));
        }
    }
    if a.grid_per_dim < 2 || a.n_starts == 0 {
        return Err(CliError::Config(
            "--grid-per-dim must be >= 2 and --n-starts >= 1".into(),
        ));
    }
    let x0 = match &a.x0 {
        Some(x) if x.len() != p.n => {
            return Err(CliError::Config(format!(
                "--x0 has {} entries, expected {}",
                x.len(),
                p.n
            )))
        }
        Some(x) => x.clone(),
        None => p
            .initial_point
            .clone()
            .unwrap_or_else(|| p.master_bounds().iter().map(Interval::mid).collect()),
    };
    let mut opts = DriverOptions {
        termination,
        max_iter: a.max_iter,
        ..Default::default()
    };
    opts.lower_level.grid_per_dim = a.grid_per_dim;
    opts.lower_level.n_starts = a.n_starts;
    opts.nlp.tol_kkt = a.nlp_tol;
    opts.nlp.tol_feas = a.nlp_tol;
    opts.nlp.tol_comp = a.nlp_tol;

    let algs = match a.alg {
        AlgArg::Bf => vec![Algorithm::BlankenshipFalk],
        AlgArg::Qcad => vec![Algorithm::Qcad],
        AlgArg::Both => vec![Algorithm::Qcad, Algorithm::BlankenshipFalk],
    };
    fs::create_dir_all(&a.out_dir)?;
    let mut summaries = Vec::new();
    let mut code = EXIT_OK;
    let mut iters = Vec::new();
    for alg in algs {
        let result =
            run(alg, &p, &x0, DiscretizationState::empty(&p), &opts).map_err(|e| CliError::Config(e.to_string()))?;
        let csv_path = a.out_dir.join(format!("{}_{}.csv", p.name, alg.label()));
        write_history_csv(&result, p.n, a.timing, fs::File::create(&csv_path)?)?;
        if !a.quiet {
            print_table(out, &p, &result)?;
            writeln!(out, "history: {}", csv_path.display())?;
        }
        if result.final_status == FinalStatus::SubsolverFailure {
            code = EXIT_FAILURE;
        }
        iters.push((alg, result.iterations() as i64));
        summaries.push(summarize(&result, &csv_path));
    }
    let iteration_savings = match iters.as_slice() {
        [(Algorithm::Qcad, q), (Algorithm::BlankenshipFalk, b)] => Some(b - q),
        _ => None,
    };
    if let Some(s) = iteration_savings {
        writeln!(out, "qcad needed {s} fewer iterations than bf")?;
    }
    let summary = Summary {
        problem: p.name.clone(),
        n: p.n,
        m: p.m,
        termination,
        max_iter: a.max_iter,
        x0,
        runs: summaries,
        iteration_savings,
    };
    let summary_path = a.out_dir.join(format!("{}_summary.json", p.name));
    fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")?;
    if !a.quiet {
        writeln!(out, "summary: {}", summary_path.display())?;
    }
    Ok(code)
}

/// Probe points for derivative checks: a Halton set in the x box (clipped
/// to +-10) joined with one in the index-set bounding box.
type PointSets = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn probe_points(p: &SipProblem, count: usize) -> Result<PointSets, CliError> {
    let xb: Vec<Interval> = p
        .master_bounds()
        .iter()
        .map(|b| Interval::new(b.lo.max(-10.0), b.hi.min(10.0)))
        .collect();
    let yb = index_bounding_box(p).map_err(|e| CliError::Config(e.to_string()))?;
    Ok((halton_points(&xb, count), halton_points(&yb, count)))
}

fn cmd_verify(s: &SourceArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    if let Some(path) = &s.spec {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        parse_spec(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    }
    let p = load_source(s)?;
    let mut ok = true;
    writeln!(
        out,
        "problem {} (n={}, m={}, p={}, q={})",
        p.name,
        p.n,
        p.m,
        p.p(),
        p.q()
    )?;

    let report = validate_problem(&p);
    if report.is_valid() {
        writeln!(out, "validation: ok")?;
    } else {
        ok = false;
        for issue in &report.issues {
            writeln!(out, "validation: {issue}")?;
        }
    }

    let (xs, ys) = probe_points(&p, 100)?;
    let xys: Vec<Vec<f64>> = xs.iter().zip(&ys).map(|(x, y)| p.joint_point(x, y)).collect();
    let mut worst = 0.0f64;
    let mut check = |label: String,
                     f: &dyn crate::model::ScalarField,
                     pts: &[Vec<f64>],
                     out: &mut dyn Write|
     -> std::io::Result<bool> {
        match verify_derivatives(f, pts, 1e-5) {
            Ok(e) => {
                worst = worst.max(e);
                if e > 1e-5 {
                    writeln!(out, "derivatives: {label} relative error {e:.3e}")?;
                    return Ok(false);
                }
                Ok(true)
            }
            Err(e) => {
                writeln!(out, "derivatives: {label}: {e}")?;
                Ok(false)
            }
        }
    };
    ok &= check("objective".into(), p.objective.as_ref(), &xs, out)?;
    for (i, g) in p.si_constraints.iter().enumerate() {
        ok &= check(format!("si_constraints[{i}]"), g.as_ref(), &xys, out)?;
    }
    for (l, v) in p.index_constraints.iter().enumerate() {
        ok &= check(format!("index_constraints[{l}]"), v.as_ref(), &ys, out)?;
    }
    for (j, c) in p.finite_constraints.iter().enumerate() {
        ok &= check(format!("finite_constraints[{j}]"), c.as_ref(), &xs, out)?;
    }
    writeln!(out, "derivatives: max relative error {worst:.3e}")?;

    if let Some(k) = &p.known_solution {
        match (
            feasibility_measure(&p, &k.point),
            stationarity_residual(&p, &k.point, 1e-6),
        ) {
            (Ok(feas), Ok(stat)) => {
                writeln!(
                    out,
                    "known solution: feasibility {feas:.3e}, stationarity residual {:.3e}",
                    stat.residual
                )?;
                if feas > 1e-6 || stat.residual > 1e-6 {
                    ok = false;
                }
            }
            (Err(e), _) | (_, Err(e)) => {
                ok = false;
                writeln!(out, "known solution: lower-level failure: {e}")?;
            }
        }
    } else {
        writeln!(out, "known solution: none")?;
    }
    writeln!(out, "{}", if ok { "verify: ok" } else { "verify: FAILED" })?;
    Ok(if ok { EXIT_OK } else { EXIT_FAILURE })
}

fn cmd_list(spec_dir: Option<&Path>, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, CliError> {
    for (name, make) in problems::registry() {
        let p = make();
        writeln!(out, "{name} (n={}, m={})", p.n, p.m)?;
    }
    let Some(dir) = spec_dir else {
        return Ok(EXIT_OK);
    };
    let entries = fs::read_dir(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    files.sort();
    for f in files {
        match load_problem_file(&f) {
            Ok(p) => writeln!(out, "{} (n={}, m={}) [{}]", p.name, p.n, p.m, f.display())?,
            Err(e) => writeln!(err, "skipping {e}")?,
        }
    }
    Ok(EXIT_OK)
}
