//! Command-line driver: `analyze` and `synthesize` subcommands over JSON
//! task files, with optional CSV iteration traces, JSON result reports, and
//! SVG renderings.
//!
//! Exit codes: 0 converged, 2 iteration cap reached, 1 input or numerical
//! error. Output files never carry non-finite numbers; any such value is
//! written as the literal `"nan"` and the run exits with 1.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::analysis::{solve_deformed_position, AnalysisProblem};
use crate::model::{Formulation, Mechanism, SolverSettings, SynthesisTask};
use crate::render::{render_svg, RenderOptions, Rendering};
use crate::solver::{IterationRecord, SolverStatus};
use crate::synthesis::{evaluate_path_errors, synthesize, PathErrorReport, SynthesisResult};
use crate::taskfile::{self, Task};
use crate::{Error, Result};

const EXIT_OK: i32 = 0;
const EXIT_ERROR: i32 = 1;
const EXIT_MAX_ITERATIONS: i32 = 2;

#[derive(Parser)]
#[command(
    name = "linkforge",
    version,
    about = "Deformation-energy analysis and synthesis of linkage mechanisms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the deformed position of a mechanism under its distance
    /// requirements.
    Analyze(RunArgs),
    /// Optimize the design coordinates so the coupler reaches every
    /// precision point, then report the path errors.
    Synthesize(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Task file (JSON).
    task: PathBuf,
    /// Override every requirement's formulation [default: euclidean]
    #[arg(long, value_parser = parse_formulation, value_name = "euclidean|squared")]
    formulation: Option<Formulation>,
    /// Convergence tolerance (objective change and constraint violation).
    #[arg(long, value_name = "X")]
    tol: Option<f64>,
    /// Iteration cap.
    #[arg(long = "max-iters", value_name = "N")]
    max_iters: Option<usize>,
    /// Write the iteration history as CSV.
    #[arg(long, value_name = "PATH.csv")]
    trace: Option<PathBuf>,
    /// Render the result as SVG.
    #[arg(long, value_name = "PATH.svg")]
    svg: Option<PathBuf>,
    /// Write the result report as JSON.
    #[arg(long, value_name = "PATH.json")]
    out: Option<PathBuf>,
    /// Echo the parsed task as canonical JSON and exit without solving.
    #[arg(long)]
    seed_report: bool,
}

fn parse_formulation(s: &str) -> std::result::Result<Formulation, String> {
    match s {
        "euclidean" => Ok(Formulation::Euclidean),
        "squared" => Ok(Formulation::Squared),
        other => Err(format!("unknown formulation {other:?} (euclidean|squared)")),
    }
}

/// Runs the CLI on the given argument list and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let (args, want_synthesis) = match &cli.command {
        Command::Analyze(args) => (args, false),
        Command::Synthesize(args) => (args, true),
    };
    match execute(args, want_synthesis) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

fn load_task(path: &Path) -> Result<taskfile::TaskFile> {
    taskfile::load(path).map_err(|e| match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            Error::TaskFile(format!("file not found: {}", path.display()))
        }
        other => other,
    })
}

fn execute(args: &RunArgs, want_synthesis: bool) -> Result<i32> {
    let file = load_task(&args.task)?;
    let task = file.expand()?;
    if args.seed_report {
        println!("{}", file.to_json());
        return Ok(EXIT_OK);
    }

    let mut settings = file.settings();
    if let Some(tol) = args.tol {
        settings.energy_tol = tol;
        settings.constraint_tol = tol;
    }
    if let Some(n) = args.max_iters {
        settings.max_iterations = n;
    }

    match (task, want_synthesis) {
        (Task::Analysis(problem), false) => run_analysis(args, &problem, &settings),
        (Task::Synthesis(task), true) => run_synthesis(args, &task, &settings),
        (Task::Analysis(_), true) => Err(Error::TaskFile(format!(
            "{} describes an analysis (no coupler or precision points); \
             use the analyze subcommand",
            args.task.display()
        ))),
        (Task::Synthesis(_), false) => Err(Error::TaskFile(format!(
            "{} describes a synthesis (coupler and precision points); \
             use the synthesize subcommand",
            args.task.display()
        ))),
    }
}

fn run_analysis(args: &RunArgs, problem: &AnalysisProblem, settings: &SolverSettings) -> Result<i32> {
    let result = solve_deformed_position(problem, args.formulation, settings)?;
    let mut finite = true;

    if let Some(path) = &args.trace {
        std::fs::write(path, trace_csv(&result.trace, &mut finite))?;
    }
    if let Some(path) = &args.svg {
        let svg = render_svg(
            &Rendering::Analysis {
                mechanism: &problem.mechanism,
                result: &result,
                requirements: &problem.distance_requirements,
            },
            &RenderOptions::default(),
        )?;
        std::fs::write(path, svg)?;
    }
    if let Some(path) = &args.out {
        let report = json!({
            "status": status_name(result.status),
            "iterations": result.trace.len().saturating_sub(1),
            "energy": num(result.energy, &mut finite),
            "nodes": nodes_json(&problem.mechanism, &result.position, &mut finite),
            "rest_lengths": lengths_json(&problem.mechanism, None, &mut finite),
            "constraint_errors": result.constraint_errors.iter()
                .map(|&v| num(v, &mut finite)).collect::<Vec<_>>(),
            "multipliers": result.multipliers.iter()
                .map(|&v| num(v, &mut finite)).collect::<Vec<_>>(),
        });
        std::fs::write(path, pretty(&report))?;
    }

    let max_c = result
        .constraint_errors
        .iter()
        .fold(0.0_f64, |m, &v| m.max(v));
    println!(
        "analysis {}: {} iterations, energy {}, max constraint error {}",
        status_name(result.status),
        result.trace.len().saturating_sub(1),
        sig(result.energy, &mut finite),
        sig(max_c, &mut finite),
    );
    finish(result.status, finite)
}

fn run_synthesis(args: &RunArgs, task: &SynthesisTask, settings: &SolverSettings) -> Result<i32> {
    // TEMP experiment hook, removed after policy calibration.
    let result = if std::env::var_os("LINKFORGE_BFGS").is_some() {
        crate::synthesis::synthesize_with_scheme(
            task,
            args.formulation,
            settings,
            crate::synthesis::DerivativeScheme::Bfgs,
        )?
    } else {
        synthesize(task, args.formulation, settings)?
    };
    let errors = evaluate_path_errors(task, &result.design, args.formulation, settings)?;
    let mut finite = true;

    if let Some(path) = &args.trace {
        std::fs::write(path, trace_csv(&result.objective_trace, &mut finite))?;
    }
    if let Some(path) = &args.svg {
        let svg = render_svg(
            &Rendering::Synthesis { task, result: &result },
            &RenderOptions::default(),
        )?;
        std::fs::write(path, svg)?;
    }
    if let Some(path) = &args.out {
        std::fs::write(path, pretty(&synthesis_report(task, &result, &errors, &mut finite)))?;
    }

    let objective = result
        .objective_trace
        .last()
        .map(|r| r.objective)
        .unwrap_or(f64::NAN);
    println!(
        "synthesis {}: {} iterations, objective {}, mean path error {} (sd {})",
        status_name(result.status),
        result.objective_trace.len().saturating_sub(1),
        sig(objective, &mut finite),
        sig(errors.mean, &mut finite),
        sig(errors.std_dev, &mut finite),
    );
    finish(result.status, finite)
}

fn synthesis_report(
    task: &SynthesisTask,
    result: &SynthesisResult,
    errors: &PathErrorReport,
    finite: &mut bool,
) -> Value {
    let achieved = |a: &str, b: &str| -> f64 {
        let of = |id: &str| {
            let k = task
                .mechanism
                .nodes
                .iter()
                .position(|n| n.id == id)
                .expect("constraint endpoints are validated");
            [result.design[2 * k], result.design[2 * k + 1]]
        };
        let (pa, pb) = (of(a), of(b));
        (pb[0] - pa[0]).hypot(pb[1] - pa[1])
    };
    json!({
        "status": status_name(result.status),
        "iterations": result.objective_trace.len().saturating_sub(1),
        "objective": num(
            result.objective_trace.last().map(|r| r.objective).unwrap_or(f64::NAN),
            finite,
        ),
        "nodes": nodes_json(&task.mechanism, &result.design, finite),
        "rest_lengths": lengths_json(&task.mechanism, Some(&result.rest_lengths), finite),
        "length_constraints": task.length_constraints.iter().map(|c| json!({
            "a": c.a,
            "b": c.b,
            "target": num(c.target, finite),
            "achieved": num(achieved(&c.a, &c.b), finite),
        })).collect::<Vec<_>>(),
        "path_errors": {
            "per_point": errors.distances.iter()
                .map(|&v| num(v, finite)).collect::<Vec<_>>(),
            "mean": num(errors.mean, finite),
            "std_dev": num(errors.std_dev, finite),
        },
    })
}

fn nodes_json(mechanism: &Mechanism, coords: &[f64], finite: &mut bool) -> Value {
    mechanism
        .nodes
        .iter()
        .enumerate()
        .map(|(k, n)| {
            json!({
                "id": n.id,
                "x": num(coords[2 * k], finite),
                "y": num(coords[2 * k + 1], finite),
            })
        })
        .collect::<Vec<_>>()
        .into()
}

fn lengths_json(mechanism: &Mechanism, solved: Option<&[f64]>, finite: &mut bool) -> Value {
    mechanism
        .links
        .iter()
        .enumerate()
        .map(|(k, l)| {
            let value = solved.map(|s| s[k]).unwrap_or(l.rest_length);
            json!({"i": l.i, "j": l.j, "rest_length": num(value, finite)})
        })
        .collect::<Vec<_>>()
        .into()
}

fn finish(status: SolverStatus, finite: bool) -> Result<i32> {
    if !finite {
        eprintln!("error: result contains non-finite numbers");
        return Ok(EXIT_ERROR);
    }
    Ok(match status {
        SolverStatus::Converged => EXIT_OK,
        SolverStatus::MaxIterations => EXIT_MAX_ITERATIONS,
        SolverStatus::NumericalFailure => {
            eprintln!("error: solver reported a numerical failure");
            EXIT_ERROR
        }
    })
}

fn status_name(status: SolverStatus) -> &'static str {
    match status {
        SolverStatus::Converged => "converged",
        SolverStatus::MaxIterations => "max_iterations",
        SolverStatus::NumericalFailure => "numerical_failure",
    }
}

/// 15 significant digits; non-finite values become `nan` and clear the flag.
fn sig(v: f64, finite: &mut bool) -> String {
    if !v.is_finite() {
        *finite = false;
        return "nan".into();
    }
    format!("{v:.14e}")
}

/// Base-10 log at 2 decimals; empty at exactly 0, matching the table
/// convention of leaving the log column blank there.
fn log_cell(v: f64, finite: &mut bool) -> String {
    if !v.is_finite() {
        *finite = false;
        return "nan".into();
    }
    if v == 0.0 {
        String::new()
    } else {
        format!("{:.2}", v.log10())
    }
}

fn num(v: f64, finite: &mut bool) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        *finite = false;
        json!("nan")
    }
}

fn pretty(value: &Value) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("reports always serialize");
    text.push('\n');
    text
}

fn trace_csv(trace: &[IterationRecord], finite: &mut bool) -> String {
    let mut out =
        String::from("iter,objective,log10_objective,constraint_error,log10_error,step_norm\n");
    for r in trace {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.index,
            sig(r.objective, finite),
            log_cell(r.objective, finite),
            sig(r.constraint_error, finite),
            log_cell(r.constraint_error, finite),
            sig(r.step_norm, finite),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(index: usize, objective: f64, constraint_error: f64, step_norm: f64) -> IterationRecord {
        IterationRecord {
            index,
            objective,
            constraint_error,
            step_norm,
            multipliers: vec![],
        }
    }

    #[test]
    fn trace_csv_layout() {
        let mut finite = true;
        let csv = trace_csv(
            &[record(0, 172.86, 8.75, 0.0), record(1, 0.0, 1e-12, 0.5)],
            &mut finite,
        );
        assert!(finite);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iter,objective,log10_objective,constraint_error,log10_error,step_norm"
        );
        let row0: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row0[0], "0");
        assert_eq!(row0[1].parse::<f64>().unwrap(), 172.86);
        assert_eq!(row0[2], "2.24");
        assert_eq!(row0[4], "0.94");
        let row1: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row1[2], "", "zero objective leaves the log cell empty");
        assert_eq!(row1[4], "-12.00");
    }

    #[test]
    fn non_finite_values_become_nan_and_flag() {
        let mut finite = true;
        let csv = trace_csv(&[record(0, f64::INFINITY, 1.0, 0.0)], &mut finite);
        assert!(!finite);
        assert!(csv.contains("nan"));

        let mut finite = true;
        assert_eq!(num(f64::NAN, &mut finite), json!("nan"));
        assert!(!finite);
        let mut finite = true;
        assert_eq!(num(0.5, &mut finite), json!(0.5));
        assert!(finite);
    }

    #[test]
    fn fifteen_significant_digits() {
        let mut finite = true;
        let s = sig(8.751234567890123, &mut finite);
        assert_eq!(s, "8.75123456789012e0");
        assert!((s.parse::<f64>().unwrap() - 8.751234567890123).abs() < 1e-14);
    }

    #[test]
    fn formulation_parser() {
        assert_eq!(parse_formulation("euclidean"), Ok(Formulation::Euclidean));
        assert_eq!(parse_formulation("squared"), Ok(Formulation::Squared));
        assert!(parse_formulation("cubic").is_err());
    }
}
