use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use mpct::config::{load_problem_file, FileMode, LoadedProblem};
use mpct::oracle::{build_slack_qp, solve_dense_qp, OracleError};
use mpct::problem::assemble_ingredients;
use mpct::sim::{
    run_closed_loop, sample_initial_states, Formulation, RolloutError, Scenario, Summary,
};
use mpct::{MpctSolver, ProblemData, ReferencePair, SolveStatus};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "mpct",
    version,
    about = "Soft-constrained MPC for tracking via ADMM"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one instance and print the report.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Current state, comma separated. Defaults to the file's x0, then zeros.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Option<Vec<f64>>,
    },
    /// Closed-loop simulation from one initial state.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Option<Vec<f64>>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Iteration and timing statistics over sampled initial states.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Formulations to run; defaults to soft, hard and oracle.
        #[arg(long, value_enum, value_delimiter = ',')]
        mode: Vec<Mode>,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Check a problem file and print its dimensions.
    Validate {
        #[arg(long)]
        problem: PathBuf,
    },
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    problem: PathBuf,
    /// Directory for output files. Without it the JSON result goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Format::Csv, Format::Json])]
    format: Vec<Format>,
    /// Omit wall-clock times so repeated runs produce identical output.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Soft,
    Hard,
    Oracle,
}

impl Mode {
    fn as_str(self) -> &'static str {
        match self {
            Mode::Soft => "soft",
            Mode::Hard => "hard",
            Mode::Oracle => "oracle",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

/// Outcome of a command that ran to completion.
enum Outcome {
    Success,
    Unconverged,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Solve { common, mode, x0 } => cmd_solve(&common, mode, x0),
        Command::Simulate {
            common,
            mode,
            x0,
            steps,
        } => cmd_simulate(&common, mode, x0, steps),
        Command::Bench {
            common,
            mode,
            count,
            seed,
        } => cmd_bench(&common, mode, count, seed),
        Command::Validate { problem } => cmd_validate(&problem),
    });
    match result {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::Unconverged) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("MPCT_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| anyhow!("MPCT_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring worker pool")
}

fn load(path: &Path) -> anyhow::Result<LoadedProblem> {
    load_problem_file(path).map_err(|e| anyhow!("{}: {e}", path.display()))
}

fn file_mode(loaded: &LoadedProblem) -> Mode {
    match loaded.mode {
        FileMode::Soft => Mode::Soft,
        FileMode::Hard => Mode::Hard,
    }
}

fn formulated(loaded: &LoadedProblem, mode: Mode) -> anyhow::Result<ProblemData> {
    Ok(match mode {
        Mode::Soft => loaded.formulated(Formulation::Soft)?,
        Mode::Hard => loaded.formulated(Formulation::Hard)?,
        Mode::Oracle => loaded.problem.clone(),
    })
}

fn initial_state(loaded: &LoadedProblem, x0: Option<Vec<f64>>) -> anyhow::Result<DVector<f64>> {
    let nx = loaded.problem.nx();
    let x = match x0 {
        Some(v) => DVector::from_vec(v),
        None => loaded.x0.clone().unwrap_or_else(|| DVector::zeros(nx)),
    };
    if x.len() != nx {
        bail!("initial state has length {}, expected {nx}", x.len());
    }
    Ok(x)
}

fn write_output(common: &Common, name: &str, contents: &str) -> anyhow::Result<()> {
    let Some(dir) = &common.out else {
        return Ok(());
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn to_json<T: Serialize>(value: &T) -> anyhow::Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// JSON result to `--out` when given, stdout otherwise.
fn emit_json(common: &Common, name: &str, json: &str) -> anyhow::Result<()> {
    if common.out.is_some() {
        if common.format.contains(&Format::Json) {
            write_output(common, name, json)?;
        }
    } else {
        print!("{json}");
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum CaseStatus {
    Converged,
    MaxIterations,
    Failed,
}

impl CaseStatus {
    fn as_str(self) -> &'static str {
        match self {
            CaseStatus::Converged => "converged",
            CaseStatus::MaxIterations => "max_iterations",
            CaseStatus::Failed => "failed",
        }
    }
}

impl From<SolveStatus> for CaseStatus {
    fn from(s: SolveStatus) -> Self {
        match s {
            SolveStatus::Converged => CaseStatus::Converged,
            SolveStatus::MaxIterations => CaseStatus::MaxIterations,
        }
    }
}

#[derive(Serialize)]
struct SolveOutput {
    status: CaseStatus,
    iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    time_s: Option<f64>,
    u0: Vec<f64>,
    xs: Vec<f64>,
    us: Vec<f64>,
    objective: f64,
}

/// Solves the slack QP densely and reads the MPCT quantities off its minimizer.
fn oracle_solve(
    problem: &ProblemData,
    reference: &ReferencePair,
    x: &DVector<f64>,
) -> Result<(SolveOutput, f64), OracleError> {
    let start = Instant::now();
    let qp = build_slack_qp(problem, reference, x)?;
    let sol = solve_dense_qp(&qp, 1e-9)?;
    let elapsed = start.elapsed().as_secs_f64();
    let ing = assemble_ingredients(problem, reference)?;
    let z = sol.x.rows(0, qp.n_original).into_owned();
    let (nx, nu) = (ing.nx, ing.nu);
    let off = ing.horizon * ing.nb();
    let objective = ing.tracking_cost(&z, reference) + ing.bounds.penalty(&ing.e_mul(&z));
    Ok((
        SolveOutput {
            status: CaseStatus::Converged,
            iterations: sol.iterations,
            time_s: Some(elapsed),
            u0: z.rows(nx, nu).iter().copied().collect(),
            xs: z.rows(off, nx).iter().copied().collect(),
            us: z.rows(off + nx, nu).iter().copied().collect(),
            objective,
        },
        elapsed,
    ))
}

fn cmd_solve(common: &Common, mode: Option<Mode>, x0: Option<Vec<f64>>) -> anyhow::Result<Outcome> {
    let loaded = load(&common.problem)?;
    let mode = mode.unwrap_or_else(|| file_mode(&loaded));
    let problem = formulated(&loaded, mode)?;
    let x = initial_state(&loaded, x0)?;

    let mut out = if mode == Mode::Oracle {
        match oracle_solve(&problem, &loaded.reference, &x) {
            Ok((out, _)) => out,
            Err(OracleError::Problem(e)) => return Err(e.into()),
            Err(e) => {
                eprintln!("oracle: {e}");
                return Ok(Outcome::Unconverged);
            }
        }
    } else {
        let (rep, _) = mpct::solve(&problem, &loaded.reference, &x, None)?;
        SolveOutput {
            status: rep.status.into(),
            iterations: rep.iterations,
            time_s: Some(rep.solve_time.as_secs_f64()),
            u0: rep.u0.iter().copied().collect(),
            xs: rep.xs.iter().copied().collect(),
            us: rep.us.iter().copied().collect(),
            objective: rep.objective,
        }
    };
    if common.no_timing {
        out.time_s = None;
    }
    emit_json(common, "solve.json", &to_json(&out)?)?;
    Ok(match out.status {
        CaseStatus::Converged => Outcome::Success,
        _ => Outcome::Unconverged,
    })
}

#[derive(Serialize)]
struct SimulateSummary {
    mode: Mode,
    #[serde(flatten)]
    trace: mpct::sim::TraceSummary,
}

fn cmd_simulate(
    common: &Common,
    mode: Option<Mode>,
    x0: Option<Vec<f64>>,
    steps: Option<usize>,
) -> anyhow::Result<Outcome> {
    let loaded = load(&common.problem)?;
    let mode = mode.unwrap_or_else(|| file_mode(&loaded));
    if mode == Mode::Oracle {
        bail!("oracle mode is available for solve and bench only");
    }
    let steps = steps
        .or(loaded.steps)
        .ok_or_else(|| anyhow!("--steps is required when the problem file has no steps"))?;
    if steps == 0 {
        bail!("--steps must be at least 1");
    }
    let scn = Scenario {
        problem: formulated(&loaded, mode)?,
        reference: loaded.reference.clone(),
        initial_state: initial_state(&loaded, x0)?,
        steps,
    };
    let formulation = match mode {
        Mode::Hard => Formulation::Hard,
        _ => Formulation::Soft,
    };
    let trace = match run_closed_loop(&scn, formulation) {
        Ok(t) => t,
        Err(RolloutError::AbortedInfeasible { step }) => {
            eprintln!("hard formulation did not converge at step {step}; aborting as infeasible");
            return Ok(Outcome::Unconverged);
        }
        Err(RolloutError::Solver(e)) => return Err(e.into()),
    };
    let with_timing = !common.no_timing;
    if common.out.is_some() && common.format.contains(&Format::Csv) {
        let mut csv = Vec::new();
        trace.write_csv(&mut csv, with_timing)?;
        write_output(common, "trace.csv", std::str::from_utf8(&csv)?)?;
    }
    let summary = SimulateSummary {
        mode,
        trace: trace.summary(with_timing).expect("steps is positive"),
    };
    emit_json(common, "summary.json", &to_json(&summary)?)?;
    Ok(Outcome::Success)
}

struct Case {
    status: CaseStatus,
    iterations: usize,
    time_s: f64,
}

#[derive(Serialize)]
struct BenchRow {
    mode: Mode,
    cases: usize,
    failures: usize,
    not_converged: usize,
    iterations: Option<Summary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    time_s: Option<Summary>,
    /// Untimed-in-stats warm-up solve of case 0.
    #[serde(skip_serializing_if = "Option::is_none")]
    first_solve_time_s: Option<f64>,
}

#[derive(Serialize)]
struct BenchReport {
    problem: String,
    count: usize,
    seed: u64,
    rows: Vec<BenchRow>,
}

fn run_case(
    mode: Mode,
    solver: Option<&MpctSolver>,
    problem: &ProblemData,
    reference: &ReferencePair,
    x: &DVector<f64>,
) -> Case {
    let failed = Case {
        status: CaseStatus::Failed,
        iterations: 0,
        time_s: 0.0,
    };
    match (mode, solver) {
        (Mode::Oracle, _) => match oracle_solve(problem, reference, x) {
            Ok((out, t)) => Case {
                status: out.status,
                iterations: out.iterations,
                time_s: t,
            },
            Err(_) => failed,
        },
        (_, Some(s)) => match s.solve(reference, x, None) {
            Ok((rep, _)) => Case {
                status: rep.status.into(),
                iterations: rep.iterations,
                time_s: rep.solve_time.as_secs_f64(),
            },
            Err(_) => failed,
        },
        (_, None) => failed,
    }
}

fn cmd_bench(
    common: &Common,
    modes: Vec<Mode>,
    count: usize,
    seed: u64,
) -> anyhow::Result<Outcome> {
    if count == 0 {
        bail!("--count must be at least 1");
    }
    let loaded = load(&common.problem)?;
    let bx = loaded
        .initial_box
        .as_ref()
        .ok_or_else(|| anyhow!("the problem file needs an initial_box to sample states"))?;
    let states = sample_initial_states(bx, count, seed)?;
    let modes = if modes.is_empty() {
        vec![Mode::Soft, Mode::Hard, Mode::Oracle]
    } else {
        modes
    };

    let mut rows = Vec::new();
    let mut case_lines = vec!["case,mode,status,iterations,time_s".to_string()];
    for mode in modes {
        let problem = formulated(&loaded, mode)?;
        let solver = match mode {
            Mode::Oracle => None,
            _ => Some(MpctSolver::new(problem.clone())?),
        };
        let warmup = run_case(
            mode,
            solver.as_ref(),
            &problem,
            &loaded.reference,
            &states[0],
        );
        let cases: Vec<Case> = states
            .par_iter()
            .map(|x| run_case(mode, solver.as_ref(), &problem, &loaded.reference, x))
            .collect();

        let ok: Vec<&Case> = cases
            .iter()
            .filter(|c| c.status != CaseStatus::Failed)
            .collect();
        let iterations: Vec<f64> = ok.iter().map(|c| c.iterations as f64).collect();
        let times: Vec<f64> = ok.iter().map(|c| c.time_s).collect();
        rows.push(BenchRow {
            mode,
            cases: count,
            failures: count - ok.len(),
            not_converged: ok
                .iter()
                .filter(|c| c.status == CaseStatus::MaxIterations)
                .count(),
            iterations: Summary::of(&iterations),
            time_s: if common.no_timing {
                None
            } else {
                Summary::of(&times)
            },
            first_solve_time_s: (!common.no_timing).then_some(warmup.time_s),
        });
        for (i, c) in cases.iter().enumerate() {
            let t = if common.no_timing { 0.0 } else { c.time_s };
            case_lines.push(format!(
                "{i},{},{},{},{t:.9}",
                mode.as_str(),
                c.status.as_str(),
                c.iterations
            ));
        }
    }

    if common.out.is_some() && common.format.contains(&Format::Csv) {
        write_output(common, "bench.csv", &bench_csv(&rows, !common.no_timing))?;
        write_output(common, "cases.csv", &(case_lines.join("\n") + "\n"))?;
    }
    let report = BenchReport {
        problem: common.problem.display().to_string(),
        count,
        seed,
        rows,
    };
    emit_json(common, "bench.json", &to_json(&report)?)?;
    Ok(Outcome::Success)
}

fn bench_csv(rows: &[BenchRow], with_timing: bool) -> String {
    let mut header =
        "mode,cases,failures,not_converged,iter_avg,iter_median,iter_max,iter_min".to_string();
    if with_timing {
        header.push_str(",time_avg_s,time_median_s,time_max_s,time_min_s");
    }
    let mut lines = vec![header];
    let stats = |s: Option<Summary>| match s {
        Some(s) => format!("{},{},{},{}", s.avg, s.median, s.max, s.min),
        None => ",,,".to_string(),
    };
    for r in rows {
        let mut line = format!(
            "{},{},{},{},{}",
            r.mode.as_str(),
            r.cases,
            r.failures,
            r.not_converged,
            stats(r.iterations)
        );
        if with_timing {
            line.push(',');
            line.push_str(&stats(r.time_s));
        }
        lines.push(line);
    }
    lines.join("\n") + "\n"
}

#[derive(Serialize)]
struct ValidateReport {
    valid: bool,
    horizon: usize,
    nx: usize,
    nu: usize,
    ny: usize,
    n_z: usize,
    n_v: usize,
    mode: Mode,
}

fn cmd_validate(path: &Path) -> anyhow::Result<Outcome> {
    let loaded = load(path)?;
    let p = &loaded.problem;
    let ing = assemble_ingredients(p, &loaded.reference)?;
    print!(
        "{}",
        to_json(&ValidateReport {
            valid: true,
            horizon: p.horizon,
            nx: p.nx(),
            nu: p.nu(),
            ny: p.ny(),
            n_z: ing.n_z(),
            n_v: ing.n_v(),
            mode: file_mode(&loaded),
        })?
    );
    Ok(Outcome::Success)
}
