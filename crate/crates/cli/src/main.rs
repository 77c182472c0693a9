//! `mmot`: entropic multi-marginal OT, MMOT-DC solves and the benchmark studies.
//!
//! Exit status: 0 on success, 1 on bad input or configuration, 2 when a solver
//! stopped without meeting its tolerance (outputs are still written).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use mmot_core::dc::{dc_solve, dc_solve_warmstart, DcConfig, DcReport, GradientMode};
use mmot_core::experiments::{
    run_gw_quality_study, run_permutation_study, run_v1_comparison, write_gw_study,
    write_permutation_study, ExperimentConfig,
};
use mmot_core::io::{
    fmt_f64, read_marginals, read_partition, read_tensor, write_atomic, write_duals, write_json,
    write_tensor,
};
use mmot_core::sinkhorn::{sinkhorn_mmot, SinkhornConfig, SinkhornResult};
use mmot_core::Error;

#[derive(Parser)]
#[command(name = "mmot", version, about = "Multi-marginal optimal transport solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Entropic MMOT by multi-marginal Sinkhorn.
    Sinkhorn(SolveArgs),
    /// MMOT-DC by difference-of-convex iterations.
    Solve(SolveArgs),
    /// Run a benchmark study.
    Expt(ExptArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Corrected,
    FullTensor,
    V1,
}

impl From<Mode> for GradientMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Corrected => GradientMode::Corrected,
            Mode::FullTensor => GradientMode::FullTensor,
            Mode::V1 => GradientMode::V1,
        }
    }
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum Format {
    #[default]
    Csv,
    Json,
}

/// Solver overrides shared by every subcommand.
#[derive(Args)]
struct Overrides {
    /// JSON config file; flags take precedence over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// First warm-start rung; enables the warm start for `solve`.
    #[arg(long)]
    epsilon0: Option<f64>,
    /// Warm-start growth factor.
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    max_outer: Option<usize>,
    #[arg(long)]
    sinkhorn_tol: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SolveArgs {
    /// Cost tensor file.
    #[arg(long)]
    cost: PathBuf,
    /// Marginals file (JSON list of probability vectors).
    #[arg(long)]
    marginals: PathBuf,
    /// Partition file (JSON list of 0-based axis lists); `solve` only.
    #[arg(long)]
    partition: Option<PathBuf>,
    /// Run the warm-start ladder even without --epsilon0.
    #[arg(long)]
    warm_start: bool,
    /// Format of the convergence report.
    #[arg(long, value_enum, default_value_t)]
    format: Format,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum Study {
    Permutation,
    GwQuality,
    V1Compare,
}

#[derive(Args)]
struct ExptArgs {
    #[arg(value_enum)]
    study: Study,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Worker threads (all cores by default); results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

/// Config file of `sinkhorn` and `solve`. The inner solver's `epsilon` is
/// replaced by the top-level one.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolveFile {
    epsilon: Option<f64>,
    warm_start: Option<bool>,
    output: Option<PathBuf>,
    sinkhorn: Option<SinkhornConfig>,
    dc: Option<DcConfig>,
}

enum Failure {
    Input(String),
    NotConverged(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) => Failure::NotConverged(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::Input(format!("malformed config {}: {e}", path.display())))
}

fn solve_settings(args: &SolveArgs) -> Result<(SolveFile, f64, PathBuf), Failure> {
    let file: SolveFile = match &args.overrides.config {
        Some(p) => read_json(p)?,
        None => SolveFile::default(),
    };
    let epsilon = args
        .overrides
        .epsilon
        .or(file.epsilon)
        .ok_or_else(|| Failure::Input("missing --epsilon (or \"epsilon\" in the config file)".into()))?;
    let output = args
        .overrides
        .output
        .clone()
        .or_else(|| file.output.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    Ok((file, epsilon, output))
}

#[derive(Serialize)]
struct SinkhornSummary {
    epsilon: f64,
    iters: usize,
    residual: f64,
    dual_objective: f64,
    converged: bool,
}

fn cmd_sinkhorn(args: &SolveArgs) -> Outcome {
    let (file, epsilon, out) = solve_settings(args)?;
    let cost = read_tensor(&args.cost)?;
    let mu = read_marginals(&args.marginals)?;
    let mut cfg = file.sinkhorn.unwrap_or_default();
    cfg.epsilon = epsilon;
    if let Some(t) = args.overrides.sinkhorn_tol {
        cfg.tol = t;
    }
    let res: SinkhornResult = sinkhorn_mmot(&cost, &mu, &cfg, None)?;
    write_tensor(&out.join("plan.json"), &res.plan)?;
    write_duals(&out.join("duals.json"), &res.duals)?;
    let summary = SinkhornSummary {
        epsilon,
        iters: res.iters,
        residual: res.residual,
        dual_objective: res.dual_objective,
        converged: res.converged,
    };
    match args.format {
        Format::Json => write_json(&out.join("report.json"), &summary)?,
        Format::Csv => {
            let text = format!(
                "epsilon,iters,residual,dual_objective,converged\n{},{},{},{},{}\n",
                fmt_f64(epsilon),
                res.iters,
                fmt_f64(res.residual),
                fmt_f64(res.dual_objective),
                res.converged
            );
            write_atomic(&out.join("report.csv"), text.as_bytes())?;
        }
    }
    eprintln!(
        "sinkhorn: {} sweeps, residual {:.3e}, converged {}",
        res.iters, res.residual, res.converged
    );
    if res.converged {
        Ok(())
    } else {
        Err(Failure::NotConverged(format!(
            "marginal residual {:.3e} above tol {:.3e} after {} sweeps",
            res.residual, cfg.tol, res.iters
        )))
    }
}

#[derive(Serialize)]
struct DcSummary<'a> {
    epsilon: f64,
    gradient_mode: GradientMode,
    warm_start: bool,
    outer_iters: usize,
    inner_iters: usize,
    converged: bool,
    inner_converged: bool,
    objective_trace: &'a [f64],
    kl_trace: &'a [f64],
    linear_trace: &'a [f64],
    stages: &'a [mmot_core::dc::Stage],
}

fn dc_report_csv(r: &DcReport) -> String {
    let mut text = String::from("step,objective,kl,linear\n");
    for (i, ((o, k), l)) in r
        .objective_trace
        .iter()
        .zip(&r.kl_trace)
        .zip(&r.linear_trace)
        .enumerate()
    {
        text.push_str(&format!("{i},{},{},{}\n", fmt_f64(*o), fmt_f64(*k), fmt_f64(*l)));
    }
    text
}

fn cmd_solve(args: &SolveArgs) -> Outcome {
    let (file, epsilon, out) = solve_settings(args)?;
    let Some(partition_path) = &args.partition else {
        return Err(Failure::Input("solve needs --partition".into()));
    };
    let cost = read_tensor(&args.cost)?;
    let mu = read_marginals(&args.marginals)?;
    let partition = read_partition(partition_path, cost.ndim())?;
    let mut cfg = file.dc.unwrap_or_default();
    cfg.epsilon = epsilon;
    let o = &args.overrides;
    if o.epsilon0.is_some() {
        cfg.epsilon0 = o.epsilon0;
    }
    if let Some(s) = o.step {
        cfg.step = s;
    }
    if let Some(m) = o.max_outer {
        cfg.max_outer = m;
    }
    if let Some(t) = o.sinkhorn_tol {
        cfg.inner.tol = t;
    }
    if let Some(m) = o.mode {
        cfg.gradient_mode = m.into();
    }
    let warm = args.warm_start || o.epsilon0.is_some() || file.warm_start.unwrap_or(false);
    let report = if warm {
        dc_solve_warmstart(&cost, &mu, &partition, &cfg, None, None)?
    } else {
        dc_solve(&cost, &mu, &partition, &cfg, None, None)?
    };
    write_tensor(&out.join("plan.json"), &report.plan)?;
    write_duals(&out.join("duals.json"), &report.duals)?;
    match args.format {
        Format::Json => write_json(
            &out.join("report.json"),
            &DcSummary {
                epsilon,
                gradient_mode: cfg.gradient_mode,
                warm_start: warm,
                outer_iters: report.outer_iters,
                inner_iters: report.inner_iters,
                converged: report.converged,
                inner_converged: report.inner_converged,
                objective_trace: &report.objective_trace,
                kl_trace: &report.kl_trace,
                linear_trace: &report.linear_trace,
                stages: &report.stages,
            },
        )?,
        Format::Csv => write_atomic(&out.join("report.csv"), dc_report_csv(&report).as_bytes())?,
    }
    eprintln!(
        "solve: {} outer iterations, objective {:.6e}, converged {}",
        report.outer_iters,
        report.objective_trace.last().copied().unwrap_or(f64::NAN),
        report.converged && report.inner_converged
    );
    if report.converged && report.inner_converged {
        Ok(())
    } else {
        Err(Failure::NotConverged(format!(
            "stopped after {} outer iterations (outer converged {}, inner converged {})",
            report.outer_iters, report.converged, report.inner_converged
        )))
    }
}

fn experiment_config(args: &ExptArgs) -> Result<ExperimentConfig, Failure> {
    let o = &args.overrides;
    let mut cfg: ExperimentConfig = match &o.config {
        Some(p) => read_json(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.master_seed = s;
    }
    if let Some(t) = args.trials {
        cfg.trials = t;
        cfg.permutation.trials = t;
    }
    if let Some(p) = &o.output {
        cfg.output_dir = p.clone();
    }
    if let Some(e) = o.epsilon {
        cfg.permutation.epsilons = vec![e];
        cfg.gw.dc_epsilons = vec![e];
    }
    for dc in [&mut cfg.permutation.dc, &mut cfg.gw.dc] {
        if o.epsilon0.is_some() {
            dc.epsilon0 = o.epsilon0;
        }
        if let Some(s) = o.step {
            dc.step = s;
        }
        if let Some(m) = o.max_outer {
            dc.max_outer = m;
        }
        if let Some(t) = o.sinkhorn_tol {
            dc.inner.tol = t;
        }
        if let Some(m) = o.mode {
            dc.gradient_mode = m.into();
        }
    }
    if o.epsilon0.is_some() {
        cfg.gw.warm_start = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_expt(args: &ExptArgs) -> Outcome {
    let cfg = experiment_config(args)?;
    let run = || -> Outcome {
        let dir = &cfg.output_dir;
        match args.study {
            Study::Permutation => {
                let study = run_permutation_study(&cfg)?;
                write_permutation_study(&cfg, &study, dir)?;
                let hits = study.runs.iter().filter(|r| r.row.recovered()).count();
                eprintln!("permutation: {hits}/{} runs recovered both permutations", study.runs.len());
            }
            Study::GwQuality | Study::V1Compare => {
                let study = if matches!(args.study, Study::GwQuality) {
                    run_gw_quality_study(&cfg)?
                } else {
                    run_v1_comparison(&cfg)?
                };
                write_gw_study(&cfg, &study, dir)?;
                for label in study.labels() {
                    let s = study.stats(label);
                    eprintln!(
                        "{label}: mean {} std {} over {} trials",
                        s.mean.map_or("-".into(), |v| format!("{v:.4}")),
                        s.std.map_or("-".into(), |v| format!("{v:.4}")),
                        s.n
                    );
                }
                if study.excluded() > 0 {
                    eprintln!("{} trials excluded after solver failures", study.excluded());
                }
            }
        }
        eprintln!("outputs written to {}", dir.display());
        Ok(())
    };
    match args.threads {
        Some(0) => Err(Failure::Input("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Failure::Input(format!("cannot start {n} threads: {e}")))?
            .install(run),
        None => run(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.command {
        Command::Sinkhorn(a) => cmd_sinkhorn(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Expt(a) => cmd_expt(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::NotConverged(msg)) => {
            eprintln!("warning: {msg}");
            ExitCode::from(2)
        }
    }
}
