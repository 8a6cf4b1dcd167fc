//! Command-line front end. Four subcommands wrap the library: `simulate`
//! draws a study from a configured truth, `fit` runs the parametric
//! propensity models, `semiparam` runs the cross-fitted semiparametric
//! procedure, and `estimate` turns a study plus a CPS source into effect
//! estimates. Every run writes its outputs plus exactly one
//! `manifest.json`; reruns with the same inputs, flags and seed are
//! byte-identical except for the manifest's timestamp and duration.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data error,
//! 4 numerical failure.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::crossfit::{assign_folds, crossfit_propensity};
use crate::error::Error;
use crate::estimands::{estimate, AllocationPolicy, CpsProvider, EtaCps, MixedCps, SemiparamCps};
use crate::learners::{
    fit_logistic, KernelLearner, LogisticLearner, LogisticOptions, Observation, PropensityLearner,
};
use crate::mixed_model::{fit_mixed, MixedModelFit, MixedOptions};
use crate::quadrature::DEFAULT_NODES;
use crate::semiparametric::{fit_semiparametric, SemiparamFit, SemiparamOptions};
use crate::simulation::{generate, DgpConfig, TruthSidecar};
use crate::study::{load_study, save_study, FileFormat, Study};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "interfere-ps",
    version,
    about = "Cluster-level propensity scores and IPW effects under partial interference"
)]
struct Cli {
    /// Worker thread count (default: INTERFERE_PS_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a synthetic study from a JSON data-generating configuration.
    Simulate(SimulateArgs),
    /// Fit a propensity model (pooled logistic or mixed-effects logistic).
    Fit(FitArgs),
    /// Cross-fitted semiparametric propensity fit.
    Semiparam(SemiparamArgs),
    /// IPW direct and spillover effects from a study and a CPS source.
    Estimate(EstimateArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Data-generating configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    Logistic,
    Mixed,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Study file (CSV or JSON, by extension).
    #[arg(long)]
    study: PathBuf,
    #[arg(long, value_enum, default_value = "mixed")]
    model: ModelKind,
    /// Gauss–Hermite node count for the mixed model.
    #[arg(long, default_value_t = DEFAULT_NODES)]
    quadrature_nodes: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LearnerKind {
    Logistic,
    Kernel,
}

#[derive(Debug, Args)]
struct SemiparamArgs {
    /// Study file (CSV or JSON, by extension).
    #[arg(long)]
    study: PathBuf,
    /// Marginal propensity learner for cross-fitting.
    #[arg(long, value_enum, default_value = "logistic")]
    learner: LearnerKind,
    /// Number of cross-fitting folds (at least 2).
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Seed for the fold assignment.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_NODES)]
    quadrature_nodes: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(
    ArgGroup::new("cps")
        .required(true)
        .args(["mixed_fit", "semiparam_fit", "truth"])
))]
struct EstimateArgs {
    /// Study file (CSV or JSON, by extension).
    #[arg(long)]
    study: PathBuf,
    /// CPS from a mixed-model fit file (output of `fit --model mixed`).
    #[arg(long)]
    mixed_fit: Option<PathBuf>,
    /// CPS from a semiparametric fit file (output of `semiparam`).
    #[arg(long)]
    semiparam_fit: Option<PathBuf>,
    /// CPS from the exact treatment law in a simulation truth sidecar.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Allocation policy α, repeatable.
    #[arg(long = "alpha", value_name = "ALPHA", required = true)]
    alphas: Vec<f64>,
    /// Arm on which spillover effects are defined.
    #[arg(long, default_value_t = 0)]
    spillover_arm: u8,
    #[arg(long, default_value_t = DEFAULT_NODES)]
    quadrature_nodes: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Record of one invocation, written as `manifest.json` in the output
/// directory. The timestamp and duration are the only fields expected to
/// differ between reruns.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Every flag after resolution of defaults, plus parsed config content
    /// where applicable.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub library_version: String,
    pub started_unix_seconds: f64,
    pub duration_seconds: f64,
}

/// Serialized model fit, tagged by model kind.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum FitFile {
    Logistic {
        p: usize,
        /// Model includes an explicit intercept as the last coefficient.
        intercept: bool,
        beta: Vec<f64>,
        loglik: f64,
        iterations: usize,
        converged: bool,
    },
    Mixed {
        p: usize,
        #[serde(flatten)]
        fit: MixedModelFit,
    },
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Failure {
        Failure {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Failure {
        Failure {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

/// Map library errors onto exit codes: configuration problems are 2,
/// numerical failures 4, everything else (I/O, malformed or inconsistent
/// data) 3.
impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        let code = match e {
            Error::InvalidConfig(_) | Error::InvalidNodeCount(_) => EXIT_CONFIG,
            Error::NotConverged { .. }
            | Error::SeparationDetected(_)
            | Error::NonFiniteLikelihood(_)
            | Error::NonFiniteIntegrand(_)
            | Error::MaxDepthExceeded
            | Error::BracketFailure { .. } => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Entry point for the binary; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn execute(cli: Cli) -> CmdResult {
    let threads = resolve_threads(cli.threads)?;
    if let Some(n) = threads {
        // A pool may already exist when run() is called twice in-process;
        // the second configuration attempt is a no-op, not an error.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let clock = RunClock::start();
    match cli.command {
        Command::Simulate(args) => cmd_simulate(args, threads, clock),
        Command::Fit(args) => cmd_fit(args, threads, clock),
        Command::Semiparam(args) => cmd_semiparam(args, threads, clock),
        Command::Estimate(args) => cmd_estimate(args, threads, clock),
    }
}

fn resolve_threads(flag: Option<usize>) -> std::result::Result<Option<usize>, Failure> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("INTERFERE_PS_THREADS") {
            Ok(raw) => Some(raw.trim().parse::<usize>().map_err(|_| {
                Failure::config(format!(
                    "INTERFERE_PS_THREADS must be a positive integer, got '{raw}'"
                ))
            })?),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        return Err(Failure::config("thread count must be at least 1"));
    }
    Ok(n)
}

struct RunClock {
    started_unix_seconds: f64,
    timer: Instant,
}

impl RunClock {
    fn start() -> RunClock {
        let started_unix_seconds = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        RunClock {
            started_unix_seconds,
            timer: Instant::now(),
        }
    }
}

fn path_string(path: &Path) -> String {
    path.display().to_string()
}

fn ensure_out_dir(out: &Path) -> std::result::Result<(), Failure> {
    std::fs::create_dir_all(out)
        .map_err(|e| Failure::data(format!("cannot create output directory '{}': {e}", out.display())))
}

#[allow(clippy::too_many_arguments)]
fn write_manifest(
    out: &Path,
    command: &str,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: &[&Path],
    outputs: &[&Path],
    clock: &RunClock,
) -> CmdResult {
    let manifest = RunManifest {
        command: command.to_string(),
        config,
        seed,
        inputs: inputs.iter().map(|p| path_string(p)).collect(),
        outputs: outputs.iter().map(|p| path_string(p)).collect(),
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix_seconds: clock.started_unix_seconds,
        duration_seconds: clock.timer.elapsed().as_secs_f64(),
    };
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(Error::from)?;
    std::fs::write(&path, text + "\n").map_err(Error::from)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    std::fs::write(path, text + "\n").map_err(Error::from)?;
    Ok(())
}

fn load_study_data(path: &Path) -> std::result::Result<Study, Failure> {
    load_study(path, FileFormat::from_path(path)).map_err(|e| Failure {
        code: EXIT_DATA,
        message: format!("study file '{}': {e}", path.display()),
    })
}

fn cmd_simulate(args: SimulateArgs, threads: Option<usize>, clock: RunClock) -> CmdResult {
    let text = std::fs::read_to_string(&args.config).map_err(|e| {
        Failure::config(format!(
            "cannot read config '{}': {e}",
            args.config.display()
        ))
    })?;
    let config: DgpConfig = serde_json::from_str(&text).map_err(|e| {
        Failure::config(format!(
            "malformed config '{}': {e}",
            args.config.display()
        ))
    })?;
    let sim = generate(&config)?;
    ensure_out_dir(&args.out)?;
    let study_path = args.out.join("study.csv");
    let truth_path = args.out.join("truth.json");
    save_study(&sim.study, &study_path, FileFormat::Csv).map_err(Failure::from)?;
    sim.sidecar().save(&truth_path).map_err(Failure::from)?;
    let seed = config.seed;
    write_manifest(
        &args.out,
        "simulate",
        json!({
            "config_path": path_string(&args.config),
            "config": config,
            "out": path_string(&args.out),
            "threads": threads,
        }),
        Some(seed),
        &[&args.config],
        &[&study_path, &truth_path],
        &clock,
    )
}

fn cmd_fit(args: FitArgs, threads: Option<usize>, clock: RunClock) -> CmdResult {
    let study = load_study_data(&args.study)?;
    let fit_file = match args.model {
        ModelKind::Logistic => {
            let data: Vec<Observation> = study
                .units()
                .map(|u| {
                    let mut row = u.covariates.clone();
                    row.push(1.0);
                    (row, u.treatment)
                })
                .collect();
            let fit = fit_logistic(&data, LogisticOptions::default())?;
            FitFile::Logistic {
                p: study.p,
                intercept: true,
                beta: fit.beta,
                loglik: fit.loglik,
                iterations: fit.iterations,
                converged: fit.converged,
            }
        }
        ModelKind::Mixed => {
            let options = MixedOptions {
                nodes: args.quadrature_nodes,
                ..MixedOptions::default()
            };
            let fit = fit_mixed(&study, options)?;
            FitFile::Mixed { p: study.p, fit }
        }
    };
    ensure_out_dir(&args.out)?;
    let fit_path = args.out.join("fit.json");
    write_json(&fit_path, &fit_file)?;
    let model = match args.model {
        ModelKind::Logistic => "logistic",
        ModelKind::Mixed => "mixed",
    };
    write_manifest(
        &args.out,
        "fit",
        json!({
            "study": path_string(&args.study),
            "model": model,
            "quadrature_nodes": args.quadrature_nodes,
            "out": path_string(&args.out),
            "threads": threads,
        }),
        None,
        &[&args.study],
        &[&fit_path],
        &clock,
    )
}

fn cmd_semiparam(args: SemiparamArgs, threads: Option<usize>, clock: RunClock) -> CmdResult {
    let study = load_study_data(&args.study)?;
    let folds = assign_folds(&study, args.folds, args.seed)?;
    let learner: Box<dyn PropensityLearner + Sync> = match args.learner {
        LearnerKind::Logistic => Box::new(LogisticLearner::default()),
        LearnerKind::Kernel => Box::new(KernelLearner::default()),
    };
    let scores = crossfit_propensity(&study, &folds, learner.as_ref())?;
    ensure_out_dir(&args.out)?;
    let scores_path = args.out.join("scores.csv");
    scores.save_csv(&study, &scores_path).map_err(Failure::from)?;
    let learner_name = match args.learner {
        LearnerKind::Logistic => "logistic",
        LearnerKind::Kernel => "kernel",
    };
    let flags = json!({
        "study": path_string(&args.study),
        "learner": learner_name,
        "folds": args.folds,
        "seed": args.seed,
        "quadrature_nodes": args.quadrature_nodes,
        "out": path_string(&args.out),
        "threads": threads,
    });
    let options = SemiparamOptions {
        nodes: args.quadrature_nodes,
        ..SemiparamOptions::default()
    };
    match fit_semiparametric(&study, &scores, &options) {
        Ok(fit) => {
            let fit_path = args.out.join("semiparam.json");
            write_json(&fit_path, &fit)?;
            write_manifest(
                &args.out,
                "semiparam",
                flags,
                Some(args.seed),
                &[&args.study],
                &[&scores_path, &fit_path],
                &clock,
            )
        }
        Err(e @ Error::NotConverged { .. }) => {
            // Persist the iteration trace carried in the error before
            // reporting the numerical failure.
            let failure_path = args.out.join("failure.json");
            write_json(&failure_path, &json!({ "error": e.to_string() }))?;
            write_manifest(
                &args.out,
                "semiparam",
                flags,
                Some(args.seed),
                &[&args.study],
                &[&scores_path, &failure_path],
                &clock,
            )?;
            Err(Failure::from(e))
        }
        Err(e) => Err(Failure::from(e)),
    }
}

fn cmd_estimate(args: EstimateArgs, threads: Option<usize>, clock: RunClock) -> CmdResult {
    let study = load_study_data(&args.study)?;
    let policies = args
        .alphas
        .iter()
        .map(|&a| AllocationPolicy::new(a))
        .collect::<crate::Result<Vec<_>>>()?;
    let (provider, source): (Box<dyn CpsProvider>, serde_json::Value) =
        if let Some(path) = &args.mixed_fit {
            let fit_file: FitFile = read_json(path)?;
            let FitFile::Mixed { p, fit } = fit_file else {
                return Err(Failure::data(format!(
                    "fit file '{}' holds a logistic model; --mixed-fit needs a mixed-model fit",
                    path.display()
                )));
            };
            if p != study.p {
                return Err(Failure::data(format!(
                    "fit file '{}' was built for p = {p} covariates, study has p = {}",
                    path.display(),
                    study.p
                )));
            }
            (
                Box::new(MixedCps::new(fit, args.quadrature_nodes)?),
                json!({ "mixed_fit": path_string(path) }),
            )
        } else if let Some(path) = &args.semiparam_fit {
            let fit: SemiparamFit = read_json(path)?;
            for unit in study.units() {
                if fit.f_for(&unit.cluster_id, unit.unit_index).is_none() {
                    return Err(Failure::from(Error::MissingFValue {
                        cluster_id: unit.cluster_id.clone(),
                        unit: unit.unit_index,
                    }));
                }
            }
            (
                Box::new(SemiparamCps::new(fit, args.quadrature_nodes)?),
                json!({ "semiparam_fit": path_string(path) }),
            )
        } else {
            let path = args.truth.as_ref().expect("clap group guarantees a source");
            let sidecar: TruthSidecar = read_json(path)?;
            let truth = sidecar.config.propensity_truth.clone();
            if let Err(e) = validate_truth_against_study(&sidecar, &study) {
                return Err(Failure::data(format!(
                    "truth sidecar '{}' does not match the study: {e}",
                    path.display()
                )));
            }
            let provider = EtaCps::from_study(
                &study,
                sidecar.config.sigma2_v,
                args.quadrature_nodes,
                |u| truth.eta(&u.covariates).expect("validated against study"),
            )?;
            (Box::new(provider), json!({ "truth": path_string(path) }))
        };
    let report = estimate(&study, &policies, provider.as_ref(), args.spillover_arm)?;
    ensure_out_dir(&args.out)?;
    let json_path = args.out.join("report.json");
    let csv_path = args.out.join("report.csv");
    write_json(&json_path, &report)?;
    report.save_csv(&csv_path).map_err(Failure::from)?;
    let input = [
        Some(args.study.as_path()),
        args.mixed_fit.as_deref(),
        args.semiparam_fit.as_deref(),
        args.truth.as_deref(),
    ];
    let inputs: Vec<&Path> = input.into_iter().flatten().collect();
    write_manifest(
        &args.out,
        "estimate",
        json!({
            "study": path_string(&args.study),
            "cps": source,
            "alphas": args.alphas,
            "spillover_arm": args.spillover_arm,
            "quadrature_nodes": args.quadrature_nodes,
            "out": path_string(&args.out),
            "threads": threads,
        }),
        None,
        &inputs,
        &[&json_path, &csv_path],
        &clock,
    )
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> std::result::Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::data(format!("cannot read '{}': {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::data(format!("malformed file '{}': {e}", path.display())))
}

fn validate_truth_against_study(sidecar: &TruthSidecar, study: &Study) -> crate::Result<()> {
    if sidecar.config.p != study.p {
        return Err(Error::DimensionMismatch(format!(
            "truth has p = {}, study has p = {}",
            sidecar.config.p, study.p
        )));
    }
    // Re-run config validation so the eta closure cannot fail downstream.
    let mut check = sidecar.config.clone();
    check.clusters = study.clusters.len().max(1);
    check.validate()?;
    for unit in study.units() {
        sidecar.config.propensity_truth.eta(&unit.covariates)?;
    }
    Ok(())
}
