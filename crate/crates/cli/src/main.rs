//! `arena`: strength estimation, scheduling, simulation and the annotation
//! service from the command line.
//!
//! Exit codes: 0 success, 2 invalid input, 3 numeric failure, 4 I/O failure.

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use arena_core::bootstrap::{bootstrap_ci, ConfidenceReport, RerunMode};
use arena_core::domain::{build_groups, models_in_records, tally_from_judgments, write_records_jsonl};
use arena_core::features::{normalize_and_sum, AutoMetricTable};
use arena_core::rank::fit_mle_or_smooth;
use arena_core::report::{detect_input, records_from_jsonl, render_table, report_from_jsonl, InputKind};
use arena_core::service::{Study, StudySpec};
use arena_core::sim::{experiment_cost_reduction, experiment_growth, simulate_study, GroundTruth, StudyConfig};
use arena_core::{build_plan, Error, ErrorKind, JudgmentRecord, SchedulePlan, Video};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::config::Config;

#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn validation(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Failure {
            code: 4,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.kind() {
            ErrorKind::Validation | ErrorKind::Conflict => 2,
            ErrorKind::Numeric => 3,
            ErrorKind::NotFound | ErrorKind::Io => 4,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

type Outcome = Result<(), Failure>;

#[derive(Parser)]
#[command(name = "arena", version, about = "Pairwise human evaluation of generative models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize automatic-metric scores into per-video feature scores.
    Ingest(IngestArgs),
    /// Build the annotation plan for a set of videos.
    Plan(PlanArgs),
    /// Simulated annotators and the desk-scale experiments.
    #[command(subcommand)]
    Simulate(SimulateCommand),
    /// Run the annotation HTTP service.
    Serve(ServeArgs),
    /// Fit strengths to judgment records.
    Estimate(EstimateArgs),
    /// Bootstrap confidence intervals for the strengths.
    Bootstrap(BootstrapArgs),
    /// Rankings, win ratios, agreement and scheduler outcomes.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// TOML file with [scheduler], [fit], [bootstrap] and [simulation] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the result here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IngestArgs {
    /// CSV (`video_id,<metric>,...`) or JSON (`{video_id: {metric: value}}`).
    #[arg(long)]
    features: PathBuf,
    /// Score incomplete vectors with a neutral value instead of failing.
    #[arg(long)]
    allow_partial: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    /// JSON array of videos, or a study spec as accepted by the service.
    #[arg(long)]
    videos: PathBuf,
    /// Raw automatic-metric scores; fills in the videos' feature scores.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    allow_partial: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand)]
enum SimulateCommand {
    /// One synthetic study annotated by simulated annotators.
    Run(SimRunArgs),
    /// Annotations needed by the dynamic scheduler versus full annotation.
    Cost(SimExperimentArgs),
    /// Annotation demand over all 2- to 4-model subsets.
    Growth(SimExperimentArgs),
}

#[derive(Args)]
struct TruthArgs {
    /// Ground truth JSON. Defaults to five models with log-strengths
    /// 0, 0.4, 0.8, 1.2, 1.6 and theta 1.3 on every metric.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct SimRunArgs {
    #[command(flatten)]
    truth: TruthArgs,
    #[arg(long, default_value_t = 1)]
    annotators: usize,
    /// Judgment records as JSONL.
    #[arg(long)]
    records_out: Option<PathBuf>,
    /// The synthetic study as a spec, usable with `plan` and `bootstrap`.
    #[arg(long)]
    study_out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SimExperimentArgs {
    #[command(flatten)]
    truth: TruthArgs,
    /// Number of seeds, starting at `--seed`.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "ARENA_BIND_ADDR", default_value = "127.0.0.1:8080")]
    bind: std::net::SocketAddr,
    /// Event logs and snapshots; in-memory only when unset.
    #[arg(long, env = "ARENA_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Served under /media.
    #[arg(long, env = "ARENA_MEDIA_DIR")]
    media_dir: Option<PathBuf>,
    /// Shared bearer token for the /v1 API.
    #[arg(long, env = "ARENA_TOKEN", hide_env_values = true)]
    token: Option<String>,
}

#[derive(Args)]
struct EstimateArgs {
    /// Judgment records JSONL or a study log export.
    #[arg(long)]
    records: PathBuf,
    /// Also write the comparison tally as CSV.
    #[arg(long)]
    tally_out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    EstimateOnly,
    FullDynamic,
}

#[derive(Args)]
struct BootstrapArgs {
    /// Judgment records JSONL or a study log export.
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    resamples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Study spec or videos that define the plan for full-dynamic
    /// resampling. Not needed when `--records` is a study log.
    #[arg(long)]
    study: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ReportArgs {
    /// Judgment records JSONL or a study log export.
    #[arg(long)]
    input: PathBuf,
    /// Emit JSON instead of a table.
    #[arg(long)]
    json: bool,
    /// Add bootstrap intervals with this many resamples.
    #[arg(long)]
    resamples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    common: Common,
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Outcome {
    std::fs::write(path, bytes).map_err(|e| Failure::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(path) => write(path, text.as_bytes()),
        None => {
            use std::io::Write;
            match std::io::stdout().lock().write_all(text.as_bytes()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::io(Path::new("<stdout>"), e)),
                _ => Ok(()),
            }
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn load_table(path: &Path) -> Result<AutoMetricTable, Failure> {
    let text = read(path)?;
    let table = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        AutoMetricTable::from_json(&text)?
    } else {
        AutoMetricTable::from_csv(text.as_bytes())?
    };
    Ok(table)
}

/// Reads either a bare video array or a full study spec.
fn load_spec(path: &Path) -> Result<StudySpec, Failure> {
    let text = read(path)?;
    let invalid = |e: serde_json::Error| Failure::validation(format!("{}: {e}", path.display()));
    let value: serde_json::Value = serde_json::from_str(&text).map_err(invalid)?;
    let spec = if value.is_array() {
        let videos: Vec<Video> = serde_json::from_value(value).map_err(invalid)?;
        StudySpec {
            videos,
            prompts: Vec::new(),
            features: None,
            allow_partial_features: false,
            config: Default::default(),
            fit: Default::default(),
        }
    } else {
        serde_json::from_value(value).map_err(invalid)?
    };
    Ok(spec)
}

fn load_truth(path: Option<&Path>) -> Result<GroundTruth, Failure> {
    match path {
        Some(p) => Ok(GroundTruth::from_json(&read(p)?)?),
        None => Ok(GroundTruth::uniform(
            &["model-1", "model-2", "model-3", "model-4", "model-5"],
            &[0.0, 0.4, 0.8, 1.2, 1.6],
            1.3,
        )),
    }
}

fn study_config(config: &Config) -> StudyConfig {
    StudyConfig {
        prompts: config.simulation.prompts,
        feature_noise: config.simulation.feature_noise,
        scheduler: config.scheduler.clone(),
        fit: config.fit.clone(),
    }
}

fn ingest(args: IngestArgs) -> Outcome {
    let scores = normalize_and_sum(&load_table(&args.features)?, args.allow_partial)?;
    emit(args.out.as_deref(), &to_json(&scores))
}

fn plan_summary(plan: &SchedulePlan) -> serde_json::Value {
    let mut pairs = Vec::with_capacity(plan.total_pairs);
    for (ordinal, pair) in plan.pairs().enumerate() {
        let (phase, batch) = plan.phase_of(ordinal);
        pairs.push(json!({
            "ordinal": ordinal,
            "pair_id": pair.pair_id,
            "phase": phase,
            "batch_index": batch,
        }));
    }
    let groups: Vec<_> = plan
        .sorted_groups
        .iter()
        .map(|g| json!({"prompt_id": g.prompt_id, "group_score": g.group_score}))
        .collect();
    json!({
        "config": plan.config,
        "models": plan.model_ids(),
        "total_pairs": plan.total_pairs,
        "static_pairs": plan.static_pair_count(),
        "dynamic_batches": plan.dynamic_batches.len(),
        "groups": groups,
        "pairs": pairs,
    })
}

fn plan(args: PlanArgs) -> Outcome {
    let config = Config::load(args.common.config.as_deref())?;
    let mut spec = load_spec(&args.videos)?;
    if args.common.config.is_some() {
        spec.config = config.scheduler;
    }
    if let Some(path) = &args.features {
        let table = load_table(path)?;
        spec.features = Some(table.to_map());
        spec.allow_partial_features = args.allow_partial;
    }
    let spec = spec.resolve()?;
    let plan = build_plan(build_groups(&spec.videos)?, &spec.config)?;
    emit(args.common.out.as_deref(), &to_json(&plan_summary(&plan)))
}

fn simulate(cmd: SimulateCommand) -> Outcome {
    match cmd {
        SimulateCommand::Run(args) => {
            let config = Config::load(args.common.config.as_deref())?;
            let truth = load_truth(args.truth.truth.as_deref())?;
            if args.annotators == 0 {
                return Err(Failure::validation("--annotators must be at least 1"));
            }
            let annotators: Vec<String> = (1..=args.annotators).map(|i| format!("sim-{i}")).collect();
            let study = study_config(&config);
            let sim = simulate_study(&truth, &study, &annotators, args.truth.seed)?;
            if let Some(path) = &args.records_out {
                let mut buf = Vec::new();
                write_records_jsonl(&mut buf, &sim.records)?;
                write(path, &buf)?;
            }
            if let Some(path) = &args.study_out {
                let spec = StudySpec {
                    videos: sim.videos.clone(),
                    prompts: Vec::new(),
                    features: None,
                    allow_partial_features: false,
                    config: arena_core::SchedulerConfig {
                        seed: args.truth.seed,
                        ..study.scheduler.clone()
                    },
                    fit: study.fit.clone(),
                };
                write(path, to_json(&spec).as_bytes())?;
            }
            let sessions: serde_json::Map<String, serde_json::Value> = sim
                .runs
                .iter()
                .map(|(id, run)| {
                    let summary = json!({
                        "annotations": run.annotation_count,
                        "total_pairs": run.total_pairs,
                        "served_fraction": run.served_fraction(),
                        "discarded": run.discarded(),
                        "status": run.status,
                        "updates": run.updates,
                        "rankings": run.estimates.as_ref().map(|e| e.rankings()),
                    });
                    (id.clone(), summary)
                })
                .collect();
            let summary = json!({
                "seed": args.truth.seed,
                "models": truth.models(),
                "records": sim.records.len(),
                "sessions": sessions,
            });
            emit(args.common.out.as_deref(), &to_json(&summary))
        }
        SimulateCommand::Cost(args) | SimulateCommand::Growth(args) if args.seeds == 0 => {
            Err(Failure::validation("--seeds must be at least 1"))
        }
        SimulateCommand::Cost(args) => {
            let config = Config::load(args.common.config.as_deref())?;
            let truth = load_truth(args.truth.truth.as_deref())?;
            let seeds: Vec<u64> = (0..args.seeds).map(|k| args.truth.seed.wrapping_add(k)).collect();
            let report = experiment_cost_reduction(&truth, &study_config(&config), &seeds)?;
            emit(args.common.out.as_deref(), &to_json(&report))
        }
        SimulateCommand::Growth(args) => {
            let config = Config::load(args.common.config.as_deref())?;
            let truth = load_truth(args.truth.truth.as_deref())?;
            let seeds: Vec<u64> = (0..args.seeds).map(|k| args.truth.seed.wrapping_add(k)).collect();
            let report = experiment_growth(&truth, &study_config(&config), &seeds)?;
            emit(args.common.out.as_deref(), &to_json(&report))
        }
    }
}

fn serve(args: ServeArgs) -> Outcome {
    let config = arena_server::ServerConfig {
        data_dir: args.data_dir,
        media_dir: args.media_dir,
        token: args.token,
    };
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure {
        code: 4,
        message: format!("cannot start the runtime: {e}"),
    })?;
    runtime.block_on(arena_server::serve(config, args.bind))?;
    Ok(())
}

fn estimate(args: EstimateArgs) -> Outcome {
    let config = Config::load(args.common.config.as_deref())?;
    let records = records_from_jsonl(&read(&args.records)?)?;
    if records.is_empty() {
        return Err(Failure::validation(format!("{}: no judgment records", args.records.display())));
    }
    let tally = tally_from_judgments(&records, &models_in_records(&records))?;
    if let Some(path) = &args.tally_out {
        let mut buf = Vec::new();
        tally.write_csv(&mut buf)?;
        write(path, &buf)?;
    }
    let (est, smoothed) = fit_mle_or_smooth(&tally, &config.fit)?;
    let mut out = est.to_export();
    out["smoothed"] = json!(smoothed);
    out["records"] = json!(records.len());
    emit(args.common.out.as_deref(), &to_json(&out))
}

fn plan_for_bootstrap(text: &str, study: Option<&Path>) -> Result<Arc<SchedulePlan>, Failure> {
    if detect_input(text)? == InputKind::StudyLog {
        return Ok(Study::replay(text.as_bytes())?.plan().clone());
    }
    let path = study.ok_or_else(|| {
        Failure::validation("full-dynamic resampling needs --study unless --records is a study log")
    })?;
    let spec = load_spec(path)?.resolve()?;
    Ok(Arc::new(build_plan(build_groups(&spec.videos)?, &spec.config)?))
}

fn run_bootstrap(records: &[JudgmentRecord], config: &Config, plan: Option<Arc<SchedulePlan>>) -> Result<ConfidenceReport, Failure> {
    Ok(bootstrap_ci(records, &config.bootstrap, &config.fit, plan)?)
}

fn bootstrap(args: BootstrapArgs) -> Outcome {
    let mut config = Config::load(args.common.config.as_deref())?;
    if let Some(n) = args.resamples {
        config.bootstrap.n_resamples = n;
    }
    if let Some(seed) = args.seed {
        config.bootstrap.seed = seed;
    }
    if let Some(mode) = args.mode {
        config.bootstrap.rerun_mode = match mode {
            Mode::EstimateOnly => RerunMode::EstimateOnly,
            Mode::FullDynamic => RerunMode::FullDynamic,
        };
    }
    let text = read(&args.records)?;
    let records = records_from_jsonl(&text)?;
    let plan = match config.bootstrap.rerun_mode {
        RerunMode::FullDynamic => Some(plan_for_bootstrap(&text, args.study.as_deref())?),
        RerunMode::EstimateOnly => None,
    };
    let report = run_bootstrap(&records, &config, plan)?;
    emit(args.common.out.as_deref(), &to_json(&report))
}

fn report(args: ReportArgs) -> Outcome {
    let mut config = Config::load(args.common.config.as_deref())?;
    let text = read(&args.input)?;
    let mut bundle = report_from_jsonl(&text, &config.fit)?;
    if let Some(n) = args.resamples {
        config.bootstrap.n_resamples = n;
        config.bootstrap.seed = args.seed;
        let records = records_from_jsonl(&text)?;
        if !records.is_empty() {
            bundle.confidence = Some(run_bootstrap(&records, &config, None)?);
        }
    }
    let text = if args.json { to_json(&bundle) } else { render_table(&bundle) };
    emit(args.common.out.as_deref(), &text)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Plan(a) => plan(a),
        Command::Simulate(c) => simulate(c),
        Command::Serve(a) => serve(a),
        Command::Estimate(a) => estimate(a),
        Command::Bootstrap(a) => bootstrap(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
