//! `memwarp` experiment driver.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use memwarp::error::Error;
use memwarp::eval::{evaluate, evaluate_anticipation, evaluate_propagation, PropagationMode, SweepPoint};
use memwarp::experiment::run_benchmark;
use memwarp::gradcheck::{run_all, GradcheckConfig};
use memwarp::io::write_ndjson;
use memwarp::model::{load_checkpoint, save_checkpoint, Model, Variant};
use memwarp::params::ParamStore;
use memwarp::pipeline::{simulate_dataset, trace_violations, Alignment, PipelineModels};
use memwarp::training::{train, TrainSet};
use memwarp::worldgen::{generate_dataset, load_dataset, save_dataset, SequenceRecord};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "memwarp", version, about = "Motion-warped feature memories on synthetic video")]
struct Cli {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training and validation sets.
    Gen,
    /// Train the configured model and write a checkpoint.
    Train,
    /// Evaluate a checkpoint on the validation set.
    Eval(EvalArgs),
    /// mAP when image evidence stops delta frames before the target.
    SweepPropagation(SweepArgs),
    /// mAP when no frame after t - delta is seen at all.
    SweepAnticipation(AnticipationArgs),
    /// Run the fast/strong pipeline on the validation set.
    PipelineSim(PipelineArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck,
    /// Train the benchmark models and check the expected qualitative patterns.
    Report,
}

#[derive(Args)]
struct CheckpointArg {
    /// Checkpoint directory; defaults to <out>/checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    checkpoint: CheckpointArg,
    /// Also run feature propagation at these deltas.
    #[arg(long, value_delimiter = ',')]
    deltas: Option<Vec<usize>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    FeatureProp,
    BoxProp,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    checkpoint: CheckpointArg,
    #[arg(long, value_delimiter = ',', default_value = "0,4,8")]
    deltas: Vec<usize>,
    #[arg(long, value_enum, default_value = "feature-prop")]
    mode: ModeArg,
}

#[derive(Args)]
struct AnticipationArgs {
    #[command(flatten)]
    checkpoint: CheckpointArg,
    #[arg(long, value_delimiter = ',', default_value = "1,4,8")]
    deltas: Vec<usize>,
    /// Use the true future fields instead of extrapolated ones.
    #[arg(long)]
    oracle: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlignmentArg {
    FeatureProp,
    BoxProp,
    None,
}

#[derive(Args)]
struct PipelineArgs {
    /// Checkpoint of the per-frame fast detector.
    #[arg(long)]
    fast: PathBuf,
    /// Checkpoint of the memory model run by the slow worker.
    #[arg(long)]
    strong: PathBuf,
    /// Checkpoint of the head fed with fast and aligned strong features.
    #[arg(long)]
    fused: PathBuf,
    #[arg(long, value_enum)]
    alignment: Option<AlignmentArg>,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_data_error() {
            3
        } else if matches!(e, Error::Config(_)) {
            2
        } else {
            4
        };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

fn assertion(message: impl Into<String>) -> Failure {
    Failure { code: 4, message: message.into() }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("memwarp: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn limit_threads() -> Outcome {
    let Ok(value) = std::env::var("MEMWARP_THREADS") else { return Ok(()) };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("MEMWARP_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Outcome {
    limit_threads()?;
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.benchmark.seed = seed;
    }
    if let Some(out) = cli.out {
        config.output = out;
    }
    config.validate()?;
    fs::create_dir_all(&config.output).map_err(|e| Error::io(&config.output, e))?;
    match cli.command {
        Command::Gen => gen(&config),
        Command::Train => train_cmd(&config),
        Command::Eval(args) => eval_cmd(&config, &args),
        Command::SweepPropagation(args) => sweep_propagation(&config, &args),
        Command::SweepAnticipation(args) => sweep_anticipation(&config, &args),
        Command::PipelineSim(args) => pipeline_sim(&config, &args),
        Command::Gradcheck => gradcheck(&config),
        Command::Report => report(&config),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_sweep(path: &Path, points: &[SweepPoint]) -> Outcome {
    let mut csv = String::from("delta,map,mode\n");
    for p in points {
        let _ = writeln!(csv, "{},{:.6},{}", p.delta, p.map, p.mode);
    }
    fs::write(path, csv).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn validation(config: &ExperimentConfig) -> std::result::Result<Vec<SequenceRecord>, Failure> {
    Ok(load_dataset(&config.validation)?)
}

fn checkpoint(config: &ExperimentConfig, arg: &CheckpointArg) -> std::result::Result<(Model, ParamStore<f32>), Failure> {
    let dir = arg.checkpoint.clone().unwrap_or_else(|| config.output.join("checkpoint"));
    Ok(load_checkpoint(dir)?)
}

#[derive(Serialize)]
struct GenSummary {
    seed: u64,
    train_sequences: usize,
    val_sequences: usize,
    length: usize,
    occluded_share: f64,
}

fn gen(config: &ExperimentConfig) -> Outcome {
    let d = &config.data;
    let train = generate_dataset(&d.sampler, d.train_sequences, d.length, config.seed)?;
    let val = generate_dataset(&d.sampler, d.val_sequences, d.length, config.seed.wrapping_add(1))?;
    save_dataset(&train, &config.dataset)?;
    save_dataset(&val, &config.validation)?;
    let all = train.iter().chain(&val);
    let frames: usize = all.clone().map(|s| s.len()).sum();
    let occluded: usize = all.map(|s| s.occluded.iter().filter(|&&o| o).count()).sum();
    write_json(
        &config.output.join("gen.json"),
        &GenSummary {
            seed: config.seed,
            train_sequences: train.len(),
            val_sequences: val.len(),
            length: d.length,
            occluded_share: occluded as f64 / frames.max(1) as f64,
        },
    )
}

#[derive(Serialize)]
struct TrainSummary {
    variant: Variant,
    epochs: usize,
    final_loss: Option<f64>,
    final_val_loss: Option<f64>,
}

fn train_cmd(config: &ExperimentConfig) -> Outcome {
    let data = load_dataset(&config.dataset)?;
    let val = if config.validation.exists() { Some(validation(config)?) } else { None };
    let (model, params) = Model::build::<f32>(&config.model, config.seed)?;
    let mut train_config = config.train.clone();
    if config.model.variant == Variant::PerFrame {
        train_config.evidence_dropout_prob = 0.0;
    }
    let log_path = config.output.join("metrics.ndjson");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let val_set = val.as_deref().map(TrainSet::new);
    let outcome = train(&model, params, &TrainSet::new(&data), val_set.as_ref(), &train_config, Some(&mut log))?;
    save_checkpoint(&config.model, config.seed, &outcome.params, config.output.join("checkpoint"))?;
    write_json(
        &config.output.join("train.json"),
        &TrainSummary {
            variant: config.model.variant,
            epochs: outcome.epoch_losses.len(),
            final_loss: outcome.epoch_losses.last().copied(),
            final_val_loss: outcome.val_losses.last().copied(),
        },
    )
}

#[derive(Serialize)]
struct EvalSummary {
    variant: Variant,
    map: f64,
    per_class: Vec<Option<f64>>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    propagation: Vec<SweepPoint>,
}

fn eval_cmd(config: &ExperimentConfig, args: &EvalArgs) -> Outcome {
    let (model, params) = checkpoint(config, &args.checkpoint)?;
    if args.deltas.is_some() && !model.uses_memory() {
        return Err(usage("--deltas needs a memory model; propagation is undefined for per-frame detectors"));
    }
    let val = validation(config)?;
    let report = evaluate(&model, &params, &val, &config.eval)?;
    let propagation = match &args.deltas {
        Some(d) => evaluate_propagation(&model, &params, &val, d, PropagationMode::FeatureProp, &config.eval)?,
        None => Vec::new(),
    };
    write_json(
        &config.output.join("eval.json"),
        &EvalSummary { variant: model.config.variant, map: report.mean, per_class: report.per_class, propagation },
    )
}

fn sweep_propagation(config: &ExperimentConfig, args: &SweepArgs) -> Outcome {
    let (model, params) = checkpoint(config, &args.checkpoint)?;
    let mode = match args.mode {
        ModeArg::FeatureProp => PropagationMode::FeatureProp,
        ModeArg::BoxProp => PropagationMode::BoxProp,
    };
    if mode == PropagationMode::FeatureProp && !model.uses_memory() {
        return Err(usage("feature propagation needs a memory model"));
    }
    let points = evaluate_propagation(&model, &params, &validation(config)?, &args.deltas, mode, &config.eval)?;
    write_sweep(&config.output.join(format!("propagation_{}.csv", mode.name())), &points)
}

fn sweep_anticipation(config: &ExperimentConfig, args: &AnticipationArgs) -> Outcome {
    let (model, params) = checkpoint(config, &args.checkpoint)?;
    if !model.uses_memory() {
        return Err(usage("anticipation needs a memory model"));
    }
    let points = evaluate_anticipation(&model, &params, &validation(config)?, &args.deltas, args.oracle, &config.eval)?;
    let name = if args.oracle { "anticipation_oracle.csv" } else { "anticipation.csv" };
    write_sweep(&config.output.join(name), &points)
}

#[derive(Serialize)]
struct TraceLine<'a> {
    sequence: usize,
    #[serde(flatten)]
    record: &'a memwarp::pipeline::TraceRecord,
}

#[derive(Serialize)]
struct PipelineSummary {
    alignment: Alignment,
    delta: usize,
    map: f64,
    frames: usize,
    violations: Vec<(usize, usize)>,
}

fn pipeline_sim(config: &ExperimentConfig, args: &PipelineArgs) -> Outcome {
    let load = |p: &PathBuf| -> std::result::Result<_, Failure> { Ok(load_checkpoint(p)?) };
    let (fast, strong, fused) = (load(&args.fast)?, load(&args.strong)?, load(&args.fused)?);
    let mut pipeline = config.pipeline.clone();
    if let Some(a) = args.alignment {
        pipeline.alignment = match a {
            AlignmentArg::FeatureProp => Alignment::FeatureProp,
            AlignmentArg::BoxProp => Alignment::BoxProp,
            AlignmentArg::None => Alignment::None,
        };
    }
    let models = PipelineModels { fast: (&fast.0, &fast.1), strong: (&strong.0, &strong.1), fused: (&fused.0, &fused.1) };
    let (report, traces) = simulate_dataset(&models, &validation(config)?, &pipeline, &config.eval)?;
    let lines: Vec<TraceLine> = traces
        .iter()
        .enumerate()
        .flat_map(|(sequence, trace)| trace.iter().map(move |record| TraceLine { sequence, record }))
        .collect();
    write_ndjson(config.output.join("trace.ndjson"), &lines)?;
    let violations: Vec<(usize, usize)> = traces
        .iter()
        .enumerate()
        .flat_map(|(s, t)| trace_violations(t, &pipeline).into_iter().map(move |f| (s, f)))
        .collect();
    let failed = !violations.is_empty();
    write_json(
        &config.output.join("pipeline.json"),
        &PipelineSummary { alignment: pipeline.alignment, delta: pipeline.delta(), map: report.mean, frames: lines.len(), violations },
    )?;
    if failed {
        return Err(assertion("pipeline trace violates latency or causality"));
    }
    Ok(())
}

fn gradcheck(config: &ExperimentConfig) -> Outcome {
    let reports = run_all(&GradcheckConfig { seed: config.seed, ..GradcheckConfig::default() })?;
    write_json(&config.output.join("gradcheck.json"), &reports)?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(assertion(format!("gradient checks failed: {}", failed.join(", "))));
    }
    Ok(())
}

fn report(config: &ExperimentConfig) -> Outcome {
    let report = run_benchmark(&config.benchmark)?;
    let out = &config.output;
    write_sweep(&out.join("memnet_feature-prop.csv"), &report.memnet_feature)?;
    write_sweep(&out.join("memnet_box-prop.csv"), &report.memnet_box)?;
    write_sweep(&out.join("clocknet_feature-prop.csv"), &report.clocknet_feature)?;
    write_sweep(&out.join("clocknet_box-prop.csv"), &report.clocknet_box)?;
    write_json(&out.join("report.json"), &report)?;
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if !report.passed() {
        return Err(assertion("some pattern checks failed"));
    }
    Ok(())
}
