mod manifest;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lstan_core::data::{series_from_csv, synth_generate, Dataset, MissingPolicy, TrafficSeries, DEFAULT_INTERVAL_MINUTES};
use lstan_core::graph::RoadGraph;
use lstan_core::metrics::{evaluate, evaluate_last_observation, one_step_curve, Evaluation};
use lstan_core::model::{Checkpoint, Forecaster, ModelConfig};
use lstan_core::pipeline::{train_and_evaluate, RunReport};
use lstan_core::train::{StopReason, TrainConfig};
use lstan_core::{Error, ErrorCategory, Result, RotateVariant};

use manifest::{io_err, DatasetRef, Outputs, RecordedMetrics, RunManifest, TOOL_VERSION};

#[derive(Parser)]
#[command(name = "lstan", version, about = "Spatio-temporal attention traffic forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic ring-road dataset and its adjacency list.
    Synth(SynthArgs),
    /// Convert a CSV of readings into the binary series format.
    Convert(ConvertArgs),
    /// Train a model and write checkpoint, manifest and history.
    Train(TrainArgs),
    /// Score a checkpoint on one partition of a dataset.
    Eval(EvalArgs),
    /// Train the complete model and its four single-component ablations.
    Ablate(TrainArgs),
    /// Re-run the training recorded in a manifest and compare metrics.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    nodes: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gaussian noise standard deviation, relative to the unit signal amplitude.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Sampling interval in minutes, stored in the file header.
    #[arg(long, default_value_t = DEFAULT_INTERVAL_MINUTES)]
    interval: u32,
    /// Output series file.
    #[arg(long)]
    series: PathBuf,
    /// Output adjacency CSV.
    #[arg(long)]
    graph: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Missing {
    ForwardFill,
    Reject,
}

impl From<Missing> for MissingPolicy {
    fn from(m: Missing) -> Self {
        match m {
            Missing::ForwardFill => MissingPolicy::ForwardFill,
            Missing::Reject => MissingPolicy::Reject,
        }
    }
}

#[derive(Args)]
struct ConvertArgs {
    /// CSV with one row per step and sensors × channels columns, sensor-major.
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Channels recorded per sensor.
    #[arg(long, default_value_t = 1)]
    channels: usize,
    /// Channel to keep.
    #[arg(long, default_value_t = 0)]
    channel: usize,
    #[arg(long, default_value_t = DEFAULT_INTERVAL_MINUTES)]
    interval: u32,
    #[arg(long, value_enum, default_value_t = Missing::ForwardFill)]
    missing: Missing,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rotate {
    Standard,
    PaperLiteral,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Series file; relative paths fall back to $LSTAN_DATA_DIR.
    #[arg(long)]
    series: PathBuf,
    /// Adjacency CSV; relative paths fall back to $LSTAN_DATA_DIR.
    #[arg(long)]
    graph: PathBuf,
    /// Treat every listed edge as weight 1.
    #[arg(long)]
    unweighted: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 12)]
    window: usize,
    #[arg(long, default_value_t = lstan_core::model::DEFAULT_EMBED_DIM)]
    embed_dim: usize,
    #[arg(long, default_value_t = lstan_core::model::DEFAULT_DEPTH)]
    depth: usize,
    #[arg(long, default_value_t = lstan_core::rope::DEFAULT_THETA)]
    theta_spatial: f64,
    #[arg(long, default_value_t = lstan_core::rope::DEFAULT_THETA)]
    theta_temporal: f64,
    #[arg(long, value_enum, default_value_t = Rotate::Standard)]
    rotate: Rotate,
    #[arg(long)]
    residual: bool,
    #[arg(long, default_value_t = 1.0)]
    huber_delta: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 15)]
    patience: usize,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    /// Seeds both parameter initialisation and batch shuffling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Zero the rotary phases.
    #[arg(long)]
    no_rope: bool,
    /// Drop spatial attention from every pair.
    #[arg(long)]
    no_spatial: bool,
    /// Drop temporal attention from every pair.
    #[arg(long)]
    no_temporal: bool,
    /// Skip the graph embedding.
    #[arg(long)]
    no_graph_embed: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Partition {
    Val,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = Partition::Test)]
    split: Partition,
    /// Print metrics for every horizon step.
    #[arg(long)]
    per_horizon: bool,
    /// Write `(step, truth, forecast)` rows for `--node` to this CSV.
    #[arg(long)]
    export_curves: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    node: usize,
    /// Also write the metrics as JSON.
    #[arg(long)]
    metrics_json: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Where the replayed run writes its files; defaults to a `replay` directory next to the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Convert(a) => cmd_convert(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Replay(a) => cmd_replay(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.category() {
                ErrorCategory::Config => 2,
                ErrorCategory::Data => 3,
                ErrorCategory::Numerical => 4,
            })
        }
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let (series, graph) = synth_generate(a.seed, a.nodes, a.steps, a.noise)?;
    let series = TrafficSeries::new(series.num_nodes(), a.interval, series.values().to_vec())?;
    series.save(&a.series)?;
    std::fs::write(&a.graph, graph.to_csv()).map_err(|e| io_err(&a.graph, e))?;
    println!(
        "wrote {} sensors × {} steps to {} and {} edges to {}",
        series.num_nodes(),
        series.num_steps(),
        a.series.display(),
        graph.edges().len(),
        a.graph.display()
    );
    Ok(())
}

fn cmd_convert(a: &ConvertArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.csv).map_err(|e| io_err(&a.csv, e))?;
    let series = series_from_csv(&text, a.channels, a.channel, a.interval, a.missing.into())?;
    series.save(&a.out)?;
    println!(
        "wrote {} sensors × {} steps to {}",
        series.num_nodes(),
        series.num_steps(),
        a.out.display()
    );
    Ok(())
}

fn resolve(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(dir) = std::env::var_os("LSTAN_DATA_DIR") {
            return Path::new(&dir).join(path);
        }
    }
    path.to_path_buf()
}

struct Loaded {
    series: TrafficSeries,
    graph: RoadGraph,
    dataset: DatasetRef,
}

fn load_data(d: &DataArgs) -> Result<Loaded> {
    let (series_path, graph_path) = (resolve(&d.series), resolve(&d.graph));
    let series = TrafficSeries::load(&series_path, MissingPolicy::ForwardFill)?;
    let graph = RoadGraph::load_csv(&graph_path, series.num_nodes(), !d.unweighted)?;
    let dataset = DatasetRef::new(&series_path, &graph_path, !d.unweighted)?;
    Ok(Loaded { series, graph, dataset })
}

impl TrainArgs {
    fn model_config(&self, num_nodes: usize) -> ModelConfig {
        ModelConfig {
            num_nodes,
            window: self.window,
            embed_dim: self.embed_dim,
            depth: self.depth,
            theta_spatial: self.theta_spatial,
            theta_temporal: self.theta_temporal,
            rotate_variant: match self.rotate {
                Rotate::Standard => RotateVariant::Standard,
                Rotate::PaperLiteral => RotateVariant::PaperLiteral,
            },
            use_rope: !self.no_rope,
            use_spatial: !self.no_spatial,
            use_temporal: !self.no_temporal,
            use_graph_embedding: !self.no_graph_embed,
            residual: self.residual,
            huber_delta: self.huber_delta,
            seed: self.seed,
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.epochs,
            patience: self.patience,
            weight_decay: self.weight_decay,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

fn print_metrics(label: &str, e: &Evaluation) {
    println!("[{label}]");
    println!("{}", e.overall);
}

/// Runs one training job and writes its checkpoint, history, metrics and manifest into `out`.
fn run_training(model_cfg: ModelConfig, train_cfg: TrainConfig, loaded: &Loaded, out: &Path) -> Result<(RunManifest, RunReport)> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let model = Forecaster::new(model_cfg.clone(), &loaded.graph)?;
    let data = Dataset::prepare(&loaded.series, model_cfg.window)?;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let out = &std::fs::canonicalize(out).map_err(|e| io_err(out, e))?;
    println!("parameters: {}", model_cfg.parameter_count());

    let report = train_and_evaluate(&model, &data, &train_cfg)?;
    let outputs = Outputs {
        checkpoint: out.join("model.lstn"),
        history: out.join("history.jsonl"),
        metrics: out.join("metrics.txt"),
    };
    Checkpoint::new(model_cfg.clone(), report.outcome.params.clone())?.save(&outputs.checkpoint)?;
    write_history(&outputs.history, &report)?;
    let mut text = String::new();
    for (label, e) in [("val", &report.val), ("test", &report.test), ("baseline_test", &report.baseline_test)] {
        text.push_str(&format!("[{label}]\n{}\n", e.overall));
    }
    std::fs::write(&outputs.metrics, text).map_err(|e| io_err(&outputs.metrics, e))?;

    let manifest = RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        model: model_cfg,
        train: train_cfg,
        dataset: loaded.dataset.clone(),
        outputs,
        parameter_count: report.outcome.params.scalar_count(),
        epochs_run: report.outcome.history.len(),
        best_epoch: report.outcome.best_epoch,
        stop_reason: report.outcome.stop,
        metrics: RecordedMetrics {
            val: report.val.clone(),
            test: report.test.clone(),
            baseline_test: report.baseline_test.clone(),
        },
    };
    manifest.save(&out.join("manifest.json"))?;
    Ok((manifest, report))
}

fn write_history(path: &Path, report: &RunReport) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in &report.outcome.history {
        let line = serde_json::to_string(rec).expect("history record serialises");
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn diverged(report: &RunReport) -> Result<()> {
    if report.outcome.stop == StopReason::Diverged {
        return Err(Error::Numerical(format!(
            "training diverged after {} epochs; best parameters (epoch {}) were saved",
            report.outcome.history.len(),
            report.outcome.best_epoch
        )));
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let loaded = load_data(&a.data)?;
    let model_cfg = a.model_config(loaded.series.num_nodes());
    let (manifest, report) = run_training(model_cfg, a.train_config(), &loaded, &a.out)?;
    println!(
        "epochs run: {}, best epoch: {}, stop: {:?}",
        manifest.epochs_run, manifest.best_epoch, manifest.stop_reason
    );
    print_metrics("val", &report.val);
    print_metrics("test", &report.test);
    print_metrics("baseline_test", &report.baseline_test);
    println!("checkpoint: {}", manifest.outputs.checkpoint.display());
    diverged(&report)
}

fn cmd_ablate(a: &TrainArgs) -> Result<()> {
    let loaded = load_data(&a.data)?;
    let base = a.model_config(loaded.series.num_nodes());
    let variants: [(&str, fn(&mut ModelConfig)); 5] = [
        ("complete", |_| {}),
        ("no_rope", |c| c.use_rope = false),
        ("no_spatial", |c| c.use_spatial = false),
        ("no_temporal", |c| c.use_temporal = false),
        ("no_graph_embed", |c| c.use_graph_embedding = false),
    ];
    let mut rows = vec!["variant,mae,mape_percent,rmse".to_string()];
    for (name, edit) in variants {
        let mut cfg = base.clone();
        edit(&mut cfg);
        let (_, report) = run_training(cfg, a.train_config(), &loaded, &a.out.join(name))?;
        diverged(&report)?;
        let m = report.test.overall;
        let mape = m.mape_percent.map_or("undefined".to_string(), |v| v.to_string());
        println!("{name}: mae={} mape_percent={mape} rmse={}", m.mae, m.rmse);
        rows.push(format!("{name},{},{mape},{}", m.mae, m.rmse));
    }
    let table = a.out.join("ablation.csv");
    std::fs::write(&table, rows.join("\n") + "\n").map_err(|e| io_err(&table, e))?;
    println!("table: {}", table.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let loaded = load_data(&a.data)?;
    let mut expected = ck.config.clone();
    expected.num_nodes = loaded.series.num_nodes();
    ck.check_compatible(&expected)?;
    let model = Forecaster::new(ck.config.clone(), &loaded.graph)?;
    let data = Dataset::prepare(&loaded.series, ck.config.window)?;
    let (label, windows) = match a.split {
        Partition::Val => ("val", &data.val),
        Partition::Test => ("test", &data.test),
    };
    let eval = evaluate(&model, &ck.params, windows, &data.stats)?;
    print_metrics(label, &eval);
    if a.per_horizon {
        println!("horizon,mae,mape_percent,rmse");
        for (h, m) in eval.per_horizon.iter().enumerate() {
            let mape = m.mape_percent.map_or("undefined".to_string(), |v| v.to_string());
            println!("{},{},{mape},{}", h + 1, m.mae, m.rmse);
        }
    }
    if let Some(path) = &a.metrics_json {
        let baseline = evaluate_last_observation(windows, &data.stats)?;
        let json = serde_json::json!({ "split": label, "model": eval, "last_observation": baseline });
        std::fs::write(path, serde_json::to_string_pretty(&json).expect("metrics serialise") + "\n")
            .map_err(|e| io_err(path, e))?;
    }
    if let Some(path) = &a.export_curves {
        let rows = one_step_curve(&model, &ck.params, windows, &data.stats, a.node)?;
        let mut text = String::from("step,truth,forecast\n");
        for (step, truth, forecast) in rows {
            let f = forecast.map_or(String::new(), |v| v.to_string());
            text.push_str(&format!("{step},{truth},{f}\n"));
        }
        std::fs::write(path, text).map_err(|e| io_err(path, e))?;
        println!("curve for node {}: {}", a.node, path.display());
    }
    Ok(())
}

fn cmd_replay(a: &ReplayArgs) -> Result<()> {
    let recorded = RunManifest::load(&a.manifest)?;
    recorded.dataset.verify()?;
    let data_args = DataArgs {
        series: recorded.dataset.series.clone(),
        graph: recorded.dataset.graph.clone(),
        unweighted: !recorded.dataset.use_weights,
    };
    let loaded = load_data(&data_args)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.manifest.parent().unwrap_or(Path::new(".")).join("replay"));
    let (replayed, _) = run_training(recorded.model.clone(), recorded.train.clone(), &loaded, &out)?;
    if replayed.metrics != recorded.metrics {
        return Err(Error::Numerical(format!(
            "replayed metrics differ from the manifest (test mae {} vs {})",
            replayed.metrics.test.overall.mae, recorded.metrics.test.overall.mae
        )));
    }
    let same_ck = std::fs::read(&replayed.outputs.checkpoint).map_err(|e| io_err(&replayed.outputs.checkpoint, e))?
        == std::fs::read(&recorded.outputs.checkpoint).map_err(|e| io_err(&recorded.outputs.checkpoint, e))?;
    if !same_ck {
        return Err(Error::Numerical("replayed checkpoint differs from the recorded one".into()));
    }
    println!("replay matches: metrics and checkpoint are bit-identical");
    Ok(())
}
