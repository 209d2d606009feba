//! Command-line front end for the two-view forecaster.
//!
//! Every subcommand writes into its own output directory together with a
//! [`RunManifest`]; rerunning a command with the same arguments reproduces
//! every output byte for byte (the manifest's wall-clock field aside).

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use coview_core::conformal::{
    band_file_name, calibrate as calibrate_band, evaluate_band, read_band, score_all, uq_rows, write_band,
    write_forecasts, build_region, Method, PredictionRegion, QuantileBand, ScoreKind,
};
use coview_core::encoder::EncoderConfig;
use coview_core::fusion::FusionConfig;
use coview_core::metrics::{metric_rows_csv, BestModeRule, MetricRow};
use coview_core::model::{prepare_all, AgentForecast, FusionMode, Model, ModelConfig, PreparedScenario};
use coview_core::scene::{read_scenarios, write_scenarios, Point, Scenario, View};
use coview_core::synthgen::{generate, GenConfig};
use coview_core::trainer::{forecasts, metrics_csv, split, summarize_forecasts, train, TrainConfig};
use coview_core::{numerics::NumericsError, Error};

pub mod manifest;

pub use manifest::{RunManifest, MANIFEST_FILE};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const SCENARIOS_FILE: &str = "scenarios.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SPLITS_FILE: &str = "splits.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::Synth(_) => EXIT_USAGE,
                Error::NonPositiveScale(_) | Error::Diverged { .. } => EXIT_NUMERICAL,
                Error::Numerics(n) => match n {
                    NumericsError::Io(_) | NumericsError::Json(_) | NumericsError::Checkpoint(_) => EXIT_DATA,
                    _ => EXIT_NUMERICAL,
                },
                Error::Scene(_) | Error::Data(_) | Error::Io(_) | Error::Json(_) => EXIT_DATA,
            },
        }
    }
}

impl From<coview_core::scene::SceneError> for CliError {
    fn from(e: coview_core::scene::SceneError) -> Self {
        CliError::Core(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "coview", version, about = "Two-view trajectory forecasting with conformal regions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic scenario set.
    Generate(GenerateArgs),
    /// Train a model and keep the best-validation checkpoint.
    Train(TrainArgs),
    /// minADE / minFDE / MR on a data split, ego-only and fused.
    Evaluate(EvaluateArgs),
    /// Conformal bands for every score, method and alpha requested.
    Calibrate(CalibrateArgs),
    /// Coverage/size table and plot-ready dumps for calibrated bands.
    Report(ReportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub scenarios: usize,
    #[arg(long, default_value_t = coview_core::scene::DEFAULT_HISTORY_LEN)]
    pub history: usize,
    #[arg(long, default_value_t = coview_core::scene::DEFAULT_FUTURE_LEN)]
    pub future: usize,
    #[arg(long, default_value_t = 0.5)]
    pub occlusion_rate: f64,
    #[arg(long, default_value_t = 4)]
    pub min_agents: usize,
    #[arg(long, default_value_t = 8)]
    pub max_agents: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Scenario JSONL file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    /// Keep the learning rate constant instead of cosine annealing.
    #[arg(long)]
    pub constant_lr: bool,
    /// Inputs seen during training; `ego` trains a separate vehicle-only baseline.
    #[arg(long, default_value = "fused", value_parser = parse_mode)]
    pub mode: FusionMode,
    /// Graph and fusion neighborhood radius in meters.
    #[arg(long, default_value_t = 50.0)]
    pub radius: f64,
    #[arg(long, default_value_t = 6)]
    pub modes: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long, default_value_t = 0.6)]
    pub train_ratio: f64,
    #[arg(long, default_value_t = 0.2)]
    pub val_ratio: f64,
    /// Weight of the classification term.
    #[arg(long, default_value_t = 1.0)]
    pub epsilon: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Modes to evaluate; both when omitted.
    #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
    pub mode: Vec<FusionMode>,
    /// Split file written by `train`; defaults to the one beside the checkpoint.
    #[arg(long)]
    pub splits: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: SplitName,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.1, 0.05])]
    pub alpha: Vec<f64>,
    /// Score functions; all three when omitted.
    #[arg(long, value_delimiter = ',', value_parser = parse_score)]
    pub score: Vec<ScoreKind>,
    /// Quantile procedures; both when omitted.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    pub method: Vec<Method>,
    #[arg(long, default_value = "fused", value_parser = parse_mode)]
    pub mode: FusionMode,
    /// Seed of the copula calibration split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub splits: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory holding the band files from `calibrate`.
    #[arg(long)]
    pub bands: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "fused", value_parser = parse_mode)]
    pub mode: FusionMode,
    #[arg(long)]
    pub splits: Option<PathBuf>,
    /// Number of test scenarios dumped for plotting.
    #[arg(long, default_value_t = 4)]
    pub plots: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Cal,
    Test,
}

fn parse_mode(s: &str) -> Result<FusionMode, String> {
    match s {
        "ego" => Ok(FusionMode::Ego),
        "fused" => Ok(FusionMode::Fused),
        other => Err(format!("expected ego or fused, got {other:?}")),
    }
}

fn parse_score(s: &str) -> Result<ScoreKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Scenario ids of every split, written by `train` and read back by the
/// downstream commands so they all see the same partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub cal: Vec<String>,
    pub test: Vec<String>,
}

impl SplitIds {
    pub fn get(&self, which: SplitName) -> &[String] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Cal => &self.cal,
            SplitName::Test => &self.test,
        }
    }
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Calibrate(a) => cmd_calibrate(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn snapshot<T: Serialize>(args: &T) -> serde_json::Value {
    serde_json::to_value(args).unwrap_or(serde_json::Value::Null)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn finish(mut manifest: RunManifest, dir: &Path, started: Instant) -> Result<(), CliError> {
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest.write(dir)
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let cfg = GenConfig {
        n_scenarios: a.scenarios,
        min_agents: a.min_agents,
        max_agents: a.max_agents,
        history_len: a.history,
        future_len: a.future,
        occlusion_rate: a.occlusion_rate,
        seed: a.seed,
        ..Default::default()
    };
    let scenarios = generate(&cfg).map_err(Error::from)?;
    create_dir(&a.out)?;
    write_scenarios(a.out.join(SCENARIOS_FILE), &scenarios)?;
    log::info!("wrote {} scenarios to {}", scenarios.len(), a.out.display());

    let mut m = RunManifest::new("generate", a.seed, serde_json::json!({ "args": snapshot(a), "generator": cfg }));
    m.output(SCENARIOS_FILE);
    finish(m, &a.out, started)
}

/// Reads scenarios and checks that they share one horizon pair.
fn load_scenarios(path: &Path) -> Result<Vec<Scenario>, CliError> {
    let scenarios = read_scenarios(path)?;
    let Some(first) = scenarios.first() else {
        return Err(Error::Data(format!("{} holds no scenarios", path.display())).into());
    };
    if let Some(s) = scenarios
        .iter()
        .find(|s| s.history_len != first.history_len || s.future_len != first.future_len)
    {
        return Err(Error::Data(format!(
            "scenario {} has T_h={}, T_f={} but {} has T_h={}, T_f={}",
            s.scenario_id, s.history_len, s.future_len, first.scenario_id, first.history_len, first.future_len
        ))
        .into());
    }
    Ok(scenarios)
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let scenarios = load_scenarios(&a.data)?;
    let (th, tf) = (scenarios[0].history_len, scenarios[0].future_len);
    let data = prepare_all(&scenarios, a.radius)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        weight_decay: a.weight_decay,
        dropout: a.dropout,
        cosine: !a.constant_lr,
        seed: a.seed,
        train_ratio: a.train_ratio,
        val_ratio: a.val_ratio,
        epsilon: a.epsilon,
        mode: a.mode,
        ..Default::default()
    };
    let splits = split(&data, &cfg)?;
    let model_cfg = ModelConfig {
        encoder: EncoderConfig {
            d_h: a.d_model,
            n_heads: a.heads,
            radius: a.radius,
            ..Default::default()
        },
        fusion: FusionConfig {
            n_heads: a.heads,
            radius: a.radius,
            ..Default::default()
        },
        modes: a.modes,
        history_len: th,
        future_len: tf,
        seed: a.seed,
    };
    let model = Model::new(model_cfg.clone())?;
    log::info!(
        "training {} model on {} scenarios ({} parameters)",
        a.mode.as_str(),
        splits.train.len(),
        model.params.num_scalars()
    );
    let outcome = train(model, &splits.train, &splits.val, &cfg)?;

    create_dir(&a.out)?;
    outcome.model.save(a.out.join(CHECKPOINT_FILE))?;
    std::fs::write(a.out.join("metrics.csv"), metrics_csv(&outcome.log))?;
    let ids = |v: &[PreparedScenario]| v.iter().map(|p| p.scenario_id.clone()).collect::<Vec<_>>();
    let split_ids = SplitIds {
        train: ids(&splits.train),
        val: ids(&splits.val),
        cal: ids(&splits.cal),
        test: ids(&splits.test),
    };
    std::fs::write(a.out.join(SPLITS_FILE), serde_json::to_string_pretty(&split_ids)? + "\n")?;

    let mut m = RunManifest::new(
        "train",
        a.seed,
        serde_json::json!({ "args": snapshot(a), "train": cfg, "model": model_cfg, "best_epoch": outcome.best_epoch }),
    );
    m.input(&a.data);
    for f in [CHECKPOINT_FILE, "metrics.csv", SPLITS_FILE] {
        m.output(f);
    }
    finish(m, &a.out, started)
}

fn splits_path(explicit: &Option<PathBuf>, checkpoint: &Path) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join(SPLITS_FILE))
}

/// Loads the checkpoint and the requested split of the data, prepared with
/// the checkpoint's neighborhood radius.
fn load_split(
    data: &Path,
    checkpoint: &Path,
    splits: &Option<PathBuf>,
    which: SplitName,
) -> Result<(Model, Vec<PreparedScenario>, PathBuf), CliError> {
    let model = Model::load(checkpoint)?;
    let scenarios = load_scenarios(data)?;
    let s = &scenarios[0];
    if s.history_len != model.config.history_len || s.future_len != model.config.future_len {
        return Err(Error::Data(format!(
            "{} has T_h={}, T_f={} but the checkpoint expects T_h={}, T_f={}",
            data.display(),
            s.history_len,
            s.future_len,
            model.config.history_len,
            model.config.future_len
        ))
        .into());
    }
    let sp = splits_path(splits, checkpoint);
    let text = std::fs::read_to_string(&sp)
        .map_err(|e| Error::Data(format!("cannot read split file {}: {e}", sp.display())))?;
    let ids: SplitIds = serde_json::from_str(&text)?;
    let wanted = ids.get(which);
    let picked: Vec<Scenario> = wanted
        .iter()
        .map(|id| {
            scenarios
                .iter()
                .find(|s| &s.scenario_id == id)
                .cloned()
                .ok_or_else(|| Error::Data(format!("scenario {id} from {} is not in {}", sp.display(), data.display())))
        })
        .collect::<Result<_, _>>()?;
    let prepared = prepare_all(&picked, model.config.encoder.radius)?;
    Ok((model, prepared, sp))
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let (model, data, sp) = load_split(&a.data, &a.checkpoint, &a.splits, a.split)?;
    let modes = if a.mode.is_empty() {
        vec![FusionMode::Ego, FusionMode::Fused]
    } else {
        a.mode.clone()
    };
    let mut rows = Vec::new();
    for mode in modes {
        let f = forecasts(&model, &data, mode)?;
        let s = summarize_forecasts(&f, BestModeRule::MinFde);
        log::info!(
            "{}: minADE {:.3} minFDE {:.3} MR {:.3} over {} agents",
            mode.as_str(),
            s.min_ade,
            s.min_fde,
            s.miss_rate,
            s.agents
        );
        for (metric, value) in [("minADE", s.min_ade), ("minFDE", s.min_fde), ("MR", s.miss_rate)] {
            rows.push(MetricRow {
                metric: metric.to_string(),
                alpha: None,
                method: Some(mode.as_str().to_string()),
                score: None,
                value,
            });
        }
    }
    create_dir(&a.out)?;
    std::fs::write(a.out.join("evaluation.csv"), metric_rows_csv(&rows))?;
    let mut m = RunManifest::new("evaluate", 0, snapshot(a));
    m.input(&a.data);
    m.input(&a.checkpoint);
    m.input(&sp);
    m.output("evaluation.csv");
    finish(m, &a.out, started)
}

fn all_or<T: Copy>(chosen: &[T], all: &[T]) -> Vec<T> {
    if chosen.is_empty() {
        all.to_vec()
    } else {
        chosen.to_vec()
    }
}

pub fn cmd_calibrate(a: &CalibrateArgs) -> Result<(), CliError> {
    let started = Instant::now();
    if a.alpha.is_empty() {
        return Err(CliError::Usage("--alpha needs at least one value".into()));
    }
    let (model, data, sp) = load_split(&a.data, &a.checkpoint, &a.splits, SplitName::Cal)?;
    let cal = forecasts(&model, &data, a.mode)?;
    log::info!("calibrating on {} agents", cal.len());
    create_dir(&a.out)?;
    let mut m = RunManifest::new("calibrate", a.seed, snapshot(a));
    m.input(&a.data);
    m.input(&a.checkpoint);
    m.input(&sp);
    for kind in all_or(&a.score, &ScoreKind::ALL) {
        let scores = score_all(&cal, kind)?;
        for method in all_or(&a.method, &Method::ALL) {
            for &alpha in &a.alpha {
                let band = calibrate_band(&scores, method, alpha, a.seed)?;
                if band.infinite {
                    log::warn!("{method}/{kind} at alpha {alpha} is unbounded: too few calibration agents");
                }
                let name = band_file_name(&band);
                write_band(a.out.join(&name), &band)?;
                m.output(name);
            }
        }
    }
    finish(m, &a.out, started)
}

/// Band files of a directory in name order.
pub fn read_bands(dir: &Path) -> Result<Vec<QuantileBand>, CliError> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("band_") && n.ends_with(".json"))
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Data(format!("no band files in {}", dir.display())).into());
    }
    Ok(names.iter().map(read_band).collect::<Result<_, _>>()?)
}

#[derive(Serialize)]
struct PlotAgent {
    id: String,
    view: View,
    history: Vec<Point>,
}

#[derive(Serialize)]
struct PlotBandRegion {
    band: String,
    region: PredictionRegion,
}

#[derive(Serialize)]
struct PlotTarget<'a> {
    forecast: &'a AgentForecast,
    history: Vec<Point>,
    regions: Vec<PlotBandRegion>,
}

#[derive(Serialize)]
struct PlotScenario<'a> {
    scenario_id: String,
    lanes: Vec<[Point; 2]>,
    agents: Vec<PlotAgent>,
    targets: Vec<PlotTarget<'a>>,
}

pub fn cmd_report(a: &ReportArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let bands = read_bands(&a.bands)?;
    let (model, data, sp) = load_split(&a.data, &a.checkpoint, &a.splits, SplitName::Test)?;
    let test = forecasts(&model, &data, a.mode)?;
    let mut rows = Vec::new();
    for band in &bands {
        if band.future_len != model.config.future_len {
            return Err(Error::Data(format!(
                "band {} covers {} steps but the checkpoint predicts {}",
                band_file_name(band),
                band.future_len,
                model.config.future_len
            ))
            .into());
        }
        let m = evaluate_band(&test, band)?;
        rows.extend(uq_rows(&m, band));
    }
    create_dir(&a.out)?;
    std::fs::write(a.out.join("uq_metrics.csv"), metric_rows_csv(&rows))?;
    write_forecasts(a.out.join("forecasts.jsonl"), &test)?;

    // plot dumps, all in the ego frame of each scenario
    let mut plots = Vec::new();
    for p in data.iter().take(a.plots) {
        let targets = test
            .iter()
            .filter(|f| f.scenario_id == p.scenario_id)
            .map(|f| {
                let history = p
                    .ns
                    .agent(&f.agent_id, View::Vehicle)
                    .map(|ag| ag.history.clone())
                    .unwrap_or_default();
                let regions = bands
                    .iter()
                    .map(|b| {
                        Ok(PlotBandRegion {
                            band: band_file_name(b),
                            region: build_region(&f.prediction, b)?,
                        })
                    })
                    .collect::<Result<Vec<_>, Error>>()?;
                Ok(PlotTarget {
                    forecast: f,
                    history,
                    regions,
                })
            })
            .collect::<Result<Vec<_>, Error>>()?;
        plots.push(PlotScenario {
            scenario_id: p.scenario_id.clone(),
            lanes: p.ns.lanes_in(View::Vehicle).map(|l| [l.start, l.end]).collect(),
            agents: p
                .ns
                .agents
                .iter()
                .map(|ag| PlotAgent {
                    id: ag.id.clone(),
                    view: ag.view,
                    history: ag.history.clone(),
                })
                .collect(),
            targets,
        });
    }
    std::fs::write(a.out.join("plots.json"), serde_json::to_string(&plots)? + "\n")?;

    let mut m = RunManifest::new("report", 0, snapshot(a));
    m.input(&a.data);
    m.input(&a.checkpoint);
    m.input(&a.bands);
    m.input(&sp);
    for f in ["uq_metrics.csv", "forecasts.jsonl", "plots.json"] {
        m.output(f);
    }
    finish(m, &a.out, started)
}
