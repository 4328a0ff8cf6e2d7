//! The `tbm` command line: simulate, preprocess, train, evaluate, detect.
//!
//! Every command reads an optional flat JSON config. Flags override file
//! values, which override the defaults. Exit codes: 2 config, 3 I/O,
//! 4 schema, 5 integrity.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::anomaly::{
    detect, detection_rate, false_positive_rate, fit_anomaly_model, make_anomaly_windows, write_verdicts,
    AnomalyError, AnomalySplits, VaeModelConfig,
};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::preprocess::{
    preprocess, read_excavation, read_fused_csv, read_geology, sha256_hex, write_excavation, write_fused_csv,
    write_geology, FusedDataset, Manifest, PreprocessConfig, PreprocessError, Task, Word2VecConfig,
};
use crate::rate::{
    evaluate, feature_columns, fit_rate_model, rate_splits, run_ablation, RateError, RateModelConfig,
};
use crate::synth::{default_regimes, simulate, FaultKind, FaultLabels, FaultPlan, GeologyRegime, SimConfig, SynthError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error("integrity: {0}")]
    Integrity(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Schema(_) => 4,
            CliError::Integrity(_) => 5,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

impl From<PreprocessError> for CliError {
    fn from(e: PreprocessError) -> Self {
        match e {
            PreprocessError::Io(_) => CliError::Io(e.to_string()),
            PreprocessError::InvalidConfig(_) | PreprocessError::InvalidWindow(_) => CliError::Config(e.to_string()),
            _ => CliError::Schema(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<RateError> for CliError {
    fn from(e: RateError) -> Self {
        match e {
            RateError::ConfigInvalid(_) => CliError::Config(e.to_string()),
            RateError::Preprocess(p) => p.into(),
            _ => CliError::Schema(e.to_string()),
        }
    }
}

impl From<AnomalyError> for CliError {
    fn from(e: AnomalyError) -> Self {
        match e {
            AnomalyError::ConfigInvalid(_) => CliError::Config(e.to_string()),
            AnomalyError::Preprocess(p) => p.into(),
            _ => CliError::Schema(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Integrity(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "tbm", version, about = "Shield machine telemetry: advance-rate prediction and anomaly detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the report JSON on stdout.
    #[arg(long)]
    pub stdout: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate geology, telemetry and fault labels.
    Simulate(Common),
    /// Fuse and normalise raw CSVs for one task.
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: Option<Task>,
    },
    /// Train the advance-rate model.
    TrainRate(Common),
    /// Evaluate a rate checkpoint on the test split.
    EvalRate {
        #[command(flatten)]
        common: Common,
        /// Train and report all eight ablation cells instead.
        #[arg(long)]
        ablation: bool,
    },
    /// Train the anomaly detector and calibrate its threshold.
    TrainAnomaly(Common),
    /// Score windows and flag anomalies.
    Detect(Common),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    pub out_dir: PathBuf,
    pub rings: u32,
    pub rows_per_ring: usize,
    pub change_prob: f64,
    pub noise_sigma: f64,
    pub window_len: usize,
    pub fault_count: usize,
    pub abnormal_fraction: f64,
    pub channels_per_window: usize,
    pub fault_magnitude: f64,
    pub fault_kinds: Vec<FaultKind>,
    pub regimes: Vec<GeologyRegime>,
    pub seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        let s = SimConfig::default();
        Self {
            out_dir: "data".into(),
            rings: s.rings,
            rows_per_ring: s.rows_per_ring,
            change_prob: s.change_prob,
            noise_sigma: s.noise_sigma,
            window_len: s.window_len,
            fault_count: s.faults.count,
            abnormal_fraction: s.faults.abnormal_fraction,
            channels_per_window: s.faults.channels_per_window,
            fault_magnitude: s.faults.magnitude,
            fault_kinds: s.faults.kinds,
            regimes: default_regimes(),
            seed: s.seed,
        }
    }
}

impl SimulateConfig {
    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            rings: self.rings,
            rows_per_ring: self.rows_per_ring,
            change_prob: self.change_prob,
            noise_sigma: self.noise_sigma,
            window_len: self.window_len,
            faults: FaultPlan {
                count: self.fault_count,
                abnormal_fraction: self.abnormal_fraction,
                channels_per_window: self.channels_per_window,
                magnitude: self.fault_magnitude,
                kinds: self.fault_kinds.clone(),
            },
            regimes: self.regimes.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessCmdConfig {
    pub task: Task,
    pub geology: PathBuf,
    /// Defaults to the fault-free telemetry for the rate task and the
    /// faulted telemetry for the anomaly task.
    pub excavation: Option<PathBuf>,
    /// Anomaly task: labels whose normal segment bounds the fit rows.
    pub labels: PathBuf,
    /// Defaults to `data/<task>`.
    pub out_dir: Option<PathBuf>,
    pub embedding_dim: usize,
    pub embedding_window: usize,
    pub embedding_epochs: usize,
    pub despike_window: usize,
    pub despike_k: f64,
    pub smooth_window: usize,
    /// Anomaly window length: turns the labels into fit rows and bounds
    /// the smoothing blocks.
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for PreprocessCmdConfig {
    fn default() -> Self {
        let p = PreprocessConfig::default();
        Self {
            task: p.task,
            geology: "data/geology.csv".into(),
            excavation: None,
            labels: "data/labels.json".into(),
            out_dir: None,
            embedding_dim: p.embedding.dim,
            embedding_window: p.embedding.window,
            embedding_epochs: p.embedding.epochs,
            despike_window: p.despike_window,
            despike_k: p.despike_k,
            smooth_window: p.smooth_window,
            seq_len: VaeModelConfig::default().seq_len,
            seed: p.embedding.seed,
        }
    }
}

fn task_dir(task: Task) -> PathBuf {
    match task {
        Task::Rate => "data/rate".into(),
        Task::Anomaly => "data/anomaly".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRateConfig {
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub report: PathBuf,
    #[serde(flatten)]
    pub model: RateModelConfig,
}

impl Default for TrainRateConfig {
    fn default() -> Self {
        Self {
            data_dir: task_dir(Task::Rate),
            checkpoint: "data/rate/model.json".into(),
            report: "data/rate/training.json".into(),
            model: RateModelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalRateConfig {
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub report: PathBuf,
    pub ablation_report: PathBuf,
    pub seed: Option<u64>,
}

impl Default for EvalRateConfig {
    fn default() -> Self {
        Self {
            data_dir: task_dir(Task::Rate),
            checkpoint: "data/rate/model.json".into(),
            report: "data/rate/eval.json".into(),
            ablation_report: "data/rate/ablation.json".into(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainAnomalyConfig {
    pub data_dir: PathBuf,
    pub labels: PathBuf,
    pub checkpoint: PathBuf,
    pub report: PathBuf,
    #[serde(flatten)]
    pub model: VaeModelConfig,
}

impl Default for TrainAnomalyConfig {
    fn default() -> Self {
        Self {
            data_dir: task_dir(Task::Anomaly),
            labels: "data/labels.json".into(),
            checkpoint: "data/anomaly/model.json".into(),
            report: "data/anomaly/training.json".into(),
            model: VaeModelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub data_dir: PathBuf,
    /// Without labels only the verdicts and flag count are reported.
    pub labels: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub verdicts: PathBuf,
    pub report: PathBuf,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            data_dir: task_dir(Task::Anomaly),
            labels: Some("data/labels.json".into()),
            checkpoint: "data/anomaly/model.json".into(),
            verdicts: "data/anomaly/verdicts.csv".into(),
            report: "data/anomaly/detect.json".into(),
        }
    }
}

/// Reads a flat JSON config over the defaults. Keys the config type does
/// not know are rejected.
pub fn load_config<T>(path: Option<&Path>) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = read_text(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let Some(given) = value.as_object() else {
        return Err(CliError::Config(format!("{}: expected a JSON object", path.display())));
    };
    let parsed: T =
        serde_json::from_value(value.clone()).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let known = serde_json::to_value(&parsed).expect("config serialises");
    let known = known.as_object().expect("configs are objects");
    if let Some(key) = given.keys().find(|k| !known.contains_key(*k)) {
        return Err(CliError::Config(format!("{}: unknown key `{key}`", path.display())));
    }
    Ok(parsed)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| io_err(path, e))
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| io_err(path, e))
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::File::create(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    use std::io::Write;
    create(path)?.write_all(text.as_ref()).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("reports serialise");
    s.push('\n');
    s
}

/// A preprocessed task directory: `fused.csv` plus `manifest.json`.
struct TaskData {
    dataset: FusedDataset,
    manifest_hash: String,
}

fn load_task_data(dir: &Path) -> Result<TaskData> {
    let manifest_path = dir.join("manifest.json");
    let bytes = read_bytes(&manifest_path)?;
    let manifest = Manifest::from_json(&bytes)?;
    let fused_path = dir.join("fused.csv");
    let samples = read_fused_csv(open(&fused_path)?)?;
    if samples.len() != manifest.rows || samples.iter().any(|s| s.features.len() != manifest.feature_dim()) {
        return Err(CliError::Integrity(format!(
            "{} does not match its manifest ({} rows of {} features expected)",
            fused_path.display(),
            manifest.rows,
            manifest.feature_dim()
        )));
    }
    Ok(TaskData {
        dataset: FusedDataset { samples, manifest },
        manifest_hash: sha256_hex(&bytes),
    })
}

fn read_labels(path: &Path) -> Result<FaultLabels> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::from_json(&read_text(path)?)?)
}

/// Runs one command and returns the report JSON it produced, if any.
pub fn run(cli: Cli) -> Result<Option<String>> {
    let stdout = match &cli.command {
        Command::Simulate(c) | Command::TrainRate(c) | Command::TrainAnomaly(c) | Command::Detect(c) => c.stdout,
        Command::Preprocess { common, .. } | Command::EvalRate { common, .. } => common.stdout,
    };
    let out = match cli.command {
        Command::Simulate(c) => cmd_simulate(&c),
        Command::Preprocess { common, task } => cmd_preprocess(&common, task),
        Command::TrainRate(c) => cmd_train_rate(&c),
        Command::EvalRate { common, ablation } => cmd_eval_rate(&common, ablation),
        Command::TrainAnomaly(c) => cmd_train_anomaly(&c),
        Command::Detect(c) => cmd_detect(&c),
    }?;
    if stdout {
        if let Some(text) = &out {
            print!("{text}");
        }
    }
    Ok(out)
}

fn cmd_simulate(c: &Common) -> Result<Option<String>> {
    let mut cfg: SimulateConfig = load_config(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let out = simulate(&cfg.sim_config())?;
    let dir = &cfg.out_dir;
    write_geology(create(&dir.join("geology.csv"))?, &out.geology)?;
    write_excavation(create(&dir.join("excavation.csv"))?, &out.excavation)?;
    write_excavation(create(&dir.join("excavation_clean.csv"))?, &out.excavation_clean)?;
    let labels = to_json(&out.labels);
    write_text(&dir.join("labels.json"), &labels)?;
    log::info!(
        "simulated {} rings, {} telemetry rows, {} fault windows into {}",
        out.geology.len(),
        out.excavation.len(),
        out.labels.fault_windows.len(),
        dir.display()
    );
    Ok(Some(labels))
}

fn cmd_preprocess(c: &Common, task: Option<Task>) -> Result<Option<String>> {
    let mut cfg: PreprocessCmdConfig = load_config(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(t) = task {
        cfg.task = t;
    }
    let excavation = cfg.excavation.clone().unwrap_or_else(|| match cfg.task {
        Task::Rate => "data/excavation_clean.csv".into(),
        Task::Anomaly => "data/excavation.csv".into(),
    });
    let fit_rows = match cfg.task {
        Task::Rate => None,
        Task::Anomaly => {
            let labels = read_labels(&cfg.labels)?;
            let splits = AnomalySplits::new(labels.total_windows, labels.normal_windows)?;
            Some(splits.fit_rows(cfg.seq_len))
        }
    };
    let pcfg = PreprocessConfig {
        task: cfg.task,
        embedding: Word2VecConfig {
            dim: cfg.embedding_dim,
            window: cfg.embedding_window,
            epochs: cfg.embedding_epochs,
            seed: cfg.seed,
        },
        despike_window: cfg.despike_window,
        despike_k: cfg.despike_k,
        smooth_window: cfg.smooth_window,
        smooth_block: cfg.seq_len,
        fit_rows,
    };
    let geo = read_geology(open(&cfg.geology)?)?;
    let exc = read_excavation(open(&excavation)?)?;
    let ds = preprocess(&geo, &exc, &pcfg, None)?;
    let dir = cfg.out_dir.clone().unwrap_or_else(|| task_dir(cfg.task));
    write_fused_csv(create(&dir.join("fused.csv"))?, &ds.samples)?;
    write_text(&dir.join("manifest.json"), ds.manifest.to_json())?;
    log::info!(
        "{} fused rows of {} features into {}",
        ds.samples.len(),
        ds.manifest.feature_dim(),
        dir.display()
    );
    Ok(None)
}

fn cmd_train_rate(c: &Common) -> Result<Option<String>> {
    let mut cfg: TrainRateConfig = load_config(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.model.seed = s;
    }
    let data = load_task_data(&cfg.data_dir)?;
    let (model, report, metrics) = fit_rate_model(&cfg.model, &data.dataset)?;
    write_text(&cfg.checkpoint, &Checkpoint::from_rate(&model, &data.manifest_hash).to_json())?;
    log::info!(
        "best epoch {} of {}, test r2 {:.4} mse {:.5}",
        report.best_epoch,
        report.train_loss.len(),
        metrics.r2,
        metrics.mse
    );
    let out = to_json(&report);
    write_text(&cfg.report, &out)?;
    Ok(Some(out))
}

fn cmd_eval_rate(c: &Common, ablation: bool) -> Result<Option<String>> {
    let mut cfg: EvalRateConfig = load_config(c.config.as_deref())?;
    if c.seed.is_some() {
        cfg.seed = c.seed;
    }
    let data = load_task_data(&cfg.data_dir)?;
    let ckpt = load_checkpoint(&cfg.checkpoint)?;
    ckpt.verify_manifest(&data.manifest_hash)?;
    let model = ckpt.to_rate_model()?;
    if ablation {
        let mut base = model.config.clone();
        if let Some(s) = cfg.seed {
            base.seed = s;
        }
        let report = run_ablation(&base, &data.dataset)?;
        let out = to_json(&report);
        write_text(&cfg.ablation_report, &out)?;
        return Ok(Some(out));
    }
    let cols = feature_columns(&data.dataset.manifest, model.config.use_geology);
    let splits = rate_splits(&data.dataset.samples, &cols, model.config.window_len)?;
    let metrics = evaluate(&model, &splits.test)?;
    log::info!("test r2 {:.4} mse {:.5}", metrics.r2, metrics.mse);
    let out = to_json(&metrics);
    write_text(&cfg.report, &out)?;
    Ok(Some(out))
}

fn anomaly_splits(labels: &FaultLabels, windows: usize) -> Result<AnomalySplits> {
    if labels.total_windows != windows {
        return Err(CliError::Integrity(format!(
            "labels describe {} windows, the data has {windows}",
            labels.total_windows
        )));
    }
    Ok(AnomalySplits::new(labels.total_windows, labels.normal_windows)?)
}

fn cmd_train_anomaly(c: &Common) -> Result<Option<String>> {
    let mut cfg: TrainAnomalyConfig = load_config(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.model.seed = s;
    }
    cfg.model.validate()?;
    let data = load_task_data(&cfg.data_dir)?;
    let labels = read_labels(&cfg.labels)?;
    let windows = make_anomaly_windows(&data.dataset, cfg.model.seq_len)?;
    let splits = anomaly_splits(&labels, windows.len())?;
    if data.dataset.manifest.fit_rows != splits.fit_rows(cfg.model.seq_len) {
        return Err(CliError::Integrity(
            "manifest was fit on rows outside the training windows".into(),
        ));
    }
    let fit = fit_anomaly_model(&cfg.model, &windows, &splits)?;
    write_text(
        &cfg.checkpoint,
        &Checkpoint::from_anomaly(&fit.model, fit.threshold, &data.manifest_hash).to_json(),
    )?;
    log::info!("threshold {:.6}", fit.threshold);
    let out = to_json(&fit.report);
    write_text(&cfg.report, &out)?;
    Ok(Some(out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectReport {
    pub threshold: f64,
    pub windows: usize,
    pub flagged: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub false_positive_rate: Option<f64>,
}

fn cmd_detect(c: &Common) -> Result<Option<String>> {
    let cfg: DetectConfig = load_config(c.config.as_deref())?;
    let data = load_task_data(&cfg.data_dir)?;
    let ckpt = load_checkpoint(&cfg.checkpoint)?;
    ckpt.verify_manifest(&data.manifest_hash)?;
    let (model, threshold) = ckpt.to_anomaly_model()?;
    let windows = make_anomaly_windows(&data.dataset, model.config.seq_len)?;
    let verdicts = detect(&model, threshold, &windows)?;
    write_verdicts(create(&cfg.verdicts)?, &verdicts)?;
    let flagged: BTreeSet<usize> = verdicts.iter().filter(|v| v.is_anomaly).map(|v| v.window_index).collect();
    let mut report = DetectReport {
        threshold,
        windows: verdicts.len(),
        flagged: flagged.len(),
        detection_rate: None,
        false_positive_rate: None,
    };
    if let Some(path) = &cfg.labels {
        let labels = read_labels(path)?;
        let splits = anomaly_splits(&labels, windows.len())?;
        let labeled: BTreeSet<usize> = labels.fault_windows.iter().copied().collect();
        report.detection_rate = Some(detection_rate(&labeled, &flagged)?);
        report.false_positive_rate = Some(false_positive_rate(&splits.held_out_normal(&labeled), &flagged)?);
    }
    log::info!("{} of {} windows flagged", report.flagged, report.windows);
    let out = to_json(&report);
    write_text(&cfg.report, &out)?;
    Ok(Some(out))
}
