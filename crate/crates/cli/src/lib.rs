//! Command-line driver: configuration loading, artifact output with run
//! manifests, and one function per verb.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use cmc_core::cluster::{
    attach_clusters, embed, fit_clusters, kmeans, AeReport, AeTrainConfig, ClusterModel, Embedding, KmeansConfig,
};
use cmc_core::dataset::Dataset;
use cmc_core::eval::{
    bootstrap_auroc, latent_neighbourhood, predict, score_dataset, timing_compare, write_bootstrap_csv,
    write_neighbour_csv, write_quality_drop_csv, write_subgroup_csv, LatentSummary, MetricsReport, ReferenceSet,
    DEFAULT_NEIGHBOURS,
};
use cmc_core::experiment::{run_experiment, ExperimentConfig, ExperimentResult};
use cmc_core::labeling::{
    assemble_dataset, label_recordings, parse_alarm_log, BalanceRatio, LabelingConfig, WaveformIndex,
};
use cmc_core::nn::{Autoencoder, ClassifierModel};
use cmc_core::signal::Waveform;
use cmc_core::synth::{gen_labeled_corpus, stream_rng, CorpusSpec};
use cmc_core::train::{
    grid_search_lambdas, lambda_grid, patient_split, read_history, train_with, write_grid_csv, EpochRecord, LossMode,
    Split, TrainConfig, TrainOutcome, DEFAULT_LAMBDA_GRID,
};
use cmc_core::Error;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const THREADS_ENV: &str = "CMC_THREADS";

/// Keys whose values depend on wall-clock time. They are left out of the
/// stable hash of JSON artifacts.
const VOLATILE_KEYS: [&str; 6] = [
    "seconds",
    "wall_clock_s",
    "median_epoch_s_ce",
    "median_epoch_s_cmc",
    "overhead_ratio",
    "autoencoder_s",
];

/// Failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub const IO: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const DATA: u8 = 3;
    pub const NUMERIC: u8 = 4;

    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Self::CONFIG, message)
    }

    fn io(path: &Path, e: impl fmt::Display) -> Self {
        Self::new(Self::IO, format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) | Error::Format(_) => Self::IO,
            Error::InvalidArgument(_) | Error::TooFewPoints { .. } | Error::Parse { .. } | Error::Json(_) => {
                Self::CONFIG
            }
            Error::UndefinedMetric(_)
            | Error::EmptyClass(_)
            | Error::Split(_)
            | Error::Shape(_)
            | Error::DeficitTooLarge { .. }
            | Error::State(_) => Self::DATA,
            Error::Numeric(_) => Self::NUMERIC,
        };
        Self::new(code, e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Attaches the offending path to core errors raised while reading or
/// writing a file.
fn at_path<T>(path: &Path, r: cmc_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| {
        let mut err = CliError::from(e);
        err.message = format!("{}: {}", path.display(), err.message);
        err
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    #[serde(default = "default_draws")]
    pub bootstrap_draws: usize,
    #[serde(default = "default_neighbours")]
    pub neighbours: usize,
    #[serde(default = "default_queries")]
    pub latent_queries: usize,
}

fn default_draws() -> usize {
    100
}
fn default_neighbours() -> usize {
    DEFAULT_NEIGHBOURS
}
fn default_queries() -> usize {
    100
}
fn default_m() -> usize {
    6
}
fn default_grid() -> Vec<f64> {
    DEFAULT_LAMBDA_GRID.to_vec()
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            bootstrap_draws: default_draws(),
            neighbours: default_neighbours(),
            latent_queries: default_queries(),
        }
    }
}

/// One JSON document configuring every verb. Only `schema_version` is
/// required everywhere; verbs check for the sections they need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Single source of randomness; component seeds follow from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub corpus: Option<CorpusSpec>,
    #[serde(default)]
    pub labeling: LabelingConfig,
    #[serde(default)]
    pub balance: Option<BalanceRatio>,
    #[serde(default)]
    pub autoencoder: AeTrainConfig,
    #[serde(default = "default_m", rename = "M")]
    pub m: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub experiment: Option<ExperimentConfig>,
}

/// Seed keys that would compete with the global seed.
const NESTED_SEEDS: [&str; 3] = ["train.seed", "autoencoder.seed", "experiment.seed"];

fn lookup<'a>(v: &'a Value, dotted: &str) -> Option<&'a Value> {
    dotted.split('.').try_fold(v, |v, k| v.get(k))
}

/// Applies `key.path=value` overrides. Values parse as JSON, falling back
/// to a plain string.
pub fn apply_overrides(doc: &mut Value, overrides: &[String]) -> CliResult<()> {
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("override `{o}` must look like key.path=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut slot = &mut *doc;
        for part in key.split('.') {
            let map = slot
                .as_object_mut()
                .ok_or_else(|| CliError::config(format!("override `{key}`: `{part}` is not inside an object")))?;
            slot = map.entry(part).or_insert_with(|| Value::Object(Default::default()));
        }
        *slot = value;
    }
    Ok(())
}

impl RunConfig {
    pub fn from_value(doc: Value) -> CliResult<Self> {
        for key in NESTED_SEEDS {
            if lookup(&doc, key).is_some() {
                return Err(CliError::config(format!("{key}: set the top-level `seed` instead")));
            }
        }
        let mut cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
            let path = e.path().to_string();
            CliError::config(format!("config {path}: {}", e.into_inner()))
        })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::config(format!(
                "schema_version: expected {SCHEMA_VERSION}, found {}",
                cfg.schema_version
            )));
        }
        cfg.train.seed = cfg.seed;
        cfg.autoencoder.seed = cfg.seed;
        if let Some(e) = cfg.experiment.as_mut() {
            e.seed = cfg.seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut doc: Value =
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        apply_overrides(&mut doc, overrides)?;
        Self::from_value(doc)
    }

    fn validate(&self) -> CliResult<()> {
        let section = |name: &str, r: cmc_core::Result<()>| r.map_err(|e| CliError::config(format!("{name}: {e}")));
        if let Some(c) = &self.corpus {
            section("corpus", c.validate())?;
        }
        section("labeling", self.labeling.validate())?;
        section("autoencoder", self.autoencoder.validate())?;
        section("train", self.train.validate())?;
        if let Some(e) = &self.experiment {
            section("experiment", e.validate())?;
        }
        if self.m < 2 {
            return Err(CliError::config(format!("M: must be at least 2, got {}", self.m)));
        }
        if self.eval.neighbours == 0 || self.eval.latent_queries == 0 {
            return Err(CliError::config("eval: neighbours and latent_queries must be positive"));
        }
        Ok(())
    }

    pub fn kmeans(&self) -> KmeansConfig {
        KmeansConfig::new(self.m, self.seed)
    }

    fn split(&self, data: &Dataset) -> CliResult<Split> {
        Ok(patient_split(data, self.train.val_fraction, self.seed)?)
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

fn strip_volatile(v: &mut Value) -> bool {
    match v {
        Value::Object(map) => {
            let before = map.len();
            map.retain(|k, _| !VOLATILE_KEYS.contains(&k.as_str()));
            let mut stripped = map.len() != before;
            for child in map.values_mut() {
                stripped |= strip_volatile(child);
            }
            stripped
        }
        Value::Array(items) => items.iter_mut().fold(false, |acc, c| strip_volatile(c) | acc),
        _ => false,
    }
}

/// Hash of the artifact with timing fields removed, and whether any were.
/// Non-JSON files hash byte for byte.
fn stable_hash(path: &Path, bytes: &[u8]) -> (String, bool) {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let Ok(text) = std::str::from_utf8(bytes) else {
        return (sha256_bytes(bytes), false);
    };
    let docs: Option<Vec<Value>> = match ext {
        "json" => serde_json::from_str(text).ok().map(|v| vec![v]),
        "jsonl" => text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).ok())
            .collect(),
        _ => None,
    };
    let Some(mut docs) = docs else {
        return (sha256_bytes(bytes), false);
    };
    let volatile = docs.iter_mut().fold(false, |acc, d| strip_volatile(d) | acc);
    if !volatile {
        return (sha256_bytes(bytes), false);
    }
    let canonical = serde_json::to_vec(&docs).expect("JSON values serialize");
    (sha256_bytes(&canonical), true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    /// The file holds timing fields; `sha256` covers everything else.
    pub volatile: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: Value,
    pub config_sha256: String,
    pub inputs: Vec<InputFile>,
    pub artifacts: Vec<Artifact>,
    pub wall_clock_s: f64,
    /// Hash over everything above except paths of inputs and wall-clock
    /// time; equal digests mean a byte-identical re-run.
    pub digest: String,
}

impl RunManifest {
    pub fn load(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::io(&path, e))
    }

    fn compute_digest(&self) -> String {
        let stable = serde_json::json!({
            "command": self.command,
            "tool_version": self.tool_version,
            "config_sha256": self.config_sha256,
            "inputs": self.inputs.iter().map(|i| &i.sha256).collect::<Vec<_>>(),
            "artifacts": self.artifacts,
        });
        sha256_bytes(&serde_json::to_vec(&stable).expect("JSON values serialize"))
    }
}

/// Output directory of one command: collects artifact names and writes the
/// manifest last.
pub struct RunOutput {
    dir: PathBuf,
    artifacts: Vec<String>,
    inputs: Vec<InputFile>,
    started: Instant,
}

impl RunOutput {
    pub fn create(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
            inputs: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.push(InputFile {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    fn register(&mut self, name: &str) {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
    }

    /// Writes through `f` into a temporary file renamed into place, so a
    /// reader never sees a partial artifact.
    pub fn write_with(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut BufWriter<File>) -> cmc_core::Result<()>,
    ) -> CliResult<()> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        let tmp = path.with_extension("partial");
        {
            let file = File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
            let mut w = BufWriter::new(file);
            at_path(&tmp, f(&mut w))?;
            w.flush().map_err(|e| CliError::io(&tmp, e))?;
        }
        fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))?;
        self.register(name);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        self.write_with(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            w.write_all(b"\n")?;
            Ok(())
        })
    }

    /// Marks a file already present in the directory as an artifact.
    pub fn keep(&mut self, name: &str) -> CliResult<()> {
        let path = self.path(name);
        if !path.is_file() {
            return Err(CliError::io(&path, "expected artifact is missing"));
        }
        self.register(name);
        Ok(())
    }

    pub fn finish(mut self, command: &str, config: &RunConfig) -> CliResult<RunManifest> {
        self.artifacts.sort();
        let mut artifacts = Vec::with_capacity(self.artifacts.len());
        for name in &self.artifacts {
            let path = self.dir.join(name);
            let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
            let (sha256, volatile) = stable_hash(&path, &bytes);
            artifacts.push(Artifact {
                path: name.clone(),
                sha256,
                volatile,
            });
        }
        let config_value = serde_json::to_value(config).map_err(|e| CliError::config(e.to_string()))?;
        let mut manifest = RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: sha256_bytes(&serde_json::to_vec(&config_value).expect("JSON values serialize")),
            config: config_value,
            inputs: self.inputs,
            artifacts,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
            digest: String::new(),
        };
        manifest.digest = manifest.compute_digest();
        let path = self.dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }
}

fn load_dataset(path: &Path) -> CliResult<Dataset> {
    at_path(path, Dataset::load(path))
}

fn load_model(path: &Path) -> CliResult<ClassifierModel<f32>> {
    at_path(path, ClassifierModel::<f32>::load(path))
}

#[derive(Debug, Parser)]
#[command(
    name = "cmc",
    version,
    about = "PPG atrial-fibrillation detection under noisy alarm labels"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; receives every artifact and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the global seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides one config key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl Common {
    pub fn load(&self) -> CliResult<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        RunConfig::load(&self.config, &overrides)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic corpus.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Label recorded waveforms from an alarm log.
    Label {
        #[command(flatten)]
        common: Common,
        /// Directory of waveform files.
        #[arg(long)]
        waveforms: PathBuf,
        /// Alarm CSV with columns patient_id,onset_ms,alarm_type.
        #[arg(long)]
        alarms: PathBuf,
    },
    /// Fit the autoencoder and cluster model, and tag records with clusters.
    EmbedCluster {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Train one classifier.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Cluster model to assign records with; needs `--embedding`.
        #[arg(long, requires = "embedding")]
        clusters: Option<PathBuf>,
        #[arg(long)]
        embedding: Option<PathBuf>,
    },
    /// Select (lambda1, lambda2) by validation AUROC.
    GridSearch {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Score a dataset with a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Method name written into the report.
        #[arg(long, default_value = "model")]
        method: String,
    },
    /// Neighbourhood purity and counter-class ratio in latent space.
    AnalyzeLatent {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Neighbours per query; defaults to the config value.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Full comparison over sizes, presets and loss modes.
    Experiment {
        #[command(flatten)]
        common: Common,
    },
    /// Per-epoch wall-clock of CE against CMC training.
    BenchTiming {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Autoencoder report whose training time is carried into the summary.
        #[arg(long)]
        ae_report: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Label { .. } => "label",
            Command::EmbedCluster { .. } => "embed-cluster",
            Command::Train { .. } => "train",
            Command::GridSearch { .. } => "grid-search",
            Command::Eval { .. } => "eval",
            Command::AnalyzeLatent { .. } => "analyze-latent",
            Command::Experiment { .. } => "experiment",
            Command::BenchTiming { .. } => "bench-timing",
        }
    }
}

/// Worker count from `CMC_THREADS`, if set.
pub fn threads_from_env() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::config(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
        Err(_) => Ok(None),
    }
}

pub fn run(cli: Cli) -> CliResult<RunManifest> {
    let name = cli.command.name();
    match cli.command {
        Command::Synth { common } => cmd_synth(&common),
        Command::Label {
            common,
            waveforms,
            alarms,
        } => cmd_label(&common, &waveforms, &alarms),
        Command::EmbedCluster { common, dataset } => cmd_embed_cluster(&common, &dataset),
        Command::Train {
            common,
            dataset,
            clusters,
            embedding,
        } => cmd_train(&common, &dataset, clusters.as_deref().zip(embedding.as_deref())),
        Command::GridSearch { common, dataset } => cmd_grid_search(&common, &dataset),
        Command::Eval {
            common,
            checkpoint,
            dataset,
            method,
        } => cmd_eval(&common, &checkpoint, &dataset, &method),
        Command::AnalyzeLatent {
            common,
            checkpoint,
            queries,
            reference,
            k,
        } => cmd_analyze_latent(&common, &checkpoint, &queries, &reference, k),
        Command::Experiment { common } => cmd_experiment(&common),
        Command::BenchTiming {
            common,
            dataset,
            ae_report,
        } => cmd_bench_timing(&common, &dataset, ae_report.as_deref()),
    }
    .map_err(|mut e| {
        e.message = format!("{name}: {}", e.message);
        e
    })
}

pub const DATASET_FILE: &str = "dataset.ppgd";

pub fn cmd_synth(common: &Common) -> CliResult<RunManifest> {
    let cfg = common.load()?;
    let spec = cfg
        .corpus
        .as_ref()
        .ok_or_else(|| CliError::config("config corpus: section is required by synth"))?;
    let data = gen_labeled_corpus(spec, cfg.seed)?;
    let mut out = RunOutput::create(&common.out)?;
    out.write_with(DATASET_FILE, |w| data.write_to(w))?;
    out.write_json("summary.json", &data.summary())?;
    out.finish("synth", &cfg)
}

#[derive(Debug, Serialize)]
struct LabelSummary {
    waveform_files: usize,
    alarms: usize,
    unknown_alarm_types: usize,
    af: usize,
    pvc: usize,
    nsr: usize,
    out_of_bounds: usize,
    excluded_pvc: usize,
    deduplicated: usize,
    records: usize,
}

pub fn cmd_label(common: &Common, waveform_dir: &Path, alarms: &Path) -> CliResult<RunManifest> {
    let cfg = common.load()?;
    let mut out = RunOutput::create(&common.out)?;
    let bytes = fs::read(alarms).map_err(|e| CliError::io(alarms, e))?;
    let log = at_path(alarms, parse_alarm_log(&bytes))?;
    out.input(alarms)?;

    let mut files: Vec<PathBuf> = fs::read_dir(waveform_dir)
        .map_err(|e| CliError::io(waveform_dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| CliError::io(waveform_dir, e)))
        .collect::<CliResult<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut waveforms = Vec::with_capacity(files.len());
    for f in &files {
        waveforms.push(at_path(f, Waveform::load(f))?);
        out.input(f)?;
    }
    let index = WaveformIndex::new(waveforms);
    let labeled = label_recordings(&log.events, &index, &cfg.labeling)?;
    let summary_counts = (
        labeled.af.segments.len(),
        labeled.pvc.segments.len(),
        labeled.nsr.segments.len(),
    );
    let skipped = [&labeled.af, &labeled.pvc, &labeled.nsr];
    let out_of_bounds = skipped.iter().map(|x| x.out_of_bounds).sum();
    let excluded_pvc = skipped.iter().map(|x| x.excluded).sum();
    let deduplicated = skipped.iter().map(|x| x.deduplicated).sum();
    let data = assemble_dataset(
        labeled.af.segments,
        labeled.pvc.segments,
        labeled.nsr.segments,
        cfg.balance,
        cfg.seed,
    )?;
    out.write_with(DATASET_FILE, |w| data.write_to(w))?;
    out.write_json(
        "label_summary.json",
        &LabelSummary {
            waveform_files: files.len(),
            alarms: log.events.len(),
            unknown_alarm_types: log.unknown_types,
            af: summary_counts.0,
            pvc: summary_counts.1,
            nsr: summary_counts.2,
            out_of_bounds,
            excluded_pvc,
            deduplicated,
            records: data.len(),
        },
    )?;
    out.finish("label", &cfg)
}

pub const AE_FILE: &str = "autoencoder.ckpt";
const AE_KEY_FILE: &str = "autoencoder.key";
const AE_REPORT_FILE: &str = "autoencoder_report.json";

#[derive(Debug, Serialize)]
struct ClusterSummary {
    autoencoder_cached: bool,
    train_records: usize,
    /// Records per cluster over the whole dataset.
    cluster_sizes: Vec<usize>,
    inertia: f64,
    iterations: usize,
    converged: bool,
}

pub fn cmd_embed_cluster(common: &Common, dataset: &Path) -> CliResult<RunManifest> {
    let cfg = common.load()?;
    let mut out = RunOutput::create(&common.out)?;
    let mut data = load_dataset(dataset)?;
    out.input(dataset)?;
    let split = cfg.split(&data)?;
    let km_cfg = cfg.kmeans();
    if split.train.len() < km_cfg.m {
        return Err(CliError::config(format!(
            "M: {} clusters for {} training records",
            km_cfg.m,
            split.train.len()
        )));
    }
    // The cache key pins the autoencoder to its training data and config.
    let key = sha256_bytes(
        serde_json::json!({
            "dataset": out.inputs[0].sha256,
            "autoencoder": cfg.autoencoder,
            "train": split.train,
        })
        .to_string()
        .as_bytes(),
    );
    let cached = fs::read_to_string(out.path(AE_KEY_FILE)).is_ok_and(|k| k.trim() == key)
        && out.path(AE_FILE).is_file()
        && out.path(AE_REPORT_FILE).is_file();

    let (embedding, fit) = if cached {
        log::info!("reusing cached autoencoder in {}", common.out.display());
        let ae_path = out.path(AE_FILE);
        let mut ae = at_path(&ae_path, Autoencoder::<f32>::load(&ae_path))?;
        let embedding = embed(&mut ae, &data)?;
        let rows: Vec<Vec<f32>> = split.train.iter().map(|&i| embedding.row(i).to_vec()).collect();
        let fit = kmeans(&Embedding::from_rows(&rows)?, &km_cfg)?;
        let ids = fit.model.assign(&embedding)?;
        attach_clusters(&mut data, &ids)?;
        out.keep(AE_FILE)?;
        out.keep(AE_REPORT_FILE)?;
        out.keep(AE_KEY_FILE)?;
        (embedding, fit)
    } else {
        let fit = fit_clusters(&mut data, &split.train, &cfg.autoencoder, &km_cfg)?;
        out.write_with(AE_FILE, |w| fit.ae.write_to(w))?;
        out.write_json(AE_REPORT_FILE, &fit.ae_report)?;
        out.write_with(AE_KEY_FILE, |w| Ok(writeln!(w, "{key}")?))?;
        (fit.embedding, fit.kmeans)
    };
    let mut sizes = vec![0usize; km_cfg.m];
    for r in &data.records {
        if let Some(c) = r.cluster_id {
            sizes[c] += 1;
        }
    }
    out.write_with("embedding.emb", |w| embedding.write_to(w))?;
    out.write_json("clusters.json", &fit.model)?;
    out.write_with(DATASET_FILE, |w| data.write_to(w))?;
    out.write_json(
        "cluster_summary.json",
        &ClusterSummary {
            autoencoder_cached: cached,
            train_records: split.train.len(),
            cluster_sizes: sizes,
            inertia: fit.model.inertia,
            iterations: fit.iterations,
            converged: fit.converged,
        },
    )?;
    out.finish("embed-cluster", &cfg)
}

pub const HISTORY_FILE: &str = "history.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "model.ckpt";

/// Persists training progress after every epoch: the history so far and
/// the latest weights. An interrupted run keeps both.
pub struct EpochSink<'a> {
    out: &'a mut RunOutput,
    prefix: String,
    history: Vec<EpochRecord>,
}

impl<'a> EpochSink<'a> {
    /// `prefix` is prepended to the artifact names, e.g. `ce/`.
    pub fn new(out: &'a mut RunOutput, prefix: &str) -> Self {
        Self {
            out,
            prefix: prefix.to_string(),
            history: Vec::new(),
        }
    }

    pub fn record(&mut self, r: &EpochRecord, model: &ClassifierModel<f32>) -> cmc_core::Result<()> {
        self.history.push(*r);
        let history = &self.history;
        let to_core = |e: CliError| Error::Io(std::io::Error::other(e.message));
        self.out
            .write_with(&format!("{}{LAST_CHECKPOINT}", self.prefix), |w| model.write_to(w))
            .map_err(to_core)?;
        self.out
            .write_with(&format!("{}{HISTORY_FILE}", self.prefix), |w| {
                cmc_core::train::write_history(w, history)
            })
            .map_err(to_core)
    }
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    loss_mode: LossMode,
    lambda1: f64,
    lambda2: f64,
    best_epoch: usize,
    best_val_loss: f64,
    train_records: usize,
    val_records: usize,
}

fn train_into(
    out: &mut RunOutput,
    prefix: &str,
    data: &Dataset,
    split: &Split,
    cfg: &TrainConfig,
) -> CliResult<TrainOutcome> {
    let mut sink = EpochSink::new(out, prefix);
    let outcome = train_with(data, split, cfg, |r, m| sink.record(r, m))?;
    out.write_with(&format!("{prefix}{BEST_CHECKPOINT}"), |w| outcome.model.write_to(w))?;
    out.write_json(
        &format!("{prefix}train_summary.json"),
        &TrainSummary {
            loss_mode: cfg.loss_mode,
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
            best_epoch: outcome.best_epoch,
            best_val_loss: outcome.best_val_loss(),
            train_records: split.train.len(),
            val_records: split.val.len(),
        },
    )?;
    Ok(outcome)
}

pub fn cmd_train(common: &Common, dataset: &Path, clusters: Option<(&Path, &Path)>) -> CliResult<RunManifest> {
    let cfg = common.load()?;
    let mut out = RunOutput::create(&common.out)?;
    let mut data = load_dataset(dataset)?;
    out.input(dataset)?;
    if let Some((model_path, emb_path)) = clusters {
        let model = at_path(model_path, ClusterModel::load(model_path))?;
        let emb = at_path(emb_path, Embedding::load(emb_path))?;
        out.input(model_path)?;
        out.input(emb_path)?;
        if emb.len() != data.len() {
            return Err(CliError::new(
                CliError::DATA,
                format!("{}: {} rows for {} records", emb_path.display(), emb.len(), data.len()),
            ));
        }
        attach_clusters(&mut data, &model.assign(&emb)?)?;
    }
    let split = cfg.split(&data)?;
    train_into(&mut out, "", &data, &split, &cfg.train)?;
    out.finish("train", &cfg)
}

#[derive(Debug, Serialize)]
struct GridSelection {
    lambda1: f64,
    lambda2: f64,
    val_auroc: Option<f64>,
    best_epoch: usize,
}

pub fn cmd_grid_search(common: &Common, dataset: &Path) -> CliResult<RunManifest> {
    let cfg = common.load()?;
    let mut out = RunOutput::create(&common.out)?;
    let data = load_dataset(dataset)?;
    out.input(dataset)?;
    let split = cfg.split(&data)?;
    let train_cfg = TrainConfig {
        loss_mode: LossMode::Cmc,
        ..cfg.train.clone()
    };
    let grid = grid_search_lambdas(&data, &split, &lambda_grid(&cfg.lambda_grid), &train_cfg)?;
    let best_row = grid
        .table
        .iter()
        .find(|r| (r.lambda1, r.lambda2) == grid.best)
        .expect("selected cell is in the table");
    let selection = GridSelection {
        lambda1: grid.best.0,
        lambda2: grid.best.1,
        val_auroc: best_row.val_auroc,
        best_epoch: grid.best_outcome.best_epoch,
    };
    out.write_with("grid.csv", |w| write_grid_csv(w, &grid.table))?;
    out.write_json("selection.json", &selection)?;
    out.write_with(BEST_CHECKPOINT, |w| grid.best_outcome.model.write_to(w))?;
    out.write_with(HISTORY_FILE, |w| {
        cmc_core::train::write_history(w, &grid.best_outcome.history)
    })?;
    out.finish("grid-search", &cfg)
}

pub fn cmd_eval(common: &Common, checkpoint: &Path, dataset: &Path, method: &str) -> CliResult<RunManifest> {
    let cfg = common.load()?;
    let mut out = RunOutput::create(&common.out)?;
    let mut model = load_model(checkpoint)?;
    let data = load_dataset(dataset)?;
    out.input(checkpoint)?;
    out.input(dataset)?;
    let scored = score_dataset(&mut model, &data)?;
    // Fails with an undefined metric when the data lacks a class.
    cmc_core::eval::auroc(&scored)?;
    let mut report = MetricsReport::new(method, &scored);
    match bootstrap_auroc(&scored, cfg.eval.bootstrap_draws, cfg.seed) {
        Ok(b) => report.bootstrap = Some(b),
        Err(e) => log::warn!("bootstrap skipped: {e}"),
    }
    out.write_json("metrics.json", &report)?;
    out.write_with("subgroups.csv", |w| {
        write_subgroup_csv(w, std::slice::from_ref(&report))
    })?;
    out.write_with("quality_drop.csv", |w| {
        write_quality_drop_csv(w, std::slice::from_ref(&report))
    })?;
    if let Some(b) = &report.bootstrap {
        out.write_with("bootstrap.csv", |w| write_bootstrap_csv(w, &b.samples))?;
    }
    out.finish("eval", &cfg)
}

/// Up to `n` record indices drawn without replacement, in ascending order.
pub fn pick_queries(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if n < len {
        idx.shuffle(&mut stream_rng(seed, 0));
        idx.truncate(n);
        idx.sort_unstable();
    }
    idx
}

pub fn cmd_analyze_latent(
    common: &Common,
    checkpoint: &Path,
    queries: &Path,
    reference: &Path,
    k: Option<usize>,
) -> CliResult<RunManifest> {
    let cfg = common.load()?;
    let k = k.unwrap_or(cfg.eval.neighbours);
    if k == 0 {
        return Err(CliError::config("k must be positive"));
    }
    let mut out = RunOutput::create(&common.out)?;
    let mut model = load_model(checkpoint)?;
    let query_set = load_dataset(queries)?;
    let reference_set = load_dataset(reference)?;
    out.input(checkpoint)?;
    out.input(queries)?;
    out.input(reference)?;

    let picked = pick_queries(query_set.len(), cfg.eval.latent_queries, cfg.seed);
    let all: Vec<usize> = (0..reference_set.len()).collect();
    let ref_pred = predict(&mut model, &reference_set, &all)?;
    let observed = reference_set.targets(&all);
    let trusted: Vec<u8> = reference_set.records.iter().map(|r| r.eval_label().binary()).collect();
    let q_pred = predict(&mut model, &query_set, &picked)?;
    let q_trusted: Vec<u8> = picked
        .iter()
        .map(|&i| query_set.records[i].eval_label().binary())
        .collect();
    let (stats, k_used) = latent_neighbourhood(
        &q_pred.latents,
        &q_trusted,
        ReferenceSet {
            latents: &ref_pred.latents,
            observed: &observed,
            trusted: &trusted,
        },
        k,
    )?;
    out.write_with("neighbours.csv", |w| write_neighbour_csv(w, &picked, &stats))?;
    out.write_json("latent_summary.json", &LatentSummary::from_stats(&stats, k_used))?;
    out.finish("analyze-latent", &cfg)
}

#[derive(Debug, Serialize)]
struct MethodRow<'a> {
    cell: String,
    method: &'a str,
    lambda1: f64,
    lambda2: f64,
    mean_auroc: Option<f64>,
    mean_auroc_good: Option<f64>,
    mean_auroc_bad: Option<f64>,
    mean_drop_pct: Option<f64>,
    mean_purity: Option<f64>,
    mean_ccr: Option<f64>,
}

fn write_csv<T: Serialize>(w: &mut BufWriter<File>, rows: &[T]) -> cmc_core::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    out.flush()?;
    Ok(())
}

/// Writes every artifact of a finished experiment under `out`.
pub fn write_experiment(out: &mut RunOutput, cfg: &ExperimentConfig, result: &ExperimentResult) -> CliResult<()> {
    let mut method_rows = Vec::new();
    for cell in &result.cells {
        let id = cell.cell.id();
        out.write_with(&format!("cells/{id}/grid.csv"), |w| write_grid_csv(w, &cell.grid))?;
        let mut means = Vec::new();
        for &method in &cfg.methods {
            let name = method.as_str();
            let Some(mean) = cell.mean_report(method) else { continue };
            out.write_json(&format!("cells/{id}/{name}/metrics.json"), &mean)?;
            for rep in &cell.repeats {
                let Some(run) = rep.run(method) else { continue };
                let dir = format!("cells/{id}/{name}/rep{:02}", rep.repeat);
                out.write_json(&format!("{dir}/metrics.json"), &run.report)?;
                out.write_with(&format!("{dir}/{HISTORY_FILE}"), |w| {
                    cmc_core::train::write_history(w, &run.outcome.history)
                })?;
                if let Some(b) = &run.report.bootstrap {
                    out.write_with(&format!("{dir}/bootstrap.csv"), |w| write_bootstrap_csv(w, &b.samples))?;
                }
            }
            let lambdas = if method == LossMode::Cmc {
                cell.selected_lambdas.unwrap_or((0.0, 0.0))
            } else {
                (0.0, 0.0)
            };
            method_rows.push(MethodRow {
                cell: id.clone(),
                method: name,
                lambda1: lambdas.0,
                lambda2: lambdas.1,
                mean_auroc: mean.subgroups.overall.auroc,
                mean_auroc_good: mean.subgroups.good.auroc,
                mean_auroc_bad: mean.subgroups.bad.auroc,
                mean_drop_pct: mean.subgroups.auroc_drop_pct,
                mean_purity: mean.latent.as_ref().map(|l| l.mean_purity),
                mean_ccr: mean.latent.as_ref().map(|l| l.mean_ccr),
            });
            means.push(mean);
        }
        out.write_with(&format!("cells/{id}/quality_drop.csv"), |w| {
            write_quality_drop_csv(w, &means)
        })?;
        out.write_with(&format!("cells/{id}/subgroups.csv"), |w| write_subgroup_csv(w, &means))?;
        let clusters: Vec<_> = cell
            .repeats
            .iter()
            .map(|r| serde_json::json!({"repeat": r.repeat, "seeds": r.seeds, "clusters": r.cluster_table}))
            .collect();
        out.write_json(&format!("cells/{id}/repeats.json"), &clusters)?;
        let ae: Vec<_> = cell
            .repeats
            .iter()
            .map(|r| serde_json::json!({"repeat": r.repeat, "seconds": r.autoencoder_seconds}))
            .collect();
        out.write_json(&format!("cells/{id}/autoencoder_timing.json"), &ae)?;
    }
    method_rows.sort_by(|a, b| a.cell.cmp(&b.cell));
    out.write_with("methods.csv", |w| write_csv(w, &method_rows))?;
    out.write_with("summary.csv", |w| write_csv(w, &result.summary()))
}

pub fn cmd_experiment(common: &Common) -> CliResult<RunManifest> {
    let cfg = common.load()?;
    let exp = cfg
        .experiment
        .as_ref()
        .ok_or_else(|| CliError::config("config experiment: section is required by experiment"))?;
    let mut out = RunOutput::create(&common.out)?;
    let result = run_experiment(exp)?;
    write_experiment(&mut out, exp, &result)?;
    out.finish("experiment", &cfg)
}

pub fn cmd_bench_timing(common: &Common, dataset: &Path, ae_report: Option<&Path>) -> CliResult<RunManifest> {
    let cfg = common.load()?;
    let mut out = RunOutput::create(&common.out)?;
    let data = load_dataset(dataset)?;
    out.input(dataset)?;
    let ae_s = match ae_report {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let report: AeReport = serde_json::from_str(&text).map_err(|e| CliError::io(p, e))?;
            out.input(p)?;
            Some(report.seconds)
        }
        None => None,
    };
    let split = cfg.split(&data)?;
    let ce_cfg = TrainConfig {
        loss_mode: LossMode::Ce,
        ..cfg.train.clone()
    };
    let cmc_cfg = TrainConfig {
        loss_mode: LossMode::Cmc,
        ..cfg.train.clone()
    };
    let ce = train_into(&mut out, "ce/", &data, &split, &ce_cfg)?;
    let cmc = train_into(&mut out, "cmc/", &data, &split, &cmc_cfg)?;
    let timing = timing_compare(&ce.history, &cmc.history, ae_s)?;
    out.write_json("timing.json", &timing)?;
    out.finish("bench-timing", &cfg)
}

/// Reads a history written by `train`.
pub fn load_history(path: &Path) -> CliResult<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    at_path(path, read_history(&text))
}
