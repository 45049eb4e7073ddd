//! Robustness comparison harness: for every (training size, depth preset)
//! cell and repeat, generate data, fit clusters, train each method, and
//! evaluate on a clean-label test corpus.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{fit_clusters, AeTrainConfig, KmeansConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{
    bootstrap_auroc, latent_neighbourhood, pairwise_tests, predict, score_dataset, timing_compare, GroupMetrics,
    LatentSummary, MetricsReport, ReferenceSet, SubgroupReport, TimingSummary, DEFAULT_NEIGHBOURS,
};
use crate::nn::{ClassifierModel, DepthPreset};
use crate::synth::{gen_labeled_corpus, stream_rng, CorpusSpec, CorruptionLevel, NoiseSpec};
use crate::train::{
    grid_search_lambdas, lambda_grid, patient_split, train, EpochRecord, GridRow, LossMode, TrainConfig, TrainOutcome,
    DEFAULT_LAMBDA_GRID,
};

/// Corruption for bad-quality segments in the experiment corpora. Degrades
/// the waveform while leaving the rhythm visible to the autoencoder.
pub fn bad_quality_level() -> CorruptionLevel {
    CorruptionLevel {
        wander_amp: 0.1,
        noise_sigma: 0.02,
        burst_fraction: 0.3,
        burst_amp: 0.3,
        burst_step: 0.05,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Independent repeats per cell, each with its own data and seeds.
    pub repeats: usize,
    /// Training corpus; `n_patients` is overridden by each entry of `sizes`.
    pub train_corpus: CorpusSpec,
    /// Test corpus; evaluated against true labels.
    pub test_corpus: CorpusSpec,
    /// Training-corpus patient counts, one cell per entry.
    pub sizes: Vec<usize>,
    pub presets: Vec<DepthPreset>,
    pub methods: Vec<LossMode>,
    pub train: TrainConfig,
    pub autoencoder: AeTrainConfig,
    #[serde(rename = "M")]
    pub m: usize,
    /// Values crossed into the (lambda1, lambda2) grid.
    pub lambda_values: Vec<f64>,
    /// Repeats (from the first) that run the grid search; later repeats
    /// reuse the lambdas selected on the first.
    pub grid_repeats: usize,
    pub bootstrap_draws: usize,
    pub latent_queries: usize,
    pub neighbours: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut train_corpus = CorpusSpec::new(400, 10);
        train_corpus.noise.heavy = bad_quality_level();
        let mut test_corpus = CorpusSpec::new(100, 10);
        test_corpus.patient_prefix = "t".into();
        test_corpus.noise = NoiseSpec {
            p_flip_good: 0.0,
            p_flip_bad: 0.0,
            ..train_corpus.noise
        };
        Self {
            seed: 0,
            repeats: 5,
            sizes: vec![train_corpus.n_patients],
            train_corpus,
            test_corpus,
            presets: vec![DepthPreset::Tiny],
            methods: vec![LossMode::Ce, LossMode::Sce, LossMode::Cmc],
            train: TrainConfig {
                epochs: 6,
                ..TrainConfig::default()
            },
            autoencoder: AeTrainConfig {
                epochs: 3,
                ..AeTrainConfig::default()
            },
            m: 6,
            lambda_values: DEFAULT_LAMBDA_GRID.to_vec(),
            grid_repeats: 1,
            bootstrap_draws: 100,
            latent_queries: 100,
            neighbours: DEFAULT_NEIGHBOURS,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.repeats == 0 || self.sizes.is_empty() || self.presets.is_empty() || self.methods.is_empty() {
            return bad("repeats, sizes, presets and methods must be non-empty".into());
        }
        if self.sizes.contains(&0) {
            return bad("sizes must be positive".into());
        }
        let mut methods = self.methods.clone();
        methods.sort_by_key(|m| m.as_str());
        methods.dedup();
        if methods.len() != self.methods.len() {
            return bad("methods must be distinct".into());
        }
        if self.methods.contains(&LossMode::Cmc) && self.lambda_values.is_empty() {
            return bad("CMC needs at least one lambda value".into());
        }
        if self.m < 2 {
            return bad(format!("M = {} must be at least 2", self.m));
        }
        if self.latent_queries == 0 || self.neighbours == 0 {
            return bad("latent_queries and neighbours must be positive".into());
        }
        self.train_corpus.validate()?;
        self.test_corpus.validate()?;
        self.train.validate()?;
        self.autoencoder.validate()
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &size in &self.sizes {
            for &preset in &self.presets {
                out.push(Cell {
                    index: out.len(),
                    size,
                    preset,
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub index: usize,
    /// Training-corpus patients.
    pub size: usize,
    pub preset: DepthPreset,
}

impl Cell {
    pub fn id(&self) -> String {
        format!("cell{:02}_n{}_{:?}", self.index, self.size, self.preset).to_lowercase()
    }
}

/// Seeds for one repeat of one cell, all derived from the global seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepeatSeeds {
    pub train_corpus: u64,
    pub test_corpus: u64,
    pub split: u64,
    pub autoencoder: u64,
    pub kmeans: u64,
    pub model: u64,
    pub bootstrap: u64,
    pub queries: u64,
}

impl RepeatSeeds {
    pub fn derive(global: u64, cell: usize, repeat: usize) -> Self {
        let mut rng = stream_rng(global, ((cell as u64) << 32) | repeat as u64);
        Self {
            train_corpus: rng.gen(),
            test_corpus: rng.gen(),
            split: rng.gen(),
            autoencoder: rng.gen(),
            kmeans: rng.gen(),
            model: rng.gen(),
            bootstrap: rng.gen(),
            queries: rng.gen(),
        }
    }
}

pub struct MethodRun {
    pub method: LossMode,
    pub lambdas: (f64, f64),
    pub outcome: TrainOutcome,
    pub report: MetricsReport,
}

pub struct RepeatResult {
    pub repeat: usize,
    pub seeds: RepeatSeeds,
    pub autoencoder_seconds: f64,
    pub autoencoder_mse: (f64, f64),
    /// Counts per cluster of (observed label, true label) over the training split.
    pub cluster_table: Vec<BTreeMap<String, usize>>,
    pub runs: Vec<MethodRun>,
}

impl RepeatResult {
    pub fn run(&self, method: LossMode) -> Option<&MethodRun> {
        self.runs.iter().find(|r| r.method == method)
    }
}

pub struct CellResult {
    pub cell: Cell,
    pub grid: Vec<GridRow>,
    pub selected_lambdas: Option<(f64, f64)>,
    pub repeats: Vec<RepeatResult>,
}

pub struct ExperimentResult {
    pub cells: Vec<CellResult>,
}

/// One row of the experiment summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell: String,
    pub size: usize,
    pub preset: DepthPreset,
    pub repeat: usize,
    pub method: String,
    pub lambda1: f64,
    pub lambda2: f64,
    pub best_epoch: usize,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub auroc_good: Option<f64>,
    pub auroc_bad: Option<f64>,
    pub drop_pct: Option<f64>,
    pub mean_purity: Option<f64>,
    pub mean_ccr: Option<f64>,
}

impl ExperimentResult {
    /// Rows sorted by cell id, then repeat, then method order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut rows = Vec::new();
        for c in &self.cells {
            for r in &c.repeats {
                for run in &r.runs {
                    let s = &run.report.subgroups;
                    rows.push(SummaryRow {
                        cell: c.cell.id(),
                        size: c.cell.size,
                        preset: c.cell.preset,
                        repeat: r.repeat,
                        method: run.method.as_str().into(),
                        lambda1: run.lambdas.0,
                        lambda2: run.lambdas.1,
                        best_epoch: run.outcome.best_epoch,
                        auroc: s.overall.auroc,
                        auprc: s.overall.auprc,
                        auroc_good: s.good.auroc,
                        auroc_bad: s.bad.auroc,
                        drop_pct: s.auroc_drop_pct,
                        mean_purity: run.report.latent.as_ref().map(|l| l.mean_purity),
                        mean_ccr: run.report.latent.as_ref().map(|l| l.mean_ccr),
                    });
                }
            }
        }
        rows.sort_by(|a, b| a.cell.cmp(&b.cell).then(a.repeat.cmp(&b.repeat)));
        rows
    }
}

fn cluster_table(data: &Dataset, indices: &[usize], m: usize) -> Vec<BTreeMap<String, usize>> {
    let mut table = vec![BTreeMap::new(); m];
    for &i in indices {
        let r = &data.records[i];
        let key = format!("{}/{}", r.label.as_str(), r.eval_label().as_str());
        if let Some(c) = r.cluster_id {
            *table[c].entry(key).or_insert(0) += 1;
        }
    }
    table
}

/// Evaluation of one trained model: subgroup metrics, bootstrap and
/// latent-neighbourhood analysis against the training split.
#[allow(clippy::too_many_arguments)]
fn evaluate(
    model: &mut ClassifierModel<f32>,
    name: &str,
    train_set: &Dataset,
    reference: &[usize],
    test: &Dataset,
    queries: &[usize],
    seeds: &RepeatSeeds,
    cfg: &ExperimentConfig,
) -> Result<MetricsReport> {
    let scored = score_dataset(model, test)?;
    let mut report = MetricsReport::new(name, &scored);
    report.bootstrap = bootstrap_auroc(&scored, cfg.bootstrap_draws, seeds.bootstrap).ok();

    let ref_pred = predict(model, train_set, reference)?;
    let observed = train_set.targets(reference);
    let trusted: Vec<u8> = reference
        .iter()
        .map(|&i| train_set.records[i].eval_label().binary())
        .collect();
    let q_pred = predict(model, test, queries)?;
    let q_trusted: Vec<u8> = queries.iter().map(|&i| test.records[i].eval_label().binary()).collect();
    let (stats, k) = latent_neighbourhood(
        &q_pred.latents,
        &q_trusted,
        ReferenceSet {
            latents: &ref_pred.latents,
            observed: &observed,
            trusted: &trusted,
        },
        cfg.neighbours,
    )?;
    report.latent = Some(LatentSummary::from_stats(&stats, k));
    Ok(report)
}

fn corpus(spec: &CorpusSpec, n_patients: Option<usize>, seed: u64) -> Result<Dataset> {
    let mut spec = spec.clone();
    if let Some(n) = n_patients {
        spec.n_patients = n;
    }
    gen_labeled_corpus(&spec, seed)
}

fn run_cell(cell: Cell, cfg: &ExperimentConfig) -> Result<CellResult> {
    let mut selected = None;
    let mut grid = Vec::new();
    let mut repeats = Vec::with_capacity(cfg.repeats);
    for rep in 0..cfg.repeats {
        let seeds = RepeatSeeds::derive(cfg.seed, cell.index, rep);
        log::info!("{} repeat {rep}: generating data", cell.id());
        let mut train_set = corpus(&cfg.train_corpus, Some(cell.size), seeds.train_corpus)?;
        let test = corpus(&cfg.test_corpus, None, seeds.test_corpus)?;
        let split = patient_split(&train_set, cfg.train.val_fraction, seeds.split)?;
        let ae_cfg = AeTrainConfig {
            seed: seeds.autoencoder,
            ..cfg.autoencoder.clone()
        };
        let fit = fit_clusters(
            &mut train_set,
            &split.train,
            &ae_cfg,
            &KmeansConfig::new(cfg.m, seeds.kmeans),
        )?;
        log::info!(
            "{} repeat {rep}: autoencoder {:.1}s, holdout mse {:.4} -> {:.4}",
            cell.id(),
            fit.ae_report.seconds,
            fit.ae_report.initial_holdout_mse,
            fit.ae_report.final_holdout_mse
        );
        let mut queries: Vec<usize> = (0..test.len()).collect();
        queries.shuffle(&mut stream_rng(seeds.queries, 0));
        queries.truncate(cfg.latent_queries);
        queries.sort_unstable();

        let base = TrainConfig {
            seed: seeds.model,
            preset: cell.preset,
            ..cfg.train.clone()
        };
        let mut runs = Vec::new();
        for &method in &cfg.methods {
            let (lambdas, outcome) = if method == LossMode::Cmc {
                if rep < cfg.grid_repeats.max(1) {
                    let g = grid_search_lambdas(&train_set, &split, &lambda_grid(&cfg.lambda_values), &base)?;
                    log::info!("{} repeat {rep}: selected lambdas {:?}", cell.id(), g.best);
                    if rep == 0 {
                        grid = g.table;
                        selected = Some(g.best);
                    }
                    (g.best, g.best_outcome)
                } else {
                    let l = selected.expect("grid ran on the first repeat");
                    let c = TrainConfig {
                        lambda1: l.0,
                        lambda2: l.1,
                        loss_mode: LossMode::Cmc,
                        ..base.clone()
                    };
                    (l, train(&train_set, &split, &c)?)
                }
            } else {
                let c = TrainConfig {
                    loss_mode: method,
                    ..base.clone()
                };
                ((0.0, 0.0), train(&train_set, &split, &c)?)
            };
            let mut model = outcome.model.clone();
            let report = evaluate(
                &mut model,
                method.as_str(),
                &train_set,
                &split.train,
                &test,
                &queries,
                &seeds,
                cfg,
            )?;
            log::info!(
                "{} repeat {rep} {}: test AUROC {:?} (good {:?}, bad {:?})",
                cell.id(),
                method.as_str(),
                report.subgroups.overall.auroc,
                report.subgroups.good.auroc,
                report.subgroups.bad.auroc
            );
            runs.push(MethodRun {
                method,
                lambdas,
                outcome,
                report,
            });
        }
        attach_comparisons(&mut runs, fit.ae_report.seconds)?;
        repeats.push(RepeatResult {
            repeat: rep,
            seeds,
            autoencoder_seconds: fit.ae_report.seconds,
            autoencoder_mse: (fit.ae_report.initial_holdout_mse, fit.ae_report.final_holdout_mse),
            cluster_table: cluster_table(&train_set, &split.train, cfg.m),
            runs,
        });
    }
    Ok(CellResult {
        cell,
        grid,
        selected_lambdas: selected,
        repeats,
    })
}

/// Pairwise Wilcoxon tests between methods on their bootstrap samples, and
/// CMC-vs-CE epoch timing.
fn attach_comparisons(runs: &mut [MethodRun], autoencoder_s: f64) -> Result<()> {
    let samples: Vec<(String, Vec<f64>)> = runs
        .iter()
        .filter_map(|r| {
            r.report
                .bootstrap
                .as_ref()
                .map(|b| (r.method.as_str().to_string(), b.samples.clone()))
        })
        .collect();
    let same_len = samples.windows(2).all(|w| w[0].1.len() == w[1].1.len());
    if samples.len() >= 2 && same_len {
        let (tests, threshold) = pairwise_tests(&samples, 0.05)?;
        for r in runs.iter_mut() {
            let name = r.method.as_str();
            r.report.pairwise = tests.iter().filter(|t| t.a == name || t.b == name).cloned().collect();
            r.report.significance_threshold = threshold;
        }
    }
    let history = |m: LossMode| runs.iter().find(|r| r.method == m).map(|r| r.outcome.history.clone());
    if let (Some(ce), Some(cmc)) = (history(LossMode::Ce), history(LossMode::Cmc)) {
        let timing = timing_compare(&ce, &cmc, Some(autoencoder_s))?;
        for r in runs.iter_mut().filter(|r| r.method == LossMode::Cmc) {
            r.report.timing = Some(timing.clone());
        }
    }
    Ok(())
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let cells = cfg
        .cells()
        .into_iter()
        .map(|c| run_cell(c, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResult { cells })
}

/// Per-method means over the repeats of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean_auroc: f64,
    pub mean_auroc_good: f64,
    pub mean_auroc_bad: f64,
    pub mean_drop_pct: f64,
    pub mean_purity: f64,
    pub mean_ccr: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl CellResult {
    pub fn method_summary(&self, method: LossMode) -> Option<MethodSummary> {
        let runs: Vec<&MethodRun> = self.repeats.iter().filter_map(|r| r.run(method)).collect();
        if runs.is_empty() {
            return None;
        }
        let nan = f64::NAN;
        let field = |f: &dyn Fn(&MethodRun) -> Option<f64>| mean(runs.iter().map(|r| f(r).unwrap_or(nan)));
        Some(MethodSummary {
            method: method.as_str().into(),
            mean_auroc: field(&|r| r.report.subgroups.overall.auroc),
            mean_auroc_good: field(&|r| r.report.subgroups.good.auroc),
            mean_auroc_bad: field(&|r| r.report.subgroups.bad.auroc),
            mean_drop_pct: field(&|r| r.report.subgroups.auroc_drop_pct),
            mean_purity: field(&|r| r.report.latent.as_ref().map(|l| l.mean_purity)),
            mean_ccr: field(&|r| r.report.latent.as_ref().map(|l| l.mean_ccr)),
        })
    }

    /// Per-method report averaged over repeats. Bootstrap samples and
    /// pairwise tests stay with the per-repeat reports.
    pub fn mean_report(&self, method: LossMode) -> Option<MetricsReport> {
        let runs: Vec<&MethodRun> = self.repeats.iter().filter_map(|r| r.run(method)).collect();
        let first = &runs.first()?.report;
        let avg = |f: &dyn Fn(&MetricsReport) -> Option<f64>| -> Option<f64> {
            let v: Option<Vec<f64>> = runs.iter().map(|r| f(&r.report)).collect();
            v.map(|v| mean(v.into_iter()))
        };
        let group = |g: &dyn Fn(&SubgroupReport) -> &GroupMetrics| GroupMetrics {
            n: g(&first.subgroups).n,
            auroc: avg(&|r| g(&r.subgroups).auroc),
            auprc: avg(&|r| g(&r.subgroups).auprc),
        };
        let subgroups = SubgroupReport {
            overall: group(&|s| &s.overall),
            good: group(&|s| &s.good),
            bad: group(&|s| &s.bad),
            auroc_drop_pct: avg(&|r| r.subgroups.auroc_drop_pct),
        };
        let timing = match (
            avg(&|r| r.timing.as_ref().map(|t| t.median_epoch_s_ce)),
            avg(&|r| r.timing.as_ref().map(|t| t.median_epoch_s_cmc)),
            avg(&|r| r.timing.as_ref().map(|t| t.overhead_ratio)),
        ) {
            (Some(ce), Some(cmc), Some(ratio)) => Some(TimingSummary {
                median_epoch_s_ce: ce,
                median_epoch_s_cmc: cmc,
                overhead_ratio: ratio,
                autoencoder_s: avg(&|r| r.timing.as_ref().and_then(|t| t.autoencoder_s)),
            }),
            _ => None,
        };
        let latent = match (
            avg(&|r| r.latent.as_ref().map(|l| l.mean_purity)),
            avg(&|r| r.latent.as_ref().map(|l| l.mean_ccr)),
            avg(&|r| r.latent.as_ref().map(|l| l.mean_same_class)),
        ) {
            (Some(p), Some(c), Some(s)) => Some(LatentSummary {
                k: first.latent.as_ref().map_or(0, |l| l.k),
                mean_purity: p,
                mean_ccr: c,
                mean_same_class: s,
                purity: Vec::new(),
                ccr: Vec::new(),
            }),
            _ => None,
        };
        Some(MetricsReport {
            method: first.method.clone(),
            subgroups,
            bootstrap: None,
            pairwise: Vec::new(),
            significance_threshold: first.significance_threshold,
            timing,
            latent,
        })
    }

    pub fn histories(&self, method: LossMode) -> Vec<Vec<EpochRecord>> {
        self.repeats
            .iter()
            .filter_map(|r| r.run(method).map(|m| m.outcome.history.clone()))
            .collect()
    }
}
