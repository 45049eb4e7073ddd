//! Cluster-membership-consistency loss, patient-level splitting, the
//! training loop with best-epoch selection, and the lambda grid search.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{auroc_scores, predict};
use crate::nn::{
    cross_entropy, symmetric_cross_entropy, Adam, AdamConfig, ArchSpec, ClassifierModel, DepthPreset, Mode, Scalar,
    Tensor, DEFAULT_LOG_CLAMP,
};
use crate::synth::stream_rng;

const SPLIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LossMode {
    Ce,
    Sce,
    Cmc,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Ce => "CE",
            LossMode::Sce => "SCE",
            LossMode::Cmc => "CMC",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Normalization {
    /// Plain sums over ordered pairs.
    RawSum,
    /// Sums divided by their ordered-pair count.
    PairMean,
}

/// How the latent-space terms are computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CmcSettings {
    pub normalization: Normalization,
    /// When set, the inter term becomes the mean of max(0, margin - d) over
    /// cross-cluster pairs.
    pub margin: Option<f64>,
}

impl Default for CmcSettings {
    fn default() -> Self {
        Self {
            normalization: Normalization::PairMean,
            margin: None,
        }
    }
}

/// Intra/inter values with their gradients w.r.t. the latents, row-major B x d.
#[derive(Debug, Clone, PartialEq)]
pub struct CmcTerms {
    pub l_intra: f64,
    pub l_inter: f64,
    pub grad_intra: Vec<f64>,
    pub grad_inter: Vec<f64>,
}

/// Pairwise latent distances within and across clusters of one batch.
///
/// Intra sums ‖F_i − F_j‖ over ordered pairs inside each cluster; inter is
/// the negated sum over ordered pairs drawn from different clusters. Each
/// unordered pair therefore counts twice. A zero distance contributes no
/// gradient.
pub fn cmc_losses<T: Scalar>(latents: &Tensor<T>, cluster_ids: &[usize], settings: &CmcSettings) -> Result<CmcTerms> {
    let (b, d) = match *latents.shape() {
        [b, d] if b == cluster_ids.len() => (b, d),
        _ => {
            return Err(Error::Shape(format!(
                "latents {:?} do not match {} cluster ids",
                latents.shape(),
                cluster_ids.len()
            )))
        }
    };
    let x: Vec<f64> = latents.data().iter().map(|v| v.as_f64()).collect();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("latents are not finite".into()));
    }
    let mut intra = 0.0;
    let mut inter = 0.0;
    let mut g_intra = vec![0.0; b * d];
    let mut g_inter = vec![0.0; b * d];
    let mut n_intra = 0usize;
    let mut n_inter = 0usize;
    let mut diff = vec![0.0; d];
    for i in 0..b {
        for j in i + 1..b {
            let (xi, xj) = (&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]);
            let mut s = 0.0;
            for ((o, a), c) in diff.iter_mut().zip(xi).zip(xj) {
                *o = a - c;
                s += *o * *o;
            }
            let dist = s.sqrt();
            let same = cluster_ids[i] == cluster_ids[j];
            // d(dist)/dF_i = (F_i - F_j) / dist; scaled by the pair's weight.
            let weight = if same {
                n_intra += 1;
                intra += dist;
                2.0
            } else {
                n_inter += 1;
                match settings.margin {
                    Some(m) => {
                        let h = m - dist;
                        if h > 0.0 {
                            inter += h;
                            -1.0
                        } else {
                            0.0
                        }
                    }
                    None => {
                        inter -= dist;
                        -2.0
                    }
                }
            };
            if weight != 0.0 && dist > 0.0 {
                let g = if same { &mut g_intra } else { &mut g_inter };
                let scale = weight / dist;
                for k in 0..d {
                    g[i * d + k] += scale * diff[k];
                    g[j * d + k] -= scale * diff[k];
                }
            }
        }
    }
    let mut l_intra = 2.0 * intra;
    let mut l_inter = if settings.margin.is_some() { inter } else { 2.0 * inter };
    let mut intra_scale = 1.0;
    let mut inter_scale = 1.0;
    if settings.normalization == Normalization::PairMean {
        intra_scale = if n_intra == 0 { 0.0 } else { 1.0 / (2 * n_intra) as f64 };
    }
    if settings.margin.is_some() {
        inter_scale = if n_inter == 0 { 0.0 } else { 1.0 / n_inter as f64 };
    } else if settings.normalization == Normalization::PairMean {
        inter_scale = if n_inter == 0 { 0.0 } else { 1.0 / (2 * n_inter) as f64 };
    }
    if intra_scale != 1.0 {
        l_intra *= intra_scale;
        g_intra.iter_mut().for_each(|g| *g *= intra_scale);
    }
    if inter_scale != 1.0 {
        l_inter *= inter_scale;
        g_inter.iter_mut().for_each(|g| *g *= inter_scale);
    }
    Ok(CmcTerms {
        l_intra,
        l_inter,
        grad_intra: g_intra,
        grad_inter: g_inter,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Classification term (the SCE value in SCE mode).
    pub l_ce: f64,
    pub l_intra: f64,
    pub l_inter: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn combine(l_ce: f64, l_intra: f64, l_inter: f64, lambda1: f64, lambda2: f64) -> Self {
        Self {
            l_ce,
            l_intra,
            l_inter,
            l_total: l_ce + lambda1 * l_intra + lambda2 * l_inter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub normalization: Normalization,
    pub margin: Option<f64>,
    pub val_fraction: f64,
    pub preset: DepthPreset,
    pub batch_norm: bool,
    pub sce_alpha: f64,
    pub sce_beta: f64,
    pub sce_log_clamp: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.01,
            lambda2: 0.001,
            epochs: 50,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            loss_mode: LossMode::Cmc,
            normalization: Normalization::PairMean,
            margin: None,
            val_fraction: 0.2,
            preset: DepthPreset::Tiny,
            batch_norm: true,
            sce_alpha: 1.0,
            sce_beta: 1.0,
            sce_log_clamp: DEFAULT_LOG_CLAMP,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) || !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            return bad("lambda1 and lambda2 must be finite and non-negative");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if let Some(m) = self.margin {
            if !(m > 0.0) {
                return bad("margin must be positive");
            }
        }
        if !(self.sce_alpha >= 0.0 && self.sce_beta >= 0.0) || !(self.sce_log_clamp < 0.0) {
            return bad("SCE needs alpha, beta >= 0 and a negative log clamp");
        }
        Ok(())
    }

    pub fn cmc_settings(&self) -> CmcSettings {
        CmcSettings {
            normalization: self.normalization,
            margin: self.margin,
        }
    }

    /// Whether the latent-space terms contribute to the objective.
    fn uses_cmc(&self) -> bool {
        self.loss_mode == LossMode::Cmc
    }
}

/// Loss values and the gradients to feed back through the model.
pub struct LossOutcome<T> {
    pub breakdown: LossBreakdown,
    pub grad_logits: Tensor<T>,
    pub grad_latents: Option<Tensor<T>>,
}

/// Classification loss plus, in CMC mode, the weighted latent terms.
pub fn total_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u8],
    latents: &Tensor<T>,
    cluster_ids: Option<&[usize]>,
    cfg: &TrainConfig,
) -> Result<LossOutcome<T>> {
    let base = match cfg.loss_mode {
        LossMode::Sce => symmetric_cross_entropy(logits, labels, cfg.sce_alpha, cfg.sce_beta, cfg.sce_log_clamp)?,
        LossMode::Ce | LossMode::Cmc => cross_entropy(logits, labels)?,
    };
    if !cfg.uses_cmc() {
        return Ok(LossOutcome {
            breakdown: LossBreakdown::combine(base.loss, 0.0, 0.0, 0.0, 0.0),
            grad_logits: base.grad,
            grad_latents: None,
        });
    }
    let ids = cluster_ids.ok_or_else(|| Error::InvalidArgument("CMC loss needs cluster ids".into()))?;
    if ids.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} cluster ids for {} labels",
            ids.len(),
            labels.len()
        )));
    }
    let terms = cmc_losses(latents, ids, &cfg.cmc_settings())?;
    let breakdown = LossBreakdown::combine(base.loss, terms.l_intra, terms.l_inter, cfg.lambda1, cfg.lambda2);
    let grad_latents = if cfg.lambda1 == 0.0 && cfg.lambda2 == 0.0 {
        None
    } else {
        let g: Vec<T> = terms
            .grad_intra
            .iter()
            .zip(&terms.grad_inter)
            .map(|(a, e)| T::lit(cfg.lambda1 * a + cfg.lambda2 * e))
            .collect();
        Some(Tensor::from_vec(latents.shape(), g)?)
    };
    Ok(LossOutcome {
        breakdown,
        grad_logits: base.grad,
        grad_latents,
    })
}

/// Record positions on each side of a patient-level split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Shuffles the sorted patient ids under `seed` and sends the first
/// round(fraction × patients) of them, at least one and at most all but one,
/// to validation.
pub fn patient_split(data: &Dataset, val_fraction: f64, seed: u64) -> Result<Split> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument("val_fraction must lie in (0, 1)".into()));
    }
    let mut patients = data.patients();
    if patients.len() < 2 {
        return Err(Error::Split(format!("{} patient(s); need at least 2", patients.len())));
    }
    patients.shuffle(&mut stream_rng(seed, SPLIT_STREAM));
    let n_val = ((patients.len() as f64 * val_fraction).round() as usize).clamp(1, patients.len() - 1);
    let val_patients: std::collections::HashSet<&str> = patients[..n_val].iter().map(String::as_str).collect();
    let (val, train): (Vec<usize>, Vec<usize>) =
        (0..data.len()).partition(|&i| val_patients.contains(data.records[i].patient_id()));
    Ok(Split { train, val })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_intra: f64,
    pub l_inter: f64,
    pub l_total: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

pub fn write_history<W: Write>(mut w: W, history: &[EpochRecord]) -> Result<()> {
    for r in history {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_history(text: &str) -> Result<Vec<EpochRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub struct TrainOutcome {
    /// Checkpoint of the epoch with the lowest validation loss.
    pub model: ClassifierModel<f32>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn best_val_loss(&self) -> f64 {
        self.history[self.best_epoch].val_loss
    }
}

fn cluster_ids(data: &Dataset, indices: &[usize]) -> Result<Vec<usize>> {
    indices
        .iter()
        .map(|&i| {
            data.records[i]
                .cluster_id
                .ok_or_else(|| Error::InvalidArgument(format!("record {i} has no cluster id")))
        })
        .collect()
}

/// Sample-weighted running mean of batch breakdowns.
#[derive(Default)]
struct Accumulator {
    sum: LossBreakdown,
    n: usize,
}

impl Accumulator {
    fn add(&mut self, b: &LossBreakdown, n: usize) {
        let w = n as f64;
        self.sum.l_ce += w * b.l_ce;
        self.sum.l_intra += w * b.l_intra;
        self.sum.l_inter += w * b.l_inter;
        self.sum.l_total += w * b.l_total;
        self.n += n;
    }

    fn mean(&self) -> LossBreakdown {
        let w = self.n.max(1) as f64;
        LossBreakdown {
            l_ce: self.sum.l_ce / w,
            l_intra: self.sum.l_intra / w,
            l_inter: self.sum.l_inter / w,
            l_total: self.sum.l_total / w,
        }
    }
}

/// Total loss over the validation records in eval mode, batched like
/// training so the latent terms see batches of the same size.
pub fn validation_loss(
    model: &mut ClassifierModel<f32>,
    data: &Dataset,
    val: &[usize],
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut acc = Accumulator::default();
    for chunk in val.chunks(cfg.batch_size) {
        let out = model.forward(&data.input_batch(chunk)?, Mode::Eval)?;
        let ids = if cfg.uses_cmc() {
            Some(cluster_ids(data, chunk)?)
        } else {
            None
        };
        let loss = total_loss(&out.logits, &data.targets(chunk), &out.latents, ids.as_deref(), cfg)?;
        acc.add(&loss.breakdown, chunk.len());
    }
    Ok(acc.mean().l_total)
}

fn check_inputs(data: &Dataset, split: &Split, cfg: &TrainConfig) -> Result<usize> {
    cfg.validate()?;
    if split.train.len() < 2 || split.val.is_empty() {
        return Err(Error::Split(format!(
            "{} train / {} validation records",
            split.train.len(),
            split.val.len()
        )));
    }
    if cfg.uses_cmc() {
        cluster_ids(data, &split.train)?;
        cluster_ids(data, &split.val)?;
    }
    data.segment_len()
}

/// Trains for the configured epochs and returns the checkpoint with the
/// lowest validation loss. `on_epoch` sees each record and the current model
/// as soon as the epoch ends.
pub fn train_with<F>(data: &Dataset, split: &Split, cfg: &TrainConfig, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord, &ClassifierModel<f32>) -> Result<()>,
{
    let input_len = check_inputs(data, split, cfg)?;
    let arch = ArchSpec {
        batch_norm: cfg.batch_norm,
        ..ArchSpec::new(cfg.preset, input_len)
    };
    let mut model = ClassifierModel::<f32>::new(arch, cfg.seed)?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut order = split.train.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ClassifierModel<f32>)> = None;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut stream_rng(cfg.seed, SHUFFLE_STREAM + epoch as u64));
        let mut acc = Accumulator::default();
        // A trailing single record cannot form a pair or a batch statistic.
        for batch in order.chunks(cfg.batch_size).filter(|b| b.len() >= 2) {
            let out = model.forward(&data.input_batch(batch)?, Mode::Train)?;
            let ids = if cfg.uses_cmc() {
                Some(cluster_ids(data, batch)?)
            } else {
                None
            };
            let loss = total_loss(&out.logits, &data.targets(batch), &out.latents, ids.as_deref(), cfg)?;
            if !loss.breakdown.l_total.is_finite() {
                return Err(Error::Numeric(format!("training loss diverged in epoch {epoch}")));
            }
            model.zero_grad();
            model.backward(&loss.grad_logits, loss.grad_latents.as_ref())?;
            adam.step(&mut model.store)?;
            acc.add(&loss.breakdown, batch.len());
        }
        let val_loss = validation_loss(&mut model, data, &split.val, cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "validation loss is not finite in epoch {epoch}"
            )));
        }
        let m = acc.mean();
        let record = EpochRecord {
            epoch,
            l_ce: m.l_ce,
            l_intra: m.l_intra,
            l_inter: m.l_inter,
            l_total: m.l_total,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.5} (ce {:.5}) val {val_loss:.5} in {:.2}s",
            m.l_total,
            m.l_ce,
            record.seconds
        );
        if best.as_ref().is_none_or(|(_, v, _)| val_loss < *v) {
            best = Some((epoch, val_loss, model.clone()));
        }
        on_epoch(&record, &model)?;
        history.push(record);
    }
    let (best_epoch, _, model) = best.ok_or_else(|| Error::InvalidArgument("epochs must be positive".into()))?;
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
    })
}

pub fn train(data: &Dataset, split: &Split, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(data, split, cfg, |_, _| Ok(()))
}

/// Validation AUROC of a model against the evaluation labels (the truth
/// where known, else the observed label).
pub fn validation_auroc(model: &mut ClassifierModel<f32>, data: &Dataset, val: &[usize]) -> Result<f64> {
    let p = predict(model, data, val)?;
    let labels: Vec<u8> = val.iter().map(|&i| data.records[i].eval_label().binary()).collect();
    auroc_scores(&p.scores, &labels)
}

pub const DEFAULT_LAMBDA_GRID: [f64; 4] = [0.0, 1e-3, 1e-2, 1e-1];

/// Every (lambda1, lambda2) pair from the values.
pub fn lambda_grid(values: &[f64]) -> Vec<(f64, f64)> {
    values
        .iter()
        .flat_map(|&a| values.iter().map(move |&b| (a, b)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub lambda1: f64,
    pub lambda2: f64,
    pub val_auroc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub status: String,
}

pub struct GridResult {
    pub best: (f64, f64),
    pub best_outcome: TrainOutcome,
    pub table: Vec<GridRow>,
}

/// Sorted, duplicate-free grid.
pub fn dedup_grid(grid: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    if grid
        .iter()
        .any(|&(a, b)| !(a >= 0.0 && b >= 0.0 && a.is_finite() && b.is_finite()))
    {
        return Err(Error::InvalidArgument(
            "grid values must be finite and non-negative".into(),
        ));
    }
    let mut g = grid.to_vec();
    g.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    g.dedup();
    Ok(g)
}

/// Trains one CMC model per distinct grid point and keeps the one with the
/// highest validation AUROC; ties go to the smaller (lambda1, lambda2).
/// A failing cell is recorded in the table and skipped.
pub fn grid_search_lambdas(
    data: &Dataset,
    split: &Split,
    grid: &[(f64, f64)],
    cfg: &TrainConfig,
) -> Result<GridResult> {
    let grid = dedup_grid(grid)?;
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty lambda grid".into()));
    }
    let mut table = Vec::with_capacity(grid.len());
    let mut best: Option<((f64, f64), f64, TrainOutcome)> = None;
    let mut last_err = None;
    for &(l1, l2) in &grid {
        let cell = TrainConfig {
            lambda1: l1,
            lambda2: l2,
            loss_mode: LossMode::Cmc,
            ..cfg.clone()
        };
        let result = train(data, split, &cell).and_then(|mut o| {
            let a = validation_auroc(&mut o.model, data, &split.val)?;
            Ok((a, o))
        });
        match result {
            Ok((a, outcome)) => {
                table.push(GridRow {
                    lambda1: l1,
                    lambda2: l2,
                    val_auroc: Some(a),
                    best_epoch: Some(outcome.best_epoch),
                    status: "ok".into(),
                });
                if best.as_ref().is_none_or(|(_, b, _)| a > *b) {
                    best = Some(((l1, l2), a, outcome));
                }
            }
            Err(e) => {
                log::warn!("grid cell ({l1}, {l2}) failed: {e}");
                table.push(GridRow {
                    lambda1: l1,
                    lambda2: l2,
                    val_auroc: None,
                    best_epoch: None,
                    status: format!("failed: {e}"),
                });
                last_err = Some(e);
            }
        }
    }
    match best {
        Some((best, _, best_outcome)) => Ok(GridResult {
            best,
            best_outcome,
            table,
        }),
        None => Err(last_err.expect("grid is non-empty")),
    }
}

pub fn write_grid_csv<W: Write>(w: W, table: &[GridRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let map = |e: csv::Error| Error::Format(e.to_string());
    out.write_record(["lambda1", "lambda2", "val_auroc", "best_epoch", "status"])
        .map_err(map)?;
    for r in table {
        out.write_record([
            r.lambda1.to_string(),
            r.lambda2.to_string(),
            r.val_auroc.map_or_else(String::new, |v| v.to_string()),
            r.best_epoch.map_or_else(String::new, |v| v.to_string()),
            r.status.clone(),
        ])
        .map_err(map)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_d(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[v.len(), 1], v.to_vec()).unwrap()
    }

    fn raw() -> CmcSettings {
        CmcSettings {
            normalization: Normalization::RawSum,
            margin: None,
        }
    }

    #[test]
    fn two_cluster_fixture() {
        let t = cmc_losses(&one_d(&[0.0, 2.0, 10.0, 12.0]), &[0, 0, 1, 1], &raw()).unwrap();
        assert_eq!(t.l_intra, 8.0);
        assert_eq!(t.l_inter, -80.0);
        let m = cmc_losses(&one_d(&[0.0, 2.0, 10.0, 12.0]), &[0, 0, 1, 1], &CmcSettings::default()).unwrap();
        assert_eq!(m.l_intra, 2.0);
        assert_eq!(m.l_inter, -10.0);
    }

    #[test]
    fn degenerate_batches() {
        let t = cmc_losses(&one_d(&[3.0, 3.0, 3.0]), &[1, 1, 2], &raw()).unwrap();
        assert_eq!(t.l_intra, 0.0);
        let single = cmc_losses(&one_d(&[0.0, 4.0, 9.0]), &[5, 5, 5], &CmcSettings::default()).unwrap();
        assert_eq!(single.l_inter, 0.0);
        assert!(single.grad_inter.iter().all(|&g| g == 0.0));
        let alone = cmc_losses(&one_d(&[0.0, 4.0]), &[0, 1], &CmcSettings::default()).unwrap();
        assert_eq!(alone.l_intra, 0.0);
    }

    #[test]
    fn margin_hinge() {
        let s = CmcSettings {
            normalization: Normalization::RawSum,
            margin: Some(11.0),
        };
        // Cross distances 10, 12, 8, 10: hinge terms 1, 0, 3, 1.
        let t = cmc_losses(&one_d(&[0.0, 2.0, 10.0, 12.0]), &[0, 0, 1, 1], &s).unwrap();
        assert_eq!(t.l_inter, 5.0 / 4.0);
    }

    #[test]
    fn linear_combination() {
        let b = LossBreakdown::combine(0.5, 2.0, -3.0, 0.1, 0.01);
        assert!((b.l_total - 0.67).abs() < 1e-12);
        assert_eq!(LossBreakdown::combine(0.4321, 7.0, -9.0, 0.0, 0.0).l_total, 0.4321);
    }

    #[test]
    fn grid_dedup_sorts() {
        let g = dedup_grid(&[(0.1, 0.0), (0.0, 0.0), (0.1, 0.0), (0.0, 1e-3)]).unwrap();
        assert_eq!(g, vec![(0.0, 0.0), (0.0, 1e-3), (0.1, 0.0)]);
        assert!(dedup_grid(&[(-1.0, 0.0)]).is_err());
        assert_eq!(lambda_grid(&DEFAULT_LAMBDA_GRID).len(), 16);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                val_fraction: 1.0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 1,
                ..Default::default()
            },
            TrainConfig {
                lambda1: -0.1,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
        let cfg: TrainConfig = serde_json::from_str(r#"{"loss_mode": "SCE", "normalization": "RAW_SUM"}"#).unwrap();
        assert_eq!(cfg.loss_mode, LossMode::Sce);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lambda3": 1}"#).is_err());
    }
}
