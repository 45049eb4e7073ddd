//! Ranking metrics, quality subgroups, the one-record-per-patient bootstrap,
//! Wilcoxon signed-rank tests, latent-neighbourhood analysis and timing.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::{softmax_rows, ClassifierModel};
use crate::signal::Quality;
use crate::synth::stream_rng;
use crate::train::EpochRecord;

/// Largest number of non-zero differences tested by full enumeration.
pub const EXACT_WILCOXON_MAX_N: usize = 12;
/// Redraws allowed for a bootstrap draw that misses a class.
pub const BOOTSTRAP_RETRIES: usize = 100;
pub const DEFAULT_NEIGHBOURS: usize = 50;
const PREDICT_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub record_id: usize,
    pub patient_id: String,
    /// Predicted AF probability.
    pub score: f64,
    pub label: u8,
    pub quality: Quality,
}

impl ScoredRecord {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::InvalidArgument(format!(
                "record {}: score {} outside [0, 1]",
                self.record_id, self.score
            )));
        }
        if self.label > 1 {
            return Err(Error::InvalidArgument(format!(
                "record {}: label {}",
                self.record_id, self.label
            )));
        }
        Ok(())
    }
}

fn split_columns(scored: &[ScoredRecord]) -> (Vec<f64>, Vec<u8>) {
    scored.iter().map(|r| (r.score, r.label)).unzip()
}

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    (pos, labels.len() - pos)
}

/// Area under the ROC curve: the probability that a positive outscores a
/// negative, ties counting one half. Computed from midranks.
pub fn auroc_scores(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores contain NaN".into()));
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of the positives, kept integral.
    let mut rank_sum2 = 0u64;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let mid2 = (start + 1 + end) as u64;
        let group_pos = order[start..end].iter().filter(|&&i| labels[i] == 1).count() as u64;
        rank_sum2 += mid2 * group_pos;
        start = end;
    }
    let pos = pos as u64;
    let u2 = rank_sum2 - pos * (pos + 1);
    Ok(u2 as f64 / (2 * pos * neg as u64) as f64)
}

/// Average precision: precision at each distinct threshold, weighted by the
/// recall gained there.
pub fn auprc_scores(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let (pos, _) = class_counts(labels);
    if pos == 0 {
        return Err(Error::UndefinedMetric("AUPRC needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let gained = order[start..end].iter().filter(|&&i| labels[i] == 1).count();
        tp += gained;
        fp += end - start - gained;
        if gained > 0 {
            ap += (gained as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
        start = end;
    }
    Ok(ap)
}

pub fn auroc(scored: &[ScoredRecord]) -> Result<f64> {
    let (s, y) = split_columns(scored);
    auroc_scores(&s, &y)
}

pub fn auprc(scored: &[ScoredRecord]) -> Result<f64> {
    let (s, y) = split_columns(scored);
    auprc_scores(&s, &y)
}

/// Metrics on one partition; `None` where the metric is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub n: usize,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
}

impl GroupMetrics {
    pub fn of(scored: &[ScoredRecord]) -> Self {
        Self {
            n: scored.len(),
            auroc: auroc(scored).ok(),
            auprc: auprc(scored).ok(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub overall: GroupMetrics,
    pub good: GroupMetrics,
    pub bad: GroupMetrics,
    /// Percentage of AUROC lost going from GOOD to BAD segments.
    pub auroc_drop_pct: Option<f64>,
}

pub fn drop_pct(auroc_good: f64, auroc_bad: f64) -> f64 {
    100.0 * (auroc_good - auroc_bad) / auroc_good
}

pub fn subgroup_eval(scored: &[ScoredRecord]) -> SubgroupReport {
    let (good, bad): (Vec<ScoredRecord>, Vec<ScoredRecord>) =
        scored.iter().cloned().partition(|r| r.quality == Quality::Good);
    let good = GroupMetrics::of(&good);
    let bad = GroupMetrics::of(&bad);
    let auroc_drop_pct = match (good.auroc, bad.auroc) {
        (Some(g), Some(b)) if g > 0.0 => Some(drop_pct(g, b)),
        _ => None,
    };
    SubgroupReport {
        overall: GroupMetrics::of(scored),
        good,
        bad,
        auroc_drop_pct,
    }
}

/// Record positions grouped by patient, patients in sorted order.
fn patient_groups(scored: &[ScoredRecord]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in scored.iter().enumerate() {
        groups.entry(r.patient_id.as_str()).or_default().push(i);
    }
    groups.into_values().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapDraws {
    /// Positions into the scored slice, one per patient, for every kept draw.
    pub draws: Vec<Vec<usize>>,
    /// Draws dropped after every retry missed a class.
    pub skipped: usize,
}

/// Draws one record per patient, `draws` times. Each draw has its own RNG
/// stream and is redrawn while it lacks a class, up to the retry cap.
pub fn bootstrap_draws(scored: &[ScoredRecord], draws: usize, seed: u64) -> Result<BootstrapDraws> {
    let groups = patient_groups(scored);
    if groups.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "bootstrap needs 2 patients, got {}",
            groups.len()
        )));
    }
    let picked: Vec<Option<Vec<usize>>> = (0..draws as u64)
        .into_par_iter()
        .map(|d| {
            let mut rng = stream_rng(seed, d);
            (0..=BOOTSTRAP_RETRIES).find_map(|_| {
                let draw: Vec<usize> = groups.iter().map(|g| g[rng.gen_range(0..g.len())]).collect();
                let pos = draw.iter().filter(|&&i| scored[i].label == 1).count();
                (pos > 0 && pos < draw.len()).then_some(draw)
            })
        })
        .collect();
    let skipped = picked.iter().filter(|d| d.is_none()).count();
    Ok(BootstrapDraws {
        draws: picked.into_iter().flatten().collect(),
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub samples: Vec<f64>,
    pub records_per_draw: usize,
    pub skipped: usize,
}

pub fn bootstrap_auroc(scored: &[ScoredRecord], draws: usize, seed: u64) -> Result<BootstrapResult> {
    let b = bootstrap_draws(scored, draws, seed)?;
    if b.draws.is_empty() {
        return Err(Error::UndefinedMetric("every bootstrap draw lacked a class".into()));
    }
    let samples = b
        .draws
        .iter()
        .map(|draw| {
            let sub: Vec<ScoredRecord> = draw.iter().map(|&i| scored[i].clone()).collect();
            auroc(&sub)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(BootstrapResult {
        samples,
        records_per_draw: b.draws[0].len(),
        skipped: b.skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Non-zero differences.
    pub n: usize,
    /// Sum of the ranks of the positive differences.
    pub w_plus: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Midranks of the absolute values, doubled so they stay integral.
fn doubled_midranks(abs: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut ranks = vec![0u64; abs.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && abs[order[end]] == abs[order[start]] {
            end += 1;
        }
        for &i in &order[start..end] {
            ranks[i] = (start + 1 + end) as u64;
        }
        ties.push(end - start);
        start = end;
    }
    (ranks, ties)
}

/// Two-sided Wilcoxon signed-rank test on paired samples. Zero differences
/// are dropped; with no differences left the p-value is 1.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "paired samples of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.iter().any(|d| d.is_nan()) {
        return Err(Error::InvalidArgument("differences contain NaN".into()));
    }
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            n,
            w_plus: 0.0,
            p_value: 1.0,
            exact: true,
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = doubled_midranks(&abs);
    let w2: u64 = ranks
        .iter()
        .zip(&diffs)
        .filter(|(_, d)| **d > 0.0)
        .map(|(r, _)| r)
        .sum();
    let w_plus = w2 as f64 / 2.0;
    if n <= EXACT_WILCOXON_MAX_N {
        let (mut below, mut above) = (0u64, 0u64);
        for mask in 0u32..(1 << n) {
            let w: u64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            below += u64::from(w <= w2);
            above += u64::from(w >= w2);
        }
        let total = (1u64 << n) as f64;
        let p = (2.0 * below.min(above) as f64 / total).min(1.0);
        return Ok(WilcoxonResult {
            n,
            w_plus,
            p_value: p,
            exact: true,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = (w_plus - mean) / var.sqrt();
        libm::erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
    };
    Ok(WilcoxonResult {
        n,
        w_plus,
        p_value: p,
        exact: false,
    })
}

/// Per-comparison significance level under a Bonferroni correction.
pub fn bonferroni_alpha(alpha: f64, comparisons: usize) -> f64 {
    alpha / comparisons.max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighbourStats {
    /// Neighbours whose observed label equals their trusted label.
    pub purity: f64,
    /// Neighbours whose trusted class differs from the query's.
    pub ccr: f64,
    /// Neighbours whose trusted class equals the query's.
    pub same_class: f64,
}

/// Reference points carry both labels; queries only need a trusted class.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceSet<'a> {
    pub latents: &'a [Vec<f32>],
    pub observed: &'a [u8],
    pub trusted: &'a [u8],
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
        .sum()
}

/// Euclidean k-NN statistics per query, distance ties broken by reference
/// position. `k` is clamped to the reference size; the clamped value is
/// returned alongside.
pub fn latent_neighbourhood(
    queries: &[Vec<f32>],
    query_trusted: &[u8],
    reference: ReferenceSet<'_>,
    k: usize,
) -> Result<(Vec<NeighbourStats>, usize)> {
    let n_ref = reference.latents.len();
    if reference.observed.len() != n_ref || reference.trusted.len() != n_ref || queries.len() != query_trusted.len() {
        return Err(Error::Shape("latents and labels differ in length".into()));
    }
    if n_ref == 0 || k == 0 {
        return Err(Error::InvalidArgument(
            "need a non-empty reference set and k > 0".into(),
        ));
    }
    let k_used = if k > n_ref {
        log::warn!("reference set holds {n_ref} points, clamping k from {k}");
        n_ref
    } else {
        k
    };
    let stats = queries
        .par_iter()
        .zip(query_trusted)
        .map(|(q, &qy)| {
            let mut d: Vec<(f64, usize)> = reference.latents.iter().map(|r| sq_dist(q, r)).zip(0..).collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let nn = &d[..k_used];
            let frac = |f: &dyn Fn(usize) -> bool| nn.iter().filter(|&&(_, j)| f(j)).count() as f64 / k_used as f64;
            NeighbourStats {
                purity: frac(&|j| reference.observed[j] == reference.trusted[j]),
                ccr: frac(&|j| reference.trusted[j] != qy),
                same_class: frac(&|j| reference.trusted[j] == qy),
            }
        })
        .collect();
    Ok((stats, k_used))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSummary {
    pub k: usize,
    pub mean_purity: f64,
    pub mean_ccr: f64,
    pub mean_same_class: f64,
    pub purity: Vec<f64>,
    pub ccr: Vec<f64>,
}

impl LatentSummary {
    pub fn from_stats(stats: &[NeighbourStats], k: usize) -> Self {
        let mean = |v: &[f64]| {
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let purity: Vec<f64> = stats.iter().map(|s| s.purity).collect();
        let ccr: Vec<f64> = stats.iter().map(|s| s.ccr).collect();
        let same: Vec<f64> = stats.iter().map(|s| s.same_class).collect();
        Self {
            k,
            mean_purity: mean(&purity),
            mean_ccr: mean(&ccr),
            mean_same_class: mean(&same),
            purity,
            ccr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub median_epoch_s_ce: f64,
    pub median_epoch_s_cmc: f64,
    /// Median CMC epoch time over median CE epoch time.
    pub overhead_ratio: f64,
    /// Autoencoder pre-training, reported apart from the epoch ratio.
    pub autoencoder_s: Option<f64>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn timing_compare(ce: &[EpochRecord], cmc: &[EpochRecord], autoencoder_s: Option<f64>) -> Result<TimingSummary> {
    if ce.is_empty() || ce.len() != cmc.len() {
        return Err(Error::InvalidArgument(format!(
            "timing needs equal non-empty histories, got {} and {}",
            ce.len(),
            cmc.len()
        )));
    }
    let mut a: Vec<f64> = ce.iter().map(|r| r.seconds).collect();
    let mut b: Vec<f64> = cmc.iter().map(|r| r.seconds).collect();
    let (ma, mb) = (median(&mut a), median(&mut b));
    Ok(TimingSummary {
        median_epoch_s_ce: ma,
        median_epoch_s_cmc: mb,
        overhead_ratio: mb / ma,
        autoencoder_s,
    })
}

/// AF probabilities and latent vectors for the given records, in order.
pub struct Predictions {
    pub scores: Vec<f64>,
    pub latents: Vec<Vec<f32>>,
}

pub fn predict(model: &mut ClassifierModel<f32>, data: &Dataset, indices: &[usize]) -> Result<Predictions> {
    let mut scores = Vec::with_capacity(indices.len());
    let mut latents = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(PREDICT_CHUNK) {
        let out = model.predict(&data.input_batch(chunk)?, PREDICT_CHUNK)?;
        scores.extend(softmax_rows(&out.logits).iter().map(|p| p[1]));
        latents.extend(out.latents.data().chunks(model.latent_dim()).map(<[f32]>::to_vec));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("model produced non-finite scores".into()));
    }
    Ok(Predictions { scores, latents })
}

/// Scores every record against its evaluation label (truth when known).
pub fn score_dataset(model: &mut ClassifierModel<f32>, data: &Dataset) -> Result<Vec<ScoredRecord>> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let p = predict(model, data, &indices)?;
    Ok(data
        .records
        .iter()
        .zip(p.scores)
        .enumerate()
        .map(|(i, (r, score))| ScoredRecord {
            record_id: i,
            patient_id: r.patient_id().to_string(),
            score,
            label: r.eval_label().binary(),
            quality: r.quality.value,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub a: String,
    pub b: String,
    pub p_value: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub subgroups: SubgroupReport,
    pub bootstrap: Option<BootstrapResult>,
    pub pairwise: Vec<PairwiseTest>,
    pub significance_threshold: f64,
    pub timing: Option<TimingSummary>,
    pub latent: Option<LatentSummary>,
}

impl MetricsReport {
    pub fn new(method: impl Into<String>, scored: &[ScoredRecord]) -> Self {
        Self {
            method: method.into(),
            subgroups: subgroup_eval(scored),
            bootstrap: None,
            pairwise: Vec::new(),
            significance_threshold: 0.05,
            timing: None,
            latent: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Wilcoxon tests over bootstrap samples for every pair of methods, at the
/// Bonferroni-corrected level. Samples are paired by draw.
pub fn pairwise_tests(methods: &[(String, Vec<f64>)], alpha: f64) -> Result<(Vec<PairwiseTest>, f64)> {
    let n = methods.len();
    let threshold = bonferroni_alpha(alpha, n * n.saturating_sub(1) / 2);
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let r = wilcoxon_signed_rank(&methods[i].1, &methods[j].1)?;
            out.push(PairwiseTest {
                a: methods[i].0.clone(),
                b: methods[j].0.clone(),
                p_value: r.p_value,
                significant: r.p_value < threshold,
            });
        }
    }
    Ok((out, threshold))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Rows of (method, auroc_good, drop_pct) for quality-drop plots.
pub fn write_quality_drop_csv<W: Write>(w: W, reports: &[MetricsReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["method", "auroc_good", "drop_pct"])
        .map_err(csv_err)?;
    for r in reports {
        out.write_record([
            r.method.clone(),
            fmt_opt(r.subgroups.good.auroc),
            fmt_opt(r.subgroups.auroc_drop_pct),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_subgroup_csv<W: Write>(w: W, reports: &[MetricsReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["method", "group", "n", "auroc", "auprc"])
        .map_err(csv_err)?;
    for r in reports {
        let s = &r.subgroups;
        for (name, g) in [("overall", &s.overall), ("good", &s.good), ("bad", &s.bad)] {
            out.write_record([
                r.method.clone(),
                name.to_string(),
                g.n.to_string(),
                fmt_opt(g.auroc),
                fmt_opt(g.auprc),
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_bootstrap_csv<W: Write>(w: W, samples: &[f64]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["draw", "auroc"]).map_err(csv_err)?;
    for (i, s) in samples.iter().enumerate() {
        out.write_record([i.to_string(), s.to_string()]).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_neighbour_csv<W: Write>(w: W, query_ids: &[usize], stats: &[NeighbourStats]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["query", "purity", "ccr", "same_class"])
        .map_err(csv_err)?;
    for (q, s) in query_ids.iter().zip(stats) {
        out.write_record([
            q.to_string(),
            s.purity.to_string(),
            s.ccr.to_string(),
            s.same_class.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(i: usize, patient: &str, score: f64, label: u8, quality: Quality) -> ScoredRecord {
        ScoredRecord {
            record_id: i,
            patient_id: patient.into(),
            score,
            label,
            quality,
        }
    }

    #[test]
    fn auroc_fixtures() {
        assert_eq!(auroc_scores(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auroc_scores(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auroc_scores(&[0.3; 5], &[0, 1, 0, 1, 1]).unwrap(), 0.5);
        assert!(matches!(
            auroc_scores(&[0.1, 0.2], &[1, 1]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn auprc_fixtures() {
        assert_eq!(auprc_scores(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auprc_scores(&[0.3, 0.1, 0.7], &[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(auprc_scores(&[0.1, 0.9], &[1, 0]).unwrap(), 0.5);
        assert!(matches!(auprc_scores(&[0.1], &[0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn subgroup_drop() {
        assert!((drop_pct(0.90, 0.72) - 20.0).abs() < 1e-12);
        assert_eq!(drop_pct(0.8, 0.8), 0.0);
        let scored = vec![
            rec(0, "a", 0.1, 0, Quality::Good),
            rec(1, "b", 0.9, 1, Quality::Good),
            rec(2, "c", 0.4, 1, Quality::Good),
        ];
        let r = subgroup_eval(&scored);
        assert_eq!(r.good.auroc, Some(1.0));
        assert_eq!(r.bad.n, 0);
        assert_eq!(r.bad.auroc, None);
        assert_eq!(r.auroc_drop_pct, None);
    }

    #[test]
    fn wilcoxon_fixtures() {
        let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0], &[0.0; 3]).unwrap();
        assert_eq!(r.p_value, 0.25);
        assert!(r.exact);
        assert_eq!(wilcoxon_signed_rank(&[0.4, 0.5], &[0.4, 0.5]).unwrap().p_value, 1.0);
        assert_eq!(wilcoxon_signed_rank(&[-1.0, 1.0], &[0.0, 0.0]).unwrap().p_value, 1.0);
        assert!(wilcoxon_signed_rank(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn bonferroni_for_fifteen_comparisons() {
        let a = bonferroni_alpha(0.05, 15);
        assert!((a - 0.05 / 15.0).abs() < 1e-15);
        assert!((a - 0.0033).abs() < 1e-4);
    }

    #[test]
    fn single_record_patients_give_identical_draws() {
        let scored: Vec<ScoredRecord> = (0..6)
            .map(|i| rec(i, &format!("p{i}"), i as f64 / 6.0, (i % 2) as u8, Quality::Good))
            .collect();
        let b = bootstrap_auroc(&scored, 20, 3).unwrap();
        assert_eq!(b.samples.len(), 20);
        assert_eq!(b.records_per_draw, 6);
        assert!(b.samples.iter().all(|&s| s == b.samples[0]));
    }

    #[test]
    fn neighbour_fixtures() {
        // 40 of 50 correctly labeled, 10 of the other class.
        let latents: Vec<Vec<f32>> = (0..50).map(|i| vec![i as f32]).collect();
        let trusted: Vec<u8> = (0..50).map(|i| u8::from(i >= 40)).collect();
        let observed: Vec<u8> = (0..50).map(|i| if i < 10 { 1 } else { trusted[i] }).collect();
        let reference = ReferenceSet {
            latents: &latents,
            observed: &observed,
            trusted: &trusted,
        };
        let (s, k) = latent_neighbourhood(&[vec![0.0]], &[0], reference, 50).unwrap();
        assert_eq!(k, 50);
        assert_eq!(s[0].purity, 0.8);
        assert_eq!(s[0].ccr, 0.2);
        let (_, k) = latent_neighbourhood(&[vec![0.0]], &[0], reference, 80).unwrap();
        assert_eq!(k, 50);
    }

    #[test]
    fn identical_reference_is_pure() {
        let q = vec![vec![0.5f32, -1.0]];
        let latents = vec![q[0].clone(); 5];
        let labels = [1u8; 5];
        let reference = ReferenceSet {
            latents: &latents,
            observed: &labels,
            trusted: &labels,
        };
        let (s, _) = latent_neighbourhood(&q, &[1], reference, 3).unwrap();
        assert_eq!(s[0].purity, 1.0);
        assert_eq!(s[0].ccr, 0.0);
    }
}
