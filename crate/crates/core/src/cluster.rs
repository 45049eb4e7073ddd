//! Autoencoder embeddings and k-means cluster memberships.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::{mse, Adam, AdamConfig, Autoencoder, AutoencoderSpec, Mode};
use crate::synth::stream_rng;

const EMB_MAGIC: &[u8; 4] = b"EMB1";
const EMBED_CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of the training records held out to report reconstruction error.
    pub holdout_fraction: f64,
    pub latent_dim: usize,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 1e-3,
            batch_size: 64,
            seed: 0,
            holdout_fraction: 0.1,
            latent_dim: 64,
        }
    }
}

impl AeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.latent_dim == 0 {
            return Err(Error::InvalidArgument(
                "batch_size and latent_dim must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::InvalidArgument("holdout_fraction must lie in [0, 1)".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeReport {
    pub n_train: usize,
    pub n_holdout: usize,
    /// Mean batch reconstruction loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub initial_holdout_mse: f64,
    pub final_holdout_mse: f64,
    pub seconds: f64,
}

/// Element-weighted reconstruction MSE over `indices`, in eval mode.
fn reconstruction_mse(ae: &mut Autoencoder, data: &Dataset, indices: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in indices.chunks(EMBED_CHUNK) {
        let x = data.input_batch(chunk)?;
        let (recon, _) = ae.forward(&x, Mode::Eval)?;
        total += mse(&recon, &x)?.loss * x.len() as f64;
        count += x.len();
    }
    Ok(if count == 0 { f64::NAN } else { total / count as f64 })
}

/// Fits the autoencoder on `train` only. A seeded slice of it is held out from
/// the updates and used to report reconstruction error before and after.
pub fn train_autoencoder(train: &Dataset, cfg: &AeTrainConfig) -> Result<(Autoencoder, AeReport)> {
    cfg.validate()?;
    let input_len = train.segment_len()?;
    if train.len() < 2 {
        return Err(Error::InvalidArgument(
            "autoencoder training needs at least 2 records".into(),
        ));
    }
    let started = Instant::now();
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut stream_rng(cfg.seed, 0));
    let n_holdout = ((train.len() as f64 * cfg.holdout_fraction).round() as usize).clamp(1, train.len() - 1);
    let (holdout, fit) = order.split_at(n_holdout);
    let mut fit = fit.to_vec();
    fit.sort_unstable();

    let spec = AutoencoderSpec {
        input_len,
        latent_dim: cfg.latent_dim,
    };
    let mut ae = Autoencoder::new(spec, cfg.seed)?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let initial_holdout_mse = reconstruction_mse(&mut ae, train, holdout)?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        fit.shuffle(&mut stream_rng(cfg.seed, 1 + epoch as u64));
        let mut sum = 0.0;
        let mut batches = 0usize;
        for batch in fit.chunks(cfg.batch_size) {
            let x = train.input_batch(batch)?;
            let (recon, _) = ae.forward(&x, Mode::Train)?;
            let loss = mse(&recon, &x)?;
            if !loss.loss.is_finite() {
                return Err(Error::Numeric(format!("autoencoder loss diverged in epoch {epoch}")));
            }
            ae.zero_grad();
            ae.backward(&loss.grad)?;
            adam.step(&mut ae.store)?;
            sum += loss.loss;
            batches += 1;
        }
        let mean = sum / batches as f64;
        log::debug!("autoencoder epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    let final_holdout_mse = reconstruction_mse(&mut ae, train, holdout)?;
    if !final_holdout_mse.is_finite() {
        return Err(Error::Numeric("autoencoder holdout loss is not finite".into()));
    }
    let report = AeReport {
        n_train: fit.len(),
        n_holdout,
        epoch_losses,
        initial_holdout_mse,
        final_holdout_mse,
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok((ae, report))
}

/// Record-aligned latent vectors, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    dim: usize,
    data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbHeader {
    n: usize,
    dim: usize,
}

impl Embedding {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!("{} values do not form rows of {dim}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("embedding holds non-finite values".into()));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("embedding rows differ in length".into()));
        }
        Self::new(dim, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        container::write_header(
            w,
            EMB_MAGIC,
            &EmbHeader {
                n: self.len(),
                dim: self.dim,
            },
        )?;
        container::write_f32s(w, &self.data)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let header: EmbHeader = container::read_header(r, EMB_MAGIC)?;
        let total = header
            .n
            .checked_mul(header.dim)
            .ok_or_else(|| Error::Format("embedding size overflows".into()))?;
        let data = container::read_f32s(r, total)?;
        Self::new(header.dim, data).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Eval-mode encoder outputs, one per record in dataset order.
pub fn embed(ae: &mut Autoencoder, data: &Dataset) -> Result<Embedding> {
    let len = data.segment_len()?;
    if len != ae.spec().input_len {
        return Err(Error::Shape(format!(
            "segments have {len} samples, autoencoder expects {}",
            ae.spec().input_len
        )));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len() * ae.spec().latent_dim);
    for chunk in indices.chunks(EMBED_CHUNK) {
        let z = ae.encode(&data.input_batch(chunk)?, Mode::Eval)?;
        out.extend_from_slice(z.data());
    }
    Embedding::new(ae.spec().latent_dim, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterModel {
    #[serde(rename = "M")]
    pub m: usize,
    pub dim: usize,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub seed: u64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid and its squared distance; ties go to the lowest id.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, sq_dist(point, &centroids[0]));
    for (c, centroid) in centroids.iter().enumerate().skip(1) {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

impl ClusterModel {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 || self.centroids.len() != self.m {
            return Err(Error::InvalidArgument(format!(
                "cluster model needs M >= 2 centroids, has M = {} and {} centroids",
                self.m,
                self.centroids.len()
            )));
        }
        if self
            .centroids
            .iter()
            .any(|c| c.len() != self.dim || c.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::InvalidArgument(
                "centroids must be finite vectors of length dim".into(),
            ));
        }
        Ok(())
    }

    pub fn assign_point(&self, point: &[f32]) -> usize {
        let p: Vec<f64> = point.iter().map(|&v| f64::from(v)).collect();
        nearest(&p, &self.centroids).0
    }

    /// Nearest-centroid id for every embedding row.
    pub fn assign(&self, emb: &Embedding) -> Result<Vec<usize>> {
        if emb.dim() != self.dim {
            return Err(Error::Shape(format!(
                "embedding dim {} vs cluster model dim {}",
                emb.dim(),
                self.dim
            )));
        }
        Ok(emb.data().par_chunks(self.dim).map(|p| self.assign_point(p)).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let model: ClusterModel = serde_json::from_slice(&std::fs::read(path)?)?;
        model.validate()?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KmeansConfig {
    #[serde(rename = "M")]
    pub m: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self {
            m: 6,
            seed: 0,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

impl KmeansConfig {
    pub fn new(m: usize, seed: u64) -> Self {
        Self {
            m,
            seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansFit {
    pub model: ClusterModel,
    pub assignments: Vec<usize>,
    /// Inertia at every Lloyd assignment step; the last entry is the final one.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn kmeans_pp(points: &[Vec<f64>], m: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centroids.len() < m {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave the target just past the last positive weight.
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("total is positive"))
        } else {
            // Only duplicates of existing centroids remain.
            chosen.iter().position(|&c| !c).expect("n >= m")
        };
        chosen[pick] = true;
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[pick]));
        }
        centroids.push(points[pick].clone());
    }
    centroids
}

fn assign_all(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    points.par_iter().map(|p| nearest(p, centroids)).unzip()
}

fn check_monotone(history: &[f64], inertia: f64) -> Result<()> {
    if let Some(&prev) = history.last() {
        if inertia > prev + 1e-9 * prev.max(1.0) {
            return Err(Error::Numeric(format!("k-means inertia rose from {prev} to {inertia}")));
        }
    }
    Ok(())
}

/// k-means++ seeding followed by Lloyd iterations, all in f64.
pub fn kmeans(emb: &Embedding, cfg: &KmeansConfig) -> Result<KmeansFit> {
    let n = emb.len();
    if cfg.m < 2 {
        return Err(Error::InvalidArgument("M must be at least 2".into()));
    }
    if n < cfg.m {
        return Err(Error::TooFewPoints {
            points: n,
            clusters: cfg.m,
        });
    }
    let dim = emb.dim();
    let points: Vec<Vec<f64>> = emb.rows().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect();
    let mut rng = stream_rng(cfg.seed, 0);
    let mut centroids = kmeans_pp(&points, cfg.m, &mut rng);
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        iterations += 1;
        let (labels, dists) = assign_all(&points, &centroids);
        let inertia: f64 = dists.iter().sum();
        check_monotone(&history, inertia)?;
        history.push(inertia);

        let mut sums = vec![vec![0.0f64; dim]; cfg.m];
        let mut counts = vec![0usize; cfg.m];
        for (p, &c) in points.iter().zip(&labels) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut taken = vec![false; n];
        let mut shift = 0.0f64;
        for c in 0..cfg.m {
            let next = if counts[c] > 0 {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            } else {
                // Reseed an empty cluster at the point worst served by its centroid.
                let mut far = None::<usize>;
                for i in 0..n {
                    if !taken[i] && far.is_none_or(|f| dists[i] > dists[f]) {
                        far = Some(i);
                    }
                }
                let far = far.expect("n >= m");
                taken[far] = true;
                points[far].clone()
            };
            shift = shift.max(sq_dist(&next, &centroids[c]).sqrt());
            centroids[c] = next;
        }
        if shift < cfg.tol {
            converged = true;
            break;
        }
    }
    let (assignments, dists) = assign_all(&points, &centroids);
    let inertia: f64 = dists.iter().sum();
    check_monotone(&history, inertia)?;
    history.push(inertia);
    let model = ClusterModel {
        m: cfg.m,
        dim,
        centroids,
        inertia,
        seed: cfg.seed,
    };
    model.validate()?;
    Ok(KmeansFit {
        model,
        assignments,
        inertia_history: history,
        iterations,
        converged,
    })
}

/// Writes cluster ids into the records, in order.
pub fn attach_clusters(data: &mut Dataset, ids: &[usize]) -> Result<()> {
    if ids.len() != data.len() {
        return Err(Error::Shape(format!(
            "{} cluster ids for {} records",
            ids.len(),
            data.len()
        )));
    }
    for (r, &c) in data.records.iter_mut().zip(ids) {
        r.cluster_id = Some(c);
    }
    Ok(())
}

/// Autoencoder, embedding and k-means fitted on a training subset, with a
/// cluster id for every record of the full dataset.
pub struct ClusterFit {
    pub ae: Autoencoder,
    pub ae_report: AeReport,
    /// Embedding of every record, in dataset order.
    pub embedding: Embedding,
    pub kmeans: KmeansFit,
    pub ids: Vec<usize>,
}

/// Fits on the `train` records only; every record, inside or outside the
/// subset, is then assigned to its nearest centroid and tagged with it.
pub fn fit_clusters(
    data: &mut Dataset,
    train: &[usize],
    ae_cfg: &AeTrainConfig,
    km_cfg: &KmeansConfig,
) -> Result<ClusterFit> {
    let train_set = data.subset(train);
    let (mut ae, ae_report) = train_autoencoder(&train_set, ae_cfg)?;
    let embedding = embed(&mut ae, data)?;
    let train_rows: Vec<Vec<f32>> = train.iter().map(|&i| embedding.row(i).to_vec()).collect();
    let kmeans = kmeans(&Embedding::from_rows(&train_rows)?, km_cfg)?;
    let ids = kmeans.model.assign(&embedding)?;
    attach_clusters(data, &ids)?;
    Ok(ClusterFit {
        ae,
        ae_report,
        embedding,
        kmeans,
        ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points_1d(v: &[f32]) -> Embedding {
        Embedding::new(1, v.to_vec()).unwrap()
    }

    #[test]
    fn two_pairs_fixture() {
        let fit = kmeans(&points_1d(&[0.0, 1.0, 10.0, 11.0]), &KmeansConfig::new(2, 3)).unwrap();
        let mut c: Vec<f64> = fit.model.centroids.iter().map(|c| c[0]).collect();
        c.sort_by(f64::total_cmp);
        assert_eq!(c, vec![0.5, 10.5]);
        assert_eq!(fit.model.inertia, 1.0);
        assert!(fit.converged);
    }

    #[test]
    fn one_centroid_per_point() {
        let e = points_1d(&[3.0, -1.0, 7.5, 2.0, 0.25]);
        let fit = kmeans(&e, &KmeansConfig::new(5, 0)).unwrap();
        assert_eq!(fit.model.inertia, 0.0);
        let mut ids = fit.assignments.clone();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn too_few_points() {
        let err = kmeans(&points_1d(&[1.0, 2.0]), &KmeansConfig::new(3, 0)).unwrap_err();
        assert!(matches!(err, Error::TooFewPoints { points: 2, clusters: 3 }));
    }

    #[test]
    fn assignment_tie_goes_to_lowest_id() {
        let cm = ClusterModel {
            m: 5,
            dim: 1,
            centroids: vec![vec![-9.0], vec![0.0], vec![7.0], vec![3.0], vec![2.0]],
            inertia: 0.0,
            seed: 0,
        };
        assert_eq!(cm.assign_point(&[1.0]), 1);
        assert_eq!(cm.assign_point(&[3.0]), 3);
    }

    #[test]
    fn embedding_round_trip() {
        let e = Embedding::new(3, vec![0.5, -1.25, 3.0, 1e-7, 2.0, -0.0]).unwrap();
        let mut bytes = Vec::new();
        e.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"EMB1");
        assert_eq!(Embedding::read_from(&mut bytes.as_slice()).unwrap(), e);
        assert!(Embedding::new(2, vec![1.0, f32::NAN]).is_err());
    }

    #[test]
    fn cluster_model_json_round_trip() {
        let fit = kmeans(&points_1d(&[0.0, 1.0, 10.0, 11.0]), &KmeansConfig::new(2, 1)).unwrap();
        let json = fit.model.to_json().unwrap();
        assert!(json.contains("\"M\": 2"));
        let back: ClusterModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, fit.model);
    }
}
