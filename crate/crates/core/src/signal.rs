//! Waveform and segment types plus the preprocessing transforms applied
//! before any model sees a signal: segmentation, prefix extension,
//! resampling, min-max normalization and a heuristic quality index.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};

pub const DEFAULT_WINDOW_S: f64 = 30.0;
pub const CANONICAL_FS_HZ: f64 = 240.0;
pub const DEFAULT_SQI_THRESHOLD: f64 = 0.5;

const PPGW_MAGIC: &[u8; 5] = b"PPGW1";

/// A continuous recording from one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub patient_id: String,
    pub fs_hz: f64,
    pub start_time_ms: i64,
    pub samples: Vec<f32>,
}

impl Waveform {
    pub fn new(patient_id: impl Into<String>, fs_hz: f64, start_time_ms: i64, samples: Vec<f32>) -> Result<Self> {
        if !(fs_hz > 0.0 && fs_hz.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sampling rate must be positive, got {fs_hz}"
            )));
        }
        if samples.is_empty() {
            return Err(Error::InvalidArgument("waveform has no samples".into()));
        }
        Ok(Self {
            patient_id: patient_id.into(),
            fs_hz,
            start_time_ms,
            samples,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.fs_hz
    }

    /// Exclusive end of the recording in epoch milliseconds.
    pub fn end_time_ms(&self) -> f64 {
        self.start_time_ms as f64 + self.duration_s() * 1000.0
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = PpgwHeader {
            patient_id: self.patient_id.clone(),
            fs_hz: self.fs_hz,
            start_time_ms: self.start_time_ms,
            n_samples: self.samples.len() as u64,
        };
        container::write_header(w, PPGW_MAGIC, &header)?;
        container::write_f32s(w, &self.samples)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let header: PpgwHeader = container::read_header(r, PPGW_MAGIC)?;
        let samples = container::read_f32s(r, header.n_samples as usize)?;
        Waveform::new(header.patient_id, header.fs_hz, header.start_time_ms, samples)
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

#[derive(Debug, Serialize, Deserialize)]
struct PpgwHeader {
    patient_id: String,
    fs_hz: f64,
    start_time_ms: i64,
    n_samples: u64,
}

/// A fixed-length window cut from a waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub patient_id: String,
    pub t_start_ms: i64,
    pub fs_hz: f64,
    pub samples: Vec<f32>,
    pub normalized: bool,
}

impl Segment {
    /// Returns a min-max normalized copy.
    pub fn normalize(mut self) -> Self {
        self.samples = minmax_normalize(&self.samples);
        self.normalized = true;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Quality {
    Good,
    Bad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum QualitySource {
    GroundTruth,
    Heuristic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QualityFlag {
    pub value: Quality,
    pub source: QualitySource,
}

impl QualityFlag {
    pub fn ground_truth(value: Quality) -> Self {
        Self {
            value,
            source: QualitySource::GroundTruth,
        }
    }

    pub fn heuristic(value: Quality) -> Self {
        Self {
            value,
            source: QualitySource::Heuristic,
        }
    }

    pub fn is_good(&self) -> bool {
        self.value == Quality::Good
    }
}

/// Number of samples in a window of `window_s` seconds at `fs_hz`.
pub fn window_len(window_s: f64, fs_hz: f64) -> usize {
    (window_s * fs_hz).round() as usize
}

/// Cuts `w` into consecutive windows. A trailing remainder shorter than a
/// window is dropped; a waveform shorter than one window yields nothing.
pub fn segment_stream(w: &Waveform, window_s: f64, overlap_s: f64) -> Result<Vec<Segment>> {
    if !(window_s > 0.0) || window_s * w.fs_hz < 2.0 {
        return Err(Error::InvalidArgument(format!(
            "window of {window_s} s at {} Hz holds fewer than 2 samples",
            w.fs_hz
        )));
    }
    if !(overlap_s >= 0.0 && overlap_s < window_s) {
        return Err(Error::InvalidArgument(format!(
            "overlap {overlap_s} s must be in [0, {window_s})"
        )));
    }
    let len = window_len(window_s, w.fs_hz);
    let hop = window_len(window_s - overlap_s, w.fs_hz).max(1);
    let mut out = Vec::new();
    let mut start = 0usize;
    while start + len <= w.samples.len() {
        let offset_ms = (start as f64 * 1000.0 / w.fs_hz).round() as i64;
        out.push(Segment {
            patient_id: w.patient_id.clone(),
            t_start_ms: w.start_time_ms + offset_ms,
            fs_hz: w.fs_hz,
            samples: w.samples[start..start + len].to_vec(),
            normalized: false,
        });
        start += hop;
    }
    Ok(out)
}

/// Pads a short segment to `target_len` by appending a copy of its own
/// leading samples.
pub fn extend_by_prefix(samples: &[f32], target_len: usize) -> Result<Vec<f32>> {
    if target_len < samples.len() {
        return Err(Error::InvalidArgument(format!(
            "target length {target_len} is shorter than the input ({})",
            samples.len()
        )));
    }
    let deficit = target_len - samples.len();
    if deficit > samples.len() {
        return Err(Error::DeficitTooLarge {
            deficit,
            len: samples.len(),
        });
    }
    let mut out = Vec::with_capacity(target_len);
    out.extend_from_slice(samples);
    out.extend_from_slice(&samples[..deficit]);
    Ok(out)
}

/// Linear-interpolation resampling with the last sample held past the end.
pub fn resample(w: &Waveform, target_fs_hz: f64) -> Result<Waveform> {
    if !(target_fs_hz > 0.0 && target_fs_hz.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "target rate must be positive, got {target_fs_hz}"
        )));
    }
    let n = w.samples.len();
    let n_out = ((n as f64) * target_fs_hz / w.fs_hz).round().max(1.0) as usize;
    let ratio = w.fs_hz / target_fs_hz;
    let last = n - 1;
    let samples = (0..n_out)
        .map(|i| {
            let pos = i as f64 * ratio;
            let j = pos.floor() as usize;
            if j >= last {
                return w.samples[last];
            }
            let frac = pos - j as f64;
            let a = w.samples[j] as f64;
            let b = w.samples[j + 1] as f64;
            (a + (b - a) * frac) as f32
        })
        .collect();
    Ok(Waveform {
        patient_id: w.patient_id.clone(),
        fs_hz: target_fs_hz,
        start_time_ms: w.start_time_ms,
        samples,
    })
}

/// Maps samples affinely onto [0, 1]. A constant input maps to all zeros.
pub fn minmax_normalize(samples: &[f32]) -> Vec<f32> {
    let (lo, hi) = samples.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    });
    if !(hi > lo) {
        return vec![0.0; samples.len()];
    }
    let lo = lo as f64;
    let span = hi as f64 - lo;
    samples.iter().map(|&x| ((x as f64 - lo) / span) as f32).collect()
}

/// Autocorrelation signal-quality index: the largest Pearson correlation
/// between the segment and a lagged copy of itself, over lags of
/// 0.25 s to 2 s. Constant input scores 0.
pub fn signal_quality_index(samples: &[f32], fs_hz: f64) -> f64 {
    let n = samples.len();
    let min_lag = ((0.25 * fs_hz).round() as usize).max(1);
    let max_lag = ((2.0 * fs_hz).round() as usize).min(n.saturating_sub(2));
    let x: Vec<f64> = samples.iter().map(|&v| v as f64).collect();
    let mut best = 0.0f64;
    for lag in min_lag..=max_lag {
        let r = pearson(&x[..n - lag], &x[lag..]);
        if r > best {
            best = r;
        }
    }
    best
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

pub fn estimate_quality(seg: &Segment, sqi_threshold: f64) -> QualityFlag {
    let sqi = signal_quality_index(&seg.samples, seg.fs_hz);
    let value = if sqi >= sqi_threshold {
        Quality::Good
    } else {
        Quality::Bad
    };
    QualityFlag::heuristic(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wave(seconds: f64, fs: f64) -> Waveform {
        let n = (seconds * fs).round() as usize;
        Waveform::new("p1", fs, 0, (0..n).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn segments_tile_exactly() {
        let segs = segment_stream(&wave(90.0, 10.0), 30.0, 0.0).unwrap();
        let starts: Vec<i64> = segs.iter().map(|s| s.t_start_ms).collect();
        assert_eq!(starts, vec![0, 30_000, 60_000]);
    }

    #[test]
    fn remainder_is_dropped() {
        assert_eq!(segment_stream(&wave(89.0, 10.0), 30.0, 0.0).unwrap().len(), 2);
        assert!(segment_stream(&wave(29.0, 10.0), 30.0, 0.0).unwrap().is_empty());
    }

    #[test]
    fn canonical_window_length() {
        let segs = segment_stream(&wave(30.0, 240.0), 30.0, 0.0).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].samples.len(), 7200);
    }

    #[test]
    fn overlapping_segments_step_by_hop() {
        let segs = segment_stream(&wave(60.0, 10.0), 30.0, 15.0).unwrap();
        let starts: Vec<i64> = segs.iter().map(|s| s.t_start_ms).collect();
        assert_eq!(starts, vec![0, 15_000, 30_000]);
    }

    #[test]
    fn segment_preconditions() {
        assert!(segment_stream(&wave(10.0, 10.0), 0.1, 0.0).is_err());
        assert!(segment_stream(&wave(10.0, 10.0), 3.0, 3.0).is_err());
    }

    #[test]
    fn prefix_extension() {
        assert_eq!(
            extend_by_prefix(&[1.0, 2.0, 3.0, 4.0, 5.0], 7).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 1.0, 2.0]
        );
        assert_eq!(extend_by_prefix(&[1.0, 2.0], 2).unwrap(), vec![1.0, 2.0]);
        let short: Vec<f32> = (0..6000).map(|i| i as f32).collect();
        let out = extend_by_prefix(&short, 7200).unwrap();
        assert_eq!(out.len(), 7200);
        assert_eq!(&out[..6000], &short[..]);
        assert_eq!(&out[6000..], &short[..1200]);
        assert!(matches!(
            extend_by_prefix(&[1.0, 2.0], 5),
            Err(Error::DeficitTooLarge { deficit: 3, len: 2 })
        ));
    }

    #[test]
    fn resample_rate_ratio() {
        let w = Waveform::new("p", 80.0, 5, vec![0.3; 2400]).unwrap();
        let up = resample(&w, 240.0).unwrap();
        assert_eq!(up.samples.len(), 7200);
        assert_eq!(up.start_time_ms, 5);
        assert_eq!(up.patient_id, "p");
    }

    #[test]
    fn resample_constant_stays_constant() {
        let w = Waveform::new("p", 33.0, 0, vec![5.0; 100]).unwrap();
        for fs in [7.0, 33.0, 100.0, 240.0] {
            assert!(resample(&w, fs).unwrap().samples.iter().all(|&x| x == 5.0));
        }
    }

    #[test]
    fn resample_endpoint_hold() {
        let w = Waveform::new("p", 1.0, 0, vec![0.0, 1.0]).unwrap();
        assert_eq!(resample(&w, 2.0).unwrap().samples, vec![0.0, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_normalize(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_normalize(&[5.0, 5.0, 5.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(minmax_normalize(&[-1.0, 0.0, 3.0]), vec![0.0, 0.25, 1.0]);
    }

    #[test]
    fn sinusoid_is_good_quality() {
        let fs = 240.0;
        let samples: Vec<f32> = (0..7200)
            .map(|i| (2.0 * std::f64::consts::PI * 1.2 * i as f64 / fs).sin() as f32)
            .collect();
        let seg = Segment {
            patient_id: "p".into(),
            t_start_ms: 0,
            fs_hz: fs,
            samples: minmax_normalize(&samples),
            normalized: true,
        };
        let sqi = signal_quality_index(&seg.samples, fs);
        assert!(sqi > 0.99, "sqi {sqi}");
        assert_eq!(estimate_quality(&seg, 0.5), QualityFlag::heuristic(Quality::Good));
    }

    #[test]
    fn white_noise_is_bad_quality() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let samples: Vec<f32> = (0..7200).map(|_| rng.gen::<f32>()).collect();
        let sqi = signal_quality_index(&samples, 240.0);
        assert!(sqi < 0.2, "sqi {sqi}");
        let seg = Segment {
            patient_id: "p".into(),
            t_start_ms: 0,
            fs_hz: 240.0,
            samples,
            normalized: true,
        };
        assert_eq!(estimate_quality(&seg, 0.5).value, Quality::Bad);
    }

    #[test]
    fn flatline_is_bad_quality() {
        let seg = Segment {
            patient_id: "p".into(),
            t_start_ms: 0,
            fs_hz: 40.0,
            samples: vec![0.0; 1200],
            normalized: true,
        };
        assert_eq!(signal_quality_index(&seg.samples, 40.0), 0.0);
        assert_eq!(estimate_quality(&seg, 0.5).value, Quality::Bad);
    }

    #[test]
    fn ppgw_round_trip() {
        let w = Waveform::new("patient-9", 62.5, 1_700_000_000_000, vec![0.25, -1.5, 3.0]).unwrap();
        let mut buf = Vec::new();
        w.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..5], b"PPGW1");
        let header_len = u32::from_le_bytes([buf[5], buf[6], buf[7], buf[8]]) as usize;
        assert_eq!(buf.len(), 9 + header_len + 3 * 4);
        assert_eq!(Waveform::read_from(&mut buf.as_slice()).unwrap(), w);
    }

    #[test]
    fn ppgw_rejects_wrong_magic() {
        let mut buf = b"PPGD1".to_vec();
        buf.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(
            Waveform::read_from(&mut buf.as_slice()),
            Err(Error::Format(_))
        ));
    }

    proptest! {
        #[test]
        fn minmax_is_idempotent(xs in prop::collection::vec(-1e3f32..1e3, 2..64)) {
            let once = minmax_normalize(&xs);
            let twice = minmax_normalize(&once);
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn segments_concatenate_to_a_prefix(n in 20usize..400, win in 2usize..40) {
            let w = Waveform::new("p", 10.0, 0, (0..n).map(|i| i as f32).collect()).unwrap();
            let segs = segment_stream(&w, win as f64 / 10.0, 0.0).unwrap();
            let joined: Vec<f32> = segs.iter().flat_map(|s| s.samples.iter().copied()).collect();
            prop_assert_eq!(segs.len(), n / win);
            prop_assert_eq!(&joined[..], &w.samples[..joined.len()]);
        }

        #[test]
        fn extension_hits_target_length(len in 1usize..200, extra in 0usize..200) {
            let xs: Vec<f32> = (0..len).map(|i| i as f32).collect();
            let extra = extra.min(len);
            prop_assert_eq!(extend_by_prefix(&xs, len + extra).unwrap().len(), len + extra);
        }

        #[test]
        fn resample_round_trip_on_piecewise_linear(n in 4usize..200, slope in -3.0f32..3.0) {
            // A linear ramp is reproduced exactly at the knots by linear interpolation.
            let w = Waveform::new("p", 40.0, 0, (0..n).map(|i| slope * i as f32).collect()).unwrap();
            let up = resample(&w, 120.0).unwrap();
            let back = resample(&up, 40.0).unwrap();
            prop_assert!((back.samples.len() as i64 - n as i64).abs() <= 1);
            for (a, b) in back.samples.iter().zip(&w.samples) {
                prop_assert!((a - b).abs() <= 1e-4 * (1.0 + b.abs()));
            }
        }
    }
}
