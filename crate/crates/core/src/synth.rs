//! Seeded synthetic PPG: pulse trains with a known rhythm, quality
//! corruption with ground-truth flags, and quality-conditioned label flips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassLabel, Dataset, LabeledSegment, Provenance};
use crate::error::{Error, Result};
use crate::signal::{minmax_normalize, window_len, Quality, QualityFlag, Segment, Waveform};

const SYSTOLIC_WIDTH_S: f64 = 0.09;
const DICROTIC_WIDTH_S: f64 = 0.12;
const DICROTIC_DELAY_S: f64 = 0.28;
const DICROTIC_AMPLITUDE: f64 = 0.35;
const NSR_RR_RANGE: (f64, f64) = (0.4, 1.4);
const PREMATURE_RR_FACTOR: f64 = 0.6;
const PREMATURE_AMPLITUDE: f64 = 0.6;
const COMPENSATORY_RR_FACTOR: f64 = 1.4;

/// Per-seed RNG for one independent unit of work (a patient, a draw).
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhythmSpec {
    pub class: ClassLabel,
    pub mean_rr_s: f64,
    /// Standard deviation of RR for NSR/PVC; half-width of the uniform RR
    /// range for AF.
    pub rr_jitter: f64,
    /// Beats between ectopics (PVC only).
    pub pvc_period: usize,
}

impl RhythmSpec {
    pub fn nsr(mean_rr_s: f64) -> Self {
        Self {
            class: ClassLabel::Nsr,
            mean_rr_s,
            rr_jitter: 0.04,
            pvc_period: 0,
        }
    }

    /// Default jitter of 0.4 s around 0.85 s gives RR ~ Uniform(0.45, 1.25).
    pub fn af(mean_rr_s: f64) -> Self {
        Self {
            class: ClassLabel::Af,
            mean_rr_s,
            rr_jitter: 0.40,
            pvc_period: 0,
        }
    }

    pub fn pvc(mean_rr_s: f64, pvc_period: usize) -> Self {
        Self {
            class: ClassLabel::Pvc,
            mean_rr_s,
            rr_jitter: 0.04,
            pvc_period,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.3..=2.0).contains(&self.mean_rr_s) {
            return Err(Error::InvalidArgument(format!(
                "mean_rr_s {} outside [0.3, 2.0]",
                self.mean_rr_s
            )));
        }
        if !(self.rr_jitter >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "rr_jitter {} is negative",
                self.rr_jitter
            )));
        }
        if self.class == ClassLabel::Pvc && self.pvc_period < 2 {
            return Err(Error::InvalidArgument("pvc_period must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Beat {
    pub time_s: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeatTrain {
    pub waveform: Waveform,
    /// Every generated beat, including ones that start before t = 0.
    pub beats: Vec<Beat>,
}

impl BeatTrain {
    /// Beats whose onset falls inside the recording.
    pub fn beats_in_window(&self) -> impl Iterator<Item = &Beat> {
        let end = self.waveform.duration_s();
        self.beats.iter().filter(move |b| b.time_s >= 0.0 && b.time_s < end)
    }

    pub fn rr_intervals(&self) -> Vec<f64> {
        self.beats.windows(2).map(|w| w[1].time_s - w[0].time_s).collect()
    }
}

fn gaussian(t: f64, width: f64) -> f64 {
    (-0.5 * (t / width).powi(2)).exp()
}

/// Two-Gaussian pulse train (systolic peak plus dicrotic bump) with the RR
/// pattern of the requested rhythm.
pub fn gen_beat_train(spec: &RhythmSpec, duration_s: f64, fs_hz: f64, seed: u64) -> Result<BeatTrain> {
    spec.validate()?;
    if !(duration_s > 0.0 && fs_hz > 0.0) {
        return Err(Error::InvalidArgument(
            "duration and sampling rate must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, spec.rr_jitter).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let base_rr = |rng: &mut ChaCha8Rng| -> f64 {
        match spec.class {
            ClassLabel::Af => {
                let lo = (spec.mean_rr_s - spec.rr_jitter).max(0.25);
                let hi = spec.mean_rr_s + spec.rr_jitter;
                if hi > lo {
                    rng.gen_range(lo..hi)
                } else {
                    lo
                }
            }
            ClassLabel::Nsr | ClassLabel::Pvc => {
                (spec.mean_rr_s + jitter.sample(rng)).clamp(NSR_RR_RANGE.0, NSR_RR_RANGE.1)
            }
        }
    };

    let mut beats = Vec::new();
    let mut t = -rng.gen_range(0.0..spec.mean_rr_s);
    let mut amplitude = 1.0;
    let mut pending_pause = false;
    let mut interval = 0usize;
    while t < duration_s + 1.0 {
        beats.push(Beat { time_s: t, amplitude });
        let mut rr = base_rr(&mut rng);
        amplitude = 1.0;
        if spec.class == ClassLabel::Pvc {
            if pending_pause {
                rr *= COMPENSATORY_RR_FACTOR;
                pending_pause = false;
            } else if (interval + 1).is_multiple_of(spec.pvc_period) {
                rr *= PREMATURE_RR_FACTOR;
                amplitude = PREMATURE_AMPLITUDE;
                pending_pause = true;
            }
        }
        interval += 1;
        t += rr;
    }

    let n = window_len(duration_s, fs_hz);
    let mut samples = vec![0.0f64; n];
    for b in &beats {
        let first = (((b.time_s - 4.0 * SYSTOLIC_WIDTH_S) * fs_hz).floor().max(0.0)) as usize;
        let last = (((b.time_s + DICROTIC_DELAY_S + 4.0 * DICROTIC_WIDTH_S) * fs_hz)
            .ceil()
            .max(0.0) as usize)
            .min(n);
        for (i, s) in samples.iter_mut().enumerate().take(last).skip(first) {
            let dt = i as f64 / fs_hz - b.time_s;
            *s += b.amplitude
                * (gaussian(dt, SYSTOLIC_WIDTH_S)
                    + DICROTIC_AMPLITUDE * gaussian(dt - DICROTIC_DELAY_S, DICROTIC_WIDTH_S));
        }
    }
    let waveform = Waveform::new("synthetic", fs_hz, 0, samples.into_iter().map(|v| v as f32).collect())?;
    Ok(BeatTrain { waveform, beats })
}

/// Intensity of one corruption regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionLevel {
    /// Baseline-wander sinusoid amplitude.
    pub wander_amp: f64,
    /// Additive Gaussian noise standard deviation.
    pub noise_sigma: f64,
    /// Fraction of samples overwritten by artifact bursts.
    pub burst_fraction: f64,
    /// Bursts are random walks reflected into [-burst_amp, burst_amp].
    pub burst_amp: f64,
    pub burst_step: f64,
}

impl CorruptionLevel {
    pub const NONE: CorruptionLevel = CorruptionLevel {
        wander_amp: 0.0,
        noise_sigma: 0.0,
        burst_fraction: 0.0,
        burst_amp: 0.0,
        burst_step: 0.0,
    };

    pub fn light() -> Self {
        Self {
            wander_amp: 0.05,
            noise_sigma: 0.03,
            ..Self::NONE
        }
    }

    pub fn heavy() -> Self {
        Self {
            wander_amp: 0.4,
            noise_sigma: 0.3,
            burst_fraction: 0.45,
            burst_amp: 3.0,
            burst_step: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub p_flip_good: f64,
    pub p_flip_bad: f64,
    pub p_bad_quality: f64,
    pub light: CorruptionLevel,
    pub heavy: CorruptionLevel,
}

impl NoiseSpec {
    /// No corruption and no label flips.
    pub fn none() -> Self {
        Self {
            p_flip_good: 0.0,
            p_flip_bad: 0.0,
            p_bad_quality: 0.0,
            light: CorruptionLevel::NONE,
            heavy: CorruptionLevel::heavy(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_flip_good", self.p_flip_good),
            ("p_flip_bad", self.p_flip_bad),
            ("p_bad_quality", self.p_bad_quality),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} = {p} is not a probability")));
            }
        }
        if self.p_flip_bad < self.p_flip_good {
            return Err(Error::InvalidArgument(format!(
                "p_flip_bad ({}) must be at least p_flip_good ({})",
                self.p_flip_bad, self.p_flip_good
            )));
        }
        for (name, level) in [("light", self.light), ("heavy", self.heavy)] {
            let values = [level.wander_amp, level.noise_sigma, level.burst_amp, level.burst_step];
            if values.iter().any(|v| !(*v >= 0.0)) || !(0.0..=1.0).contains(&level.burst_fraction) {
                return Err(Error::InvalidArgument(format!(
                    "{name} corruption levels must be non-negative"
                )));
            }
        }
        if self.heavy.burst_fraction < 0.3 {
            return Err(Error::InvalidArgument(format!(
                "heavy burst_fraction {} must be at least 0.3",
                self.heavy.burst_fraction
            )));
        }
        Ok(())
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            p_flip_good: 0.15,
            p_flip_bad: 0.45,
            p_bad_quality: 0.4,
            light: CorruptionLevel::light(),
            heavy: CorruptionLevel::heavy(),
        }
    }
}

fn apply_level(samples: &mut [f32], fs_hz: f64, level: &CorruptionLevel, rng: &mut ChaCha8Rng) {
    let n = samples.len();
    if level.wander_amp > 0.0 {
        let freq = rng.gen_range(0.1..0.4);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for (i, s) in samples.iter_mut().enumerate() {
            let t = i as f64 / fs_hz;
            *s += (level.wander_amp * (std::f64::consts::TAU * freq * t + phase).sin()) as f32;
        }
    }
    if level.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, level.noise_sigma).expect("validated sigma");
        for s in samples.iter_mut() {
            *s += normal.sample(rng) as f32;
        }
    }
    if level.burst_fraction > 0.0 && n > 0 {
        let target = (level.burst_fraction * n as f64).ceil() as usize;
        let mut replaced = vec![false; n];
        let mut count = 0usize;
        let step = Normal::new(0.0, level.burst_step.max(1e-9)).expect("validated step");
        let bound = level.burst_amp.max(1e-9);
        while count < target {
            let len = ((rng.gen_range(1.0..4.0) * fs_hz).round() as usize).clamp(1, n);
            let start = rng.gen_range(0..=n - len);
            let mut v = f64::from(samples[start]).clamp(-bound, bound);
            for i in start..start + len {
                v += step.sample(rng);
                // Reflect back into the band.
                while v.abs() > bound {
                    v = v.signum() * 2.0 * bound - v;
                }
                samples[i] = v as f32;
                if !replaced[i] {
                    replaced[i] = true;
                    count += 1;
                }
            }
        }
    }
}

/// Corrupts a waveform. With probability `p_bad_quality` the heavy regime
/// is applied and the result is flagged BAD, otherwise the light regime
/// and GOOD.
pub fn corrupt(w: &Waveform, noise: &NoiseSpec, seed: u64) -> Result<(Waveform, QualityFlag)> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bad = rng.gen::<f64>() < noise.p_bad_quality;
    let mut out = w.clone();
    let level = if bad { &noise.heavy } else { &noise.light };
    apply_level(&mut out.samples, w.fs_hz, level, &mut rng);
    let quality = if bad { Quality::Bad } else { Quality::Good };
    Ok((out, QualityFlag::ground_truth(quality)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassMix {
    pub af: f64,
    pub nsr: f64,
    pub pvc: f64,
}

impl Default for ClassMix {
    fn default() -> Self {
        Self {
            af: 0.5,
            nsr: 0.3,
            pvc: 0.2,
        }
    }
}

impl ClassMix {
    fn validate(&self) -> Result<()> {
        let parts = [self.af, self.nsr, self.pvc];
        if parts.iter().any(|p| !(*p >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "class mix {parts:?} must be non-negative and sum to 1"
            )));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> ClassLabel {
        let u: f64 = rng.gen();
        if u < self.af {
            ClassLabel::Af
        } else if u < self.af + self.nsr {
            ClassLabel::Nsr
        } else {
            ClassLabel::Pvc
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_patients: usize,
    pub segs_per_patient: usize,
    #[serde(default)]
    pub class_mix: ClassMix,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default = "default_fs")]
    pub fs_hz: f64,
    #[serde(default = "default_window")]
    pub window_s: f64,
    /// Draw the rhythm per segment instead of per patient.
    #[serde(default)]
    pub mixed_patients: bool,
    /// Per-patient mean RR is drawn uniformly from this range.
    #[serde(default = "default_rr_range")]
    pub mean_rr_range: (f64, f64),
    #[serde(default = "default_prefix")]
    pub patient_prefix: String,
}

fn default_fs() -> f64 {
    40.0
}
fn default_window() -> f64 {
    30.0
}
fn default_rr_range() -> (f64, f64) {
    (0.85, 0.85)
}
fn default_prefix() -> String {
    "p".into()
}

impl CorpusSpec {
    pub fn new(n_patients: usize, segs_per_patient: usize) -> Self {
        Self {
            n_patients,
            segs_per_patient,
            class_mix: ClassMix::default(),
            noise: NoiseSpec::default(),
            fs_hz: default_fs(),
            window_s: default_window(),
            mixed_patients: false,
            mean_rr_range: default_rr_range(),
            patient_prefix: default_prefix(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 || self.segs_per_patient == 0 {
            return Err(Error::InvalidArgument(
                "n_patients and segs_per_patient must be positive".into(),
            ));
        }
        if !(self.fs_hz > 0.0) || window_len(self.window_s, self.fs_hz) < 2 {
            return Err(Error::InvalidArgument("window must hold at least 2 samples".into()));
        }
        let (lo, hi) = self.mean_rr_range;
        if !(0.3 <= lo && lo <= hi && hi <= 2.0) {
            return Err(Error::InvalidArgument(format!(
                "mean_rr_range ({lo}, {hi}) must lie in [0.3, 2.0]"
            )));
        }
        self.class_mix.validate()?;
        self.noise.validate()
    }
}

fn flip(label: ClassLabel, rng: &mut ChaCha8Rng) -> ClassLabel {
    match label {
        ClassLabel::Af => {
            if rng.gen::<bool>() {
                ClassLabel::Nsr
            } else {
                ClassLabel::Pvc
            }
        }
        ClassLabel::Nsr | ClassLabel::Pvc => ClassLabel::Af,
    }
}

fn gen_patient(spec: &CorpusSpec, index: usize, seed: u64) -> Result<Vec<LabeledSegment>> {
    let mut rng = stream_rng(seed, index as u64);
    let patient_id = format!("{}{:05}", spec.patient_prefix, index);
    let (lo, hi) = spec.mean_rr_range;
    let mean_rr = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let pvc_period = rng.gen_range(3..=6);
    let patient_class = spec.class_mix.draw(&mut rng);
    let mut out = Vec::with_capacity(spec.segs_per_patient);
    for k in 0..spec.segs_per_patient {
        let class = if spec.mixed_patients {
            spec.class_mix.draw(&mut rng)
        } else {
            patient_class
        };
        let rhythm = match class {
            ClassLabel::Af => RhythmSpec::af(mean_rr),
            ClassLabel::Nsr => RhythmSpec::nsr(mean_rr),
            ClassLabel::Pvc => RhythmSpec::pvc(mean_rr, pvc_period),
        };
        let train = gen_beat_train(&rhythm, spec.window_s, spec.fs_hz, rng.gen())?;
        let (noisy, quality) = corrupt(&train.waveform, &spec.noise, rng.gen())?;
        let p_flip = if quality.is_good() {
            spec.noise.p_flip_good
        } else {
            spec.noise.p_flip_bad
        };
        let label = if rng.gen::<f64>() < p_flip {
            flip(class, &mut rng)
        } else {
            class
        };
        out.push(LabeledSegment {
            segment: Segment {
                patient_id: patient_id.clone(),
                t_start_ms: (k as f64 * spec.window_s * 1000.0).round() as i64,
                fs_hz: spec.fs_hz,
                samples: minmax_normalize(&noisy.samples),
                normalized: true,
            },
            label,
            true_label: Some(class),
            quality,
            cluster_id: None,
            provenance: Provenance::Synth,
        });
    }
    Ok(out)
}

/// Generates a labeled corpus. Each patient draws from its own RNG stream,
/// so the result does not depend on how the work is scheduled.
pub fn gen_labeled_corpus(spec: &CorpusSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let per_patient: Vec<Vec<LabeledSegment>> = (0..spec.n_patients)
        .into_par_iter()
        .map(|i| gen_patient(spec, i, seed))
        .collect::<Result<_>>()?;
    let mut params = serde_json::to_value(spec)?;
    params["seed"] = serde_json::json!(seed);
    Ok(Dataset {
        params: Some(params),
        records: per_patient.into_iter().flatten().collect(),
    })
}
