//! Weak labeling from bedside-monitor alarm logs.
//!
//! AF and PVC-family alarms each yield one window centered on the alarm
//! onset. A PVC alarm with any AF alarm of the same patient within
//! `pvc_exclusion_s` is dropped so no window carries two labels. Normal
//! sinus rhythm has no alarm of its own: a gap between consecutive alarms
//! wide enough to hold a window plus the guard yields one NSR window at the
//! gap midpoint.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::dataset::{ClassLabel, Dataset, LabeledSegment, Provenance};
use crate::error::{Error, Result};
use crate::signal::{estimate_quality, window_len, Segment, Waveform, DEFAULT_SQI_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AlarmType {
    Af,
    Vt,
    Pvc,
    Ront,
    Couplet,
    Bigeminy,
    Trigeminy,
    PvcGeX,
    Vfib,
    Other,
}

impl AlarmType {
    /// Ventricular-ectopy alarms that label a window as PVC.
    pub fn is_pvc_family(self) -> bool {
        matches!(
            self,
            AlarmType::Vt
                | AlarmType::Pvc
                | AlarmType::Ront
                | AlarmType::Couplet
                | AlarmType::Bigeminy
                | AlarmType::Trigeminy
                | AlarmType::PvcGeX
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AlarmType::Af => "AF",
            AlarmType::Vt => "VT",
            AlarmType::Pvc => "PVC",
            AlarmType::Ront => "RONT",
            AlarmType::Couplet => "COUPLET",
            AlarmType::Bigeminy => "BIGEMINY",
            AlarmType::Trigeminy => "TRIGEMINY",
            AlarmType::PvcGeX => "PVC_GE_X",
            AlarmType::Vfib => "VFIB",
            AlarmType::Other => "OTHER",
        }
    }
}

impl fmt::Display for AlarmType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlarmType {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Ok(match s.trim().to_ascii_uppercase().as_str() {
            "AF" => AlarmType::Af,
            "VT" => AlarmType::Vt,
            "PVC" => AlarmType::Pvc,
            "RONT" => AlarmType::Ront,
            "COUPLET" => AlarmType::Couplet,
            "BIGEMINY" => AlarmType::Bigeminy,
            "TRIGEMINY" => AlarmType::Trigeminy,
            "PVC_GE_X" => AlarmType::PvcGeX,
            "VFIB" => AlarmType::Vfib,
            "OTHER" => AlarmType::Other,
            _ => return Err(()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlarmEvent {
    pub patient_id: String,
    pub onset_ms: i64,
    pub alarm_type: AlarmType,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlarmLog {
    pub events: Vec<AlarmEvent>,
    /// Rows whose alarm type was not recognized and became `OTHER`.
    pub unknown_types: usize,
}

/// Parses a `patient_id,onset_ms,alarm_type` CSV. Events come back sorted
/// by patient then onset.
pub fn parse_alarm_log(bytes: &[u8]) -> Result<AlarmLog> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let expected = ["patient_id", "onset_ms", "alarm_type"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        // An empty file has no header at all; treat it as an empty log.
        if headers.is_empty() {
            return Ok(AlarmLog::default());
        }
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "expected header `patient_id,onset_ms,alarm_type`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut log = AlarmLog::default();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() != 3 {
            return Err(Error::Parse {
                line,
                message: format!("expected 3 fields, found {}", row.len()),
            });
        }
        let patient_id = row[0].to_string();
        if patient_id.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty patient_id".into(),
            });
        }
        let onset_ms: i64 = row[1].parse().map_err(|_| Error::Parse {
            line,
            message: format!("bad onset_ms `{}`", &row[1]),
        })?;
        let alarm_type = row[2].parse().unwrap_or_else(|()| {
            log.unknown_types += 1;
            AlarmType::Other
        });
        log.events.push(AlarmEvent {
            patient_id,
            onset_ms,
            alarm_type,
        });
    }
    if log.unknown_types > 0 {
        log::warn!(
            "{} alarm rows had unrecognized types and were mapped to OTHER",
            log.unknown_types
        );
    }
    log.events
        .sort_by(|a, b| (&a.patient_id, a.onset_ms).cmp(&(&b.patient_id, b.onset_ms)));
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelingConfig {
    pub window_s: f64,
    pub half_window_s: f64,
    pub pvc_exclusion_s: f64,
    pub nsr_min_gap_s: f64,
    pub sqi_threshold: f64,
    /// Drop an alarm that follows a same-type alarm of the same patient
    /// within this many seconds. Off by default.
    pub dedup_window_s: Option<f64>,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self {
            window_s: 30.0,
            half_window_s: 15.0,
            pvc_exclusion_s: 30.0,
            nsr_min_gap_s: 30.0,
            sqi_threshold: DEFAULT_SQI_THRESHOLD,
            dedup_window_s: None,
        }
    }
}

impl LabelingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("window_s", self.window_s),
            ("half_window_s", self.half_window_s),
            ("pvc_exclusion_s", self.pvc_exclusion_s),
            ("nsr_min_gap_s", self.nsr_min_gap_s),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if (self.window_s - 2.0 * self.half_window_s).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "window_s ({}) must equal twice half_window_s ({})",
                self.window_s, self.half_window_s
            )));
        }
        if let Some(d) = self.dedup_window_s {
            if !(d >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "dedup_window_s must be non-negative, got {d}"
                )));
            }
        }
        Ok(())
    }
}

/// Waveforms grouped by patient.
#[derive(Debug, Clone, Default)]
pub struct WaveformIndex {
    by_patient: BTreeMap<String, Vec<Waveform>>,
}

impl WaveformIndex {
    pub fn new(waveforms: impl IntoIterator<Item = Waveform>) -> Self {
        let mut by_patient: BTreeMap<String, Vec<Waveform>> = BTreeMap::new();
        for w in waveforms {
            by_patient.entry(w.patient_id.clone()).or_default().push(w);
        }
        for list in by_patient.values_mut() {
            list.sort_by_key(|w| w.start_time_ms);
        }
        Self { by_patient }
    }

    pub fn patient(&self, id: &str) -> &[Waveform] {
        self.by_patient.get(id).map_or(&[], Vec::as_slice)
    }

    /// Cuts `[start_ms, start_ms + window_s)` from whichever waveform covers it entirely.
    fn cut(&self, patient: &str, start_ms: f64, window_s: f64) -> Option<Segment> {
        self.patient(patient).iter().find_map(|w| {
            let len = window_len(window_s, w.fs_hz);
            let offset = (start_ms - w.start_time_ms as f64) * w.fs_hz / 1000.0;
            if offset < -1e-6 {
                return None;
            }
            let i0 = offset.round() as usize;
            if i0 + len > w.samples.len() {
                return None;
            }
            Some(Segment {
                patient_id: patient.to_string(),
                t_start_ms: w.start_time_ms + (i0 as f64 * 1000.0 / w.fs_hz).round() as i64,
                fs_hz: w.fs_hz,
                samples: w.samples[i0..i0 + len].to_vec(),
                normalized: false,
            })
        })
    }

    fn span(&self, patient: &str) -> Option<(f64, f64)> {
        let list = self.patient(patient);
        let lo = list.iter().map(|w| w.start_time_ms as f64).reduce(f64::min)?;
        let hi = list.iter().map(Waveform::end_time_ms).reduce(f64::max)?;
        Some((lo, hi))
    }
}

/// Segments from one extraction pass plus what was skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Extraction {
    pub segments: Vec<LabeledSegment>,
    /// Windows not fully covered by a waveform.
    pub out_of_bounds: usize,
    /// PVC-family alarms dropped for a nearby AF alarm.
    pub excluded: usize,
    /// Alarms dropped by the dedup window.
    pub deduplicated: usize,
}

fn labeled(seg: Segment, label: ClassLabel, cfg: &LabelingConfig) -> LabeledSegment {
    let segment = seg.normalize();
    let quality = estimate_quality(&segment, cfg.sqi_threshold);
    LabeledSegment {
        segment,
        label,
        true_label: None,
        quality,
        cluster_id: None,
        provenance: Provenance::Alarm,
    }
}

fn sort_segments(segs: &mut [LabeledSegment]) {
    segs.sort_by(|a, b| {
        (&a.segment.patient_id, a.segment.t_start_ms).cmp(&(&b.segment.patient_id, b.segment.t_start_ms))
    });
}

/// Applies the optional dedup window to events of one alarm class.
fn dedup(events: Vec<&AlarmEvent>, window_s: Option<f64>) -> (Vec<&AlarmEvent>, usize) {
    let Some(window_s) = window_s else {
        return (events, 0);
    };
    let window_ms = window_s * 1000.0;
    let mut kept: Vec<&AlarmEvent> = Vec::with_capacity(events.len());
    let mut last: BTreeMap<(&str, AlarmType), i64> = BTreeMap::new();
    let mut dropped = 0;
    for e in events {
        let key = (e.patient_id.as_str(), e.alarm_type);
        if let Some(&prev) = last.get(&key) {
            if ((e.onset_ms - prev) as f64) <= window_ms {
                dropped += 1;
                continue;
            }
        }
        last.insert(key, e.onset_ms);
        kept.push(e);
    }
    (kept, dropped)
}

fn extract_centered<'a>(
    events: impl Iterator<Item = &'a AlarmEvent>,
    waveforms: &WaveformIndex,
    cfg: &LabelingConfig,
    label: ClassLabel,
    out: &mut Extraction,
) {
    for e in events {
        let start = e.onset_ms as f64 - cfg.half_window_s * 1000.0;
        match waveforms.cut(&e.patient_id, start, cfg.window_s) {
            Some(seg) => out.segments.push(labeled(seg, label, cfg)),
            None => out.out_of_bounds += 1,
        }
    }
}

/// One AF window per AF alarm, centered on the onset.
pub fn extract_af_segments(events: &[AlarmEvent], waveforms: &WaveformIndex, cfg: &LabelingConfig) -> Extraction {
    let af: Vec<&AlarmEvent> = events.iter().filter(|e| e.alarm_type == AlarmType::Af).collect();
    let (af, deduplicated) = dedup(af, cfg.dedup_window_s);
    let mut out = Extraction {
        deduplicated,
        ..Extraction::default()
    };
    extract_centered(af.into_iter(), waveforms, cfg, ClassLabel::Af, &mut out);
    sort_segments(&mut out.segments);
    out
}

/// One PVC window per PVC-family alarm that has no AF alarm within the
/// exclusion radius.
pub fn extract_pvc_segments(events: &[AlarmEvent], waveforms: &WaveformIndex, cfg: &LabelingConfig) -> Extraction {
    let mut af_onsets: BTreeMap<&str, Vec<i64>> = BTreeMap::new();
    for e in events.iter().filter(|e| e.alarm_type == AlarmType::Af) {
        af_onsets.entry(&e.patient_id).or_default().push(e.onset_ms);
    }
    let radius_ms = cfg.pvc_exclusion_s * 1000.0;
    let mut excluded = 0;
    let pvc: Vec<&AlarmEvent> = events
        .iter()
        .filter(|e| e.alarm_type.is_pvc_family())
        .filter(|e| {
            let near_af = af_onsets
                .get(e.patient_id.as_str())
                .is_some_and(|onsets| onsets.iter().any(|&t| ((t - e.onset_ms).abs() as f64) <= radius_ms));
            if near_af {
                excluded += 1;
            }
            !near_af
        })
        .collect();
    let (pvc, deduplicated) = dedup(pvc, cfg.dedup_window_s);
    let mut out = Extraction {
        excluded,
        deduplicated,
        ..Extraction::default()
    };
    extract_centered(pvc.into_iter(), waveforms, cfg, ClassLabel::Pvc, &mut out);
    sort_segments(&mut out.segments);
    out
}

/// One NSR window at the midpoint of every alarm-free gap longer than
/// `nsr_min_gap_s + window_s`. Gaps run onset to onset, plus the stretches
/// between the recording edges and the first and last alarm. Patients with
/// no alarms at all yield nothing.
pub fn extract_nsr_segments(events: &[AlarmEvent], waveforms: &WaveformIndex, cfg: &LabelingConfig) -> Extraction {
    let mut onsets: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for e in events {
        onsets.entry(&e.patient_id).or_default().push(e.onset_ms as f64);
    }
    let required_ms = (cfg.nsr_min_gap_s + cfg.window_s) * 1000.0;
    let half_ms = cfg.half_window_s * 1000.0;
    let mut out = Extraction::default();
    for (patient, mut times) in onsets {
        let Some((lo, hi)) = waveforms.span(patient) else {
            continue;
        };
        times.sort_by(f64::total_cmp);
        let mut bounds = Vec::with_capacity(times.len() + 2);
        if lo < times[0] {
            bounds.push(lo);
        }
        bounds.extend_from_slice(&times);
        if hi > times[times.len() - 1] {
            bounds.push(hi);
        }
        for pair in bounds.windows(2) {
            let gap = pair[1] - pair[0];
            if gap <= required_ms {
                continue;
            }
            let center = 0.5 * (pair[0] + pair[1]);
            match waveforms.cut(patient, center - half_ms, cfg.window_s) {
                Some(seg) => out.segments.push(labeled(seg, ClassLabel::Nsr, cfg)),
                None => out.out_of_bounds += 1,
            }
        }
    }
    sort_segments(&mut out.segments);
    out
}

/// Requested AF : non-AF proportion after balancing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceRatio {
    pub af: u32,
    pub non_af: u32,
}

impl Default for BalanceRatio {
    fn default() -> Self {
        Self { af: 1, non_af: 1 }
    }
}

impl FromStr for BalanceRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("balance ratio must look like `1:1`, got `{s}`"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let af: u32 = a.trim().parse().map_err(|_| bad())?;
        let non_af: u32 = b.trim().parse().map_err(|_| bad())?;
        if af == 0 || non_af == 0 {
            return Err(bad());
        }
        Ok(Self { af, non_af })
    }
}

fn seeded_subset(items: Vec<LabeledSegment>, keep: usize, rng: &mut ChaCha8Rng) -> Vec<LabeledSegment> {
    if keep >= items.len() {
        return items;
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(rng);
    let mut chosen = idx[..keep].to_vec();
    chosen.sort_unstable();
    let mut slots: Vec<Option<LabeledSegment>> = items.into_iter().map(Some).collect();
    chosen.into_iter().filter_map(|i| slots[i].take()).collect()
}

/// Concatenates the three classes, optionally downsampling the majority
/// side to the requested AF : non-AF ratio.
pub fn assemble_dataset(
    af: Vec<LabeledSegment>,
    pvc: Vec<LabeledSegment>,
    nsr: Vec<LabeledSegment>,
    balance: Option<BalanceRatio>,
    seed: u64,
) -> Result<Dataset> {
    let mut non_af: Vec<LabeledSegment> = pvc.into_iter().chain(nsr).collect();
    sort_segments(&mut non_af);
    let mut af = af;
    if let Some(ratio) = balance {
        if af.is_empty() {
            return Err(Error::EmptyClass("AF".into()));
        }
        if non_af.is_empty() {
            return Err(Error::EmptyClass("non-AF".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let want_non_af = (af.len() as f64 * ratio.non_af as f64 / ratio.af as f64).round() as usize;
        if want_non_af <= non_af.len() {
            non_af = seeded_subset(non_af, want_non_af, &mut rng);
        } else {
            let want_af = (non_af.len() as f64 * ratio.af as f64 / ratio.non_af as f64).round() as usize;
            af = seeded_subset(af, want_af, &mut rng);
        }
        if af.is_empty() {
            return Err(Error::EmptyClass("AF".into()));
        }
        if non_af.is_empty() {
            return Err(Error::EmptyClass("non-AF".into()));
        }
    }
    let mut records: Vec<LabeledSegment> = af.into_iter().chain(non_af).collect();
    sort_segments(&mut records);
    Ok(Dataset::new(records))
}

/// Full labeling pass over one alarm log.
#[derive(Debug, Clone, Default)]
pub struct LabelingOutput {
    pub af: Extraction,
    pub pvc: Extraction,
    pub nsr: Extraction,
}

pub fn label_recordings(
    events: &[AlarmEvent],
    waveforms: &WaveformIndex,
    cfg: &LabelingConfig,
) -> Result<LabelingOutput> {
    cfg.validate()?;
    Ok(LabelingOutput {
        af: extract_af_segments(events, waveforms, cfg),
        pvc: extract_pvc_segments(events, waveforms, cfg),
        nsr: extract_nsr_segments(events, waveforms, cfg),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const FS: f64 = 10.0;

    fn ev(p: &str, t_s: f64, kind: AlarmType) -> AlarmEvent {
        AlarmEvent {
            patient_id: p.into(),
            onset_ms: (t_s * 1000.0) as i64,
            alarm_type: kind,
        }
    }

    fn recording(p: &str, from_s: f64, to_s: f64) -> Waveform {
        let n = ((to_s - from_s) * FS) as usize;
        let samples = (0..n).map(|i| ((i as f64) * 0.7).sin() as f32).collect();
        Waveform::new(p, FS, (from_s * 1000.0) as i64, samples).unwrap()
    }

    fn spans(ex: &Extraction) -> Vec<(i64, i64)> {
        ex.segments
            .iter()
            .map(|s| {
                let start = s.segment.t_start_ms;
                let len_ms = (s.segment.samples.len() as f64 * 1000.0 / s.segment.fs_hz) as i64;
                (start / 1000, (start + len_ms) / 1000)
            })
            .collect()
    }

    #[test]
    fn parses_rows_and_sorts() {
        let log = parse_alarm_log(b"patient_id,onset_ms,alarm_type\np2,5,PVC\np1,100000,AF\np1,5000,VT\n").unwrap();
        assert_eq!(log.unknown_types, 0);
        assert_eq!(
            log.events,
            vec![
                ev("p1", 5.0, AlarmType::Vt),
                ev("p1", 100.0, AlarmType::Af),
                ev("p2", 0.005, AlarmType::Pvc)
            ]
        );
        assert!(log.events[0].alarm_type.is_pvc_family());
    }

    #[test]
    fn unknown_alarm_becomes_other() {
        let log = parse_alarm_log(b"patient_id,onset_ms,alarm_type\np1,5000,XYZ\n").unwrap();
        assert_eq!(log.unknown_types, 1);
        assert_eq!(log.events[0].alarm_type, AlarmType::Other);
    }

    #[test]
    fn malformed_row_reports_line() {
        let err = parse_alarm_log(b"patient_id,onset_ms,alarm_type\np1,5000,AF\np1,notanumber,AF\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
        let err = parse_alarm_log(b"patient_id,onset_ms,alarm_type\np1,5000\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err:?}");
        assert!(parse_alarm_log(b"who,when,what\n").is_err());
        assert!(parse_alarm_log(b"").unwrap().events.is_empty());
    }

    #[test]
    fn af_window_is_centered() {
        let idx = WaveformIndex::new([recording("p1", 0.0, 400.0)]);
        let cfg = LabelingConfig::default();
        let out = extract_af_segments(&[ev("p1", 100.0, AlarmType::Af)], &idx, &cfg);
        assert_eq!(spans(&out), vec![(85, 115)]);
        let seg = &out.segments[0];
        assert_eq!(seg.y(), 1);
        assert!(seg.segment.normalized);
        assert_eq!(seg.segment.samples.len(), 300);
    }

    #[test]
    fn af_window_underflow_is_skipped() {
        let idx = WaveformIndex::new([recording("p1", 0.0, 400.0)]);
        let out = extract_af_segments(&[ev("p1", 10.0, AlarmType::Af)], &idx, &LabelingConfig::default());
        assert!(out.segments.is_empty());
        assert_eq!(out.out_of_bounds, 1);
    }

    #[test]
    fn rapid_af_alarms_overlap_unless_deduplicated() {
        let idx = WaveformIndex::new([recording("p1", 0.0, 400.0)]);
        let events = [ev("p1", 100.0, AlarmType::Af), ev("p1", 105.0, AlarmType::Af)];
        let cfg = LabelingConfig::default();
        assert_eq!(
            spans(&extract_af_segments(&events, &idx, &cfg)),
            vec![(85, 115), (90, 120)]
        );
        let cfg = LabelingConfig {
            dedup_window_s: Some(10.0),
            ..cfg
        };
        let out = extract_af_segments(&events, &idx, &cfg);
        assert_eq!(spans(&out), vec![(85, 115)]);
        assert_eq!(out.deduplicated, 1);
    }

    #[test]
    fn pvc_exclusion_boundary() {
        let idx = WaveformIndex::new([recording("p1", 0.0, 400.0)]);
        let cfg = LabelingConfig::default();
        let near = [ev("p1", 200.0, AlarmType::Pvc), ev("p1", 215.0, AlarmType::Af)];
        let out = extract_pvc_segments(&near, &idx, &cfg);
        assert!(out.segments.is_empty());
        assert_eq!(out.excluded, 1);

        let far = [ev("p1", 200.0, AlarmType::Pvc), ev("p1", 231.0, AlarmType::Af)];
        assert_eq!(spans(&extract_pvc_segments(&far, &idx, &cfg)), vec![(185, 215)]);

        let alone = [ev("p1", 200.0, AlarmType::Couplet)];
        let out = extract_pvc_segments(&alone, &idx, &cfg);
        assert_eq!(out.segments[0].label, ClassLabel::Pvc);
    }

    #[test]
    fn af_of_another_patient_does_not_exclude() {
        let idx = WaveformIndex::new([recording("p1", 0.0, 400.0), recording("p2", 0.0, 400.0)]);
        let events = [ev("p1", 200.0, AlarmType::Pvc), ev("p2", 205.0, AlarmType::Af)];
        assert_eq!(
            extract_pvc_segments(&events, &idx, &LabelingConfig::default())
                .segments
                .len(),
            1
        );
    }

    #[test]
    fn nsr_at_gap_midpoint() {
        let idx = WaveformIndex::new([recording("p1", 0.0, 100.0)]);
        let cfg = LabelingConfig::default();
        let out = extract_nsr_segments(
            &[ev("p1", 0.0, AlarmType::Af), ev("p1", 100.0, AlarmType::Vfib)],
            &idx,
            &cfg,
        );
        assert_eq!(spans(&out), vec![(35, 65)]);
        assert_eq!(out.segments[0].y(), 0);
    }

    #[test]
    fn nsr_gap_rules() {
        let idx = WaveformIndex::new([recording("p1", 0.0, 55.0)]);
        let cfg = LabelingConfig::default();
        let short = [ev("p1", 0.0, AlarmType::Af), ev("p1", 25.0, AlarmType::Pvc)];
        assert!(extract_nsr_segments(&short, &idx, &cfg).segments.is_empty());
        let no_fit = [ev("p1", 0.0, AlarmType::Af), ev("p1", 55.0, AlarmType::Pvc)];
        assert!(extract_nsr_segments(&no_fit, &idx, &cfg).segments.is_empty());
    }

    #[test]
    fn nsr_uses_recording_edges() {
        let idx = WaveformIndex::new([recording("p1", 0.0, 300.0)]);
        let out = extract_nsr_segments(&[ev("p1", 150.0, AlarmType::Other)], &idx, &LabelingConfig::default());
        assert_eq!(spans(&out), vec![(60, 90), (210, 240)]);
    }

    #[test]
    fn patient_without_alarms_yields_no_nsr() {
        let idx = WaveformIndex::new([recording("p1", 0.0, 300.0)]);
        assert!(extract_nsr_segments(&[], &idx, &LabelingConfig::default())
            .segments
            .is_empty());
    }

    #[test]
    fn nsr_windows_contain_no_alarm_onsets() {
        let idx = WaveformIndex::new([recording("p1", 0.0, 1000.0)]);
        let events: Vec<AlarmEvent> = [3.0, 70.0, 95.0, 200.0, 420.0, 700.0, 761.0, 990.0]
            .iter()
            .map(|&t| ev("p1", t, AlarmType::Vt))
            .collect();
        let out = extract_nsr_segments(&events, &idx, &LabelingConfig::default());
        assert!(!out.segments.is_empty());
        for (a, b) in spans(&out) {
            for e in &events {
                let t = e.onset_ms / 1000;
                assert!(t < a || t >= b, "onset {t} inside [{a},{b})");
            }
        }
    }

    #[test]
    fn continuous_recording_keeps_the_af_that_excludes_a_pvc() {
        let idx = WaveformIndex::new([recording("p1", 60.0, 540.0)]);
        let events = [
            ev("p1", 100.0, AlarmType::Af),
            ev("p1", 200.0, AlarmType::Pvc),
            ev("p1", 215.0, AlarmType::Af),
        ];
        let out = label_recordings(&events, &idx, &LabelingConfig::default()).unwrap();
        assert_eq!(spans(&out.af), vec![(85, 115), (200, 230)]);
        assert!(out.pvc.segments.is_empty());
    }

    fn dummy(label: ClassLabel, pid: &str, t: i64) -> LabeledSegment {
        LabeledSegment {
            segment: Segment {
                patient_id: pid.into(),
                t_start_ms: t,
                fs_hz: FS,
                samples: vec![0.0; 4],
                normalized: true,
            },
            label,
            true_label: None,
            quality: crate::signal::QualityFlag::heuristic(crate::signal::Quality::Good),
            cluster_id: None,
            provenance: Provenance::Alarm,
        }
    }

    fn many(label: ClassLabel, n: usize) -> Vec<LabeledSegment> {
        (0..n)
            .map(|i| dummy(label, &format!("p{:03}", i % 17), i as i64))
            .collect()
    }

    #[test]
    fn balancing_matches_ratio() {
        let ds = assemble_dataset(
            many(ClassLabel::Af, 100),
            many(ClassLabel::Pvc, 70),
            many(ClassLabel::Nsr, 70),
            Some(BalanceRatio::default()),
            9,
        )
        .unwrap();
        let af = ds.records.iter().filter(|r| r.label.is_af()).count();
        assert_eq!(af, 100);
        assert_eq!(ds.len() - af, 100);

        let all = assemble_dataset(
            many(ClassLabel::Af, 100),
            many(ClassLabel::Pvc, 70),
            many(ClassLabel::Nsr, 70),
            None,
            9,
        )
        .unwrap();
        assert_eq!(all.len(), 240);
    }

    #[test]
    fn balancing_downsamples_af_when_it_is_the_majority() {
        let ds = assemble_dataset(
            many(ClassLabel::Af, 50),
            many(ClassLabel::Pvc, 10),
            vec![],
            Some("1:2".parse().unwrap()),
            1,
        )
        .unwrap();
        assert_eq!(ds.records.iter().filter(|r| r.label.is_af()).count(), 5);
    }

    #[test]
    fn balancing_without_af_fails() {
        let err = assemble_dataset(
            vec![],
            many(ClassLabel::Pvc, 5),
            many(ClassLabel::Nsr, 5),
            Some(BalanceRatio::default()),
            0,
        );
        assert!(matches!(err, Err(Error::EmptyClass(_))));
    }

    #[test]
    fn assembly_is_deterministic() {
        let make = || {
            assemble_dataset(
                many(ClassLabel::Af, 30),
                many(ClassLabel::Pvc, 40),
                many(ClassLabel::Nsr, 40),
                Some(BalanceRatio::default()),
                5,
            )
            .unwrap()
            .to_bytes()
            .unwrap()
        };
        assert_eq!(make(), make());
    }
}
