use cmc_core::dataset::ClassLabel;
use cmc_core::labeling::{
    assemble_dataset, extract_nsr_segments, extract_pvc_segments, label_recordings, parse_alarm_log, AlarmEvent,
    AlarmType, LabelingConfig, WaveformIndex,
};
use cmc_core::signal::Waveform;
use cmc_core::Error;
use proptest::prelude::*;

const FS: f64 = 10.0;

fn recording(p: &str, from_s: f64, to_s: f64) -> Waveform {
    let n = ((to_s - from_s) * FS).round() as usize;
    let samples = (0..n)
        .map(|i| ((i as f64) * 0.9).sin() as f32 + 0.1 * ((i as f64) * 0.13).cos() as f32)
        .collect();
    Waveform::new(p, FS, (from_s * 1000.0) as i64, samples).unwrap()
}

fn ev(p: &str, t_s: f64, kind: AlarmType) -> AlarmEvent {
    AlarmEvent {
        patient_id: p.into(),
        onset_ms: (t_s * 1000.0).round() as i64,
        alarm_type: kind,
    }
}

/// (label, start s, end s) of every record, in dataset order.
fn spans(records: &[cmc_core::dataset::LabeledSegment]) -> Vec<(ClassLabel, f64, f64)> {
    records
        .iter()
        .map(|r| {
            let start = r.segment.t_start_ms as f64 / 1000.0;
            (r.label, start, start + r.segment.samples.len() as f64 / r.segment.fs_hz)
        })
        .collect()
}

/// AF at 100 s; PVC at 200 s with AF at 215 s; isolated PVC at 300 s;
/// alarm-free gap 400-500 s. OTHER and VFIB alarms break the remaining
/// gaps, and the recording drops out between 205 s and 235 s.
fn scenario_log() -> &'static str {
    "patient_id,onset_ms,alarm_type\n\
     p1,100000,AF\n\
     p1,150000,OTHER\n\
     p1,200000,PVC\n\
     p1,215000,AF\n\
     p1,260000,OTHER\n\
     p1,300000,PVC\n\
     p1,350000,OTHER\n\
     p1,400000,VFIB\n\
     p1,500000,VFIB\n"
}

fn scenario_waveforms() -> WaveformIndex {
    WaveformIndex::new([recording("p1", 235.0, 540.0), recording("p1", 60.0, 205.0)])
}

#[test]
fn alarm_scenario_yields_the_expected_segments() {
    let log = parse_alarm_log(scenario_log().as_bytes()).unwrap();
    assert_eq!(log.unknown_types, 0);
    let out = label_recordings(&log.events, &scenario_waveforms(), &LabelingConfig::default()).unwrap();

    assert_eq!(spans(&out.af.segments), vec![(ClassLabel::Af, 85.0, 115.0)]);
    // The AF alarm at 215 s falls into the dropout.
    assert_eq!(out.af.out_of_bounds, 1);
    assert_eq!(spans(&out.pvc.segments), vec![(ClassLabel::Pvc, 285.0, 315.0)]);
    assert_eq!(out.pvc.excluded, 1);
    assert_eq!(out.pvc.out_of_bounds, 0);
    assert_eq!(spans(&out.nsr.segments), vec![(ClassLabel::Nsr, 435.0, 465.0)]);
    assert_eq!(out.nsr.out_of_bounds, 0);

    let data = assemble_dataset(out.af.segments, out.pvc.segments, out.nsr.segments, None, 0).unwrap();
    assert_eq!(
        spans(&data.records),
        vec![
            (ClassLabel::Af, 85.0, 115.0),
            (ClassLabel::Pvc, 285.0, 315.0),
            (ClassLabel::Nsr, 435.0, 465.0)
        ]
    );
    let y: Vec<u8> = data.records.iter().map(|r| r.y()).collect();
    assert_eq!(y, vec![1, 0, 0]);
    for r in &data.records {
        assert_eq!(r.segment.samples.len(), 300);
        assert_eq!(r.true_label, None);
        assert_eq!(r.patient_id(), "p1");
    }
}

#[test]
fn alarm_scenario_is_byte_deterministic() {
    let bytes = || {
        let log = parse_alarm_log(scenario_log().as_bytes()).unwrap();
        let out = label_recordings(&log.events, &scenario_waveforms(), &LabelingConfig::default()).unwrap();
        assemble_dataset(out.af.segments, out.pvc.segments, out.nsr.segments, None, 0)
            .unwrap()
            .to_bytes()
            .unwrap()
    };
    assert_eq!(bytes(), bytes());
}

#[test]
fn empty_log_gives_an_empty_dataset() {
    let log = parse_alarm_log(b"patient_id,onset_ms,alarm_type\n").unwrap();
    let out = label_recordings(&log.events, &scenario_waveforms(), &LabelingConfig::default()).unwrap();
    let data = assemble_dataset(out.af.segments, out.pvc.segments, out.nsr.segments, None, 0).unwrap();
    assert!(data.is_empty());
    let out = label_recordings(&[], &scenario_waveforms(), &LabelingConfig::default()).unwrap();
    let err = assemble_dataset(
        out.af.segments,
        out.pvc.segments,
        out.nsr.segments,
        Some(Default::default()),
        0,
    );
    assert!(matches!(err, Err(Error::EmptyClass(_))));
}

fn kinds() -> impl Strategy<Value = AlarmType> {
    prop_oneof![
        Just(AlarmType::Af),
        Just(AlarmType::Pvc),
        Just(AlarmType::Vt),
        Just(AlarmType::Couplet),
        Just(AlarmType::Vfib),
        Just(AlarmType::Other),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nsr_windows_hold_no_alarm_onset(events in prop::collection::vec((0u32..1200, kinds()), 1..14)) {
        let idx = WaveformIndex::new([recording("p1", 0.0, 1200.0)]);
        let events: Vec<AlarmEvent> = events.iter().map(|&(t, k)| ev("p1", t as f64, k)).collect();
        let out = extract_nsr_segments(&events, &idx, &LabelingConfig::default());
        for (_, a, b) in spans(&out.segments) {
            for e in &events {
                let t = e.onset_ms as f64 / 1000.0;
                prop_assert!(t < a || t >= b, "onset {} inside [{}, {})", t, a, b);
            }
        }
    }

    #[test]
    fn no_pvc_window_has_an_af_alarm_nearby(events in prop::collection::vec((20u32..580, kinds()), 1..14)) {
        let idx = WaveformIndex::new([recording("p1", 0.0, 600.0)]);
        let cfg = LabelingConfig::default();
        let events: Vec<AlarmEvent> = events.iter().map(|&(t, k)| ev("p1", t as f64, k)).collect();
        let out = extract_pvc_segments(&events, &idx, &cfg);
        let pvc_alarms = events.iter().filter(|e| e.alarm_type.is_pvc_family()).count();
        prop_assert_eq!(out.segments.len() + out.excluded + out.out_of_bounds, pvc_alarms);
        for (label, a, b) in spans(&out.segments) {
            prop_assert_eq!(label, ClassLabel::Pvc);
            let centre = 0.5 * (a + b);
            for e in events.iter().filter(|e| e.alarm_type == AlarmType::Af) {
                prop_assert!((e.onset_ms as f64 / 1000.0 - centre).abs() > cfg.pvc_exclusion_s);
            }
        }
    }
}
