//! Labeled segment records and the PPGD1 dataset container.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::signal::{QualityFlag, Segment};

const PPGD_MAGIC: &[u8; 5] = b"PPGD1";

/// Rhythm class of a segment. Only AF is positive for detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClassLabel {
    Af,
    Pvc,
    Nsr,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Af, ClassLabel::Pvc, ClassLabel::Nsr];

    /// Binary detection target: 1 for AF, 0 otherwise.
    pub fn binary(self) -> u8 {
        u8::from(self == ClassLabel::Af)
    }

    pub fn is_af(self) -> bool {
        self == ClassLabel::Af
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Af => "AF",
            ClassLabel::Pvc => "PVC",
            ClassLabel::Nsr => "NSR",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Provenance {
    Alarm,
    Synth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSegment {
    pub segment: Segment,
    /// Observed, possibly wrong, label.
    pub label: ClassLabel,
    /// Ground truth where known (synthetic data only).
    pub true_label: Option<ClassLabel>,
    pub quality: QualityFlag,
    pub cluster_id: Option<usize>,
    pub provenance: Provenance,
}

impl LabeledSegment {
    pub fn y(&self) -> u8 {
        self.label.binary()
    }

    pub fn patient_id(&self) -> &str {
        &self.segment.patient_id
    }

    /// Label to evaluate against: truth when available, else the observed label.
    pub fn eval_label(&self) -> ClassLabel {
        self.true_label.unwrap_or(self.label)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    /// Parameters that produced the dataset, echoed into the manifest.
    pub params: Option<serde_json::Value>,
    pub records: Vec<LabeledSegment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_records: usize,
    pub class_counts: BTreeMap<String, usize>,
    pub patient_counts: BTreeMap<String, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    params: Option<serde_json::Value>,
    summary: DatasetSummary,
    records: Vec<RecordEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordEntry {
    patient_id: String,
    label: ClassLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    true_label: Option<ClassLabel>,
    quality: QualityFlag,
    provenance: Provenance,
    offset: u64,
    n_samples: usize,
    fs_hz: f64,
    t_start_ms: i64,
    normalized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cluster_id: Option<usize>,
}

impl Dataset {
    pub fn new(records: Vec<LabeledSegment>) -> Self {
        Self { params: None, records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn summary(&self) -> DatasetSummary {
        let mut class_counts = BTreeMap::new();
        let mut patient_counts = BTreeMap::new();
        for r in &self.records {
            *class_counts.entry(r.label.as_str().to_string()).or_insert(0) += 1;
            *patient_counts.entry(r.patient_id().to_string()).or_insert(0) += 1;
        }
        DatasetSummary {
            n_records: self.records.len(),
            class_counts,
            patient_counts,
        }
    }

    /// Common segment length, or an error if records disagree.
    pub fn segment_len(&self) -> Result<usize> {
        let first = self
            .records
            .first()
            .ok_or_else(|| Error::InvalidArgument("dataset is empty".into()))?
            .segment
            .samples
            .len();
        if let Some(r) = self.records.iter().find(|r| r.segment.samples.len() != first) {
            return Err(Error::Shape(format!(
                "mixed segment lengths: {first} and {}",
                r.segment.samples.len()
            )));
        }
        Ok(first)
    }

    /// Distinct patient ids in sorted order.
    pub fn patients(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.records.iter().map(|r| r.patient_id().to_string()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Stacks the given records into a (batch, 1, len) network input.
    pub fn input_batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let len = match indices.first() {
            Some(&i) => self.records[i].segment.samples.len(),
            None => return Err(Error::InvalidArgument("empty batch".into())),
        };
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            let s = &self.records[i].segment.samples;
            if s.len() != len {
                return Err(Error::Shape(format!("mixed segment lengths: {len} and {}", s.len())));
            }
            data.extend_from_slice(s);
        }
        Tensor::from_vec(&[indices.len(), 1, len], data)
    }

    /// Binary detection targets from the observed labels.
    pub fn targets(&self, indices: &[usize]) -> Vec<u8> {
        indices.iter().map(|&i| self.records[i].y()).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            params: self.params.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut offset = 0u64;
        let records = self
            .records
            .iter()
            .map(|r| {
                let entry = RecordEntry {
                    patient_id: r.segment.patient_id.clone(),
                    label: r.label,
                    true_label: r.true_label,
                    quality: r.quality,
                    provenance: r.provenance,
                    offset,
                    n_samples: r.segment.samples.len(),
                    fs_hz: r.segment.fs_hz,
                    t_start_ms: r.segment.t_start_ms,
                    normalized: r.segment.normalized,
                    cluster_id: r.cluster_id,
                };
                offset += 4 * r.segment.samples.len() as u64;
                entry
            })
            .collect();
        let manifest = Manifest {
            format: "PPGD1".into(),
            params: self.params.clone(),
            summary: self.summary(),
            records,
        };
        container::write_header(w, PPGD_MAGIC, &manifest)?;
        for r in &self.records {
            container::write_f32s(w, &r.segment.samples)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let manifest: Manifest = container::read_header(r, PPGD_MAGIC)?;
        let mut blob = Vec::new();
        r.read_to_end(&mut blob)?;
        let mut records = Vec::with_capacity(manifest.records.len());
        for (i, e) in manifest.records.into_iter().enumerate() {
            let start = e.offset as usize;
            let end = start + 4 * e.n_samples;
            let bytes = blob
                .get(start..end)
                .ok_or_else(|| Error::Format(format!("record {i} points past the end of the payload")))?;
            let samples = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            records.push(LabeledSegment {
                segment: Segment {
                    patient_id: e.patient_id,
                    t_start_ms: e.t_start_ms,
                    fs_hz: e.fs_hz,
                    samples,
                    normalized: e.normalized,
                },
                label: e.label,
                true_label: e.true_label,
                quality: e.quality,
                cluster_id: e.cluster_id,
                provenance: e.provenance,
            });
        }
        Ok(Dataset {
            params: manifest.params,
            records,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::Quality;

    fn record(pid: &str, label: ClassLabel, samples: Vec<f32>) -> LabeledSegment {
        LabeledSegment {
            segment: Segment {
                patient_id: pid.into(),
                t_start_ms: 1000,
                fs_hz: 40.0,
                samples,
                normalized: true,
            },
            label,
            true_label: Some(ClassLabel::Nsr),
            quality: QualityFlag::ground_truth(Quality::Bad),
            cluster_id: Some(2),
            provenance: Provenance::Synth,
        }
    }

    #[test]
    fn binary_label_mapping() {
        assert_eq!(ClassLabel::Af.binary(), 1);
        assert_eq!(ClassLabel::Pvc.binary(), 0);
        assert_eq!(ClassLabel::Nsr.binary(), 0);
    }

    #[test]
    fn ppgd_round_trip_and_counts() {
        let mut ds = Dataset::new(vec![
            record("a", ClassLabel::Af, vec![0.0, 0.5, 1.0]),
            record("b", ClassLabel::Pvc, vec![1.0, 0.25, 0.0]),
            record("a", ClassLabel::Af, vec![0.1, 0.2, 0.3]),
        ]);
        ds.params = Some(serde_json::json!({"seed": 3}));
        let bytes = ds.to_bytes().unwrap();
        assert_eq!(&bytes[..5], b"PPGD1");
        let back = Dataset::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ds);
        let s = ds.summary();
        assert_eq!(s.class_counts["AF"], 2);
        assert_eq!(s.patient_counts["a"], 2);
        assert_eq!(ds.patients(), vec!["a".to_string(), "b".to_string()]);
        assert_eq!(ds.segment_len().unwrap(), 3);
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let ds = Dataset::new(vec![record("a", ClassLabel::Af, vec![0.0; 8])]);
        let bytes = ds.to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 4];
        assert!(matches!(Dataset::read_from(&mut &cut[..]), Err(Error::Format(_))));
    }
}
