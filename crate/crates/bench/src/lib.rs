//! Shared fixtures for the benchmarks.

use cmc_core::cluster::attach_clusters;
use cmc_core::dataset::Dataset;
use cmc_core::synth::{gen_labeled_corpus, CorpusSpec};

/// Synthetic corpus with round-robin cluster ids, ready for CMC training.
pub fn clustered_corpus(n_patients: usize, segs_per_patient: usize, clusters: usize, seed: u64) -> Dataset {
    let mut data = gen_labeled_corpus(&CorpusSpec::new(n_patients, segs_per_patient), seed).expect("valid corpus");
    let ids: Vec<usize> = (0..data.len()).map(|i| i % clusters).collect();
    attach_clusters(&mut data, &ids).expect("one id per record");
    data
}
