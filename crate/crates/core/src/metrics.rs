//! Word error rate, intent accuracy, and the recovery ratio.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetManifest, IntentVocabulary};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("hypothesis ids do not match reference ids (first mismatch `{0}`)")]
    IdMismatch(String),
    #[error("no reference words")]
    EmptyReference,
    #[error("no evaluation records")]
    EmptyData,
}

/// Minimum number of substitutions, deletions and insertions turning
/// `reference` into `hypothesis`.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WerResult {
    pub errors: usize,
    pub reference_words: usize,
    pub wer: f64,
}

/// Corpus WER over `(id, transcript)` pairs. Both sides must cover the same
/// ids; order does not matter.
pub fn wer(
    references: &[(String, String)],
    hypotheses: &[(String, String)],
) -> Result<WerResult, MetricsError> {
    let hyp: BTreeMap<&str, &str> = hypotheses
        .iter()
        .map(|(i, t)| (i.as_str(), t.as_str()))
        .collect();
    let refs: BTreeSet<&str> = references.iter().map(|(i, _)| i.as_str()).collect();
    if let Some(id) = hyp.keys().find(|k| !refs.contains(*k)) {
        return Err(MetricsError::IdMismatch((*id).into()));
    }
    let mut errors = 0;
    let mut words = 0;
    for (id, text) in references {
        let Some(h) = hyp.get(id.as_str()) else {
            return Err(MetricsError::IdMismatch(id.clone()));
        };
        let r: Vec<&str> = text.split_whitespace().collect();
        let h: Vec<&str> = h.split_whitespace().collect();
        errors += edit_distance(&r, &h);
        words += r.len();
    }
    if words == 0 {
        return Err(MetricsError::EmptyReference);
    }
    Ok(WerResult {
        errors,
        reference_words: words,
        wer: errors as f64 / words as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyResult {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    /// Records whose reference is outside the training vocabulary, or carries
    /// other than one intent; always counted wrong.
    pub unscorable: usize,
    pub missing_predictions: usize,
}

/// Fraction of records whose predicted intent equals the single reference
/// intent. Multi-intent records, references unseen in training, and missing
/// predictions count as errors.
pub fn intent_accuracy(
    data: &DatasetManifest,
    predictions: &BTreeMap<String, String>,
    training_vocab: &IntentVocabulary,
) -> Result<AccuracyResult, MetricsError> {
    if data.is_empty() {
        return Err(MetricsError::EmptyData);
    }
    let mut correct = 0;
    let mut unscorable = 0;
    let mut missing = 0;
    for r in data.records() {
        let gold = match r.single_intent() {
            Some(g) if training_vocab.contains(g) => g,
            _ => {
                unscorable += 1;
                continue;
            }
        };
        match predictions.get(&r.id) {
            Some(p) if p == gold => correct += 1,
            Some(_) => {}
            None => missing += 1,
        }
    }
    Ok(AccuracyResult {
        correct,
        total: data.len(),
        accuracy: correct as f64 / data.len() as f64,
        unscorable,
        missing_predictions: missing,
    })
}

/// Share of the gap between the low-resource and full-data accuracy that a
/// method closes. `None` when the gap is zero.
pub fn recovery(method: f64, low: f64, full: f64) -> Option<f64> {
    let gap = full - low;
    (gap != 0.0).then(|| (method - low) / gap)
}
