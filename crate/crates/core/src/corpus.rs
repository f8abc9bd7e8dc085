//! Labeled utterances, manifests, intent vocabularies, and deterministic
//! subsetting.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CorpusError {
    #[error("duplicate utterance id `{id}` (record {index})")]
    DuplicateId { id: String, index: usize },
    #[error("utterance `{id}` has an empty transcript")]
    EmptyTranscript { id: String },
    #[error("utterance `{id}`: audio must be present exactly when duration is positive")]
    AudioDurationMismatch { id: String },
    #[error("utterance `{id}` carries {count} intents; training manifests need exactly one")]
    NotSingleIntent { id: String, count: usize },
    #[error("utterance `{id}` has no audio")]
    MissingAudio { id: String },
    #[error("subset fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("subset of {fraction} of {records} records selects no records")]
    EmptySubset { fraction: f64, records: usize },
    #[error("no seed within {attempts} attempts keeps every frequent class; missing: {missing:?}")]
    Coverage {
        attempts: usize,
        missing: Vec<String>,
    },
    #[error("unknown intent `{label}`")]
    UnknownIntent { label: String },
    #[error("malformed audio reference `{0}`")]
    BadAudioRef(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Perturbed,
    Synthetic,
}

/// A waveform-level transform applied when the audio is loaded.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform {
    /// Resample-and-relabel: duration and pitch both scale.
    Speed(f64),
    /// Time stretch: duration scales, pitch preserved.
    Tempo(f64),
}

impl Transform {
    pub fn factor(&self) -> f64 {
        match *self {
            Transform::Speed(f) | Transform::Tempo(f) => f,
        }
    }

    /// Suffix appended to utterance ids, e.g. `sp0.9`.
    pub fn id_suffix(&self) -> String {
        match *self {
            Transform::Speed(f) => format!("sp{f}"),
            Transform::Tempo(f) => format!("tp{f}"),
        }
    }
}

/// Audio file reference, optionally with a load-time transform.
///
/// Written as `path` or `path#speed=0.9` / `path#tempo=1.1`, in the spirit of
/// piped `wav.scp` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioRef {
    pub path: String,
    pub transform: Option<Transform>,
}

impl AudioRef {
    pub fn new(path: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            transform: None,
        }
    }
}

impl fmt::Display for AudioRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.transform {
            None => write!(f, "{}", self.path),
            Some(Transform::Speed(x)) => write!(f, "{}#speed={x}", self.path),
            Some(Transform::Tempo(x)) => write!(f, "{}#tempo={x}", self.path),
        }
    }
}

impl FromStr for AudioRef {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CorpusError::BadAudioRef(s.to_string());
        match s.rsplit_once('#') {
            None => Ok(AudioRef::new(s)),
            Some((path, spec)) => {
                let (kind, value) = spec.split_once('=').ok_or_else(bad)?;
                let factor: f64 = value.parse().map_err(|_| bad())?;
                if !(factor.is_finite() && factor > 0.0) || path.is_empty() {
                    return Err(bad());
                }
                let transform = match kind {
                    "speed" => Transform::Speed(factor),
                    "tempo" => Transform::Tempo(factor),
                    _ => return Err(bad()),
                };
                Ok(AudioRef {
                    path: path.to_string(),
                    transform: Some(transform),
                })
            }
        }
    }
}

impl Serialize for AudioRef {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AudioRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One labeled utterance. Field order is the manifest key order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub audio: Option<AudioRef>,
    #[serde(rename = "text")]
    pub transcript: String,
    pub intents: Vec<String>,
    pub speaker: String,
    pub duration_s: f64,
    pub provenance: Provenance,
}

impl UtteranceRecord {
    /// Text-only record (no audio, zero duration).
    pub fn text(id: &str, transcript: &str, intent: &str) -> Self {
        Self {
            id: id.to_string(),
            audio: None,
            transcript: transcript.to_string(),
            intents: alloc::vec![intent.to_string()],
            speaker: String::new(),
            duration_s: 0.0,
            provenance: Provenance::Real,
        }
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.transcript.split_whitespace()
    }

    /// The single intent, if there is exactly one.
    pub fn single_intent(&self) -> Option<&str> {
        match self.intents.as_slice() {
            [one] => Some(one),
            _ => None,
        }
    }

    fn validate(&self) -> Result<(), CorpusError> {
        if self.transcript.trim().is_empty() {
            return Err(CorpusError::EmptyTranscript {
                id: self.id.clone(),
            });
        }
        if self.audio.is_some() != (self.duration_s > 0.0) {
            return Err(CorpusError::AudioDurationMismatch {
                id: self.id.clone(),
            });
        }
        Ok(())
    }
}

/// Ordered, distinct intent labels with a bijective index mapping.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentVocabulary {
    labels: Vec<String>,
}

impl IntentVocabulary {
    /// Sorted, deduplicated labels.
    pub fn new<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = labels.into_iter().map(Into::into).collect();
        Self {
            labels: set.into_iter().collect(),
        }
    }

    pub fn from_records(records: &[UtteranceRecord]) -> Self {
        Self::new(records.iter().flat_map(|r| r.intents.iter().cloned()))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index_of(label).is_some()
    }

    pub fn is_subset_of(&self, other: &IntentVocabulary) -> bool {
        self.labels.iter().all(|l| other.contains(l))
    }
}

/// An immutable, validated collection of utterances.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    split_name: String,
    records: Vec<UtteranceRecord>,
    intent_vocab: IntentVocabulary,
}

impl DatasetManifest {
    /// Validates ids, transcripts and audio/duration consistency; the intent
    /// vocabulary is the union of all labels.
    pub fn new(split_name: &str, records: Vec<UtteranceRecord>) -> Result<Self, CorpusError> {
        let mut seen = BTreeSet::new();
        for (index, r) in records.iter().enumerate() {
            if !seen.insert(r.id.as_str()) {
                return Err(CorpusError::DuplicateId {
                    id: r.id.clone(),
                    index,
                });
            }
            r.validate()?;
        }
        let intent_vocab = IntentVocabulary::from_records(&records);
        Ok(Self {
            split_name: split_name.to_string(),
            records,
            intent_vocab,
        })
    }

    pub fn empty(split_name: &str) -> Self {
        Self {
            split_name: split_name.to_string(),
            records: Vec::new(),
            intent_vocab: IntentVocabulary::default(),
        }
    }

    pub fn split_name(&self) -> &str {
        &self.split_name
    }

    pub fn records(&self) -> &[UtteranceRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<UtteranceRecord> {
        self.records
    }

    pub fn intent_vocab(&self) -> &IntentVocabulary {
        &self.intent_vocab
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_duration_s(&self) -> f64 {
        self.records.iter().map(|r| r.duration_s).sum()
    }

    pub fn get(&self, id: &str) -> Option<&UtteranceRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn with_split_name(mut self, name: &str) -> Self {
        self.split_name = name.to_string();
        self
    }

    /// Training manifests carry exactly one intent per record.
    pub fn require_single_intent(&self) -> Result<(), CorpusError> {
        for r in &self.records {
            if r.intents.len() != 1 {
                return Err(CorpusError::NotSingleIntent {
                    id: r.id.clone(),
                    count: r.intents.len(),
                });
            }
        }
        Ok(())
    }

    pub fn require_audio(&self) -> Result<(), CorpusError> {
        match self.records.iter().find(|r| r.audio.is_none()) {
            Some(r) => Err(CorpusError::MissingAudio { id: r.id.clone() }),
            None => Ok(()),
        }
    }

    /// Record count per provenance.
    pub fn provenance_counts(&self) -> BTreeMap<Provenance, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.provenance).or_insert(0) += 1;
        }
        m
    }
}

/// Classes with at least this many members must survive subsetting.
pub const COVERAGE_MIN_CLASS_SIZE: usize = 10;
/// Seeds tried (starting from the requested one) before giving up on coverage.
pub const COVERAGE_ATTEMPTS: usize = 100;

/// Deterministic `⌊fraction·N⌋`-record subset by seeded shuffle, preserving the
/// relative order of the chosen records.
///
/// Every intent with at least [`COVERAGE_MIN_CLASS_SIZE`] members keeps one or
/// more; the shuffle is redrawn with successive seeds until that holds.
pub fn subset(
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> Result<DatasetManifest, CorpusError> {
    subset_with_complement(manifest, fraction, seed).map(|(s, _)| s)
}

/// Like [`subset`], also returning the records left out.
pub fn subset_with_complement(
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), CorpusError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CorpusError::BadFraction(fraction));
    }
    let n = manifest.len();
    let k = libm::floor(fraction * n as f64) as usize;
    let name = format!("{}@{fraction}", manifest.split_name);
    if k == n {
        return Ok((
            manifest.clone().with_split_name(&name),
            DatasetManifest::empty(&name),
        ));
    }
    if k == 0 {
        return Err(CorpusError::EmptySubset {
            fraction,
            records: n,
        });
    }

    let mut class_sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &manifest.records {
        for i in &r.intents {
            *class_sizes.entry(i.as_str()).or_insert(0) += 1;
        }
    }
    let frequent: Vec<&str> = class_sizes
        .iter()
        .filter(|(_, &c)| c >= COVERAGE_MIN_CLASS_SIZE)
        .map(|(&l, _)| l)
        .collect();

    let mut missing = Vec::new();
    for attempt in 0..COVERAGE_ATTEMPTS {
        let mut rng = SeededRng::derive(seed.wrapping_add(attempt as u64), "subset");
        let perm = rng.permutation(n);
        let mut chosen = alloc::vec![false; n];
        for &i in &perm[..k] {
            chosen[i] = true;
        }
        let mut present = BTreeSet::new();
        for (i, r) in manifest.records.iter().enumerate() {
            if chosen[i] {
                present.extend(r.intents.iter().map(String::as_str));
            }
        }
        missing = frequent
            .iter()
            .filter(|l| !present.contains(*l))
            .map(|l| l.to_string())
            .collect();
        if missing.is_empty() {
            let (mut inside, mut outside) = (Vec::with_capacity(k), Vec::with_capacity(n - k));
            for (i, r) in manifest.records.iter().enumerate() {
                if chosen[i] {
                    inside.push(r.clone())
                } else {
                    outside.push(r.clone())
                }
            }
            let rest_name = format!("{}@{fraction}-rest", manifest.split_name);
            return Ok((
                DatasetManifest::new(&name, inside)?,
                DatasetManifest::new(&rest_name, outside)?,
            ));
        }
    }
    Err(CorpusError::Coverage {
        attempts: COVERAGE_ATTEMPTS,
        missing,
    })
}

/// Transcripts and intents only: audio removed, durations zeroed.
pub fn text_only_view(manifest: &DatasetManifest) -> DatasetManifest {
    let records = manifest
        .records
        .iter()
        .map(|r| UtteranceRecord {
            audio: None,
            duration_s: 0.0,
            ..r.clone()
        })
        .collect();
    DatasetManifest {
        split_name: manifest.split_name.clone(),
        records,
        intent_vocab: manifest.intent_vocab.clone(),
    }
}
