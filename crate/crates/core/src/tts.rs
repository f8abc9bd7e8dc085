//! Text-to-speech augmentation: speaker assignment, a deterministic stub
//! voice, job execution against any synthesizer, and merging with real data.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::am::units::normalize_text;
use crate::corpus::{AudioRef, CorpusError, DatasetManifest, Provenance, UtteranceRecord};
use crate::frontend::dsp::{resample, Waveform};
use crate::frontend::CANONICAL_RATE;
use crate::math::{sin, PI};
use crate::rng::{mix, SeededRng};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TtsError {
    #[error("speaker pool is empty")]
    EmptyPool,
    #[error("{dropped} of {total} records failed synthesis (limit 5%)")]
    TooManyDrops { dropped: usize, total: usize },
    #[error("utterance id `{0}` appears in both manifests")]
    IdCollision(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisRequest {
    pub id: String,
    pub text: String,
    pub speaker: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisJob {
    pub requests: Vec<SynthesisRequest>,
    pub seed: u64,
}

/// Produces audio for a batch of requests; one result per request, in order.
pub trait Synthesizer {
    fn synthesize(&mut self, requests: &[SynthesisRequest]) -> Vec<Result<Waveform, String>>;
}

/// Id of the synthetic copy of a text record.
pub fn synthetic_id(id: &str) -> String {
    alloc::format!("{id}-tts")
}

/// One request per record, speaker drawn uniformly from the pool.
pub fn plan_job(
    text: &DatasetManifest,
    pool: &[String],
    seed: u64,
) -> Result<SynthesisJob, TtsError> {
    if pool.is_empty() {
        return Err(TtsError::EmptyPool);
    }
    let mut rng = SeededRng::derive(seed, "tts-speakers");
    let requests = text
        .records()
        .iter()
        .map(|r| SynthesisRequest {
            id: synthetic_id(&r.id),
            text: r.transcript.clone(),
            speaker: pool[rng.below(pool.len())].clone(),
        })
        .collect();
    Ok(SynthesisJob { requests, seed })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisOutcome {
    pub manifest: DatasetManifest,
    pub job: SynthesisJob,
    pub dropped: Vec<(String, String)>,
}

/// Run a job: resample to 8 kHz, hand each waveform to `store`, and build
/// the synthetic manifest. Failed records are dropped; more than 5% fails
/// the job.
pub fn synthesize(
    text: &DatasetManifest,
    synth: &mut dyn Synthesizer,
    pool: &[String],
    seed: u64,
    store: &mut dyn FnMut(&SynthesisRequest, &Waveform) -> Result<AudioRef, String>,
) -> Result<SynthesisOutcome, TtsError> {
    let job = plan_job(text, pool, seed)?;
    let results = synth.synthesize(&job.requests);
    let mut records = Vec::with_capacity(job.requests.len());
    let mut dropped = Vec::new();
    for ((req, src), res) in job.requests.iter().zip(text.records()).zip(results) {
        let stored = res.and_then(|w| {
            let w = if w.sample_rate == CANONICAL_RATE {
                w
            } else {
                resample(&w, CANONICAL_RATE)
            };
            if w.samples.is_empty() {
                return Err("empty audio".to_string());
            }
            let audio = store(req, &w)?;
            Ok((audio, w.samples.len() as f64 / f64::from(CANONICAL_RATE)))
        });
        match stored {
            Ok((audio, duration_s)) => records.push(UtteranceRecord {
                id: req.id.clone(),
                audio: Some(audio),
                transcript: src.transcript.clone(),
                intents: src.intents.clone(),
                speaker: req.speaker.clone(),
                duration_s,
                provenance: Provenance::Synthetic,
            }),
            Err(e) => dropped.push((req.id.clone(), e)),
        }
    }
    let total = job.requests.len();
    if dropped.len() * 20 > total {
        return Err(TtsError::TooManyDrops {
            dropped: dropped.len(),
            total,
        });
    }
    Ok(SynthesisOutcome {
        manifest: DatasetManifest::new(text.split_name(), records)?,
        job,
        dropped,
    })
}

/// Concatenate real and synthetic records; no perturbation is applied.
pub fn merge_for_training(
    real: &DatasetManifest,
    synthetic: &DatasetManifest,
) -> Result<DatasetManifest, TtsError> {
    if let Some(r) = synthetic
        .records()
        .iter()
        .find(|r| real.get(&r.id).is_some())
    {
        return Err(TtsError::IdCollision(r.id.clone()));
    }
    let mut records = real.records().to_vec();
    records.extend_from_slice(synthetic.records());
    Ok(DatasetManifest::new(real.split_name(), records)?)
}

/// Per-speaker voice parameters, a pure function of the speaker id.
#[derive(Clone, Debug, PartialEq)]
pub struct VoiceTraits {
    pub formant_scale: f64,
    pub rate: f64,
    pub f0: f64,
    pub amplitude: f64,
    pub noise: f64,
}

impl VoiceTraits {
    pub fn of(speaker: &str) -> Self {
        let mut rng = SeededRng::new(mix(0x5eed, speaker));
        Self {
            formant_scale: 0.9 + 0.2 * rng.uniform(),
            rate: 0.85 + 0.35 * rng.uniform(),
            f0: 90.0 + 160.0 * rng.uniform(),
            amplitude: 0.2 + 0.3 * rng.uniform(),
            noise: 0.005 + 0.025 * rng.uniform(),
        }
    }
}

/// Two formant frequencies per character on a 6 × 5 grid.
fn formants(c: char) -> Option<(f64, f64)> {
    let k = match c {
        'a'..='z' => c as usize - 'a' as usize,
        '\'' => 26,
        _ => return None,
    };
    Some((
        300.0 + 130.0 * (k % 6) as f64,
        1100.0 + 420.0 * (k / 6) as f64,
    ))
}

/// Renders text as a sequence of per-character two-tone segments shaped by
/// speaker traits. Deterministic in (text, speaker, seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StubVoice {
    pub seed: u64,
    pub sample_rate: u32,
}

impl Default for StubVoice {
    fn default() -> Self {
        Self {
            seed: 0,
            sample_rate: CANONICAL_RATE,
        }
    }
}

impl StubVoice {
    pub fn render(&self, text: &str, speaker: &str) -> Waveform {
        let v = VoiceTraits::of(speaker);
        let rate = f64::from(self.sample_rate);
        let mut rng = SeededRng::new(mix(self.seed, &alloc::format!("{speaker}\u{1f}{text}")));
        let mut samples = Vec::new();
        let mut phase = [0.0f64; 3];
        let lead = (0.1 * rate) as usize;
        let silence = |samples: &mut Vec<f32>, n: usize, rng: &mut SeededRng| {
            samples.extend((0..n).map(|_| (v.noise * rng.normal()) as f32));
        };
        silence(&mut samples, lead, &mut rng);
        for c in normalize_text(text).chars() {
            let Some((f1, f2)) = formants(c) else {
                silence(&mut samples, (0.04 * rate / v.rate) as usize, &mut rng);
                continue;
            };
            let dur = 0.07 / v.rate * (0.9 + 0.2 * rng.uniform());
            let n = (dur * rate) as usize;
            let ramp = (0.005 * rate) as usize;
            let freqs = [f1 * v.formant_scale, f2 * v.formant_scale, v.f0];
            let gains = [1.0, 0.6, 0.25];
            for i in 0..n {
                let env = (i.min(n - 1 - i) as f64 / ramp as f64).min(1.0);
                let mut s = 0.0;
                for k in 0..3 {
                    phase[k] += 2.0 * PI * freqs[k] / rate;
                    s += gains[k] * sin(phase[k]);
                }
                samples.push((v.amplitude * env * s / 1.85 + v.noise * rng.normal()) as f32);
            }
        }
        silence(&mut samples, lead, &mut rng);
        Waveform::new(self.sample_rate, samples)
    }
}

impl Synthesizer for StubVoice {
    fn synthesize(&mut self, requests: &[SynthesisRequest]) -> Vec<Result<Waveform, String>> {
        requests
            .iter()
            .map(|r| Ok(self.render(&r.text, &r.speaker)))
            .collect()
    }
}
