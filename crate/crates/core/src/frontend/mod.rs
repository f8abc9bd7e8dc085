//! Acoustic front end: log-mel filterbank features and speed/tempo
//! perturbation of manifests.

pub mod dsp;

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    AudioRef, CorpusError, DatasetManifest, Provenance, Transform, UtteranceRecord,
};
use crate::math::{cos, exp, ln, powf, PI};
use crate::tensor::Matrix;
pub use dsp::Waveform;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FrontendError {
    #[error("unsupported sample rate {0} Hz (expected 8000 or 16000)")]
    UnsupportedRate(u32),
    #[error("empty waveform")]
    EmptyWaveform,
    #[error("perturbation factor {0} outside [0.5, 2.0]")]
    BadFactor(f64),
    #[error("utterance `{0}` is already transformed")]
    AlreadyTransformed(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub num_mel_bins: usize,
    pub window_ms: f64,
    pub shift_ms: f64,
    pub low_freq_hz: f64,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            num_mel_bins: 40,
            window_ms: 25.0,
            shift_ms: 10.0,
            low_freq_hz: 20.0,
            log_floor: 1e-10,
        }
    }
}

/// Sample rate features are computed at; 16 kHz input is downsampled first.
pub const CANONICAL_RATE: u32 = 8000;

/// Frame-level features of one utterance, `T × D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    pub frames: Matrix,
    pub frame_shift_ms: f32,
    pub utterance_id: String,
    pub provenance: Provenance,
}

impl FeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * ln(1.0 + hz / 700.0)
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (exp(mel / 1127.0) - 1.0)
}

/// Triangular mel filters over `fft_size / 2 + 1` bins.
fn mel_filters(cfg: &FeatureConfig, rate: u32, fft_size: usize) -> Vec<Vec<f64>> {
    let bins = fft_size / 2 + 1;
    let nyquist = f64::from(rate) / 2.0;
    let (lo, hi) = (hz_to_mel(cfg.low_freq_hz), hz_to_mel(nyquist));
    let n = cfg.num_mel_bins;
    let centers: Vec<f64> = (0..n + 2)
        .map(|i| lo + (hi - lo) * i as f64 / (n + 1) as f64)
        .collect();
    (0..n)
        .map(|m| {
            let (l, c, r) = (centers[m], centers[m + 1], centers[m + 2]);
            (0..bins)
                .map(|b| {
                    let mel = hz_to_mel(b as f64 * f64::from(rate) / fft_size as f64);
                    if mel <= l || mel >= r {
                        0.0
                    } else if mel <= c {
                        (mel - l) / (c - l)
                    } else {
                        (r - mel) / (r - c)
                    }
                })
                .collect()
        })
        .collect()
}

/// Log-mel filterbank features with per-utterance mean normalization.
///
/// Frames: `1 + (len − window) / shift` (at least one, zero-padded). 16 kHz
/// input is downsampled to 8 kHz first.
pub fn extract_features(
    wave: &Waveform,
    cfg: &FeatureConfig,
    utterance_id: &str,
    provenance: Provenance,
) -> Result<FeatureSequence, FrontendError> {
    if wave.samples.is_empty() {
        return Err(FrontendError::EmptyWaveform);
    }
    let wave = match wave.sample_rate {
        CANONICAL_RATE => wave.clone(),
        16000 => dsp::resample(wave, CANONICAL_RATE),
        other => return Err(FrontendError::UnsupportedRate(other)),
    };
    let rate = f64::from(wave.sample_rate);
    let win = libm::round(cfg.window_ms * rate / 1000.0) as usize;
    let shift = libm::round(cfg.shift_ms * rate / 1000.0) as usize;
    let fft_size = win.next_power_of_two();
    let filters = mel_filters(cfg, wave.sample_rate, fft_size);
    let frames = if wave.samples.len() < win {
        1
    } else {
        1 + (wave.samples.len() - win) / shift
    };
    // Povey-style window: Hann raised to 0.85.
    let window: Vec<f64> = (0..win)
        .map(|i| {
            powf(
                0.5 - 0.5 * cos(2.0 * PI * i as f64 / (win - 1) as f64),
                0.85,
            )
        })
        .collect();

    let mut out = Matrix::zeros(frames, cfg.num_mel_bins);
    let mut re = vec![0.0; fft_size];
    let mut im = vec![0.0; fft_size];
    for t in 0..frames {
        let start = t * shift;
        let seg: Vec<f64> = (0..win)
            .map(|i| wave.samples.get(start + i).map_or(0.0, |&s| f64::from(s)))
            .collect();
        let mean = seg.iter().sum::<f64>() / win as f64;
        re.iter_mut().for_each(|v| *v = 0.0);
        im.iter_mut().for_each(|v| *v = 0.0);
        let mut prev = seg[0] - mean;
        for i in 0..win {
            let x = seg[i] - mean;
            // Pre-emphasis.
            let y = x - 0.97 * prev;
            prev = x;
            re[i] = y * window[i];
        }
        dsp::fft(&mut re, &mut im);
        let power: Vec<f64> = (0..fft_size / 2 + 1)
            .map(|b| re[b] * re[b] + im[b] * im[b])
            .collect();
        for (m, f) in filters.iter().enumerate() {
            let e: f64 = f.iter().zip(&power).map(|(w, p)| w * p).sum();
            out.set(t, m, ln(e.max(cfg.log_floor)) as f32);
        }
    }
    let means = out.col_sums();
    for t in 0..frames {
        let row = out.row_mut(t);
        for (v, m) in row.iter_mut().zip(means.data()) {
            *v -= m / frames as f32;
        }
    }
    Ok(FeatureSequence {
        frames: out,
        frame_shift_ms: cfg.shift_ms as f32,
        utterance_id: utterance_id.to_string(),
        provenance,
    })
}

/// Concatenate each run of `k` consecutive frames into one, giving
/// `⌈T/k⌉ × kD`; the last run is padded by repeating the final frame.
pub fn stack_frames(frames: &Matrix, k: usize) -> Matrix {
    if k <= 1 {
        return frames.clone();
    }
    let (t, d) = frames.shape();
    let out_t = t.div_ceil(k);
    let mut out = Matrix::zeros(out_t, k * d);
    for o in 0..out_t {
        let row = out.row_mut(o);
        for j in 0..k {
            let src = (o * k + j).min(t - 1);
            row[j * d..(j + 1) * d].copy_from_slice(frames.row(src));
        }
    }
    out
}

/// Speed and tempo factors applied to each utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationPolicy {
    pub speed_factors: Vec<f64>,
    pub tempo_factors: Vec<f64>,
    pub include_original: bool,
}

impl Default for PerturbationPolicy {
    fn default() -> Self {
        Self {
            speed_factors: vec![0.9, 1.1],
            tempo_factors: vec![0.9, 1.1],
            include_original: true,
        }
    }
}

impl PerturbationPolicy {
    pub fn none() -> Self {
        Self {
            speed_factors: Vec::new(),
            tempo_factors: Vec::new(),
            include_original: true,
        }
    }

    pub fn validate(&self) -> Result<(), FrontendError> {
        for &f in self.speed_factors.iter().chain(&self.tempo_factors) {
            if !(0.5..=2.0).contains(&f) {
                return Err(FrontendError::BadFactor(f));
            }
        }
        Ok(())
    }

    /// Output copies per input record.
    pub fn multiplicity(&self) -> usize {
        usize::from(self.include_original) + self.speed_factors.len() + self.tempo_factors.len()
    }
}

/// One output record per transform (plus the original when requested).
/// Copies get `-sp<f>` / `-tp<f>` id suffixes, a transformed audio reference,
/// duration scaled by `1/f`, and `perturbed` provenance.
pub fn perturb(
    manifest: &DatasetManifest,
    policy: &PerturbationPolicy,
) -> Result<DatasetManifest, FrontendError> {
    policy.validate()?;
    manifest.require_audio()?;
    let transforms: Vec<Transform> = policy
        .speed_factors
        .iter()
        .map(|&f| Transform::Speed(f))
        .chain(policy.tempo_factors.iter().map(|&f| Transform::Tempo(f)))
        .collect();
    let mut out = Vec::with_capacity(manifest.len() * policy.multiplicity());
    for r in manifest.records() {
        let audio = r.audio.as_ref().expect("checked above");
        if audio.transform.is_some() && !transforms.is_empty() {
            return Err(FrontendError::AlreadyTransformed(r.id.clone()));
        }
        if policy.include_original {
            out.push(r.clone());
        }
        for t in &transforms {
            out.push(UtteranceRecord {
                id: alloc::format!("{}-{}", r.id, t.id_suffix()),
                audio: Some(AudioRef {
                    path: audio.path.clone(),
                    transform: Some(*t),
                }),
                duration_s: r.duration_s / t.factor(),
                provenance: Provenance::Perturbed,
                ..r.clone()
            });
        }
    }
    Ok(DatasetManifest::new(manifest.split_name(), out)?)
}

/// Apply a load-time transform to a waveform.
pub fn apply_transform(wave: &Waveform, transform: Option<Transform>) -> Waveform {
    match transform {
        None => wave.clone(),
        Some(Transform::Speed(f)) => dsp::speed(wave, f),
        Some(Transform::Tempo(f)) => dsp::tempo(wave, f),
    }
}

/// Mel value of `hz`, exposed for tests that probe filter placement.
pub fn mel(hz: f64) -> f64 {
    hz_to_mel(hz)
}

/// Inverse of [`mel`].
pub fn mel_inverse(m: f64) -> f64 {
    mel_to_hz(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use proptest::prelude::*;

    fn record(id: &str, dur: f64) -> UtteranceRecord {
        UtteranceRecord {
            id: id.to_string(),
            audio: Some(AudioRef::new(format!("{id}.wav"))),
            transcript: "pay my bill".to_string(),
            intents: vec!["billing".to_string()],
            speaker: "a".to_string(),
            duration_s: dur,
            provenance: Provenance::Real,
        }
    }

    #[test]
    fn one_second_at_8k_gives_98_frames() {
        let w = dsp::tone(8000, 300.0, 1.0);
        let f = extract_features(&w, &FeatureConfig::default(), "u", Provenance::Real).unwrap();
        assert_eq!(f.num_frames(), 98);
        assert_eq!(f.dim(), 40);
        assert!((f.num_frames() as i64 - 100).abs() <= 2);
    }

    #[test]
    fn silence_gives_finite_frames() {
        let w = Waveform::new(8000, vec![0.0; 4000]);
        let f = extract_features(&w, &FeatureConfig::default(), "u", Provenance::Real).unwrap();
        assert!(f.frames.is_finite());
        assert!(f.num_frames() >= 1);
    }

    #[test]
    fn short_clip_gives_one_frame() {
        let w = Waveform::new(8000, vec![0.1; 50]);
        let f = extract_features(&w, &FeatureConfig::default(), "u", Provenance::Real).unwrap();
        assert_eq!(f.num_frames(), 1);
    }

    #[test]
    fn features_are_deterministic() {
        let w = dsp::tone(8000, 700.0, 0.3);
        let a = extract_features(&w, &FeatureConfig::default(), "u", Provenance::Real).unwrap();
        let b = extract_features(&w, &FeatureConfig::default(), "u", Provenance::Real).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unsupported_rate_and_empty_input_rejected() {
        let cfg = FeatureConfig::default();
        assert_eq!(
            extract_features(
                &Waveform::new(22050, vec![0.0; 100]),
                &cfg,
                "u",
                Provenance::Real
            )
            .unwrap_err(),
            FrontendError::UnsupportedRate(22050)
        );
        assert_eq!(
            extract_features(&Waveform::new(8000, vec![]), &cfg, "u", Provenance::Real)
                .unwrap_err(),
            FrontendError::EmptyWaveform
        );
    }

    #[test]
    fn sixteen_k_input_matches_frame_rate_of_eight_k() {
        let w = dsp::tone(16000, 300.0, 1.0);
        let f = extract_features(&w, &FeatureConfig::default(), "u", Provenance::Real).unwrap();
        assert_eq!(f.num_frames(), 98);
    }

    #[test]
    fn frequency_step_moves_energy_between_bands() {
        let lo = dsp::tone(8000, 500.0, 0.5);
        let hi = dsp::tone(8000, 2000.0, 0.5);
        let mut samples = lo.samples.clone();
        samples.extend(&hi.samples);
        let cfg = FeatureConfig::default();
        let f =
            extract_features(&Waveform::new(8000, samples), &cfg, "u", Provenance::Real).unwrap();
        let band_of = |hz: f64| {
            let (l, h) = (mel(cfg.low_freq_hz), mel(4000.0));
            ((mel(hz) - l) / (h - l) * (cfg.num_mel_bins + 1) as f64) as usize - 1
        };
        let (b500, b2k) = (band_of(500.0), band_of(2000.0));
        let (early, late) = (5, f.num_frames() - 5);
        assert!(f.frames.get(early, b500) > f.frames.get(late, b500));
        assert!(f.frames.get(late, b2k) > f.frames.get(early, b2k));
        assert!((mel_inverse(mel(1000.0)) - 1000.0).abs() < 1e-6);
    }

    #[test]
    fn stacking_pads_with_last_frame() {
        let m = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]);
        let s = stack_frames(&m, 2);
        assert_eq!(s.shape(), (2, 2));
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn default_policy_is_five_fold() {
        let recs: Vec<UtteranceRecord> = (0..20)
            .map(|i| record(&format!("u{i}"), 1.0 + i as f64 * 0.1))
            .collect();
        let m = DatasetManifest::new("train", recs).unwrap();
        let p = perturb(&m, &PerturbationPolicy::default()).unwrap();
        assert_eq!(p.len(), 5 * m.len());
        let ratio = p.total_duration_s() / m.total_duration_s();
        assert!((ratio - 5.0).abs() / 5.0 < 0.02, "duration ratio {ratio}");
        let ids: Vec<&str> = p.records()[..5].iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["u0", "u0-sp0.9", "u0-sp1.1", "u0-tp0.9", "u0-tp1.1"]);
        assert!(p
            .records()
            .iter()
            .all(|r| r.transcript == "pay my bill" && r.intents == ["billing"]));
    }

    #[test]
    fn corpus_scale_hours() {
        // 17.5 h and 1.7 h of audio → ≈ 88 h and ≈ 8.6 h after default perturbation.
        for (hours, want) in [(17.5f64, 88.0f64), (1.7, 8.6)] {
            let n = 100;
            let per = hours * 3600.0 / n as f64;
            let recs: Vec<UtteranceRecord> =
                (0..n).map(|i| record(&format!("u{i}"), per)).collect();
            let m = DatasetManifest::new("t", recs).unwrap();
            let p = perturb(&m, &PerturbationPolicy::default()).unwrap();
            let got = p.total_duration_s() / 3600.0;
            assert!((got - want).abs() / want < 0.02, "{hours} h → {got} h");
        }
    }

    #[test]
    fn empty_policy_is_identity() {
        let m = DatasetManifest::new("t", vec![record("a", 1.0)]).unwrap();
        assert_eq!(perturb(&m, &PerturbationPolicy::none()).unwrap(), m);
    }

    #[test]
    fn text_only_records_rejected() {
        let m = DatasetManifest::new("t", vec![UtteranceRecord::text("a", "hi", "x")]).unwrap();
        assert!(matches!(
            perturb(&m, &PerturbationPolicy::default()),
            Err(FrontendError::Corpus(CorpusError::MissingAudio { .. }))
        ));
    }

    #[test]
    fn out_of_range_factor_rejected() {
        let m = DatasetManifest::new("t", vec![record("a", 1.0)]).unwrap();
        let p = PerturbationPolicy {
            speed_factors: vec![3.0],
            ..PerturbationPolicy::default()
        };
        assert_eq!(perturb(&m, &p).unwrap_err(), FrontendError::BadFactor(3.0));
    }

    proptest! {
        #[test]
        fn record_count_follows_policy(n in 1usize..15, s in 0usize..3, t in 0usize..3, orig in any::<bool>()) {
            let recs: Vec<UtteranceRecord> = (0..n).map(|i| record(&format!("u{i}"), 1.0)).collect();
            let m = DatasetManifest::new("t", recs).unwrap();
            let p = PerturbationPolicy {
                speed_factors: [0.9, 1.1, 1.2][..s].to_vec(),
                tempo_factors: [0.9, 1.1, 0.8][..t].to_vec(),
                include_original: orig,
            };
            let out = perturb(&m, &p).unwrap();
            prop_assert_eq!(out.len(), n * (usize::from(orig) + s + t));
        }
    }
}
