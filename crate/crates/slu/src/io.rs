//! Manifest, audio, and feature-file IO.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use slu_core::corpus::{AudioRef, DatasetManifest, Provenance, UtteranceRecord};
use slu_core::frontend::dsp::Waveform;
use slu_core::frontend::{apply_transform, extract_features, FeatureConfig};
use slu_core::tensor::Matrix;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Manifest { path: PathBuf, line: usize, message: String },
    #[error("{path}: {message}")]
    Audio { path: PathBuf, message: String },
    #[error("{path}: malformed feature file")]
    Features { path: PathBuf },
    #[error(transparent)]
    Corpus(#[from] slu_core::corpus::CorpusError),
    #[error(transparent)]
    Frontend(#[from] slu_core::frontend::FrontendError),
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File { path: path.to_path_buf(), source }
}

/// Write `bytes` to a sibling temporary file and rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(file_err(dir))?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(file_err(&tmp))?;
    fs::rename(&tmp, path).map_err(file_err(path))
}

/// Read a JSON-lines manifest; the split name is the file stem.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest, IoError> {
    let file = fs::File::open(path).map_err(file_err(path))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(file_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceRecord = serde_json::from_str(&line).map_err(|e| IoError::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("manifest");
    DatasetManifest::new(name, records).map_err(|e| IoError::Manifest {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<(), IoError> {
    let mut out = Vec::new();
    for r in manifest.records() {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

/// Resolve an audio path against the manifest's directory.
pub fn resolve(base: &Path, audio: &AudioRef) -> PathBuf {
    let p = Path::new(&audio.path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn read_wav(path: &Path) -> Result<Waveform, IoError> {
    let bad = |message: String| IoError::Audio { path: path.to_path_buf(), message };
    let reader = hound::WavReader::open(path).map_err(|e| bad(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(bad(format!("{} channels, expected mono", spec.channels)));
    }
    let samples: Result<Vec<f32>, _> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader.into_samples::<i16>().map(|s| s.map(|v| f32::from(v) / 32768.0)).collect(),
        (hound::SampleFormat::Float, 32) => reader.into_samples::<f32>().collect(),
        (f, b) => return Err(bad(format!("unsupported sample format {f:?}/{b}"))),
    };
    Ok(Waveform::new(spec.sample_rate, samples.map_err(|e| bad(e.to_string()))?))
}

/// 16-bit PCM mono.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<(), IoError> {
    let bad = |e: hound::Error| IoError::Audio { path: path.to_path_buf(), message: e.to_string() };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = std::io::Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut buf, spec).map_err(bad)?;
        for &s in &wave.samples {
            w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16).map_err(bad)?;
        }
        w.finalize().map_err(bad)?;
    }
    write_atomic(path, &buf.into_inner())
}

const FEATURE_MAGIC: &[u8; 4] = b"SLUF";

/// Feature file: magic, frames (u32), dim (u32), frame shift in ms (f32),
/// then row-major little-endian f32 values.
pub fn write_features(path: &Path, frames: &Matrix, shift_ms: f32) -> Result<(), IoError> {
    let mut out = Vec::with_capacity(16 + 4 * frames.data().len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(frames.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(frames.cols() as u32).to_le_bytes());
    out.extend_from_slice(&shift_ms.to_le_bytes());
    for v in frames.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &out)
}

pub fn read_features(path: &Path) -> Result<(Matrix, f32), IoError> {
    let mut bytes = Vec::new();
    fs::File::open(path).map_err(file_err(path))?.read_to_end(&mut bytes).map_err(file_err(path))?;
    let bad = || IoError::Features { path: path.to_path_buf() };
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(bad());
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    let rows = u32::from_le_bytes(word(4)) as usize;
    let cols = u32::from_le_bytes(word(8)) as usize;
    let shift = f32::from_le_bytes(word(12));
    if bytes.len() != 16 + 4 * rows * cols {
        return Err(bad());
    }
    let data = (0..rows * cols).map(|k| f32::from_le_bytes(word(16 + 4 * k))).collect();
    Ok((Matrix::from_vec(rows, cols, data), shift))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Extracts features for manifest records, memoized on disk by the audio
/// content, its transform, and the feature configuration.
pub struct FeatureStore {
    cache_dir: Option<PathBuf>,
    config: FeatureConfig,
}

impl FeatureStore {
    pub fn new(cache_dir: Option<PathBuf>, config: FeatureConfig) -> Self {
        Self { cache_dir, config }
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn features(&self, base: &Path, record: &UtteranceRecord) -> Result<Matrix, IoError> {
        let audio = record.audio.as_ref().ok_or_else(|| slu_core::corpus::CorpusError::MissingAudio { id: record.id.clone() })?;
        let path = resolve(base, audio);
        let bytes = fs::read(&path).map_err(file_err(&path))?;
        let key = self.cache_dir.as_ref().map(|dir| {
            let tag = format!("{}|{}|{}", sha256_hex(&bytes), audio.transform.map(|t| t.id_suffix()).unwrap_or_default(), serde_json::to_string(&self.config).unwrap());
            dir.join("features").join(format!("{}.feat", &sha256_hex(tag.as_bytes())[..32]))
        });
        if let Some(k) = &key {
            if let Ok((m, _)) = read_features(k) {
                return Ok(m);
            }
        }
        let wave = read_wav(&path)?;
        let wave = apply_transform(&wave, audio.transform);
        let f = extract_features(&wave, &self.config, &record.id, record.provenance)?;
        if let Some(k) = &key {
            write_features(k, &f.frames, f.frame_shift_ms)?;
        }
        Ok(f.frames)
    }
}

/// Render a text manifest to audio with `render`, writing `<id>.wav` under
/// `audio_dir` and referencing it relative to `manifest_dir`.
pub fn attach_audio(
    text: &DatasetManifest,
    manifest_dir: &Path,
    audio_dir: &Path,
    provenance: Provenance,
    render: &mut dyn FnMut(&UtteranceRecord) -> Waveform,
) -> Result<DatasetManifest, IoError> {
    let rel = audio_dir.strip_prefix(manifest_dir).unwrap_or(audio_dir);
    let mut records = Vec::with_capacity(text.len());
    for r in text.records() {
        let wave = render(r);
        write_wav(&audio_dir.join(format!("{}.wav", r.id)), &wave)?;
        records.push(UtteranceRecord {
            audio: Some(AudioRef::new(rel.join(format!("{}.wav", r.id)).to_string_lossy())),
            duration_s: wave.duration_s(),
            provenance,
            ..r.clone()
        });
    }
    Ok(DatasetManifest::new(text.split_name(), records)?)
}

/// `<id>\t<fields...>` lines.
pub fn write_tsv(path: &Path, rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), IoError> {
    let mut out = BufWriter::new(Vec::new());
    for row in rows {
        writeln!(out, "{}", row.join("\t")).expect("in-memory write");
    }
    write_atomic(path, &out.into_inner().expect("in-memory buffer"))
}
