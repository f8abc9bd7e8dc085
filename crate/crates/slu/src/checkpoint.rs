//! Self-describing JSON checkpoints.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use slu_core::am::ngram::CharNgram;
use slu_core::am::AcousticEncoder;
use slu_core::joint::JointModel;
use slu_core::s2i::S2iModel;
use slu_core::t2i::T2iModel;

use crate::io::{write_atomic, IoError};

pub const FORMAT_VERSION: u32 = 1;

/// A model type that can be stored as a checkpoint.
pub trait Artifact: Serialize + DeserializeOwned {
    const KIND: &'static str;

    /// Rebuild derived state dropped during serialization.
    fn restore(&mut self) {}
}

impl Artifact for AcousticEncoder {
    const KIND: &'static str = "acoustic_encoder";
}

impl Artifact for S2iModel {
    const KIND: &'static str = "s2i_model";
}

impl Artifact for T2iModel {
    const KIND: &'static str = "t2i_model";

    fn restore(&mut self) {
        self.encoder.bpe.rebuild();
    }
}

impl Artifact for JointModel {
    const KIND: &'static str = "joint_model";

    fn restore(&mut self) {
        self.text.encoder.bpe.rebuild();
    }
}

impl Artifact for CharNgram {
    const KIND: &'static str = "char_ngram";
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    kind: String,
    format_version: u32,
    producer: String,
    config_hash: String,
    payload: T,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: expected a `{want}` checkpoint, found `{got}`")]
    WrongKind { path: String, want: &'static str, got: String },
    #[error("{path}: format version {got} is not supported")]
    Version { path: String, got: u32 },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Io(#[from] IoError),
}

pub fn save<T: Artifact>(path: &Path, model: &T, config_hash: &str) -> Result<(), CheckpointError> {
    let env = Envelope {
        kind: T::KIND.to_string(),
        format_version: FORMAT_VERSION,
        producer: concat!("slu ", env!("CARGO_PKG_VERSION")).to_string(),
        config_hash: config_hash.to_string(),
        payload: model,
    };
    Ok(write_atomic(path, &serde_json::to_vec(&env).expect("models serialize"))?)
}

/// Returns the model and the config hash it was saved with.
pub fn load<T: Artifact>(path: &Path) -> Result<(T, String), CheckpointError> {
    let shown = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|source| IoError::File { path: path.to_path_buf(), source })?;
    #[derive(Deserialize)]
    struct Header {
        kind: String,
        format_version: u32,
    }
    let parse = |e: serde_json::Error| CheckpointError::Parse { path: shown.clone(), message: e.to_string() };
    let header: Header = serde_json::from_slice(&bytes).map_err(parse)?;
    if header.kind != T::KIND {
        return Err(CheckpointError::WrongKind { path: shown, want: T::KIND, got: header.kind });
    }
    if header.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version { path: shown, got: header.format_version });
    }
    let env: Envelope<T> = serde_json::from_slice(&bytes).map_err(parse)?;
    let mut model = env.payload;
    model.restore();
    Ok((model, env.config_hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use slu_core::am::ngram::train_ngram_lm;
    use slu_core::am::units::UnitVocabulary;
    use slu_core::am::EncoderConfig;
    use slu_core::t2i::bpe::Bpe;
    use slu_core::t2i::{TextConfig, TextEncoder};

    #[test]
    fn round_trips_preserve_models() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = EncoderConfig { layers: 1, hidden_per_direction: 8, ..EncoderConfig::default() };
        let am = AcousticEncoder::new(&cfg, UnitVocabulary::graphemes(), None, 3);
        let p = dir.path().join("am.json");
        save(&p, &am, "abc").unwrap();
        let (back, hash): (AcousticEncoder, _) = load(&p).unwrap();
        assert_eq!(back.checksum(), am.checksum());
        assert_eq!(hash, "abc");
        assert!(matches!(load::<S2iModel>(&p), Err(CheckpointError::WrongKind { .. })));

        let lm = train_ngram_lm(["pay my bill"], 3).unwrap();
        save(&dir.path().join("lm.json"), &lm, "").unwrap();
        assert_eq!(load::<CharNgram>(&dir.path().join("lm.json")).unwrap().0, lm);

        let bpe = Bpe::train(["pay my bill", "pay the bill"], 60);
        let tc = TextConfig { layers: 1, heads: 2, width: 8, ffn_width: 16, max_len: 16, ..TextConfig::default() };
        let t2i = T2iModel::new(TextEncoder::new(&tc, bpe, 1).unwrap(), slu_core::corpus::IntentVocabulary::new(["a", "b"]), 1);
        save(&dir.path().join("t2i.json"), &t2i, "").unwrap();
        let (back, _): (T2iModel, _) = load(&dir.path().join("t2i.json")).unwrap();
        assert_eq!(back.predict_text("pay my bill"), t2i.predict_text("pay my bill"));
    }
}
