//! Writes the synthetic help-desk corpus to disk as WAV files plus JSONL
//! manifests, with a matrix file covering the low-resource comparison.

use std::path::{Path, PathBuf};

use slu_core::corpus::{DatasetManifest, Provenance};
use slu_core::desk::{generate, pretraining_corpus, DeskConfig};
use slu_core::tts::StubVoice;

use crate::io::{attach_audio, write_atomic, write_manifest, IoError};

/// Speakers in the general-domain pretraining set.
pub const PRETRAIN_SPEAKERS: usize = 100;

#[derive(Clone, Debug)]
pub struct PrepareOptions {
    pub desk: DeskConfig,
    /// Utterances in the general-domain acoustic pretraining set.
    pub pretrain_utterances: usize,
    pub pretrain_seed: u64,
    /// Voice used to render the "recorded" speech.
    pub voice: StubVoice,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            desk: DeskConfig::default(),
            pretrain_utterances: 1500,
            pretrain_seed: 7,
            voice: StubVoice::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub dir: PathBuf,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    pub pretrain: PathBuf,
    pub matrix: PathBuf,
}

fn render(
    manifest: &DatasetManifest,
    dir: &Path,
    name: &str,
    voice: &StubVoice,
) -> Result<PathBuf, IoError> {
    let out = attach_audio(manifest, dir, &dir.join("audio").join(name), Provenance::Real, &mut |r| {
        voice.render(&r.transcript, &r.speaker)
    })?;
    let path = dir.join(format!("{name}.jsonl"));
    write_manifest(&path, &out)?;
    Ok(path)
}

/// Render every split into `dir` and write `matrix.toml` next to them.
pub fn prepare(dir: &Path, opts: &PrepareOptions) -> Result<Prepared, IoError> {
    let corpus = generate(&opts.desk)?;
    let pre = pretraining_corpus(opts.pretrain_utterances, PRETRAIN_SPEAKERS, opts.pretrain_seed)?;
    let v = &opts.voice;
    let prepared = Prepared {
        dir: dir.to_path_buf(),
        train: render(&corpus.train, dir, "train", v)?,
        dev: render(&corpus.dev, dir, "dev", v)?,
        test: render(&corpus.test, dir, "test", v)?,
        pretrain: render(&pre, dir, "pretrain", v)?,
        matrix: dir.join("matrix.toml"),
    };
    write_atomic(&prepared.matrix, DESK_MATRIX.as_bytes())?;
    Ok(prepared)
}

/// Low-resource comparison on the desk corpus: a tenth of the labelled
/// speech, with all training text available for the text model, joint
/// training and synthesis.
pub const DESK_MATRIX: &str = r#"seeds = [1, 2, 3]

[recovery]
low = "e2e@10"
full = "e2e@100"

[defaults]
pipeline = "e2e"

[defaults.data]
am_pretrain = { manifest = "pretrain.jsonl", seed = 7 }
lm = { manifest = "train.jsonl" }
t2i = { manifest = "train.jsonl" }
s2i = { manifest = "train.jsonl", fraction = 0.1 }
tts_source = { manifest = "train.jsonl" }
dev = { manifest = "dev.jsonl" }
test = { manifest = "test.jsonl" }

[defaults.model]
embedding_dim = 64

[defaults.model.encoder]
stack = 3
layers = 2
hidden_per_direction = 64
dropout = 0.1

[defaults.model.text]
layers = 2
heads = 4
width = 64
ffn_width = 256
max_len = 48
vocab_size = 1000

[defaults.train.am]
epochs = 8
batch_size = 16
optimizer = { learning_rate = 2e-3 }

[defaults.train.s2i.train]
epochs = 20
batch_size = 16
optimizer = { learning_rate = 1e-3 }

[defaults.train.mlm.train]
epochs = 5
batch_size = 32
optimizer = { learning_rate = 1e-3 }

[defaults.train.t2i]
epochs = 5
batch_size = 32
optimizer = { learning_rate = 1e-3 }

[defaults.train.joint]
mse_weight = 10.0
speech_lr = 1e-3
text_lr = 1e-4
train = { epochs = 20, batch_size = 16 }

[defaults.train.tts]
speakers = 10

[defaults.train.decode]
mode = "prefix_beam"
beam = 4
lm_weight = 0.3

[[experiment]]
name = "cascade"
pipeline = "cascade"

[[experiment]]
name = "e2e@10"

[[experiment]]
name = "joint@10"
pipeline = "e2e_joint"

[[experiment]]
name = "tts@10"
pipeline = "e2e_tts"
train.s2i.train.epochs = 8

[[experiment]]
name = "e2e@100"
data.s2i = { manifest = "train.jsonl", fraction = 1.0 }
train.s2i.train.epochs = 8
"#;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::parse_matrix;

    #[test]
    fn desk_matrix_parses_and_assigns_data() {
        let m = parse_matrix(DESK_MATRIX, Path::new("/d"), Path::new("matrix.toml")).unwrap();
        assert_eq!(m.seeds, [1, 2, 3]);
        let names: Vec<&str> = m.experiments.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["cascade", "e2e@10", "joint@10", "tts@10", "e2e@100"]);
        assert_eq!(m.experiments[1].data.s2i.as_ref().unwrap().fraction, 0.1);
        assert_eq!(m.experiments[4].data.s2i.as_ref().unwrap().fraction, 1.0);
        assert_eq!(m.experiments[3].train.s2i.train.epochs, 8);
        assert_eq!(m.experiments[2].train.joint.mse_weight, 10.0);
        assert_eq!(m.experiments[2].train.joint.train.batch_size, 16);
    }

    #[test]
    fn toy_prepare_writes_readable_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let opts = PrepareOptions {
            desk: DeskConfig {
                dev: 4,
                test: 4,
                ..DeskConfig::toy()
            },
            pretrain_utterances: 5,
            ..PrepareOptions::default()
        };
        let p = prepare(dir.path(), &opts).unwrap();
        let train = crate::io::read_manifest(&p.train).unwrap();
        assert_eq!(train.len(), 50);
        let r = &train.records()[0];
        let wav = crate::io::resolve(dir.path(), r.audio.as_ref().unwrap());
        let w = crate::io::read_wav(&wav).unwrap();
        assert!((w.duration_s() - r.duration_s).abs() < 1e-3);
        assert_eq!(crate::io::read_manifest(&p.pretrain).unwrap().len(), 5);
    }
}
