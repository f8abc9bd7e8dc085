//! Synthesizer backends that touch the filesystem or spawn processes.

use std::path::PathBuf;
use std::process::Command;

use serde::{Deserialize, Serialize};
use slu_core::frontend::dsp::Waveform;
use slu_core::tts::{StubVoice, SynthesisRequest, Synthesizer};

use crate::io::{read_wav, write_atomic};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TtsBackend {
    /// Invoked as `<program> <args...> <requests.tsv> <out_dir>`.
    ExternalCommand { program: String, #[serde(default)] args: Vec<String> },
    PreSynthesizedDir { dir: PathBuf },
    DeterministicStub { #[serde(default)] seed: u64 },
}

impl Default for TtsBackend {
    fn default() -> Self {
        TtsBackend::DeterministicStub { seed: 0 }
    }
}

impl TtsBackend {
    /// `work_dir` receives the request file and output directory of an
    /// external command.
    pub fn synthesizer(&self, work_dir: PathBuf) -> Box<dyn Synthesizer> {
        match self {
            TtsBackend::ExternalCommand { program, args } => Box::new(ExternalCommand {
                program: program.clone(),
                args: args.clone(),
                work_dir,
            }),
            TtsBackend::PreSynthesizedDir { dir } => Box::new(PreSynthesizedDir { dir: dir.clone() }),
            TtsBackend::DeterministicStub { seed } => Box::new(StubVoice { seed: *seed, ..StubVoice::default() }),
        }
    }
}

pub struct ExternalCommand {
    pub program: String,
    pub args: Vec<String>,
    pub work_dir: PathBuf,
}

impl Synthesizer for ExternalCommand {
    fn synthesize(&mut self, requests: &[SynthesisRequest]) -> Vec<Result<Waveform, String>> {
        let fail = |msg: String| requests.iter().map(|_| Err(msg.clone())).collect();
        let input = self.work_dir.join("requests.tsv");
        let out_dir = self.work_dir.join("wav");
        let lines: String = requests
            .iter()
            .map(|r| format!("{}\t{}\t{}\n", r.id, r.speaker, r.text.replace(['\t', '\n'], " ")))
            .collect();
        if let Err(e) = write_atomic(&input, lines.as_bytes()).and_then(|_| {
            std::fs::create_dir_all(&out_dir).map_err(|source| crate::io::IoError::File { path: out_dir.clone(), source })
        }) {
            return fail(e.to_string());
        }
        match Command::new(&self.program).args(&self.args).arg(&input).arg(&out_dir).status() {
            Ok(s) if s.success() => PreSynthesizedDir { dir: out_dir }.synthesize(requests),
            Ok(s) => fail(format!("{} exited with {s}", self.program)),
            Err(e) => fail(format!("{}: {e}", self.program)),
        }
    }
}

/// `<dir>/<id>.wav` for every request.
pub struct PreSynthesizedDir {
    pub dir: PathBuf,
}

impl Synthesizer for PreSynthesizedDir {
    fn synthesize(&mut self, requests: &[SynthesisRequest]) -> Vec<Result<Waveform, String>> {
        requests
            .iter()
            .map(|r| read_wav(&self.dir.join(format!("{}.wav", r.id))).map_err(|e| e.to_string()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::write_wav;

    fn req(id: &str) -> SynthesisRequest {
        SynthesisRequest { id: id.into(), text: "pay my bill".into(), speaker: "tts-000".into() }
    }

    #[test]
    fn pre_synthesized_matches_by_id() {
        let dir = tempfile::tempdir().unwrap();
        write_wav(&dir.path().join("a.wav"), &Waveform::new(16000, vec![0.25; 320])).unwrap();
        let out = PreSynthesizedDir { dir: dir.path().into() }.synthesize(&[req("a"), req("b")]);
        assert_eq!(out[0].as_ref().unwrap().sample_rate, 16000);
        assert!(out[1].is_err());
    }

    #[cfg(unix)]
    #[test]
    fn external_command_protocol() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src.wav");
        write_wav(&src, &Waveform::new(8000, vec![0.1; 400])).unwrap();
        // Copies one prepared file to `<id>.wav` for every request line.
        let script = format!("while IFS=\"$(printf '\\t')\" read id spk text; do cp {} \"$2/$id.wav\"; done < \"$1\"", src.display());
        let backend = TtsBackend::ExternalCommand { program: "sh".into(), args: vec!["-c".into(), script, "tts".into()] };
        let out = backend.synthesizer(dir.path().join("work")).synthesize(&[req("x"), req("y")]);
        assert!(out.iter().all(|r| r.as_ref().map(|w| w.samples.len()) == Ok(400)));

        let failing = TtsBackend::ExternalCommand { program: "false".into(), args: vec![] };
        let out = failing.synthesizer(dir.path().join("work2")).synthesize(&[req("x")]);
        assert!(out[0].as_ref().unwrap_err().contains("exited"));
    }
}
