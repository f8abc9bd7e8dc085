//! Stage execution with content-hash caching, and the five pipelines.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::Serialize;
use serde_json::json;
use slu_core::am::decode::{decode, DecodeConfig, DecodeMode};
use slu_core::am::ngram::{train_ngram_lm, CharNgram};
use slu_core::am::units::{Lexicon, UnitKind, UnitVocabulary};
use slu_core::am::{adapt_am, pretrain_am, AcousticEncoder, SpeechExample};
use slu_core::corpus::{subset, DatasetManifest, IntentVocabulary};
use slu_core::frontend::perturb;
use slu_core::joint::{joint_train_with, JointModel};
use slu_core::metrics::{intent_accuracy, wer};
use slu_core::s2i::{classify_intent, train_s2i_with, S2iModel};
use slu_core::t2i::bpe::Bpe;
use slu_core::t2i::{cascade_classify, intent_finetune, mlm_finetune, T2iModel, TextEncoder, TextExample};
use slu_core::tts::{merge_for_training, synthesize};
use slu_core::corpus::AudioRef;

use super::config::{DataSpec, ExperimentConfig, MatrixConfig, Pipeline};
use super::report::{Counts, Environment, MetricsReport, MetricsRow, RowStatus};
use crate::checkpoint::{self, Artifact};
use crate::io::{read_manifest, sha256_hex, write_atomic, write_manifest, write_tsv, FeatureStore};

/// Environment variable naming the cache directory.
pub const CACHE_ENV: &str = "SLU_CACHE_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    PretrainAm,
    AdaptAm,
    TrainLm,
    TrainT2i,
    Synth,
    TrainS2i,
    JointTrain,
    Eval,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainAm => "pretrain-am",
            Stage::AdaptAm => "adapt-am",
            Stage::TrainLm => "train-lm",
            Stage::TrainT2i => "train-t2i",
            Stage::Synth => "synth",
            Stage::TrainS2i => "train-s2i",
            Stage::JointTrain => "joint-train",
            Stage::Eval => "eval",
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("stage {stage}: {message}")]
pub struct StageError {
    pub stage: &'static str,
    pub message: String,
}

type StageResult<T> = Result<T, StageError>;

fn fail<E: ToString>(stage: Stage) -> impl Fn(E) -> StageError {
    move |e| StageError {
        stage: stage.name(),
        message: e.to_string(),
    }
}

/// Short content hash of a JSON value.
pub fn content_key(value: &serde_json::Value) -> String {
    sha256_hex(value.to_string().as_bytes())[..20].to_string()
}

/// Hash of the full experiment configuration.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    content_key(&serde_json::to_value(cfg).expect("config serializes"))
}

/// Runs experiments against a cache directory.
pub struct Runner {
    pub cache_dir: PathBuf,
}

impl Runner {
    pub fn new(cache_dir: impl Into<PathBuf>) -> Self {
        Self { cache_dir: cache_dir.into() }
    }

    /// `$SLU_CACHE_DIR`, else `fallback`.
    pub fn from_env(fallback: &Path) -> Self {
        Self::new(std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| fallback.to_path_buf()))
    }

    pub fn run_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.cache_dir.join("runs").join(format!("{}-seed{}", sanitize(&cfg.name), cfg.seed))
    }

    /// Run every stage of one experiment. Failures become a failed row.
    pub fn run_experiment(&self, cfg: &ExperimentConfig) -> MetricsRow {
        let start = Instant::now();
        let mut row = MetricsRow {
            name: cfg.name.clone(),
            pipeline: cfg.pipeline,
            seed: cfg.seed,
            config_hash: config_hash(cfg),
            status: RowStatus::Ok,
            wer: None,
            intent_accuracy: None,
            counts: Counts::default(),
            synthetic_wer: None,
            elapsed_s: 0.0,
        };
        let result = cfg
            .validate()
            .map_err(fail(Stage::Eval))
            .and_then(|_| Experiment::new(self, cfg).evaluate());
        match result {
            Ok(e) => {
                row.wer = e.wer;
                row.intent_accuracy = Some(e.accuracy);
                row.counts = e.counts;
                row.synthetic_wer = e.synthetic_wer;
            }
            Err(e) => {
                warn!("{} (seed {}) failed: {e}", cfg.name, cfg.seed);
                row.status = RowStatus::Failed {
                    stage: e.stage.into(),
                    message: e.message,
                };
            }
        }
        row.elapsed_s = start.elapsed().as_secs_f64();
        let _ = write_atomic(&self.run_dir(cfg).join("row.json"), serde_json::to_string_pretty(&row).unwrap().as_bytes());
        row
    }

    /// Every experiment once per seed, in order.
    pub fn run_matrix(&self, matrix: &MatrixConfig) -> MetricsReport {
        let mut rows = Vec::new();
        for &seed in &matrix.seeds {
            for e in &matrix.experiments {
                let cfg = ExperimentConfig { seed, ..e.clone() };
                info!("running {} seed {seed}", cfg.name);
                rows.push(self.run_experiment(&cfg));
            }
        }
        MetricsReport {
            rows,
            environment: Environment::current(matrix.seeds.clone()),
            recovery: matrix.recovery.clone(),
        }
    }

    /// Run the stages `stage` depends on, then `stage` itself; returns the
    /// artifact path.
    pub fn run_stage(&self, cfg: &ExperimentConfig, stage: Stage) -> StageResult<PathBuf> {
        cfg.validate().map_err(fail(stage))?;
        let x = Experiment::new(self, cfg);
        let key = match stage {
            Stage::PretrainAm => x.pretrained_am()?.1,
            Stage::AdaptAm => x.acoustic_model()?.1,
            Stage::TrainLm => x.lm()?.1,
            Stage::TrainT2i => x.t2i()?.1,
            Stage::Synth => return Ok(x.synth()?.dir.join("manifest.jsonl")),
            Stage::TrainS2i => x.s2i()?.1,
            Stage::JointTrain => x.joint()?.1,
            Stage::Eval => {
                x.evaluate()?;
                return Ok(self.run_dir(cfg).join("predictions.tsv"));
            }
        };
        Ok(x.artifact_path(stage, &key))
    }
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.@".contains(c) { c } else { '_' }).collect()
}

struct Loaded {
    manifest: DatasetManifest,
    base: PathBuf,
    key: String,
}

struct Synthetic {
    manifest: DatasetManifest,
    dir: PathBuf,
    dropped: usize,
    key: String,
}

#[derive(Serialize, serde::Deserialize)]
struct Evaluation {
    wer: Option<f64>,
    accuracy: f64,
    counts: Counts,
    synthetic_wer: Option<f64>,
}

/// Speech examples with the manifest directory each was read from.
type Speech = Vec<SpeechExample>;

struct Experiment<'a> {
    runner: &'a Runner,
    cfg: &'a ExperimentConfig,
    features: FeatureStore,
}

impl<'a> Experiment<'a> {
    fn new(runner: &'a Runner, cfg: &'a ExperimentConfig) -> Self {
        Self {
            runner,
            cfg,
            features: FeatureStore::new(Some(runner.cache_dir.clone()), cfg.model.features.clone()),
        }
    }

    fn stage_dir(&self, stage: Stage, key: &str) -> PathBuf {
        self.runner.cache_dir.join("stages").join(format!("{}-{key}", stage.name()))
    }

    fn artifact_path(&self, stage: Stage, key: &str) -> PathBuf {
        self.stage_dir(stage, key).join("model.json")
    }

    fn seed_for(&self, spec: &DataSpec) -> u64 {
        spec.seed.unwrap_or(self.cfg.seed)
    }

    fn load(&self, stage: Stage, spec: &DataSpec) -> StageResult<Loaded> {
        let bytes = std::fs::read(&spec.manifest).map_err(|e| fail(stage)(format!("{}: {e}", spec.manifest.display())))?;
        let manifest = read_manifest(&spec.manifest).map_err(fail(stage))?;
        let seed = self.seed_for(spec);
        let manifest = if spec.fraction < 1.0 {
            subset(&manifest, spec.fraction, seed).map_err(fail(stage))?
        } else {
            manifest
        };
        let key = content_key(&json!([sha256_hex(&bytes), spec.fraction, if spec.fraction < 1.0 { Some(seed) } else { None }]));
        Ok(Loaded {
            manifest,
            base: spec.manifest.parent().unwrap_or(Path::new(".")).to_path_buf(),
            key,
        })
    }

    fn speech(&self, stage: Stage, manifest: &DatasetManifest, base: &Path) -> StageResult<Speech> {
        manifest
            .records()
            .iter()
            .map(|r| {
                Ok(SpeechExample {
                    id: r.id.clone(),
                    features: self.features.features(base, r).map_err(fail(stage))?,
                    transcript: r.transcript.clone(),
                    intent: r.single_intent().map(str::to_string),
                })
            })
            .collect()
    }

    fn texts(manifest: &DatasetManifest) -> Vec<TextExample> {
        manifest
            .records()
            .iter()
            .map(|r| TextExample {
                id: r.id.clone(),
                text: r.transcript.clone(),
                intent: r.single_intent().map(str::to_string),
            })
            .collect()
    }

    fn dev(&self, stage: Stage) -> StageResult<(Speech, String)> {
        match &self.cfg.data.dev {
            None => Ok((Vec::new(), String::new())),
            Some(spec) => {
                let l = self.load(stage, spec)?;
                Ok((self.speech(stage, &l.manifest, &l.base)?, l.key))
            }
        }
    }

    /// Load a cached artifact or build and store it.
    fn cached<T: Artifact>(
        &self,
        stage: Stage,
        material: serde_json::Value,
        build: impl FnOnce(&Path) -> StageResult<T>,
    ) -> StageResult<(T, String)> {
        let key = content_key(&json!([stage.name(), material]));
        let path = self.artifact_path(stage, &key);
        if path.exists() {
            match checkpoint::load::<T>(&path) {
                Ok((m, _)) => {
                    info!("{} served from cache ({key})", stage.name());
                    return Ok((m, key));
                }
                Err(e) => warn!("ignoring unreadable cache entry: {e}"),
            }
        }
        let dir = self.stage_dir(stage, &key);
        std::fs::create_dir_all(&dir).map_err(fail(stage))?;
        let start = Instant::now();
        let model = build(&dir)?;
        info!("{} built in {:.1}s ({key})", stage.name(), start.elapsed().as_secs_f64());
        checkpoint::save(&path, &model, &config_hash(self.cfg)).map_err(fail(stage))?;
        Ok((model, key))
    }

    fn units(&self) -> (UnitVocabulary, Option<Lexicon>) {
        match self.cfg.model.units {
            UnitKind::Grapheme => (UnitVocabulary::graphemes(), None),
            UnitKind::Phone => (UnitVocabulary::phones(), Some(Lexicon::bundled())),
        }
    }

    fn pretrained_am(&self) -> StageResult<(AcousticEncoder, String)> {
        const S: Stage = Stage::PretrainAm;
        let d = &self.cfg.data;
        if let Some(p) = &d.am_checkpoint {
            let bytes = std::fs::read(p).map_err(fail(S))?;
            let (am, _) = checkpoint::load::<AcousticEncoder>(p).map_err(fail(S))?;
            return Ok((am, content_key(&json!(["checkpoint", sha256_hex(&bytes)]))));
        }
        let spec = d.am_pretrain.as_ref().expect("validated");
        let data = self.load(S, spec)?;
        let (dev, dev_key) = self.dev(S)?;
        let m = &self.cfg.model;
        let mut tc = self.cfg.train.am.clone();
        tc.seed = self.seed_for(spec);
        let material = json!([data.key, dev_key, m.features, m.units, m.encoder, tc]);
        self.cached(S, material, |dir| {
            let train = self.speech(S, &data.manifest, &data.base)?;
            let (units, lexicon) = self.units();
            let (am, report) = pretrain_am(&train, &dev, units, lexicon, &m.encoder, &tc).map_err(fail(S))?;
            if report.skipped > 0 {
                warn!("pretrain-am skipped {} utterances with infeasible targets", report.skipped);
            }
            write_json(&dir.join("report.json"), &report).map_err(fail(S))?;
            Ok(am)
        })
    }

    /// The pretrained model, adapted on in-domain speech when configured.
    fn acoustic_model(&self) -> StageResult<(AcousticEncoder, String)> {
        const S: Stage = Stage::AdaptAm;
        let (base, base_key) = self.pretrained_am()?;
        let Some(spec) = &self.cfg.data.am_adapt else {
            return Ok((base, base_key));
        };
        let data = self.load(S, spec)?;
        let (dev, dev_key) = self.dev(S)?;
        let t = &self.cfg.train;
        let mut tc = t.adapt.clone();
        tc.seed = self.seed_for(spec);
        let material = json!([base_key, data.key, dev_key, t.perturbation, tc]);
        self.cached(S, material, |dir| {
            let domain = perturb(&data.manifest, &t.perturbation).map_err(fail(S))?;
            let domain = self.speech(S, &domain, &data.base)?;
            let units = base.units.clone();
            let (am, report) = adapt_am(&base, &units, &domain, &dev, &tc).map_err(fail(S))?;
            write_json(&dir.join("report.json"), &report).map_err(fail(S))?;
            Ok(am)
        })
    }

    fn lm(&self) -> StageResult<(CharNgram, String)> {
        const S: Stage = Stage::TrainLm;
        let spec = self.cfg.data.lm.as_ref().ok_or_else(|| fail(S)("no data.lm"))?;
        let data = self.load(S, spec)?;
        let order = self.cfg.model.lm_order;
        self.cached(S, json!([data.key, order]), |_| {
            train_ngram_lm(data.manifest.records().iter().map(|r| r.transcript.as_str()), order).map_err(fail(S))
        })
    }

    fn t2i(&self) -> StageResult<(T2iModel, String)> {
        const S: Stage = Stage::TrainT2i;
        let spec = self.cfg.data.t2i.as_ref().ok_or_else(|| fail(S)("no data.t2i"))?;
        let data = self.load(S, spec)?;
        data.manifest.require_single_intent().map_err(fail(S))?;
        let dev_key = self.cfg.data.dev.as_ref().map(|d| self.load(S, d).map(|l| l.key)).transpose()?;
        let seed = self.seed_for(spec);
        let t = &self.cfg.train;
        let mut mlm = t.mlm.clone();
        mlm.train.seed = seed;
        let mut ic = t.t2i.clone();
        ic.seed = seed;
        let material = json!([data.key, dev_key, self.cfg.model.text, mlm, ic]);
        self.cached(S, material, |dir| {
            let text = Self::texts(&data.manifest);
            let dev = match &self.cfg.data.dev {
                Some(d) => Self::texts(&self.load(S, d)?.manifest),
                None => Vec::new(),
            };
            let tc = &self.cfg.model.text;
            let bpe = Bpe::train(text.iter().map(|e| e.text.as_str()), tc.vocab_size);
            std::fs::write(dir.join("vocab.txt"), bpe.vocab_file()).map_err(fail(S))?;
            let enc = TextEncoder::new(tc, bpe, seed).map_err(fail(S))?;
            let (enc, _, mlm_report) = mlm_finetune(&enc, &text, &dev, &mlm).map_err(fail(S))?;
            let vocab = data.manifest.intent_vocab().clone();
            let (model, report) = intent_finetune(&enc, &text, &dev, &vocab, &ic).map_err(fail(S))?;
            write_json(&dir.join("report.json"), &json!({"mlm": mlm_report, "intent": report})).map_err(fail(S))?;
            Ok(model)
        })
    }

    /// Synthetic speech for the TTS source text, stored in the stage directory.
    fn synth(&self) -> StageResult<Synthetic> {
        const S: Stage = Stage::Synth;
        let spec = self.cfg.data.tts_source.as_ref().ok_or_else(|| fail(S)("no data.tts_source"))?;
        let data = self.load(S, spec)?;
        let tts = &self.cfg.train.tts;
        let seed = self.seed_for(spec);
        let key = content_key(&json!([S.name(), data.key, tts.backend, tts.speakers, seed]));
        let dir = self.stage_dir(S, &key);
        let manifest_path = dir.join("manifest.jsonl");
        let outcome_path = dir.join("outcome.json");
        if let (Ok(m), Ok(o)) = (read_manifest(&manifest_path), std::fs::read_to_string(&outcome_path)) {
            let dropped = serde_json::from_str::<serde_json::Value>(&o).ok().and_then(|v| v["dropped"].as_u64()).unwrap_or(0);
            info!("synth served from cache ({key})");
            return Ok(Synthetic { manifest: m, dir, dropped: dropped as usize, key });
        }
        let pool = slu_core::desk::tts_speakers(tts.speakers);
        let mut synth = tts.backend.synthesizer(dir.join("work"));
        let wav_dir = dir.join("wav");
        let mut store = |req: &slu_core::tts::SynthesisRequest, w: &slu_core::frontend::dsp::Waveform| {
            crate::io::write_wav(&wav_dir.join(format!("{}.wav", req.id)), w).map_err(|e| e.to_string())?;
            Ok(AudioRef::new(format!("wav/{}.wav", req.id)))
        };
        let out = synthesize(&data.manifest, synth.as_mut(), &pool, seed, &mut store).map_err(fail(S))?;
        if !out.dropped.is_empty() {
            warn!("synthesis dropped {} of {} records", out.dropped.len(), data.manifest.len());
        }
        write_manifest(&manifest_path, &out.manifest).map_err(fail(S))?;
        write_json(&outcome_path, &json!({"dropped": out.dropped.len(), "failures": out.dropped, "job": out.job})).map_err(fail(S))?;
        Ok(Synthetic {
            manifest: out.manifest,
            dir,
            dropped: out.dropped.len(),
            key,
        })
    }

    /// S2I training data: the speech subset, plus synthetic speech for TTS
    /// pipelines. Returns examples, a content key, and counts.
    fn s2i_data(&self, stage: Stage) -> StageResult<(Speech, String, Counts)> {
        let spec = self.cfg.data.s2i.as_ref().ok_or_else(|| fail(stage)("no data.s2i"))?;
        let real = self.load(stage, spec)?;
        real.manifest.require_single_intent().map_err(fail(stage))?;
        let mut counts = Counts {
            train_speech: real.manifest.len(),
            ..Counts::default()
        };
        if !self.cfg.pipeline.uses_tts() {
            let x = self.speech(stage, &real.manifest, &real.base)?;
            return Ok((x, real.key, counts));
        }
        let syn = self.synth()?;
        counts.synthetic = syn.manifest.len();
        counts.dropped_synthetic = syn.dropped;
        merge_for_training(&real.manifest, &syn.manifest).map_err(fail(stage))?;
        let perturbed = |m: &DatasetManifest| -> StageResult<DatasetManifest> {
            if self.cfg.train.tts.perturb {
                perturb(m, &self.cfg.train.perturbation).map_err(fail(stage))
            } else {
                Ok(m.clone())
            }
        };
        let mut x = self.speech(stage, &perturbed(&real.manifest)?, &real.base)?;
        x.extend(self.speech(stage, &perturbed(&syn.manifest)?, &syn.dir)?);
        let key = content_key(&json!([real.key, syn.key, self.cfg.train.tts.perturb, self.cfg.train.perturbation]));
        Ok((x, key, counts))
    }

    fn s2i(&self) -> StageResult<(S2iModel, String)> {
        const S: Stage = Stage::TrainS2i;
        let (am, am_key) = self.acoustic_model()?;
        let (train, data_key, _) = self.s2i_data(S)?;
        let (dev, dev_key) = self.dev(S)?;
        let mut mt = self.cfg.train.s2i.clone();
        mt.train.seed = self.cfg.data.s2i.as_ref().map_or(self.cfg.seed, |s| self.seed_for(s));
        if mt.embedding_dim.is_none() {
            mt.embedding_dim = self.cfg.model.embedding_dim;
        }
        let material = json!([am_key, data_key, dev_key, mt]);
        self.cached(S, material, |dir| {
            let vocab = IntentVocabulary::new(train.iter().filter_map(|e| e.intent.clone()));
            let dev = scorable(dev, &vocab);
            let last = dir.join("last-epoch.json");
            let mut log = Vec::new();
            let mut on_epoch = |e: &slu_core::train::EpochLog, m: &S2iModel| {
                info!("train-s2i epoch {} loss {:.4} dev acc {:?}", e.epoch, e.train_loss, e.heldout_accuracy);
                log.push(e.clone());
                if let Err(err) = checkpoint::save(&last, m, "") {
                    warn!("could not write epoch checkpoint: {err}");
                }
            };
            let (model, report) = train_s2i_with(&am, &train, &dev, &vocab, &mt, &mut on_epoch).map_err(fail(S))?;
            write_json(&dir.join("report.json"), &report).map_err(fail(S))?;
            Ok(model)
        })
    }

    fn joint(&self) -> StageResult<(JointModel, String)> {
        const S: Stage = Stage::JointTrain;
        let (s2i, s2i_key) = self.s2i()?;
        let (t2i, t2i_key) = self.t2i()?;
        let (data, data_key) = match &self.cfg.data.joint {
            Some(spec) => {
                let l = self.load(S, spec)?;
                (self.speech(S, &l.manifest, &l.base)?, l.key)
            }
            None => {
                let (x, k, _) = self.s2i_data(S)?;
                (x, k)
            }
        };
        let (dev, dev_key) = self.dev(S)?;
        let mut jc = self.cfg.train.joint.clone();
        jc.train.seed = self.cfg.seed;
        let material = json!([s2i_key, t2i_key, data_key, dev_key, jc]);
        self.cached(S, material, |dir| {
            let dev = scorable(dev, &s2i.classifier.vocab);
            let mut lines = Vec::new();
            let mut on_step = |b: &slu_core::joint::JointLossBreakdown| {
                lines.extend(serde_json::to_vec(b).expect("breakdown serializes"));
                lines.push(b'\n');
            };
            let out = joint_train_with(&data, &dev, &s2i, &t2i, &jc, &mut on_step).map_err(fail(S))?;
            write_atomic(&dir.join("loss_breakdown.jsonl"), &lines).map_err(fail(S))?;
            write_json(&dir.join("report.json"), &out.report).map_err(fail(S))?;
            Ok(out.model)
        })
    }

    /// Test-set metrics of the deployable model; cached by model and data.
    fn evaluate(&self) -> StageResult<Evaluation> {
        const S: Stage = Stage::Eval;
        let spec = self.cfg.data.test.as_ref().expect("validated");
        let test = self.load(S, spec)?;
        let run_dir = self.runner.run_dir(self.cfg);
        let _ = write_atomic(&run_dir.join("config.json"), serde_json::to_string_pretty(self.cfg).unwrap().as_bytes());

        let mut counts = Counts::default();
        let (model_key, predict): (String, Box<dyn Fn(&SpeechExample) -> StageResult<(String, f64, Option<Vec<String>>)> + '_>) =
            match self.cfg.pipeline {
                Pipeline::Cascade => {
                    let (am, am_key) = self.acoustic_model()?;
                    let (lm, lm_key) = self.lm()?;
                    let (t2i, t2i_key) = self.t2i()?;
                    let dc: DecodeConfig = self.cfg.train.decode.clone();
                    counts.train_text = self.load(S, self.cfg.data.t2i.as_ref().expect("validated"))?.manifest.len();
                    let key = content_key(&json!([am_key, lm_key, t2i_key, dc]));
                    (
                        key,
                        Box::new(move |ex: &SpeechExample| {
                            let words = decode(&am, &ex.features, &dc, Some(&lm)).map_err(fail(S))?;
                            let p = cascade_classify(&words, &t2i);
                            Ok((p.label, p.probability, Some(words)))
                        }),
                    )
                }
                p => {
                    let (_, _, c) = self.s2i_data(S)?;
                    counts = c;
                    let (model, key) = if p.uses_joint() {
                        counts.train_text = self.load(S, self.cfg.data.t2i.as_ref().expect("validated"))?.manifest.len();
                        let (j, k) = self.joint()?;
                        (j.deployable(), k)
                    } else {
                        self.s2i()?
                    };
                    (
                        key,
                        Box::new(move |ex: &SpeechExample| {
                            let p = classify_intent(&model, &ex.features).map_err(fail(S))?;
                            Ok((p.label, p.probability, None))
                        }),
                    )
                }
            };
        let eval_key = content_key(&json!([model_key, test.key]));
        let cached = self.runner.cache_dir.join("stages").join(format!("eval-{eval_key}.json"));
        let saved = std::fs::read(&cached).ok().and_then(|b| serde_json::from_slice::<Evaluation>(&b).ok());
        let mut eval = match saved {
            Some(e) => {
                info!("eval served from cache ({eval_key})");
                e
            }
            None => {
                let mut preds = BTreeMap::new();
                let mut rows = Vec::new();
                let mut hyps = Vec::new();
                for ex in self.speech(S, &test.manifest, &test.base)? {
                    let (label, prob, words) = predict(&ex)?;
                    rows.push(vec![ex.id.clone(), label.clone(), format!("{prob:.6}")]);
                    if let Some(w) = words {
                        hyps.push((ex.id.clone(), w.join(" ")));
                    }
                    preds.insert(ex.id, label);
                }
                write_tsv(&self.runner.cache_dir.join("stages").join(format!("eval-{eval_key}.tsv")), rows).map_err(fail(S))?;
                let vocab = self.training_vocab()?;
                let acc = intent_accuracy(&test.manifest, &preds, &vocab).map_err(fail(S))?;
                let word_error = if hyps.is_empty() {
                    None
                } else {
                    let refs: Vec<(String, String)> = test.manifest.records().iter().map(|r| (r.id.clone(), r.transcript.clone())).collect();
                    write_tsv(&run_dir.join("decode.tsv"), hyps.iter().map(|(i, w)| vec![i.clone(), w.clone()])).map_err(fail(S))?;
                    Some(wer(&refs, &hyps).map_err(fail(S))?.wer)
                };
                let e = Evaluation {
                    wer: word_error,
                    accuracy: acc.accuracy,
                    counts: Counts {
                        test: acc.total,
                        correct: acc.correct,
                        unscorable: acc.unscorable,
                        missing_predictions: acc.missing_predictions,
                        ..Counts::default()
                    },
                    synthetic_wer: self.synthetic_wer()?,
                };
                write_json(&cached, &e).map_err(fail(S))?;
                e
            }
        };
        eval.counts = Counts {
            train_speech: counts.train_speech,
            train_text: counts.train_text,
            synthetic: counts.synthetic,
            dropped_synthetic: counts.dropped_synthetic,
            ..eval.counts
        };
        let tsv = self.runner.cache_dir.join("stages").join(format!("eval-{eval_key}.tsv"));
        if let Ok(bytes) = std::fs::read(&tsv) {
            let _ = write_atomic(&run_dir.join("predictions.tsv"), &bytes);
        }
        Ok(eval)
    }

    fn training_vocab(&self) -> StageResult<IntentVocabulary> {
        const S: Stage = Stage::Eval;
        Ok(match self.cfg.pipeline {
            Pipeline::Cascade => self.t2i()?.0.classifier.vocab,
            p if p.uses_joint() => self.joint()?.0.speech.classifier.vocab,
            _ => self.s2i().map_err(fail(S))?.0.classifier.vocab,
        })
    }

    /// Greedy decode WER of the acoustic model on up to 100 synthetic
    /// utterances; a diagnostic only.
    fn synthetic_wer(&self) -> StageResult<Option<f64>> {
        const S: Stage = Stage::Eval;
        if !self.cfg.pipeline.uses_tts() || self.cfg.model.units != UnitKind::Grapheme {
            return Ok(None);
        }
        let syn = self.synth()?;
        let sample = DatasetManifest::new("sample", syn.manifest.records().iter().take(100).cloned().collect()).map_err(fail(S))?;
        let (am, _) = self.acoustic_model()?;
        let dc = DecodeConfig {
            mode: DecodeMode::Greedy,
            ..DecodeConfig::default()
        };
        let mut refs = Vec::new();
        let mut hyps = Vec::new();
        for ex in self.speech(S, &sample, &syn.dir)? {
            hyps.push((ex.id.clone(), decode(&am, &ex.features, &dc, None).map_err(fail(S))?.join(" ")));
            refs.push((ex.id, ex.transcript));
        }
        if refs.is_empty() {
            return Ok(None);
        }
        Ok(Some(wer(&refs, &hyps).map_err(fail(S))?.wer))
    }
}

/// Held-out examples whose intent the classifier can predict.
fn scorable(examples: Speech, vocab: &IntentVocabulary) -> Speech {
    examples
        .into_iter()
        .filter(|e| e.intent.as_deref().is_some_and(|i| vocab.contains(i)))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), crate::io::IoError> {
    write_atomic(path, serde_json::to_string_pretty(value).expect("serializable").as_bytes())
}
