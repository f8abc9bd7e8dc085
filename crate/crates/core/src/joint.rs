//! Joint training of the speech branch with text embeddings: the acoustic
//! embedding is pulled toward the text embedding by an MSE term that only
//! reaches the speech side, and one shared classifier is trained on both.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::am::{AmError, Batch, SpeechExample, CTC_TAG, ENCODER_TAG};
use crate::autograd::{Graph, Var};
use crate::corpus::IntentVocabulary;
use crate::loss::ctc_min_frames;
use crate::nn::Adam;
use crate::rng::SeededRng;
use crate::s2i::{S2iError, S2iModel, CLASSIFIER_TAG, PROJECTION_TAG};
use crate::t2i::{T2iModel, TEXT_TAG};
use crate::tensor::Matrix;
use crate::train::{epoch_batches, EpochLog, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum JointError {
    #[error("acoustic embedding width {speech} differs from text embedding width {text}")]
    DimensionMismatch { speech: usize, text: usize },
    #[error("alpha and mse_weight must be nonnegative")]
    NegativeWeight,
    #[error("intent `{0}` is not in the shared classifier vocabulary")]
    UnknownIntent(String),
    #[error("no usable training pairs")]
    EmptyData,
    #[error(transparent)]
    S2i(#[from] S2iError),
}

impl From<AmError> for JointError {
    fn from(e: AmError) -> Self {
        Self::S2i(S2iError::Am(e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointTrainConfig {
    pub alpha: f32,
    pub mse_weight: f32,
    pub retain_ctc: bool,
    pub ctc_weight: f32,
    pub speech_lr: f32,
    pub text_lr: f32,
    pub train: TrainConfig,
}

impl Default for JointTrainConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            alpha: 1.0,
            mse_weight: 1.0,
            retain_ctc: true,
            ctc_weight: 1.0,
            speech_lr: train.optimizer.learning_rate,
            text_lr: train.optimizer.learning_rate,
            train,
        }
    }
}

impl JointTrainConfig {
    pub fn validate(&self) -> Result<(), JointError> {
        if self.alpha < 0.0 || self.mse_weight < 0.0 || self.ctc_weight < 0.0 {
            return Err(JointError::NegativeWeight);
        }
        Ok(())
    }
}

/// Loss terms of one step. `mse` is the unweighted embedding distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointLossBreakdown {
    pub step: usize,
    pub mse: f64,
    pub ce_ae: f64,
    pub ce_te: f64,
    pub alpha: f64,
    pub mse_weight: f64,
    pub ctc: Option<f64>,
    pub speech_branch_total: f64,
    pub text_branch_total: f64,
}

impl JointLossBreakdown {
    pub fn new(
        step: usize,
        mse: f64,
        ce_ae: f64,
        ce_te: f64,
        alpha: f64,
        mse_weight: f64,
        ctc: Option<f64>,
    ) -> Self {
        Self {
            step,
            mse,
            ce_ae,
            ce_te,
            alpha,
            mse_weight,
            ctc,
            speech_branch_total: mse_weight * mse + ce_ae + alpha * ce_te,
            text_branch_total: ce_ae + alpha * ce_te,
        }
    }
}

/// One training pair prepared for the graph.
pub struct JointItem {
    pub x: Matrix,
    pub tokens: Vec<usize>,
    pub intent: usize,
    pub ctc_target: Option<Vec<usize>>,
}

/// Graph nodes of the joint objective for one batch.
pub struct JointTerms {
    pub ae: Var,
    pub te: Var,
    pub mse: Var,
    pub ce_ae: Var,
    pub ce_te: Var,
    pub ctc: Option<Var>,
    pub total: Var,
}

/// Speech branch, text branch, and the classifier they share (held in
/// `speech.classifier`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointModel {
    pub speech: S2iModel,
    pub text: T2iModel,
    pub config: JointTrainConfig,
}

impl JointModel {
    /// Stitch the two models together; the shared head starts as the text
    /// model's classifier.
    pub fn new(
        s2i: &S2iModel,
        t2i: &T2iModel,
        config: &JointTrainConfig,
    ) -> Result<Self, JointError> {
        config.validate()?;
        let (speech_dim, text_dim) = (s2i.embedding_dim(), t2i.encoder.width());
        if speech_dim != text_dim {
            return Err(JointError::DimensionMismatch {
                speech: speech_dim,
                text: text_dim,
            });
        }
        if let Some(l) = s2i
            .classifier
            .vocab
            .labels()
            .iter()
            .find(|l| !t2i.classifier.vocab.contains(l))
        {
            return Err(JointError::UnknownIntent(l.clone()));
        }
        let mut speech = s2i.clone();
        speech.classifier = t2i.classifier.clone();
        Ok(Self {
            speech,
            text: t2i.clone(),
            config: config.clone(),
        })
    }

    pub fn shared_vocab(&self) -> &IntentVocabulary {
        &self.speech.classifier.vocab
    }

    /// The deployable speech-only model.
    pub fn deployable(&self) -> S2iModel {
        self.speech.clone()
    }

    pub fn prepare(&self, data: &[SpeechExample]) -> Result<(Vec<JointItem>, usize), JointError> {
        let mut items = Vec::with_capacity(data.len());
        let mut skipped = 0;
        for ex in data {
            if ex.transcript.trim().is_empty() {
                skipped += 1;
                continue;
            }
            let label = ex
                .intent
                .as_deref()
                .ok_or_else(|| JointError::UnknownIntent(String::new()))?;
            let intent = self
                .shared_vocab()
                .index_of(label)
                .ok_or_else(|| JointError::UnknownIntent(label.into()))?;
            let x = self.speech.encoder.prepare(&ex.features)?;
            let ctc_target = if self.config.retain_ctc && self.speech.ctc_head.is_some() {
                let t = self
                    .speech
                    .units
                    .encode(&ex.transcript, self.speech.lexicon.as_ref())
                    .map_err(AmError::from)?;
                (x.rows() >= ctc_min_frames(&t).max(1)).then_some(t)
            } else {
                None
            };
            items.push(JointItem {
                x,
                tokens: self.text.encoder.tokenize(&ex.transcript).0,
                intent,
                ctc_target,
            });
        }
        Ok((items, skipped))
    }

    /// Build the joint objective
    /// `mse_weight · MSE(AE, stop(TE)) + CE(AE) + α · CE(TE) [+ ctc_weight · CTC]`.
    pub fn terms(&self, g: &mut Graph, items: &[&JointItem]) -> Result<JointTerms, JointError> {
        let cfg = &self.config;
        let xs: Vec<&Matrix> = items.iter().map(|i| &i.x).collect();
        let batch = Batch::time_major(&xs);
        let f = self.speech.forward(g, &batch);
        let tokens: Vec<&[usize]> = items.iter().map(|i| i.tokens.as_slice()).collect();
        let te = self.text.embed_batch(g, &tokens);
        let te_stopped = g.detach(te);
        let mse = g.mse(f.embedding, te_stopped);
        let targets: Vec<usize> = items.iter().map(|i| i.intent).collect();
        let shared = &self.speech.classifier;
        let logits_ae = shared.forward(g, CLASSIFIER_TAG, f.embedding);
        let ce_ae = g.cross_entropy(logits_ae, &targets);
        let logits_te = shared.forward(g, CLASSIFIER_TAG, te);
        let ce_te = g.cross_entropy(logits_te, &targets);
        let mut sum = alloc::vec![(mse, cfg.mse_weight), (ce_ae, 1.0), (ce_te, cfg.alpha)];
        let mut ctc = None;
        if let (true, Some(head)) = (
            cfg.retain_ctc && cfg.ctc_weight > 0.0,
            &self.speech.ctc_head,
        ) {
            let keep: Vec<usize> = (0..items.len())
                .filter(|&b| items[b].ctc_target.is_some())
                .collect();
            if !keep.is_empty() {
                let lp = head.forward(g, f.hidden);
                let (lp, lengths) = if keep.len() == items.len() {
                    (lp, batch.lengths.clone())
                } else {
                    let rows = crate::s2i::sub_batch_rows(&batch.lengths, &keep);
                    (
                        g.gather(lp, &rows),
                        keep.iter().map(|&b| batch.lengths[b]).collect(),
                    )
                };
                let t: Vec<Vec<usize>> = keep
                    .iter()
                    .map(|&b| items[b].ctc_target.clone().unwrap_or_default())
                    .collect();
                let c = g
                    .ctc(lp, &lengths, &t, self.speech.units.blank())
                    .map_err(AmError::from)?;
                sum.push((c, cfg.ctc_weight * keep.len() as f32 / items.len() as f32));
                ctc = Some(c);
            }
        }
        let total = g.weighted_sum(&sum);
        Ok(JointTerms {
            ae: f.embedding,
            te,
            mse,
            ce_ae,
            ce_te,
            ctc,
            total,
        })
    }

    pub fn breakdown(&self, g: &Graph, t: &JointTerms, step: usize) -> JointLossBreakdown {
        let v = |x: Var| f64::from(g.value(x).item());
        JointLossBreakdown::new(
            step,
            v(t.mse),
            v(t.ce_ae),
            v(t.ce_te),
            f64::from(self.config.alpha),
            f64::from(self.config.mse_weight),
            t.ctc.map(v),
        )
    }

    /// Mean Euclidean distance between AE and TE over `data`.
    pub fn embedding_distance(&self, data: &[SpeechExample]) -> Result<f64, JointError> {
        let (items, _) = self.prepare(data)?;
        if items.is_empty() {
            return Err(JointError::EmptyData);
        }
        let mut total = 0.0;
        for chunk in items.chunks(32) {
            let refs: Vec<&JointItem> = chunk.iter().collect();
            let mut g = Graph::inference();
            let t = self.terms(&mut g, &refs)?;
            let (ae, te) = (g.value(t.ae), g.value(t.te));
            for r in 0..ae.rows() {
                let d: f64 = ae
                    .row(r)
                    .iter()
                    .zip(te.row(r))
                    .map(|(a, b)| {
                        let d = f64::from(a - b);
                        d * d
                    })
                    .sum();
                total += crate::math::sqrt(d);
            }
        }
        Ok(total / items.len() as f64)
    }
}

/// Optimizer state for both branches and the shared head.
pub struct JointOptimizer {
    encoder: Adam,
    projection: Adam,
    shared: Adam,
    ctc: Option<Adam>,
    text: Adam,
}

impl JointOptimizer {
    pub fn new(model: &JointModel) -> Self {
        let cfg = &model.config;
        let speech = crate::nn::AdamConfig {
            learning_rate: cfg.speech_lr,
            ..cfg.train.optimizer
        };
        let text = crate::nn::AdamConfig {
            learning_rate: cfg.text_lr,
            ..cfg.train.optimizer
        };
        Self {
            encoder: Adam::new(&model.speech.encoder.store, speech),
            projection: Adam::new(&model.speech.projection.store, speech),
            shared: Adam::new(&model.speech.classifier.store, speech),
            ctc: model
                .speech
                .ctc_head
                .as_ref()
                .map(|h| Adam::new(&h.store, speech)),
            text: Adam::new(&model.text.encoder.store, text),
        }
    }
}

/// One update of both branches and the shared classifier from one batch.
pub fn joint_step(
    model: &mut JointModel,
    opt: &mut JointOptimizer,
    items: &[&JointItem],
    step: usize,
    dropout_seed: u64,
) -> Result<JointLossBreakdown, JointError> {
    let mut g = Graph::new(true, dropout_seed);
    let terms = model.terms(&mut g, items)?;
    let breakdown = model.breakdown(&g, &terms, step);
    let mut grads = g.backward(terms.total);
    grads.clip_global_norm(model.config.train.clip_norm);
    opt.encoder
        .step(&mut model.speech.encoder.store, &grads, ENCODER_TAG);
    opt.projection
        .step(&mut model.speech.projection.store, &grads, PROJECTION_TAG);
    opt.shared
        .step(&mut model.speech.classifier.store, &grads, CLASSIFIER_TAG);
    if let (Some(o), Some(h)) = (opt.ctc.as_mut(), model.speech.ctc_head.as_mut()) {
        o.step(&mut h.store, &grads, CTC_TAG);
    }
    opt.text
        .step(&mut model.text.encoder.store, &grads, TEXT_TAG);
    model.text.classifier = model.speech.classifier.clone();
    Ok(breakdown)
}

/// Result of [`joint_train`]: the trained pair, per-step losses, and epoch logs.
pub struct JointOutcome {
    pub model: JointModel,
    pub steps: Vec<JointLossBreakdown>,
    pub report: TrainReport,
}

pub fn joint_train(
    speech_data: &[SpeechExample],
    heldout: &[SpeechExample],
    s2i: &S2iModel,
    t2i: &T2iModel,
    config: &JointTrainConfig,
) -> Result<JointOutcome, JointError> {
    joint_train_with(speech_data, heldout, s2i, t2i, config, &mut |_| {})
}

/// [`joint_train`] with a callback receiving every step's breakdown.
pub fn joint_train_with(
    speech_data: &[SpeechExample],
    heldout: &[SpeechExample],
    s2i: &S2iModel,
    t2i: &T2iModel,
    config: &JointTrainConfig,
    on_step: &mut dyn FnMut(&JointLossBreakdown),
) -> Result<JointOutcome, JointError> {
    let mut model = JointModel::new(s2i, t2i, config)?;
    let (items, skipped) = model.prepare(speech_data)?;
    if items.is_empty() && config.train.epochs > 0 {
        return Err(JointError::EmptyData);
    }
    let mut opt = JointOptimizer::new(&model);
    let tc = &config.train;
    let mut order_rng = SeededRng::derive(tc.seed, "joint-batches");
    let mut dropout_rng = SeededRng::derive(tc.seed, "joint-dropout");
    let lengths: Vec<usize> = items.iter().map(|i| i.x.rows()).collect();
    let mut steps = Vec::new();
    let mut report = TrainReport {
        skipped,
        ..TrainReport::default()
    };
    for epoch in 1..=tc.epochs {
        let mut total = 0.0;
        for idx in epoch_batches(&lengths, tc.batch_size, &mut order_rng) {
            let refs: Vec<&JointItem> = idx.iter().map(|&i| &items[i]).collect();
            let b = joint_step(
                &mut model,
                &mut opt,
                &refs,
                steps.len(),
                dropout_rng.next_u64(),
            )?;
            total += b.speech_branch_total * idx.len() as f64;
            on_step(&b);
            steps.push(b);
        }
        report.epochs.push(EpochLog {
            epoch,
            train_loss: total / items.len() as f64,
            heldout_loss: None,
            heldout_accuracy: crate::s2i::accuracy(&model.speech, heldout)?,
        });
    }
    Ok(JointOutcome {
        model,
        steps,
        report,
    })
}

/// Intent of one utterance from the speech branch alone.
pub fn infer(
    model: &S2iModel,
    features: &Matrix,
) -> Result<crate::s2i::IntentPrediction, JointError> {
    Ok(crate::s2i::classify_intent(model, features)?)
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::am::testutil::{render, small_config};
    use crate::am::{AcousticEncoder, UnitVocabulary};
    use crate::t2i::{Bpe, TextConfig, TextEncoder};

    pub fn pairs() -> Vec<SpeechExample> {
        [
            ("ab", "x"),
            ("ba", "y"),
            ("abc", "x"),
            ("cab", "z"),
            ("bb", "y"),
            ("ca", "z"),
        ]
        .iter()
        .enumerate()
        .map(|(i, (t, intent))| SpeechExample {
            id: alloc::format!("u{i}"),
            features: render(t),
            transcript: (*t).into(),
            intent: Some((*intent).into()),
        })
        .collect()
    }

    pub fn models() -> (S2iModel, T2iModel) {
        let vocab = IntentVocabulary::new(["x", "y", "z"]);
        let am = AcousticEncoder::new(&small_config(), UnitVocabulary::graphemes(), None, 1);
        let s2i = S2iModel::from_acoustic(&am, vocab.clone(), Some(16), 1);
        let texts: Vec<SpeechExample> = pairs();
        let bpe = Bpe::train(texts.iter().map(|p| p.transcript.as_str()), 100);
        let cfg = TextConfig {
            layers: 1,
            heads: 2,
            width: 16,
            ffn_width: 32,
            max_len: 16,
            vocab_size: 100,
            dropout: 0.0,
        };
        let t2i = T2iModel::new(TextEncoder::new(&cfg, bpe, 2).unwrap(), vocab, 2);
        (s2i, t2i)
    }
}
