//! Speech-to-intent: mean-pooled acoustic embedding, dimension-matching
//! projection, intent classifier, and multi-task CTC + intent training.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::am::decode::argmax;
use crate::am::{
    AcousticEncoder, AmError, Batch, CtcHead, Lexicon, RecurrentEncoder, SpeechExample,
    UnitVocabulary,
};
use crate::am::{CTC_TAG, ENCODER_TAG};
use crate::autograd::{Graph, Var};
use crate::corpus::IntentVocabulary;
use crate::loss::ctc_min_frames;
use crate::math::{exp, log_sum_exp};
use crate::nn::{normal_init, xavier, Adam, Linear, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Matrix;
use crate::train::{epoch_batches, eval_batches, EpochLog, TrainConfig, TrainReport};

pub const PROJECTION_TAG: u8 = 2;
pub const CLASSIFIER_TAG: u8 = 3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum S2iError {
    #[error("cannot pool an empty sequence")]
    EmptySequence,
    #[error("utterance `{id}` has {count} intents; training needs exactly one")]
    NotSingleIntent { id: String, count: usize },
    #[error("intent `{0}` is not in the classifier vocabulary")]
    UnknownIntent(String),
    #[error("ctc_weight and intent_weight must be nonnegative and not both zero")]
    BadWeights,
    #[error("embedding dimension {got} does not match {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("no training data")]
    EmptyData,
    #[error(transparent)]
    Am(#[from] AmError),
}

/// Time-mean of `T × H` hidden states.
pub fn pool_embedding(hidden: &Matrix) -> Result<Vec<f32>, S2iError> {
    if hidden.rows() == 0 {
        return Err(S2iError::EmptySequence);
    }
    let mut out = alloc::vec![0.0f32; hidden.cols()];
    let inv = 1.0 / hidden.rows() as f32;
    for t in 0..hidden.rows() {
        crate::tensor::axpy(inv, hidden.row(t), &mut out);
    }
    Ok(out)
}

/// Fixed-size utterance vector from the speech branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcousticEmbedding {
    pub vector: Vec<f32>,
    pub utterance_id: String,
}

/// Linear map from encoder width to the embedding width shared with text,
/// initialized close to the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub store: ParamStore,
    linear: Linear,
}

impl Projection {
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = SeededRng::derive(seed, "projection-init");
        let mut store = ParamStore::new();
        let linear = if input_dim == output_dim {
            Linear::near_identity(&mut store, "proj", input_dim, &mut rng)
        } else {
            let mut w = normal_init(&mut rng, input_dim, output_dim, 0.01);
            for i in 0..input_dim.min(output_dim) {
                w.set(i, i, w.get(i, i) + 1.0);
            }
            let weight = store.add("proj.weight", w);
            let bias = store.add("proj.bias", Matrix::zeros(1, output_dim));
            Linear {
                weight,
                bias,
                input_dim,
                output_dim,
            }
        };
        Self { store, linear }
    }

    pub fn output_dim(&self) -> usize {
        self.linear.output_dim
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        self.linear.forward(g, self.store.bind(PROJECTION_TAG), x)
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        self.linear.apply(&self.store, x)
    }
}

/// Softmax layer over an intent vocabulary; the same type serves the speech
/// model, the text model, and the shared joint head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentClassifier {
    pub store: ParamStore,
    linear: Linear,
    pub vocab: IntentVocabulary,
}

impl IntentClassifier {
    pub fn new(dim: usize, vocab: IntentVocabulary, seed: u64) -> Self {
        let mut rng = SeededRng::derive(seed, "classifier-init");
        let mut store = ParamStore::new();
        let weight = store.add("cls.weight", xavier(&mut rng, dim, vocab.len()));
        let bias = store.add("cls.bias", Matrix::zeros(1, vocab.len()));
        Self {
            store,
            linear: Linear {
                weight,
                bias,
                input_dim: dim,
                output_dim: vocab.len(),
            },
            vocab,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.linear.input_dim
    }

    pub fn weight(&self) -> usize {
        self.linear.weight
    }

    pub fn bias(&self) -> usize {
        self.linear.bias
    }

    /// Logits under the given graph tag.
    pub fn forward(&self, g: &mut Graph, tag: u8, x: Var) -> Var {
        self.linear.forward(g, self.store.bind(tag), x)
    }

    /// Class distribution of one embedding, in f64.
    pub fn distribution(&self, embedding: &[f32]) -> Vec<f64> {
        let x = Matrix::from_vec(1, embedding.len(), embedding.to_vec());
        let logits: Vec<f64> = self
            .linear
            .apply(&self.store, &x)
            .data()
            .iter()
            .map(|&v| f64::from(v))
            .collect();
        let lse = log_sum_exp(&logits);
        logits.iter().map(|z| exp(z - lse)).collect()
    }

    pub fn predict(&self, embedding: &[f32]) -> IntentPrediction {
        let dist = self.distribution(embedding);
        let index = argmax_f64(&dist);
        IntentPrediction {
            index,
            label: self.vocab.label(index).into(),
            probability: dist[index],
            distribution: dist,
        }
    }
}

/// Ties go to the lowest index.
pub fn argmax_f64(dist: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentPrediction {
    pub index: usize,
    pub label: String,
    pub probability: f64,
    pub distribution: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiTaskConfig {
    pub ctc_weight: f32,
    pub intent_weight: f32,
    /// Width of the projected embedding; `None` keeps the encoder width.
    pub embedding_dim: Option<usize>,
    pub train: TrainConfig,
}

impl Default for MultiTaskConfig {
    fn default() -> Self {
        Self {
            ctc_weight: 1.0,
            intent_weight: 1.0,
            embedding_dim: None,
            train: TrainConfig::default(),
        }
    }
}

impl MultiTaskConfig {
    pub fn validate(&self) -> Result<(), S2iError> {
        let ok = self.ctc_weight >= 0.0
            && self.intent_weight >= 0.0
            && (self.ctc_weight > 0.0 || self.intent_weight > 0.0);
        if ok {
            Ok(())
        } else {
            Err(S2iError::BadWeights)
        }
    }
}

/// Encoder, optional CTC head, projection, and intent classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct S2iModel {
    pub encoder: RecurrentEncoder,
    pub ctc_head: Option<CtcHead>,
    pub units: UnitVocabulary,
    pub lexicon: Option<Lexicon>,
    pub projection: Projection,
    pub classifier: IntentClassifier,
}

/// Per-utterance graph outputs of the speech branch.
pub struct SpeechForward {
    pub hidden: Var,
    pub embedding: Var,
}

impl S2iModel {
    pub fn from_acoustic(
        am: &AcousticEncoder,
        vocab: IntentVocabulary,
        embedding_dim: Option<usize>,
        seed: u64,
    ) -> Self {
        let width = am.encoder.output_dim();
        let dim = embedding_dim.unwrap_or(width);
        Self {
            encoder: am.encoder.clone(),
            ctc_head: Some(am.head.clone()),
            units: am.units.clone(),
            lexicon: am.lexicon.clone(),
            projection: Projection::new(width, dim, seed),
            classifier: IntentClassifier::new(dim, vocab, seed),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.projection.output_dim()
    }

    /// The acoustic model view, when the CTC head is still attached.
    pub fn acoustic(&self) -> Option<AcousticEncoder> {
        self.ctc_head.as_ref().map(|head| AcousticEncoder {
            encoder: self.encoder.clone(),
            head: head.clone(),
            units: self.units.clone(),
            lexicon: self.lexicon.clone(),
        })
    }

    /// Drop the ASR branch; intent inference does not use it.
    pub fn discard_ctc_head(&mut self) {
        self.ctc_head = None;
    }

    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> SpeechForward {
        let x = g.input(batch.x.clone());
        let hidden = self.encoder.forward(g, x, &batch.lengths);
        let pooled = g.masked_time_mean(hidden, &batch.lengths);
        let embedding = self.projection.forward(g, pooled);
        SpeechForward { hidden, embedding }
    }

    pub fn embed(&self, features: &Matrix, id: &str) -> Result<AcousticEmbedding, S2iError> {
        let x = self.encoder.prepare(features)?;
        let mut g = Graph::inference();
        let len = x.rows();
        let xv = g.input(x);
        let h = self.encoder.forward(&mut g, xv, &[len]);
        let pooled = pool_embedding(g.value(h))?;
        let e = self
            .projection
            .apply(&Matrix::from_vec(1, pooled.len(), pooled));
        Ok(AcousticEmbedding {
            vector: e.into_vec(),
            utterance_id: id.into(),
        })
    }

    pub fn checksum(&self) -> u64 {
        let mut h = self.encoder.checksum();
        if let Some(c) = &self.ctc_head {
            h ^= c.store.checksum().rotate_left(11);
        }
        h ^ self.projection.store.checksum().rotate_left(23)
            ^ self.classifier.store.checksum().rotate_left(37)
    }
}

/// Argmax of the classifier over the pooled, projected embedding.
pub fn classify_intent(model: &S2iModel, features: &Matrix) -> Result<IntentPrediction, S2iError> {
    let e = model.embed(features, "")?;
    Ok(model.classifier.predict(&e.vector))
}

pub(crate) struct IntentItem {
    pub x: Matrix,
    pub target: Option<Vec<usize>>,
    pub intent: usize,
}

pub(crate) fn intent_label(
    ex: &SpeechExample,
    vocab: &IntentVocabulary,
) -> Result<usize, S2iError> {
    let label = ex
        .intent
        .as_deref()
        .ok_or_else(|| S2iError::NotSingleIntent {
            id: ex.id.clone(),
            count: 0,
        })?;
    vocab
        .index_of(label)
        .ok_or_else(|| S2iError::UnknownIntent(label.into()))
}

pub(crate) fn intent_items(
    model: &S2iModel,
    data: &[SpeechExample],
    with_targets: bool,
) -> Result<Vec<IntentItem>, S2iError> {
    data.iter()
        .map(|ex| {
            let x = model.encoder.prepare(&ex.features)?;
            let target = if with_targets {
                let t = model
                    .units
                    .encode(&ex.transcript, model.lexicon.as_ref())
                    .map_err(AmError::from)?;
                (x.rows() >= ctc_min_frames(&t).max(1)).then_some(t)
            } else {
                None
            };
            Ok(IntentItem {
                intent: intent_label(ex, &model.classifier.vocab)?,
                x,
                target,
            })
        })
        .collect()
}

/// Fraction of `items` whose argmax matches their label.
pub(crate) fn item_accuracy(
    model: &S2iModel,
    items: &[IntentItem],
    batch_size: usize,
) -> Option<f64> {
    if items.is_empty() {
        return None;
    }
    let lengths: Vec<usize> = items.iter().map(|i| i.x.rows()).collect();
    let mut correct = 0;
    for idx in eval_batches(&lengths, batch_size) {
        let xs: Vec<&Matrix> = idx.iter().map(|&i| &items[i].x).collect();
        let batch = Batch::time_major(&xs);
        let mut g = Graph::inference();
        let f = model.forward(&mut g, &batch);
        let logits = model
            .classifier
            .forward(&mut g, CLASSIFIER_TAG, f.embedding);
        for (r, &i) in idx.iter().enumerate() {
            if argmax(g.value(logits).row(r)) == items[i].intent {
                correct += 1;
            }
        }
    }
    Some(f64::from(correct) / items.len() as f64)
}

/// Intent accuracy of `model` on labelled examples.
pub fn accuracy(model: &S2iModel, data: &[SpeechExample]) -> Result<Option<f64>, S2iError> {
    let items = intent_items(model, data, false)?;
    Ok(item_accuracy(model, &items, 32))
}

/// Multi-task loss of one batch: `ctc_weight · CTC + intent_weight · CE`.
/// Terms with zero weight are left out of the graph.
pub(crate) fn multitask_loss(
    model: &S2iModel,
    g: &mut Graph,
    items: &[&IntentItem],
    ctc_weight: f32,
    intent_weight: f32,
) -> Result<Var, S2iError> {
    let xs: Vec<&Matrix> = items.iter().map(|i| &i.x).collect();
    let batch = Batch::time_major(&xs);
    let f = model.forward(g, &batch);
    let mut terms = Vec::new();
    if intent_weight > 0.0 {
        let logits = model.classifier.forward(g, CLASSIFIER_TAG, f.embedding);
        let targets: Vec<usize> = items.iter().map(|i| i.intent).collect();
        terms.push((g.cross_entropy(logits, &targets), intent_weight));
    }
    if ctc_weight > 0.0 {
        if let Some(head) = &model.ctc_head {
            // CTC over the utterances whose targets fit, as a sub-batch.
            let keep: Vec<usize> = (0..items.len())
                .filter(|&b| items[b].target.is_some())
                .collect();
            if !keep.is_empty() {
                let lp = head.forward(g, f.hidden);
                let (lp, lengths) = if keep.len() == items.len() {
                    (lp, batch.lengths.clone())
                } else {
                    let rows = sub_batch_rows(&batch.lengths, &keep);
                    (
                        g.gather(lp, &rows),
                        keep.iter().map(|&b| batch.lengths[b]).collect(),
                    )
                };
                let targets: Vec<Vec<usize>> = keep
                    .iter()
                    .map(|&b| items[b].target.clone().unwrap_or_default())
                    .collect();
                let ctc = g
                    .ctc(lp, &lengths, &targets, model.units.blank())
                    .map_err(AmError::from)?;
                let share = keep.len() as f32 / items.len() as f32;
                terms.push((ctc, ctc_weight * share));
            }
        }
    }
    Ok(g.weighted_sum(&terms))
}

/// Time-major row indices of the sequences in `keep`, padded to the longest.
pub(crate) fn sub_batch_rows(lengths: &[usize], keep: &[usize]) -> Vec<usize> {
    let b = lengths.len();
    let steps = lengths.iter().copied().max().unwrap_or(0);
    let sub_steps = keep.iter().map(|&k| lengths[k]).max().unwrap_or(0);
    debug_assert!(sub_steps <= steps);
    let mut rows = Vec::with_capacity(sub_steps * keep.len());
    for t in 0..sub_steps {
        for &k in keep {
            rows.push(t * b + k);
        }
    }
    rows
}

/// Fine-tune an acoustic model into a speech-to-intent model.
pub fn train_s2i(
    am: &AcousticEncoder,
    train: &[SpeechExample],
    heldout: &[SpeechExample],
    vocab: &IntentVocabulary,
    cfg: &MultiTaskConfig,
) -> Result<(S2iModel, TrainReport), S2iError> {
    train_s2i_with(am, train, heldout, vocab, cfg, &mut |_, _| {})
}

/// [`train_s2i`] with a callback after every epoch, e.g. for checkpoints.
pub fn train_s2i_with(
    am: &AcousticEncoder,
    train: &[SpeechExample],
    heldout: &[SpeechExample],
    vocab: &IntentVocabulary,
    cfg: &MultiTaskConfig,
    on_epoch: &mut dyn FnMut(&EpochLog, &S2iModel),
) -> Result<(S2iModel, TrainReport), S2iError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(S2iError::EmptyData);
    }
    let mut model = S2iModel::from_acoustic(am, vocab.clone(), cfg.embedding_dim, cfg.train.seed);
    let report = fine_tune(&mut model, train, heldout, cfg, on_epoch)?;
    Ok((model, report))
}

/// Continue multi-task training of an existing speech-to-intent model.
pub fn fine_tune(
    model: &mut S2iModel,
    train: &[SpeechExample],
    heldout: &[SpeechExample],
    cfg: &MultiTaskConfig,
    on_epoch: &mut dyn FnMut(&EpochLog, &S2iModel),
) -> Result<TrainReport, S2iError> {
    cfg.validate()?;
    let tc = &cfg.train;
    let with_targets = cfg.ctc_weight > 0.0;
    let items = intent_items(model, train, with_targets)?;
    let held = intent_items(model, heldout, false)?;
    let mut report = TrainReport {
        truncated: 0,
        epochs: Vec::new(),
        skipped: items
            .iter()
            .filter(|i| with_targets && i.target.is_none())
            .count(),
    };
    let mut opts = [
        (ENCODER_TAG, Adam::new(&model.encoder.store, tc.optimizer)),
        (
            PROJECTION_TAG,
            Adam::new(&model.projection.store, tc.optimizer),
        ),
        (
            CLASSIFIER_TAG,
            Adam::new(&model.classifier.store, tc.optimizer),
        ),
    ];
    let mut ctc_opt = model
        .ctc_head
        .as_ref()
        .map(|h| Adam::new(&h.store, tc.optimizer));
    let mut order_rng = SeededRng::derive(tc.seed, "s2i-batches");
    let mut dropout_rng = SeededRng::derive(tc.seed, "s2i-dropout");
    let lengths: Vec<usize> = items.iter().map(|i| i.x.rows()).collect();
    for epoch in 1..=tc.epochs {
        let mut total = 0.0;
        for idx in epoch_batches(&lengths, tc.batch_size, &mut order_rng) {
            let mut g = Graph::new(true, dropout_rng.next_u64());
            let refs: Vec<&IntentItem> = idx.iter().map(|&i| &items[i]).collect();
            let loss = multitask_loss(model, &mut g, &refs, cfg.ctc_weight, cfg.intent_weight)?;
            total += f64::from(g.value(loss).item()) * idx.len() as f64;
            let mut grads = g.backward(loss);
            grads.clip_global_norm(tc.clip_norm);
            for (tag, opt) in opts.iter_mut() {
                let store = match *tag {
                    ENCODER_TAG => &mut model.encoder.store,
                    PROJECTION_TAG => &mut model.projection.store,
                    _ => &mut model.classifier.store,
                };
                opt.step(store, &grads, *tag);
            }
            if let (Some(opt), Some(head)) = (ctc_opt.as_mut(), model.ctc_head.as_mut()) {
                opt.step(&mut head.store, &grads, CTC_TAG);
            }
        }
        let log = EpochLog {
            epoch,
            train_loss: total / items.len().max(1) as f64,
            heldout_loss: None,
            heldout_accuracy: item_accuracy(model, &held, tc.batch_size),
        };
        on_epoch(&log, model);
        report.epochs.push(log);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::am::testutil::{render, small_config};
    use alloc::vec;

    fn examples() -> Vec<SpeechExample> {
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

    fn model() -> S2iModel {
        let am = AcousticEncoder::new(&small_config(), UnitVocabulary::graphemes(), None, 1);
        S2iModel::from_acoustic(&am, IntentVocabulary::new(["x", "y", "z"]), None, 1)
    }

    #[test]
    fn pooling_is_the_time_mean() {
        let h = Matrix::from_rows(&[vec![1.0], vec![3.0]]);
        assert_eq!(pool_embedding(&h).unwrap(), [2.0]);
        let same = Matrix::from_rows(&vec![vec![0.5, -1.0]; 4]);
        assert_eq!(pool_embedding(&same).unwrap(), [0.5, -1.0]);
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![5.0, -1.0], vec![0.0, 4.0]]);
        let b = Matrix::from_rows(&[vec![0.0, 4.0], vec![1.0, 2.0], vec![5.0, -1.0]]);
        for (x, y) in pool_embedding(&a)
            .unwrap()
            .iter()
            .zip(pool_embedding(&b).unwrap())
        {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(
            pool_embedding(&Matrix::zeros(0, 3)).unwrap_err(),
            S2iError::EmptySequence
        );
    }

    #[test]
    fn uniform_classifier_breaks_ties_low() {
        let mut c = IntentClassifier::new(3, IntentVocabulary::new(["a", "b", "c"]), 1);
        let w = c.weight();
        c.store
            .get_mut(w)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let p = c.predict(&[0.3, -0.2, 1.0]);
        assert_eq!(p.index, 0);
        assert!(p
            .distribution
            .iter()
            .all(|&q| (q - 1.0 / 3.0).abs() < 1e-12));
        assert!((p.distribution.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn weights_validated() {
        let bad = MultiTaskConfig {
            ctc_weight: 0.0,
            intent_weight: 0.0,
            ..MultiTaskConfig::default()
        };
        assert_eq!(bad.validate().unwrap_err(), S2iError::BadWeights);
    }

    #[test]
    fn projection_starts_near_identity() {
        let m = model();
        let feats = render("abc");
        let e = m.embed(&feats, "u").unwrap();
        let x = m.encoder.prepare(&feats).unwrap();
        let mut g = Graph::inference();
        let len = x.rows();
        let xv = g.input(x);
        let h = m.encoder.forward(&mut g, xv, &[len]);
        let pooled = pool_embedding(g.value(h)).unwrap();
        for (a, b) in e.vector.iter().zip(&pooled) {
            assert!((a - b).abs() < 0.1);
        }
    }

    #[test]
    fn multitask_gradient_is_weighted_sum_of_task_gradients() {
        let m = model();
        let data = examples();
        let items = intent_items(&m, &data, true).unwrap();
        let refs: Vec<&IntentItem> = items.iter().collect();
        let grads = |cw: f32, iw: f32| {
            let mut g = Graph::new(false, 0);
            let l = multitask_loss(&m, &mut g, &refs, cw, iw).unwrap();
            g.backward(l)
        };
        let both = grads(0.7, 1.3);
        let mut sum = crate::autograd::Gradients::default();
        sum.accumulate(&grads(1.0, 0.0), 0.7);
        sum.accumulate(&grads(0.0, 1.0), 1.3);
        for (k, v) in both.iter() {
            let w = sum.get(*k).unwrap();
            for (a, b) in v.data().iter().zip(w.data()) {
                assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()), "{k:?}");
            }
        }
    }

    #[test]
    fn zero_intent_weight_leaves_head_untouched() {
        let am = AcousticEncoder::new(&small_config(), UnitVocabulary::graphemes(), None, 1);
        let cfg = MultiTaskConfig {
            intent_weight: 0.0,
            train: TrainConfig {
                epochs: 2,
                batch_size: 3,
                ..TrainConfig::default()
            },
            ..MultiTaskConfig::default()
        };
        let vocab = IntentVocabulary::new(["x", "y", "z"]);
        let (m, _) = train_s2i(&am, &examples(), &[], &vocab, &cfg).unwrap();
        let init = S2iModel::from_acoustic(&am, vocab, None, cfg.train.seed);
        assert_eq!(
            m.classifier.store.checksum(),
            init.classifier.store.checksum()
        );
        assert_eq!(
            m.projection.store.checksum(),
            init.projection.store.checksum()
        );
        assert_ne!(m.encoder.checksum(), init.encoder.checksum());
    }

    #[test]
    fn discarding_ctc_head_keeps_predictions() {
        let mut m = model();
        let feats = render("cab");
        let before = classify_intent(&m, &feats).unwrap();
        m.discard_ctc_head();
        assert_eq!(classify_intent(&m, &feats).unwrap(), before);
    }

    #[test]
    fn unknown_intent_rejected() {
        let mut data = examples();
        data[0].intent = Some("nope".into());
        let am = AcousticEncoder::new(&small_config(), UnitVocabulary::graphemes(), None, 1);
        let err = train_s2i(
            &am,
            &data,
            &[],
            &IntentVocabulary::new(["x", "y", "z"]),
            &MultiTaskConfig::default(),
        );
        assert_eq!(err.unwrap_err(), S2iError::UnknownIntent("nope".into()));
    }
}
