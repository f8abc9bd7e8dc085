//! Text-to-intent: a small transformer encoder over BPE subwords, trained by
//! masked-token prediction and then intent classification.

pub mod bpe;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::am::decode::argmax;
use crate::autograd::{Graph, Var};
use crate::corpus::IntentVocabulary;
use crate::nn::{normal_init, Adam, LayerNorm, Linear, ParamStore};
use crate::rng::SeededRng;
use crate::s2i::{IntentClassifier, IntentPrediction, CLASSIFIER_TAG};
use crate::tensor::Matrix;
use crate::train::{epoch_batches, eval_batches, EpochLog, TrainConfig, TrainReport};
pub use bpe::Bpe;
use bpe::{CLS, MASK, PAD, SEP, SPECIALS, UNK};

pub const TEXT_TAG: u8 = 4;
pub const MLM_TAG: u8 = 5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum T2iError {
    #[error("empty transcript")]
    EmptyTranscript,
    #[error("no text to train on")]
    EmptyData,
    #[error("text `{id}` has no single intent")]
    NotSingleIntent { id: String },
    #[error("intent `{0}` is not in the vocabulary")]
    UnknownIntent(String),
    #[error("width {width} is not divisible by {heads} heads")]
    BadHeads { width: usize, heads: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ffn_width: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f32,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            width: 256,
            ffn_width: 1024,
            max_len: 128,
            vocab_size: 1000,
            dropout: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Pre-norm transformer encoder with learned positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub config: TextConfig,
    pub bpe: Bpe,
    pub store: ParamStore,
    tokens: usize,
    positions: usize,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
}

/// Padded batch-major token ids: row `b · L + i` is position `i` of sequence `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub seq_len: usize,
}

impl TokenBatch {
    pub fn new(seqs: &[&[usize]]) -> Self {
        let seq_len = seqs.iter().map(|s| s.len()).max().unwrap_or(1).max(1);
        let mut ids = vec![PAD; seqs.len() * seq_len];
        for (b, s) in seqs.iter().enumerate() {
            ids[b * seq_len..b * seq_len + s.len()].copy_from_slice(s);
        }
        Self {
            ids,
            lengths: seqs.iter().map(|s| s.len()).collect(),
            seq_len,
        }
    }

    /// Append `extra` padding positions to every sequence.
    pub fn padded(&self, extra: usize) -> Self {
        let seqs: Vec<&[usize]> = (0..self.lengths.len())
            .map(|b| &self.ids[b * self.seq_len..b * self.seq_len + self.lengths[b]])
            .collect();
        let mut out = Self::new(&seqs);
        let l = out.seq_len + extra;
        let mut ids = vec![PAD; seqs.len() * l];
        for (b, s) in seqs.iter().enumerate() {
            ids[b * l..b * l + s.len()].copy_from_slice(s);
        }
        out.ids = ids;
        out.seq_len = l;
        out
    }
}

impl TextEncoder {
    pub fn new(config: &TextConfig, bpe: Bpe, seed: u64) -> Result<Self, T2iError> {
        if config.heads == 0 || config.width % config.heads != 0 {
            return Err(T2iError::BadHeads {
                width: config.width,
                heads: config.heads,
            });
        }
        let mut rng = SeededRng::derive(seed, "text-init");
        let mut store = ParamStore::new();
        let w = config.width;
        let tokens = store.add("tok", normal_init(&mut rng, bpe.len(), w, 0.1));
        let positions = store.add("pos", normal_init(&mut rng, config.max_len, w, 0.1));
        let blocks = (0..config.layers)
            .map(|l| {
                let n = |s: &str| alloc::format!("block{l}.{s}");
                Block {
                    ln1: LayerNorm::new(&mut store, &n("ln1"), w),
                    q: Linear::new(&mut store, &n("q"), w, w, &mut rng),
                    k: Linear::new(&mut store, &n("k"), w, w, &mut rng),
                    v: Linear::new(&mut store, &n("v"), w, w, &mut rng),
                    o: Linear::new(&mut store, &n("o"), w, w, &mut rng),
                    ln2: LayerNorm::new(&mut store, &n("ln2"), w),
                    ff1: Linear::new(&mut store, &n("ff1"), w, config.ffn_width, &mut rng),
                    ff2: Linear::new(&mut store, &n("ff2"), config.ffn_width, w, &mut rng),
                }
            })
            .collect();
        let final_ln = LayerNorm::new(&mut store, "final_ln", w);
        Ok(Self {
            config: config.clone(),
            bpe,
            store,
            tokens,
            positions,
            blocks,
            final_ln,
        })
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    /// `[CLS] subwords [SEP]`, truncated to `max_len`. The flag reports truncation.
    pub fn tokenize(&self, text: &str) -> (Vec<usize>, bool) {
        let mut ids = vec![CLS];
        ids.extend(self.bpe.encode(text));
        let cap = self.config.max_len.max(2) - 1;
        let truncated = ids.len() > cap;
        ids.truncate(cap);
        ids.push(SEP);
        (ids, truncated)
    }

    /// Hidden states, `(B·L) × width`.
    pub fn forward(&self, g: &mut Graph, batch: &TokenBatch) -> Var {
        let p = self.store.bind(TEXT_TAG);
        let table = p.var(g, self.tokens);
        let pos_table = p.var(g, self.positions);
        let tok = g.gather(table, &batch.ids);
        let positions: Vec<usize> = (0..batch.ids.len()).map(|r| r % batch.seq_len).collect();
        let pos = g.gather(pos_table, &positions);
        let mut x = g.add(tok, pos);
        let drop = g.is_training() && self.config.dropout > 0.0;
        for blk in &self.blocks {
            let h = blk.ln1.forward(g, p, x);
            let q = blk.q.forward(g, p, h);
            let k = blk.k.forward(g, p, h);
            let v = blk.v.forward(g, p, h);
            let a = g.attention(q, k, v, &batch.lengths, self.config.heads);
            let mut a = blk.o.forward(g, p, a);
            if drop {
                a = g.dropout(a, self.config.dropout);
            }
            x = g.add(x, a);
            let h = blk.ln2.forward(g, p, x);
            let h = blk.ff1.forward(g, p, h);
            let h = g.gelu(h);
            let mut h = blk.ff2.forward(g, p, h);
            if drop {
                h = g.dropout(h, self.config.dropout);
            }
            x = g.add(x, h);
        }
        self.final_ln.forward(g, p, x)
    }

    /// First-position rows, `B × width`.
    pub fn cls(&self, g: &mut Graph, hidden: Var, batch: &TokenBatch) -> Var {
        let rows: Vec<usize> = (0..batch.lengths.len())
            .map(|b| b * batch.seq_len)
            .collect();
        g.gather(hidden, &rows)
    }
}

/// Text encoder plus intent classifier over the CLS representation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct T2iModel {
    pub encoder: TextEncoder,
    pub classifier: IntentClassifier,
}

/// Fixed-size utterance vector from the text branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub vector: Vec<f32>,
    pub utterance_id: String,
}

/// A transcript with an optional intent, as the text trainers consume it.
#[derive(Clone, Debug, PartialEq)]
pub struct TextExample {
    pub id: String,
    pub text: String,
    pub intent: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlmConfig {
    pub mask_prob: f64,
    pub train: TrainConfig,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.15,
            train: TrainConfig {
                epochs: 10,
                ..TrainConfig::default().with_lr(3e-5)
            },
        }
    }
}

/// Default schedule of the intent stage: 3 epochs at 2e-5.
pub fn intent_finetune_defaults() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        ..TrainConfig::default().with_lr(2e-5)
    }
}

/// Output layer predicting subwords at masked positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmHead {
    pub store: ParamStore,
    linear: Linear,
}

impl MlmHead {
    pub fn new(width: usize, vocab: usize, seed: u64) -> Self {
        let mut rng = SeededRng::derive(seed, "mlm-head-init");
        let mut store = ParamStore::new();
        let linear = Linear::new(&mut store, "mlm", width, vocab, &mut rng);
        Self { store, linear }
    }
}

/// One masked sequence: model input and the positions to predict.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSequence {
    pub input: Vec<usize>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Select each non-special position with probability `p`; a selected token
/// becomes `[MASK]` 80% of the time, a random subword 10%, or stays 10%.
pub fn mask_tokens(ids: &[usize], p: f64, vocab: usize, rng: &mut SeededRng) -> MaskedSequence {
    let mut out = MaskedSequence {
        input: ids.to_vec(),
        positions: Vec::new(),
        targets: Vec::new(),
    };
    for (i, &id) in ids.iter().enumerate() {
        if id < SPECIALS.len() && id != UNK {
            continue;
        }
        if rng.uniform() >= p {
            continue;
        }
        out.positions.push(i);
        out.targets.push(id);
        let r = rng.uniform();
        if r < 0.8 {
            out.input[i] = MASK;
        } else if r < 0.9 && vocab > SPECIALS.len() {
            out.input[i] = SPECIALS.len() + rng.below(vocab - SPECIALS.len());
        }
    }
    out
}

/// Masked-token loss of a batch. `None` when nothing is masked.
pub fn mlm_loss(
    enc: &TextEncoder,
    head: &MlmHead,
    g: &mut Graph,
    seqs: &[&MaskedSequence],
) -> Option<Var> {
    let inputs: Vec<&[usize]> = seqs.iter().map(|s| s.input.as_slice()).collect();
    let batch = TokenBatch::new(&inputs);
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, s) in seqs.iter().enumerate() {
        rows.extend(s.positions.iter().map(|&i| b * batch.seq_len + i));
        targets.extend(&s.targets);
    }
    if rows.is_empty() {
        return None;
    }
    let h = enc.forward(g, &batch);
    let picked = g.gather(h, &rows);
    let logits = head.linear.forward(g, head.store.bind(MLM_TAG), picked);
    Some(g.cross_entropy(logits, &targets))
}

fn tokenize_all(enc: &TextEncoder, data: &[TextExample]) -> (Vec<Vec<usize>>, usize) {
    let mut truncated = 0;
    let seqs = data
        .iter()
        .map(|ex| {
            let (ids, cut) = enc.tokenize(&ex.text);
            truncated += usize::from(cut);
            ids
        })
        .collect();
    (seqs, truncated)
}

fn mean_mlm_loss(
    enc: &TextEncoder,
    head: &MlmHead,
    seqs: &[Vec<usize>],
    p: f64,
    seed: u64,
) -> Option<f64> {
    // Fixed masks so epochs are comparable.
    let mut rng = SeededRng::derive(seed, "mlm-heldout-mask");
    let masked: Vec<MaskedSequence> = seqs
        .iter()
        .map(|s| mask_tokens(s, p, enc.bpe.len(), &mut rng))
        .collect();
    let lengths: Vec<usize> = seqs.iter().map(Vec::len).collect();
    let (mut total, mut count) = (0.0, 0usize);
    for idx in eval_batches(&lengths, 32) {
        let refs: Vec<&MaskedSequence> = idx.iter().map(|&i| &masked[i]).collect();
        let n: usize = refs.iter().map(|m| m.positions.len()).sum();
        let mut g = Graph::inference();
        if let Some(l) = mlm_loss(enc, head, &mut g, &refs) {
            total += f64::from(g.value(l).item()) * n as f64;
            count += n;
        }
    }
    (count > 0).then(|| total / count as f64)
}

/// Masked-language-model training of the text encoder. Returns the encoder
/// and the trained prediction head.
pub fn mlm_finetune(
    encoder: &TextEncoder,
    text: &[TextExample],
    heldout: &[TextExample],
    cfg: &MlmConfig,
) -> Result<(TextEncoder, MlmHead, TrainReport), T2iError> {
    if text.is_empty() && cfg.train.epochs > 0 {
        return Err(T2iError::EmptyData);
    }
    let mut enc = encoder.clone();
    let mut head = MlmHead::new(enc.width(), enc.bpe.len(), cfg.train.seed);
    let (seqs, truncated) = tokenize_all(&enc, text);
    let (held, _) = tokenize_all(&enc, heldout);
    let mut report = TrainReport {
        truncated,
        ..TrainReport::default()
    };
    let tc = &cfg.train;
    let mut enc_opt = Adam::new(&enc.store, tc.optimizer);
    let mut head_opt = Adam::new(&head.store, tc.optimizer);
    let mut order_rng = SeededRng::derive(tc.seed, "mlm-batches");
    let mut mask_rng = SeededRng::derive(tc.seed, "mlm-mask");
    let mut dropout_rng = SeededRng::derive(tc.seed, "mlm-dropout");
    let lengths: Vec<usize> = seqs.iter().map(Vec::len).collect();
    for epoch in 1..=tc.epochs {
        let (mut total, mut count) = (0.0, 0usize);
        for idx in epoch_batches(&lengths, tc.batch_size, &mut order_rng) {
            let masked: Vec<MaskedSequence> = idx
                .iter()
                .map(|&i| mask_tokens(&seqs[i], cfg.mask_prob, enc.bpe.len(), &mut mask_rng))
                .collect();
            let refs: Vec<&MaskedSequence> = masked.iter().collect();
            let mut g = Graph::new(true, dropout_rng.next_u64());
            let Some(loss) = mlm_loss(&enc, &head, &mut g, &refs) else {
                continue;
            };
            let n: usize = masked.iter().map(|m| m.positions.len()).sum();
            total += f64::from(g.value(loss).item()) * n as f64;
            count += n;
            let mut grads = g.backward(loss);
            grads.clip_global_norm(tc.clip_norm);
            enc_opt.step(&mut enc.store, &grads, TEXT_TAG);
            head_opt.step(&mut head.store, &grads, MLM_TAG);
        }
        report.epochs.push(EpochLog {
            epoch,
            train_loss: if count > 0 { total / count as f64 } else { 0.0 },
            heldout_loss: mean_mlm_loss(&enc, &head, &held, cfg.mask_prob.max(0.15), tc.seed),
            heldout_accuracy: None,
        });
    }
    Ok((enc, head, report))
}

fn labels(data: &[TextExample], vocab: &IntentVocabulary) -> Result<Vec<usize>, T2iError> {
    data.iter()
        .map(|ex| {
            let l = ex
                .intent
                .as_deref()
                .ok_or_else(|| T2iError::NotSingleIntent { id: ex.id.clone() })?;
            vocab
                .index_of(l)
                .ok_or_else(|| T2iError::UnknownIntent(l.into()))
        })
        .collect()
}

impl T2iModel {
    pub fn new(encoder: TextEncoder, vocab: IntentVocabulary, seed: u64) -> Self {
        let classifier = IntentClassifier::new(
            encoder.width(),
            vocab,
            crate::rng::mix(seed, "text-classifier"),
        );
        Self {
            encoder,
            classifier,
        }
    }

    /// CLS representations of a batch of token sequences, `B × width`.
    pub fn embed_batch(&self, g: &mut Graph, seqs: &[&[usize]]) -> Var {
        let batch = TokenBatch::new(seqs);
        let h = self.encoder.forward(g, &batch);
        self.encoder.cls(g, h, &batch)
    }

    pub fn predict_text(&self, text: &str) -> IntentPrediction {
        let (ids, _) = self.encoder.tokenize(text);
        let mut g = Graph::inference();
        let e = self.embed_batch(&mut g, &[&ids]);
        self.classifier.predict(g.value(e).data())
    }

    pub fn checksum(&self) -> u64 {
        self.encoder.store.checksum() ^ self.classifier.store.checksum().rotate_left(29)
    }
}

/// Fraction of labelled texts the model classifies correctly.
pub fn text_accuracy(model: &T2iModel, data: &[TextExample]) -> Result<Option<f64>, T2iError> {
    let y = labels(data, &model.classifier.vocab)?;
    if data.is_empty() {
        return Ok(None);
    }
    let (seqs, _) = tokenize_all(&model.encoder, data);
    let lengths: Vec<usize> = seqs.iter().map(Vec::len).collect();
    let mut correct = 0usize;
    for idx in eval_batches(&lengths, 64) {
        let refs: Vec<&[usize]> = idx.iter().map(|&i| seqs[i].as_slice()).collect();
        let mut g = Graph::inference();
        let e = model.embed_batch(&mut g, &refs);
        let logits = model.classifier.forward(&mut g, CLASSIFIER_TAG, e);
        for (r, &i) in idx.iter().enumerate() {
            correct += usize::from(argmax(g.value(logits).row(r)) == y[i]);
        }
    }
    Ok(Some(correct as f64 / data.len() as f64))
}

/// Train a classifier over the CLS output, fine-tuning the encoder with it.
pub fn intent_finetune(
    encoder: &TextEncoder,
    text: &[TextExample],
    heldout: &[TextExample],
    vocab: &IntentVocabulary,
    cfg: &TrainConfig,
) -> Result<(T2iModel, TrainReport), T2iError> {
    let mut model = T2iModel::new(encoder.clone(), vocab.clone(), cfg.seed);
    let y = labels(text, vocab)?;
    let (seqs, truncated) = tokenize_all(encoder, text);
    let mut report = TrainReport {
        truncated,
        ..TrainReport::default()
    };
    let mut enc_opt = Adam::new(&model.encoder.store, cfg.optimizer);
    let mut cls_opt = Adam::new(&model.classifier.store, cfg.optimizer);
    let mut order_rng = SeededRng::derive(cfg.seed, "t2i-batches");
    let mut dropout_rng = SeededRng::derive(cfg.seed, "t2i-dropout");
    let lengths: Vec<usize> = seqs.iter().map(Vec::len).collect();
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for idx in epoch_batches(&lengths, cfg.batch_size, &mut order_rng) {
            let refs: Vec<&[usize]> = idx.iter().map(|&i| seqs[i].as_slice()).collect();
            let targets: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
            let mut g = Graph::new(true, dropout_rng.next_u64());
            let e = model.embed_batch(&mut g, &refs);
            let logits = model.classifier.forward(&mut g, CLASSIFIER_TAG, e);
            let loss = g.cross_entropy(logits, &targets);
            total += f64::from(g.value(loss).item()) * idx.len() as f64;
            let mut grads = g.backward(loss);
            grads.clip_global_norm(cfg.clip_norm);
            enc_opt.step(&mut model.encoder.store, &grads, TEXT_TAG);
            cls_opt.step(&mut model.classifier.store, &grads, CLASSIFIER_TAG);
        }
        report.epochs.push(EpochLog {
            epoch,
            train_loss: total / text.len().max(1) as f64,
            heldout_loss: None,
            heldout_accuracy: text_accuracy(&model, heldout)?,
        });
    }
    Ok((model, report))
}

/// CLS-position output for one transcript.
pub fn embed_text(model: &T2iModel, transcript: &str, id: &str) -> Result<TextEmbedding, T2iError> {
    if model.encoder.bpe.encode(transcript).is_empty() {
        return Err(T2iError::EmptyTranscript);
    }
    let (ids, _) = model.encoder.tokenize(transcript);
    let mut g = Graph::inference();
    let e = model.embed_batch(&mut g, &[&ids]);
    Ok(TextEmbedding {
        vector: g.value(e).data().to_vec(),
        utterance_id: id.into(),
    })
}

/// Text-model intent of an ASR hypothesis; an empty hypothesis is
/// classified as `[CLS] [UNK] [SEP]`.
pub fn cascade_classify(hypothesis: &[String], model: &T2iModel) -> IntentPrediction {
    let text = hypothesis.join(" ");
    if model.encoder.bpe.encode(&text).is_empty() {
        let mut g = Graph::inference();
        let e = model.embed_batch(&mut g, &[&[CLS, UNK, SEP]]);
        return model.classifier.predict(g.value(e).data());
    }
    model.predict_text(&text)
}

/// Plain matrix of CLS embeddings, for analysis.
pub fn embed_all(model: &T2iModel, texts: &[&str]) -> Matrix {
    let mut out = Matrix::zeros(texts.len(), model.encoder.width());
    for (r, t) in texts.iter().enumerate() {
        let (ids, _) = model.encoder.tokenize(t);
        let mut g = Graph::inference();
        let e = model.embed_batch(&mut g, &[&ids]);
        out.row_mut(r).copy_from_slice(g.value(e).data());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TextConfig {
        TextConfig {
            layers: 2,
            heads: 2,
            width: 16,
            ffn_width: 32,
            max_len: 16,
            vocab_size: 200,
            dropout: 0.0,
        }
    }

    fn texts() -> Vec<TextExample> {
        [
            ("pay my bill", "billing"),
            ("i want to pay the bill", "billing"),
            ("cancel my card", "cancel"),
            ("please cancel the card", "cancel"),
            ("reset my password", "password"),
            ("i forgot the password", "password"),
        ]
        .iter()
        .enumerate()
        .map(|(i, (t, l))| TextExample {
            id: alloc::format!("t{i}"),
            text: (*t).into(),
            intent: Some((*l).into()),
        })
        .collect()
    }

    fn encoder() -> TextEncoder {
        let data = texts();
        let bpe = Bpe::train(data.iter().map(|t| t.text.as_str()), 200);
        TextEncoder::new(&tiny(), bpe, 3).unwrap()
    }

    #[test]
    fn cls_ignores_trailing_padding() {
        let enc = encoder();
        let (ids, _) = enc.tokenize("pay my bill");
        let batch = TokenBatch::new(&[&ids]);
        let mut g = Graph::inference();
        let h = enc.forward(&mut g, &batch);
        let a = enc.cls(&mut g, h, &batch);
        let padded = batch.padded(5);
        let h2 = enc.forward(&mut g, &padded);
        let b = enc.cls(&mut g, h2, &padded);
        for (x, y) in g.value(a).data().iter().zip(g.value(b).data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn masking_probability_zero_masks_nothing() {
        let mut rng = SeededRng::new(1);
        let m = mask_tokens(&[CLS, 7, 8, 9, SEP], 0.0, 20, &mut rng);
        assert!(m.positions.is_empty());
        let enc = encoder();
        let head = MlmHead::new(enc.width(), enc.bpe.len(), 1);
        let mut g = Graph::new(true, 0);
        assert!(mlm_loss(&enc, &head, &mut g, &[&m]).is_none());
    }

    #[test]
    fn zero_mask_probability_leaves_parameters() {
        let enc = encoder();
        let cfg = MlmConfig {
            mask_prob: 0.0,
            train: TrainConfig {
                epochs: 2,
                ..TrainConfig::default().with_lr(1e-2)
            },
        };
        let (out, _, report) = mlm_finetune(&enc, &texts(), &[], &cfg).unwrap();
        assert_eq!(out.store.checksum(), enc.store.checksum());
        assert_eq!(report.epochs[0].train_loss, 0.0);
    }

    #[test]
    fn masking_split_and_specials() {
        let mut rng = SeededRng::new(4);
        let ids: Vec<usize> = core::iter::once(CLS)
            .chain((0..20_000).map(|i| 10 + i % 50))
            .chain([SEP])
            .collect();
        let m = mask_tokens(&ids, 0.15, 100, &mut rng);
        assert!(!m.positions.contains(&0) && !m.positions.contains(&(ids.len() - 1)));
        let frac = m.positions.len() as f64 / 20_000.0;
        assert!((frac - 0.15).abs() < 0.01, "{frac}");
        let masked = m.positions.iter().filter(|&&i| m.input[i] == MASK).count() as f64
            / m.positions.len() as f64;
        let kept = m
            .positions
            .iter()
            .filter(|&&i| m.input[i] == ids[i])
            .count() as f64
            / m.positions.len() as f64;
        assert!((masked - 0.8).abs() < 0.03, "{masked}");
        assert!(kept > 0.08 && kept < 0.14, "{kept}");
        let again = mask_tokens(&ids, 0.15, 100, &mut SeededRng::new(4));
        assert_eq!(again, m);
    }

    #[test]
    fn mlm_gradient_only_through_masked_positions() {
        let enc = encoder();
        let head = MlmHead::new(enc.width(), enc.bpe.len(), 1);
        let (ids, _) = enc.tokenize("pay my bill");
        let m = MaskedSequence {
            input: ids.clone(),
            positions: vec![1],
            targets: vec![ids[1]],
        };
        let mut g = Graph::inference();
        let loss = mlm_loss(&enc, &head, &mut g, &[&m]).unwrap();
        let grads = g.backward(loss);
        // Only the predicted position reaches the head; unmasked logits carry no loss.
        let w = grads.get((MLM_TAG, head.linear.weight)).unwrap();
        assert!(w.is_finite());
        let b = grads.get((MLM_TAG, head.linear.bias)).unwrap();
        let total: f32 = b.data().iter().sum();
        assert!(total.abs() < 1e-5);
        let target = b.get(0, ids[1]);
        assert!(target < 0.0);
    }

    #[test]
    fn embeddings_are_deterministic_and_content_sensitive() {
        let model = T2iModel::new(
            encoder(),
            IntentVocabulary::new(["billing", "cancel", "password"]),
            1,
        );
        let a = embed_text(&model, "pay my bill", "a").unwrap();
        let b = embed_text(&model, "pay my bill", "b").unwrap();
        let c = embed_text(&model, "pay my card", "c").unwrap();
        assert_eq!(a.vector, b.vector);
        assert_eq!(a.vector.len(), 16);
        let d: f32 = a
            .vector
            .iter()
            .zip(&c.vector)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        assert!(d > 0.0);
        assert_eq!(
            embed_text(&model, "", "e").unwrap_err(),
            T2iError::EmptyTranscript
        );
    }

    #[test]
    fn cascade_matches_text_model_and_handles_empty() {
        let model = T2iModel::new(
            encoder(),
            IntentVocabulary::new(["billing", "cancel", "password"]),
            1,
        );
        let words: Vec<String> = ["cancel", "my", "card"]
            .iter()
            .map(|w| (*w).into())
            .collect();
        assert_eq!(
            cascade_classify(&words, &model),
            model.predict_text("cancel my card")
        );
        let p = cascade_classify(&[], &model);
        assert!((p.distribution.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn intent_finetune_learns_tiny_set() {
        let data = texts();
        let vocab = IntentVocabulary::new(["billing", "cancel", "password"]);
        let cfg = TrainConfig {
            epochs: 40,
            batch_size: 3,
            ..TrainConfig::default().with_lr(3e-3)
        };
        let (m, _) = intent_finetune(&encoder(), &data, &[], &vocab, &cfg).unwrap();
        assert_eq!(text_accuracy(&m, &data).unwrap(), Some(1.0));
        let bad = vec![TextExample {
            id: "x".into(),
            text: "hello".into(),
            intent: Some("greeting".into()),
        }];
        assert_eq!(
            intent_finetune(&encoder(), &bad, &[], &vocab, &cfg).unwrap_err(),
            T2iError::UnknownIntent("greeting".into())
        );
    }

    #[test]
    fn long_text_is_truncated_and_counted() {
        let enc = encoder();
        let long = "pay my bill ".repeat(40);
        let (ids, cut) = enc.tokenize(&long);
        assert!(cut);
        assert_eq!(ids.len(), 16);
        assert_eq!(*ids.last().unwrap(), SEP);
    }
}
