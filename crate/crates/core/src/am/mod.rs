//! Recurrent CTC acoustic model: encoder, output head, training, and decoding.

pub mod decode;
pub mod ngram;
pub mod units;

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::frontend::stack_frames;
use crate::loss::{ctc_min_frames, CtcError};
use crate::nn::{Adam, Linear, LstmDirection, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Matrix;
use crate::train::{epoch_batches, eval_batches, EpochLog, TrainConfig, TrainReport};
pub use units::{Lexicon, OovPolicy, UnitError, UnitKind, UnitVocabulary};

/// Graph tag of the recurrent encoder parameters.
pub const ENCODER_TAG: u8 = 0;
/// Graph tag of the CTC output layer.
pub const CTC_TAG: u8 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AmError {
    #[error("unit vocabulary differs from the base model's")]
    UnitMismatch,
    #[error("no training data")]
    EmptyData,
    #[error("feature dimension {got} does not match encoder input {want}")]
    FeatureDim { got: usize, want: usize },
    #[error("invalid decoder configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Units(#[from] UnitError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub input_dim: usize,
    /// Frames concatenated per encoder step; 1 keeps the input frame rate.
    pub stack: usize,
    pub layers: usize,
    pub hidden_per_direction: usize,
    pub bidirectional: bool,
    /// Dropout on each layer's recurrent outputs.
    pub dropout: f32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 40,
            stack: 1,
            layers: 4,
            hidden_per_direction: 128,
            bidirectional: true,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn output_dim(&self) -> usize {
        self.hidden_per_direction * if self.bidirectional { 2 } else { 1 }
    }
}

/// Stack of (bi)directional LSTM layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecurrentEncoder {
    pub config: EncoderConfig,
    pub store: ParamStore,
    layers: Vec<Vec<LstmDirection>>,
}

impl RecurrentEncoder {
    pub fn new(config: &EncoderConfig, seed: u64) -> Self {
        let mut rng = SeededRng::derive(seed, "encoder-init");
        let mut store = ParamStore::new();
        let dirs = if config.bidirectional { 2 } else { 1 };
        let mut input = config.input_dim * config.stack.max(1);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let layer = (0..dirs)
                .map(|d| {
                    let name = alloc::format!("lstm{l}.{}", if d == 0 { "fwd" } else { "bwd" });
                    LstmDirection::new(
                        &mut store,
                        &name,
                        input,
                        config.hidden_per_direction,
                        &mut rng,
                    )
                })
                .collect();
            layers.push(layer);
            input = config.output_dim();
        }
        Self {
            config: config.clone(),
            store,
            layers,
        }
    }

    pub fn output_dim(&self) -> usize {
        if self.layers.is_empty() {
            self.config.input_dim * self.config.stack.max(1)
        } else {
            self.config.output_dim()
        }
    }

    /// Raw `T × D` features to the encoder's input frame rate.
    pub fn prepare(&self, features: &Matrix) -> Result<Matrix, AmError> {
        if features.cols() != self.config.input_dim {
            return Err(AmError::FeatureDim {
                got: features.cols(),
                want: self.config.input_dim,
            });
        }
        Ok(stack_frames(features, self.config.stack))
    }

    /// Time-major hidden states for a padded batch.
    pub fn forward(&self, g: &mut Graph, x: Var, lengths: &[usize]) -> Var {
        let p = self.store.bind(ENCODER_TAG);
        let mut h = x;
        for layer in &self.layers {
            let outs: Vec<Var> = layer
                .iter()
                .enumerate()
                .map(|(d, dir)| dir.forward(g, p, h, lengths, d == 1))
                .collect();
            h = if outs.len() == 1 {
                outs[0]
            } else {
                g.concat_cols(&outs)
            };
            if g.is_training() && self.config.dropout > 0.0 {
                h = g.dropout(h, self.config.dropout);
            }
        }
        h
    }

    pub fn checksum(&self) -> u64 {
        self.store.checksum()
    }
}

/// Linear projection to units followed by log-softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtcHead {
    pub store: ParamStore,
    linear: Linear,
}

impl CtcHead {
    pub fn new(input_dim: usize, units: usize, seed: u64) -> Self {
        let mut rng = SeededRng::derive(seed, "ctc-head-init");
        let mut store = ParamStore::new();
        let linear = Linear::new(&mut store, "ctc", input_dim, units, &mut rng);
        Self { store, linear }
    }

    pub fn forward(&self, g: &mut Graph, hidden: Var) -> Var {
        let logits = self.linear.forward(g, self.store.bind(CTC_TAG), hidden);
        g.log_softmax(logits)
    }
}

/// Padded time-major batch: row `t · B + b` holds frame `t` of sequence `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn time_major(seqs: &[&Matrix]) -> Self {
        assert!(!seqs.is_empty(), "empty batch");
        let b = seqs.len();
        let d = seqs[0].cols();
        let steps = seqs.iter().map(|s| s.rows()).max().unwrap_or(0);
        let mut x = Matrix::zeros(steps * b, d);
        for (j, s) in seqs.iter().enumerate() {
            for t in 0..s.rows() {
                x.row_mut(t * b + j).copy_from_slice(s.row(t));
            }
        }
        Self {
            x,
            lengths: seqs.iter().map(|s| s.rows()).collect(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    /// Rows of sequence `b` from a time-major matrix with this batch's layout.
    pub fn unpack(&self, m: &Matrix, b: usize) -> Matrix {
        let n = self.batch_size();
        let mut out = Matrix::zeros(self.lengths[b], m.cols());
        for t in 0..self.lengths[b] {
            out.row_mut(t).copy_from_slice(m.row(t * n + b));
        }
        out
    }
}

/// A labelled utterance with extracted features, ready for training.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeechExample {
    pub id: String,
    /// Raw `T × D` features.
    pub features: Matrix,
    pub transcript: String,
    pub intent: Option<String>,
}

/// Encoder plus CTC head over a unit inventory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcousticEncoder {
    pub encoder: RecurrentEncoder,
    pub head: CtcHead,
    pub units: UnitVocabulary,
    pub lexicon: Option<Lexicon>,
}

impl AcousticEncoder {
    pub fn new(
        config: &EncoderConfig,
        units: UnitVocabulary,
        lexicon: Option<Lexicon>,
        seed: u64,
    ) -> Self {
        let encoder = RecurrentEncoder::new(config, seed);
        let head = CtcHead::new(encoder.output_dim(), units.len(), seed);
        Self {
            encoder,
            head,
            units,
            lexicon,
        }
    }

    pub fn targets(&self, transcript: &str) -> Result<Vec<usize>, UnitError> {
        self.units.encode(transcript, self.lexicon.as_ref())
    }

    /// Hidden states and log-probabilities for one utterance, `T' × ·`.
    pub fn run(&self, features: &Matrix) -> Result<(Matrix, Matrix), AmError> {
        let x = self.encoder.prepare(features)?;
        let mut g = Graph::inference();
        let len = x.rows();
        let xv = g.input(x);
        let h = self.encoder.forward(&mut g, xv, &[len]);
        let lp = self.head.forward(&mut g, h);
        Ok((g.value(h).clone(), g.value(lp).clone()))
    }

    pub fn log_probs(&self, features: &Matrix) -> Result<Matrix, AmError> {
        Ok(self.run(features)?.1)
    }

    pub fn checksum(&self) -> u64 {
        self.encoder.checksum() ^ self.head.store.checksum().rotate_left(17)
    }
}

struct CtcItem {
    x: Matrix,
    target: Vec<usize>,
}

/// Stack features and realize unit targets; infeasible targets are counted
/// and left out.
fn ctc_items(
    model: &AcousticEncoder,
    data: &[SpeechExample],
) -> Result<(Vec<CtcItem>, usize), AmError> {
    let mut items = Vec::with_capacity(data.len());
    let mut skipped = 0;
    for ex in data {
        let x = model.encoder.prepare(&ex.features)?;
        let target = model.targets(&ex.transcript)?;
        if x.rows() < ctc_min_frames(&target).max(1) {
            skipped += 1;
            continue;
        }
        items.push(CtcItem { x, target });
    }
    Ok((items, skipped))
}

fn ctc_batch_loss(
    model: &AcousticEncoder,
    g: &mut Graph,
    items: &[&CtcItem],
) -> Result<Var, AmError> {
    let xs: Vec<&Matrix> = items.iter().map(|i| &i.x).collect();
    let batch = Batch::time_major(&xs);
    let x = g.input(batch.x.clone());
    let h = model.encoder.forward(g, x, &batch.lengths);
    let lp = model.head.forward(g, h);
    let targets: Vec<Vec<usize>> = items.iter().map(|i| i.target.clone()).collect();
    Ok(g.ctc(lp, &batch.lengths, &targets, model.units.blank())?)
}

fn mean_ctc_loss(model: &AcousticEncoder, items: &[CtcItem], batch_size: usize) -> Option<f64> {
    if items.is_empty() {
        return None;
    }
    let lengths: Vec<usize> = items.iter().map(|i| i.x.rows()).collect();
    let mut total = 0.0;
    for idx in eval_batches(&lengths, batch_size) {
        let mut g = Graph::inference();
        let refs: Vec<&CtcItem> = idx.iter().map(|&i| &items[i]).collect();
        let l = ctc_batch_loss(model, &mut g, &refs).expect("items are feasible");
        total += f64::from(g.value(l).item()) * idx.len() as f64;
    }
    Some(total / items.len() as f64)
}

/// Mean per-utterance CTC loss of `model` on `data`, skipping infeasible targets.
pub fn ctc_heldout_loss(
    model: &AcousticEncoder,
    data: &[SpeechExample],
) -> Result<Option<f64>, AmError> {
    let (items, _) = ctc_items(model, data)?;
    Ok(mean_ctc_loss(model, &items, 16))
}

fn train_ctc(
    model: &mut AcousticEncoder,
    train: &[SpeechExample],
    heldout: &[SpeechExample],
    cfg: &TrainConfig,
) -> Result<TrainReport, AmError> {
    let (items, skipped) = ctc_items(model, train)?;
    let (held, _) = ctc_items(model, heldout)?;
    let mut report = TrainReport {
        skipped,
        ..TrainReport::default()
    };
    if items.is_empty() {
        return if cfg.epochs == 0 {
            Ok(report)
        } else {
            Err(AmError::EmptyData)
        };
    }
    let mut enc_opt = Adam::new(&model.encoder.store, cfg.optimizer);
    let mut head_opt = Adam::new(&model.head.store, cfg.optimizer);
    let mut order_rng = SeededRng::derive(cfg.seed, "am-batches");
    let mut dropout_rng = SeededRng::derive(cfg.seed, "am-dropout");
    let lengths: Vec<usize> = items.iter().map(|i| i.x.rows()).collect();
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for idx in epoch_batches(&lengths, cfg.batch_size, &mut order_rng) {
            let mut g = Graph::new(true, dropout_rng.next_u64());
            let refs: Vec<&CtcItem> = idx.iter().map(|&i| &items[i]).collect();
            let loss = ctc_batch_loss(model, &mut g, &refs)?;
            total += f64::from(g.value(loss).item()) * idx.len() as f64;
            let mut grads = g.backward(loss);
            grads.clip_global_norm(cfg.clip_norm);
            enc_opt.step(&mut model.encoder.store, &grads, ENCODER_TAG);
            head_opt.step(&mut model.head.store, &grads, CTC_TAG);
        }
        report.epochs.push(EpochLog {
            epoch,
            train_loss: total / items.len() as f64,
            heldout_loss: mean_ctc_loss(model, &held, cfg.batch_size),
            heldout_accuracy: None,
        });
    }
    Ok(report)
}

/// CTC training from a seeded initialization.
pub fn pretrain_am(
    train: &[SpeechExample],
    heldout: &[SpeechExample],
    units: UnitVocabulary,
    lexicon: Option<Lexicon>,
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<(AcousticEncoder, TrainReport), AmError> {
    let mut model = AcousticEncoder::new(encoder, units, lexicon, cfg.seed);
    let report = train_ctc(&mut model, train, heldout, cfg)?;
    Ok((model, report))
}

/// Continue CTC training of `base` on domain data.
pub fn adapt_am(
    base: &AcousticEncoder,
    units: &UnitVocabulary,
    domain: &[SpeechExample],
    heldout: &[SpeechExample],
    cfg: &TrainConfig,
) -> Result<(AcousticEncoder, TrainReport), AmError> {
    if *units != base.units {
        return Err(AmError::UnitMismatch);
    }
    if domain.is_empty() {
        return Err(AmError::EmptyData);
    }
    let mut model = base.clone();
    let report = train_ctc(&mut model, domain, heldout, cfg)?;
    Ok((model, report))
}
