//! CTC decoding: greedy best-path and prefix beam search with optional
//! character n-gram shallow fusion.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::ngram::{symbol_of, CharNgram, EOS};
use super::units::{UnitKind, UnitVocabulary};
use super::{AcousticEncoder, AmError};
use crate::math::log_add;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    PrefixBeam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam: usize,
    pub lm_weight: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            beam: 8,
            lm_weight: 0.5,
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-frame argmax, repeats collapsed, blanks dropped.
pub fn greedy_units(log_probs: &Matrix, blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..log_probs.rows() {
        let u = argmax(log_probs.row(t));
        if Some(u) != prev && u != blank {
            out.push(u);
        }
        prev = Some(u);
    }
    out
}

#[derive(Clone, Copy)]
struct Score {
    blank: f64,
    non_blank: f64,
}

impl Score {
    const ZERO: Score = Score {
        blank: f64::NEG_INFINITY,
        non_blank: f64::NEG_INFINITY,
    };

    fn total(self) -> f64 {
        log_add(self.blank, self.non_blank)
    }
}

/// Shallow-fusion scorer over grapheme units.
pub struct Fusion<'a> {
    pub lm: &'a CharNgram,
    pub weight: f64,
    /// LM symbol of each unit; `None` for the blank.
    symbols: Vec<Option<u8>>,
}

impl<'a> Fusion<'a> {
    pub fn new(lm: &'a CharNgram, units: &UnitVocabulary, weight: f64) -> Result<Self, AmError> {
        if units.kind() != UnitKind::Grapheme {
            return Err(AmError::Config(
                "language-model fusion needs grapheme units".to_string(),
            ));
        }
        let symbols = (0..units.len())
            .map(|u| {
                if u == units.blank() {
                    None
                } else {
                    units.symbol(u).chars().next().and_then(symbol_of)
                }
            })
            .collect();
        Ok(Self {
            lm,
            weight,
            symbols,
        })
    }

    fn history(&self, prefix: &[usize]) -> Vec<u8> {
        prefix.iter().filter_map(|&u| self.symbols[u]).collect()
    }

    fn extend(&self, prefix: &[usize], unit: usize) -> f64 {
        match self.symbols[unit] {
            Some(s) => self.weight * self.lm.log_prob(&self.history(prefix), s),
            None => 0.0,
        }
    }

    fn finish(&self, prefix: &[usize]) -> f64 {
        self.weight * self.lm.log_prob(&self.history(prefix), EOS)
    }
}

/// CTC prefix beam search with probabilities merged over alignments.
pub fn prefix_beam_units(
    log_probs: &Matrix,
    blank: usize,
    beam: usize,
    fusion: Option<&Fusion<'_>>,
) -> Result<Vec<usize>, AmError> {
    if beam < 1 {
        return Err(AmError::Config("beam width must be at least 1".to_string()));
    }
    let units = log_probs.cols();
    let mut beams: Vec<(Vec<usize>, Score)> = alloc::vec![(
        Vec::new(),
        Score {
            blank: 0.0,
            non_blank: f64::NEG_INFINITY,
        }
    )];
    for t in 0..log_probs.rows() {
        let lp: Vec<f64> = log_probs.row(t).iter().map(|&v| f64::from(v)).collect();
        let mut next: BTreeMap<Vec<usize>, Score> = BTreeMap::new();
        for (prefix, s) in &beams {
            let total = s.total();
            let last = prefix.last().copied();
            let stay = next.entry(prefix.clone()).or_insert(Score::ZERO);
            stay.blank = log_add(stay.blank, total + lp[blank]);
            if let Some(l) = last {
                stay.non_blank = log_add(stay.non_blank, s.non_blank + lp[l]);
            }
            for u in (0..units).filter(|&u| u != blank) {
                let mut ext = prefix.clone();
                ext.push(u);
                let lm = fusion.map_or(0.0, |f| f.extend(prefix, u));
                let from = if Some(u) == last { s.blank } else { total };
                let e = next.entry(ext).or_insert(Score::ZERO);
                e.non_blank = log_add(e.non_blank, from + lp[u] + lm);
            }
        }
        let mut ranked: Vec<(Vec<usize>, Score)> = next.into_iter().collect();
        ranked.sort_by(|a, b| b.1.total().total_cmp(&a.1.total()));
        ranked.truncate(beam);
        beams = ranked;
    }
    let final_score = |p: &[usize], s: Score| s.total() + fusion.map_or(0.0, |f| f.finish(p));
    let best = beams
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| {
            final_score(&a.0, a.1)
                .total_cmp(&final_score(&b.0, b.1))
                .then(j.cmp(i))
        })
        .map(|(_, b)| b.0.clone())
        .unwrap_or_default();
    Ok(best)
}

/// Units to words: graphemes split on spaces, phones segmented by the lexicon.
pub fn units_to_words(model: &AcousticEncoder, units: &[usize]) -> Result<Vec<String>, AmError> {
    let text = model.units.render(units)?;
    Ok(match model.units.kind() {
        UnitKind::Grapheme => text.split_whitespace().map(ToString::to_string).collect(),
        UnitKind::Phone => {
            let phones: Vec<String> = text.split_whitespace().map(ToString::to_string).collect();
            match &model.lexicon {
                Some(lex) => lex.phones_to_words(&phones),
                None => phones,
            }
        }
    })
}

/// Decode one utterance's raw features to words.
pub fn decode(
    model: &AcousticEncoder,
    features: &Matrix,
    cfg: &DecodeConfig,
    lm: Option<&CharNgram>,
) -> Result<Vec<String>, AmError> {
    let lp = model.log_probs(features)?;
    decode_log_probs(model, &lp, cfg, lm)
}

pub fn decode_log_probs(
    model: &AcousticEncoder,
    log_probs: &Matrix,
    cfg: &DecodeConfig,
    lm: Option<&CharNgram>,
) -> Result<Vec<String>, AmError> {
    let blank = model.units.blank();
    let units = match cfg.mode {
        DecodeMode::Greedy => greedy_units(log_probs, blank),
        DecodeMode::PrefixBeam => {
            if model.units.kind() == UnitKind::Phone {
                return Err(AmError::Config(
                    "phone units support greedy decoding only".to_string(),
                ));
            }
            let fusion = lm
                .map(|l| Fusion::new(l, &model.units, cfg.lm_weight))
                .transpose()?;
            prefix_beam_units(log_probs, blank, cfg.beam, fusion.as_ref())?
        }
    };
    units_to_words(model, &units)
}
