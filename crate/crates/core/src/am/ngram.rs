//! Character n-gram language model with add-k smoothing, used for shallow
//! fusion in prefix beam search.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::units::normalize_text;
use crate::math::ln;

/// Predicted symbols: the characters of [`ALPHABET`] followed by end-of-sentence.
pub const ALPHABET: &str = " 'abcdefghijklmnopqrstuvwxyz";
const NUM_CHARS: usize = 28;
pub const EOS: u8 = NUM_CHARS as u8;
const BOS: u8 = NUM_CHARS as u8 + 1;
const NUM_SYMBOLS: usize = NUM_CHARS + 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LmError {
    #[error("n-gram order {0} outside [2, 5]")]
    BadOrder(usize),
    #[error("empty text corpus")]
    EmptyCorpus,
}

pub fn symbol_of(c: char) -> Option<u8> {
    ALPHABET.find(c).map(|i| i as u8)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharNgram {
    order: usize,
    k: f64,
    /// Context (oldest symbol first) → successor counts.
    #[serde(with = "pairs")]
    counts: BTreeMap<Vec<u8>, Vec<u32>>,
}

/// Maps with non-string keys serialize as a list of pairs.
mod pairs {
    use alloc::collections::BTreeMap;
    use alloc::vec::Vec;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        m: &BTreeMap<Vec<u8>, Vec<u32>>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        s.collect_seq(m.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<Vec<u8>, Vec<u32>>, D::Error> {
        Ok(Vec::<(Vec<u8>, Vec<u32>)>::deserialize(d)?
            .into_iter()
            .collect())
    }
}

/// Train on normalized transcripts.
pub fn train_ngram_lm<'a, I>(texts: I, order: usize) -> Result<CharNgram, LmError>
where
    I: IntoIterator<Item = &'a str>,
{
    if !(2..=5).contains(&order) {
        return Err(LmError::BadOrder(order));
    }
    let mut counts: BTreeMap<Vec<u8>, Vec<u32>> = BTreeMap::new();
    let mut sentences = 0usize;
    for text in texts {
        let norm = normalize_text(text);
        if norm.is_empty() {
            continue;
        }
        sentences += 1;
        let mut seq = vec![BOS; order - 1];
        seq.extend(norm.chars().filter_map(symbol_of));
        seq.push(EOS);
        for w in seq.windows(order) {
            let row = counts
                .entry(w[..order - 1].to_vec())
                .or_insert_with(|| vec![0; NUM_SYMBOLS]);
            row[usize::from(w[order - 1])] += 1;
        }
    }
    if sentences == 0 {
        return Err(LmError::EmptyCorpus);
    }
    Ok(CharNgram {
        order,
        k: 0.01,
        counts,
    })
}

impl CharNgram {
    pub fn order(&self) -> usize {
        self.order
    }

    /// `ln P(symbol | history)`; only the last `order − 1` history symbols
    /// are used and a short history is padded with sentence-start.
    pub fn log_prob(&self, history: &[u8], symbol: u8) -> f64 {
        let ctx = self.context(history);
        let (num, den) = match self.counts.get(&ctx) {
            Some(row) => (
                f64::from(row[usize::from(symbol)]),
                f64::from(row.iter().sum::<u32>()),
            ),
            None => (0.0, 0.0),
        };
        ln((num + self.k) / (den + self.k * NUM_SYMBOLS as f64))
    }

    fn context(&self, history: &[u8]) -> Vec<u8> {
        let n = self.order - 1;
        let mut ctx = vec![BOS; n.saturating_sub(history.len())];
        ctx.extend(&history[history.len().saturating_sub(n)..]);
        ctx
    }

    /// Log-probability of a whole sentence including its end symbol.
    pub fn score(&self, text: &str) -> f64 {
        let syms: Vec<u8> = normalize_text(text).chars().filter_map(symbol_of).collect();
        let mut total = 0.0;
        for i in 0..syms.len() {
            total += self.log_prob(&syms[..i], syms[i]);
        }
        total + self.log_prob(&syms, EOS)
    }

    pub fn num_symbols(&self) -> usize {
        NUM_SYMBOLS
    }
}
