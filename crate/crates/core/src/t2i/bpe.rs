//! Byte-pair-encoding subword vocabulary over normalized words.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::am::units::normalize_text;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
pub const SPECIALS: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];
const END: &str = "</w>";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bpe {
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
    #[serde(skip)]
    ranks: BTreeMap<(String, String), usize>,
}

fn split_word(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut s = c.to_string();
            if i + 1 == chars.len() {
                s.push_str(END);
            }
            s
        })
        .collect()
}

impl Bpe {
    /// Learn merges until the vocabulary reaches `vocab_size` or no pair
    /// occurs twice. Ties go to the lexicographically smallest pair.
    pub fn train<'a, I>(texts: I, vocab_size: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut words: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        for t in texts {
            for w in normalize_text(t).split_whitespace() {
                *words.entry(split_word(w)).or_default() += 1;
            }
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(ToString::to_string).collect();
        let mut base: Vec<String> = words.keys().flatten().cloned().collect();
        base.sort();
        base.dedup();
        tokens.extend(base);
        let mut merges = Vec::new();
        let mut words: Vec<(Vec<String>, usize)> = words.into_iter().collect();
        while tokens.len() < vocab_size {
            let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (syms, n) in &words {
                for w in syms.windows(2) {
                    *pairs.entry((&w[0], &w[1])).or_default() += n;
                }
            }
            let Some(((a, b), count)) = pairs.iter().fold(
                None,
                |best: Option<((&str, &str), usize)>, (p, &n)| match best {
                    Some((_, m)) if m >= n => best,
                    _ => Some((*p, n)),
                },
            ) else {
                break;
            };
            if count < 2 {
                break;
            }
            let (a, b) = (a.to_string(), b.to_string());
            let joined = alloc::format!("{a}{b}");
            for (syms, _) in words.iter_mut() {
                *syms = merge_pair(syms, &a, &b, &joined);
            }
            tokens.push(joined);
            merges.push((a, b));
        }
        let mut bpe = Self {
            tokens,
            merges,
            index: BTreeMap::new(),
            ranks: BTreeMap::new(),
        };
        bpe.rebuild();
        bpe
    }

    /// Recompute lookup tables, e.g. after deserialization.
    pub fn rebuild(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        self.ranks = self
            .merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Subword ids of a transcript, without special tokens.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for w in normalize_text(text).split_whitespace() {
            let mut syms = split_word(w);
            loop {
                let best = syms
                    .windows(2)
                    .filter_map(|p| {
                        self.ranks
                            .get(&(p[0].clone(), p[1].clone()))
                            .map(|&r| (r, p[0].clone(), p[1].clone()))
                    })
                    .min();
                let Some((_, a, b)) = best else { break };
                let joined = alloc::format!("{a}{b}");
                syms = merge_pair(&syms, &a, &b, &joined);
            }
            out.extend(syms.iter().map(|s| self.id(s).unwrap_or(UNK)));
        }
        out
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        for &i in ids {
            if i < SPECIALS.len() {
                continue;
            }
            let t = &self.tokens[i];
            match t.strip_suffix(END) {
                Some(stem) => {
                    s.push_str(stem);
                    s.push(' ');
                }
                None => s.push_str(t),
            }
        }
        s.trim_end().to_string()
    }

    /// One token per line with its rank.
    pub fn vocab_file(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            s.push_str(&alloc::format!("{t}\t{i}\n"));
        }
        s
    }
}

fn merge_pair(syms: &[String], a: &str, b: &str, joined: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
            out.push(joined.to_string());
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}
