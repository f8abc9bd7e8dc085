//! Output unit inventories and the word → phone lexicon.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum UnitError {
    #[error("character {0:?} has no grapheme unit")]
    UnknownChar(char),
    #[error("word `{0}` is not in the lexicon")]
    OutOfVocabulary(String),
    #[error("unit index {0} out of range")]
    BadIndex(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Phone,
    Grapheme,
}

/// The default phone inventory: 39 ARPAbet phones plus five reduced or
/// syllabic variants, 44 in total.
pub const PHONES: [&str; 44] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH",
    "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH",
    "UW", "V", "W", "Y", "Z", "ZH", "AX", "AXR", "DX", "EL", "EN",
];

pub const BLANK: &str = "<blank>";

/// CTC output inventory. The blank is never a lexical unit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitVocabulary {
    units: Vec<String>,
    blank_index: usize,
    kind: UnitKind,
}

impl UnitVocabulary {
    /// Blank, space, apostrophe, `a`–`z`.
    pub fn graphemes() -> Self {
        let mut units = alloc::vec![BLANK.to_string(), " ".to_string(), "'".to_string()];
        units.extend((b'a'..=b'z').map(|c| (c as char).to_string()));
        Self {
            units,
            blank_index: 0,
            kind: UnitKind::Grapheme,
        }
    }

    /// Blank plus the 44 phones.
    pub fn phones() -> Self {
        let mut units = alloc::vec![BLANK.to_string()];
        units.extend(PHONES.iter().map(|p| p.to_string()));
        Self {
            units,
            blank_index: 0,
            kind: UnitKind::Phone,
        }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn blank(&self) -> usize {
        self.blank_index
    }

    pub fn kind(&self) -> UnitKind {
        self.kind
    }

    pub fn symbol(&self, index: usize) -> &str {
        &self.units[index]
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.units.iter().position(|u| u == symbol)
    }

    /// Unit targets for a transcript. Phone mode needs a lexicon.
    pub fn encode(
        &self,
        transcript: &str,
        lexicon: Option<&Lexicon>,
    ) -> Result<Vec<usize>, UnitError> {
        match self.kind {
            UnitKind::Grapheme => {
                let normalized = normalize_text(transcript);
                normalized
                    .chars()
                    .map(|c| {
                        let mut buf = [0u8; 4];
                        self.index_of(c.encode_utf8(&mut buf))
                            .ok_or(UnitError::UnknownChar(c))
                    })
                    .collect()
            }
            UnitKind::Phone => {
                let lex = lexicon.ok_or_else(|| UnitError::OutOfVocabulary(String::new()))?;
                let mut out = Vec::new();
                for w in transcript.split_whitespace() {
                    for p in lex.pronounce(w)? {
                        out.push(
                            self.index_of(&p)
                                .ok_or(UnitError::OutOfVocabulary(p.clone()))?,
                        );
                    }
                }
                Ok(out)
            }
        }
    }

    /// Grapheme units back to text; phones joined by spaces.
    pub fn render(&self, units: &[usize]) -> Result<String, UnitError> {
        let mut s = String::new();
        for &u in units {
            if u >= self.units.len() || u == self.blank_index {
                return Err(UnitError::BadIndex(u));
            }
            if self.kind == UnitKind::Phone && !s.is_empty() {
                s.push(' ');
            }
            s.push_str(&self.units[u]);
        }
        Ok(s)
    }
}

/// Lowercase, keep `a`–`z` and apostrophes, collapse other runs to one space.
pub fn normalize_text(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut pending_space = false;
    for c in s.chars() {
        let c = c.to_ascii_lowercase();
        if c.is_ascii_lowercase() || c == '\'' {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        } else {
            pending_space = true;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OovPolicy {
    Error,
    LetterToSound,
}

/// Word → phone sequence map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<String>>,
    pub oov_policy: OovPolicy,
}

const BUNDLED: &[(&str, &str)] = &[
    ("a", "AX"),
    ("account", "AX K AW N T"),
    ("address", "AE D R EH S"),
    ("bill", "B IH L"),
    ("billing", "B IH L IH NG"),
    ("cancel", "K AE N S EL"),
    ("card", "K AA R D"),
    ("change", "CH EY N JH"),
    ("check", "CH EH K"),
    ("i", "AY"),
    ("internet", "IH N T ER N EH T"),
    ("is", "IH Z"),
    ("my", "M AY"),
    ("need", "N IY D"),
    ("new", "N UW"),
    ("order", "AO R D ER"),
    ("password", "P AE S W ER D"),
    ("pay", "P EY"),
    ("payment", "P EY M AX N T"),
    ("phone", "F OW N"),
    ("please", "P L IY Z"),
    ("service", "S ER V IH S"),
    ("the", "DH AX"),
    ("to", "T UW"),
    ("want", "W AA N T"),
    ("what", "W AH T"),
    ("with", "W IH DH"),
    ("you", "Y UW"),
];

impl Lexicon {
    pub fn new(oov_policy: OovPolicy) -> Self {
        Self {
            entries: BTreeMap::new(),
            oov_policy,
        }
    }

    /// Small hand-written lexicon with letter-to-sound fallback.
    pub fn bundled() -> Self {
        let mut lex = Self::new(OovPolicy::LetterToSound);
        for (w, p) in BUNDLED {
            lex.insert(w, p.split_whitespace().map(ToString::to_string).collect());
        }
        lex
    }

    pub fn insert(&mut self, word: &str, phones: Vec<String>) {
        self.entries.insert(word.to_string(), phones);
    }

    pub fn get(&self, word: &str) -> Option<&[String]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.entries.iter().map(|(w, p)| (w.as_str(), p.as_slice()))
    }

    pub fn pronounce(&self, word: &str) -> Result<Vec<String>, UnitError> {
        if let Some(p) = self.entries.get(word) {
            return Ok(p.clone());
        }
        match self.oov_policy {
            OovPolicy::Error => Err(UnitError::OutOfVocabulary(word.to_string())),
            OovPolicy::LetterToSound => Ok(letter_to_sound(word)),
        }
    }

    /// Greedy longest-match segmentation of a phone string into lexicon
    /// words; phones that start no entry are skipped.
    pub fn phones_to_words(&self, phones: &[String]) -> Vec<String> {
        let mut by_len: Vec<(&String, &Vec<String>)> = self.entries.iter().collect();
        by_len.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(b.0)));
        let mut out = Vec::new();
        let mut i = 0;
        while i < phones.len() {
            match by_len
                .iter()
                .find(|(_, p)| !p.is_empty() && phones[i..].starts_with(p))
            {
                Some((w, p)) => {
                    out.push((*w).clone());
                    i += p.len();
                }
                None => i += 1,
            }
        }
        out
    }
}

/// Rule-based spelling → phones: common digraphs first, then single letters.
pub fn letter_to_sound(word: &str) -> Vec<String> {
    const DIGRAPHS: &[(&str, &[&str])] = &[
        ("ch", &["CH"]),
        ("sh", &["SH"]),
        ("th", &["TH"]),
        ("ng", &["NG"]),
        ("ph", &["F"]),
        ("ck", &["K"]),
        ("ee", &["IY"]),
        ("ea", &["IY"]),
        ("oo", &["UW"]),
        ("ou", &["AW"]),
        ("ai", &["EY"]),
        ("ay", &["EY"]),
        ("oi", &["OY"]),
        ("ow", &["OW"]),
        ("qu", &["K", "W"]),
        ("er", &["ER"]),
    ];
    let single = |c: u8| -> &'static [&'static str] {
        match c {
            b'a' => &["AE"],
            b'b' => &["B"],
            b'c' => &["K"],
            b'd' => &["D"],
            b'e' => &["EH"],
            b'f' => &["F"],
            b'g' => &["G"],
            b'h' => &["HH"],
            b'i' => &["IH"],
            b'j' => &["JH"],
            b'k' => &["K"],
            b'l' => &["L"],
            b'm' => &["M"],
            b'n' => &["N"],
            b'o' => &["AA"],
            b'p' => &["P"],
            b'q' => &["K"],
            b'r' => &["R"],
            b's' => &["S"],
            b't' => &["T"],
            b'u' => &["AH"],
            b'v' => &["V"],
            b'w' => &["W"],
            b'x' => &["K", "S"],
            b'y' => &["Y"],
            b'z' => &["Z"],
            _ => &[],
        }
    };
    let w = normalize_text(word);
    let b = w.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        if let Some((d, ph)) = DIGRAPHS
            .iter()
            .find(|(d, _)| b[i..].starts_with(d.as_bytes()))
        {
            out.extend(ph.iter().map(|p| p.to_string()));
            i += d.len();
        } else {
            out.extend(single(b[i]).iter().map(|p| p.to_string()));
            i += 1;
        }
    }
    // Doubled consonants are one phone.
    out.dedup();
    out
}
