//! Generated call-center style benchmark: intent templates with slot
//! fillers, speaker assignment, and a general-domain pretraining text set.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusError, DatasetManifest, UtteranceRecord};
use crate::rng::SeededRng;

/// Intent label and its trigger phrases, most frequent first.
pub const INTENTS: [(&str, [&str; 6]); 12] = [
    (
        "billing",
        [
            "check my bill",
            "explain my bill",
            "see my charges",
            "review my statement",
            "dispute a charge",
            "itemize my invoice",
        ],
    ),
    (
        "payment",
        [
            "pay my bill",
            "make a payment",
            "set up autopay",
            "pay with a card",
            "schedule a payment",
            "remit the balance",
        ],
    ),
    (
        "cancel",
        [
            "cancel my service",
            "close my account",
            "end my contract",
            "stop my plan",
            "terminate the line",
            "discontinue service",
        ],
    ),
    (
        "upgrade",
        [
            "upgrade my phone",
            "get a new phone",
            "change my plan",
            "add more data",
            "switch to unlimited",
            "trade in my device",
        ],
    ),
    (
        "outage",
        [
            "report an outage",
            "my internet is down",
            "no signal at home",
            "the network is slow",
            "calls keep dropping",
            "fix my connection",
        ],
    ),
    (
        "password",
        [
            "reset my password",
            "change my pin",
            "unlock my account",
            "i forgot my login",
            "recover my username",
            "update security questions",
        ],
    ),
    (
        "address",
        [
            "change my address",
            "update my address",
            "i am moving",
            "move service to a new home",
            "correct my mailing address",
            "relocate my service",
        ],
    ),
    (
        "refund",
        [
            "get a refund",
            "return my phone",
            "money back",
            "reverse a charge",
            "credit my account",
            "reimburse the fee",
        ],
    ),
    (
        "technician",
        [
            "schedule a technician",
            "book an appointment",
            "send someone out",
            "install my modem",
            "repair my equipment",
            "arrange a visit",
        ],
    ),
    (
        "roaming",
        [
            "use my phone abroad",
            "international roaming",
            "a travel plan",
            "calling overseas",
            "activate roaming",
            "passport package",
        ],
    ),
    (
        "balance",
        [
            "check my balance",
            "how much do i owe",
            "my account balance",
            "remaining minutes",
            "data usage",
            "amount due",
        ],
    ),
    (
        "agent",
        [
            "talk to an agent",
            "speak to a person",
            "a real human",
            "customer service representative",
            "operator please",
            "escalate to a supervisor",
        ],
    ),
];

const OPENINGS: [&str; 10] = [
    "",
    "hi",
    "hello",
    "yes",
    "um",
    "i want to",
    "i need to",
    "i would like to",
    "can i",
    "please help me",
];
const TAILS: [&str; 8] = [
    "",
    "",
    "please",
    "today",
    "right now",
    "thanks",
    "for my {d}",
    "on my {d}",
];
const DEVICES: [&str; 4] = ["phone", "tablet", "modem", "home line"];

const GENERAL_WORDS: [&str; 48] = [
    "the", "a", "and", "to", "of", "in", "it", "is", "that", "you", "we", "they", "was", "for",
    "on", "with", "as", "have", "this", "be", "at", "one", "all", "there", "what", "so", "up",
    "out", "if", "about", "who", "get", "which", "go", "me", "when", "make", "like", "time", "no",
    "just", "him", "know", "take", "people", "into", "year", "good",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub intents: usize,
    pub train_speakers: usize,
    pub test_speakers: usize,
    /// Exponent of the Zipf weighting over trigger phrases.
    pub zipf: f64,
    pub seed: u64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            train: 2100,
            dev: 300,
            test: 600,
            intents: 12,
            train_speakers: 40,
            test_speakers: 10,
            zipf: 1.0,
            seed: 2020,
        }
    }
}

impl DeskConfig {
    /// 50 training utterances over 8 intents.
    pub fn toy() -> Self {
        Self {
            train: 50,
            dev: 0,
            test: 0,
            intents: 8,
            train_speakers: 5,
            test_speakers: 1,
            ..Self::default()
        }
    }
}

/// Text-only splits with speakers assigned; audio is attached by a renderer.
#[derive(Clone, Debug, PartialEq)]
pub struct DeskCorpus {
    pub train: DatasetManifest,
    pub dev: DatasetManifest,
    pub test: DatasetManifest,
}

pub fn real_speaker(i: usize) -> String {
    format!("spk-{i:03}")
}

/// Speaker ids used for synthetic speech; disjoint from every real speaker.
pub fn tts_speakers(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("tts-{i:03}")).collect()
}

fn pick_weighted(rng: &mut SeededRng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.uniform() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// One utterance of `intent` (index into [`INTENTS`]).
pub fn sentence(rng: &mut SeededRng, intent: usize, zipf: f64) -> String {
    let weights: Vec<f64> = (0..6).map(|r| libm::pow(r as f64 + 1.0, -zipf)).collect();
    let trigger = INTENTS[intent].1[pick_weighted(rng, &weights)];
    let opening = if rng.uniform() < 0.5 {
        ""
    } else {
        OPENINGS[rng.below(OPENINGS.len())]
    };
    let tail = TAILS[rng.below(TAILS.len())].replace("{d}", DEVICES[rng.below(DEVICES.len())]);
    [opening, trigger, tail.as_str()]
        .iter()
        .filter(|s| !s.is_empty())
        .copied()
        .collect::<Vec<_>>()
        .join(" ")
}

fn split(
    name: &str,
    n: usize,
    speakers: core::ops::Range<usize>,
    cfg: &DeskConfig,
    rng: &mut SeededRng,
) -> Result<DatasetManifest, CorpusError> {
    let records = (0..n)
        .map(|i| {
            let intent = i % cfg.intents;
            let mut r = UtteranceRecord::text(
                &format!("{name}-{i:05}"),
                &sentence(rng, intent, cfg.zipf),
                INTENTS[intent].0,
            );
            r.speaker = real_speaker(speakers.start + rng.below(speakers.len()));
            r
        })
        .collect::<Vec<_>>();
    let mut records = records;
    rng.shuffle(&mut records);
    DatasetManifest::new(name, records)
}

/// Train speakers and test speakers are disjoint; dev shares the train pool.
pub fn generate(cfg: &DeskConfig) -> Result<DeskCorpus, CorpusError> {
    assert!(
        (1..=INTENTS.len()).contains(&cfg.intents),
        "intent count out of range"
    );
    let mut rng = SeededRng::derive(cfg.seed, "desk-corpus");
    let train_pool = 0..cfg.train_speakers;
    let test_pool = cfg.train_speakers..cfg.train_speakers + cfg.test_speakers;
    Ok(DeskCorpus {
        train: split("train", cfg.train, train_pool.clone(), cfg, &mut rng)?,
        dev: split("dev", cfg.dev, train_pool, cfg, &mut rng)?,
        test: split("test", cfg.test, test_pool, cfg, &mut rng)?,
    })
}

/// Vocabulary of the domain sentences plus common function words.
pub fn general_vocabulary() -> Vec<String> {
    let mut words: Vec<String> = GENERAL_WORDS.iter().map(|w| w.to_string()).collect();
    let phrases = INTENTS
        .iter()
        .flat_map(|(_, t)| t.iter())
        .chain(OPENINGS.iter())
        .chain(TAILS.iter())
        .chain(DEVICES.iter());
    for p in phrases {
        for w in p.split_whitespace().filter(|w| !w.starts_with('{')) {
            words.push(w.to_string());
        }
    }
    words.sort();
    words.dedup();
    words
}

/// Transcribed speech without intent labels, for acoustic pretraining:
/// random word strings of 2 to 6 words from [`general_vocabulary`].
pub fn pretraining_corpus(
    n: usize,
    speakers: usize,
    seed: u64,
) -> Result<DatasetManifest, CorpusError> {
    let vocab = general_vocabulary();
    let mut rng = SeededRng::derive(seed, "desk-pretrain");
    let records = (0..n)
        .map(|i| {
            let len = 2 + rng.below(5);
            let text: Vec<&str> = (0..len)
                .map(|_| vocab[rng.below(vocab.len())].as_str())
                .collect();
            let mut r = UtteranceRecord::text(&format!("gen-{i:05}"), &text.join(" "), "");
            r.intents.clear();
            r.speaker = format!("gen-{:03}", rng.below(speakers.max(1)));
            r
        })
        .collect();
    DatasetManifest::new("pretrain", records)
}
