//! Metrics rows, per-experiment summaries, and the recovery column.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};
use slu_core::metrics::recovery;

use super::config::{Pipeline, RecoverySpec};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub test: usize,
    pub correct: usize,
    pub unscorable: usize,
    pub missing_predictions: usize,
    pub train_speech: usize,
    pub train_text: usize,
    pub synthetic: usize,
    pub dropped_synthetic: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    Failed { stage: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub name: String,
    pub pipeline: Pipeline,
    pub seed: u64,
    pub config_hash: String,
    #[serde(flatten)]
    pub status: RowStatus,
    pub wer: Option<f64>,
    pub intent_accuracy: Option<f64>,
    pub counts: Counts,
    /// Decode WER on a sample of synthetic speech, when TTS data was used.
    pub synthetic_wer: Option<f64>,
    pub elapsed_s: f64,
}

impl MetricsRow {
    pub fn ok(&self) -> bool {
        self.status == RowStatus::Ok
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub producer: String,
    pub os: String,
    pub arch: String,
    pub seeds: Vec<u64>,
}

impl Environment {
    pub fn current(seeds: Vec<u64>) -> Self {
        Self {
            producer: concat!("slu ", env!("CARGO_PKG_VERSION")).into(),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            seeds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub environment: Environment,
    pub recovery: Option<RecoverySpec>,
}

/// Mean metrics of one experiment over its successful seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub pipeline: Pipeline,
    pub runs: usize,
    pub failed: usize,
    pub wer: Option<f64>,
    pub intent_accuracy: Option<f64>,
    pub recovery: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricsReport {
    pub fn all_ok(&self) -> bool {
        self.rows.iter().all(MetricsRow::ok)
    }

    /// One summary per experiment name, in first-appearance order.
    pub fn summaries(&self) -> Vec<Summary> {
        let mut order: Vec<&str> = Vec::new();
        let mut groups: BTreeMap<&str, Vec<&MetricsRow>> = BTreeMap::new();
        for r in &self.rows {
            if !groups.contains_key(r.name.as_str()) {
                order.push(&r.name);
            }
            groups.entry(&r.name).or_default().push(r);
        }
        let mut out: Vec<Summary> = order
            .iter()
            .map(|name| {
                let rows = &groups[name];
                let ok: Vec<&&MetricsRow> = rows.iter().filter(|r| r.ok()).collect();
                Summary {
                    name: name.to_string(),
                    pipeline: rows[0].pipeline,
                    runs: rows.len(),
                    failed: rows.len() - ok.len(),
                    wer: mean(ok.iter().filter_map(|r| r.wer)),
                    intent_accuracy: mean(ok.iter().filter_map(|r| r.intent_accuracy)),
                    recovery: None,
                }
            })
            .collect();
        if let Some(spec) = &self.recovery {
            let acc = |n: &str| out.iter().find(|s| s.name == n).and_then(|s| s.intent_accuracy);
            if let (Some(low), Some(full)) = (acc(&spec.low), acc(&spec.full)) {
                for s in &mut out {
                    s.recovery = s.intent_accuracy.and_then(|a| recovery(a, low, full));
                }
            }
        }
        out
    }

    /// Machine-readable form: rows plus summaries.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            #[serde(flatten)]
            report: &'a MetricsReport,
            summary: Vec<Summary>,
        }
        serde_json::to_string_pretty(&Out {
            report: self,
            summary: self.summaries(),
        })
        .expect("report serializes")
    }

    /// Plain-text tables: per-run rows, then per-experiment means.
    pub fn to_text(&self) -> String {
        let pct = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{:.1}%", 100.0 * v));
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:<14} {:>5} {:>8} {:>8}  status", "experiment", "pipeline", "seed", "WER", "IntAcc");
        for r in &self.rows {
            let status = match &r.status {
                RowStatus::Ok => "ok".to_string(),
                RowStatus::Failed { stage, message } => format!("failed in {stage}: {message}"),
            };
            let _ = writeln!(
                s,
                "{:<24} {:<14} {:>5} {:>8} {:>8}  {status}",
                r.name,
                pipeline_name(r.pipeline),
                r.seed,
                pct(r.wer),
                pct(r.intent_accuracy)
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<24} {:<14} {:>5} {:>8} {:>8} {:>9}", "experiment", "pipeline", "runs", "WER", "IntAcc", "recovery");
        for m in self.summaries() {
            let rec = match (&self.recovery, m.recovery) {
                (None, _) => "-".to_string(),
                (Some(_), None) => "n/a".to_string(),
                (Some(_), Some(v)) => format!("{v:.2}"),
            };
            let _ = writeln!(
                s,
                "{:<24} {:<14} {:>5} {:>8} {:>8} {:>9}",
                m.name,
                pipeline_name(m.pipeline),
                m.runs - m.failed,
                pct(m.wer),
                pct(m.intent_accuracy),
                rec
            );
        }
        s
    }
}

pub fn pipeline_name(p: Pipeline) -> &'static str {
    match p {
        Pipeline::Cascade => "cascade",
        Pipeline::E2e => "e2e",
        Pipeline::E2eJoint => "e2e_joint",
        Pipeline::E2eTts => "e2e_tts",
        Pipeline::E2eJointTts => "e2e_joint_tts",
    }
}
