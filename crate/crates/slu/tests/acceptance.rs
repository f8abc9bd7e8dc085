//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=3,5` runs a subset. The desk matrix shares its stage
//! cache with the CLI under `target/tmp`, or `$SLU_CACHE_DIR` when set.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use slu::desk::{prepare, PrepareOptions, Prepared};
use slu::harness::{load_matrix, MetricsReport, Runner, Stage, CACHE_ENV};
use slu::io::{read_manifest, read_wav, resolve, write_wav, FeatureStore};
use slu_core::am::{AcousticEncoder, EncoderConfig, SpeechExample, UnitVocabulary, ENCODER_TAG};
use slu_core::autograd::{Gradients, Graph};
use slu_core::corpus::{DatasetManifest, Provenance};
use slu_core::desk::{generate, DeskConfig};
use slu_core::frontend::{apply_transform, extract_features, perturb, FeatureConfig, PerturbationPolicy};
use slu_core::joint::{joint_train, JointItem, JointModel, JointTrainConfig};
use slu_core::loss::{ctc_loss, softmax_cross_entropy};
use slu_core::metrics::wer;
use slu_core::rng::SeededRng;
use slu_core::s2i::{accuracy, classify_intent, train_s2i_with, MultiTaskConfig, S2iModel, CLASSIFIER_TAG};
use slu_core::t2i::{intent_finetune, text_accuracy, Bpe, T2iModel, TextConfig, TextEncoder, TextExample, TEXT_TAG};
use slu_core::train::TrainConfig;
use slu_core::tts::StubVoice;

const CTC_ORACLE_TOL: f64 = 1e-6;
const FD_REL_TOL: f64 = 1e-3;
const FD_FLOOR: f64 = 1e-4;
const BREAKDOWN_TOL: f64 = 1e-6;
const DURATION_TOL: f64 = 0.02;
const OVERFIT_TARGET: f64 = 0.98;
const OVERFIT_EPOCHS: usize = 60;
const RECOVERY_TARGET: f64 = 0.5;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn tmp_root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
}

fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| tmp_root().join("slu-cache"))
}

/// The rendered desk corpus, created on first use.
fn desk() -> Prepared {
    let dir = tmp_root().join("desk");
    let p = Prepared {
        dir: dir.clone(),
        train: dir.join("train.jsonl"),
        dev: dir.join("dev.jsonl"),
        test: dir.join("test.jsonl"),
        pretrain: dir.join("pretrain.jsonl"),
        matrix: dir.join("matrix.toml"),
    };
    if [&p.train, &p.dev, &p.test, &p.pretrain, &p.matrix].iter().all(|f| f.exists()) {
        return p;
    }
    prepare(&dir, &PrepareOptions::default()).expect("desk corpus renders")
}

fn speech(manifest: &DatasetManifest, voice: &StubVoice) -> Vec<SpeechExample> {
    manifest
        .records()
        .iter()
        .map(|r| SpeechExample {
            id: r.id.clone(),
            features: extract_features(&voice.render(&r.transcript, &r.speaker), &FeatureConfig::default(), &r.id, Provenance::Real)
                .unwrap()
                .frames,
            transcript: r.transcript.clone(),
            intent: r.intents.first().cloned(),
        })
        .collect()
}

fn texts(manifest: &DatasetManifest) -> Vec<TextExample> {
    manifest
        .records()
        .iter()
        .map(|r| TextExample {
            id: r.id.clone(),
            text: r.transcript.clone(),
            intent: r.intents.first().cloned(),
        })
        .collect()
}

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        stack: 3,
        layers: 1,
        hidden_per_direction: 32,
        dropout: 0.0,
        ..EncoderConfig::default()
    }
}

fn small_text(vocab_size: usize) -> TextConfig {
    TextConfig {
        layers: 1,
        heads: 2,
        width: 32,
        ffn_width: 64,
        max_len: 32,
        vocab_size,
        dropout: 0.0,
    }
}

fn log_softmax_rows(rng: &mut SeededRng, frames: usize, units: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(frames * units);
    for _ in 0..frames {
        let z: Vec<f64> = (0..units).map(|_| 2.0 * rng.normal()).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        out.extend(z.iter().map(|v| v - lse));
    }
    out
}

/// Sum over every frame-level path that collapses to `target`.
fn ctc_enumerated(lp: &[f64], units: usize, target: &[usize]) -> f64 {
    let frames = lp.len() / units;
    let mut total = 0.0;
    for code in 0..units.pow(frames as u32) {
        let path: Vec<usize> = (0..frames).map(|t| code / units.pow(t as u32) % units).collect();
        let mut collapsed = Vec::new();
        for (t, &u) in path.iter().enumerate() {
            if u != 0 && (t == 0 || path[t - 1] != u) {
                collapsed.push(u);
            }
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(t, &u)| lp[t * units + u]).sum::<f64>().exp();
        }
    }
    -total.ln()
}

fn c1_ctc_oracle() -> Outcome {
    let mut rng = SeededRng::new(20_200_601);
    let (mut n, mut worst) = (0, 0.0f64);
    while n < 200 {
        let units = 2 + rng.below(3);
        let frames = 1 + rng.below(6);
        let target: Vec<usize> = (0..rng.below(frames + 1)).map(|_| 1 + rng.below(units - 1)).collect();
        let lp = log_softmax_rows(&mut rng, frames, units);
        let want = ctc_enumerated(&lp, units, &target);
        match ctc_loss(&lp, units, &target, 0) {
            Ok(out) => worst = worst.max((out.loss - want).abs()),
            Err(_) => ensure(want.is_infinite(), format!("rejected a feasible target {target:?} over {frames} frames"))?,
        }
        n += 1;
    }
    ensure(worst < CTC_ORACLE_TOL, format!("max |diff| {worst:.2e}"))?;
    Ok(format!("200 instances, max |diff| {worst:.2e} < {CTC_ORACLE_TOL:.0e}"))
}

fn relative_error(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(FD_FLOOR)
}

fn c2_finite_differences() -> Outcome {
    let mut rng = SeededRng::new(7);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut n = 0;
    while n < 20 {
        let units = 3 + rng.below(3);
        let frames = 3 + rng.below(5);
        let target: Vec<usize> = (0..1 + rng.below(3)).map(|_| 1 + rng.below(units - 1)).collect();
        let lp = log_softmax_rows(&mut rng, frames, units);
        let Ok(out) = ctc_loss(&lp, units, &target, 0) else { continue };
        for i in 0..lp.len() {
            let (mut up, mut dn) = (lp.clone(), lp.clone());
            up[i] += h;
            dn[i] -= h;
            let fd = (ctc_loss(&up, units, &target, 0).unwrap().loss - ctc_loss(&dn, units, &target, 0).unwrap().loss) / (2.0 * h);
            worst = worst.max(relative_error(fd, out.grad[i]));
        }
        n += 1;
    }
    let ctc_worst = worst;
    worst = 0.0;
    for _ in 0..20 {
        let k = 2 + rng.below(10);
        let logits: Vec<f64> = (0..k).map(|_| 3.0 * rng.normal()).collect();
        let target = rng.below(k);
        let (_, grad) = softmax_cross_entropy(&logits, target);
        for i in 0..k {
            let (mut up, mut dn) = (logits.clone(), logits.clone());
            up[i] += h;
            dn[i] -= h;
            let fd = (softmax_cross_entropy(&up, target).0 - softmax_cross_entropy(&dn, target).0) / (2.0 * h);
            worst = worst.max(relative_error(fd, grad[i]));
        }
    }
    ensure(ctc_worst < FD_REL_TOL && worst < FD_REL_TOL, format!("CTC {ctc_worst:.2e}, CE {worst:.2e}"))?;
    Ok(format!("20+20 instances, max rel err CTC {ctc_worst:.2e}, CE {worst:.2e} < {FD_REL_TOL:.0e}"))
}

/// Untrained speech and text models over the toy corpus, sharing a width.
fn toy_models(seed: u64) -> (Vec<SpeechExample>, S2iModel, T2iModel) {
    let corpus = generate(&DeskConfig::toy()).unwrap();
    let data = speech(&corpus.train, &StubVoice::default());
    let vocab = corpus.train.intent_vocab().clone();
    let am = AcousticEncoder::new(&small_encoder(), UnitVocabulary::graphemes(), None, seed);
    let s2i = S2iModel::from_acoustic(&am, vocab.clone(), Some(32), seed);
    let bpe = Bpe::train(data.iter().map(|e| e.transcript.as_str()), 300);
    let t2i = T2iModel::new(TextEncoder::new(&small_text(300), bpe, seed).unwrap(), vocab, seed);
    (data, s2i, t2i)
}

fn grads(model: &JointModel, items: &[&JointItem], pick: &dyn Fn(&slu_core::joint::JointTerms) -> slu_core::autograd::Var) -> Gradients {
    let mut g = Graph::inference();
    let t = model.terms(&mut g, items).unwrap();
    let v = pick(&t);
    g.backward(v)
}

fn mse_value(model: &JointModel, items: &[&JointItem]) -> f64 {
    let mut g = Graph::inference();
    let t = model.terms(&mut g, items).unwrap();
    f64::from(g.value(t.mse).item())
}

fn nonzero(g: &Gradients, tag: u8) -> bool {
    g.for_store(tag).any(|(_, m)| m.sum_sq() > 0.0)
}

fn c3_gradient_stop() -> Outcome {
    let (data, s2i, t2i) = toy_models(3);
    let mut model = JointModel::new(&s2i, &t2i, &JointTrainConfig::default()).unwrap();
    let (items, _) = model.prepare(&data[..8]).unwrap();
    let batch: Vec<&JointItem> = items.iter().collect();

    let g_mse = grads(&model, &batch, &|t| t.mse);
    let text_mass: f64 = g_mse.for_store(TEXT_TAG).map(|(_, m)| m.sum_sq()).sum();
    ensure(text_mass == 0.0, format!("MSE gradient reaches text encoder (sum sq {text_mass})"))?;
    ensure(nonzero(&g_mse, ENCODER_TAG), "MSE gradient missing on speech encoder")?;

    let g_ae = grads(&model, &batch, &|t| t.ce_ae);
    let g_te = grads(&model, &batch, &|t| t.ce_te);
    ensure(nonzero(&g_ae, ENCODER_TAG) && nonzero(&g_ae, CLASSIFIER_TAG), "CE(AE) does not reach speech branch and classifier")?;
    ensure(nonzero(&g_te, TEXT_TAG) && nonzero(&g_te, CLASSIFIER_TAG), "CE(TE) does not reach text branch and classifier")?;

    // Probe: the MSE value moves when a live text parameter moves.
    let live: Vec<(usize, usize)> = g_te
        .for_store(TEXT_TAG)
        .flat_map(|(p, m)| m.data().iter().enumerate().filter(|(_, v)| v.abs() > 1e-6).map(move |(i, _)| (p, i)).collect::<Vec<_>>())
        .collect();
    let mut rng = SeededRng::new(11);
    let (p, i) = live[rng.below(live.len())];
    let h = 1e-2f32;
    let base = model.text.encoder.store.get(p).data()[i];
    model.text.encoder.store.get_mut(p).data_mut()[i] = base + h;
    let up = mse_value(&model, &batch);
    model.text.encoder.store.get_mut(p).data_mut()[i] = base - h;
    let dn = mse_value(&model, &batch);
    let fd = (up - dn) / (2.0 * f64::from(h));
    ensure(fd != 0.0, "finite-difference probe of MSE w.r.t. text parameter is zero")?;
    Ok(format!(
        "implemented dMSE/dtext = 0 exactly; probe on `{}`[{i}] gives {fd:.2e}",
        model.text.encoder.store.name(p)
    ))
}

fn c4_breakdown() -> Outcome {
    let (data, s2i, t2i) = toy_models(4);
    let cfg = JointTrainConfig {
        alpha: 0.5,
        train: TrainConfig {
            epochs: 8,
            batch_size: 4,
            seed: 4,
            ..TrainConfig::default()
        },
        ..JointTrainConfig::default()
    };
    let out = joint_train(&data, &[], &s2i, &t2i, &cfg).map_err(|e| e.to_string())?;
    ensure(out.steps.len() >= 100, format!("only {} steps", out.steps.len()))?;
    let mut worst = 0.0f64;
    for b in &out.steps[..100] {
        worst = worst
            .max((b.speech_branch_total - (b.mse + b.ce_ae + b.alpha * b.ce_te)).abs())
            .max((b.text_branch_total - (b.ce_ae + b.alpha * b.ce_te)).abs());
    }
    ensure(worst < BREAKDOWN_TOL, format!("max residual {worst:.2e}"))?;
    Ok(format!("100 steps at alpha 0.5, max residual {worst:.2e} < {BREAKDOWN_TOL:.0e}"))
}

/// Levenshtein distance by plain recursion over suffixes, memoized.
fn edit_oracle(r: &[&str], h: &[&str]) -> usize {
    fn go(r: &[&str], h: &[&str], memo: &mut BTreeMap<(usize, usize), usize>) -> usize {
        if r.is_empty() {
            return h.len();
        }
        if h.is_empty() {
            return r.len();
        }
        if let Some(&v) = memo.get(&(r.len(), h.len())) {
            return v;
        }
        let v = if r[0] == h[0] {
            go(&r[1..], &h[1..], memo)
        } else {
            1 + go(&r[1..], h, memo).min(go(r, &h[1..], memo)).min(go(&r[1..], &h[1..], memo))
        };
        memo.insert((r.len(), h.len()), v);
        v
    }
    go(r, h, &mut BTreeMap::new())
}

fn c5_wer_oracle() -> Outcome {
    let words = ["pay", "my", "bill", "the", "card", "cancel", "phone"];
    let mut rng = SeededRng::new(5);
    let mut refs = Vec::new();
    let mut hyps = Vec::new();
    let (mut errors, mut ref_words) = (0, 0);
    for i in 0..1000 {
        let r: Vec<&str> = (0..1 + rng.below(8)).map(|_| words[rng.below(words.len())]).collect();
        let h: Vec<&str> = (0..rng.below(9)).map(|_| words[rng.below(words.len())]).collect();
        let one = wer(&[(i.to_string(), r.join(" "))], &[(i.to_string(), h.join(" "))]).map_err(|e| e.to_string())?;
        let want = edit_oracle(&r, &h);
        ensure(one.errors == want, format!("pair {i}: {} vs oracle {want}", one.errors))?;
        errors += want;
        ref_words += r.len();
        refs.push((i.to_string(), r.join(" ")));
        hyps.push((i.to_string(), h.join(" ")));
    }
    let corpus = wer(&refs, &hyps).map_err(|e| e.to_string())?;
    ensure(corpus.errors == errors && corpus.reference_words == ref_words, "corpus totals differ from oracle")?;
    ensure(corpus.wer == errors as f64 / ref_words as f64, "corpus WER differs from oracle")?;
    let worked = wer(
        &[("u".into(), "i want to pay my bill".into())],
        &[("u".into(), "i want pay my card".into())],
    )
    .map_err(|e| e.to_string())?;
    ensure(
        worked.errors == 2 && (worked.wer - 0.333).abs() < 5e-4,
        format!("worked example gives {}", worked.wer),
    )?;
    Ok(format!("1000 pairs exact, corpus WER {:.4}; worked example {:.3}", corpus.wer, worked.wer))
}

fn c6_augmentation() -> Outcome {
    let d = desk();
    let train = read_manifest(&d.train).map_err(|e| e.to_string())?;
    let p = perturb(&train, &PerturbationPolicy::default()).map_err(|e| e.to_string())?;
    ensure(p.len() == 5 * train.len(), format!("{} records from {}", p.len(), train.len()))?;
    let ratio = p.total_duration_s() / train.total_duration_s();
    ensure((ratio - 5.0).abs() / 5.0 <= DURATION_TOL, format!("duration ratio {ratio:.4}"))?;
    // The declared durations match the audio the transforms produce.
    let mut worst = 0.0f64;
    for r in p.records().iter().take(50) {
        let a = r.audio.as_ref().unwrap();
        let wave = apply_transform(&read_wav(&resolve(&d.dir, a)).map_err(|e| e.to_string())?, a.transform);
        worst = worst.max((wave.duration_s() - r.duration_s).abs() / r.duration_s);
    }
    ensure(worst <= DURATION_TOL, format!("rendered duration off by {:.2}%", 100.0 * worst))?;
    Ok(format!(
        "{} -> {} records, {:.2} h -> {:.2} h (x{ratio:.3}); rendered audio within {:.2}%",
        train.len(),
        p.len(),
        train.total_duration_s() / 3600.0,
        p.total_duration_s() / 3600.0,
        100.0 * worst
    ))
}

fn c7_overfit() -> Outcome {
    let corpus = generate(&DeskConfig::toy()).unwrap();
    ensure(corpus.train.len() == 50, "toy corpus is not 50 utterances")?;
    let data = speech(&corpus.train, &StubVoice::default());
    let vocab = corpus.train.intent_vocab().clone();

    let am = AcousticEncoder::new(&small_encoder(), UnitVocabulary::graphemes(), None, 1);
    let cfg = MultiTaskConfig {
        embedding_dim: Some(32),
        train: TrainConfig {
            epochs: OVERFIT_EPOCHS,
            batch_size: 8,
            seed: 1,
            ..TrainConfig::default().with_lr(3e-3)
        },
        ..MultiTaskConfig::default()
    };
    let mut s2i_first = None;
    let mut on_epoch = |e: &slu_core::train::EpochLog, m: &S2iModel| {
        if s2i_first.is_none() && accuracy(m, &data).unwrap().unwrap_or(0.0) >= OVERFIT_TARGET {
            s2i_first = Some(e.epoch);
        }
    };
    let (s2i, _) = train_s2i_with(&am, &data, &[], &vocab, &cfg, &mut on_epoch).map_err(|e| e.to_string())?;
    let s2i_acc = accuracy(&s2i, &data).unwrap().unwrap();

    let text = texts(&corpus.train);
    let bpe = Bpe::train(text.iter().map(|e| e.text.as_str()), 300);
    let enc = TextEncoder::new(&small_text(300), bpe, 1).unwrap();
    let tc = TrainConfig {
        epochs: OVERFIT_EPOCHS,
        batch_size: 8,
        seed: 1,
        ..TrainConfig::default().with_lr(1e-3)
    };
    let (t2i, report) = intent_finetune(&enc, &text, &text, &vocab, &tc).map_err(|e| e.to_string())?;
    let t2i_acc = text_accuracy(&t2i, &text).unwrap().unwrap();
    let t2i_first = report.epochs.iter().find(|e| e.heldout_accuracy.unwrap_or(0.0) >= OVERFIT_TARGET).map(|e| e.epoch);

    ensure(
        s2i_acc >= OVERFIT_TARGET && t2i_acc >= OVERFIT_TARGET,
        format!("training accuracy S2I {s2i_acc:.3}, T2I {t2i_acc:.3}"),
    )?;
    Ok(format!(
        "training accuracy S2I {:.1}% (first >= 98% at epoch {}), T2I {:.1}% (epoch {}) within {OVERFIT_EPOCHS} epochs",
        100.0 * s2i_acc,
        s2i_first.map_or("-".into(), |e| e.to_string()),
        100.0 * t2i_acc,
        t2i_first.map_or("-".into(), |e| e.to_string()),
    ))
}

fn run_desk_matrix() -> MetricsReport {
    let d = desk();
    let matrix = load_matrix(&d.matrix).expect("desk matrix parses");
    Runner::new(cache_dir()).run_matrix(&matrix)
}

fn c8_trend() -> Outcome {
    let report = run_desk_matrix();
    let text = report.to_text();
    for line in text.lines() {
        println!("    {line}");
    }
    ensure(report.all_ok(), "some runs failed")?;
    let s = report.summaries();
    let acc = |name: &str| s.iter().find(|x| x.name == name).and_then(|x| x.intent_accuracy).unwrap();
    let (low, joint, tts, full) = (acc("e2e@10"), acc("joint@10"), acc("tts@10"), acc("e2e@100"));
    let best = joint.max(tts);
    let recovery = (best - low) / (full - low);
    let summary = format!(
        "means over seeds 1-3: e2e@10 {:.1}% < joint@10 {:.1}% <= tts@10 {:.1}%; e2e@100 {:.1}%; recovery {recovery:.2}",
        100.0 * low,
        100.0 * joint,
        100.0 * tts,
        100.0 * full
    );
    ensure(low < joint && joint <= tts && recovery >= RECOVERY_TARGET, summary.clone())?;
    Ok(summary)
}

fn c9_branch_discard() -> Outcome {
    let d = desk();
    let matrix = load_matrix(&d.matrix).expect("desk matrix parses");
    let cfg = matrix.experiments.iter().find(|e| e.name == "joint@10").expect("joint row").clone();
    let runner = Runner::new(cache_dir());
    let path = runner.run_stage(&cfg, Stage::JointTrain).map_err(|e| e.to_string())?;
    let (joint, _) = slu::checkpoint::load::<JointModel>(&path).map_err(|e| e.to_string())?;

    let mut stripped = joint.deployable();
    stripped.ctc_head = None;
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("deploy.json");
    slu::checkpoint::save(&ckpt, &stripped, "").map_err(|e| e.to_string())?;
    let (deployed, _) = slu::checkpoint::load::<S2iModel>(&ckpt).map_err(|e| e.to_string())?;
    ensure(deployed.ctc_head.is_none(), "CTC head survived")?;

    let test = read_manifest(&d.test).map_err(|e| e.to_string())?;
    let store = FeatureStore::new(Some(cache_dir()), cfg.model.features.clone());
    let mut changed = 0;
    for r in test.records() {
        let x = store.features(&d.dir, r).map_err(|e| e.to_string())?;
        let full = classify_intent(&joint.speech, &x).map_err(|e| e.to_string())?;
        let lean = classify_intent(&deployed, &x).map_err(|e| e.to_string())?;
        changed += usize::from(full.label != lean.label || full.probability != lean.probability);
    }
    ensure(changed == 0, format!("{changed} predictions changed"))?;
    let full_bytes = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
    let lean_bytes = std::fs::metadata(&ckpt).map(|m| m.len()).unwrap_or(0);
    Ok(format!(
        "0 of {} predictions changed; checkpoint {:.1} MB -> {:.1} MB",
        test.len(),
        full_bytes as f64 / 1e6,
        lean_bytes as f64 / 1e6
    ))
}

fn c10_determinism() -> Outcome {
    let data = tempfile::tempdir().unwrap();
    let opts = PrepareOptions {
        desk: DeskConfig {
            dev: 16,
            test: 16,
            ..DeskConfig::toy()
        },
        pretrain_utterances: 40,
        ..PrepareOptions::default()
    };
    let p = prepare(data.path(), &opts).map_err(|e| e.to_string())?;
    let mut matrix = load_matrix(&p.matrix).map_err(|e| e.to_string())?;
    for e in &mut matrix.experiments {
        e.train.am.epochs = 2;
        e.train.s2i.train.epochs = 2;
        e.train.joint.train.epochs = 2;
        e.train.mlm.train.epochs = 1;
        e.train.t2i.epochs = 2;
    }
    let cfg = matrix.experiments.iter().find(|e| e.name == "tts@10").unwrap().clone();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (Runner::new(a.path()).run_experiment(&cfg), Runner::new(b.path()).run_experiment(&cfg));
    ensure(ra.ok() && rb.ok(), format!("run failed: {:?} / {:?}", ra.status, rb.status))?;
    ensure(ra.config_hash == rb.config_hash, "config hash differs")?;
    ensure(
        ra.intent_accuracy == rb.intent_accuracy && ra.wer == rb.wer && ra.counts == rb.counts && ra.synthetic_wer == rb.synthetic_wer,
        format!("metrics differ: {:?} vs {:?}", ra.intent_accuracy, rb.intent_accuracy),
    )?;
    let preds = |d: &Path| std::fs::read(Runner::new(d).run_dir(&cfg).join("predictions.tsv")).unwrap();
    ensure(preds(a.path()) == preds(b.path()), "predictions differ")?;

    let synth = |d: &Path| Runner::new(d).run_stage(&cfg, Stage::Synth).unwrap();
    let (ma, mb) = (synth(a.path()), synth(b.path()));
    let manifest = read_manifest(&ma).map_err(|e| e.to_string())?;
    let mut compared = 0;
    for r in manifest.records() {
        let rel = &r.audio.as_ref().unwrap().path;
        let x = std::fs::read(ma.parent().unwrap().join(rel)).unwrap();
        let y = std::fs::read(mb.parent().unwrap().join(rel)).unwrap();
        ensure(x == y, format!("synthetic audio for {} differs", r.id))?;
        compared += 1;
    }
    let voice = StubVoice { seed: 42, ..StubVoice::default() };
    let (wa, wb) = (a.path().join("x.wav"), b.path().join("x.wav"));
    write_wav(&wa, &voice.render("pay my bill", "tts-003")).unwrap();
    write_wav(&wb, &voice.render("pay my bill", "tts-003")).unwrap();
    ensure(std::fs::read(&wa).unwrap() == std::fs::read(&wb).unwrap(), "stub audio differs")?;
    Ok(format!(
        "row {} reproduced in a fresh cache (accuracy {:.3}); {compared} synthetic WAVs byte-identical",
        ra.config_hash,
        ra.intent_accuracy.unwrap_or(f64::NAN)
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("CTC matches alignment enumeration", c1_ctc_oracle),
        ("gradients match finite differences", c2_finite_differences),
        ("MSE gradient stops at the text branch", c3_gradient_stop),
        ("loss breakdown adds up", c4_breakdown),
        ("WER matches edit-distance oracle", c5_wer_oracle),
        ("perturbation gives 5x data", c6_augmentation),
        ("toy corpus overfits", c7_overfit),
        ("desk trend and recovery", c8_trend),
        ("discarding CTC head and text branch", c9_branch_discard),
        ("determinism", c10_determinism),
    ];
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    // Test-harness flags such as `--nocapture` are accepted and ignored.
    if std::env::args().any(|a| a == "--list") {
        for (i, (name, _)) in criteria.iter().enumerate() {
            println!("criterion {}: {name}: test", i + 1);
        }
        return;
    }
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                println!("criterion {n:>2} FAIL  {name}: {detail} [{secs:.1}s]");
                failed.push(n);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
