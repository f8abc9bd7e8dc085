//! Loss kernels in `f64`, each returning its value together with the analytic
//! gradient. The autograd tape wraps these; tests check them against
//! enumeration and finite differences directly.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::{exp, log_add, log_sum_exp};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CtcError {
    #[error("no valid alignment: {frames} frames cannot emit a target needing {required}")]
    InfeasibleTarget { frames: usize, required: usize },
    #[error("target unit {unit} is out of range or the blank symbol")]
    BadTargetUnit { unit: usize },
    #[error("log-probability matrix has {len} entries, not a multiple of {units} units")]
    BadShape { len: usize, units: usize },
}

#[derive(Debug, Clone)]
pub struct CtcOutput {
    /// `-ln p(target | log_probs)`.
    pub loss: f64,
    /// Gradient of `loss` w.r.t. each log-probability, `frames × units` row-major.
    pub grad: Vec<f64>,
}

/// Minimum frame count for which `target` has a CTC alignment: one frame per
/// label plus a blank between each pair of equal neighbours.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// CTC negative log-likelihood by the forward-backward recursion in log space.
///
/// `log_probs` holds `frames × units` per-frame log-probabilities, row-major.
/// They are treated as free inputs, so the gradient is minus the state
/// occupancy of each (frame, unit) pair.
pub fn ctc_loss(
    log_probs: &[f64],
    units: usize,
    target: &[usize],
    blank: usize,
) -> Result<CtcOutput, CtcError> {
    if units == 0 || log_probs.len() % units != 0 {
        return Err(CtcError::BadShape {
            len: log_probs.len(),
            units,
        });
    }
    if let Some(&unit) = target.iter().find(|&&u| u >= units || u == blank) {
        return Err(CtcError::BadTargetUnit { unit });
    }
    let frames = log_probs.len() / units;
    let required = ctc_min_frames(target);
    if frames < required.max(1) {
        return Err(CtcError::InfeasibleTarget {
            frames,
            required: required.max(1),
        });
    }

    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &u in target {
        ext.push(u);
        ext.push(blank);
    }
    let states = ext.len();
    let lp = |t: usize, s: usize| log_probs[t * units + ext[s]];
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let neg = f64::NEG_INFINITY;
    let mut alpha = vec![neg; frames * states];
    alpha[0] = lp(0, 0);
    if states > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..frames {
        for s in 0..states {
            let prev = &alpha[(t - 1) * states..t * states];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip_ok(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[t * states + s] = if acc == neg { neg } else { acc + lp(t, s) };
        }
    }

    let last = (frames - 1) * states;
    let log_p = if states > 1 {
        log_add(alpha[last + states - 1], alpha[last + states - 2])
    } else {
        alpha[last]
    };
    if log_p == neg {
        return Err(CtcError::InfeasibleTarget { frames, required });
    }

    let mut beta = vec![neg; frames * states];
    beta[last + states - 1] = lp(frames - 1, states - 1);
    if states > 1 {
        beta[last + states - 2] = lp(frames - 1, states - 2);
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let next = &beta[(t + 1) * states..(t + 2) * states];
            let mut acc = next[s];
            if s + 1 < states {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < states && skip_ok(s + 2) {
                acc = log_add(acc, next[s + 2]);
            }
            beta[t * states + s] = if acc == neg { neg } else { acc + lp(t, s) };
        }
    }

    let mut grad = vec![0.0; frames * units];
    for t in 0..frames {
        for s in 0..states {
            let a = alpha[t * states + s];
            let b = beta[t * states + s];
            if a == neg || b == neg {
                continue;
            }
            grad[t * units + ext[s]] -= exp(a + b - lp(t, s) - log_p);
        }
    }
    Ok(CtcOutput { loss: -log_p, grad })
}

/// Softmax cross-entropy of one row of logits against a class index.
/// Returns `(loss, d loss / d logits)`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    assert!(target < logits.len(), "target class out of range");
    let lse = log_sum_exp(logits);
    let grad = logits
        .iter()
        .enumerate()
        .map(|(k, &z)| exp(z - lse) - if k == target { 1.0 } else { 0.0 })
        .collect();
    (lse - logits[target], grad)
}

/// Mean squared error over all entries. Returns `(loss, d loss / d a)`; the
/// gradient w.r.t. `b` is the negation.
pub fn mean_squared_error(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(a.len(), b.len(), "mse operands differ in length");
    if a.is_empty() {
        return (0.0, Vec::new());
    }
    let n = a.len() as f64;
    let loss = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    let grad = a.iter().zip(b).map(|(x, y)| 2.0 * (x - y) / n).collect();
    (loss, grad)
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Brute-force references, independent of the recursions above.
    use super::*;
    use crate::math::ln;

    /// Collapse repeats then drop blanks.
    pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev = None;
        for &u in path {
            if Some(u) != prev && u != blank {
                out.push(u);
            }
            prev = Some(u);
        }
        out
    }

    /// `-ln Σ_paths Π_t p(path_t)` over every `units^frames` path that
    /// collapses to `target`.
    pub fn ctc_by_enumeration(
        log_probs: &[f64],
        units: usize,
        target: &[usize],
        blank: usize,
    ) -> f64 {
        let frames = log_probs.len() / units;
        let total = units.pow(frames as u32);
        let mut sum = 0.0;
        let mut path = vec![0usize; frames];
        for code in 0..total {
            let mut c = code;
            for p in path.iter_mut() {
                *p = c % units;
                c /= units;
            }
            if collapse(&path, blank) == target {
                let s: f64 = path
                    .iter()
                    .enumerate()
                    .map(|(t, &u)| log_probs[t * units + u])
                    .sum();
                sum += exp(s);
            }
        }
        -ln(sum)
    }
}

#[cfg(test)]
mod tests {
    use super::oracle::*;
    use super::*;
    use crate::math::ln;
    use crate::rng::SeededRng;

    fn random_log_probs(rng: &mut SeededRng, frames: usize, units: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(frames * units);
        for _ in 0..frames {
            let logits: Vec<f64> = (0..units).map(|_| 2.0 * rng.normal()).collect();
            let lse = log_sum_exp(&logits);
            out.extend(logits.iter().map(|z| z - lse));
        }
        out
    }

    #[test]
    fn single_frame_uniform() {
        let lp = vec![ln(0.5), ln(0.5)];
        let out = ctc_loss(&lp, 2, &[1], 0).unwrap();
        assert!((out.loss - 0.693_147_180_559_945_3).abs() < 1e-12);
    }

    #[test]
    fn two_frames_uniform_three_alignments() {
        let lp = vec![ln(0.5); 4];
        let out = ctc_loss(&lp, 2, &[1], 0).unwrap();
        assert!((out.loss - (-ln(0.75))).abs() < 1e-12);
        assert!((out.loss - 0.287_682_072_451_780_9).abs() < 1e-12);
    }

    #[test]
    fn repeated_label_needs_separating_blank() {
        let lp = vec![ln(0.5); 4];
        let err = ctc_loss(&lp, 2, &[1, 1], 0).unwrap_err();
        assert_eq!(
            err,
            CtcError::InfeasibleTarget {
                frames: 2,
                required: 3
            }
        );
        assert!(ctc_loss(&vec![ln(0.5); 6], 2, &[1, 1], 0).is_ok());
    }

    #[test]
    fn blank_in_target_rejected() {
        let lp = vec![ln(0.5); 4];
        assert_eq!(
            ctc_loss(&lp, 2, &[0], 0).unwrap_err(),
            CtcError::BadTargetUnit { unit: 0 }
        );
    }

    #[test]
    fn empty_target_is_all_blank_path() {
        let lp = vec![ln(0.25), ln(0.75), ln(0.5), ln(0.5)];
        let out = ctc_loss(&lp, 2, &[], 0).unwrap();
        assert!((out.loss - -(ln(0.25) + ln(0.5))).abs() < 1e-12);
    }

    #[test]
    fn matches_enumeration_on_random_instances() {
        let mut rng = SeededRng::new(11);
        let mut checked = 0;
        while checked < 100 {
            let units = 2 + rng.below(3);
            let frames = 1 + rng.below(6);
            let len = rng.below(frames + 1);
            let target: Vec<usize> = (0..len).map(|_| 1 + rng.below(units - 1)).collect();
            if ctc_min_frames(&target) > frames {
                continue;
            }
            let lp = random_log_probs(&mut rng, frames, units);
            let got = ctc_loss(&lp, units, &target, 0).unwrap().loss;
            let want = ctc_by_enumeration(&lp, units, &target, 0);
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
            checked += 1;
        }
    }

    #[test]
    fn ctc_gradient_matches_central_differences() {
        let mut rng = SeededRng::new(5);
        let (frames, units) = (5, 3);
        let target = [1, 2, 2];
        let lp = random_log_probs(&mut rng, frames, units);
        let out = ctc_loss(&lp, units, &target, 0).unwrap();
        let h = 1e-4;
        for i in 0..lp.len() {
            let mut up = lp.clone();
            let mut dn = lp.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (ctc_loss(&up, units, &target, 0).unwrap().loss
                - ctc_loss(&dn, units, &target, 0).unwrap().loss)
                / (2.0 * h);
            let err = (fd - out.grad[i]).abs() / fd.abs().max(out.grad[i].abs()).max(1e-8);
            assert!(
                err < 1e-3 || (fd - out.grad[i]).abs() < 1e-9,
                "entry {i}: fd {fd} vs {}",
                out.grad[i]
            );
        }
    }

    #[test]
    fn cross_entropy_value_and_gradient() {
        let logits = [1.0, 2.0, 0.5];
        let (loss, grad) = softmax_cross_entropy(&logits, 1);
        assert!((loss - (log_sum_exp(&logits) - 2.0)).abs() < 1e-12);
        assert!(grad.iter().sum::<f64>().abs() < 1e-12);
        assert!(grad[1] < 0.0 && grad[0] > 0.0);
    }

    #[test]
    fn mse_zero_for_identical_inputs() {
        let (loss, grad) = mean_squared_error(&[1.0, -2.0], &[1.0, -2.0]);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
        let (loss, _) = mean_squared_error(&[1.0, 0.0], &[0.0, 0.0]);
        assert_eq!(loss, 0.5);
    }
}
