//! Task and quantizer losses, each returning its value together with the
//! gradient with respect to its log-probability input.

use serde::{Deserialize, Serialize};

use crate::features::FeatureSequence;
use crate::{Error, Result, Scalar};

/// Coefficients of the combined objective
/// `λ·L_ctc + (1 − λ)·L_kl + β·(L_code + L_commit)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
    /// Label-smoothing strength `ε` of the KL term.
    pub label_smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            beta: 0.25,
            label_smoothing: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

/// Task part of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskLoss<T> {
    Sequence { ctc: T, kl: T },
    /// Plain cross-entropy; `λ` does not apply.
    Classification { ce: T },
}

pub fn combined_loss<T: Scalar>(task: TaskLoss<T>, code: T, commit: T, weights: &LossWeights) -> T {
    let beta = T::from_f64(weights.beta);
    let task = match task {
        TaskLoss::Sequence { ctc, kl } => {
            let lambda = T::from_f64(weights.lambda);
            lambda * ctc + (T::one() - lambda) * kl
        }
        TaskLoss::Classification { ce } => ce,
    };
    task + beta * (code + commit)
}

/// A scalar loss and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<T, G> {
    pub loss: T,
    pub grad: G,
}

pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Maps a gradient with respect to `log_softmax(z)` back to `z`.
pub fn log_softmax_backward<T: Scalar>(log_probs: &[T], grad: &[T]) -> Vec<T> {
    let total: T = grad.iter().copied().sum();
    log_probs
        .iter()
        .zip(grad)
        .map(|(&lp, &g)| g - lp.exp() * total)
        .collect()
}

fn log_add<T: Scalar>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn check_normalized<T: Scalar>(row: &[T], t: usize) -> Result<()> {
    let total: f64 = row.iter().map(|v| v.as_f64().exp()).sum();
    if !row.iter().all(|v| !v.is_nan()) || (total - 1.0).abs() > 1e-4 {
        return Err(Error::Contract(format!(
            "log-probabilities at frame {t} do not normalize (sum of probabilities {total})"
        )));
    }
    Ok(())
}

/// Frames needed to emit `target`: one per label plus one blank between
/// each pair of equal neighbours.
pub fn ctc_min_frames(target: &[u32]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Connectionist temporal classification loss `−log p(target | log_probs)`,
/// by the log-space forward–backward recursion.
///
/// `log_probs` holds one row of log-probabilities per frame; `blank` is the
/// blank class.
pub fn ctc_loss<T: Scalar>(
    log_probs: &FeatureSequence<T>,
    target: &[u32],
    blank: u32,
) -> Result<LossGrad<T, FeatureSequence<T>>> {
    let classes = log_probs.dim();
    let frames = log_probs.len();
    if blank as usize >= classes {
        return Err(Error::InvalidArgument(format!("blank {blank} outside {classes} classes")));
    }
    if let Some(&bad) = target.iter().find(|&&l| l as usize >= classes || l == blank) {
        return Err(Error::InvalidArgument(format!("invalid CTC target label {bad}")));
    }
    let needed = ctc_min_frames(target);
    if frames < needed {
        return Err(Error::InvalidArgument(format!(
            "CTC target needs at least {needed} frames, got {frames}"
        )));
    }
    for (t, row) in log_probs.frames().enumerate() {
        check_normalized(row, t)?;
    }
    let mut grad = FeatureSequence::zeros(frames, classes);
    if frames == 0 {
        return Ok(LossGrad { loss: T::zero(), grad });
    }

    // blank-augmented target: ∅ l1 ∅ l2 … lU ∅
    let ext: Vec<usize> = std::iter::once(blank as usize)
        .chain(target.iter().flat_map(|&l| [l as usize, blank as usize]))
        .collect();
    let states = ext.len();
    let skip = |s: usize| s >= 2 && ext[s] != blank as usize && ext[s] != ext[s - 2];
    let ninf = T::neg_infinity();
    let lp = |t: usize, c: usize| log_probs.frame(t)[c];

    let mut alpha = vec![ninf; frames * states];
    alpha[0] = lp(0, ext[0]);
    if states > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..states {
            let prev = &alpha[(t - 1) * states..t * states];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[t * states + s] = if acc == ninf { ninf } else { acc + lp(t, ext[s]) };
        }
    }
    let last = (frames - 1) * states;
    let mut log_p = alpha[last + states - 1];
    if states > 1 {
        log_p = log_add(log_p, alpha[last + states - 2]);
    }
    if log_p == ninf {
        return Err(Error::InvalidArgument("target has zero probability under log_probs".into()));
    }

    let mut beta = vec![ninf; frames * states];
    beta[last + states - 1] = lp(frames - 1, ext[states - 1]);
    if states > 1 {
        beta[last + states - 2] = lp(frames - 1, ext[states - 2]);
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let next = &beta[(t + 1) * states..(t + 2) * states];
            let mut acc = next[s];
            if s + 1 < states {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < states && skip(s + 2) {
                acc = log_add(acc, next[s + 2]);
            }
            beta[t * states + s] = if acc == ninf { ninf } else { acc + lp(t, ext[s]) };
        }
    }

    // ∂L/∂lp[t,c] = −Σ_{s: ext[s]=c} α_t(s)β_t(s) / (p_t(c)·P)
    for t in 0..frames {
        let mut occupancy = vec![ninf; classes];
        for s in 0..states {
            let v = alpha[t * states + s] + beta[t * states + s];
            occupancy[ext[s]] = log_add(occupancy[ext[s]], v);
        }
        let row = grad.frame_mut(t);
        for c in 0..classes {
            if occupancy[c] != ninf {
                row[c] = -(occupancy[c] - lp(t, c) - log_p).exp();
            }
        }
    }
    Ok(LossGrad { loss: -log_p, grad })
}

/// `KL(q ‖ p)` for the ε-smoothed one-hot target `q` (`1 − ε` on the target,
/// `ε/(A − 1)` elsewhere) and `p = exp(log_probs)`.
pub fn kl_label_smooth_loss<T: Scalar>(log_probs: &[T], target: usize, epsilon: f64) -> Result<LossGrad<T, Vec<T>>> {
    let classes = log_probs.len();
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!("label smoothing must lie in [0, 1), got {epsilon}")));
    }
    if target >= classes {
        return Err(Error::InvalidArgument(format!("target {target} outside {classes} classes")));
    }
    if classes < 2 && epsilon > 0.0 {
        return Err(Error::InvalidArgument("label smoothing needs at least two classes".into()));
    }
    let off = if classes > 1 { epsilon / (classes - 1) as f64 } else { 0.0 };
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); classes];
    for c in 0..classes {
        let q = if c == target { 1.0 - epsilon } else { off };
        if q > 0.0 {
            let qt = T::from_f64(q);
            loss += qt * (T::from_f64(q.ln()) - log_probs[c]);
            grad[c] = -qt;
        }
    }
    Ok(LossGrad { loss, grad })
}

/// `−log p(target)`.
pub fn cross_entropy<T: Scalar>(log_probs: &[T], target: usize) -> Result<LossGrad<T, Vec<T>>> {
    if target >= log_probs.len() {
        return Err(Error::InvalidArgument(format!(
            "target {target} outside {} classes",
            log_probs.len()
        )));
    }
    let mut grad = vec![T::zero(); log_probs.len()];
    grad[target] = -T::one();
    Ok(LossGrad {
        loss: -log_probs[target],
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(p: &[&[f64]]) -> FeatureSequence<f64> {
        let data: Vec<f64> = p.iter().flat_map(|r| r.iter().map(|v| v.ln())).collect();
        FeatureSequence::from_vec(p[0].len(), data).unwrap()
    }

    #[test]
    fn ctc_single_frame() {
        let lp = rows(&[&[0.3, 0.7]]);
        let out = ctc_loss(&lp, &[1], 0).unwrap();
        assert!((out.loss - -(0.7f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn ctc_two_frames_three_alignments() {
        // classes: 0 = blank, 1 = a
        let p1 = [0.4, 0.6];
        let p2 = [0.25, 0.75];
        let lp = rows(&[&p1, &p2]);
        let out = ctc_loss(&lp, &[1], 0).unwrap();
        let expected = -(p1[1] * p2[1] + p1[0] * p2[1] + p1[1] * p2[0]).ln();
        assert!((out.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn ctc_empty_target_is_all_blank() {
        let lp = rows(&[&[0.5, 0.5], &[0.9, 0.1], &[0.2, 0.8]]);
        let out = ctc_loss(&lp, &[], 0).unwrap();
        let expected = -(0.5f64.ln() + 0.9f64.ln() + 0.2f64.ln());
        assert!((out.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn ctc_rejects_infeasible_and_unnormalized() {
        let lp = rows(&[&[0.5, 0.5], &[0.5, 0.5]]);
        // "aa" needs a blank between the repeats: 3 frames
        assert!(ctc_loss(&lp, &[1, 1], 0).is_err());
        assert_eq!(ctc_min_frames(&[1, 1]), 3);
        let bad = FeatureSequence::from_vec(2, vec![0.0f64, 0.0]).unwrap();
        assert!(matches!(ctc_loss(&bad, &[1], 0), Err(Error::Contract(_))));
    }

    #[test]
    fn kl_identical_distribution_is_zero() {
        let eps = 0.2;
        let q = [1.0 - eps, eps / 2.0, eps / 2.0];
        let lp: Vec<f64> = q.iter().map(|v: &f64| v.ln()).collect();
        let out = kl_label_smooth_loss(&lp, 0, eps).unwrap();
        assert!(out.loss.abs() < 1e-12);
    }

    #[test]
    fn kl_without_smoothing_is_cross_entropy() {
        let lp: Vec<f64> = [0.1f64, 0.6, 0.3].iter().map(|v| v.ln()).collect();
        let kl = kl_label_smooth_loss(&lp, 1, 0.0).unwrap();
        let ce = cross_entropy(&lp, 1).unwrap();
        assert!((kl.loss - ce.loss).abs() < 1e-15);
        assert!((ce.loss + 0.6f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn kl_two_class_example() {
        let lp = [0.5f64.ln(), 0.5f64.ln()];
        let out = kl_label_smooth_loss(&lp, 0, 0.2).unwrap();
        let expected = 0.8 * (0.8f64 / 0.5).ln() + 0.2 * (0.2f64 / 0.5).ln();
        assert!((out.loss - expected).abs() < 1e-12);
        assert!(kl_label_smooth_loss(&lp, 0, 1.0).is_err());
    }

    #[test]
    fn combined_examples() {
        let w = LossWeights {
            lambda: 0.3,
            beta: 0.25,
            label_smoothing: 0.1,
        };
        let v = combined_loss(TaskLoss::Sequence { ctc: 2.0, kl: 1.0 }, 0.1f64, 0.2, &w);
        assert!((v - 1.375).abs() < 1e-12);
        let no_vq = LossWeights { beta: 0.0, ..w };
        assert_eq!(combined_loss(TaskLoss::Sequence { ctc: 2.0, kl: 1.0 }, 5.0f64, 7.0, &no_vq), 0.3 * 2.0 + 0.7);
        let ctc_only = LossWeights { lambda: 1.0, ..w };
        assert_eq!(
            combined_loss(TaskLoss::Sequence { ctc: 2.0, kl: 9.0 }, 0.1f64, 0.2, &ctc_only),
            2.0 + 0.25 * (0.1 + 0.2)
        );
        assert_eq!(combined_loss(TaskLoss::Classification { ce: 1.5 }, 0.0f64, 0.0, &w), 1.5);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { lambda: 1.5, ..Default::default() }.validate().is_err());
        assert!(LossWeights { beta: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { label_smoothing: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn uniform_log_softmax_for_zero_logits() {
        let lp = log_softmax(&[0.0f64; 4]);
        for v in lp {
            assert!((v.exp() - 0.25).abs() < 1e-15);
        }
    }
}
