use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::features::FeatureSequence;
use crate::scalar::sq_dist;
use crate::{Error, Result, Scalar};

use super::{Codebook, TokenFrame};

/// Codewords selected fewer times than this within a window are reset.
pub const DEFAULT_DEAD_CODE_THRESHOLD: u64 = 1;
/// Number of training batches per dead-code window.
pub const DEFAULT_DEAD_CODE_WINDOW: usize = 64;

/// How codewords are updated during finetuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CodebookUpdate {
    /// Gradient descent on the codebook loss.
    #[default]
    Gradient,
    /// Exponential moving average of assigned inputs.
    Ema { decay: f64 },
}

fn check_same_len<T>(h: &[T], hq: &[T]) -> Result<()> {
    if h.len() != hq.len() {
        return Err(Error::DimensionMismatch {
            context: "vq loss operands",
            expected: h.len(),
            got: hq.len(),
        });
    }
    Ok(())
}

/// `(‖sg(h) − hq‖², ‖h − sg(hq)‖²)`.
///
/// Both terms have the same value; they differ only in which operand
/// receives gradient (see [`vq_loss_gradients`]).
pub fn vq_losses<T: Scalar>(h: &[T], hq: &[T]) -> Result<(T, T)> {
    check_same_len(h, hq)?;
    let d = sq_dist(h, hq);
    Ok((d, d))
}

/// Gradient of the codebook loss with respect to `hq` and of the commitment
/// loss with respect to `h`.
pub fn vq_loss_gradients<T: Scalar>(h: &[T], hq: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    check_same_len(h, hq)?;
    let two = T::from_f64(2.0);
    let d_code = hq.iter().zip(h).map(|(&q, &x)| two * (q - x)).collect();
    let d_commit = h.iter().zip(hq).map(|(&x, &q)| two * (x - q)).collect();
    Ok((d_code, d_commit))
}

/// Forward half of the straight-through estimator: the value is `hq`.
pub fn straight_through<T: Scalar>(h: &[T], hq: &[T]) -> Result<Vec<T>> {
    check_same_len(h, hq)?;
    Ok(hq.to_vec())
}

/// Backward half of the straight-through estimator: the upstream gradient is
/// passed to `h` unchanged.
pub fn straight_through_backward<T: Scalar>(upstream: &[T]) -> Vec<T> {
    upstream.to_vec()
}

impl<T: Scalar> Codebook<T> {
    /// Gradient of `Σ_k ‖r_{k-1} − sg(c_k)‖²` with respect to `h`, which is
    /// `2·Σ_k r_k`.
    pub fn commit_gradient(&self, h: &[T], tokens: &TokenFrame) -> Result<Vec<T>> {
        let inputs = self.stage_inputs(h, tokens)?;
        let two = T::from_f64(2.0);
        let mut grad = vec![T::zero(); self.dim()];
        for (k, (input, &v)) in inputs.iter().zip(&tokens.indices).enumerate() {
            for ((g, &r), &c) in grad.iter_mut().zip(input).zip(self.codeword(k, v as usize)) {
                *g += two * (r - c);
            }
        }
        Ok(grad)
    }

    /// Adds `scale · ∂/∂C Σ_k ‖sg(r_{k-1}) − c_k‖²` into `grad`, which has
    /// the layout of [`Codebook::codewords`].
    pub fn accumulate_code_gradient(
        &self,
        h: &[T],
        tokens: &TokenFrame,
        scale: T,
        grad: &mut [T],
    ) -> Result<()> {
        if grad.len() != self.codewords().len() {
            return Err(Error::DimensionMismatch {
                context: "codebook gradient",
                expected: self.codewords().len(),
                got: grad.len(),
            });
        }
        let inputs = self.stage_inputs(h, tokens)?;
        let two = T::from_f64(2.0);
        let dim = self.dim();
        for (k, (input, &v)) in inputs.iter().zip(&tokens.indices).enumerate() {
            let start = (k * self.size() + v as usize) * dim;
            let cw = self.codeword(k, v as usize);
            for d in 0..dim {
                grad[start + d] += scale * two * (cw[d] - input[d]);
            }
        }
        Ok(())
    }

    /// Replaces every codeword used fewer than `threshold` times since the
    /// last reset with a uniformly drawn stage input from `recent`, then zeroes
    /// the usage counters. Stage `k > 0` draws from the residuals of `recent`
    /// left by the earlier stages (computed before any replacement).
    pub fn reset_dead_codes<R: Rng + ?Sized>(
        &mut self,
        recent: &FeatureSequence<T>,
        threshold: u64,
        rng: &mut R,
    ) -> Result<usize> {
        let dead: Vec<(usize, usize)> = (0..self.stages())
            .flat_map(|k| (0..self.size()).map(move |v| (k, v)))
            .filter(|&(k, v)| self.usage(k, v) < threshold)
            .collect();
        if dead.is_empty() {
            self.reset_usage();
            return Ok(0);
        }
        if recent.is_empty() {
            return Err(Error::InvalidArgument(
                "dead-code reset needs at least one recent input".into(),
            ));
        }
        if recent.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "dead-code reset inputs",
                expected: self.dim(),
                got: recent.dim(),
            });
        }
        let mut per_stage: Vec<FeatureSequence<T>> =
            (0..self.stages()).map(|_| FeatureSequence::new(self.dim())).collect();
        for frame in recent.frames() {
            let q = self.quantize(frame)?;
            for (k, input) in self.stage_inputs(frame, &q.tokens)?.into_iter().enumerate() {
                per_stage[k].push(&input)?;
            }
        }
        for &(k, v) in &dead {
            let pick = rng.random_range(0..recent.len());
            let src = per_stage[k].frame(pick).to_vec();
            self.codeword_mut(k, v).copy_from_slice(&src);
        }
        self.reset_usage();
        Ok(dead.len())
    }

    /// Stage-wise k-means initialization: stage 0 clusters `samples`, each
    /// later stage clusters the residuals left by the earlier ones.
    pub fn init_kmeans(&mut self, samples: &FeatureSequence<T>, iters: usize, seed: u64) -> Result<()> {
        if samples.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "k-means initialization samples",
                expected: self.dim(),
                got: samples.dim(),
            });
        }
        let mut residuals = samples.clone();
        for k in 0..self.stages() {
            let km = super::kmeans(&residuals, self.size(), iters, seed.wrapping_add(k as u64))?;
            self.stage_mut(k).copy_from_slice(&km.centroids);
            for t in 0..residuals.len() {
                let (v, _) = self.nearest(k, residuals.frame(t));
                let cw = self.codeword(k, v).to_vec();
                for (r, c) in residuals.frame_mut(t).iter_mut().zip(cw) {
                    *r -= c;
                }
            }
        }
        self.reset_usage();
        Ok(())
    }
}

/// Running statistics for exponential-moving-average codebook updates.
#[derive(Debug, Clone)]
pub struct EmaState {
    decay: f64,
    cluster_size: Vec<f64>,
    embed_sum: Vec<f64>,
}

impl EmaState {
    const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(cb: &Codebook<T>, decay: f64) -> Self {
        Self {
            decay,
            cluster_size: vec![1.0; cb.size() * cb.stages()],
            embed_sum: cb.codewords().iter().map(|c| c.as_f64()).collect(),
        }
    }

    /// Folds one batch of `(stage input, token)` assignments into the averages
    /// and rewrites the codewords. `frames` are the quantizer inputs `h`.
    pub fn update<T: Scalar>(
        &mut self,
        cb: &mut Codebook<T>,
        frames: &FeatureSequence<T>,
        tokens: &[TokenFrame],
    ) -> Result<()> {
        let (dim, size, stages) = (cb.dim(), cb.size(), cb.stages());
        let mut counts = vec![0.0; size * stages];
        let mut sums = vec![0.0; size * stages * dim];
        for (frame, tok) in frames.frames().zip(tokens) {
            for (k, (input, &v)) in cb.stage_inputs(frame, tok)?.iter().zip(&tok.indices).enumerate() {
                let slot = k * size + v as usize;
                counts[slot] += 1.0;
                for d in 0..dim {
                    sums[slot * dim + d] += input[d].as_f64();
                }
            }
        }
        let g = self.decay;
        for (slot, &count) in counts.iter().enumerate() {
            self.cluster_size[slot] = g * self.cluster_size[slot] + (1.0 - g) * count;
            for d in 0..dim {
                let i = slot * dim + d;
                self.embed_sum[i] = g * self.embed_sum[i] + (1.0 - g) * sums[i];
            }
        }
        for k in 0..stages {
            let total: f64 = self.cluster_size[k * size..(k + 1) * size].iter().sum();
            for v in 0..size {
                let slot = k * size + v;
                // Laplace smoothing keeps unused codewords finite.
                let n = (self.cluster_size[slot] + Self::EPS) / (total + size as f64 * Self::EPS) * total;
                let sums = &self.embed_sum[slot * dim..(slot + 1) * dim];
                for (c, &s) in cb.codeword_mut(k, v).iter_mut().zip(sums) {
                    *c = T::from_f64(s / n);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn losses_zero_for_equal_inputs() {
        let h = [0.3f64, -1.2, 4.0];
        assert_eq!(vq_losses(&h, &h).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn losses_direct_formula() {
        let cb = Codebook::from_codewords(2, 1, 1, vec![0.0f64, 0.0]).unwrap();
        let q = cb.quantize(&[1.0, 0.0]).unwrap();
        assert_eq!((q.code_loss, q.commit_loss), (1.0, 1.0));
        assert_eq!(vq_losses(&[1.0f64, 0.0], &q.reconstruction).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn commit_gradient_matches_finite_differences() {
        let h = [0.7f64, -0.2, 1.5];
        let hq = [0.1f64, 0.4, 1.0];
        let (_, grad) = vq_loss_gradients(&h, &hq).unwrap();
        let eps = 1e-6;
        for i in 0..3 {
            let mut p = h;
            let mut m = h;
            p[i] += eps;
            m[i] -= eps;
            let fd = (vq_losses(&p, &hq).unwrap().1 - vq_losses(&m, &hq).unwrap().1) / (2.0 * eps);
            assert!((fd - grad[i]).abs() <= 1e-4 * fd.abs().max(1e-8), "{fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn straight_through_contract() {
        let h = [1.0f64, 2.0];
        let hq = [0.5f64, 2.5];
        assert_eq!(straight_through(&h, &hq).unwrap(), hq.to_vec());
        assert_eq!(straight_through_backward(&[0.25f64, -3.0]), vec![0.25, -3.0]);
        assert!(straight_through(&h, &[1.0]).is_err());
    }

    #[test]
    fn straight_through_with_quadratic_downstream() {
        // f(y) = Σ (y_i − t_i)²; gradient through the pass-through equals
        // the gradient of f evaluated at hq.
        let hq = [0.25f64, -1.0, 3.0];
        let target = [1.0f64, 0.5, 2.0];
        let f = |y: &[f64]| -> f64 { y.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum() };
        let eps = 1e-6;
        let upstream: Vec<f64> = (0..3)
            .map(|i| {
                let mut p = hq;
                let mut m = hq;
                p[i] += eps;
                m[i] -= eps;
                (f(&p) - f(&m)) / (2.0 * eps)
            })
            .collect();
        let through = straight_through_backward(&upstream);
        for i in 0..3 {
            let analytic = 2.0 * (hq[i] - target[i]);
            assert!((through[i] - analytic).abs() <= 1e-4 * analytic.abs());
        }
    }

    #[test]
    fn rvq_commit_gradient_is_twice_residual_sum() {
        let cb = Codebook::from_codewords(2, 2, 2, vec![0.0f64, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let h = [0.9, 0.8];
        let q = cb.quantize(&h).unwrap();
        let g = cb.commit_gradient(&h, &q.tokens).unwrap();
        // r_1 = (-0.1, 0.8), r_2 = (-0.1, -0.2)
        assert!((g[0] - 2.0 * (-0.1 - 0.1)).abs() < 1e-12);
        assert!((g[1] - 2.0 * (0.8 - 0.2)).abs() < 1e-12);
    }

    #[test]
    fn no_reset_when_all_used() {
        let mut cb = Codebook::from_codewords(1, 2, 1, vec![0.0f32, 1.0]).unwrap();
        cb.quantize_tracked(&[0.0]).unwrap();
        cb.quantize_tracked(&[1.0]).unwrap();
        let before = cb.clone();
        let recent = FeatureSequence::from_vec(1, vec![5.0]).unwrap();
        let n = cb.reset_dead_codes(&recent, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(n, 0);
        assert_eq!(cb.codewords(), before.codewords());
    }

    #[test]
    fn resets_unused_codes_from_recent_inputs() {
        let mut cb = Codebook::from_codewords(2, 4, 1, vec![0.0f32, 0.0, 10.0, 10.0, 20.0, 20.0, 30.0, 30.0]).unwrap();
        for _ in 0..5 {
            cb.quantize_tracked(&[0.1, -0.1]).unwrap();
        }
        let recent = FeatureSequence::from_vec(2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let n = cb.reset_dead_codes(&recent, 1, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(n, 3);
        assert_eq!(cb.codeword(0, 0), &[0.0, 0.0]);
        for v in 1..4 {
            assert!(recent.frames().any(|f| f == cb.codeword(0, v)));
        }
        assert!(cb.stage_usage(0).iter().all(|&u| u == 0));
    }

    #[test]
    fn later_stage_resets_use_residuals() {
        // stage 0 = {(1,1), (1,1)}, stage 1 = {(0,0), (9,9)}; (9,9) is never used.
        let mut cb = Codebook::from_codewords(2, 2, 2, vec![1.0f32, 1.0, 1.0, 1.0, 0.0, 0.0, 9.0, 9.0]).unwrap();
        cb.quantize_tracked(&[1.0, 1.0]).unwrap();
        let recent = FeatureSequence::from_vec(2, vec![3.0, 3.5]).unwrap();
        cb.reset_dead_codes(&recent, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        // stage-1 input for (3, 3.5) is (3, 3.5) − (1, 1)
        assert_eq!(cb.codeword(1, 1), &[2.0, 2.5]);
    }

    #[test]
    fn ema_moves_codewords_towards_inputs() {
        let mut cb = Codebook::from_codewords(1, 2, 1, vec![0.0f64, 10.0]).unwrap();
        let mut ema = EmaState::new(&cb, 0.5);
        let frames = FeatureSequence::from_vec(1, vec![2.0, 2.0, 2.0, 2.0]).unwrap();
        for _ in 0..20 {
            let tokens: Vec<_> = cb.quantize_sequence(&frames).unwrap().into_iter().map(|r| r.tokens).collect();
            ema.update(&mut cb, &frames, &tokens).unwrap();
        }
        assert!((cb.codeword(0, 0)[0] - 2.0).abs() < 0.01, "{:?}", cb.codewords());
        assert!(cb.codewords().iter().all(|c| c.is_finite()));
    }

    #[test]
    fn kmeans_init_fills_every_stage() {
        let data: Vec<f32> = (0..64 * 2).map(|i| ((i * 13) % 17) as f32).collect();
        let seq = FeatureSequence::from_vec(2, data).unwrap();
        let mut cb = Codebook::<f32>::new(2, 4, 2).unwrap();
        cb.init_kmeans(&seq, 10, 0).unwrap();
        assert!(cb.stage(0).iter().any(|&c| c != 0.0));
        assert!(cb.stage(1).iter().any(|&c| c != 0.0));
    }
}
