use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{Sample, Target};
use super::layer::LayerGrads;
use super::loss::{
    combined_loss, cross_entropy, ctc_loss, kl_label_smooth_loss, log_softmax, log_softmax_backward, LossWeights,
    TaskLoss,
};
use super::split::{SplitModel, Task};
use crate::features::FeatureSequence;
use crate::rvq::{Codebook, CodebookUpdate, EmaState, TokenFrame, DEFAULT_DEAD_CODE_THRESHOLD, DEFAULT_DEAD_CODE_WINDOW};
use crate::{Error, Result, Scalar};

/// Continuous frames buffered before the codebook is initialized.
pub const WARMUP_FRAMES: usize = 512;

/// Loss value and gradients of one batch.
#[derive(Debug, Clone)]
pub struct BatchGradients<T> {
    pub loss: T,
    pub task_loss: T,
    /// Batch mean of `β`-free `L_code + L_commit` (zero without a codebook).
    pub vq_loss: T,
    pub layers: Vec<LayerGrads<T>>,
    /// Gradient of `β·L_code` with respect to the codewords.
    pub codebook: Option<Vec<T>>,
    /// Quantizer inputs `h_M` of the whole batch.
    pub features: FeatureSequence<T>,
    pub tokens: Vec<TokenFrame>,
}

impl<T: Scalar> BatchGradients<T> {
    /// Layer gradients flattened in [`SplitModel::parameters`] order.
    pub fn flat_layers(&self) -> Vec<T> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend_from_slice(&g.weight);
            out.extend_from_slice(&g.bias);
        }
        out
    }
}

/// Class of output frame `t` when `in_len` labelled input frames map to
/// `out_len` output frames: the label at the window centre.
fn frame_label(frame_labels: &[u32], t: usize, out_len: usize) -> u32 {
    let ratio = frame_labels.len() as f64 / out_len as f64;
    let pos = (((t as f64) + 0.5) * ratio) as usize;
    frame_labels[pos.min(frame_labels.len() - 1)]
}

fn task_loss<T: Scalar>(
    model: &SplitModel<T>,
    out: &FeatureSequence<T>,
    target: &Target,
    weights: &LossWeights,
) -> Result<(TaskLoss<T>, FeatureSequence<T>)> {
    match (model.task(), target) {
        (Task::Classification, Target::Class(c)) => {
            let logits = model.readout(out.clone())?;
            let lp = log_softmax(logits.frame(0));
            let ce = cross_entropy(&lp, *c as usize)?;
            let g = log_softmax_backward(&lp, &ce.grad);
            let g = FeatureSequence::from_vec(out.dim(), g)?;
            Ok((TaskLoss::Classification { ce: ce.loss }, model.readout_backward(out.len(), g)))
        }
        (Task::Sequence, Target::Sequence { labels, frame_labels }) => {
            let frames = out.len();
            if frames == 0 {
                return Err(Error::InvalidArgument("sequence output has no frames".into()));
            }
            let mut lp = FeatureSequence::new(out.dim());
            for f in out.frames() {
                lp.push(&log_softmax(f))?;
            }
            let ctc = ctc_loss(&lp, labels, 0)?;
            let lambda = T::from_f64(weights.lambda);
            let kl_scale = (T::one() - lambda) / T::from_usize(frames);
            let mut kl_total = T::zero();
            let mut grad = FeatureSequence::zeros(frames, out.dim());
            for t in 0..frames {
                let label = frame_label(frame_labels, t, frames) as usize;
                let kl = kl_label_smooth_loss(lp.frame(t), label, weights.label_smoothing)?;
                kl_total += kl.loss;
                let g_lp: Vec<T> = ctc
                    .grad
                    .frame(t)
                    .iter()
                    .zip(&kl.grad)
                    .map(|(&gc, &gk)| lambda * gc + kl_scale * gk)
                    .collect();
                grad.frame_mut(t).copy_from_slice(&log_softmax_backward(lp.frame(t), &g_lp));
            }
            let kl = kl_total / T::from_usize(frames);
            Ok((TaskLoss::Sequence { ctc: ctc.loss, kl }, grad))
        }
        _ => Err(Error::InvalidArgument("sample target does not match the model task".into())),
    }
}

/// Batch-mean combined loss and its gradients.
///
/// With a codebook the cloud layers see the quantized features and the
/// device layers receive the cloud gradient through the straight-through
/// estimator plus `β`·commitment gradient. The codewords receive only the
/// `β`·codebook-loss gradient. Quantizer losses are averaged over frames.
pub fn batch_gradients<T: Scalar>(
    model: &SplitModel<T>,
    codebook: Option<&Codebook<T>>,
    batch: &[Sample<T>],
    weights: &LossWeights,
) -> Result<BatchGradients<T>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(cb) = codebook {
        model.check_codebook(cb)?;
    }
    let split = model.split();
    let depth = model.layers().len();
    let inv_batch = T::one() / T::from_usize(batch.len());
    let beta = T::from_f64(weights.beta);
    let mut layers = model.zero_grads();
    let mut cb_grad = codebook.map(|cb| vec![T::zero(); cb.codewords().len()]);
    let mut features = FeatureSequence::new(model.feature_dim());
    let mut tokens = Vec::new();
    let (mut loss, mut task_total, mut vq_total) = (T::zero(), T::zero(), T::zero());

    for sample in batch {
        if sample.input.dim() != model.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "model input",
                expected: model.input_dim(),
                got: sample.input.dim(),
            });
        }
        let dev_acts = model.forward_cached(sample.input.clone(), 0..split)?;
        let h = dev_acts.last().unwrap();
        let frames = h.len();
        let (cloud_in, quantized) = match codebook {
            Some(cb) => {
                let q = cb.quantize_sequence(h)?;
                let mut hq = FeatureSequence::new(h.dim());
                for r in &q {
                    hq.push(&r.reconstruction)?;
                }
                (hq, Some(q))
            }
            None => (h.clone(), None),
        };
        let cloud_acts = model.forward_cached(cloud_in, split..depth)?;
        let out = cloud_acts.last().unwrap();
        let (task, mut g_out) = task_loss(model, out, &sample.target, weights)?;
        g_out.as_mut_slice().iter_mut().for_each(|g| *g *= inv_batch);

        let (code, commit) = match &quantized {
            Some(q) if frames > 0 => {
                let n = T::from_usize(frames);
                (
                    q.iter().map(|r| r.code_loss).sum::<T>() / n,
                    q.iter().map(|r| r.commit_loss).sum::<T>() / n,
                )
            }
            _ => (T::zero(), T::zero()),
        };
        let sample_loss = combined_loss(task, code, commit, weights);
        loss += sample_loss * inv_batch;
        task_total += combined_loss(task, T::zero(), T::zero(), weights) * inv_batch;
        vq_total += (code + commit) * inv_batch;

        let mut g_h = model.backward_cached(&cloud_acts, split..depth, g_out, &mut layers);
        if let (Some(cb), Some(q)) = (codebook, &quantized) {
            let scale = beta * inv_batch / T::from_usize(frames.max(1));
            let grad = cb_grad.as_mut().unwrap();
            for (t, r) in q.iter().enumerate() {
                let commit_g = cb.commit_gradient(h.frame(t), &r.tokens)?;
                for (g, c) in g_h.frame_mut(t).iter_mut().zip(commit_g) {
                    *g += scale * c;
                }
                cb.accumulate_code_gradient(h.frame(t), &r.tokens, scale, grad)?;
                features.push(h.frame(t))?;
                tokens.push(r.tokens.clone());
            }
        } else {
            for f in h.frames() {
                features.push(f)?;
            }
        }
        model.backward_cached(&dev_acts, 0..split, g_h, &mut layers);
    }
    Ok(BatchGradients {
        loss,
        task_loss: task_total,
        vq_loss: vq_total,
        layers,
        codebook: cb_grad,
        features,
        tokens,
    })
}

/// Step sizes for [`finetune_step`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOptions {
    pub learning_rate: f64,
    pub codebook_learning_rate: f64,
    pub codebook_update: CodebookUpdate,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            codebook_learning_rate: 0.05,
            codebook_update: CodebookUpdate::Gradient,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub task_loss: f64,
    pub vq_loss: f64,
}

/// One SGD step on the combined loss. Usage counters of the codebook are
/// updated with the batch's tokens. A non-finite loss aborts the step and
/// leaves every parameter untouched.
pub fn finetune_step<T: Scalar>(
    model: &mut SplitModel<T>,
    codebook: Option<&mut Codebook<T>>,
    ema: Option<&mut EmaState>,
    batch: &[Sample<T>],
    weights: &LossWeights,
    options: &StepOptions,
    step: usize,
) -> Result<StepReport> {
    let eval = batch_gradients(model, codebook.as_deref(), batch, weights)?;
    let loss = eval.loss.as_f64();
    if !loss.is_finite() {
        return Err(Error::Divergence { step, loss });
    }
    let lr = T::from_f64(options.learning_rate);
    for (layer, g) in model.layers_mut().iter_mut().zip(&eval.layers) {
        for (w, &gw) in layer.weight.iter_mut().zip(&g.weight) {
            *w -= lr * gw;
        }
        for (b, &gb) in layer.bias.iter_mut().zip(&g.bias) {
            *b -= lr * gb;
        }
    }
    if let Some(cb) = codebook {
        match (options.codebook_update, ema) {
            (CodebookUpdate::Ema { .. }, Some(state)) => state.update(cb, &eval.features, &eval.tokens)?,
            (CodebookUpdate::Ema { .. }, None) => {
                return Err(Error::InvalidArgument("EMA codebook updates need an EmaState".into()))
            }
            (CodebookUpdate::Gradient, _) => {
                let clr = T::from_f64(options.codebook_learning_rate);
                let grad = eval.codebook.as_ref().expect("codebook gradient");
                for (c, &g) in cb.codewords_mut().iter_mut().zip(grad) {
                    *c -= clr * g;
                }
            }
        }
        for t in &eval.tokens {
            cb.record_usage(t)?;
        }
    }
    Ok(StepReport {
        loss,
        task_loss: eval.task_loss.as_f64(),
        vq_loss: eval.vq_loss.as_f64(),
    })
}

/// Settings of a multi-step training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub step: StepOptions,
    pub seed: u64,
    pub kmeans_iters: usize,
    pub dead_code_threshold: u64,
    pub dead_code_window: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 32,
            step: StepOptions::default(),
            seed: 0,
            kmeans_iters: 25,
            dead_code_threshold: DEFAULT_DEAD_CODE_THRESHOLD,
            dead_code_window: DEFAULT_DEAD_CODE_WINDOW,
        }
    }
}

/// Per-step loss history of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub losses: Vec<f64>,
    pub dead_code_resets: usize,
}

struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next<T: Clone>(&mut self, data: &[T], size: usize) -> Vec<T> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size.min(data.len()) {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            batch.push(data[self.order[self.pos]].clone());
            self.pos += 1;
        }
        batch
    }
}

/// Trains `model` without a quantizer.
pub fn train_continuous<T: Scalar>(
    model: &mut SplitModel<T>,
    data: &[Sample<T>],
    weights: &LossWeights,
    options: &TrainOptions,
) -> Result<TrainHistory> {
    let mut sampler = BatchSampler::new(data.len(), options.seed);
    let mut history = TrainHistory::default();
    for step in 0..options.steps {
        let batch = sampler.next(data, options.batch_size);
        let r = finetune_step(model, None, None, &batch, weights, &options.step, step)?;
        history.losses.push(r.loss);
    }
    Ok(history)
}

/// Buffers at least [`WARMUP_FRAMES`] continuous `h_M` frames (or all the
/// data has) and runs stage-wise k-means on them.
pub fn warm_start_codebook<T: Scalar>(
    model: &SplitModel<T>,
    codebook: &mut Codebook<T>,
    data: &[Sample<T>],
    options: &TrainOptions,
) -> Result<()> {
    model.check_codebook(codebook)?;
    let mut buffer = FeatureSequence::new(model.feature_dim());
    for s in data {
        if buffer.len() >= WARMUP_FRAMES {
            break;
        }
        for f in model.forward_device(&s.input)?.frames() {
            buffer.push(f)?;
        }
    }
    codebook.init_kmeans(&buffer, options.kmeans_iters, options.seed)
}

/// Quantized finetuning: k-means warm start, then SGD on the combined loss
/// with dead-code resets every `dead_code_window` steps.
pub fn finetune_quantized<T: Scalar>(
    model: &mut SplitModel<T>,
    codebook: &mut Codebook<T>,
    data: &[Sample<T>],
    weights: &LossWeights,
    options: &TrainOptions,
) -> Result<TrainHistory> {
    warm_start_codebook(model, codebook, data, options)?;
    let mut ema = match options.step.codebook_update {
        CodebookUpdate::Ema { decay } => Some(EmaState::new(codebook, decay)),
        CodebookUpdate::Gradient => None,
    };
    let mut sampler = BatchSampler::new(data.len(), options.seed ^ 0x5eed);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0xdead);
    let mut history = TrainHistory::default();
    for step in 0..options.steps {
        let batch = sampler.next(data, options.batch_size);
        let r = finetune_step(model, Some(codebook), ema.as_mut(), &batch, weights, &options.step, step)?;
        history.losses.push(r.loss);
        if options.dead_code_window > 0 && (step + 1) % options.dead_code_window == 0 {
            let mut recent = FeatureSequence::new(model.feature_dim());
            for s in &batch {
                for f in model.forward_device(&s.input)?.frames() {
                    recent.push(f)?;
                }
            }
            history.dead_code_resets += codebook.reset_dead_codes(&recent, options.dead_code_threshold, &mut rng)?;
        }
    }
    Ok(history)
}

/// Collapses repeats and drops blanks (class 0) from per-frame argmaxes.
pub fn greedy_decode<T: Scalar>(scores: &FeatureSequence<T>) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for f in scores.frames() {
        let c = SplitModel::<T>::argmax(f) as u32;
        if Some(c) != prev && c != 0 {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

/// Fraction of samples predicted exactly (class, or full label string),
/// optionally through the quantizer.
pub fn accuracy<T: Scalar>(model: &SplitModel<T>, codebook: Option<&Codebook<T>>, data: &[Sample<T>]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for s in data {
        let y = match codebook {
            Some(cb) => model.forward_quantized(&s.input, cb)?,
            None => model.forward_full(&s.input)?,
        };
        let hit = match &s.target {
            Target::Class(c) => SplitModel::<T>::argmax(y.frame(0)) as u32 == *c,
            Target::Sequence { labels, .. } => &greedy_decode(&y) == labels,
        };
        correct += hit as usize;
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::data::{generate_classification, ClassificationSpec};
    use crate::model::layer::LayerSpec;

    fn tiny() -> (SplitModel<f64>, Vec<Sample<f64>>) {
        let specs: Vec<LayerSpec> = ["dense 3 4", "tanh", "dense 4 3"].iter().map(|s| s.parse().unwrap()).collect();
        let model = SplitModel::new(Task::Classification, 3, 10.0, &specs, 2, 1).unwrap();
        let spec = ClassificationSpec {
            classes: 3,
            input_dim: 3,
            frames: 2,
            separation: 4.0,
            noise: 1.0,
            samples: 6,
        };
        (model, generate_classification(&spec, 2).unwrap().samples)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut model, data) = tiny();
        let before = model.parameters();
        let opts = StepOptions {
            learning_rate: 0.0,
            ..Default::default()
        };
        let r = finetune_step(&mut model, None, None, &data, &LossWeights::default(), &opts, 0).unwrap();
        assert!(r.loss > 0.0);
        assert_eq!(model.parameters(), before);
    }

    #[test]
    fn divergence_leaves_state_untouched() {
        let (mut model, data) = tiny();
        let params = vec![f64::MAX; model.parameter_count()];
        model.set_parameters(&params).unwrap();
        let before = model.parameters();
        let err = finetune_step(&mut model, None, None, &data, &LossWeights::default(), &StepOptions::default(), 7);
        assert!(matches!(err, Err(Error::Divergence { step: 7, .. })), "{err:?}");
        assert_eq!(model.parameters(), before);
    }

    #[test]
    fn frame_label_uses_window_centre() {
        let labels = [0, 0, 1, 1, 1, 1, 0, 0];
        assert_eq!(frame_label(&labels, 0, 2), 1);
        assert_eq!(frame_label(&labels, 0, 4), 0);
        assert_eq!(frame_label(&labels, 1, 4), 1);
        assert_eq!(frame_label(&labels, 3, 4), 0);
    }

    #[test]
    fn greedy_decoding_collapses() {
        let mut s = FeatureSequence::<f32>::new(3);
        for c in [0usize, 1, 1, 0, 1, 2, 2, 0] {
            let mut row = vec![0.0; 3];
            row[c] = 1.0;
            s.push(&row).unwrap();
        }
        assert_eq!(greedy_decode(&s), vec![1, 1, 2]);
    }
}
