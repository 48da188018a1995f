use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::{Layer, LayerGrads, LayerSpec};
use crate::features::FeatureSequence;
use crate::rvq::{Codebook, TokenFrame};
use crate::{Error, Result, Scalar};

/// Downstream task, which fixes how the last layer's output is read out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Per-frame scores over `labels + 1` classes; class 0 is the CTC blank.
    Sequence,
    /// One score vector per input, the mean of the per-frame outputs.
    Classification,
}

/// Either continuous features `h_M` or their quantized tokens.
#[derive(Debug, Clone, PartialEq)]
pub enum DeviceOutput<T> {
    Features(FeatureSequence<T>),
    Tokens(Vec<TokenFrame>),
}

/// Layer stack split after layer `M`: layers `1..=M` run on the device,
/// `M+1..=L` in the cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel<T = f32> {
    task: Task,
    input_dim: usize,
    input_rate: f64,
    split: usize,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> SplitModel<T> {
    /// Randomly initialized model; fails unless the layer chain is dimension
    /// consistent and `1 ≤ split ≤ L − 1`.
    pub fn new(
        task: Task,
        input_dim: usize,
        input_rate: f64,
        specs: &[LayerSpec],
        split: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs.iter().map(|s| Layer::init(s.clone(), &mut rng)).collect();
        Self::from_layers(task, input_dim, input_rate, layers, split)
    }

    pub fn from_layers(
        task: Task,
        input_dim: usize,
        input_rate: f64,
        layers: Vec<Layer<T>>,
        split: usize,
    ) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::Config("a split model needs at least two layers".into()));
        }
        if !(input_rate > 0.0 && input_rate.is_finite()) {
            return Err(Error::Config(format!("input frame rate must be positive, got {input_rate}")));
        }
        let mut dim = input_dim;
        for (i, l) in layers.iter().enumerate() {
            dim = l
                .spec
                .output_dim(dim)
                .map_err(|e| Error::Config(format!("layer {}: {e}", i + 1)))?;
            if l.weight.len() != l.spec.weight_len() || l.bias.len() != l.spec.bias_len() {
                return Err(Error::Config(format!("layer {} has the wrong parameter count", i + 1)));
            }
        }
        let model = Self {
            task,
            input_dim,
            input_rate,
            split: 0,
            layers,
        };
        model.with_split(split)
    }

    /// Same parameters, different split point.
    pub fn with_split(mut self, split: usize) -> Result<Self> {
        if split == 0 || split >= self.layers.len() {
            return Err(Error::Config(format!(
                "split layer must lie in [1, {}], got {split}",
                self.layers.len() - 1
            )));
        }
        self.split = split;
        Ok(self)
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn input_rate(&self) -> f64 {
        self.input_rate
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    /// Feature dimension after `layers` layers (0 = model input).
    pub fn dim_after(&self, layers: usize) -> usize {
        self.layers[..layers]
            .iter()
            .fold(self.input_dim, |d, l| l.spec.output_dim(d).expect("validated"))
    }

    /// Dimension of `h_M`, which the codebook must match.
    pub fn feature_dim(&self) -> usize {
        self.dim_after(self.split)
    }

    pub fn output_dim(&self) -> usize {
        self.dim_after(self.layers.len())
    }

    /// Frame rate after `layers` layers.
    pub fn rate_after(&self, layers: usize) -> f64 {
        self.layers[..layers]
            .iter()
            .fold(self.input_rate, |r, l| r / l.spec.rate_divisor() as f64)
    }

    /// Frame rate `R` of `h_M`.
    pub fn frame_rate(&self) -> f64 {
        self.rate_after(self.split)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn parameters(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.parameter_count() {
            return Err(Error::DimensionMismatch {
                context: "model parameters",
                expected: self.parameter_count(),
                got: params.len(),
            });
        }
        let mut pos = 0;
        for l in &mut self.layers {
            let w = l.weight.len();
            l.weight.copy_from_slice(&params[pos..pos + w]);
            pos += w;
            let b = l.bias.len();
            l.bias.copy_from_slice(&params[pos..pos + b]);
            pos += b;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> SplitModel<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.as_f64())).collect();
        SplitModel {
            task: self.task,
            input_dim: self.input_dim,
            input_rate: self.input_rate,
            split: self.split,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec.clone(),
                    weight: conv(&l.weight),
                    bias: conv(&l.bias),
                })
                .collect(),
        }
    }

    fn run(&self, x: &FeatureSequence<T>, range: Range<usize>) -> Result<FeatureSequence<T>> {
        let mut cur = x.clone();
        for l in &self.layers[range] {
            cur = l.forward(&cur)?;
        }
        Ok(cur)
    }

    fn check_input(&self, x: &FeatureSequence<T>) -> Result<()> {
        if x.dim() != self.input_dim {
            return Err(Error::DimensionMismatch {
                context: "model input",
                expected: self.input_dim,
                got: x.dim(),
            });
        }
        x.check_finite("model input")
    }

    /// Layers `1..=M`: the continuous features `h_M`.
    pub fn forward_device(&self, x: &FeatureSequence<T>) -> Result<FeatureSequence<T>> {
        self.check_input(x)?;
        self.run(x, 0..self.split)
    }

    /// Device half with an optional quantizer; with a codebook the device
    /// emits tokens instead of features.
    pub fn forward_device_with(
        &self,
        x: &FeatureSequence<T>,
        codebook: Option<&Codebook<T>>,
    ) -> Result<DeviceOutput<T>> {
        let h = self.forward_device(x)?;
        match codebook {
            None => Ok(DeviceOutput::Features(h)),
            Some(cb) => {
                self.check_codebook(cb)?;
                let tokens = cb.quantize_sequence(&h)?.into_iter().map(|r| r.tokens).collect();
                Ok(DeviceOutput::Tokens(tokens))
            }
        }
    }

    pub fn check_codebook(&self, cb: &Codebook<T>) -> Result<()> {
        if cb.dim() != self.feature_dim() {
            return Err(Error::Config(format!(
                "codebook dimension {} does not match the split-layer output dimension {}",
                cb.dim(),
                self.feature_dim()
            )));
        }
        Ok(())
    }

    /// Layers `M+1..=L` followed by the task readout.
    pub fn forward_cloud(&self, h: &FeatureSequence<T>) -> Result<FeatureSequence<T>> {
        if h.dim() != self.feature_dim() {
            return Err(Error::DimensionMismatch {
                context: "cloud input",
                expected: self.feature_dim(),
                got: h.dim(),
            });
        }
        let out = self.run(h, self.split..self.layers.len())?;
        self.readout(out)
    }

    /// All layers in one pass followed by the readout.
    pub fn forward_full(&self, x: &FeatureSequence<T>) -> Result<FeatureSequence<T>> {
        self.check_input(x)?;
        let out = self.run(x, 0..self.layers.len())?;
        self.readout(out)
    }

    /// Device half, quantize, dequantize, cloud half.
    pub fn forward_quantized(&self, x: &FeatureSequence<T>, cb: &Codebook<T>) -> Result<FeatureSequence<T>> {
        let tokens = match self.forward_device_with(x, Some(cb))? {
            DeviceOutput::Tokens(t) => t,
            DeviceOutput::Features(_) => unreachable!(),
        };
        self.forward_cloud(&cb.dequantize_sequence(&tokens)?)
    }

    pub(crate) fn readout(&self, out: FeatureSequence<T>) -> Result<FeatureSequence<T>> {
        match self.task {
            Task::Sequence => Ok(out),
            Task::Classification => {
                if out.is_empty() {
                    return Err(Error::InvalidArgument("classification input has no frames".into()));
                }
                let inv = T::one() / T::from_usize(out.len());
                let mut mean = vec![T::zero(); out.dim()];
                for f in out.frames() {
                    for (m, &v) in mean.iter_mut().zip(f) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m *= inv);
                FeatureSequence::from_vec(out.dim(), mean)
            }
        }
    }

    /// Predicted class of a classification output, or per-frame argmax.
    pub fn argmax(scores: &[T]) -> usize {
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        best
    }

    /// Forward pass over `range`, keeping every intermediate activation
    /// (`range.len() + 1` sequences, input first).
    pub(crate) fn forward_cached(&self, x: FeatureSequence<T>, range: Range<usize>) -> Result<Vec<FeatureSequence<T>>> {
        let mut acts = Vec::with_capacity(range.len() + 1);
        acts.push(x);
        for l in &self.layers[range] {
            let next = l.forward(acts.last().unwrap())?;
            acts.push(next);
        }
        Ok(acts)
    }

    /// Backward pass over `range` given cached activations; returns the
    /// gradient with respect to the range input.
    pub(crate) fn backward_cached(
        &self,
        acts: &[FeatureSequence<T>],
        range: Range<usize>,
        grad_out: FeatureSequence<T>,
        grads: &mut [LayerGrads<T>],
    ) -> FeatureSequence<T> {
        let mut g = grad_out;
        for (pos, li) in range.clone().enumerate().rev() {
            g = self.layers[li].backward(&acts[pos], &g, &mut grads[li]);
        }
        g
    }

    pub fn zero_grads(&self) -> Vec<LayerGrads<T>> {
        self.layers.iter().map(Layer::zero_grads).collect()
    }

    /// Gradient of the readout with respect to the last layer's output.
    pub(crate) fn readout_backward(&self, frames: usize, grad: FeatureSequence<T>) -> FeatureSequence<T> {
        match self.task {
            Task::Sequence => grad,
            Task::Classification => {
                let inv = T::one() / T::from_usize(frames);
                let row: Vec<T> = grad.frame(0).iter().map(|&g| g * inv).collect();
                let mut out = FeatureSequence::new(grad.dim());
                for _ in 0..frames {
                    out.push(&row).expect("same dim");
                }
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_model(dim: usize) -> SplitModel<f32> {
        let mut layers = Vec::new();
        for _ in 0..2 {
            let mut l = Layer::zeros(LayerSpec::Dense { input: dim, output: dim });
            for i in 0..dim {
                l.weight[i * dim + i] = 1.0;
            }
            layers.push(l);
        }
        SplitModel::from_layers(Task::Sequence, dim, 100.0, layers, 1).unwrap()
    }

    #[test]
    fn identity_device_passes_features_through() {
        let m = identity_model(3);
        let x = FeatureSequence::from_vec(3, vec![0.5, -1.0, 2.0, 3.0, 0.0, -0.25]).unwrap();
        assert_eq!(m.forward_device(&x).unwrap(), x);
    }

    #[test]
    fn split_identity_is_bit_exact_for_every_split() {
        let specs: Vec<LayerSpec> = ["pool 2", "conv 4 6 3", "relu", "dense 6 6", "tanh", "dense 6 5"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        let x = FeatureSequence::from_vec(4, (0..4 * 9).map(|i| ((i * 7) % 11) as f32 * 0.1 - 0.5).collect()).unwrap();
        let base = SplitModel::<f32>::new(Task::Sequence, 4, 100.0, &specs, 1, 3).unwrap();
        let full = base.forward_full(&x).unwrap();
        for m in 1..specs.len() {
            let model = base.clone().with_split(m).unwrap();
            let split = model.forward_cloud(&model.forward_device(&x).unwrap()).unwrap();
            assert_eq!(split, full, "split {m}");
        }
    }

    #[test]
    fn linear_head_is_affine() {
        let specs = vec![LayerSpec::Dense { input: 2, output: 2 }, LayerSpec::Dense { input: 2, output: 3 }];
        let m = SplitModel::<f64>::new(Task::Sequence, 2, 10.0, &specs, 1, 0).unwrap();
        let h = FeatureSequence::from_vec(2, vec![1.0, -2.0]).unwrap();
        let y = m.forward_cloud(&h).unwrap();
        let head = &m.layers()[1];
        for o in 0..3 {
            let want = head.bias[o] + head.weight[o * 2] * 1.0 + head.weight[o * 2 + 1] * -2.0;
            assert!((y.frame(0)[o] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_head_gives_uniform_softmax() {
        let specs = vec![LayerSpec::Dense { input: 2, output: 2 }, LayerSpec::Dense { input: 2, output: 4 }];
        let mut m = SplitModel::<f64>::new(Task::Classification, 2, 10.0, &specs, 1, 0).unwrap();
        m.layers_mut()[1] = Layer::zeros(specs[1].clone());
        let y = m.forward_cloud(&FeatureSequence::zeros(3, 2)).unwrap();
        let p = crate::model::log_softmax(y.frame(0));
        assert!(p.iter().all(|v| (v.exp() - 0.25).abs() < 1e-15));
    }

    #[test]
    fn exact_codeword_quantization_keeps_outputs() {
        let m = identity_model(2);
        let x = FeatureSequence::from_vec(2, vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let cb = Codebook::from_codewords(2, 3, 1, vec![1.0, 2.0, 9.0, 9.0, -1.0, 0.5]).unwrap();
        assert_eq!(m.forward_quantized(&x, &cb).unwrap(), m.forward_full(&x).unwrap());
    }

    #[test]
    fn rejects_bad_configuration() {
        let specs = vec![LayerSpec::Dense { input: 2, output: 3 }, LayerSpec::Dense { input: 4, output: 1 }];
        assert!(SplitModel::<f32>::new(Task::Sequence, 2, 10.0, &specs, 1, 0).is_err());
        let specs = vec![LayerSpec::Dense { input: 2, output: 3 }, LayerSpec::Relu];
        assert!(SplitModel::<f32>::new(Task::Sequence, 2, 10.0, &specs, 2, 0).is_err());
        assert!(SplitModel::<f32>::new(Task::Sequence, 2, 10.0, &specs, 0, 0).is_err());
        let m = SplitModel::<f32>::new(Task::Sequence, 2, 10.0, &specs, 1, 0).unwrap();
        let cb = Codebook::<f32>::new(2, 4, 1).unwrap();
        assert!(matches!(m.forward_device_with(&FeatureSequence::zeros(1, 2), Some(&cb)), Err(Error::Config(_))));
    }

    #[test]
    fn frame_rate_after_split() {
        let specs: Vec<LayerSpec> = ["pool 4", "dense 3 3", "dense 3 2"].iter().map(|s| s.parse().unwrap()).collect();
        let m = SplitModel::<f32>::new(Task::Classification, 3, 160.0, &specs, 2, 0).unwrap();
        assert_eq!(m.frame_rate(), 40.0);
    }
}
