use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::features::FeatureSequence;
use crate::{Error, Result, Scalar};

/// Shape of one layer. Dimensions are feature (channel) counts per frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    /// Zero-padded by `kernel / 2` frames on both sides.
    Conv1d {
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    Tanh,
    TimeAvgPool { factor: usize },
}

impl LayerSpec {
    /// Feature dimension after this layer, given the incoming dimension.
    pub fn output_dim(&self, input_dim: usize) -> Result<usize> {
        match *self {
            LayerSpec::Dense { input, output } | LayerSpec::Conv1d { input, output, .. } => {
                if input != input_dim {
                    return Err(Error::DimensionMismatch {
                        context: "layer input",
                        expected: input,
                        got: input_dim,
                    });
                }
                Ok(output)
            }
            _ => Ok(input_dim),
        }
    }

    /// Number of frames after this layer for `frames` input frames.
    pub fn output_len(&self, frames: usize) -> usize {
        match *self {
            LayerSpec::Conv1d { kernel, stride, .. } => {
                let padded = frames + 2 * (kernel / 2);
                if frames == 0 || padded < kernel {
                    0
                } else {
                    (padded - kernel) / stride + 1
                }
            }
            LayerSpec::TimeAvgPool { factor } => frames.div_ceil(factor),
            _ => frames,
        }
    }

    /// Frame-rate divisor introduced by this layer.
    pub fn rate_divisor(&self) -> usize {
        match *self {
            LayerSpec::Conv1d { stride, .. } => stride,
            LayerSpec::TimeAvgPool { factor } => factor,
            _ => 1,
        }
    }

    pub fn weight_len(&self) -> usize {
        match *self {
            LayerSpec::Dense { input, output } => input * output,
            LayerSpec::Conv1d {
                input, output, kernel, ..
            } => input * output * kernel,
            _ => 0,
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            LayerSpec::Dense { output, .. } | LayerSpec::Conv1d { output, .. } => output,
            _ => 0,
        }
    }

    /// Multiply-accumulates for `frames` input frames. Nonlinearities and
    /// pooling count zero.
    pub fn macs(&self, frames: usize) -> u64 {
        match *self {
            LayerSpec::Dense { input, output } => (frames * input * output) as u64,
            LayerSpec::Conv1d {
                input, output, kernel, ..
            } => (self.output_len(frames) * kernel * input * output) as u64,
            _ => 0,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Dense { input, output } => write!(f, "dense {input} {output}"),
            LayerSpec::Conv1d {
                input,
                output,
                kernel,
                stride,
            } => write!(f, "conv {input} {output} {kernel} {stride}"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::Tanh => f.write_str("tanh"),
            LayerSpec::TimeAvgPool { factor } => write!(f, "pool {factor}"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    /// `dense IN OUT`, `conv IN OUT KERNEL [STRIDE]`, `relu`, `tanh`,
    /// `pool FACTOR`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let bad = || Error::Config(format!("invalid layer spec {s:?}"));
        let num = |i: usize| -> Result<usize> {
            let v: usize = parts.get(i).ok_or_else(bad)?.parse().map_err(|_| bad())?;
            if v == 0 {
                return Err(bad());
            }
            Ok(v)
        };
        let spec = match (parts.first().copied(), parts.len()) {
            (Some("dense"), 3) => LayerSpec::Dense {
                input: num(1)?,
                output: num(2)?,
            },
            (Some("conv"), 4 | 5) => LayerSpec::Conv1d {
                input: num(1)?,
                output: num(2)?,
                kernel: num(3)?,
                stride: if parts.len() == 5 { num(4)? } else { 1 },
            },
            (Some("relu"), 1) => LayerSpec::Relu,
            (Some("tanh"), 1) => LayerSpec::Tanh,
            (Some("pool"), 2) => LayerSpec::TimeAvgPool { factor: num(1)? },
            _ => return Err(bad()),
        };
        Ok(spec)
    }
}

/// Average of each window of `factor` frames; the trailing partial window
/// is averaged over its actual length.
pub fn time_avg_pool<T: Scalar>(features: &FeatureSequence<T>, factor: usize) -> Result<FeatureSequence<T>> {
    if factor == 0 {
        return Err(Error::InvalidArgument("pooling factor must be at least 1".into()));
    }
    let dim = features.dim();
    let frames = features.len();
    let mut out = FeatureSequence::zeros(frames.div_ceil(factor), dim);
    for (o, start) in (0..frames).step_by(factor).enumerate() {
        let end = (start + factor).min(frames);
        let inv = T::one() / T::from_usize(end - start);
        let row = out.frame_mut(o);
        for t in start..end {
            for (acc, &v) in row.iter_mut().zip(features.frame(t)) {
                *acc += v;
            }
        }
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(out)
}

/// Parameter gradients for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// A layer with its parameters. Dense weights are `[out][in]`, convolution
/// weights `[out][in][kernel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn zeros(spec: LayerSpec) -> Self {
        Self {
            weight: vec![T::zero(); spec.weight_len()],
            bias: vec![T::zero(); spec.bias_len()],
            spec,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Self {
        let mut layer = Self::zeros(spec);
        let (fan_in, fan_out) = match layer.spec {
            LayerSpec::Dense { input, output } => (input, output),
            LayerSpec::Conv1d {
                input, output, kernel, ..
            } => (input * kernel, output * kernel),
            _ => return layer,
        };
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in &mut layer.weight {
            *w = T::from_f64(rng.random_range(-limit..limit));
        }
        layer
    }

    pub fn zero_grads(&self) -> LayerGrads<T> {
        LayerGrads {
            weight: vec![T::zero(); self.weight.len()],
            bias: vec![T::zero(); self.bias.len()],
        }
    }

    #[allow(clippy::needless_range_loop)]
    pub fn forward(&self, x: &FeatureSequence<T>) -> Result<FeatureSequence<T>> {
        let out_dim = self.spec.output_dim(x.dim())?;
        match self.spec {
            LayerSpec::Dense { input, output } => {
                let mut y = FeatureSequence::zeros(x.len(), output);
                for (t, row) in x.frames().enumerate() {
                    let out = y.frame_mut(t);
                    for o in 0..output {
                        let w = &self.weight[o * input..(o + 1) * input];
                        let mut acc = self.bias[o];
                        for (&wi, &xi) in w.iter().zip(row) {
                            acc += wi * xi;
                        }
                        out[o] = acc;
                    }
                }
                Ok(y)
            }
            LayerSpec::Conv1d {
                input,
                output,
                kernel,
                stride,
            } => {
                let pad = kernel / 2;
                let frames = self.spec.output_len(x.len());
                let mut y = FeatureSequence::zeros(frames, output);
                for t in 0..frames {
                    let out = y.frame_mut(t);
                    for o in 0..output {
                        let mut acc = self.bias[o];
                        for j in 0..kernel {
                            let Some(src) = (t * stride + j).checked_sub(pad).filter(|&s| s < x.len()) else {
                                continue;
                            };
                            let row = x.frame(src);
                            for i in 0..input {
                                acc += self.weight[(o * input + i) * kernel + j] * row[i];
                            }
                        }
                        out[o] = acc;
                    }
                }
                Ok(y)
            }
            LayerSpec::Relu => Ok(map(x, out_dim, |v| v.max(T::zero()))),
            LayerSpec::Tanh => Ok(map(x, out_dim, |v| v.tanh())),
            LayerSpec::TimeAvgPool { factor } => time_avg_pool(x, factor),
        }
    }

    /// Gradient with respect to the layer input `x`; parameter gradients are
    /// added into `grads`.
    #[allow(clippy::needless_range_loop)]
    pub fn backward(
        &self,
        x: &FeatureSequence<T>,
        grad_out: &FeatureSequence<T>,
        grads: &mut LayerGrads<T>,
    ) -> FeatureSequence<T> {
        let mut gx = FeatureSequence::zeros(x.len(), x.dim());
        match self.spec {
            LayerSpec::Dense { input, output } => {
                for t in 0..x.len() {
                    let row = x.frame(t);
                    let g = grad_out.frame(t);
                    let gin = gx.frame_mut(t);
                    for o in 0..output {
                        let go = g[o];
                        if go == T::zero() {
                            continue;
                        }
                        grads.bias[o] += go;
                        let w = &self.weight[o * input..(o + 1) * input];
                        let gw = &mut grads.weight[o * input..(o + 1) * input];
                        for i in 0..input {
                            gw[i] += go * row[i];
                            gin[i] += go * w[i];
                        }
                    }
                }
            }
            LayerSpec::Conv1d {
                input,
                output,
                kernel,
                stride,
            } => {
                let pad = kernel / 2;
                for t in 0..grad_out.len() {
                    let g = grad_out.frame(t).to_vec();
                    for o in 0..output {
                        grads.bias[o] += g[o];
                    }
                    for j in 0..kernel {
                        let Some(src) = (t * stride + j).checked_sub(pad).filter(|&s| s < x.len()) else {
                            continue;
                        };
                        for o in 0..output {
                            let go = g[o];
                            for i in 0..input {
                                let wi = (o * input + i) * kernel + j;
                                grads.weight[wi] += go * x.frame(src)[i];
                                gx.frame_mut(src)[i] += go * self.weight[wi];
                            }
                        }
                    }
                }
            }
            LayerSpec::Relu => {
                for ((gi, &xi), &go) in gx.as_mut_slice().iter_mut().zip(x.as_slice()).zip(grad_out.as_slice()) {
                    *gi = if xi > T::zero() { go } else { T::zero() };
                }
            }
            LayerSpec::Tanh => {
                for ((gi, &xi), &go) in gx.as_mut_slice().iter_mut().zip(x.as_slice()).zip(grad_out.as_slice()) {
                    let y = xi.tanh();
                    *gi = go * (T::one() - y * y);
                }
            }
            LayerSpec::TimeAvgPool { factor } => {
                let frames = x.len();
                for (o, start) in (0..frames).step_by(factor).enumerate() {
                    let end = (start + factor).min(frames);
                    let inv = T::one() / T::from_usize(end - start);
                    for t in start..end {
                        for (gi, &go) in gx.frame_mut(t).iter_mut().zip(grad_out.frame(o)) {
                            *gi = go * inv;
                        }
                    }
                }
            }
        }
        gx
    }
}

fn map<T: Scalar>(x: &FeatureSequence<T>, dim: usize, f: impl Fn(T) -> T) -> FeatureSequence<T> {
    FeatureSequence::from_vec(dim, x.as_slice().iter().map(|&v| f(v)).collect()).expect("same shape")
}
