use std::io::{Read, Write};

use crate::features::FeatureSequence;
use crate::scalar::{sq_dist, sq_norm};
use crate::{fnv1a64, Error, Result, Scalar};

use super::TokenFrame;

pub const CODEBOOK_MAGIC: &[u8; 4] = b"ACBK";
pub const CODEBOOK_VERSION: u8 = 1;

/// Output of quantizing one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult<T = f32> {
    pub tokens: TokenFrame,
    /// Sum of the selected codewords, accumulated in stage order.
    pub reconstruction: Vec<T>,
    /// `‖h‖, ‖r_1‖, …, ‖r_K‖`.
    pub residual_norms: Vec<T>,
    /// Stage-summed `‖sg(r_{k-1}) − c_k‖²`.
    pub code_loss: T,
    /// Stage-summed `‖r_{k-1} − sg(c_k)‖²`.
    pub commit_loss: T,
}

/// `K` stages of `V` codewords of dimension `D`, plus per-codeword usage
/// counters.
///
/// Codewords are stored in `[k][v][d]` order, which is also the on-disk
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T = f32> {
    dim: usize,
    size: usize,
    stages: usize,
    codewords: Vec<T>,
    usage: Vec<u64>,
}

impl<T: Scalar> Codebook<T> {
    /// All-zero codebook.
    pub fn new(dim: usize, size: usize, stages: usize) -> Result<Self> {
        Self::from_codewords(dim, size, stages, vec![T::zero(); dim * size * stages])
    }

    pub fn from_codewords(dim: usize, size: usize, stages: usize, codewords: Vec<T>) -> Result<Self> {
        if dim == 0 || size == 0 || stages == 0 {
            return Err(Error::InvalidArgument(format!(
                "codebook shape must be positive, got D={dim} V={size} K={stages}"
            )));
        }
        if dim > u16::MAX as usize || stages > u16::MAX as usize || size > u32::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "codebook shape D={dim} V={size} K={stages} exceeds the file format limits"
            )));
        }
        let expected = dim * size * stages;
        if codewords.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "codebook entries",
                expected,
                got: codewords.len(),
            });
        }
        if let Some(position) = codewords.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite {
                context: "codebook",
                position,
            });
        }
        Ok(Self {
            dim,
            size,
            stages,
            codewords,
            usage: vec![0; size * stages],
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn stages(&self) -> usize {
        self.stages
    }

    #[inline]
    pub fn codeword(&self, stage: usize, index: usize) -> &[T] {
        let start = (stage * self.size + index) * self.dim;
        &self.codewords[start..start + self.dim]
    }

    #[inline]
    pub fn codeword_mut(&mut self, stage: usize, index: usize) -> &mut [T] {
        let start = (stage * self.size + index) * self.dim;
        &mut self.codewords[start..start + self.dim]
    }

    /// The `V·D` codewords of one stage.
    pub fn stage(&self, stage: usize) -> &[T] {
        let n = self.size * self.dim;
        &self.codewords[stage * n..(stage + 1) * n]
    }

    pub fn stage_mut(&mut self, stage: usize) -> &mut [T] {
        let n = self.size * self.dim;
        &mut self.codewords[stage * n..(stage + 1) * n]
    }

    pub fn codewords(&self) -> &[T] {
        &self.codewords
    }

    pub fn codewords_mut(&mut self) -> &mut [T] {
        &mut self.codewords
    }

    pub fn usage(&self, stage: usize, index: usize) -> u64 {
        self.usage[stage * self.size + index]
    }

    pub fn stage_usage(&self, stage: usize) -> &[u64] {
        &self.usage[stage * self.size..(stage + 1) * self.size]
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    pub fn record_usage(&mut self, tokens: &TokenFrame) -> Result<()> {
        self.check_tokens(tokens)?;
        for (k, &v) in tokens.indices.iter().enumerate() {
            self.usage[k * self.size + v as usize] += 1;
        }
        Ok(())
    }

    /// Nearest codeword of `stage` to `target` and its squared distance.
    /// Ties go to the smallest index.
    pub fn nearest(&self, stage: usize, target: &[T]) -> (usize, T) {
        let mut best = 0;
        let mut best_dist = T::infinity();
        for (v, cw) in self.stage(stage).chunks_exact(self.dim).enumerate() {
            let d = sq_dist(target, cw);
            if d < best_dist {
                best = v;
                best_dist = d;
            }
        }
        (best, best_dist)
    }

    fn check_input(&self, h: &[T]) -> Result<()> {
        if h.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "quantizer input",
                expected: self.dim,
                got: h.len(),
            });
        }
        if let Some(position) = h.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "quantizer input",
                position,
            });
        }
        Ok(())
    }

    pub fn check_tokens(&self, tokens: &TokenFrame) -> Result<()> {
        if tokens.indices.len() != self.stages {
            return Err(Error::DimensionMismatch {
                context: "token frame stages",
                expected: self.stages,
                got: tokens.indices.len(),
            });
        }
        for (stage, &index) in tokens.indices.iter().enumerate() {
            if index as usize >= self.size {
                return Err(Error::IndexOutOfRange {
                    stage,
                    index,
                    size: self.size,
                    frame: None,
                });
            }
        }
        Ok(())
    }

    /// Greedy residual quantization of one frame. Pure: usage counters are
    /// not touched (see [`Codebook::quantize_tracked`]).
    pub fn quantize(&self, h: &[T]) -> Result<QuantizationResult<T>> {
        self.check_input(h)?;
        let mut residual = h.to_vec();
        let mut reconstruction = vec![T::zero(); self.dim];
        let mut indices = Vec::with_capacity(self.stages);
        let mut residual_norms = Vec::with_capacity(self.stages + 1);
        residual_norms.push(sq_norm(h).sqrt());
        let mut stage_loss = T::zero();
        for k in 0..self.stages {
            let (v, dist) = self.nearest(k, &residual);
            let cw = self.codeword(k, v);
            for ((r, x), &c) in residual.iter_mut().zip(reconstruction.iter_mut()).zip(cw) {
                *r -= c;
                *x += c;
            }
            indices.push(v as u32);
            residual_norms.push(dist.sqrt());
            stage_loss += dist;
        }
        Ok(QuantizationResult {
            tokens: TokenFrame::new(indices),
            reconstruction,
            residual_norms,
            code_loss: stage_loss,
            commit_loss: stage_loss,
        })
    }

    /// [`Codebook::quantize`] plus a usage-counter update.
    pub fn quantize_tracked(&mut self, h: &[T]) -> Result<QuantizationResult<T>> {
        let result = self.quantize(h)?;
        for (k, &v) in result.tokens.indices.iter().enumerate() {
            self.usage[k * self.size + v as usize] += 1;
        }
        Ok(result)
    }

    pub fn quantize_sequence(&self, features: &FeatureSequence<T>) -> Result<Vec<QuantizationResult<T>>> {
        features
            .frames()
            .enumerate()
            .map(|(i, f)| self.quantize(f).map_err(|e| e.at_frame(i)))
            .collect()
    }

    pub fn quantize_sequence_tracked(
        &mut self,
        features: &FeatureSequence<T>,
    ) -> Result<Vec<QuantizationResult<T>>> {
        let results = self.quantize_sequence(features)?;
        for r in &results {
            for (k, &v) in r.tokens.indices.iter().enumerate() {
                self.usage[k * self.size + v as usize] += 1;
            }
        }
        Ok(results)
    }

    /// Sum of the selected codewords, in stage order.
    pub fn dequantize(&self, tokens: &TokenFrame) -> Result<Vec<T>> {
        self.check_tokens(tokens)?;
        let mut out = vec![T::zero(); self.dim];
        for (k, &v) in tokens.indices.iter().enumerate() {
            for (o, &c) in out.iter_mut().zip(self.codeword(k, v as usize)) {
                *o += c;
            }
        }
        Ok(out)
    }

    pub fn dequantize_sequence(&self, tokens: &[TokenFrame]) -> Result<FeatureSequence<T>> {
        let mut out = FeatureSequence::new(self.dim);
        for (i, t) in tokens.iter().enumerate() {
            let frame = self.dequantize(t).map_err(|e| e.at_frame(i))?;
            out.push(&frame)?;
        }
        Ok(out)
    }

    /// Inputs seen by each stage for `h`: `r_0 = h, r_1, …, r_{K-1}`.
    pub fn stage_inputs(&self, h: &[T], tokens: &TokenFrame) -> Result<Vec<Vec<T>>> {
        self.check_input(h)?;
        self.check_tokens(tokens)?;
        let mut inputs = Vec::with_capacity(self.stages);
        let mut residual = h.to_vec();
        for (k, &v) in tokens.indices.iter().enumerate() {
            inputs.push(residual.clone());
            for (r, &c) in residual.iter_mut().zip(self.codeword(k, v as usize)) {
                *r -= c;
            }
        }
        Ok(inputs)
    }

    pub fn cast<U: Scalar>(&self) -> Codebook<U> {
        Codebook {
            dim: self.dim,
            size: self.size,
            stages: self.stages,
            codewords: self.codewords.iter().map(|c| U::from_f64(c.as_f64())).collect(),
            usage: self.usage.clone(),
        }
    }
}

impl Codebook<f32> {
    fn float_bytes(&self) -> Vec<u8> {
        self.codewords.iter().flat_map(|c| c.to_le_bytes()).collect()
    }

    /// FNV-1a of the little-endian codeword bytes; identifies the codebook
    /// in bitstream headers and session handshakes.
    pub fn hash(&self) -> u64 {
        fnv1a64(&self.float_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let floats = self.float_bytes();
        let mut out = Vec::with_capacity(4 + 1 + 8 + floats.len() + 8);
        out.extend_from_slice(CODEBOOK_MAGIC);
        out.push(CODEBOOK_VERSION);
        out.extend_from_slice(&(self.dim as u16).to_le_bytes());
        out.extend_from_slice(&(self.size as u32).to_le_bytes());
        out.extend_from_slice(&(self.stages as u16).to_le_bytes());
        out.extend_from_slice(&floats);
        out.extend_from_slice(&fnv1a64(&floats).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 4 + 1 + 2 + 4 + 2;
        if bytes.len() < HEADER {
            return Err(Error::framing(bytes.len(), "truncated codebook header"));
        }
        if &bytes[..4] != CODEBOOK_MAGIC {
            return Err(Error::framing(0, "bad codebook magic"));
        }
        if bytes[4] != CODEBOOK_VERSION {
            return Err(Error::framing(4, format!("unsupported codebook version {}", bytes[4])));
        }
        let dim = u16::from_le_bytes([bytes[5], bytes[6]]) as usize;
        let size = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
        let stages = u16::from_le_bytes([bytes[11], bytes[12]]) as usize;
        let n = dim
            .checked_mul(size)
            .and_then(|x| x.checked_mul(stages))
            .ok_or_else(|| Error::framing(5, "codebook shape overflows"))?;
        let float_end = HEADER + n * 4;
        if bytes.len() < float_end + 8 {
            return Err(Error::framing(bytes.len(), "truncated codebook payload"));
        }
        if bytes.len() > float_end + 8 {
            return Err(Error::framing(float_end + 8, "trailing bytes after codebook"));
        }
        let floats = &bytes[HEADER..float_end];
        let stored = u64::from_le_bytes(bytes[float_end..].try_into().unwrap());
        let actual = fnv1a64(floats);
        if stored != actual {
            return Err(Error::CodebookMismatch {
                expected: stored,
                found: actual,
            });
        }
        let codewords = floats
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_codewords(dim, size, stages, codewords)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
