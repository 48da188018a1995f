use crate::{Error, Result, Scalar};

/// `T` frames of `dim`-dimensional features stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence<T = f32> {
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureSequence<T> {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "feature dimension must be positive");
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn zeros(len: usize, dim: usize) -> Self {
        assert!(dim > 0, "feature dimension must be positive");
        Self {
            dim,
            data: vec![T::zero(); len * dim],
        }
    }

    pub fn from_vec(dim: usize, data: Vec<T>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("feature dimension must be positive".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                context: "feature sequence",
                expected: dim,
                got: data.len() % dim,
            });
        }
        Ok(Self { dim, data })
    }

    pub fn from_frames<F: AsRef<[T]>>(dim: usize, frames: &[F]) -> Result<Self> {
        let mut seq = Self::new(dim);
        for f in frames {
            seq.push(f.as_ref())?;
        }
        Ok(seq)
    }

    pub fn push(&mut self, frame: &[T]) -> Result<()> {
        if frame.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "feature frame",
                expected: self.dim,
                got: frame.len(),
            });
        }
        self.data.extend_from_slice(frame);
        Ok(())
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn frame(&self, t: usize) -> &[T] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    #[inline]
    pub fn frame_mut(&mut self, t: usize) -> &mut [T] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frames(&self) -> impl ExactSizeIterator<Item = &[T]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Position and context of the first non-finite value, if any.
    pub fn check_finite(&self, context: &'static str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(position) => Err(Error::NonFinite { context, position }),
            None => Ok(()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> FeatureSequence<U> {
        FeatureSequence {
            dim: self.dim,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}
