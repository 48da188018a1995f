//! Residual vector quantization.
//!
//! A [`Codebook`] holds `K` stages of `V` codewords of dimension `D`. Stage
//! `k` quantizes the residual left over by stages `0..k`, so a frame becomes a
//! [`TokenFrame`] of `K` indices and is reconstructed as the sum of the
//! selected codewords.

mod codebook;
mod kmeans;
mod train;

pub use codebook::{Codebook, QuantizationResult, CODEBOOK_MAGIC, CODEBOOK_VERSION};
pub use kmeans::{kmeans, KMeans};
pub use train::{
    straight_through, straight_through_backward, vq_loss_gradients, vq_losses, CodebookUpdate,
    EmaState, DEFAULT_DEAD_CODE_THRESHOLD, DEFAULT_DEAD_CODE_WINDOW,
};

use serde::{Deserialize, Serialize};

/// The `K` codeword indices selected for one frame.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenFrame {
    pub indices: Vec<u32>,
}

impl TokenFrame {
    pub fn new(indices: Vec<u32>) -> Self {
        Self { indices }
    }

    pub fn stages(&self) -> usize {
        self.indices.len()
    }
}

impl From<Vec<u32>> for TokenFrame {
    fn from(indices: Vec<u32>) -> Self {
        Self { indices }
    }
}
