use super::layer::LayerSpec;
use crate::{Error, Result};

/// Multiply-accumulate counts for one second of input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacReport {
    pub split: usize,
    /// MACs of layers `1..=L`, in order.
    pub per_layer: Vec<u64>,
    /// Layers `1..=M` plus the quantizer.
    pub device_total: u64,
    pub cloud_total: u64,
    /// Nearest-codeword search, `T_M · K · V · D`.
    pub quantizer_total: u64,
}

/// MAC report for `layers` split after layer `split` (`1..=L`), with a
/// `stages × size` quantizer on the split-layer output. `input_rate` input
/// frames make up one second.
pub fn mac_count(
    layers: &[LayerSpec],
    input_dim: usize,
    input_rate: f64,
    split: usize,
    stages: usize,
    size: usize,
) -> Result<MacReport> {
    if split == 0 || split > layers.len() {
        return Err(Error::Config(format!("split must lie in [1, {}], got {split}", layers.len())));
    }
    let mut frames = input_rate.round() as usize;
    let mut dim = input_dim;
    let mut per_layer = Vec::with_capacity(layers.len());
    let mut quantizer_total = 0;
    for (i, spec) in layers.iter().enumerate() {
        per_layer.push(spec.macs(frames));
        dim = spec.output_dim(dim)?;
        frames = spec.output_len(frames);
        if i + 1 == split {
            quantizer_total = (frames * stages * size * dim) as u64;
        }
    }
    let device_layers: u64 = per_layer[..split].iter().sum();
    Ok(MacReport {
        split,
        device_total: device_layers + quantizer_total,
        cloud_total: per_layer[split..].iter().sum(),
        quantizer_total,
        per_layer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs(s: &[&str]) -> Vec<LayerSpec> {
        s.iter().map(|x| x.parse().unwrap()).collect()
    }

    #[test]
    fn by_hand() {
        // 100 frames/s: dense 64→128 then relu then dense 128→10
        let l = specs(&["dense 64 128", "relu", "dense 128 10"]);
        let r = mac_count(&l, 64, 100.0, 1, 2, 16).unwrap();
        assert_eq!(r.per_layer, vec![819_200, 0, 128_000]);
        assert_eq!(r.quantizer_total, 100 * 2 * 16 * 128);
        assert_eq!(r.device_total, 819_200 + 409_600);
        assert_eq!(r.cloud_total, 128_000);
    }

    #[test]
    fn full_device_split_is_everything_plus_quantizer() {
        let l = specs(&["conv 1 16 3", "relu", "pool 4", "dense 16 8"]);
        let r = mac_count(&l, 1, 16_000.0, 4, 1, 32).unwrap();
        let layers: u64 = r.per_layer.iter().sum();
        assert_eq!(r.per_layer[0], 768_000);
        assert_eq!(r.device_total, layers + r.quantizer_total);
        assert_eq!(r.cloud_total, 0);
        assert_eq!(r.quantizer_total, 4000 * 32 * 8);
    }

    #[test]
    fn bad_split_rejected() {
        let l = specs(&["dense 2 2"]);
        assert!(mac_count(&l, 2, 10.0, 0, 1, 2).is_err());
        assert!(mac_count(&l, 2, 10.0, 2, 1, 2).is_err());
    }
}
