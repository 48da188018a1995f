use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::features::FeatureSequence;
use crate::{Error, Result, Scalar};

/// Supervision for one input sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Class(u32),
    /// Label string (no blanks) plus the per-input-frame class, where 0 is
    /// the blank.
    Sequence { labels: Vec<u32>, frame_labels: Vec<u32> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T = f32> {
    pub input: FeatureSequence<T>,
    pub target: Target,
}

impl<T: Scalar> Sample<T> {
    pub fn cast<U: Scalar>(&self) -> Sample<U> {
        Sample {
            input: self.input.cast(),
            target: self.target.clone(),
        }
    }
}

/// Gaussian class clusters. Each sample is `frames` frames drawn around one
/// class centre with per-coordinate noise `noise`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSpec {
    pub classes: usize,
    pub input_dim: usize,
    pub frames: usize,
    /// Distance between class centres in units of `noise`.
    pub separation: f64,
    pub noise: f64,
    pub samples: usize,
}

/// Label strings rendered as per-symbol feature templates. Symbol `a` (1-based)
/// lights up coordinate `a`, the blank coordinate 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    /// Number of non-blank symbols.
    pub symbols: usize,
    pub input_dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub frames_per_symbol: usize,
    pub gap_frames: usize,
    pub amplitude: f64,
    pub noise: f64,
    pub samples: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticSet<T = f32> {
    pub samples: Vec<Sample<T>>,
    /// Class centres (classification) or symbol templates (sequence).
    pub templates: Vec<Vec<f64>>,
}

fn normal(sd: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sd).map_err(|e| Error::InvalidArgument(format!("noise level {sd}: {e}")))
}

/// Class centres are `separation·noise/√2` times distinct unit axes when
/// `input_dim ≥ classes` (pairwise distance exactly `separation·noise`),
/// otherwise random directions of the same radius.
pub fn generate_classification<T: Scalar>(spec: &ClassificationSpec, seed: u64) -> Result<SyntheticSet<T>> {
    if spec.classes < 2 || spec.input_dim == 0 || spec.frames == 0 {
        return Err(Error::InvalidArgument(
            "classification data needs ≥ 2 classes, a positive input dimension and frames".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = spec.separation * spec.noise / 2f64.sqrt();
    let templates: Vec<Vec<f64>> = if spec.input_dim >= spec.classes {
        (0..spec.classes)
            .map(|c| (0..spec.input_dim).map(|d| if d == c { radius } else { 0.0 }).collect())
            .collect()
    } else {
        let unit = normal(1.0)?;
        (0..spec.classes)
            .map(|_| {
                let v: Vec<f64> = (0..spec.input_dim).map(|_| unit.sample(&mut rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / n * radius).collect()
            })
            .collect()
    };
    let noise = normal(spec.noise)?;
    let mut samples = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let class = i % spec.classes;
        let mut input = FeatureSequence::new(spec.input_dim);
        for _ in 0..spec.frames {
            let frame: Vec<T> = templates[class]
                .iter()
                .map(|&c| T::from_f64(c + noise.sample(&mut rng)))
                .collect();
            input.push(&frame)?;
        }
        samples.push(Sample {
            input,
            target: Target::Class(class as u32),
        });
    }
    Ok(SyntheticSet { samples, templates })
}

/// Label strings with a blank gap before, between and after the symbols.
pub fn generate_sequence<T: Scalar>(spec: &SequenceSpec, seed: u64) -> Result<SyntheticSet<T>> {
    if spec.symbols == 0 || spec.input_dim < spec.symbols + 1 {
        return Err(Error::InvalidArgument(format!(
            "sequence data needs input_dim ≥ symbols + 1 (got {} and {})",
            spec.input_dim, spec.symbols
        )));
    }
    if spec.min_len > spec.max_len || spec.frames_per_symbol == 0 {
        return Err(Error::InvalidArgument("invalid sequence length settings".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<f64>> = (0..=spec.symbols)
        .map(|s| (0..spec.input_dim).map(|d| if d == s { spec.amplitude } else { 0.0 }).collect())
        .collect();
    let noise = normal(spec.noise)?;
    let mut samples = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let labels: Vec<u32> = (0..len).map(|_| rng.random_range(1..=spec.symbols as u32)).collect();
        let mut frame_labels = vec![0u32; spec.gap_frames];
        for &l in &labels {
            frame_labels.extend(std::iter::repeat_n(l, spec.frames_per_symbol));
            frame_labels.extend(std::iter::repeat_n(0, spec.gap_frames));
        }
        let mut input = FeatureSequence::new(spec.input_dim);
        for &fl in &frame_labels {
            let frame: Vec<T> = templates[fl as usize]
                .iter()
                .map(|&c| T::from_f64(c + noise.sample(&mut rng)))
                .collect();
            input.push(&frame)?;
        }
        samples.push(Sample {
            input,
            target: Target::Sequence { labels, frame_labels },
        });
    }
    Ok(SyntheticSet { samples, templates })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nearest_centroid(set: &SyntheticSet<f64>) -> f64 {
        let correct = set
            .samples
            .iter()
            .filter(|s| {
                let dim = s.input.dim();
                let mut mean = vec![0.0; dim];
                for f in s.input.frames() {
                    for (m, v) in mean.iter_mut().zip(f) {
                        *m += v / s.input.len() as f64;
                    }
                }
                let best = (0..set.templates.len())
                    .min_by(|&a, &b| {
                        let da: f64 = mean.iter().zip(&set.templates[a]).map(|(x, c)| (x - c).powi(2)).sum();
                        let db: f64 = mean.iter().zip(&set.templates[b]).map(|(x, c)| (x - c).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                s.target == Target::Class(best as u32)
            })
            .count();
        correct as f64 / set.samples.len() as f64
    }

    fn spec() -> ClassificationSpec {
        ClassificationSpec {
            classes: 10,
            input_dim: 10,
            frames: 1,
            separation: 10.0,
            noise: 1.0,
            samples: 500,
        }
    }

    #[test]
    fn well_separated_clusters_are_perfectly_classified() {
        let set = generate_classification::<f64>(&spec(), 4).unwrap();
        assert_eq!(nearest_centroid(&set), 1.0);
        let narrow = ClassificationSpec { input_dim: 4, ..spec() };
        let set = generate_classification::<f64>(&narrow, 4).unwrap();
        let d: f64 = set.templates[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((d - 10.0 / 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_classification::<f32>(&spec(), 9).unwrap();
        let b = generate_classification::<f32>(&spec(), 9).unwrap();
        assert_eq!(a.samples, b.samples);
        let c = generate_classification::<f32>(&spec(), 10).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn noiseless_sequence_argmax_recovers_labels() {
        let s = SequenceSpec {
            symbols: 5,
            input_dim: 6,
            min_len: 1,
            max_len: 4,
            frames_per_symbol: 3,
            gap_frames: 2,
            amplitude: 2.0,
            noise: 0.0,
            samples: 20,
        };
        let set = generate_sequence::<f32>(&s, 1).unwrap();
        for sample in &set.samples {
            let Target::Sequence { frame_labels, labels } = &sample.target else {
                panic!()
            };
            assert_eq!(frame_labels.len(), sample.input.len());
            assert_eq!(frame_labels.len(), 2 + labels.len() * 5);
            for (f, &l) in sample.input.frames().zip(frame_labels) {
                let arg = f.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
                assert_eq!(arg as u32, l);
            }
        }
    }
}
