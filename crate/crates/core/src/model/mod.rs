//! The split downstream model, its losses, MAC accounting, synthetic data
//! and the finetuning loop.

mod checkpoint;
pub mod data;
mod layer;
mod loss;
mod macs;
mod split;
mod train;

pub use checkpoint::{load_model, model_hash, save_model, Checkpoint};
pub use data::{generate_classification, generate_sequence, ClassificationSpec, Sample, SequenceSpec, SyntheticSet, Target};
pub use layer::{time_avg_pool, Layer, LayerGrads, LayerSpec};
pub use loss::{
    combined_loss, cross_entropy, ctc_loss, ctc_min_frames, kl_label_smooth_loss, log_softmax, log_softmax_backward,
    LossGrad, LossWeights, TaskLoss,
};
pub use macs::{mac_count, MacReport};
pub use split::{DeviceOutput, SplitModel, Task};
pub use train::{
    accuracy, batch_gradients, finetune_quantized, finetune_step, greedy_decode, train_continuous,
    warm_start_codebook, BatchGradients, StepOptions, StepReport, TrainHistory, TrainOptions, WARMUP_FRAMES,
};

/// Classes of the default classification task; also its layer width.
pub const CLASSIFICATION_CLASSES: usize = 10;
/// Input frames per second of the default classification task.
pub const CLASSIFICATION_INPUT_RATE: f64 = 160.0;
/// Label symbols of the default sequence task (the blank is extra).
pub const SEQUENCE_SYMBOLS: usize = 7;
/// Input frames per second of the default sequence task.
pub const SEQUENCE_INPUT_RATE: f64 = 100.0;

fn parse_all(lines: &[&str]) -> Vec<LayerSpec> {
    lines.iter().map(|l| l.parse().expect("built-in layer spec")).collect()
}

/// Pooling 160 → 40 frames/s, four dense+ReLU blocks and a linear head,
/// all of width 10. The default split is the last hidden block (`M = 9`).
pub fn default_classification_layers() -> Vec<LayerSpec> {
    parse_all(&[
        "pool 4",
        "dense 10 10",
        "relu",
        "dense 10 10",
        "relu",
        "dense 10 10",
        "relu",
        "dense 10 10",
        "relu",
        "dense 10 10",
    ])
}

pub const DEFAULT_CLASSIFICATION_SPLIT: usize = 9;

/// Pooling 100 → 25 frames/s, two convolutions, two hidden dense layers and
/// a linear head over 7 symbols plus blank. Default split after the
/// convolutions (`M = 5`).
pub fn default_sequence_layers() -> Vec<LayerSpec> {
    parse_all(&[
        "pool 4",
        "conv 8 8 3",
        "relu",
        "conv 8 8 3",
        "relu",
        "dense 8 8",
        "relu",
        "dense 8 8",
        "relu",
        "dense 8 8",
    ])
}

pub const DEFAULT_SEQUENCE_SPLIT: usize = 5;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_architectures_build() {
        let m = SplitModel::<f32>::new(
            Task::Classification,
            CLASSIFICATION_CLASSES,
            CLASSIFICATION_INPUT_RATE,
            &default_classification_layers(),
            DEFAULT_CLASSIFICATION_SPLIT,
            0,
        )
        .unwrap();
        assert_eq!(m.frame_rate(), 40.0);
        assert_eq!(m.output_dim(), CLASSIFICATION_CLASSES);
        let s = SplitModel::<f32>::new(
            Task::Sequence,
            SEQUENCE_SYMBOLS + 1,
            SEQUENCE_INPUT_RATE,
            &default_sequence_layers(),
            DEFAULT_SEQUENCE_SPLIT,
            0,
        )
        .unwrap();
        assert_eq!(s.frame_rate(), 25.0);
        assert_eq!(s.output_dim(), SEQUENCE_SYMBOLS + 1);
    }

    #[test]
    fn default_device_macs_are_monotone() {
        for (layers, dim, rate) in [
            (default_classification_layers(), CLASSIFICATION_CLASSES, CLASSIFICATION_INPUT_RATE),
            (default_sequence_layers(), SEQUENCE_SYMBOLS + 1, SEQUENCE_INPUT_RATE),
        ] {
            let totals: Vec<u64> = (1..=layers.len())
                .map(|m| mac_count(&layers, dim, rate, m, 2, 64).unwrap().device_total)
                .collect();
            assert!(totals.windows(2).all(|w| w[0] <= w[1]), "{totals:?}");
        }
    }
}
