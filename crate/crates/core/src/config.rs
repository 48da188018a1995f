//! Run configuration (TOML) consumed by the command-line tool.
//!
//! Task-dependent keys (`input_dim`, `input_rate`, `layers`, `split_layer`,
//! `code_dim`, `frame_rate`) may be omitted; the defaults of the task's toy
//! architecture then apply. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{self, ClassificationSpec, LayerSpec, LossWeights, Sample, SequenceSpec, SplitModel, Task, TrainOptions};
use crate::rvq::{Codebook, CodebookUpdate, DEFAULT_DEAD_CODE_THRESHOLD, DEFAULT_DEAD_CODE_WINDOW};
use crate::{Error, Result};

/// Synthetic data sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_samples: usize,
    pub test_samples: usize,
    /// Input frames per classification sample.
    pub frames: usize,
    /// Class centre distance in units of `noise`.
    pub separation: f64,
    pub noise: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub frames_per_symbol: usize,
    pub gap_frames: usize,
    pub amplitude: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_samples: 2000,
            test_samples: 200,
            frames: 4,
            separation: 3.5,
            noise: 1.0,
            min_len: 1,
            max_len: 3,
            frames_per_symbol: 8,
            gap_frames: 8,
            amplitude: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_layer: Option<usize>,
    #[serde(default = "default_codebooks")]
    pub codebooks: usize,
    #[serde(default = "default_codebook_size")]
    pub codebook_size: usize,
    /// Must equal the split-layer output dimension when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code_dim: Option<usize>,
    /// Must equal the frame rate after the split layer when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_rate: Option<f64>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_finetune_learning_rate")]
    pub codebook_learning_rate: f64,
    #[serde(default)]
    pub codebook_update: CodebookUpdate,
    /// Baseline training steps.
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Quantized finetuning steps and step size.
    #[serde(default = "default_finetune_steps")]
    pub finetune_steps: usize,
    #[serde(default = "default_finetune_learning_rate")]
    pub finetune_learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub entropy_mode: bool,
    #[serde(default)]
    pub data: DataConfig,
}

fn default_codebooks() -> usize {
    2
}
fn default_codebook_size() -> usize {
    64
}
fn default_lambda() -> f64 {
    0.3
}
fn default_beta() -> f64 {
    0.25
}
fn default_epsilon() -> f64 {
    0.1
}
fn default_learning_rate() -> f64 {
    0.1
}
fn default_finetune_learning_rate() -> f64 {
    0.05
}
fn default_steps() -> usize {
    3000
}
fn default_finetune_steps() -> usize {
    6000
}
fn default_batch_size() -> usize {
    32
}

impl RunConfig {
    /// All defaults for `task`, with the optional keys left unset.
    pub fn new(task: Task) -> Self {
        Self {
            task,
            input_dim: None,
            input_rate: None,
            layers: None,
            split_layer: None,
            codebooks: default_codebooks(),
            codebook_size: default_codebook_size(),
            code_dim: None,
            frame_rate: None,
            lambda: default_lambda(),
            beta: default_beta(),
            epsilon: default_epsilon(),
            seed: 0,
            learning_rate: default_learning_rate(),
            codebook_learning_rate: default_finetune_learning_rate(),
            codebook_update: CodebookUpdate::Gradient,
            steps: default_steps(),
            finetune_steps: default_finetune_steps(),
            finetune_learning_rate: default_finetune_learning_rate(),
            batch_size: default_batch_size(),
            entropy_mode: false,
            data: DataConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim.unwrap_or(match self.task {
            Task::Classification => model::CLASSIFICATION_CLASSES,
            Task::Sequence => model::SEQUENCE_SYMBOLS + 1,
        })
    }

    pub fn input_rate(&self) -> f64 {
        self.input_rate.unwrap_or(match self.task {
            Task::Classification => model::CLASSIFICATION_INPUT_RATE,
            Task::Sequence => model::SEQUENCE_INPUT_RATE,
        })
    }

    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        match &self.layers {
            Some(lines) => lines.iter().map(|l| l.parse()).collect(),
            None => Ok(match self.task {
                Task::Classification => model::default_classification_layers(),
                Task::Sequence => model::default_sequence_layers(),
            }),
        }
    }

    pub fn split_layer(&self) -> usize {
        self.split_layer.unwrap_or(match (self.task, &self.layers) {
            (Task::Classification, None) => model::DEFAULT_CLASSIFICATION_SPLIT,
            (Task::Sequence, None) => model::DEFAULT_SEQUENCE_SPLIT,
            (_, Some(l)) => l.len().saturating_sub(1).max(1),
        })
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            beta: self.beta,
            label_smoothing: self.epsilon,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            steps: self.steps,
            batch_size: self.batch_size,
            step: model::StepOptions {
                learning_rate: self.learning_rate,
                codebook_learning_rate: self.codebook_learning_rate,
                codebook_update: self.codebook_update,
            },
            seed: self.seed,
            kmeans_iters: 25,
            dead_code_threshold: DEFAULT_DEAD_CODE_THRESHOLD,
            dead_code_window: DEFAULT_DEAD_CODE_WINDOW,
        }
    }

    /// Options for quantized finetuning: `finetune_steps` at
    /// `finetune_learning_rate`.
    pub fn finetune_options(&self) -> TrainOptions {
        let mut o = self.train_options();
        o.steps = self.finetune_steps;
        o.step.learning_rate = self.finetune_learning_rate;
        o
    }

    /// Freshly initialized model seeded with `seed`.
    pub fn build_model(&self) -> Result<SplitModel<f32>> {
        let model = SplitModel::new(
            self.task,
            self.input_dim(),
            self.input_rate(),
            &self.layer_specs()?,
            self.split_layer(),
            self.seed,
        )?;
        self.check_model(&model)?;
        Ok(model)
    }

    /// Checks `code_dim` and `frame_rate` against a model's split point.
    pub fn check_model(&self, model: &SplitModel<f32>) -> Result<()> {
        if let Some(d) = self.code_dim {
            if d != model.feature_dim() {
                return Err(Error::Config(format!(
                    "code_dim {d} does not match the split-layer output dimension {}",
                    model.feature_dim()
                )));
            }
        }
        if let Some(r) = self.frame_rate {
            if (r - model.frame_rate()).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "frame_rate {r} does not match the rate after the split layer ({})",
                    model.frame_rate()
                )));
            }
        }
        Ok(())
    }

    /// Empty codebook of the configured shape for `model`.
    pub fn build_codebook(&self, model: &SplitModel<f32>) -> Result<Codebook<f32>> {
        self.check_model(model)?;
        Codebook::new(model.feature_dim(), self.codebook_size, self.codebooks)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn classification_spec(&self, samples: usize) -> ClassificationSpec {
        ClassificationSpec {
            classes: self.layer_specs().ok().and_then(|l| output_dim(&l, self.input_dim())).unwrap_or(2),
            input_dim: self.input_dim(),
            frames: self.data.frames,
            separation: self.data.separation,
            noise: self.data.noise,
            samples,
        }
    }

    pub fn sequence_spec(&self, samples: usize) -> SequenceSpec {
        let classes = self.layer_specs().ok().and_then(|l| output_dim(&l, self.input_dim())).unwrap_or(2);
        SequenceSpec {
            symbols: classes.saturating_sub(1),
            input_dim: self.input_dim(),
            min_len: self.data.min_len,
            max_len: self.data.max_len,
            frames_per_symbol: self.data.frames_per_symbol,
            gap_frames: self.data.gap_frames,
            amplitude: self.data.amplitude,
            noise: self.data.noise,
            samples,
        }
    }

    /// Train and test sets; the test set uses a derived seed.
    pub fn datasets(&self) -> Result<(Vec<Sample>, Vec<Sample>)> {
        let gen = |n: usize, seed: u64| -> Result<Vec<Sample>> {
            Ok(match self.task {
                Task::Classification => model::generate_classification(&self.classification_spec(n), seed)?.samples,
                Task::Sequence => model::generate_sequence(&self.sequence_spec(n), seed)?.samples,
            })
        };
        Ok((
            gen(self.data.train_samples, self.seed)?,
            gen(self.data.test_samples, self.seed ^ 0x7e57_7e57)?,
        ))
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.codebooks == 0 || self.codebook_size == 0 {
            return Err(Error::Config("codebooks and codebook_size must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.codebook_learning_rate >= 0.0 && self.finetune_learning_rate >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if let CodebookUpdate::Ema { decay } = self.codebook_update {
            if !(0.0..1.0).contains(&decay) {
                return Err(Error::Config(format!("EMA decay must lie in [0, 1), got {decay}")));
            }
        }
        let specs = self.layer_specs().map_err(|e| Error::Config(e.to_string()))?;
        let split = self.split_layer();
        if split == 0 || split >= specs.len() {
            return Err(Error::Config(format!(
                "split_layer must lie in [1, {}], got {split}",
                specs.len().saturating_sub(1)
            )));
        }
        if output_dim(&specs, self.input_dim()).is_none() {
            return Err(Error::Config("layer dimensions do not chain".into()));
        }
        Ok(())
    }
}

fn output_dim(specs: &[LayerSpec], input: usize) -> Option<usize> {
    specs.iter().try_fold(input, |d, s| s.output_dim(d).ok())
}
