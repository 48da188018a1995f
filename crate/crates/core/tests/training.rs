use acom::config::RunConfig;
use acom::model::{
    accuracy, finetune_quantized, generate_classification, load_model, model_hash, save_model, train_continuous,
    ClassificationSpec, SplitModel, Task, TrainOptions,
};
use acom::rvq::CodebookUpdate;

fn block_means(losses: &[f64], block: usize) -> Vec<f64> {
    losses.chunks(block).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

#[test]
fn separable_training_loss_decreases_on_average() {
    let steps = 200;
    let mut mean = vec![0.0; steps];
    for seed in 0..10 {
        let spec = ClassificationSpec {
            classes: 10,
            input_dim: 10,
            frames: 4,
            separation: 10.0,
            noise: 1.0,
            samples: 500,
        };
        let data = generate_classification::<f32>(&spec, seed).unwrap().samples;
        let mut cfg = RunConfig::new(Task::Classification);
        cfg.seed = seed;
        cfg.steps = steps;
        let mut model = cfg.build_model().unwrap();
        let h = train_continuous(&mut model, &data, &cfg.loss_weights(), &cfg.train_options()).unwrap();
        for (m, l) in mean.iter_mut().zip(&h.losses) {
            *m += l / 10.0;
        }
    }
    let blocks = block_means(&mean, 20);
    assert!(blocks.windows(2).all(|w| w[1] < w[0]), "{blocks:?}");
}

#[test]
fn sequence_task_learns() {
    let mut cfg = RunConfig::new(Task::Sequence);
    cfg.steps = 400;
    cfg.data.train_samples = 300;
    cfg.data.test_samples = 100;
    let (train, test) = cfg.datasets().unwrap();
    let mut model = cfg.build_model().unwrap();
    let before = accuracy(&model, None, &test).unwrap();
    let h = train_continuous(&mut model, &train, &cfg.loss_weights(), &cfg.train_options()).unwrap();
    let blocks = block_means(&h.losses, 100);
    assert!(blocks.last().unwrap() < &(0.5 * blocks[0]), "{blocks:?}");
    let after = accuracy(&model, None, &test).unwrap();
    assert!(after > before && after > 0.5, "{before} -> {after}");
}

#[test]
fn ema_codebook_updates_train() {
    let mut cfg = RunConfig::new(Task::Classification);
    cfg.steps = 600;
    cfg.finetune_steps = 300;
    cfg.data.train_samples = 500;
    cfg.codebook_update = CodebookUpdate::Ema { decay: 0.95 };
    let (train, test) = cfg.datasets().unwrap();
    let mut model = cfg.build_model().unwrap();
    train_continuous(&mut model, &train, &cfg.loss_weights(), &cfg.train_options()).unwrap();
    let mut cb = cfg.build_codebook(&model).unwrap();
    let h = finetune_quantized(&mut model, &mut cb, &train, &cfg.loss_weights(), &cfg.finetune_options()).unwrap();
    assert!(h.losses.iter().all(|l| l.is_finite()));
    assert!(accuracy(&model, Some(&cb), &test).unwrap() > 0.5);
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let mut cfg = RunConfig::new(Task::Classification);
    cfg.steps = 50;
    cfg.data.train_samples = 100;
    let (train, _) = cfg.datasets().unwrap();
    let run = || -> SplitModel<f32> {
        let mut m = cfg.build_model().unwrap();
        train_continuous(&mut m, &train, &cfg.loss_weights(), &TrainOptions { steps: 50, ..cfg.train_options() })
            .unwrap();
        m
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.toml");
    save_model(&a, &cfg.loss_weights(), &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(model_hash(&back.model), model_hash(&a));
    assert_eq!(back.loss, cfg.loss_weights());
}
