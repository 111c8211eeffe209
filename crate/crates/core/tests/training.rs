//! Behavior of the training loop and the experiment harness.

use tempo::backbone::params::FreezePolicy;
use tempo::data::{synth_generate, SplitSpec, SynthSpec};
use tempo::model::experiment::{
    ablate, check_leakage, prepare_single, prepare_zero_shot, run_experiment, AblationFlags, DatasetSpec,
    ExperimentData, Variant,
};
use tempo::model::train::{evaluate, train, Adam};
use tempo::model::{TempoConfig, TempoModel};
use tempo::prompt::PromptMode;
use tempo::TempoError;

fn small_config() -> TempoConfig {
    let mut cfg = TempoConfig {
        lookback: 32,
        horizon: 8,
        patch_len: 8,
        stride: 4,
        period: 8,
        trend_k: 4,
        epochs: 3,
        batch: 8,
        lr: 3e-3,
        ..TempoConfig::default()
    };
    cfg.backbone.layers = 1;
    cfg.backbone.heads = 2;
    cfg.backbone.embed_dim = 8;
    cfg.prompt.pool_size = 6;
    cfg.prompt.top_k = 2;
    cfg.prompt.length = 2;
    cfg.windows.train_stride = 4;
    cfg.windows.eval_stride = 8;
    cfg
}

fn dataset(id: &str, period: usize, slope: f64, amp: f64, seed: u64) -> DatasetSpec {
    let frame = synth_generate(&SynthSpec {
        length: 240,
        period,
        trend_slope: slope,
        season_amp: amp,
        noise_std: 0.1,
        seed,
    })
    .unwrap();
    DatasetSpec {
        id: id.to_string(),
        frame,
        period,
        trend_k: period / 2,
    }
}

fn single_data(cfg: &TempoConfig) -> ExperimentData {
    prepare_single(&dataset("a", 8, 0.01, 1.0, 1), cfg, SplitSpec::STANDARD).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_and_history_flat() {
    let mut cfg = small_config();
    cfg.lr = 0.0;
    let data = single_data(&cfg);
    let mut model = TempoModel::new(cfg).unwrap();
    let before = model.params.clone();
    let history = train(&mut model, &data.train, &data.val).unwrap();
    assert_eq!(model.params, before);
    let first = &history.epochs[0];
    for e in &history.epochs {
        assert_eq!(e.train_mse, first.train_mse);
        assert_eq!(e.val_mse, first.val_mse);
    }
}

#[test]
fn same_seed_gives_identical_history() {
    let cfg = small_config();
    let data = single_data(&cfg);
    let a = run_experiment(&cfg, &data).unwrap();
    let b = run_experiment(&cfg, &data).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn overfits_a_single_window() {
    let mut cfg = small_config();
    cfg.epochs = 15;
    cfg.batch = 1;
    cfg.lr = 3e-4;
    let data = single_data(&cfg);
    let one = vec![data.train[3].clone()];
    let mut model = TempoModel::new(cfg).unwrap();
    let history = train(&mut model, &one, &[]).unwrap();
    let mse: Vec<f64> = history.epochs.iter().map(|e| e.train_mse).collect();
    for w in mse[2..].windows(2) {
        assert!(w[1] < w[0], "not monotone after epoch 3: {mse:?}");
    }
    assert!(mse[mse.len() - 1] < 0.1 * mse[0], "{mse:?}");
}

#[test]
fn gpt_style_step_keeps_frozen_tensors() {
    let mut cfg = small_config();
    cfg.freeze = FreezePolicy::GptStyle;
    let data = single_data(&cfg);
    let mut model = TempoModel::new(cfg).unwrap();
    let before = model.params.clone();
    let (_, grads) = model.loss_and_grad(&data.train[0].input(), &data.train[0].target, None).unwrap();
    let mut adam = Adam::new(&model);
    adam.step(&mut model, &grads, 1e-2);
    for (old, new) in before.iter().zip(model.params.iter()) {
        if !new.trainable {
            assert_eq!(old.value, new.value, "{}", new.name);
        }
    }
    assert_ne!(before.get("head.trend.w"), model.params.get("head.trend.w"));
}

#[test]
fn evaluation_metrics_are_in_range() {
    let cfg = small_config();
    let data = single_data(&cfg);
    let model = TempoModel::new(cfg).unwrap();
    let m = evaluate(&model, &data.test).unwrap();
    assert!(m.mse >= 0.0 && m.mae >= 0.0 && (0.0..=200.0).contains(&m.abs_smape));
    assert!(evaluate(&model, &[]).is_err());
}

#[test]
fn leakage_guard() {
    let cfg = small_config();
    let sources = vec![dataset("a", 8, 0.01, 1.0, 1), dataset("b", 12, -0.02, 0.5, 2)];
    let err = prepare_zero_shot(&sources, &sources[1], &cfg, SplitSpec::STANDARD).unwrap_err();
    assert!(matches!(err, TempoError::Leakage(_)));
    assert!(err.to_string().starts_with("leakage"));
    let renamed = DatasetSpec {
        id: "fresh".into(),
        ..sources[0].clone()
    };
    assert!(check_leakage(&sources, &renamed).is_err());
}

#[test]
fn zero_shot_is_reproducible_and_capped() {
    let mut cfg = small_config();
    cfg.windows.samples_per_domain = 10;
    let sources = vec![
        dataset("a", 8, 0.01, 1.0, 1),
        dataset("b", 12, -0.02, 0.5, 2),
        dataset("c", 16, 0.0, 2.0, 3),
    ];
    let target = dataset("t", 10, 0.005, 1.5, 4);
    let data = prepare_zero_shot(&sources, &target, &cfg, SplitSpec::STANDARD).unwrap();
    assert_eq!(data.train.len(), 30);
    for d in 0..3 {
        assert_eq!(data.train.iter().filter(|s| s.domain == d).count(), 10);
    }
    assert!(data.test.iter().all(|s| s.domain == 3 && s.period == 10));
    let a = run_experiment(&cfg, &data).unwrap();
    let b = tempo::model::experiment::zero_shot_run(&sources, &target, &cfg, SplitSpec::STANDARD).unwrap();
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn ablation_rows_and_consistency() {
    let cfg = small_config();
    let data = single_data(&cfg);
    let rows = ablate(&cfg, AblationFlags::ALL, &data).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(labels, ["full", "w/o Dec", "w/o Pro", "w/o Dec Loss"]);
    let direct = run_experiment(&cfg, &data).unwrap().metrics;
    assert_eq!((rows[0].mse, rows[0].mae), (direct.mse, direct.mae));

    let no_loss = Variant::NoDecLoss.apply(&cfg);
    assert_eq!(no_loss.lambda_dec, 0.0);
    assert!(TempoModel::new(no_loss).unwrap().params.contains("local.trend.scale"));
    assert_eq!(Variant::NoPrompt.apply(&cfg).prompt.mode, PromptMode::None);
    assert!(AblationFlags::parse("no_dec,bogus").is_err());
    assert_eq!(AblationFlags::parse("").unwrap().variants(), vec![Variant::Full]);
}
