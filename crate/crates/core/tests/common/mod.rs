#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempo::backbone::gradcheck::grad_check;
use tempo::backbone::params::{ParamGroup, ParamStore};
use tempo::decompose::global_decompose;
use tempo::model::{ForwardInput, TempoConfig, TempoModel};

/// layers=2, heads=2, L_E=16, L=32, L_P=8, S=4, M=8, K=2.
pub fn tiny_gradcheck_config() -> TempoConfig {
    let mut cfg = TempoConfig {
        lookback: 32,
        horizon: 8,
        patch_len: 8,
        stride: 4,
        period: 8,
        trend_k: 4,
        lambda_dec: 0.1,
        ..TempoConfig::default()
    };
    cfg.backbone.layers = 2;
    cfg.backbone.heads = 2;
    cfg.backbone.embed_dim = 16;
    cfg.prompt.pool_size = 8;
    cfg.prompt.top_k = 2;
    cfg
}

/// Runs the finite-difference check at one jittered parameter point per seed
/// and returns `(group, coordinates checked, max relative error)` over all
/// points. Groups with fewer than 24 scalars are checked exhaustively at each
/// point.
pub fn full_model_gradcheck(seeds: &[u64]) -> Vec<(ParamGroup, usize, f64)> {
    let cfg = tiny_gradcheck_config();
    let mut totals: BTreeMap<ParamGroup, (usize, f64)> = BTreeMap::new();
    for &seed in seeds {
        let mut cfg = cfg.clone();
        cfg.seed = seed;
        let mut model = TempoModel::new(cfg.clone()).unwrap();
        // Move every tensor off its initialization so zero-initialized
        // tensors (adapter B, biases) receive nontrivial gradients.
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for p in model.params.iter_mut() {
            p.value.mapv_inplace(|v| v + rng.random_range(-0.1..0.1));
        }
        let series: Vec<f64> = (0..64)
            .map(|t| 0.03 * t as f64 + (t as f64 * std::f64::consts::TAU / 8.0).sin() + 0.2 * rng.random_range(-1.0..1.0))
            .collect();
        let global = global_decompose(&series, 8, 4).unwrap().slice(10, 42).unwrap();
        let lookback = &series[10..42];
        let target = &series[42..50];
        let input = ForwardInput {
            lookback,
            period: 8,
            trend_k: 4,
            global: Some(&global),
        };
        let (_, grads) = model.loss_and_grad(&input, target, None).unwrap();
        let loss = |store: &ParamStore| {
            let m = TempoModel {
                config: cfg.clone(),
                params: store.clone(),
            };
            Ok(m.loss(&input, target)?.total)
        };
        let report = grad_check(loss, &model.params, &grads, 1e-5, 24, seed).unwrap();
        for g in report.groups {
            let entry = totals.entry(g.group).or_default();
            entry.0 += g.checked;
            entry.1 = entry.1.max(g.max_rel_error);
        }
    }
    totals.into_iter().map(|(g, (n, e))| (g, n, e)).collect()
}
