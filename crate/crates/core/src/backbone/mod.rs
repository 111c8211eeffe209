//! Decoder-only transformer over the prompt + patch token sequence.
//!
//! Pre-norm GPT-2 layout: a learned positional table is added once at the
//! input, then each layer applies `h ← h + Attn(LN(h))` and
//! `h ← h + MLP(LN(h))`, and a final layer norm closes the stack. The query
//! and value projections of every layer carry a LoRA adapter whose `B`
//! factor starts at zero, so fresh adapters leave the forward pass unchanged.

pub mod gradcheck;
pub mod params;
pub mod tape;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use params::{Binder, ParamGroup, ParamStore};
use tape::{Mat, Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_mult: usize,
    pub dropout: f64,
    pub causal: bool,
    /// Rank of the query/value adapters; 0 disables them.
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            layers: 3,
            heads: 4,
            embed_dim: 64,
            mlp_mult: 4,
            dropout: 0.0,
            causal: true,
            lora_rank: 4,
            lora_alpha: 8.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.embed_dim == 0 || self.mlp_mult == 0 {
            return Err(invalid!("backbone sizes must be ≥ 1: {self:?}"));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(invalid!(
                "embedding width {} is not divisible by {} heads",
                self.embed_dim,
                self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Which projection an adapter modifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Query,
    Value,
}

impl LoraTarget {
    fn tag(self) -> &'static str {
        match self {
            LoraTarget::Query => "q",
            LoraTarget::Value => "v",
        }
    }
}

/// Low-rank update `(alpha / r) · B·A` for a `d × d` projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `r × d`.
    pub a: Mat,
    /// `d × r`, zero at initialization.
    pub b: Mat,
    pub alpha: f64,
    pub rank: usize,
    pub target: LoraTarget,
}

impl LoraAdapter {
    pub fn new(dim: usize, rank: usize, alpha: f64, target: LoraTarget, rng: &mut ChaCha8Rng) -> Result<Self> {
        if rank == 0 {
            return Err(invalid!("LoRA rank must be ≥ 1"));
        }
        Ok(LoraAdapter {
            a: gaussian((rank, dim), 1.0 / (dim as f64).sqrt(), rng),
            b: Mat::zeros((dim, rank)),
            alpha,
            rank,
            target,
        })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// `W + (alpha/r)·B·A`.
pub fn apply_lora(w: &Mat, adapter: &LoraAdapter) -> Result<Mat> {
    let d = w.nrows();
    if w.ncols() != d
        || adapter.a.dim() != (adapter.rank, d)
        || adapter.b.dim() != (d, adapter.rank)
    {
        return Err(shape_err!(
            "adapter A {:?} / B {:?} (rank {}) incompatible with W {:?}",
            adapter.a.dim(),
            adapter.b.dim(),
            adapter.rank,
            w.dim()
        ));
    }
    Ok(w + &(adapter.b.dot(&adapter.a) * adapter.scaling()))
}

pub(crate) fn gaussian(shape: (usize, usize), std: f64, rng: &mut ChaCha8Rng) -> Mat {
    let normal = Normal::new(0.0, std).expect("finite std");
    Mat::from_shape_simple_fn(shape, || normal.sample(rng))
}

fn layer_key(layer: usize, name: &str) -> String {
    format!("backbone.h{layer}.{name}")
}

/// Registers every backbone tensor for sequences up to `max_positions`.
pub fn init_params(
    store: &mut ParamStore,
    cfg: &BackboneConfig,
    max_positions: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let hidden = d * cfg.mlp_mult;
    let proj_std = 0.02 / (2.0 * cfg.layers as f64).sqrt();
    store.insert("backbone.wpe", ParamGroup::PositionEmbedding, gaussian((max_positions, d), 0.01, rng))?;
    for l in 0..cfg.layers {
        for ln in ["ln1", "ln2"] {
            store.insert(layer_key(l, &format!("{ln}.g")), ParamGroup::LayerNorm, Mat::ones((1, d)))?;
            store.insert(layer_key(l, &format!("{ln}.b")), ParamGroup::LayerNorm, Mat::zeros((1, d)))?;
        }
        for w in ["wq", "wk", "wv"] {
            store.insert(layer_key(l, &format!("attn.{w}")), ParamGroup::AttentionCore, gaussian((d, d), 0.02, rng))?;
        }
        store.insert(layer_key(l, "attn.wo"), ParamGroup::AttentionCore, gaussian((d, d), proj_std, rng))?;
        // No key bias: it shifts every score of a query row equally, so
        // softmax cancels it and its gradient is identically zero.
        for b in ["bq", "bv", "bo"] {
            store.insert(layer_key(l, &format!("attn.{b}")), ParamGroup::AttentionCore, Mat::zeros((1, d)))?;
        }
        store.insert(layer_key(l, "mlp.w1"), ParamGroup::MlpCore, gaussian((d, hidden), 0.02, rng))?;
        store.insert(layer_key(l, "mlp.b1"), ParamGroup::MlpCore, Mat::zeros((1, hidden)))?;
        store.insert(layer_key(l, "mlp.w2"), ParamGroup::MlpCore, gaussian((hidden, d), proj_std, rng))?;
        store.insert(layer_key(l, "mlp.b2"), ParamGroup::MlpCore, Mat::zeros((1, d)))?;
        if cfg.lora_rank > 0 {
            for target in [LoraTarget::Query, LoraTarget::Value] {
                let adapter = LoraAdapter::new(d, cfg.lora_rank, cfg.lora_alpha, target, rng)?;
                store.insert(layer_key(l, &format!("lora_{}.a", target.tag())), ParamGroup::Lora, adapter.a)?;
                store.insert(layer_key(l, &format!("lora_{}.b", target.tag())), ParamGroup::Lora, adapter.b)?;
            }
        }
    }
    store.insert("backbone.ln_f.g", ParamGroup::LayerNorm, Mat::ones((1, d)))?;
    store.insert("backbone.ln_f.b", ParamGroup::LayerNorm, Mat::zeros((1, d)))?;
    Ok(())
}

/// Reads the adapter for `layer` / `target` back out of a store.
pub fn lora_adapter(store: &ParamStore, cfg: &BackboneConfig, layer: usize, target: LoraTarget) -> Option<LoraAdapter> {
    let a = layer_key(layer, &format!("lora_{}.a", target.tag()));
    let b = layer_key(layer, &format!("lora_{}.b", target.tag()));
    (store.contains(&a) && store.contains(&b)).then(|| LoraAdapter {
        a: store.get(&a).clone(),
        b: store.get(&b).clone(),
        alpha: cfg.lora_alpha,
        rank: cfg.lora_rank,
        target,
    })
}

/// Options that vary between training and inference.
pub struct ForwardOptions<'r> {
    /// Source of dropout masks; `None` (or dropout 0) disables dropout.
    pub dropout_rng: Option<&'r mut ChaCha8Rng>,
    /// Skip the adapters even if present.
    pub disable_lora: bool,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        ForwardOptions {
            dropout_rng: None,
            disable_lora: false,
        }
    }
}

fn layer_norm(tape: &mut Tape, binder: &mut Binder<'_>, x: Var, prefix: &str) -> Var {
    let normed = tape.normalize_rows(x, LAYER_NORM_EPS);
    let g = binder.var(tape, &format!("{prefix}.g"));
    let b = binder.var(tape, &format!("{prefix}.b"));
    let scaled = tape.mul_row(normed, g);
    tape.add_row(scaled, b)
}

fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let dim = tape.value(x).dim();
            let mask = Mat::from_shape_simple_fn(dim, || if rng.random::<f64>() < rate { 0.0 } else { keep });
            let m = tape.leaf(mask);
            tape.mul(x, m)
        }
        _ => x,
    }
}

/// Projection weight for `layer`, with its adapter folded in when present.
fn projection(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    cfg: &BackboneConfig,
    layer: usize,
    weight: &str,
    target: Option<LoraTarget>,
    use_lora: bool,
) -> Var {
    let w = binder.var(tape, &layer_key(layer, weight));
    let Some(target) = target else { return w };
    let a_key = layer_key(layer, &format!("lora_{}.a", target.tag()));
    if !use_lora || !binder.store().contains(&a_key) {
        return w;
    }
    let a = binder.var(tape, &a_key);
    let b = binder.var(tape, &layer_key(layer, &format!("lora_{}.b", target.tag())));
    let ba = tape.matmul(b, a);
    let delta = tape.scale(ba, cfg.lora_alpha / cfg.lora_rank as f64);
    tape.add(w, delta)
}

/// Runs the stack over a `T × d` sequence and returns `T × d` hidden states.
pub fn forward(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    x: Var,
    cfg: &BackboneConfig,
    mut opts: ForwardOptions<'_>,
) -> Result<Var> {
    let (t, d) = tape.value(x).dim();
    if t == 0 {
        return Err(invalid!("empty input sequence"));
    }
    if d != cfg.embed_dim {
        return Err(shape_err!("input width {d} != embedding width {}", cfg.embed_dim));
    }
    let max_positions = binder.store().get("backbone.wpe").nrows();
    if t > max_positions {
        return Err(invalid!("sequence length {t} exceeds positional table length {max_positions}"));
    }
    let use_lora = !opts.disable_lora;
    let dh = cfg.head_dim();
    let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();

    let wpe = binder.var(tape, "backbone.wpe");
    let pos = tape.slice_rows(wpe, 0, t);
    let mut h = tape.add(x, pos);

    for l in 0..cfg.layers {
        let a_in = layer_norm(tape, binder, h, &layer_key(l, "ln1"));
        let wq = projection(tape, binder, cfg, l, "attn.wq", Some(LoraTarget::Query), use_lora);
        let wk = projection(tape, binder, cfg, l, "attn.wk", None, use_lora);
        let wv = projection(tape, binder, cfg, l, "attn.wv", Some(LoraTarget::Value), use_lora);
        let mut qv = Vec::with_capacity(2);
        for (w, b) in [(wq, "attn.bq"), (wv, "attn.bv")] {
            let bias = binder.var(tape, &layer_key(l, b));
            let proj = tape.matmul(a_in, w);
            qv.push(tape.add_row(proj, bias));
        }
        let (q, v) = (qv[0], qv[1]);
        let k = tape.matmul(a_in, wk);

        let mut heads = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let qh = tape.slice_cols(q, head * dh, dh);
            let kh = tape.slice_cols(k, head * dh, dh);
            let vh = tape.slice_cols(v, head * dh, dh);
            let kt = tape.transpose(kh);
            let raw = tape.matmul(qh, kt);
            let scores = tape.scale(raw, inv_sqrt_dh);
            let probs = if cfg.causal {
                tape.causal_softmax(scores)
            } else {
                tape.softmax(scores)
            };
            heads.push(tape.matmul(probs, vh));
        }
        let merged = tape.concat_cols(&heads);
        let wo = binder.var(tape, &layer_key(l, "attn.wo"));
        let bo = binder.var(tape, &layer_key(l, "attn.bo"));
        let proj = tape.matmul(merged, wo);
        let attn_out = tape.add_row(proj, bo);
        let attn_out = dropout(tape, attn_out, cfg.dropout, &mut opts.dropout_rng);
        h = tape.add(h, attn_out);

        let m_in = layer_norm(tape, binder, h, &layer_key(l, "ln2"));
        let w1 = binder.var(tape, &layer_key(l, "mlp.w1"));
        let b1 = binder.var(tape, &layer_key(l, "mlp.b1"));
        let w2 = binder.var(tape, &layer_key(l, "mlp.w2"));
        let b2 = binder.var(tape, &layer_key(l, "mlp.b2"));
        let up = tape.matmul(m_in, w1);
        let up = tape.add_row(up, b1);
        let act = tape.gelu(up);
        let down = tape.matmul(act, w2);
        let down = tape.add_row(down, b2);
        let down = dropout(tape, down, cfg.dropout, &mut opts.dropout_rng);
        h = tape.add(h, down);
    }
    Ok(layer_norm(tape, binder, h, "backbone.ln_f"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> (BackboneConfig, ParamStore) {
        let cfg = BackboneConfig {
            layers: 2,
            heads: 2,
            embed_dim: 8,
            mlp_mult: 2,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        init_params(&mut store, &cfg, 16, &mut rng).unwrap();
        (cfg, store)
    }

    fn run(store: &ParamStore, cfg: &BackboneConfig, x: &Mat, disable_lora: bool) -> Result<Mat> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(store);
        let xv = tape.leaf(x.clone());
        let out = forward(
            &mut tape,
            &mut binder,
            xv,
            cfg,
            ForwardOptions {
                dropout_rng: None,
                disable_lora,
            },
        )?;
        Ok(tape.value(out).clone())
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut tape = Tape::new();
        let s = tape.leaf(Mat::from_elem((1, 1), -3.7));
        let p = tape.causal_softmax(s);
        assert_eq!(tape.value(p)[[0, 0]], 1.0);
    }

    #[test]
    fn zero_weights_pass_positions_through() {
        let (cfg, mut store) = tiny();
        for l in 0..cfg.layers {
            for name in ["attn.wo", "attn.bo", "mlp.w2", "mlp.b2"] {
                store.get_mut(&layer_key(l, name)).fill(0.0);
            }
        }
        let out = run(&store, &cfg, &Mat::zeros((5, 8)), false).unwrap();
        // Oracle: final layer norm applied to the first 5 positional rows.
        let wpe = store.get("backbone.wpe");
        for r in 0..5 {
            let row = wpe.row(r);
            let mean = row.sum() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            for c in 0..8 {
                let expect = (row[c] - mean) / (var + LAYER_NORM_EPS).sqrt();
                assert!((out[[r, c]] - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn causal_mask_hides_future_tokens() {
        let (cfg, store) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = gaussian((6, 8), 1.0, &mut rng);
        let base = run(&store, &cfg, &x, false).unwrap();
        let mut swapped = x.clone();
        for c in 0..8 {
            swapped.swap([4, c], [5, c]);
        }
        let mut perturbed = x.clone();
        perturbed.row_mut(3).mapv_inplace(|v| v + 10.0);
        let a = run(&store, &cfg, &swapped, false).unwrap();
        let b = run(&store, &cfg, &perturbed, false).unwrap();
        for r in 0..3 {
            assert_eq!(a.row(r), base.row(r));
            assert_eq!(b.row(r), base.row(r));
        }
        assert_ne!(b.row(3), base.row(3));
    }

    #[test]
    fn fresh_adapters_are_a_no_op() {
        let (cfg, store) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian((4, 8), 1.0, &mut rng);
        assert_eq!(run(&store, &cfg, &x, false).unwrap(), run(&store, &cfg, &x, true).unwrap());
    }

    #[test]
    fn too_long_sequence() {
        let (cfg, store) = tiny();
        assert!(run(&store, &cfg, &Mat::zeros((17, 8)), false).is_err());
    }

    #[test]
    fn lora_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = gaussian((3, 3), 1.0, &mut rng);
        let mut adapter = LoraAdapter::new(3, 1, 1.0, LoraTarget::Query, &mut rng).unwrap();
        assert_eq!(apply_lora(&w, &adapter).unwrap(), w);

        let u = ndarray::array![[1.0, 2.0, -1.0]];
        let v = ndarray::array![[0.5], [0.0], [3.0]];
        adapter.a = u.clone();
        adapter.b = v.clone();
        let eff = apply_lora(&w, &adapter).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((eff[[i, j]] - w[[i, j]] - v[[i, 0]] * u[[0, j]]).abs() < 1e-15);
            }
        }
        let delta1 = &eff - &w;
        adapter.alpha = 2.0;
        let delta2 = apply_lora(&w, &adapter).unwrap() - &w;
        assert!((delta2 - delta1 * 2.0).iter().all(|d| d.abs() < 1e-14));

        adapter.a = Mat::zeros((2, 3));
        assert!(apply_lora(&w, &adapter).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = BackboneConfig {
            embed_dim: 10,
            heads: 4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(BackboneConfig::default().validate().is_ok());
    }
}
