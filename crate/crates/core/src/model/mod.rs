//! Model assembly: the three-stream forward pass, heads, additive
//! recombination and losses.
//!
//! For one lookback window the forward pass
//!
//! 1. normalizes the window with its own mean and standard deviation;
//! 2. decomposes the normalized window locally, applies the learnable
//!    per-timestep correction to trend and season (the residual stays the
//!    remainder) and gives each component its own affine pair;
//! 3. patches and embeds each component;
//! 4. prefixes each component's tokens with its prompt rows;
//! 5. concatenates the trend, season and residual sequences in that order;
//! 6. runs the backbone and splits the hidden states back by position;
//! 7. flattens each component's patch-position states through that
//!    component's linear head;
//! 8. sums the three normalized-space forecasts and de-normalizes once with
//!    the raw window's statistics.
//!
//! With decomposition disabled a single `series` stream replaces the three
//! components.

pub mod checkpoint;
pub mod experiment;
pub mod train;

use std::fmt;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::params::{Binder, FreezePolicy, ParamGroup, ParamStore};
use crate::backbone::tape::{Mat, Tape, Var};
use crate::backbone::{self, gaussian, BackboneConfig, ForwardOptions};
use crate::decompose::{local_decompose, ComponentTriple};
use crate::embed::patch_count;
use crate::error::{invalid, shape_err, Result};
use crate::norm::{instance_normalize, AffinePair, InstanceStats, DEFAULT_EPS};
use crate::prompt::{
    init_semi_soft, pool_query, select_top_k, PromptMode, PromptPool, QueryPool,
    SelectionRecord, Stream,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub mode: PromptMode,
    /// `M`.
    pub pool_size: usize,
    /// `K`.
    pub top_k: usize,
    /// `L_p`, rows per prompt.
    pub length: usize,
    pub query_pool: QueryPool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            mode: PromptMode::Pool,
            pool_size: 30,
            top_k: 3,
            length: 3,
            query_pool: QueryPool::Mean,
        }
    }
}

impl PromptConfig {
    /// Prompt rows prepended to each stream.
    pub fn rows(&self) -> usize {
        match self.mode {
            PromptMode::None => 0,
            PromptMode::SemiSoft | PromptMode::Hard => self.length,
            PromptMode::Pool => self.top_k * self.length,
        }
    }
}

/// How training and evaluation windows are cut from a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub train_stride: usize,
    pub eval_stride: usize,
    /// Cap on training windows drawn from each source domain; 0 = no cap.
    pub samples_per_domain: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            train_stride: 1,
            eval_stride: 1,
            samples_per_domain: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TempoConfig {
    /// `L`, lookback length.
    pub lookback: usize,
    /// `L_H`, forecast horizon.
    pub horizon: usize,
    /// `L_P`.
    pub patch_len: usize,
    /// `S`.
    pub stride: usize,
    /// Seasonal period of datasets that do not set their own.
    pub period: usize,
    /// Trend half-window `k` for such datasets.
    pub trend_k: usize,
    pub prompt: PromptConfig,
    pub backbone: BackboneConfig,
    /// `false` runs the single-stream pipeline.
    pub decompose: bool,
    pub lambda_dec: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub freeze: FreezePolicy,
    pub eps: f64,
    pub per_component_embed: bool,
    pub include_prompt_positions: bool,
    pub windows: WindowConfig,
}

impl Default for TempoConfig {
    fn default() -> Self {
        TempoConfig {
            lookback: 96,
            horizon: 24,
            patch_len: 16,
            stride: 8,
            period: 24,
            trend_k: 12,
            prompt: PromptConfig::default(),
            backbone: BackboneConfig::default(),
            decompose: true,
            lambda_dec: 0.01,
            lr: 1e-3,
            epochs: 10,
            batch: 32,
            seed: 0,
            freeze: FreezePolicy::FromScratch,
            eps: DEFAULT_EPS,
            per_component_embed: false,
            include_prompt_positions: false,
            windows: WindowConfig::default(),
        }
    }
}

impl TempoConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.lookback == 0 || self.horizon == 0 || self.epochs == 0 || self.batch == 0 {
            return Err(invalid!("lookback, horizon, epochs and batch must be ≥ 1"));
        }
        patch_count(self.lookback, self.patch_len, self.stride)?;
        if self.lambda_dec < 0.0 || !self.lambda_dec.is_finite() {
            return Err(invalid!("lambda_dec must be finite and ≥ 0, got {}", self.lambda_dec));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid!("learning rate must be finite and ≥ 0, got {}", self.lr));
        }
        if self.eps <= 0.0 {
            return Err(invalid!("eps must be > 0"));
        }
        if self.windows.train_stride == 0 || self.windows.eval_stride == 0 {
            return Err(invalid!("window strides must be ≥ 1"));
        }
        let p = &self.prompt;
        match p.mode {
            PromptMode::Pool if p.top_k == 0 || p.top_k > p.pool_size || p.length == 0 => Err(invalid!(
                "prompt pool needs 1 ≤ K ≤ M and length ≥ 1 (K={}, M={}, length={})",
                p.top_k,
                p.pool_size,
                p.length
            )),
            PromptMode::SemiSoft | PromptMode::Hard if p.length == 0 => {
                Err(invalid!("prompt length must be ≥ 1"))
            }
            _ => Ok(()),
        }
    }

    pub fn streams(&self) -> &'static [Stream] {
        if self.decompose {
            &Stream::COMPONENTS
        } else {
            &[Stream::Series]
        }
    }

    pub fn patches(&self) -> usize {
        patch_count(self.lookback, self.patch_len, self.stride).expect("validated config")
    }

    /// Backbone rows per stream: prompt rows followed by patch tokens.
    pub fn stream_len(&self) -> usize {
        self.prompt.rows() + self.patches()
    }

    pub fn sequence_len(&self) -> usize {
        self.streams().len() * self.stream_len()
    }

    fn head_rows(&self) -> usize {
        if self.include_prompt_positions {
            self.stream_len()
        } else {
            self.patches()
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.backbone.embed_dim
    }
}

/// Subset of {trend, season, residual} kept active; bit 0 = trend,
/// bit 1 = season, bit 2 = residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coalition(pub u8);

impl Coalition {
    pub const FULL: Coalition = Coalition(0b111);
    pub const EMPTY: Coalition = Coalition(0);

    pub fn all() -> impl Iterator<Item = Coalition> {
        (0u8..8).map(Coalition)
    }

    pub fn of(streams: &[Stream]) -> Coalition {
        Coalition(streams.iter().filter_map(|s| component_bit(*s)).fold(0, |acc, b| acc | b))
    }

    pub fn contains(self, s: Stream) -> bool {
        match component_bit(s) {
            Some(bit) => self.0 & bit != 0,
            None => true,
        }
    }

    pub fn with(self, s: Stream) -> Coalition {
        Coalition(self.0 | component_bit(s).unwrap_or(0))
    }

    pub fn size(self) -> usize {
        self.0.count_ones() as usize
    }
}

fn component_bit(s: Stream) -> Option<u8> {
    match s {
        Stream::Trend => Some(1),
        Stream::Season => Some(2),
        Stream::Residual => Some(4),
        Stream::Series => None,
    }
}

impl fmt::Display for Coalition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == 0 {
            return f.write_str("empty");
        }
        let names: Vec<&str> = Stream::COMPONENTS
            .iter()
            .filter(|s| self.contains(**s))
            .map(|s| s.as_str())
            .collect();
        f.write_str(&names.join("+"))
    }
}

/// One window handed to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardInput<'a> {
    pub lookback: &'a [f64],
    pub period: usize,
    pub trend_k: usize,
    /// Global decomposition restricted to the lookback span; enables the
    /// decomposition loss.
    pub global: Option<&'a ComponentTriple>,
}

/// Normalized-space forecast of one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentForecast {
    pub stream: Stream,
    pub values: Vec<f64>,
}

/// Everything the forward pass produces for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastBundle {
    /// De-normalized forecast.
    pub y_hat: Vec<f64>,
    /// Per-stream forecasts in normalized space, in stream order.
    pub components: Vec<ComponentForecast>,
    /// Statistics of the raw lookback used for de-normalization.
    pub stats: InstanceStats,
    pub output_affine: AffinePair,
    pub selected_prompts: Vec<SelectionRecord>,
    /// `None` when no global decomposition was supplied.
    pub dec_loss: Option<f64>,
}

impl ForecastBundle {
    pub fn component(&self, stream: Stream) -> Option<&[f64]> {
        self.components
            .iter()
            .find(|c| c.stream == stream)
            .map(|c| c.values.as_slice())
    }

    /// Sum of the normalized-space component forecasts, in stream order.
    pub fn normalized_sum(&self) -> Vec<f64> {
        let h = self.y_hat.len();
        let mut sum = self.components[0].values.clone();
        for c in &self.components[1..] {
            for t in 0..h {
                sum[t] += c.values[t];
            }
        }
        sum
    }
}

/// Per-sample loss values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub mse: f64,
    pub dec: f64,
}

/// Nodes of one recorded forward pass.
pub(crate) struct Graph {
    pub y_hat: Var,
    pub components: Vec<(Stream, Var)>,
    pub dec_loss: Option<Var>,
    pub selections: Vec<SelectionRecord>,
    pub stats: InstanceStats,
}

fn revin_key(s: Stream, which: &str) -> String {
    format!("revin.{s}.{which}")
}

fn embed_key(cfg: &TempoConfig, s: Stream, which: &str) -> String {
    if cfg.per_component_embed {
        format!("embed.{s}.{which}")
    } else {
        format!("embed.{which}")
    }
}

/// Configuration plus trained parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TempoModel {
    pub config: TempoConfig,
    pub params: ParamStore,
}

impl TempoModel {
    /// Fresh parameters drawn deterministically from `config.seed`.
    pub fn new(config: TempoConfig) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let d = cfg.embed_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();

        backbone::init_params(&mut params, &cfg.backbone, cfg.sequence_len(), &mut rng)?;

        let embed_streams: &[Stream] = if cfg.per_component_embed { cfg.streams() } else { &[Stream::Series] };
        for &s in embed_streams {
            let w = gaussian((cfg.patch_len, d), 1.0 / (cfg.patch_len as f64).sqrt(), &mut rng);
            params.insert(embed_key(cfg, s, "w"), ParamGroup::Embed, w)?;
            params.insert(embed_key(cfg, s, "b"), ParamGroup::Embed, Mat::zeros((1, d)))?;
        }

        match cfg.prompt.mode {
            PromptMode::SemiSoft | PromptMode::Hard => {
                for &s in cfg.streams() {
                    let p = init_semi_soft(s, cfg.prompt.length, d, cfg.seed);
                    params.insert(format!("prompt.{s}"), ParamGroup::Prompts, p.vectors)?;
                }
            }
            PromptMode::Pool => {
                let pool = PromptPool::init(cfg.prompt.pool_size, cfg.prompt.top_k, cfg.prompt.length, d, &mut rng)?;
                params.insert("prompt.pool.keys", ParamGroup::Prompts, pool.keys)?;
                params.insert("prompt.pool.values", ParamGroup::Prompts, pool.values)?;
            }
            PromptMode::None => {}
        }

        let mut affine_streams = cfg.streams().to_vec();
        if cfg.decompose {
            affine_streams.push(Stream::Series);
        }
        for s in affine_streams {
            params.insert(revin_key(s, "gamma"), ParamGroup::RevinAffine, Mat::ones((1, 1)))?;
            params.insert(revin_key(s, "beta"), ParamGroup::RevinAffine, Mat::zeros((1, 1)))?;
        }

        if cfg.decompose {
            for s in [Stream::Trend, Stream::Season] {
                params.insert(format!("local.{s}.scale"), ParamGroup::LocalDecomp, Mat::ones((1, cfg.lookback)))?;
                params.insert(format!("local.{s}.bias"), ParamGroup::LocalDecomp, Mat::zeros((1, cfg.lookback)))?;
            }
        }

        let fan_in = cfg.head_rows() * d;
        for &s in cfg.streams() {
            let w = gaussian((fan_in, cfg.horizon), 1.0 / (fan_in as f64).sqrt(), &mut rng);
            params.insert(format!("head.{s}.w"), ParamGroup::Heads, w)?;
            params.insert(format!("head.{s}.b"), ParamGroup::Heads, Mat::zeros((1, cfg.horizon)))?;
        }

        let mut model = TempoModel { config, params };
        model.apply_freeze_policy();
        Ok(model)
    }

    /// Applies the configured freeze policy; hard prompts are always frozen.
    pub fn apply_freeze_policy(&mut self) {
        self.params.set_freeze_policy(self.config.freeze);
        if self.config.prompt.mode == PromptMode::Hard {
            for p in self.params.iter_mut() {
                if p.group == ParamGroup::Prompts {
                    p.trainable = false;
                }
            }
        }
    }

    pub fn output_affine(&self) -> AffinePair {
        AffinePair {
            gamma: self.params.get(&revin_key(Stream::Series, "gamma"))[[0, 0]],
            beta: self.params.get(&revin_key(Stream::Series, "beta"))[[0, 0]],
        }
    }

    pub fn prompt_pool(&self) -> Option<PromptPool> {
        (self.config.prompt.mode == PromptMode::Pool).then(|| PromptPool {
            keys: self.params.get("prompt.pool.keys").clone(),
            values: self.params.get("prompt.pool.values").clone(),
            top_k: self.config.prompt.top_k,
            prompt_len: self.config.prompt.length,
        })
    }

    fn check_input(&self, input: &ForwardInput<'_>) -> Result<()> {
        let l = self.config.lookback;
        if input.lookback.len() != l {
            return Err(shape_err!("lookback has length {}, model expects {l}", input.lookback.len()));
        }
        if let Some(g) = input.global {
            if g.len() != l {
                return Err(shape_err!("global decomposition slice has length {}, expected {l}", g.len()));
            }
        }
        if input.lookback.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("lookback contains non-finite values"));
        }
        Ok(())
    }

    /// Normalized component rows (`1 × L` each) in stream order, plus the raw
    /// corrected components for the decomposition loss.
    fn component_rows(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        input: &ForwardInput<'_>,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let cfg = &self.config;
        // Every component is scaled by the raw window's statistics, so their
        // relative amplitudes survive and one de-normalization inverts the sum.
        let (z, _) = instance_normalize(input.lookback, AffinePair::IDENTITY, cfg.eps);
        let x = tape.row(&z);
        let raw: Vec<Var> = if cfg.decompose {
            let local = local_decompose(&z, input.period, input.trend_k)?;
            let mut corrected = Vec::with_capacity(2);
            for (s, comp) in [(Stream::Trend, &local.trend), (Stream::Season, &local.season)] {
                let c = tape.row(comp);
                let scale = binder.var(tape, &format!("local.{s}.scale"));
                let bias = binder.var(tape, &format!("local.{s}.bias"));
                let scaled = tape.mul(scale, c);
                corrected.push(tape.add(scaled, bias));
            }
            let detrended = tape.sub(x, corrected[0]);
            let residual = tape.sub(detrended, corrected[1]);
            vec![corrected[0], corrected[1], residual]
        } else {
            vec![x]
        };

        let mut normed = Vec::with_capacity(raw.len());
        for (&s, &c) in cfg.streams().iter().zip(&raw) {
            let gamma = binder.var(tape, &revin_key(s, "gamma"));
            let beta = binder.var(tape, &revin_key(s, "beta"));
            let scaled = tape.mul_scalar(c, gamma);
            normed.push(tape.add_scalar(scaled, beta));
        }
        Ok((normed, raw))
    }

    fn prompt_rows(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        stream: Stream,
        tokens: Var,
        selections: &mut Vec<SelectionRecord>,
    ) -> Result<Vec<Var>> {
        let p = &self.config.prompt;
        Ok(match p.mode {
            PromptMode::None => Vec::new(),
            PromptMode::SemiSoft | PromptMode::Hard => vec![binder.var(tape, &format!("prompt.{stream}"))],
            PromptMode::Pool => {
                let query = pool_query(tape.value(tokens), p.query_pool);
                let keys = self.params.get("prompt.pool.keys");
                let indices = select_top_k(keys, query.view(), p.top_k)?;
                let values = binder.var(tape, "prompt.pool.values");
                let rows = indices
                    .iter()
                    .map(|&m| tape.slice_rows(values, m * p.length, p.length))
                    .collect();
                selections.push(SelectionRecord {
                    component: stream,
                    indices,
                });
                rows
            }
        })
    }

    pub(crate) fn build_graph(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        input: &ForwardInput<'_>,
        coalition: Coalition,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Graph> {
        self.check_input(input)?;
        let cfg = &self.config;
        let d = cfg.embed_dim();
        let n = cfg.patches();
        let streams = cfg.streams();
        let (normed, raw) = self.component_rows(tape, binder, input)?;

        let mut selections = Vec::new();
        let mut blocks = Vec::with_capacity(streams.len());
        for (&s, &row) in streams.iter().zip(&normed) {
            let patches = tape.unfold(row, cfg.patch_len, cfg.stride);
            let w = binder.var(tape, &embed_key(cfg, s, "w"));
            let b = binder.var(tape, &embed_key(cfg, s, "b"));
            let projected = tape.matmul(patches, w);
            let tokens = tape.add_row(projected, b);
            let mut parts = self.prompt_rows(tape, binder, s, tokens, &mut selections)?;
            parts.push(tokens);
            let block = if parts.len() == 1 { tokens } else { tape.concat_rows(&parts) };
            blocks.push(if coalition.contains(s) {
                block
            } else {
                tape.leaf(Mat::zeros((cfg.stream_len(), d)))
            });
        }
        let sequence = if blocks.len() == 1 { blocks[0] } else { tape.concat_rows(&blocks) };
        let hidden = backbone::forward(
            tape,
            binder,
            sequence,
            &cfg.backbone,
            ForwardOptions {
                dropout_rng,
                disable_lora: false,
            },
        )?;

        let per_stream = cfg.stream_len();
        let skip = if cfg.include_prompt_positions { 0 } else { cfg.prompt.rows() };
        let mut components = Vec::with_capacity(streams.len());
        for (i, &s) in streams.iter().enumerate() {
            let y = if coalition.contains(s) {
                let states = tape.slice_rows(hidden, i * per_stream + skip, per_stream - skip);
                let flat = tape.flatten(states);
                let w = binder.var(tape, &format!("head.{s}.w"));
                let b = binder.var(tape, &format!("head.{s}.b"));
                let out = tape.matmul(flat, w);
                tape.add_row(out, b)
            } else {
                tape.leaf(Mat::zeros((1, cfg.horizon)))
            };
            components.push((s, y));
        }
        debug_assert_eq!(per_stream - skip, cfg.head_rows());
        debug_assert!(n <= per_stream);

        let mut sum = components[0].1;
        for &(_, y) in &components[1..] {
            sum = tape.add(sum, y);
        }

        // y = std · ((sum − β) / γ) + mean, with the raw window's statistics.
        let stats = InstanceStats::of(input.lookback, cfg.eps);
        let gamma = binder.var(tape, &revin_key(Stream::Series, "gamma"));
        let beta = binder.var(tape, &revin_key(Stream::Series, "beta"));
        let neg_beta = tape.scale(beta, -1.0);
        let centered = tape.add_scalar(sum, neg_beta);
        let unscaled = tape.div_scalar(centered, gamma);
        let spread = tape.scale(unscaled, stats.std());
        let mean = tape.constant_scalar(stats.mean);
        let y_hat = tape.add_scalar(spread, mean);

        let dec_loss = match (cfg.decompose, input.global) {
            (true, Some(global)) => {
                let mut total = None;
                for (&local, target) in raw.iter().zip(global.components()) {
                    let z = tape.normalize_rows(local, cfg.eps);
                    let (g, _) = instance_normalize(target, AffinePair::IDENTITY, cfg.eps);
                    let g = tape.row(&g);
                    let term = tape.mse(z, g);
                    total = Some(match total {
                        None => term,
                        Some(acc) => tape.add(acc, term),
                    });
                }
                Some(tape.scale(total.expect("three components"), 1.0 / 3.0))
            }
            _ => None,
        };

        Ok(Graph {
            y_hat,
            components,
            dec_loss,
            selections,
            stats,
        })
    }

    /// Forecast for one window with the given components active.
    pub fn forward_masked(&self, input: &ForwardInput<'_>, coalition: Coalition) -> Result<ForecastBundle> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let graph = self.build_graph(&mut tape, &mut binder, input, coalition, None)?;
        let row = |v: Var| tape.value(v).iter().copied().collect::<Vec<f64>>();
        Ok(ForecastBundle {
            y_hat: row(graph.y_hat),
            components: graph
                .components
                .iter()
                .map(|&(stream, v)| ComponentForecast { stream, values: row(v) })
                .collect(),
            stats: graph.stats,
            output_affine: self.output_affine(),
            selected_prompts: graph.selections,
            dec_loss: graph.dec_loss.map(|v| tape.scalar(v)),
        })
    }

    pub fn forward(&self, input: &ForwardInput<'_>) -> Result<ForecastBundle> {
        self.forward_masked(input, Coalition::FULL)
    }

    /// Builds `MSE(y_hat, target) + λ·L_dec` on `tape`.
    pub(crate) fn loss_graph(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        input: &ForwardInput<'_>,
        target: &[f64],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var, Option<Var>)> {
        if target.len() != self.config.horizon {
            return Err(shape_err!("target has length {}, expected {}", target.len(), self.config.horizon));
        }
        let graph = self.build_graph(tape, binder, input, Coalition::FULL, dropout_rng)?;
        let t = tape.row(target);
        let mse = tape.mse(graph.y_hat, t);
        let total = match graph.dec_loss {
            Some(dec) if self.config.lambda_dec > 0.0 => {
                let weighted = tape.scale(dec, self.config.lambda_dec);
                tape.add(mse, weighted)
            }
            _ => mse,
        };
        Ok((total, mse, graph.dec_loss))
    }

    /// Loss value and parameter gradients for one window.
    pub fn loss_and_grad(
        &self,
        input: &ForwardInput<'_>,
        target: &[f64],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(LossParts, crate::backbone::params::ParamGrads)> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let (total, mse, dec) = self.loss_graph(&mut tape, &mut binder, input, target, dropout_rng)?;
        let grads = tape.backward(total)?;
        let parts = LossParts {
            total: tape.scalar(total),
            mse: tape.scalar(mse),
            dec: dec.map(|v| tape.scalar(v)).unwrap_or(0.0),
        };
        Ok((parts, binder.collect(&grads)))
    }

    /// Loss value only.
    pub fn loss(&self, input: &ForwardInput<'_>, target: &[f64]) -> Result<LossParts> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let (total, mse, dec) = self.loss_graph(&mut tape, &mut binder, input, target, None)?;
        Ok(LossParts {
            total: tape.scalar(total),
            mse: tape.scalar(mse),
            dec: dec.map(|v| tape.scalar(v)).unwrap_or(0.0),
        })
    }

    /// Pooled query vector per stream, for diagnostics.
    pub fn queries(&self, input: &ForwardInput<'_>) -> Result<Vec<(Stream, Array1<f64>)>> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let (normed, _) = self.component_rows(&mut tape, &mut binder, input)?;
        let cfg = &self.config;
        let mut out = Vec::new();
        for (&s, &row) in cfg.streams().iter().zip(&normed) {
            let patches = tape.unfold(row, cfg.patch_len, cfg.stride);
            let w = binder.var(&mut tape, &embed_key(cfg, s, "w"));
            let b = binder.var(&mut tape, &embed_key(cfg, s, "b"));
            let projected = tape.matmul(patches, w);
            let tokens = tape.add_row(projected, b);
            out.push((s, pool_query(tape.value(tokens), cfg.prompt.query_pool)));
        }
        Ok(out)
    }
}

/// `MSE(y_hat, target) + λ·dec_loss` from an already computed bundle.
pub fn total_loss(bundle: &ForecastBundle, target: &[f64], lambda_dec: f64) -> Result<f64> {
    if bundle.y_hat.len() != target.len() {
        return Err(shape_err!("forecast length {} != target length {}", bundle.y_hat.len(), target.len()));
    }
    let mse = crate::metrics::mse(&bundle.y_hat, target);
    Ok(mse + lambda_dec * bundle.dec_loss.unwrap_or(0.0))
}
