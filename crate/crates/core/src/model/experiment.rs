//! Sample preparation plus the zero-shot and ablation protocols.

use std::fmt;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{evaluate, train, TrainHistory};
use super::{ForwardInput, TempoConfig, TempoModel};
use crate::data::{make_windows, split_chrono, SeriesFrame, SplitSpec};
use crate::decompose::{global_decompose, ComponentTriple};
use crate::error::{invalid, Result, TempoError};
use crate::metrics::Metrics;
use crate::prompt::PromptMode;

const CAP_STREAM: u64 = 0x4341_5053;

/// One training or evaluation window with everything the model needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub lookback: Vec<f64>,
    pub target: Vec<f64>,
    /// Global decomposition restricted to the lookback span.
    pub global: Option<ComponentTriple>,
    pub period: usize,
    pub trend_k: usize,
    pub domain: usize,
    pub channel_id: usize,
    pub origin_t: usize,
}

impl Sample {
    pub fn input(&self) -> ForwardInput<'_> {
        ForwardInput {
            lookback: &self.lookback,
            period: self.period,
            trend_k: self.trend_k,
            global: self.global.as_ref(),
        }
    }
}

/// A named dataset and its seasonal structure.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub id: String,
    pub frame: SeriesFrame,
    pub period: usize,
    pub trend_k: usize,
}

/// Windows of every channel of `frame`. With `with_global` each window
/// carries the matching slice of the channel's global decomposition.
/// `origin_t` is relative to the start of `frame`.
pub fn samples_from_frame(
    frame: &SeriesFrame,
    domain: usize,
    period: usize,
    trend_k: usize,
    cfg: &TempoConfig,
    stride: usize,
    with_global: bool,
) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (channel_id, channel) in frame.channels().iter().enumerate() {
        let global = if with_global {
            Some(global_decompose(&channel.values, period, trend_k)?)
        } else {
            None
        };
        for w in make_windows(&channel.values, cfg.lookback, cfg.horizon, stride)? {
            let global = match &global {
                Some(g) => Some(g.slice(w.origin_t, w.origin_t + cfg.lookback)?),
                None => None,
            };
            out.push(Sample {
                lookback: w.lookback,
                target: w.horizon,
                global,
                period,
                trend_k,
                domain,
                channel_id,
                origin_t: w.origin_t,
            });
        }
    }
    Ok(out)
}

/// Training, validation and test samples of one experiment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

struct Splits {
    train: Vec<Sample>,
    val: Vec<Sample>,
    test: Vec<Sample>,
}

/// Windows whose horizon lies in `[start, end)` of `frame`; the lookback may
/// reach back before `start` into earlier (past) data.
fn eval_samples(ds: &DatasetSpec, domain: usize, cfg: &TempoConfig, start: usize, end: usize) -> Result<Vec<Sample>> {
    let from = start.checked_sub(cfg.lookback).ok_or_else(|| {
        TempoError::TooShort(format!("{}: only {start} points precede the evaluation span, lookback is {}", ds.id, cfg.lookback))
    })?;
    let span = ds.frame.slice(from, end)?;
    let mut out = samples_from_frame(&span, domain, ds.period, ds.trend_k, cfg, cfg.windows.eval_stride, false)?;
    out.iter_mut().for_each(|s| s.origin_t += from);
    Ok(out)
}

/// Global decompositions are computed on the training split only, so no
/// validation or test value influences a training target.
fn split_samples(ds: &DatasetSpec, domain: usize, cfg: &TempoConfig, split: SplitSpec) -> Result<Splits> {
    let (train_f, val_f, _) = split_chrono(&ds.frame, split)?;
    let train_end = train_f.len();
    let val_end = train_end + val_f.len();
    Ok(Splits {
        train: samples_from_frame(&train_f, domain, ds.period, ds.trend_k, cfg, cfg.windows.train_stride, true)?,
        val: eval_samples(ds, domain, cfg, train_end, val_end)?,
        test: eval_samples(ds, domain, cfg, val_end, ds.frame.len())?,
    })
}

/// Keeps at most `cap` samples, chosen by a seeded draw, in original order.
fn cap_samples(samples: Vec<Sample>, cap: usize, seed: u64) -> Vec<Sample> {
    if cap == 0 || samples.len() <= cap {
        return samples;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = sample_indices(&mut rng, samples.len(), cap).into_vec();
    keep.sort_unstable();
    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    keep.into_iter().map(|i| slots[i].take().expect("distinct indices")).collect()
}

/// Train, validation and test samples of a single dataset.
pub fn prepare_single(ds: &DatasetSpec, cfg: &TempoConfig, split: SplitSpec) -> Result<ExperimentData> {
    let s = split_samples(ds, 0, cfg, split)?;
    Ok(ExperimentData {
        train: cap_samples(s.train, cfg.windows.samples_per_domain, cfg.seed ^ CAP_STREAM),
        val: s.val,
        test: s.test,
    })
}

fn same_values(a: &SeriesFrame, b: &SeriesFrame) -> bool {
    a.channels()
        .iter()
        .any(|ca| b.channels().iter().any(|cb| ca.values == cb.values))
}

/// Errors if the target shares an id or a whole channel with any source.
pub fn check_leakage(sources: &[DatasetSpec], target: &DatasetSpec) -> Result<()> {
    for s in sources {
        if s.id == target.id {
            return Err(TempoError::Leakage(format!("target {:?} is listed among the sources", target.id)));
        }
        if same_values(&s.frame, &target.frame) {
            return Err(TempoError::Leakage(format!(
                "source {:?} contains a channel identical to a target channel",
                s.id
            )));
        }
    }
    Ok(())
}

/// Pooled source training and validation samples plus the target's test
/// split. Each source contributes at most `samples_per_domain` training
/// windows.
pub fn prepare_zero_shot(
    sources: &[DatasetSpec],
    target: &DatasetSpec,
    cfg: &TempoConfig,
    split: SplitSpec,
) -> Result<ExperimentData> {
    if sources.is_empty() {
        return Err(invalid!("zero-shot needs at least one source dataset"));
    }
    check_leakage(sources, target)?;
    let mut data = ExperimentData::default();
    for (domain, ds) in sources.iter().enumerate() {
        let s = split_samples(ds, domain, cfg, split)?;
        let seed = (cfg.seed ^ CAP_STREAM).wrapping_add(domain as u64);
        data.train.extend(cap_samples(s.train, cfg.windows.samples_per_domain, seed));
        data.val.extend(s.val);
    }
    let (train_f, val_f, _) = split_chrono(&target.frame, split)?;
    let test_start = train_f.len() + val_f.len();
    data.test = eval_samples(target, sources.len(), cfg, test_start, target.frame.len())?;
    Ok(data)
}

/// Result of one train + evaluate run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: TempoModel,
    pub history: TrainHistory,
    pub metrics: Metrics,
}

/// Fresh model from `cfg`, trained on `data.train`/`data.val` and evaluated
/// on `data.test`.
pub fn run_experiment(cfg: &TempoConfig, data: &ExperimentData) -> Result<RunOutcome> {
    let mut model = TempoModel::new(cfg.clone())?;
    let history = train(&mut model, &data.train, &data.val)?;
    let metrics = evaluate(&model, &data.test)?;
    Ok(RunOutcome { model, history, metrics })
}

/// Trains once on the pooled sources and evaluates on the target's test split.
pub fn zero_shot_run(
    sources: &[DatasetSpec],
    target: &DatasetSpec,
    cfg: &TempoConfig,
    split: SplitSpec,
) -> Result<RunOutcome> {
    let data = prepare_zero_shot(sources, target, cfg, split)?;
    run_experiment(cfg, &data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoDec,
    NoPrompt,
    NoDecLoss,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDec => "w/o Dec",
            Variant::NoPrompt => "w/o Pro",
            Variant::NoDecLoss => "w/o Dec Loss",
        }
    }

    /// `cfg` with this variant's component removed.
    pub fn apply(self, cfg: &TempoConfig) -> TempoConfig {
        let mut c = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::NoDec => c.decompose = false,
            Variant::NoPrompt => c.prompt.mode = PromptMode::None,
            Variant::NoDecLoss => c.lambda_dec = 0.0,
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AblationFlags {
    pub no_dec: bool,
    pub no_prompt: bool,
    pub no_dec_loss: bool,
}

impl AblationFlags {
    pub const ALL: AblationFlags = AblationFlags {
        no_dec: true,
        no_prompt: true,
        no_dec_loss: true,
    };

    /// Parses a comma-separated list of `no_dec`, `no_prompt`, `no_dec_loss`.
    pub fn parse(list: &str) -> Result<Self> {
        let mut flags = AblationFlags::default();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "no_dec" => flags.no_dec = true,
                "no_prompt" => flags.no_prompt = true,
                "no_dec_loss" => flags.no_dec_loss = true,
                other => return Err(invalid!("unknown ablation flag {other:?}")),
            }
        }
        Ok(flags)
    }

    /// The full model first, then each flagged variant.
    pub fn variants(self) -> Vec<Variant> {
        let mut v = vec![Variant::Full];
        for (on, variant) in [
            (self.no_dec, Variant::NoDec),
            (self.no_prompt, Variant::NoPrompt),
            (self.no_dec_loss, Variant::NoDecLoss),
        ] {
            if on {
                v.push(variant);
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mse: f64,
    pub mae: f64,
    pub abs_smape: f64,
}

/// One row per variant, all trained from the same seed on the same samples.
pub fn ablate(cfg: &TempoConfig, flags: AblationFlags, data: &ExperimentData) -> Result<Vec<AblationRow>> {
    flags
        .variants()
        .into_iter()
        .map(|variant| {
            let outcome = run_experiment(&variant.apply(cfg), data)?;
            log::info!("{variant}: {:?}", outcome.metrics);
            Ok(AblationRow {
                variant: variant.label().to_string(),
                mse: outcome.metrics.mse,
                mae: outcome.metrics.mae,
                abs_smape: outcome.metrics.abs_smape,
            })
        })
        .collect()
}
