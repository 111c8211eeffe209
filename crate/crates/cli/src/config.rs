//! Plain-text `key=value` run configuration.
//!
//! One assignment per line, `#` starts a comment. Unknown keys and values
//! that do not parse are errors that name the key. Layering is
//! defaults, then the file, then command-line overrides.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use tempo::backbone::params::FreezePolicy;
use tempo::data::SplitSpec;
use tempo::interpret::ErrorMetric;
use tempo::model::experiment::AblationFlags;
use tempo::model::TempoConfig;
use tempo::prompt::{PromptMode, QueryPool};
use tempo::theory::Suite;

use crate::error::CliError;

/// How the first CSV column is treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimestampMode {
    /// A first column named `timestamp` is a timestamp column.
    Auto,
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: TempoConfig,
    pub input: Option<PathBuf>,
    pub data: Option<PathBuf>,
    /// Seasonal period of `data`; the model's `period` when unset.
    pub data_period: Option<usize>,
    pub sources: Vec<PathBuf>,
    /// One per source, or empty for the model's `period` everywhere.
    pub source_periods: Vec<usize>,
    pub target: Option<PathBuf>,
    pub target_period: Option<usize>,
    pub has_timestamp: TimestampMode,
    pub interp_linear: bool,
    pub split: SplitSpec,
    pub out: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub ablations: AblationFlags,
    /// Keep the windows whose AbsSMAPE is within this quantile.
    pub smape_clip: Option<f64>,
    pub shap_buckets: usize,
    pub shap_metric: ErrorMetric,
    pub via_gam: bool,
    pub gam_interactions: bool,
    pub suite: Suite,
    pub synth_length: usize,
    pub trend_slope: f64,
    pub season_amp: f64,
    pub noise_std: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: TempoConfig::default(),
            input: None,
            data: None,
            data_period: None,
            sources: Vec::new(),
            source_periods: Vec::new(),
            target: None,
            target_period: None,
            has_timestamp: TimestampMode::Auto,
            interp_linear: false,
            split: SplitSpec::STANDARD,
            out: None,
            ckpt: None,
            ablations: AblationFlags::ALL,
            smape_clip: None,
            shap_buckets: 4,
            shap_metric: ErrorMetric::Mse,
            via_gam: false,
            gam_interactions: true,
            suite: Suite::All,
            synth_length: 2000,
            trend_slope: 0.0,
            season_amp: 1.0,
            noise_std: 0.1,
        }
    }
}

fn parse<T: FromStr>(key: &str, raw: &str) -> Result<T, CliError>
where
    T::Err: Display,
{
    raw.parse::<T>()
        .map_err(|e| CliError::config(format!("key {key:?}: cannot parse {raw:?}: {e}")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool, CliError> {
    match raw {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::config(format!("key {key:?}: expected true or false, got {raw:?}"))),
    }
}

fn parse_opt<T: FromStr>(key: &str, raw: &str) -> Result<Option<T>, CliError>
where
    T::Err: Display,
{
    if raw.is_empty() || raw == "none" {
        Ok(None)
    } else {
        parse(key, raw).map(Some)
    }
}

fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>, CliError>
where
    T::Err: Display,
{
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn opt_path(v: &Option<PathBuf>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn ablation_list(f: AblationFlags) -> String {
    let mut names = Vec::new();
    if f.no_dec {
        names.push("no_dec");
    }
    if f.no_prompt {
        names.push("no_prompt");
    }
    if f.no_dec_loss {
        names.push("no_dec_loss");
    }
    names.join(",")
}

impl RunConfig {
    /// Assigns one key. Errors name the key.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), CliError> {
        let raw = raw.trim();
        let m = &mut self.model;
        match key {
            "lookback" => m.lookback = parse(key, raw)?,
            "horizon" => m.horizon = parse(key, raw)?,
            "patch_len" => m.patch_len = parse(key, raw)?,
            "stride" => m.stride = parse(key, raw)?,
            "period" => m.period = parse(key, raw)?,
            "trend_k" => m.trend_k = parse(key, raw)?,
            "decompose" => m.decompose = parse_bool(key, raw)?,
            "lambda_dec" => m.lambda_dec = parse(key, raw)?,
            "lr" => m.lr = parse(key, raw)?,
            "epochs" => m.epochs = parse(key, raw)?,
            "batch" => m.batch = parse(key, raw)?,
            "seed" => m.seed = parse(key, raw)?,
            "freeze" => m.freeze = parse::<FreezePolicy>(key, raw)?,
            "eps" => m.eps = parse(key, raw)?,
            "per_component_embed" => m.per_component_embed = parse_bool(key, raw)?,
            "include_prompt_positions" => m.include_prompt_positions = parse_bool(key, raw)?,
            "prompt_mode" => m.prompt.mode = parse::<PromptMode>(key, raw)?,
            "pool_size" => m.prompt.pool_size = parse(key, raw)?,
            "top_k" => m.prompt.top_k = parse(key, raw)?,
            "prompt_len" => m.prompt.length = parse(key, raw)?,
            "query_pool" => m.prompt.query_pool = parse::<QueryPool>(key, raw)?,
            "layers" => m.backbone.layers = parse(key, raw)?,
            "heads" => m.backbone.heads = parse(key, raw)?,
            "embed_dim" => m.backbone.embed_dim = parse(key, raw)?,
            "mlp_mult" => m.backbone.mlp_mult = parse(key, raw)?,
            "dropout" => m.backbone.dropout = parse(key, raw)?,
            "causal" => m.backbone.causal = parse_bool(key, raw)?,
            "lora_rank" => m.backbone.lora_rank = parse(key, raw)?,
            "lora_alpha" => m.backbone.lora_alpha = parse(key, raw)?,
            "train_stride" => m.windows.train_stride = parse(key, raw)?,
            "eval_stride" => m.windows.eval_stride = parse(key, raw)?,
            "samples_per_domain" => m.windows.samples_per_domain = parse(key, raw)?,
            "input" => self.input = parse_opt(key, raw)?,
            "data" => self.data = parse_opt(key, raw)?,
            "data_period" => self.data_period = parse_opt(key, raw)?,
            "sources" => self.sources = parse_list(key, raw)?,
            "source_periods" => self.source_periods = parse_list(key, raw)?,
            "target" => self.target = parse_opt(key, raw)?,
            "target_period" => self.target_period = parse_opt(key, raw)?,
            "has_timestamp" => {
                self.has_timestamp = match raw {
                    "auto" => TimestampMode::Auto,
                    other => {
                        if parse_bool(key, other)? {
                            TimestampMode::Yes
                        } else {
                            TimestampMode::No
                        }
                    }
                }
            }
            "interp" => {
                self.interp_linear = match raw {
                    "linear" => true,
                    "none" => false,
                    _ => return Err(CliError::config(format!("key {key:?}: expected linear or none, got {raw:?}"))),
                }
            }
            "split" => {
                let f: Vec<f64> = parse_list(key, raw)?;
                if f.len() != 3 {
                    return Err(CliError::config(format!("key {key:?}: expected three fractions, got {raw:?}")));
                }
                self.split = SplitSpec::new(f[0], f[1], f[2])
                    .map_err(|e| CliError::config(format!("key {key:?}: {e}")))?;
            }
            "out" => self.out = parse_opt(key, raw)?,
            "ckpt" => self.ckpt = parse_opt(key, raw)?,
            "ablations" => {
                self.ablations =
                    AblationFlags::parse(raw).map_err(|e| CliError::config(format!("key {key:?}: {e}")))?
            }
            "smape_clip" => {
                let q: Option<f64> = parse_opt(key, raw)?;
                if let Some(q) = q {
                    if !(q > 0.0 && q <= 1.0) {
                        return Err(CliError::config(format!("key {key:?}: quantile must be in (0, 1], got {q}")));
                    }
                }
                self.smape_clip = q;
            }
            "shap_buckets" => self.shap_buckets = parse(key, raw)?,
            "shap_metric" => self.shap_metric = parse(key, raw)?,
            "via_gam" => self.via_gam = parse_bool(key, raw)?,
            "gam_interactions" => self.gam_interactions = parse_bool(key, raw)?,
            "suite" => self.suite = parse(key, raw)?,
            "synth_length" => self.synth_length = parse(key, raw)?,
            "trend_slope" => self.trend_slope = parse(key, raw)?,
            "season_amp" => self.season_amp = parse(key, raw)?,
            "noise_std" => self.noise_std = parse(key, raw)?,
            _ => return Err(CliError::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order. Feeding these
    /// back through [`RunConfig::set`] reproduces `self`.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        vec![
            ("lookback", m.lookback.to_string()),
            ("horizon", m.horizon.to_string()),
            ("patch_len", m.patch_len.to_string()),
            ("stride", m.stride.to_string()),
            ("period", m.period.to_string()),
            ("trend_k", m.trend_k.to_string()),
            ("decompose", m.decompose.to_string()),
            ("lambda_dec", m.lambda_dec.to_string()),
            ("lr", m.lr.to_string()),
            ("epochs", m.epochs.to_string()),
            ("batch", m.batch.to_string()),
            ("seed", m.seed.to_string()),
            ("freeze", m.freeze.as_str().to_string()),
            ("eps", m.eps.to_string()),
            ("per_component_embed", m.per_component_embed.to_string()),
            ("include_prompt_positions", m.include_prompt_positions.to_string()),
            ("prompt_mode", m.prompt.mode.as_str().to_string()),
            ("pool_size", m.prompt.pool_size.to_string()),
            ("top_k", m.prompt.top_k.to_string()),
            ("prompt_len", m.prompt.length.to_string()),
            ("query_pool", m.prompt.query_pool.as_str().to_string()),
            ("layers", m.backbone.layers.to_string()),
            ("heads", m.backbone.heads.to_string()),
            ("embed_dim", m.backbone.embed_dim.to_string()),
            ("mlp_mult", m.backbone.mlp_mult.to_string()),
            ("dropout", m.backbone.dropout.to_string()),
            ("causal", m.backbone.causal.to_string()),
            ("lora_rank", m.backbone.lora_rank.to_string()),
            ("lora_alpha", m.backbone.lora_alpha.to_string()),
            ("train_stride", m.windows.train_stride.to_string()),
            ("eval_stride", m.windows.eval_stride.to_string()),
            ("samples_per_domain", m.windows.samples_per_domain.to_string()),
            ("input", opt_path(&self.input)),
            ("data", opt_path(&self.data)),
            ("data_period", opt(&self.data_period)),
            ("sources", join(&self.sources.iter().map(|p| p.display()).collect::<Vec<_>>())),
            ("source_periods", join(&self.source_periods)),
            ("target", opt_path(&self.target)),
            ("target_period", opt(&self.target_period)),
            (
                "has_timestamp",
                match self.has_timestamp {
                    TimestampMode::Auto => "auto",
                    TimestampMode::Yes => "true",
                    TimestampMode::No => "false",
                }
                .to_string(),
            ),
            ("interp", if self.interp_linear { "linear" } else { "none" }.to_string()),
            ("split", join(&[self.split.train_frac, self.split.val_frac, self.split.test_frac])),
            ("out", opt_path(&self.out)),
            ("ckpt", opt_path(&self.ckpt)),
            ("ablations", ablation_list(self.ablations)),
            ("smape_clip", opt(&self.smape_clip)),
            ("shap_buckets", self.shap_buckets.to_string()),
            ("shap_metric", self.shap_metric.as_str().to_string()),
            ("via_gam", self.via_gam.to_string()),
            ("gam_interactions", self.gam_interactions.to_string()),
            ("suite", self.suite.as_str().to_string()),
            ("synth_length", self.synth_length.to_string()),
            ("trend_slope", self.trend_slope.to_string()),
            ("season_amp", self.season_amp.to_string()),
            ("noise_std", self.noise_std.to_string()),
        ]
    }

    /// Applies every assignment of a config file's text.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::config(format!("{origin}:{}: expected key=value, got {line:?}", i + 1))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(CliError::config(format!("{origin}:{}: key {key:?} assigned twice", i + 1)));
            }
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// `defaults < file < overrides`; overrides apply in the order given.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut cfg = match file {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// The resolved configuration as config-file text.
    pub fn render(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// SHA-256 of the rendered configuration without `out`, which never
    /// influences numeric results.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k != "out" {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Period and trend half-window for a dataset whose period may differ
    /// from the model default.
    pub fn dataset_structure(&self, period: Option<usize>) -> (usize, usize) {
        match period {
            Some(p) if p != self.model.period => (p, tempo::decompose::default_trend_k(p)),
            _ => (self.model.period, self.model.trend_k),
        }
    }
}

/// Parses `key=value` from a command-line `--set` argument.
pub fn parse_assignment(s: &str) -> Result<(String, String), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("expected KEY=VALUE, got {s:?}")))?;
    Ok((k.trim().to_string(), v.to_string()))
}
