//! One function per subcommand. Each takes the resolved configuration and
//! writes its artifacts; nothing here reads or writes outside the paths the
//! configuration names.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use tempo::data::{load_csv, synth_generate, CsvOptions, SeriesFrame, SynthSpec};
use tempo::decompose::global_decompose;
use tempo::interpret::{
    coalition_table, coalition_tables_by_horizon, gam_coalition_table, gam_fit_model, shapley, sobol_first_order,
    CoalitionTable, ComponentSeries,
};
use tempo::metrics::{abs_smape, Metrics};
use tempo::model::checkpoint;
use tempo::model::experiment::{prepare_single, prepare_zero_shot, run_experiment, DatasetSpec, ExperimentData, Sample};
use tempo::model::train::{metrics_of, predict, TrainHistory};
use tempo::model::{Coalition, ForecastBundle, ForwardInput, TempoModel};
use tempo::prompt::{selection_histogram_for, PromptMode, Stream};
use tempo::theory::run_suite;

use crate::config::{RunConfig, TimestampMode};
use crate::error::{CliError, CliResult};
use crate::plot::{emit_plot, Series};

/// The resolved configuration together with its hash.
pub struct Run {
    pub cfg: RunConfig,
    pub hash: String,
}

impl Run {
    pub fn new(cfg: RunConfig) -> Self {
        let hash = cfg.hash();
        Run { cfg, hash }
    }

    fn refresh_hash(&mut self) {
        self.hash = self.cfg.hash();
    }
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> CliResult<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| CliError::config(format!("missing required path {key:?}")))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Pretty JSON with object keys in sorted order.
pub fn json_text<T: Serialize>(value: &T) -> CliResult<String> {
    // serde_json's default map is ordered by key, so going through `Value`
    // sorts every object regardless of struct field order.
    let v = serde_json::to_value(value).map_err(|e| CliError::validation(e.to_string()))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| CliError::validation(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_text(path, &json_text(value)?)
}

fn resolved_text(run: &Run) -> String {
    format!("{}# config_hash={}\n", run.cfg.render(), run.hash)
}

/// Output directory with `resolved.cfg` written and `plots/` created.
fn prepare_out_dir(run: &Run) -> CliResult<PathBuf> {
    let dir = run.cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    create_dir(&dir.join("plots"))?;
    write_text(&dir.join("resolved.cfg"), &resolved_text(run))?;
    Ok(dir)
}

/// For commands whose output is a single file: the resolved configuration
/// goes next to it as `<file>.cfg`.
fn write_sidecar_cfg(run: &Run, file: &Path) -> CliResult<()> {
    let mut name = file.as_os_str().to_owned();
    name.push(".cfg");
    write_text(Path::new(&name), &resolved_text(run))
}

fn first_header_cell(path: &Path) -> CliResult<String> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut line = String::new();
    BufReader::new(file).read_line(&mut line).map_err(|e| CliError::io(path, e))?;
    Ok(line.split(',').next().unwrap_or("").trim().trim_start_matches('\u{feff}').to_string())
}

pub fn load_frame(cfg: &RunConfig, path: &Path) -> CliResult<SeriesFrame> {
    let has_timestamp = match cfg.has_timestamp {
        TimestampMode::Yes => true,
        TimestampMode::No => false,
        TimestampMode::Auto => first_header_cell(path)? == "timestamp",
    };
    Ok(load_csv(
        path,
        CsvOptions {
            has_timestamp,
            interp_linear: cfg.interp_linear,
        },
    )?)
}

fn dataset(cfg: &RunConfig, path: &Path, period: Option<usize>) -> CliResult<DatasetSpec> {
    let (period, trend_k) = cfg.dataset_structure(period);
    Ok(DatasetSpec {
        id: path.display().to_string(),
        frame: load_frame(cfg, path)?,
        period,
        trend_k,
    })
}

fn zero_shot_datasets(cfg: &RunConfig) -> CliResult<(Vec<DatasetSpec>, DatasetSpec)> {
    if cfg.sources.is_empty() {
        return Err(CliError::config("missing required path \"sources\""));
    }
    let target = required(&cfg.target, "target")?;
    if !cfg.source_periods.is_empty() && cfg.source_periods.len() != cfg.sources.len() {
        return Err(CliError::config(format!(
            "key \"source_periods\": {} periods for {} sources",
            cfg.source_periods.len(),
            cfg.sources.len()
        )));
    }
    let sources = cfg
        .sources
        .iter()
        .enumerate()
        .map(|(i, p)| dataset(cfg, p, cfg.source_periods.get(i).copied()))
        .collect::<CliResult<Vec<_>>>()?;
    Ok((sources, dataset(cfg, target, cfg.target_period)?))
}

/// Name of the ablation variant a configuration corresponds to.
fn variant_label(cfg: &RunConfig) -> &'static str {
    let m = &cfg.model;
    if !m.decompose {
        "w/o Dec"
    } else if m.prompt.mode == PromptMode::None {
        "w/o Pro"
    } else if m.lambda_dec == 0.0 {
        "w/o Dec Loss"
    } else {
        "full"
    }
}

/// Mean per-window AbsSMAPE over the windows at or below the `q`-quantile
/// of per-window AbsSMAPE.
pub fn clipped_smape(bundles: &[ForecastBundle], samples: &[Sample], q: f64) -> f64 {
    let mut per_window: Vec<f64> = bundles.iter().zip(samples).map(|(b, s)| abs_smape(&b.y_hat, &s.target)).collect();
    if per_window.is_empty() {
        return 0.0;
    }
    per_window.sort_by(f64::total_cmp);
    let keep = ((q * per_window.len() as f64).ceil() as usize).clamp(1, per_window.len());
    per_window[..keep].iter().sum::<f64>() / keep as f64
}

fn score(cfg: &RunConfig, bundles: &[ForecastBundle], samples: &[Sample]) -> Metrics {
    let mut m = metrics_of(bundles, samples);
    if let Some(q) = cfg.smape_clip {
        m.abs_smape = clipped_smape(bundles, samples, q);
    }
    m
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsRecord {
    pub variant: String,
    pub mse: f64,
    pub mae: f64,
    pub abs_smape: f64,
    pub seed: u64,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smape_clip: Option<f64>,
}

fn record(run: &Run, variant: &str, m: &Metrics) -> MetricsRecord {
    MetricsRecord {
        variant: variant.to_string(),
        mse: m.mse,
        mae: m.mae,
        abs_smape: m.abs_smape,
        seed: run.cfg.model.seed,
        config_hash: run.hash.clone(),
        smape_clip: run.cfg.smape_clip,
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// `origin_t, h, y_true, y_hat, y_T, y_S, y_R, channel`; component columns
/// are normalized-space forecasts and stay empty for a single-stream model.
fn write_predictions(path: &Path, bundles: &[ForecastBundle], samples: &[Sample]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["origin_t", "h", "y_true", "y_hat", "y_T", "y_S", "y_R", "channel"])?;
    for (b, s) in bundles.iter().zip(samples) {
        let comp = |st: Stream, h: usize| b.component(st).map(|c| c[h]);
        for h in 0..s.target.len() {
            w.write_record([
                s.origin_t.to_string(),
                h.to_string(),
                s.target[h].to_string(),
                b.y_hat[h].to_string(),
                cell(comp(Stream::Trend, h)),
                cell(comp(Stream::Season, h)),
                cell(comp(Stream::Residual, h)),
                format!("{}:{}", s.domain, s.channel_id),
            ])?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn forecast_plot(dir: &Path, bundles: &[ForecastBundle], samples: &[Sample]) -> CliResult<()> {
    if let (Some(b), Some(s)) = (bundles.first(), samples.first()) {
        let series = [Series::new("y_true", s.target.clone()), Series::new("y_hat", b.y_hat.clone())];
        emit_plot(&format!("first test window, origin {}", s.origin_t), &series, &dir.join("plots/forecast"))?;
    }
    Ok(())
}

fn history_plot(dir: &Path, history: &TrainHistory) -> CliResult<()> {
    let mut series = vec![Series::new("train_loss", history.epochs.iter().map(|e| e.train_loss).collect())];
    let val: Vec<f64> = history.epochs.iter().filter_map(|e| e.val_mse).collect();
    if !val.is_empty() {
        series.push(Series::new("val_mse", val));
    }
    emit_plot("loss by epoch", &series, &dir.join("plots/loss"))?;
    Ok(())
}

/// Everything a training run leaves behind in its output directory.
fn write_training_outputs(run: &Run, dir: &Path, model: &TempoModel, history: &TrainHistory, test: &[Sample]) -> CliResult<()> {
    checkpoint::save(model, dir.join("checkpoint"))?;
    let bundles = predict(model, test)?;
    let metrics = score(&run.cfg, &bundles, test);
    write_json(&dir.join("metrics.json"), &record(run, variant_label(&run.cfg), &metrics))?;
    write_json(&dir.join("history.json"), history)?;
    write_predictions(&dir.join("predictions.csv"), &bundles, test)?;
    forecast_plot(dir, &bundles, test)?;
    history_plot(dir, history)
}

pub fn synth(run: &Run) -> CliResult<()> {
    let out = required(&run.cfg.out, "out")?;
    let c = &run.cfg;
    let frame = synth_generate(&SynthSpec {
        length: c.synth_length,
        period: c.model.period,
        trend_slope: c.trend_slope,
        season_amp: c.season_amp,
        noise_std: c.noise_std,
        seed: c.model.seed,
    })?;
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["x"])?;
    for v in &frame.channels()[0].values {
        w.write_record([v.to_string()])?;
    }
    w.flush().map_err(|e| CliError::io(out, e))?;
    write_sidecar_cfg(run, out)
}

pub fn decompose(run: &Run) -> CliResult<()> {
    let c = &run.cfg;
    let input = required(&c.input, "input")?;
    let out = required(&c.out, "out")?;
    let frame = load_frame(c, input)?;
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["channel", "t", "x", "trend", "season", "residual"])?;
    for ch in frame.channels() {
        let d = global_decompose(&ch.values, c.model.period, c.model.trend_k)?;
        for (i, x) in ch.values.iter().enumerate() {
            let t = frame.timestamps().map_or(i as i64, |ts| ts[i]);
            w.write_record([
                ch.name.clone(),
                t.to_string(),
                x.to_string(),
                d.trend[i].to_string(),
                d.season[i].to_string(),
                d.residual[i].to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| CliError::io(out, e))?;
    write_sidecar_cfg(run, out)
}

pub fn train(run: &Run) -> CliResult<()> {
    let c = &run.cfg;
    let ds = dataset(c, required(&c.data, "data")?, c.data_period)?;
    c.model.validate()?;
    let data = prepare_single(&ds, &c.model, c.split)?;
    let dir = prepare_out_dir(run)?;
    let outcome = run_experiment(&c.model, &data)?;
    write_training_outputs(run, &dir, &outcome.model, &outcome.history, &data.test)
}

pub fn zero_shot(run: &Run) -> CliResult<()> {
    let c = &run.cfg;
    let (sources, target) = zero_shot_datasets(c)?;
    c.model.validate()?;
    let data = prepare_zero_shot(&sources, &target, &c.model, c.split)?;
    let dir = prepare_out_dir(run)?;
    let outcome = run_experiment(&c.model, &data)?;
    write_training_outputs(run, &dir, &outcome.model, &outcome.history, &data.test)
}

/// Loads the checkpoint and adopts its model configuration; window strides
/// stay as configured since they only affect which windows are scored.
fn load_model(run: &mut Run) -> CliResult<TempoModel> {
    let model = checkpoint::load(required(&run.cfg.ckpt, "ckpt")?)?;
    let windows = run.cfg.model.windows.clone();
    run.cfg.model = model.config.clone();
    run.cfg.model.windows = windows;
    run.refresh_hash();
    Ok(model)
}

fn test_samples(run: &Run) -> CliResult<Vec<Sample>> {
    let c = &run.cfg;
    let (path, period) = match (&c.data, &c.target) {
        (Some(d), _) => (d.as_path(), c.data_period),
        (None, Some(t)) => (t.as_path(), c.target_period),
        (None, None) => return Err(CliError::config("missing required path \"data\"")),
    };
    let ds = dataset(c, path, period)?;
    Ok(prepare_single(&ds, &c.model, c.split)?.test)
}

pub fn eval(mut run: Run) -> CliResult<()> {
    let model = load_model(&mut run)?;
    let test = test_samples(&run)?;
    let dir = prepare_out_dir(&run)?;
    let bundles = predict(&model, &test)?;
    let metrics = score(&run.cfg, &bundles, &test);
    write_json(&dir.join("metrics.json"), &record(&run, variant_label(&run.cfg), &metrics))?;
    write_predictions(&dir.join("predictions.csv"), &bundles, &test)?;
    forecast_plot(&dir, &bundles, &test)
}

pub fn forecast(mut run: Run) -> CliResult<()> {
    let model = load_model(&mut run)?;
    let c = &run.cfg;
    let ds = dataset(c, required(&c.data, "data")?, c.data_period)?;
    let dir = prepare_out_dir(&run)?;
    let l = model.config.lookback;
    if ds.frame.len() < l {
        return Err(CliError::validation(format!("{} has {} points, lookback is {l}", ds.id, ds.frame.len())));
    }
    let mut w = csv::Writer::from_path(dir.join("forecast.csv"))?;
    w.write_record(["channel", "h", "y_hat", "y_T", "y_S", "y_R"])?;
    for (i, ch) in ds.frame.channels().iter().enumerate() {
        let lookback = &ch.values[ch.values.len() - l..];
        let b = model.forward(&ForwardInput {
            lookback,
            period: ds.period,
            trend_k: ds.trend_k,
            global: None,
        })?;
        for (h, y) in b.y_hat.iter().enumerate() {
            let comp = |st: Stream| cell(b.component(st).map(|c| c[h]));
            w.write_record([
                ch.name.clone(),
                h.to_string(),
                y.to_string(),
                comp(Stream::Trend),
                comp(Stream::Season),
                comp(Stream::Residual),
            ])?;
        }
        if i == 0 {
            let mut ahead = vec![f64::NAN; l];
            ahead.extend_from_slice(&b.y_hat);
            let series = [Series::new("lookback", lookback.to_vec()), Series::new("y_hat", ahead)];
            emit_plot(&format!("forecast for {}", ch.name), &series, &dir.join("plots/forecast"))?;
        }
    }
    w.flush().map_err(|e| CliError::io(&dir, e))
}

pub fn ablate(run: &Run) -> CliResult<()> {
    let c = &run.cfg;
    let data: ExperimentData = match &c.data {
        Some(path) => {
            let ds = dataset(c, path, c.data_period)?;
            prepare_single(&ds, &c.model, c.split)?
        }
        None => {
            let (sources, target) = zero_shot_datasets(c)?;
            prepare_zero_shot(&sources, &target, &c.model, c.split)?
        }
    };
    c.model.validate()?;
    let dir = prepare_out_dir(run)?;
    let mut records = Vec::new();
    for variant in c.ablations.variants() {
        let outcome = run_experiment(&variant.apply(&c.model), &data)?;
        let bundles = predict(&outcome.model, &data.test)?;
        let m = score(c, &bundles, &data.test);
        log::info!("{variant}: mse {} mae {}", m.mse, m.mae);
        records.push(record(run, variant.label(), &m));
    }
    let mut w = csv::Writer::from_path(dir.join("ablation.csv"))?;
    w.write_record(["variant", "mse", "mae", "abs_smape"])?;
    for r in &records {
        w.write_record([r.variant.clone(), r.mse.to_string(), r.mae.to_string(), r.abs_smape.to_string()])?;
    }
    w.flush().map_err(|e| CliError::io(&dir, e))?;
    write_json(&dir.join("metrics.json"), &records)
}

fn coalition_values(table: &CoalitionTable, run: &Run) -> Value {
    let values = table.values(run.cfg.shap_metric);
    let map: serde_json::Map<String, Value> = Coalition::all().map(|c| (c.to_string(), json!(-values[c.0 as usize]))).collect();
    Value::Object(map)
}

/// Restricts flattened per-step series to horizon steps in `[start, end)`.
fn slice_steps(x: &[f64], horizon: usize, start: usize, end: usize) -> Vec<f64> {
    x.iter().enumerate().filter(|(i, _)| (start..end).contains(&(i % horizon))).map(|(_, v)| *v).collect()
}

pub fn shap(mut run: Run) -> CliResult<()> {
    let model = load_model(&mut run)?;
    if !model.config.decompose {
        return Err(CliError::validation("shap needs a model trained with decompose=true"));
    }
    let test = test_samples(&run)?;
    let dir = prepare_out_dir(&run)?;
    let metric = run.cfg.shap_metric;
    let h = model.config.horizon;
    let bundles = predict(&model, &test)?;
    let comps = ComponentSeries::from_bundles(&bundles)?;

    let (overall, buckets, gam) = if run.cfg.via_gam {
        let (fit, comps, target) = gam_fit_model(&model, &test, run.cfg.gam_interactions)?;
        let overall = gam_coalition_table(&fit, &comps, &target)?;
        let mut buckets = Vec::new();
        for b in 0..run.cfg.shap_buckets.clamp(1, h) {
            let n = run.cfg.shap_buckets.clamp(1, h);
            let (start, end) = (b * h / n, (b + 1) * h / n);
            let part = ComponentSeries {
                trend: slice_steps(&comps.trend, h, start, end),
                season: slice_steps(&comps.season, h, start, end),
                residual: slice_steps(&comps.residual, h, start, end),
            };
            buckets.push(((start, end), gam_coalition_table(&fit, &part, &slice_steps(&target, h, start, end))?));
        }
        (overall, buckets, Some(fit))
    } else {
        (
            coalition_table(&model, &test)?,
            coalition_tables_by_horizon(&model, &test, run.cfg.shap_buckets)?,
            None,
        )
    };

    let mut w = csv::Writer::from_path(dir.join("coalitions.csv"))?;
    w.write_record(["coalition", "trend", "season", "residual", "mse", "mae", "abs_smape"])?;
    for c in Coalition::all() {
        let m = overall.get(c);
        let bit = |s: Stream| u8::from(c.contains(s)).to_string();
        w.write_record([
            c.to_string(),
            bit(Stream::Trend),
            bit(Stream::Season),
            bit(Stream::Residual),
            m.mse.to_string(),
            m.mae.to_string(),
            m.abs_smape.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(&dir, e))?;

    let mut w = csv::Writer::from_path(dir.join("coalitions_by_horizon.csv"))?;
    let mut header = vec!["h_start".to_string(), "h_end".to_string()];
    header.extend(Coalition::all().map(|c| c.to_string()));
    w.write_record(&header)?;
    for ((start, end), table) in &buckets {
        let mut row = vec![start.to_string(), end.to_string()];
        row.extend(Coalition::all().map(|c| metric.of(table.get(c)).to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| CliError::io(&dir, e))?;

    let bucket_reports: Vec<Value> = buckets
        .iter()
        .map(|((start, end), table)| {
            json!({
                "h_start": start,
                "h_end": end,
                "report": shapley(table, metric),
                "errors": coalition_values(table, &run),
            })
        })
        .collect();
    let report = json!({
        "config_hash": run.hash,
        "seed": run.cfg.model.seed,
        "metric": metric,
        "via_gam": run.cfg.via_gam,
        "overall": shapley(&overall, metric),
        "errors": coalition_values(&overall, &run),
        "buckets": bucket_reports,
        "sobol": sobol_first_order(&comps).ok(),
        "gam": gam,
    });
    write_json(&dir.join("shapley.json"), &report)
}

/// Expects `ckpt` and `out` to point at the run's checkpoint and a fresh
/// output directory.
pub fn prompt_stats(mut run: Run) -> CliResult<()> {
    let model = load_model(&mut run)?;
    let p = &model.config.prompt;
    if p.mode != PromptMode::Pool {
        return Err(CliError::validation(format!(
            "prompt-stats needs prompt_mode=pool, the run used {}",
            p.mode.as_str()
        )));
    }
    let test = test_samples(&run)?;
    let dir = prepare_out_dir(&run)?;
    let bundles = predict(&model, &test)?;
    let log: Vec<_> = bundles.iter().flat_map(|b| b.selected_prompts.iter().cloned()).collect();
    let mut w = csv::Writer::from_path(dir.join("prompt_stats.csv"))?;
    w.write_record(["index", "count", "component"])?;
    for &stream in model.config.streams() {
        for (i, n) in selection_histogram_for(&log, p.pool_size, stream).iter().enumerate() {
            w.write_record([i.to_string(), n.to_string(), stream.to_string()])?;
        }
    }
    w.flush().map_err(|e| CliError::io(&dir, e))
}

/// Prints the suite's JSON report; fails with a validation error if any
/// check failed.
pub fn theory_check(run: &Run) -> CliResult<()> {
    let results = run_suite(run.cfg.suite, run.cfg.model.seed);
    let passed = results.iter().all(|r| r.passed);
    let report = json!({
        "suite": run.cfg.suite,
        "seed": run.cfg.model.seed,
        "config_hash": run.hash,
        "passed": passed,
        "checks": results,
    });
    let text = json_text(&report)?;
    print!("{text}");
    if run.cfg.out.is_some() {
        let dir = prepare_out_dir(run)?;
        write_text(&dir.join("theory.json"), &text)?;
    }
    if passed {
        Ok(())
    } else {
        let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        Err(CliError::validation(format!("theory checks failed: {}", failed.join(","))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_keys_are_sorted() {
        #[derive(Serialize)]
        struct Z {
            zeta: u8,
            alpha: u8,
            mid: Vec<u8>,
        }
        let text = json_text(&Z { zeta: 1, alpha: 2, mid: vec![] }).unwrap();
        let a = text.find("alpha").unwrap();
        let m = text.find("mid").unwrap();
        let z = text.find("zeta").unwrap();
        assert!(a < m && m < z);
    }

    #[test]
    fn step_slicing() {
        let x = [0.0, 1.0, 2.0, 10.0, 11.0, 12.0];
        assert_eq!(slice_steps(&x, 3, 1, 3), vec![1.0, 2.0, 11.0, 12.0]);
    }
}
