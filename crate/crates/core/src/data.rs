//! Series ingestion, synthetic generation, chronological splitting and
//! lookback/horizon windowing.
//!
//! Every multivariate series is handled channel-independently: a
//! [`SeriesFrame`] with several channels is split into univariate frames by
//! [`channelize`] and each channel is windowed on its own.

use std::f64::consts::PI;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, TempoError};

/// One named real-valued sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub name: String,
    pub values: Vec<f64>,
}

/// A multivariate time series. All channels share one length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesFrame {
    channels: Vec<Channel>,
    timestamps: Option<Vec<i64>>,
    pub sampling_note: String,
}

impl SeriesFrame {
    /// Builds a frame, checking equal lengths, length ≥ 1, finite values and
    /// strictly increasing timestamps.
    pub fn new(channels: Vec<Channel>, timestamps: Option<Vec<i64>>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| invalid!("a frame needs at least one channel"))?;
        let len = first.values.len();
        if len == 0 {
            return Err(TempoError::NoRows);
        }
        for ch in &channels {
            if ch.values.len() != len {
                return Err(invalid!(
                    "channel {:?} has length {}, expected {len}",
                    ch.name,
                    ch.values.len()
                ));
            }
            if let Some(t) = ch.values.iter().position(|v| !v.is_finite()) {
                return Err(invalid!("channel {:?} has a non-finite value at t={t}", ch.name));
            }
        }
        if let Some(ts) = &timestamps {
            if ts.len() != len {
                return Err(invalid!("timestamp column has length {}, expected {len}", ts.len()));
            }
            if let Some(i) = ts.windows(2).position(|w| w[1] <= w[0]) {
                return Err(invalid!("timestamps are not increasing at row {}", i + 2));
            }
        }
        Ok(SeriesFrame {
            channels,
            timestamps,
            sampling_note: String::new(),
        })
    }

    pub fn univariate(name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        Self::new(
            vec![Channel {
                name: name.into(),
                values,
            }],
            None,
        )
    }

    pub fn len(&self) -> usize {
        self.channels[0].values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn channel(&self, idx: usize) -> Option<&[f64]> {
        self.channels.get(idx).map(|c| c.values.as_slice())
    }

    pub fn timestamps(&self) -> Option<&[i64]> {
        self.timestamps.as_deref()
    }

    /// Contiguous sub-range `[start, end)` of every channel.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(invalid!("slice {start}..{end} out of range for length {}", self.len()));
        }
        let channels = self
            .channels
            .iter()
            .map(|c| Channel {
                name: c.name.clone(),
                values: c.values[start..end].to_vec(),
            })
            .collect();
        let mut out = Self::new(channels, self.timestamps.as_ref().map(|t| t[start..end].to_vec()))?;
        out.sampling_note = self.sampling_note.clone();
        Ok(out)
    }

    /// Reassembles frames produced by [`channelize`] (same length, same
    /// timestamps) into one multivariate frame.
    pub fn from_channels(frames: Vec<SeriesFrame>) -> Result<Self> {
        let timestamps = frames.first().and_then(|f| f.timestamps.clone());
        let note = frames.first().map(|f| f.sampling_note.clone()).unwrap_or_default();
        let channels = frames.into_iter().flat_map(|f| f.channels).collect();
        let mut out = Self::new(channels, timestamps)?;
        out.sampling_note = note;
        Ok(out)
    }
}

/// Options for [`load_csv`].
#[derive(Debug, Clone, Copy, Default)]
pub struct CsvOptions {
    /// First column holds timestamps (ISO-8601 or integer index).
    pub has_timestamp: bool,
    /// Fill empty / NaN cells by linear interpolation instead of failing.
    pub interp_linear: bool,
}

/// Reads a UTF-8 comma-separated file with a header row.
///
/// Rows are numbered from 1 starting at the first data row in error messages.
pub fn load_csv(path: impl AsRef<Path>, opts: CsvOptions) -> Result<SeriesFrame> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| TempoError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let value_cols = if opts.has_timestamp { 1 } else { 0 };
    if headers.len() <= value_cols {
        return Err(invalid!("{} has no value columns", path.display()));
    }

    let mut timestamps = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); headers.len() - value_cols];
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        if record.len() != headers.len() {
            return Err(TempoError::Ragged {
                row,
                expected: headers.len(),
                found: record.len(),
            });
        }
        if opts.has_timestamp {
            timestamps.push(parse_timestamp(&record[0]).ok_or_else(|| TempoError::Parse {
                row,
                column: headers[0].clone(),
                message: format!("cannot parse timestamp {:?}", &record[0]),
            })?);
        }
        for (j, col) in columns.iter_mut().enumerate() {
            let cell = &record[j + value_cols];
            let parse_err = |message: String| TempoError::Parse {
                row,
                column: headers[j + value_cols].clone(),
                message,
            };
            let value = if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                if !opts.interp_linear {
                    return Err(parse_err("missing value".into()));
                }
                f64::NAN
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| parse_err(format!("not a number: {cell:?}")))?;
                if !v.is_finite() {
                    return Err(parse_err(format!("non-finite value {cell:?}")));
                }
                v
            };
            col.push(value);
        }
    }
    if columns[0].is_empty() {
        return Err(TempoError::NoRows);
    }

    let mut channels = Vec::with_capacity(columns.len());
    for (name, mut values) in headers[value_cols..].iter().zip(columns) {
        if opts.interp_linear {
            interpolate_linear(&mut values)
                .map_err(|_| invalid!("column {name:?} has no observed values"))?;
        }
        channels.push(Channel {
            name: name.clone(),
            values,
        });
    }
    let mut frame = SeriesFrame::new(channels, opts.has_timestamp.then_some(timestamps))?;
    frame.sampling_note = format!("loaded from {}", path.display());
    Ok(frame)
}

fn parse_timestamp(cell: &str) -> Option<i64> {
    if let Ok(i) = cell.parse::<i64>() {
        return Some(i);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(cell) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(cell, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    NaiveDate::parse_from_str(cell, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc().timestamp())
}

/// Fills NaN gaps by linear interpolation; leading/trailing gaps take the
/// nearest observed value.
pub fn interpolate_linear(values: &mut [f64]) -> Result<()> {
    let observed: Vec<usize> = (0..values.len()).filter(|&i| !values[i].is_nan()).collect();
    let (&first, &last) = match (observed.first(), observed.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(invalid!("no observed values to interpolate from")),
    };
    let (head, tail) = (values[first], values[last]);
    values[..first].iter_mut().for_each(|v| *v = head);
    values[last + 1..].iter_mut().for_each(|v| *v = tail);
    for pair in observed.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (va, vb) = (values[a], values[b]);
        for t in a + 1..b {
            let w = (t - a) as f64 / (b - a) as f64;
            values[t] = va + w * (vb - va);
        }
    }
    Ok(())
}

/// Train/validation/test ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl SplitSpec {
    pub const STANDARD: SplitSpec = SplitSpec {
        train_frac: 0.7,
        val_frac: 0.1,
        test_frac: 0.2,
    };

    pub fn new(train_frac: f64, val_frac: f64, test_frac: f64) -> Result<Self> {
        let spec = SplitSpec {
            train_frac,
            val_frac,
            test_frac,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for f in [self.train_frac, self.val_frac, self.test_frac] {
            if !(0.0..=1.0).contains(&f) {
                return Err(invalid!("split fraction {f} outside [0, 1]"));
            }
        }
        // 0.7 + 0.1 + 0.2 is not exactly 1 in binary floating point.
        let sum = self.train_frac + self.val_frac + self.test_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(invalid!("split fractions sum to {sum}, expected 1"));
        }
        Ok(())
    }

    /// `(train, val, test)` lengths for a series of `len` points. Val and
    /// test get `⌊frac·len⌋`; the remainder goes to train.
    pub fn lengths(&self, len: usize) -> (usize, usize, usize) {
        let floor = |f: f64| (f * len as f64 + 1e-9).floor() as usize;
        let val = floor(self.val_frac);
        let test = floor(self.test_frac);
        (len - val - test, val, test)
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self::STANDARD
    }
}

/// Chronological, contiguous, non-overlapping train/val/test split.
pub fn split_chrono(
    frame: &SeriesFrame,
    spec: SplitSpec,
) -> Result<(SeriesFrame, SeriesFrame, SeriesFrame)> {
    spec.validate()?;
    let len = frame.len();
    if len < 10 {
        return Err(TempoError::TooShort(format!("cannot split {len} points (need ≥ 10)")));
    }
    let (train, val, test) = spec.lengths(len);
    for (name, n) in [("train", train), ("val", val), ("test", test)] {
        if n == 0 {
            return Err(TempoError::TooShort(format!(
                "{name} split is empty for length {len} with {spec:?}"
            )));
        }
    }
    Ok((
        frame.slice(0, train)?,
        frame.slice(train, train + val)?,
        frame.slice(train + val, len)?,
    ))
}

/// One lookback/horizon pair cut from a single channel.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub lookback: Vec<f64>,
    pub horizon: Vec<f64>,
    pub channel_id: usize,
    pub origin_t: usize,
}

/// Number of windows [`make_windows`] yields, or `None` if the series is too
/// short.
pub fn window_count(len: usize, lookback: usize, horizon: usize, stride: usize) -> Option<usize> {
    let span = lookback + horizon;
    (len >= span && stride > 0).then(|| (len - span) / stride + 1)
}

/// Slides a `lookback + horizon` window along `channel` with the given stride.
pub fn make_windows(
    channel: &[f64],
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowPair>> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(invalid!(
            "lookback, horizon and stride must be ≥ 1 (got {lookback}, {horizon}, {stride})"
        ));
    }
    let count = window_count(channel.len(), lookback, horizon, stride).ok_or_else(|| {
        TempoError::TooShort(format!(
            "series of length {} yields no windows for lookback {lookback} + horizon {horizon}",
            channel.len()
        ))
    })?;
    Ok((0..count)
        .map(|i| {
            let origin = i * stride;
            WindowPair {
                lookback: channel[origin..origin + lookback].to_vec(),
                horizon: channel[origin + lookback..origin + lookback + horizon].to_vec(),
                channel_id: 0,
                origin_t: origin,
            }
        })
        .collect())
}

/// Splits a multivariate frame into univariate frames, order preserved.
pub fn channelize(frame: &SeriesFrame) -> Vec<SeriesFrame> {
    frame
        .channels
        .iter()
        .map(|c| SeriesFrame {
            channels: vec![c.clone()],
            timestamps: frame.timestamps.clone(),
            sampling_note: frame.sampling_note.clone(),
        })
        .collect()
}

/// Parameters of the synthetic line + sine + Gaussian noise generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub length: usize,
    pub period: usize,
    pub trend_slope: f64,
    pub season_amp: f64,
    pub noise_std: f64,
    pub seed: u64,
}

/// `x_t = slope·t + amp·sin(2πt/period) + ε_t`, `ε_t ~ N(0, noise_std²)`.
pub fn synth_generate(spec: &SynthSpec) -> Result<SeriesFrame> {
    if spec.period < 2 {
        return Err(invalid!("period must be ≥ 2, got {}", spec.period));
    }
    if spec.length < 2 * spec.period {
        return Err(invalid!(
            "length {} must be at least twice the period {}",
            spec.length,
            spec.period
        ));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(invalid!("noise_std must be finite and ≥ 0, got {}", spec.noise_std));
    }
    if !spec.trend_slope.is_finite() || !spec.season_amp.is_finite() {
        return Err(invalid!("slope and amplitude must be finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| invalid!("{e}"))?;
    let p = spec.period as f64;
    let values = (0..spec.length)
        .map(|t| {
            let t = t as f64;
            let mut x = spec.trend_slope * t + spec.season_amp * (2.0 * PI * t / p).sin();
            if spec.noise_std > 0.0 {
                x += noise.sample(&mut rng);
            }
            x
        })
        .collect();
    let mut frame = SeriesFrame::univariate("x", values)?;
    frame.sampling_note = format!("synthetic {spec:?}");
    Ok(frame)
}
