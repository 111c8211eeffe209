//! Point-forecast error metrics.

use serde::{Deserialize, Serialize};

/// Mean squared error. Slices must have equal length.
pub fn mse(forecast: &[f64], actual: &[f64]) -> f64 {
    debug_assert_eq!(forecast.len(), actual.len());
    if forecast.is_empty() {
        return 0.0;
    }
    forecast
        .iter()
        .zip(actual)
        .map(|(f, a)| (f - a) * (f - a))
        .sum::<f64>()
        / forecast.len() as f64
}

/// Mean absolute error.
pub fn mae(forecast: &[f64], actual: &[f64]) -> f64 {
    debug_assert_eq!(forecast.len(), actual.len());
    if forecast.is_empty() {
        return 0.0;
    }
    forecast.iter().zip(actual).map(|(f, a)| (f - a).abs()).sum::<f64>() / forecast.len() as f64
}

/// Symmetric MAPE with absolute values in the denominator, in percent:
/// `(200/n) Σ |F − A| / (|F| + |A|)`. Terms with `F = A = 0` count as 0, so
/// the result lies in `[0, 200]`.
pub fn abs_smape(forecast: &[f64], actual: &[f64]) -> f64 {
    debug_assert_eq!(forecast.len(), actual.len());
    if forecast.is_empty() {
        return 0.0;
    }
    let total: f64 = forecast
        .iter()
        .zip(actual)
        .map(|(f, a)| {
            let denom = f.abs() + a.abs();
            if denom == 0.0 {
                0.0
            } else {
                (f - a).abs() / denom
            }
        })
        .sum();
    200.0 * total / forecast.len() as f64
}

/// MSE, MAE and AbsSMAPE over a set of horizon points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub abs_smape: f64,
}

impl Metrics {
    pub fn compute(forecast: &[f64], actual: &[f64]) -> Self {
        Metrics {
            mse: mse(forecast, actual),
            mae: mae(forecast, actual),
            abs_smape: abs_smape(forecast, actual),
        }
    }
}
