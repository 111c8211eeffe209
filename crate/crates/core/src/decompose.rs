//! Additive trend/season/residual decomposition.
//!
//! The trend is a centered moving average of width `m = 2k + 1` over the
//! series with `k` replicated values padded at each end. The season is the
//! per-phase mean of the detrended series, taken over the unpadded interior
//! `[k, len - k)` and centered to zero mean, then tiled. The residual is the
//! remainder, so `trend + season + residual` reproduces the input.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::stats::{mean, population_variance};

/// Trend, season and residual arrays of one series or window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentTriple {
    pub trend: Vec<f64>,
    pub season: Vec<f64>,
    pub residual: Vec<f64>,
    pub period: usize,
    /// Trend half-window: the moving average spans `2k + 1` points.
    pub k: usize,
}

impl ComponentTriple {
    pub fn len(&self) -> usize {
        self.trend.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trend.is_empty()
    }

    /// Components in trend, season, residual order.
    pub fn components(&self) -> [&[f64]; 3] {
        [&self.trend, &self.season, &self.residual]
    }

    /// Elementwise sum `trend + season + residual`.
    pub fn reconstruct(&self) -> Vec<f64> {
        (0..self.len())
            .map(|t| self.trend[t] + self.season[t] + self.residual[t])
            .collect()
    }

    /// Sub-range `[start, end)` of every component.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.len() {
            return Err(invalid!("slice {start}..{end} out of range for length {}", self.len()));
        }
        Ok(ComponentTriple {
            trend: self.trend[start..end].to_vec(),
            season: self.season[start..end].to_vec(),
            residual: self.residual[start..end].to_vec(),
            period: self.period,
            k: self.k,
        })
    }
}

/// The default trend half-window for a period: `period / 2`.
pub fn default_trend_k(period: usize) -> usize {
    period / 2
}

/// Centered moving average of width `2k + 1` with `k` replicated values
/// padded at each end; output has the input's length.
pub fn moving_average(x: &[f64], k: usize) -> Vec<f64> {
    let n = x.len();
    let at = |i: isize| x[i.clamp(0, n as isize - 1) as usize];
    let m = (2 * k + 1) as f64;
    (0..n as isize)
        .map(|t| (-(k as isize)..=k as isize).map(|j| at(t + j)).sum::<f64>() / m)
        .collect()
}

fn check_args(len: usize, period: usize, k: usize) -> Result<()> {
    if period < 2 {
        return Err(invalid!("period must be ≥ 2, got {period}"));
    }
    if len < 2 * period {
        return Err(invalid!("length {len} is shorter than two periods ({period})"));
    }
    if 2 * k + 1 > len {
        return Err(invalid!("trend window 2k+1 = {} exceeds length {len}", 2 * k + 1));
    }
    if len - 2 * k < period {
        return Err(invalid!(
            "trend half-window k = {k} leaves an interior of {} points, fewer than one period ({period})",
            len - 2 * k
        ));
    }
    Ok(())
}

/// Decomposes a whole series.
pub fn global_decompose(series: &[f64], period: usize, k: usize) -> Result<ComponentTriple> {
    check_args(series.len(), period, k)?;
    let n = series.len();
    let trend = moving_average(series, k);

    let mut sums = vec![0.0; period];
    let mut counts = vec![0usize; period];
    for t in k..n - k {
        sums[t % period] += series[t] - trend[t];
        counts[t % period] += 1;
    }
    let phase_means: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let center = mean(&phase_means);
    let profile: Vec<f64> = phase_means.iter().map(|m| m - center).collect();

    let season: Vec<f64> = (0..n).map(|t| profile[t % period]).collect();
    let residual = (0..n).map(|t| series[t] - trend[t] - season[t]).collect();
    Ok(ComponentTriple {
        trend,
        season,
        residual,
        period,
        k,
    })
}

/// Decomposes a single lookback window on its own. Phases are counted from
/// the window's first point.
pub fn local_decompose(window: &[f64], period: usize, k: usize) -> Result<ComponentTriple> {
    global_decompose(window, period, k)
}

/// Per-timestep affine correction of the local trend and season.
///
/// The residual is always recomputed as the remainder, so it carries no
/// parameters of its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalDecompParams {
    pub scale_trend: Vec<f64>,
    pub bias_trend: Vec<f64>,
    pub scale_season: Vec<f64>,
    pub bias_season: Vec<f64>,
}

impl LocalDecompParams {
    /// Identity correction for windows of length `len`.
    pub fn identity(len: usize) -> Self {
        LocalDecompParams {
            scale_trend: vec![1.0; len],
            bias_trend: vec![0.0; len],
            scale_season: vec![1.0; len],
            bias_season: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.scale_trend.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scale_trend.is_empty()
    }
}

/// Applies `c'_t = scale_t · c_t + bias_t` to trend and season and redefines
/// the residual as `window − trend' − season'`.
pub fn corrected_local(
    window: &[f64],
    raw: &ComponentTriple,
    params: &LocalDecompParams,
) -> Result<ComponentTriple> {
    let n = window.len();
    let lens = [
        raw.len(),
        params.scale_trend.len(),
        params.bias_trend.len(),
        params.scale_season.len(),
        params.bias_season.len(),
    ];
    if lens.iter().any(|&l| l != n) {
        return Err(shape_err!("window length {n} does not match components/params {lens:?}"));
    }
    let trend: Vec<f64> = (0..n)
        .map(|t| params.scale_trend[t] * raw.trend[t] + params.bias_trend[t])
        .collect();
    let season: Vec<f64> = (0..n)
        .map(|t| params.scale_season[t] * raw.season[t] + params.bias_season[t])
        .collect();
    let residual = (0..n).map(|t| window[t] - trend[t] - season[t]).collect();
    Ok(ComponentTriple {
        trend,
        season,
        residual,
        period: raw.period,
        k: raw.k,
    })
}

/// Mean over trend, season and residual of the elementwise MSE between two
/// (already normalized) decompositions.
pub fn decomposition_loss(local: &ComponentTriple, global: &ComponentTriple) -> Result<f64> {
    if local.len() != global.len() {
        return Err(shape_err!(
            "decomposition lengths differ: {} vs {}",
            local.len(),
            global.len()
        ));
    }
    let total: f64 = local
        .components()
        .iter()
        .zip(global.components())
        .map(|(a, b)| crate::metrics::mse(a, b))
        .sum();
    Ok(total / 3.0)
}

/// `max(0, 1 − Var(R) / (Var(S) + Var(R)))`, or 0 when both variances vanish.
pub fn seasonality_strength(triple: &ComponentTriple) -> f64 {
    let var_s = population_variance(&triple.season);
    let var_r = population_variance(&triple.residual);
    let denom = var_s + var_r;
    if denom <= 0.0 {
        return 0.0;
    }
    (1.0 - var_r / denom).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn constant_series() {
        let x = vec![3.5; 40];
        let d = global_decompose(&x, 8, 4).unwrap();
        assert!(d.trend.iter().all(|&v| v == 3.5));
        assert!(d.season.iter().all(|&v| v == 0.0));
        assert!(d.residual.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pure_sine_interior_residual() {
        let p = 16;
        let x: Vec<f64> = (0..160).map(|t| (2.0 * PI * t as f64 / p as f64).sin()).collect();
        let d = global_decompose(&x, p, p).unwrap();
        let interior = p..x.len() - p;
        let worst = interior.map(|t| d.residual[t].abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-6, "interior residual {worst}");
    }

    #[test]
    fn argument_errors() {
        let x = vec![0.0; 20];
        assert!(global_decompose(&x, 1, 1).is_err());
        assert!(global_decompose(&x, 11, 1).is_err());
        assert!(global_decompose(&x, 4, 10).is_err());
        assert!(global_decompose(&x, 8, 7).is_err());
    }

    #[test]
    fn local_matches_global_interior() {
        let p = 12;
        let x: Vec<f64> = (0..400)
            .map(|t| 0.05 * t as f64 + 2.0 * (2.0 * PI * t as f64 / p as f64).sin())
            .collect();
        let k = default_trend_k(p);
        let global = global_decompose(&x, p, k).unwrap();
        let (origin, len) = (137, 96);
        let local = local_decompose(&x[origin..origin + len], p, k).unwrap();
        let g = global.slice(origin, origin + len).unwrap();
        for t in k..len - k {
            for (a, b) in local.components().iter().zip(g.components()) {
                assert!((a[t] - b[t]).abs() <= 1e-6, "t={t}: {} vs {}", a[t], b[t]);
            }
        }
    }

    #[test]
    fn affine_window_trend_is_exact_in_interior() {
        let x: Vec<f64> = (0..48).map(|t| 0.75 * t as f64 - 2.0).collect();
        let d = local_decompose(&x, 6, 3).unwrap();
        for t in 3..45 {
            assert!((d.trend[t] - x[t]).abs() <= 1e-12);
        }
        let c = local_decompose(&[2.0; 24], 6, 3).unwrap();
        assert!(c.trend.iter().all(|&v| v == 2.0) && c.season.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn correction_identity_and_scaling() {
        let x: Vec<f64> = (0..24).map(|t| (t as f64 * 0.7).sin() + 0.1 * t as f64).collect();
        let raw = local_decompose(&x, 6, 2).unwrap();
        let same = corrected_local(&x, &raw, &LocalDecompParams::identity(24)).unwrap();
        assert_eq!(same.trend, raw.trend);
        assert_eq!(same.season, raw.season);
        assert!(max_abs_diff(&same.residual, &raw.residual) <= 1e-15);

        let c = [5.0; 24];
        let flat = local_decompose(&c, 6, 2).unwrap();
        let mut params = LocalDecompParams::identity(24);
        params.scale_trend = vec![2.0; 24];
        let doubled = corrected_local(&c, &flat, &params).unwrap();
        assert!(doubled.trend.iter().all(|&v| v == 10.0));
        assert!(doubled.residual.iter().all(|&v| v == -5.0));

        assert!(corrected_local(&c[..10], &flat, &params).is_err());
    }

    #[test]
    fn loss_examples() {
        let x: Vec<f64> = (0..24).map(|t| (t as f64).cos()).collect();
        let a = local_decompose(&x, 6, 2).unwrap();
        assert_eq!(decomposition_loss(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.trend.iter_mut().for_each(|v| *v += 1.0);
        let l = decomposition_loss(&a, &b).unwrap();
        assert!((l - 1.0 / 3.0).abs() <= 1e-12);
        assert_eq!(l, decomposition_loss(&b, &a).unwrap());
        assert!(decomposition_loss(&a, &a.slice(0, 5).unwrap()).is_err());
    }

    #[test]
    fn strength_examples() {
        let mk = |season: Vec<f64>, residual: Vec<f64>| ComponentTriple {
            trend: vec![0.0; season.len()],
            season,
            residual,
            period: 2,
            k: 0,
        };
        assert_eq!(seasonality_strength(&mk(vec![1.0, -1.0], vec![0.0, 0.0])), 1.0);
        assert_eq!(seasonality_strength(&mk(vec![0.0, 0.0], vec![1.0, -1.0])), 0.0);
        let half = seasonality_strength(&mk(vec![1.0, -1.0, 1.0, -1.0], vec![1.0, 1.0, -1.0, -1.0]));
        assert!((half - 0.5).abs() <= 1e-15);
        assert_eq!(seasonality_strength(&mk(vec![0.0; 4], vec![0.0; 4])), 0.0);
    }

    #[test]
    fn strength_of_synthetic_series() {
        let noisy = synth_generate(&SynthSpec {
            length: 2400,
            period: 24,
            trend_slope: 0.0,
            season_amp: 1.0,
            noise_std: 0.05,
            seed: 3,
        })
        .unwrap();
        let d = global_decompose(noisy.channel(0).unwrap(), 24, 12).unwrap();
        assert!(seasonality_strength(&d) >= 0.95);
        for seed in 0..5 {
            let noise = synth_generate(&SynthSpec {
                length: 2400,
                period: 24,
                trend_slope: 0.0,
                season_amp: 0.0,
                noise_std: 1.0,
                seed,
            })
            .unwrap();
            let d = global_decompose(noise.channel(0).unwrap(), 24, 12).unwrap();
            assert!(seasonality_strength(&d) <= 0.05);
        }
    }

    proptest! {
        #[test]
        fn additivity_and_centering(
            x in prop::collection::vec(-1e3f64..1e3, 24..120),
            period in 2usize..12,
            k in 0usize..6,
        ) {
            prop_assume!(x.len() >= 2 * period && x.len() >= 2 * k + period);
            let d = global_decompose(&x, period, k).unwrap();
            let scale = 1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(max_abs_diff(&d.reconstruct(), &x) <= 1e-10 * scale);
            for start in 0..period {
                let chunk = &d.season[start..start + period];
                prop_assert!(mean(chunk).abs() <= 1e-9);
            }
        }

        #[test]
        fn shift_equivariance(
            x in prop::collection::vec(-50f64..50.0, 30..80),
            c in -100f64..100.0,
        ) {
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let a = global_decompose(&x, 5, 2).unwrap();
            let b = global_decompose(&shifted, 5, 2).unwrap();
            let trend_shift: Vec<f64> = a.trend.iter().map(|v| v + c).collect();
            prop_assert!(max_abs_diff(&b.trend, &trend_shift) <= 1e-10);
            prop_assert!(max_abs_diff(&b.season, &a.season) <= 1e-10);
            prop_assert!(max_abs_diff(&b.residual, &a.residual) <= 1e-10);
        }
    }
}
