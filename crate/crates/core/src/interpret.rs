//! Component attribution. Exact three-player Shapley values come from a
//! table of all eight coalitions; Sobol indices and an additive surrogate
//! serve as cross-checks.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::metrics::Metrics;
use crate::model::experiment::Sample;
use crate::model::train::predict_masked;
use crate::model::{Coalition, ForecastBundle, TempoModel};
use crate::prompt::Stream;
use crate::stats::population_variance;

/// Error metric a coalition value is derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMetric {
    Mse,
    Mae,
}

impl ErrorMetric {
    pub fn of(self, m: &Metrics) -> f64 {
        match self {
            ErrorMetric::Mse => m.mse,
            ErrorMetric::Mae => m.mae,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorMetric::Mse => "mse",
            ErrorMetric::Mae => "mae",
        }
    }
}

impl std::str::FromStr for ErrorMetric {
    type Err = crate::TempoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(ErrorMetric::Mse),
            "mae" => Ok(ErrorMetric::Mae),
            _ => Err(invalid!("unknown error metric {s:?} (expected mse or mae)")),
        }
    }
}

/// Metrics of the model with each of the eight component subsets active,
/// indexed by [`Coalition`] bits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoalitionTable {
    pub entries: Vec<(Coalition, Metrics)>,
}

impl CoalitionTable {
    /// Errors unless every subset appears exactly once.
    pub fn new(mut entries: Vec<(Coalition, Metrics)>) -> Result<Self> {
        entries.sort_by_key(|(c, _)| *c);
        let complete = entries.len() == 8 && entries.iter().enumerate().all(|(i, (c, _))| c.0 as usize == i);
        if !complete {
            return Err(invalid!("coalition table must hold each of the 8 subsets exactly once"));
        }
        Ok(CoalitionTable { entries })
    }

    pub fn get(&self, c: Coalition) -> &Metrics {
        &self.entries[c.0 as usize].1
    }

    /// `v(S) = −error(S)`, indexed by coalition bits.
    pub fn values(&self, metric: ErrorMetric) -> [f64; 8] {
        std::array::from_fn(|i| -metric.of(&self.entries[i].1))
    }
}

/// Forecasts with only `coalition` active: excluded components have their
/// backbone input rows and head outputs zeroed.
pub fn coalition_eval(model: &TempoModel, samples: &[Sample], coalition: Coalition) -> Result<Metrics> {
    if !model.config.decompose {
        return Err(invalid!("coalitions need the decomposed three-stream model"));
    }
    crate::model::train::evaluate_masked(model, samples, coalition)
}

/// All eight coalition evaluations.
pub fn coalition_table(model: &TempoModel, samples: &[Sample]) -> Result<CoalitionTable> {
    let entries = Coalition::all()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|c| Ok((c, coalition_eval(model, samples, c)?)))
        .collect::<Result<Vec<_>>>()?;
    CoalitionTable::new(entries)
}

/// Per horizon bucket: the coalition table restricted to forecast steps in
/// `[start, end)`. Buckets partition `0..L_H` into `buckets` nearly equal
/// ranges.
pub fn coalition_tables_by_horizon(
    model: &TempoModel,
    samples: &[Sample],
    buckets: usize,
) -> Result<Vec<((usize, usize), CoalitionTable)>> {
    if !model.config.decompose {
        return Err(invalid!("coalitions need the decomposed three-stream model"));
    }
    let h = model.config.horizon;
    if buckets == 0 || buckets > h {
        return Err(invalid!("bucket count must be in 1..={h}, got {buckets}"));
    }
    let predictions: Vec<Vec<ForecastBundle>> = Coalition::all()
        .map(|c| predict_masked(model, samples, c))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(buckets);
    for b in 0..buckets {
        let (start, end) = (b * h / buckets, (b + 1) * h / buckets);
        let entries = Coalition::all()
            .zip(&predictions)
            .map(|(c, bundles)| {
                let forecast: Vec<f64> = bundles.iter().flat_map(|x| x.y_hat[start..end].iter().copied()).collect();
                let actual: Vec<f64> = samples.iter().flat_map(|s| s.target[start..end].iter().copied()).collect();
                (c, Metrics::compute(&forecast, &actual))
            })
            .collect();
        out.push(((start, end), CoalitionTable::new(entries)?));
    }
    Ok(out)
}

/// Exact Shapley values over {trend, season, residual} for a game given by
/// its value on every coalition (indexed by bits).
pub fn shapley_values(v: &[f64; 8]) -> [f64; 3] {
    // |S|!(2−|S|)!/3! for |S| = 0, 1, 2.
    const WEIGHT: [f64; 3] = [1.0 / 3.0, 1.0 / 6.0, 1.0 / 3.0];
    std::array::from_fn(|i| {
        let bit = 1u8 << i;
        (0u8..8)
            .filter(|s| s & bit == 0)
            .map(|s| WEIGHT[s.count_ones() as usize] * (v[(s | bit) as usize] - v[s as usize]))
            .sum()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyReport {
    pub phi_trend: f64,
    pub phi_season: f64,
    pub phi_residual: f64,
    pub value_full: f64,
    pub value_empty: f64,
    pub metric: ErrorMetric,
}

impl ShapleyReport {
    pub fn phi(&self) -> [f64; 3] {
        [self.phi_trend, self.phi_season, self.phi_residual]
    }

    /// `|Σφ − (v(full) − v(∅))|`.
    pub fn efficiency_gap(&self) -> f64 {
        (self.phi().iter().sum::<f64>() - (self.value_full - self.value_empty)).abs()
    }
}

/// Shapley values with `v(S) = −error(S)`: a positive value means the
/// component lowers the error.
pub fn shapley(table: &CoalitionTable, metric: ErrorMetric) -> ShapleyReport {
    let v = table.values(metric);
    let [t, s, r] = shapley_values(&v);
    ShapleyReport {
        phi_trend: t,
        phi_season: s,
        phi_residual: r,
        value_full: v[7],
        value_empty: v[0],
        metric,
    }
}

/// Normalized-space component forecasts flattened over windows and horizon
/// steps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComponentSeries {
    pub trend: Vec<f64>,
    pub season: Vec<f64>,
    pub residual: Vec<f64>,
}

impl ComponentSeries {
    pub fn from_bundles(bundles: &[ForecastBundle]) -> Result<Self> {
        let mut out = ComponentSeries::default();
        for b in bundles {
            for (stream, dst) in [
                (Stream::Trend, &mut out.trend),
                (Stream::Season, &mut out.season),
                (Stream::Residual, &mut out.residual),
            ] {
                let values = b
                    .component(stream)
                    .ok_or_else(|| invalid!("forecast has no {stream} component"))?;
                dst.extend_from_slice(values);
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.trend.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trend.is_empty()
    }

    fn check(&self) -> Result<()> {
        if self.season.len() != self.len() || self.residual.len() != self.len() {
            return Err(invalid!("component series have different lengths"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SobolIndices {
    pub trend: f64,
    pub season: f64,
    pub residual: f64,
}

/// `S_i = Var(Ŷ_i) / Var(ΣŶ_c)`. Correlated components can make the indices
/// sum to anything; they are not shares of a whole.
pub fn sobol_first_order(c: &ComponentSeries) -> Result<SobolIndices> {
    c.check()?;
    if c.len() < 2 {
        return Err(invalid!("first-order indices need at least 2 points"));
    }
    let total: Vec<f64> = (0..c.len()).map(|i| c.trend[i] + c.season[i] + c.residual[i]).collect();
    let var_total = population_variance(&total);
    if var_total == 0.0 {
        return Err(invalid!("summed forecast has zero variance"));
    }
    Ok(SobolIndices {
        trend: population_variance(&c.trend) / var_total,
        season: population_variance(&c.season) / var_total,
        residual: population_variance(&c.residual) / var_total,
    })
}

pub const GAM_TERMS: [&str; 7] = [
    "intercept",
    "trend",
    "season",
    "residual",
    "trend*season",
    "trend*residual",
    "season*residual",
];

pub const GAM_RIDGE: f64 = 1e-8;

/// Least-squares surrogate `target ≈ β₀ + Σβ_i Ŷ_i (+ Σβ_ij Ŷ_i Ŷ_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GamFit {
    /// Aligned with the first `coefficients.len()` entries of [`GAM_TERMS`].
    pub coefficients: Vec<f64>,
    pub r2: f64,
    pub interactions: bool,
    /// The design was rank-deficient and a ridge penalty was added.
    pub ridge: bool,
}

impl GamFit {
    fn row(x: [f64; 3], interactions: bool) -> Vec<f64> {
        let [t, s, r] = x;
        let mut row = vec![1.0, t, s, r];
        if interactions {
            row.extend([t * s, t * r, s * r]);
        }
        row
    }

    pub fn predict(&self, x: [f64; 3]) -> f64 {
        Self::row(x, self.interactions)
            .iter()
            .zip(&self.coefficients)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        GAM_TERMS.iter().position(|t| *t == name).and_then(|i| self.coefficients.get(i).copied())
    }
}

pub fn gam_fit(c: &ComponentSeries, target: &[f64], interactions: bool) -> Result<GamFit> {
    c.check()?;
    let n = c.len();
    if target.len() != n {
        return Err(invalid!("target has {} points, components have {n}", target.len()));
    }
    if n < 10 {
        return Err(invalid!("surrogate fit needs at least 10 points, got {n}"));
    }
    let p = if interactions { 7 } else { 4 };
    let x = DMatrix::from_row_iterator(
        n,
        p,
        (0..n).flat_map(|i| GamFit::row([c.trend[i], c.season[i], c.residual[i]], interactions)),
    );
    let y = DVector::from_column_slice(target);

    let svd = x.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let tol = max_sv * (n.max(p) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let (beta, ridge) = if rank == p {
        (svd.solve(&y, 0.0).map_err(|e| invalid!("least squares failed: {e}"))?, false)
    } else {
        log::warn!("rank-deficient surrogate design (rank {rank} of {p}); adding ridge penalty {GAM_RIDGE}");
        let xt = x.transpose();
        let gram = &xt * &x + DMatrix::identity(p, p) * GAM_RIDGE;
        let rhs = &xt * &y;
        let beta = gram
            .cholesky()
            .ok_or_else(|| invalid!("ridge system is not positive definite"))?
            .solve(&rhs);
        (beta, true)
    };

    let fitted = &x * &beta;
    let mean = y.mean();
    let ss_res: f64 = (&y - &fitted).iter().map(|e| e * e).sum();
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res <= f64::EPSILON * n as f64 * (1.0 + mean * mean) {
        1.0
    } else {
        0.0
    };
    Ok(GamFit {
        coefficients: beta.iter().copied().collect(),
        r2,
        interactions,
        ridge,
    })
}

/// Coalition table of the surrogate: components outside a coalition are
/// set to zero before the surrogate predicts, matching the masking used on
/// the model itself.
pub fn gam_coalition_table(fit: &GamFit, c: &ComponentSeries, target: &[f64]) -> Result<CoalitionTable> {
    c.check()?;
    if target.len() != c.len() {
        return Err(invalid!("target has {} points, components have {}", target.len(), c.len()));
    }
    let entries = Coalition::all()
        .map(|coal| {
            let keep = |s: Stream, v: f64| if coal.contains(s) { v } else { 0.0 };
            let forecast: Vec<f64> = (0..c.len())
                .map(|i| {
                    fit.predict([
                        keep(Stream::Trend, c.trend[i]),
                        keep(Stream::Season, c.season[i]),
                        keep(Stream::Residual, c.residual[i]),
                    ])
                })
                .collect();
            (coal, Metrics::compute(&forecast, target))
        })
        .collect();
    CoalitionTable::new(entries)
}

/// Convenience wrapper: surrogate fit on the model's own component forecasts.
pub fn gam_fit_model(model: &TempoModel, samples: &[Sample], interactions: bool) -> Result<(GamFit, ComponentSeries, Vec<f64>)> {
    let bundles = predict_masked(model, samples, Coalition::FULL)?;
    let comps = ComponentSeries::from_bundles(&bundles)?;
    // The surrogate works in normalized space, like the components.
    let target: Vec<f64> = bundles
        .iter()
        .zip(samples)
        .flat_map(|(b, s)| {
            let a = b.output_affine;
            let std = b.stats.std();
            s.target.iter().map(move |&y| a.gamma * (y - b.stats.mean) / std + a.beta).collect::<Vec<_>>()
        })
        .collect();
    let fit = gam_fit(&comps, &target, interactions)?;
    Ok((fit, comps, target))
}
