//! Reversible instance normalization.
//!
//! A window is standardized with its own mean and population variance, then
//! passed through a learnable affine `γ·x̂ + β`. The forecast is mapped back
//! with the same statistics: `√(var + ε)·(y − β)/γ + mean`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::stats::{mean, population_variance};

pub const DEFAULT_EPS: f64 = 1e-5;
/// Smallest admissible `|γ|` after an optimizer update.
pub const MIN_ABS_GAMMA: f64 = 1e-6;

/// Statistics of one instance, kept for de-normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceStats {
    pub mean: f64,
    pub var: f64,
    pub eps: f64,
}

impl InstanceStats {
    pub fn of(x: &[f64], eps: f64) -> Self {
        InstanceStats {
            mean: mean(x),
            var: population_variance(x),
            eps,
        }
    }

    pub fn std(&self) -> f64 {
        (self.var + self.eps).sqrt()
    }
}

/// Learnable affine pair `(γ, β)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffinePair {
    pub gamma: f64,
    pub beta: f64,
}

impl AffinePair {
    pub const IDENTITY: AffinePair = AffinePair {
        gamma: 1.0,
        beta: 0.0,
    };

    /// Pushes `γ` away from zero, keeping its sign.
    pub fn clamp_gamma(gamma: f64) -> f64 {
        if gamma.abs() >= MIN_ABS_GAMMA {
            gamma
        } else if gamma < 0.0 {
            -MIN_ABS_GAMMA
        } else {
            MIN_ABS_GAMMA
        }
    }
}

impl Default for AffinePair {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Returns `γ·(x − mean)/√(var + eps) + β` and the statistics used.
pub fn instance_normalize(x: &[f64], affine: AffinePair, eps: f64) -> (Vec<f64>, InstanceStats) {
    let stats = InstanceStats::of(x, eps);
    let std = stats.std();
    let out = x
        .iter()
        .map(|v| affine.gamma * ((v - stats.mean) / std) + affine.beta)
        .collect();
    (out, stats)
}

/// Inverse of [`instance_normalize`] for the same statistics and affine pair.
pub fn instance_denormalize(y: &[f64], stats: &InstanceStats, affine: AffinePair) -> Result<Vec<f64>> {
    if affine.gamma == 0.0 {
        return Err(invalid!("cannot de-normalize with gamma = 0"));
    }
    let std = stats.std();
    Ok(y
        .iter()
        .map(|v| std * ((v - affine.beta) / affine.gamma) + stats.mean)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_evaluated() {
        let (y, stats) = instance_normalize(&[1.0, 2.0, 3.0], AffinePair::IDENTITY, 0.0);
        assert_eq!(stats.mean, 2.0);
        assert!((stats.var - 2.0 / 3.0).abs() < 1e-15);
        let expect = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in y.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_input_maps_to_beta() {
        let affine = AffinePair { gamma: 1.7, beta: -0.3 };
        let (y, _) = instance_normalize(&[4.0; 6], affine, 1e-5);
        assert!(y.iter().all(|&v| v == -0.3));
    }

    #[test]
    fn affine_on_standardized_input() {
        let x = [-1.0, 1.0, -1.0, 1.0];
        let (y, _) = instance_normalize(&x, AffinePair { gamma: 2.0, beta: 1.0 }, 0.0);
        for (a, b) in y.iter().zip(x) {
            assert!((a - (2.0 * b + 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn denormalize_examples() {
        let stats = InstanceStats { mean: 5.0, var: 0.0, eps: 1.0 };
        assert_eq!(instance_denormalize(&[1.0], &stats, AffinePair::IDENTITY).unwrap(), vec![6.0]);
        let affine = AffinePair { gamma: 0.8, beta: 0.25 };
        let stats = InstanceStats { mean: -3.0, var: 2.0, eps: 1e-5 };
        let out = instance_denormalize(&[0.25; 3], &stats, affine).unwrap();
        assert!(out.iter().all(|&v| v == -3.0));
        assert!(instance_denormalize(&[1.0], &stats, AffinePair { gamma: 0.0, beta: 0.0 }).is_err());
    }

    #[test]
    fn clamp_keeps_sign() {
        assert_eq!(AffinePair::clamp_gamma(1e-9), MIN_ABS_GAMMA);
        assert_eq!(AffinePair::clamp_gamma(-1e-9), -MIN_ABS_GAMMA);
        assert_eq!(AffinePair::clamp_gamma(0.0), MIN_ABS_GAMMA);
        assert_eq!(AffinePair::clamp_gamma(-0.5), -0.5);
    }

    proptest! {
        #[test]
        fn roundtrip(
            x in prop::collection::vec(-100f64..100.0, 1..64),
            gamma in 0.5f64..2.0,
            beta in -1f64..1.0,
        ) {
            let affine = AffinePair { gamma, beta };
            let (y, stats) = instance_normalize(&x, affine, DEFAULT_EPS);
            let back = instance_denormalize(&y, &stats, affine).unwrap();
            for (a, b) in back.iter().zip(&x) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn standardized_moments(x in prop::collection::vec(-100f64..100.0, 2..64)) {
            prop_assume!(population_variance(&x) > 1e-6);
            let (y, _) = instance_normalize(&x, AffinePair::IDENTITY, 0.0);
            prop_assert!(mean(&y).abs() <= 1e-12);
            prop_assert!((population_variance(&y) - 1.0).abs() <= 1e-9);
        }
    }
}
