//! Decomposition-prompted transformer forecasting.
//!
//! A lookback window is normalized and split into trend, season and
//! residual. Each component becomes a stream of patch tokens prefixed with
//! prompt tokens, and the streams share one decoder-only transformer.
//! Per-component linear heads produce forecasts that are summed and mapped
//! back to the input scale.
//!
//! The analysis side covers exact Shapley attribution over the components
//! along with sensitivity and surrogate cross-checks. The `theory` module
//! holds executable checks of the spectral arguments for decomposition.

pub mod backbone;
pub mod data;
pub mod decompose;
pub mod embed;
pub mod error;
pub mod metrics;
pub mod interpret;
pub mod model;
pub mod norm;
pub mod prompt;
pub mod stats;
pub mod theory;

pub use error::{Result, TempoError};

/// Code blocks of the guide under `book/`, compiled and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/decomposition.md")]
    pub struct Decomposition;
    #[doc = include_str!("../../../book/src/normalization.md")]
    pub struct Normalization;
    #[doc = include_str!("../../../book/src/patches_and_prompts.md")]
    pub struct PatchesAndPrompts;
    #[doc = include_str!("../../../book/src/model.md")]
    pub struct Model;
    #[doc = include_str!("../../../book/src/attribution.md")]
    pub struct Attribution;
    #[doc = include_str!("../../../book/src/spectral.md")]
    pub struct Spectral;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
