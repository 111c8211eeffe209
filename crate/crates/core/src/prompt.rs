//! Component prompts: semi-soft prompts seeded from a text template, and a
//! shared pool of trainable `(key, value)` prompts retrieved by cosine
//! similarity.
//!
//! Retrieval picks the `K` keys with the highest cosine score against a
//! query pooled from the patch tokens. Scores are sorted descending; equal
//! scores keep ascending index order.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::gaussian;
use crate::backbone::tape::Mat;
use crate::error::{invalid, shape_err, Result, TempoError};

/// A token stream fed to the backbone: one per decomposed component, or the
/// undecomposed series when decomposition is ablated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Trend,
    Season,
    Residual,
    Series,
}

impl Stream {
    pub const COMPONENTS: [Stream; 3] = [Stream::Trend, Stream::Season, Stream::Residual];

    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Trend => "trend",
            Stream::Season => "season",
            Stream::Residual => "residual",
            Stream::Series => "series",
        }
    }

    /// Text the semi-soft prompt of this stream is seeded from.
    pub fn template(self) -> String {
        format!("Predict the future time step given the {}", self.as_str())
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stream {
    type Err = TempoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trend" => Ok(Stream::Trend),
            "season" => Ok(Stream::Season),
            "residual" => Ok(Stream::Residual),
            "series" => Ok(Stream::Series),
            _ => Err(invalid!("unknown component {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Template-seeded, trainable per-stream prompt.
    SemiSoft,
    /// Shared key-value pool with top-K retrieval.
    #[default]
    Pool,
    /// Template-seeded prompt that is never updated.
    Hard,
    /// No prompt rows at all.
    None,
}

impl PromptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::SemiSoft => "semi_soft",
            PromptMode::Pool => "pool",
            PromptMode::Hard => "hard",
            PromptMode::None => "none",
        }
    }
}

impl FromStr for PromptMode {
    type Err = TempoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semi_soft" => Ok(PromptMode::SemiSoft),
            "pool" => Ok(PromptMode::Pool),
            "hard" => Ok(PromptMode::Hard),
            "none" => Ok(PromptMode::None),
            _ => Err(invalid!("unknown prompt mode {s:?}")),
        }
    }
}

/// How the `N × L_E` token matrix is reduced to a retrieval query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryPool {
    #[default]
    Mean,
    Last,
}

impl FromStr for QueryPool {
    type Err = TempoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(QueryPool::Mean),
            "last" => Ok(QueryPool::Last),
            _ => Err(invalid!("unknown query pooling {s:?}")),
        }
    }
}

impl QueryPool {
    pub fn as_str(self) -> &'static str {
        match self {
            QueryPool::Mean => "mean",
            QueryPool::Last => "last",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemiSoftPrompt {
    pub component: Stream,
    /// `L_p × L_E`.
    pub vectors: Mat,
    pub init_seed: u64,
}

/// Seed derived from the stream's template text, mixed with `global_seed`.
pub fn template_seed(component: Stream, global_seed: u64) -> u64 {
    let digest = Sha256::digest(component.template().as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes) ^ global_seed
}

pub fn init_semi_soft(component: Stream, prompt_len: usize, embed_dim: usize, global_seed: u64) -> SemiSoftPrompt {
    let init_seed = template_seed(component, global_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    SemiSoftPrompt {
        component,
        vectors: gaussian((prompt_len, embed_dim), prompt_scale(embed_dim), &mut rng),
        init_seed,
    }
}

pub(crate) fn prompt_scale(embed_dim: usize) -> f64 {
    1.0 / (embed_dim as f64).sqrt()
}

/// Reduces patch tokens (`N × L_E`, `N ≥ 1`) to one query vector.
pub fn pool_query(tokens: &Mat, pooling: QueryPool) -> Array1<f64> {
    match pooling {
        QueryPool::Mean => tokens.mean_axis(Axis(0)).expect("at least one token"),
        QueryPool::Last => tokens.row(tokens.nrows() - 1).to_owned(),
    }
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn match_score(query: ArrayView1<'_, f64>, key: ArrayView1<'_, f64>) -> f64 {
    let qn = query.dot(&query).sqrt();
    let kn = key.dot(&key).sqrt();
    if qn == 0.0 || kn == 0.0 {
        return 0.0;
    }
    (query.dot(&key) / (qn * kn)).clamp(-1.0, 1.0)
}

/// `M` trainable `(key, value)` prompt pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPool {
    /// `M × L_E`.
    pub keys: Mat,
    /// `(M·L_p) × L_E`; entry `m` occupies rows `[m·L_p, (m+1)·L_p)`.
    pub values: Mat,
    pub top_k: usize,
    pub prompt_len: usize,
}

impl PromptPool {
    pub fn new(keys: Mat, values: Mat, top_k: usize, prompt_len: usize) -> Result<Self> {
        let pool = PromptPool {
            keys,
            values,
            top_k,
            prompt_len,
        };
        pool.validate()?;
        Ok(pool)
    }

    pub fn init(size: usize, top_k: usize, prompt_len: usize, embed_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let keys = Mat::from_shape_simple_fn((size, embed_dim), || rng.random_range(-1.0..1.0));
        let values = gaussian((size * prompt_len, embed_dim), prompt_scale(embed_dim), rng);
        let mut pool = Self::new(keys, values, top_k, prompt_len)?;
        pool.reinit_degenerate_keys(rng);
        Ok(pool)
    }

    pub fn size(&self) -> usize {
        self.keys.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.size();
        if self.prompt_len == 0 || self.top_k == 0 {
            return Err(invalid!("prompt length and K must be ≥ 1"));
        }
        if self.top_k > m {
            return Err(invalid!("K = {} exceeds pool size {m}", self.top_k));
        }
        if self.values.dim() != (m * self.prompt_len, self.keys.ncols()) {
            return Err(shape_err!(
                "pool values {:?} do not match {m} keys of width {} and prompt length {}",
                self.values.dim(),
                self.keys.ncols(),
                self.prompt_len
            ));
        }
        Ok(())
    }

    /// Redraws any key whose norm is below `1e-12`.
    pub fn reinit_degenerate_keys(&mut self, rng: &mut ChaCha8Rng) {
        for mut key in self.keys.rows_mut() {
            while key.dot(&key).sqrt() < 1e-12 {
                key.mapv_inplace(|_| rng.random_range(-1.0..1.0));
            }
        }
    }

    pub fn scores(&self, query: ArrayView1<'_, f64>) -> Vec<f64> {
        self.keys.rows().into_iter().map(|k| match_score(query, k)).collect()
    }

    pub fn select(&self, query: ArrayView1<'_, f64>) -> Result<Vec<usize>> {
        select_top_k(&self.keys, query, self.top_k)
    }

    /// `L_p × L_E` value block of entry `m`.
    pub fn value(&self, m: usize) -> Mat {
        self.values
            .slice(s![m * self.prompt_len..(m + 1) * self.prompt_len, ..])
            .to_owned()
    }
}

/// Indices of the `k` keys scoring highest against `query`, by descending
/// score with ascending index breaking ties.
pub fn select_top_k(keys: &Mat, query: ArrayView1<'_, f64>, k: usize) -> Result<Vec<usize>> {
    let m = keys.nrows();
    if k > m {
        return Err(invalid!("cannot select {k} prompts from a pool of {m}"));
    }
    let scores: Vec<f64> = keys.rows().into_iter().map(|key| match_score(query, key)).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Prepends prompt rows to the patch tokens.
pub fn assemble_input(prompts: &[Mat], tokens: &Mat) -> Result<Mat> {
    let width = tokens.ncols();
    if let Some(p) = prompts.iter().find(|p| p.ncols() != width) {
        return Err(shape_err!("prompt width {} != token width {width}", p.ncols()));
    }
    let mut views: Vec<_> = prompts.iter().map(|p| p.view()).collect();
    views.push(tokens.view());
    Ok(ndarray::concatenate(Axis(0), &views).expect("widths checked"))
}

/// One logged retrieval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub component: Stream,
    pub indices: Vec<usize>,
}

/// Number of times each pool index was retrieved.
pub fn selection_histogram(log: &[SelectionRecord], pool_size: usize) -> Vec<u64> {
    let mut counts = vec![0u64; pool_size];
    for idx in log.iter().flat_map(|r| &r.indices) {
        counts[*idx] += 1;
    }
    counts
}

/// Histogram restricted to one component's retrievals.
pub fn selection_histogram_for(log: &[SelectionRecord], pool_size: usize, component: Stream) -> Vec<u64> {
    let filtered: Vec<SelectionRecord> = log.iter().filter(|r| r.component == component).cloned().collect();
    selection_histogram(&filtered, pool_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn semi_soft_determinism_and_shape() {
        let a = init_semi_soft(Stream::Trend, 3, 64, 42);
        let b = init_semi_soft(Stream::Trend, 3, 64, 42);
        assert_eq!(a, b);
        assert_eq!(a.vectors.dim(), (3, 64));
        let c = init_semi_soft(Stream::Season, 3, 64, 42);
        let diff = (&a.vectors - &c.vectors).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(diff > 0.0);
    }

    #[test]
    fn query_pooling() {
        let single = array![[1.0, -2.0]];
        assert_eq!(pool_query(&single, QueryPool::Mean), array![1.0, -2.0]);
        let sym = array![[1.0, 2.0], [-1.0, -2.0]];
        assert_eq!(pool_query(&sym, QueryPool::Mean), array![0.0, 0.0]);
        let three = array![[1.0, 0.0, 3.0], [2.0, 5.0, -1.0], [0.5, 1.0, 1.0]];
        let q = pool_query(&three, QueryPool::Mean);
        let expect = [3.5 / 3.0, 2.0, 1.0];
        for (a, b) in q.iter().zip(expect) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert_eq!(pool_query(&three, QueryPool::Last), array![0.5, 1.0, 1.0]);
    }

    #[test]
    fn cosine_examples() {
        let v = array![0.3, -1.0, 2.0];
        assert!((match_score(v.view(), v.view()) - 1.0).abs() < 1e-15);
        assert_eq!(match_score(array![1.0, 0.0].view(), array![0.0, 2.0].view()), 0.0);
        assert!((match_score(v.view(), (-&v).view()) + 1.0).abs() < 1e-15);
        assert_eq!(match_score(array![0.0, 0.0].view(), array![1.0, 1.0].view()), 0.0);
    }

    #[test]
    fn top_k_cases() {
        let keys = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let q = array![1.0, 0.2];
        assert_eq!(select_top_k(&keys, q.view(), 3).unwrap(), vec![0, 2, 1]);
        let same = Mat::from_elem((5, 2), 0.7);
        assert_eq!(select_top_k(&same, q.view(), 3).unwrap(), vec![0, 1, 2]);
        assert!(select_top_k(&keys, q.view(), 4).is_err());
    }

    #[test]
    fn assembly() {
        let tokens = Mat::from_shape_fn((12, 4), |(i, j)| (i * 4 + j) as f64);
        assert_eq!(assemble_input(&[], &tokens).unwrap(), tokens);
        let one = assemble_input(&[Mat::ones((1, 4))], &tokens).unwrap();
        assert_eq!(one.nrows(), 13);
        let prompts: Vec<Mat> = (0..3).map(|i| Mat::from_elem((3, 4), -(i as f64))).collect();
        let full = assemble_input(&prompts, &tokens).unwrap();
        assert_eq!(full.nrows(), 21);
        assert_eq!(full.slice(s![9.., ..]), tokens);
        assert!(assemble_input(&[Mat::ones((1, 3))], &tokens).is_err());
    }

    #[test]
    fn histograms() {
        let log = vec![SelectionRecord {
            component: Stream::Trend,
            indices: vec![4, 0, 7],
        }];
        let h = selection_histogram(&log, 8);
        assert_eq!(h.iter().filter(|&&c| c == 1).count(), 3);
        assert_eq!(h.iter().sum::<u64>(), 3);
        assert!(selection_histogram(&[], 8).iter().all(|&c| c == 0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pool = PromptPool::init(30, 3, 3, 16, &mut rng).unwrap();
        let q = Array1::from_shape_fn(16, |i| (i as f64).sin());
        let log: Vec<SelectionRecord> = (0..10)
            .map(|_| SelectionRecord {
                component: Stream::Season,
                indices: pool.select(q.view()).unwrap(),
            })
            .collect();
        let h = selection_histogram_for(&log, 30, Stream::Season);
        assert_eq!(h.iter().filter(|&&c| c == 10).count(), 3);
        assert_eq!(h.iter().sum::<u64>(), 30);
        assert!(selection_histogram_for(&log, 30, Stream::Trend).iter().all(|&c| c == 0));
    }

    #[test]
    fn degenerate_keys_are_redrawn() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pool = PromptPool::new(Mat::zeros((4, 3)), Mat::zeros((8, 3)), 2, 2).unwrap();
        pool.reinit_degenerate_keys(&mut rng);
        assert!(pool.keys.rows().into_iter().all(|k| k.dot(&k) > 0.0));
        assert!(PromptPool::new(Mat::zeros((4, 3)), Mat::zeros((7, 3)), 2, 2).is_err());
        assert!(PromptPool::new(Mat::zeros((2, 3)), Mat::zeros((4, 3)), 3, 2).is_err());
    }
}
