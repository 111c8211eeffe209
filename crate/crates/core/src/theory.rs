//! Executable checks of the frequency-domain forecasting argument and the
//! trend/season disentanglement theorem.
//!
//! Transforms use `F(u) = (1/N) Σ_x f(x) e^{−i2πux/N}` and
//! `f(x) = Σ_u F(u) e^{i2πux/N}`, so Parseval reads
//! `Σ|f(x)|² = N · Σ|F(u)|²`.
//!
//! # Extending a sequence by one sample
//!
//! Append `f(N)` to `f(0..N)` and take the `(N+1)`-point transform `F′`.
//! With `A′(u) = (1/(N+1)) Σ_{x<N} f(x) e^{−i2πux/(N+1)}` and `B = A′(N)`:
//!
//! ```text
//! f(N)  = (N+1) (F′(N) − B) e^{+i2πN²/(N+1)}
//! F′(u) = A′(u) + (F′(N) − B) e^{i2π(N−u)N/(N+1)}
//! ```
//!
//! so the single coefficient `F′(N)` determines both the next sample and the
//! whole updated spectrum. [`FreqExtension::a`] holds the per-frequency gap
//! `A(u) = F(u) − A′(u)` between the `N`-point and `(N+1)`-point sums.

use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

fn cis(theta: f64) -> Complex64 {
    Complex64::from_polar(1.0, theta)
}

/// Forward transform with the `1/N` factor. Naive `O(N²)`.
pub fn dft(f: &[Complex64]) -> Vec<Complex64> {
    let n = f.len();
    let nf = n as f64;
    (0..n)
        .map(|u| {
            let sum: Complex64 = f
                .iter()
                .enumerate()
                .map(|(x, &v)| v * cis(-TAU * ((u * x) % n) as f64 / nf))
                .sum();
            sum / nf
        })
        .collect()
}

pub fn dft_real(f: &[f64]) -> Vec<Complex64> {
    dft(&f.iter().map(|&v| Complex64::new(v, 0.0)).collect::<Vec<_>>())
}

/// Inverse of [`dft`]; no normalization factor.
pub fn idft(spectrum: &[Complex64]) -> Vec<Complex64> {
    let n = spectrum.len();
    let nf = n as f64;
    (0..n)
        .map(|x| {
            spectrum
                .iter()
                .enumerate()
                .map(|(u, &v)| v * cis(TAU * ((u * x) % n) as f64 / nf))
                .sum()
        })
        .collect()
}

/// The quantities of the one-step extension for a length-`N` sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreqExtension {
    /// `A(u) = Σ_{x<N} f(x) (e^{−i2πux/N}/N − e^{−i2πux/(N+1)}/(N+1))` for
    /// `u = 0..N`; it depends on `u`.
    pub a: Vec<Complex64>,
    pub b: Complex64,
    pub f_prime_n: Complex64,
    pub f_n: Complex64,
    /// `F′(u)` for `u = 0..N`.
    pub f_prime: Vec<Complex64>,
}

/// Recovers `f(N)` and `F′(0..N)` from `f(0..N)` and the coefficient
/// `F′(N)` of the extended sequence.
pub fn freq_extend(f: &[Complex64], f_prime_n: Complex64) -> Result<FreqExtension> {
    let n = f.len();
    if n == 0 {
        return Err(invalid!("frequency extension needs N ≥ 1"));
    }
    let m = n + 1;
    let mf = m as f64;
    // A′(u) over the (N+1)-point grid, u = 0..=N.
    let a_ext: Vec<Complex64> = (0..m)
        .map(|u| {
            f.iter()
                .enumerate()
                .map(|(x, &v)| v * cis(-TAU * ((u * x) % m) as f64 / mf))
                .sum::<Complex64>()
                / mf
        })
        .collect();
    let b = a_ext[n];
    let spectrum = dft(f);
    let a: Vec<Complex64> = (0..n).map(|u| spectrum[u] - a_ext[u]).collect();
    let delta = f_prime_n - b;
    let f_n = mf * delta * cis(TAU * ((n * n) % m) as f64 / mf);
    let f_prime = (0..n)
        .map(|u| a_ext[u] + delta * cis(TAU * (((n - u) * n) % m) as f64 / mf))
        .collect();
    Ok(FreqExtension {
        a,
        b,
        f_prime_n,
        f_n,
        f_prime,
    })
}

/// Indices of coefficients with magnitude above `tol`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSupport {
    pub coefficients: Vec<Complex64>,
    pub support: Vec<usize>,
    pub tol: f64,
}

impl SpectrumSupport {
    pub fn of(x: &[f64], tol: f64) -> Result<Self> {
        if !(tol > 0.0) {
            return Err(invalid!("support tolerance must be > 0, got {tol}"));
        }
        let coefficients = dft_real(x);
        let support = coefficients
            .iter()
            .enumerate()
            .filter(|(_, c)| c.norm() > tol)
            .map(|(i, _)| i)
            .collect();
        Ok(SpectrumSupport {
            coefficients,
            support,
            tol,
        })
    }
}

pub const DEFAULT_RELATIVE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentangleReport {
    pub inner_product: f64,
    pub support_trend: Vec<usize>,
    pub support_season: Vec<usize>,
    pub overlap: Vec<usize>,
    pub tol: f64,
    /// False only for a non-orthogonal pair with disjoint supports, which
    /// the theorem rules out.
    pub theorem_consistent: bool,
}

/// Inner product and DFT supports of a trend/season pair. `tol = None` uses
/// `1e-8 · max|coefficient|` over both signals.
pub fn disentangle_diagnostic(x_t: &[f64], x_s: &[f64], tol: Option<f64>) -> Result<DisentangleReport> {
    if x_t.len() != x_s.len() || x_t.is_empty() {
        return Err(invalid!("signals must be nonempty and of equal length ({} vs {})", x_t.len(), x_s.len()));
    }
    let n = x_t.len() as f64;
    let tol = match tol {
        Some(t) => t,
        None => {
            let max = dft_real(x_t)
                .iter()
                .chain(dft_real(x_s).iter())
                .map(|c| c.norm())
                .fold(0.0, f64::max);
            DEFAULT_RELATIVE_TOL * max.max(f64::MIN_POSITIVE)
        }
    };
    let st = SpectrumSupport::of(x_t, tol)?;
    let ss = SpectrumSupport::of(x_s, tol)?;
    let overlap: Vec<usize> = st.support.iter().copied().filter(|i| ss.support.contains(i)).collect();
    let inner_product: f64 = x_t.iter().zip(x_s).map(|(a, b)| a * b).sum();
    let theorem_consistent = !(inner_product.abs() > n * tol * tol && overlap.is_empty());
    Ok(DisentangleReport {
        inner_product,
        support_trend: st.support,
        support_season: ss.support,
        overlap,
        tol,
        theorem_consistent,
    })
}

/// `Σ|f|²` and `N·Σ|F|²`.
pub fn parseval_sides(f: &[Complex64]) -> (f64, f64) {
    let spectrum = dft(f);
    let time: f64 = f.iter().map(|c| c.norm_sqr()).sum();
    let freq: f64 = spectrum.iter().map(|c| c.norm_sqr()).sum::<f64>() * f.len() as f64;
    (time, freq)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Dft,
    Extend,
    Disentangle,
    All,
}

impl Suite {
    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Dft => "dft",
            Suite::Extend => "extend",
            Suite::Disentangle => "disentangle",
            Suite::All => "all",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = crate::TempoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dft" => Ok(Suite::Dft),
            "extend" => Ok(Suite::Extend),
            "disentangle" => Ok(Suite::Disentangle),
            "all" => Ok(Suite::All),
            _ => Err(invalid!("unknown suite {s:?} (expected dft, extend, disentangle or all)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, cases: usize, max_error: f64, threshold: f64) -> Self {
        CheckResult {
            name: name.to_string(),
            cases,
            max_error,
            threshold,
            passed: max_error <= threshold,
        }
    }
}

fn max_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

fn random_complex(n: usize, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
    (0..n)
        .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect()
}

fn dft_checks(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut roundtrip = 0.0_f64;
    let mut linearity = 0.0_f64;
    let mut parseval = 0.0_f64;
    let mut constant = 0.0_f64;
    let mut impulse = 0.0_f64;
    for n in 1..=64 {
        let x = random_complex(n, &mut rng);
        let y = random_complex(n, &mut rng);
        roundtrip = roundtrip.max(max_diff(&idft(&dft(&x)), &x));
        let (a, b) = (Complex64::new(0.7, -0.2), Complex64::new(-1.3, 0.5));
        let combo: Vec<Complex64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let expected: Vec<Complex64> = dft(&x).iter().zip(dft(&y)).map(|(p, q)| a * p + b * q).collect();
        linearity = linearity.max(max_diff(&dft(&combo), &expected));
        let (lhs, rhs) = parseval_sides(&x);
        parseval = parseval.max((lhs - rhs).abs() / lhs.max(1.0));
        let c = Complex64::new(2.5, 0.0);
        let spec = dft(&vec![c; n]);
        constant = constant.max((spec[0] - c).norm());
        constant = spec[1..].iter().map(|v| v.norm()).fold(constant, f64::max);
        let mut e0 = vec![Complex64::new(0.0, 0.0); n];
        e0[0] = Complex64::new(1.0, 0.0);
        let inv = 1.0 / n as f64;
        impulse = dft(&e0).iter().map(|v| (v - inv).norm()).fold(impulse, f64::max);
    }
    vec![
        CheckResult::new("dft_constant", 64, constant, 1e-12),
        CheckResult::new("dft_impulse", 64, impulse, 1e-12),
        CheckResult::new("dft_roundtrip", 64, roundtrip, 1e-12),
        CheckResult::new("dft_linearity", 64, linearity, 1e-12),
        CheckResult::new("parseval", 64, parseval, 1e-9),
    ]
}

fn extend_checks(seed: u64, cases: usize) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f_n_err = 0.0_f64;
    let mut spectrum_err = 0.0_f64;
    for _ in 0..cases {
        let n = rng.random_range(1..=32);
        let g = random_complex(n + 1, &mut rng);
        let full = dft(&g);
        let ext = freq_extend(&g[..n], full[n]).expect("n ≥ 1");
        f_n_err = f_n_err.max((ext.f_n - g[n]).norm());
        spectrum_err = spectrum_err.max(max_diff(&ext.f_prime, &full[..n]));
    }
    vec![
        CheckResult::new("extend_next_sample", cases, f_n_err, 1e-9),
        CheckResult::new("extend_spectrum", cases, spectrum_err, 1e-9),
    ]
}

/// Seeded non-orthogonal pairs: the error is the number of theorem
/// violations.
fn disentangle_checks(seed: u64, cases: usize) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0usize;
    let mut tested = 0usize;
    while tested < cases {
        let n = rng.random_range(8..=64);
        let x_t: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x_s: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let report = disentangle_diagnostic(&x_t, &x_s, None).expect("equal lengths");
        if report.inner_product.abs() <= 1e-6 * n as f64 {
            continue;
        }
        tested += 1;
        if !report.theorem_consistent || report.overlap.is_empty() {
            violations += 1;
        }
    }
    vec![CheckResult::new("disentangle_overlap", cases, violations as f64, 0.0)]
}

/// Runs the named suite with deterministic random cases.
pub fn run_suite(suite: Suite, seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Dft | Suite::All) {
        out.extend(dft_checks(seed));
    }
    if matches!(suite, Suite::Extend | Suite::All) {
        out.extend(extend_checks(seed, 200));
    }
    if matches!(suite, Suite::Disentangle | Suite::All) {
        out.extend(disentangle_checks(seed, 100));
    }
    out
}
