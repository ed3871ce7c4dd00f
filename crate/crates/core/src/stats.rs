// SPDX-License-Identifier: MIT OR Apache-2.0

//! Effect sizes, correlations, bootstrap intervals, logit-level equivalence
//! metrics and Fisher-information diagnostics.
//!
//! Undefined statistics are returned as typed errors rather than NaN.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jacobian::JacobianAnalysis;
use crate::scalar::Real;
use crate::seeds::{self, Stream};

/// Conventional threshold for a negligible standardized effect.
pub const NEGLIGIBLE_D: f64 = 0.2;
pub const TOP_K: usize = 10;

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with the `n − 1` denominator.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

pub fn sample_sd(xs: &[f64]) -> f64 {
    sample_variance(xs).sqrt()
}

/// Cohen's d with pooled standard deviation.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64> {
    let need = 2;
    for s in [a, b] {
        if s.len() < need {
            return Err(Error::InsufficientSamples { need, got: s.len() });
        }
    }
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let pooled = (((n1 - 1.0) * sample_variance(a) + (n2 - 1.0) * sample_variance(b)) / (n1 + n2 - 2.0)).sqrt();
    if !(pooled > 0.0) {
        return Err(Error::UndefinedEffect);
    }
    Ok((mean(a) - mean(b)) / pooled)
}

/// Pearson product-moment correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("correlation samples", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::InsufficientSamples { need: 2, got: a.len() });
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if !(saa > 0.0) {
        return Err(Error::UndefinedCorrelation("first sample"));
    }
    if !(sbb > 0.0) {
        return Err(Error::UndefinedCorrelation("second sample"));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// `|mean steered − mean baseline|`.
pub fn steering_effect(steered: &[f64], baseline: &[f64]) -> f64 {
    (mean(steered) - mean(baseline)).abs()
}

/// Efficacy of the orthogonal component alone relative to `v`.
pub fn perp_only_ratio(effect_perp: f64, effect_v: f64) -> Result<f64> {
    if effect_v == 0.0 || !effect_v.is_finite() {
        return Err(Error::DegenerateBaseline(format!(
            "steering with v has effect {effect_v}; ratio undefined"
        )));
    }
    Ok(effect_perp / effect_v)
}

/// Linear-interpolated quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Seeded percentile bootstrap 95% interval for `statistic`.
pub fn bootstrap_ci<X: Clone>(
    samples: &[X],
    statistic: impl Fn(&[X]) -> f64,
    n_boot: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_boot < 100 {
        return Err(Error::InvalidArgument(format!("n_boot must be at least 100, got {n_boot}")));
    }
    if samples.len() < 2 {
        return Err(Error::InsufficientSamples { need: 2, got: samples.len() });
    }
    let mut rng = seeds::rng(seed, Stream::Bootstrap, &[samples.len() as u64]);
    let mut resample = Vec::with_capacity(samples.len());
    let mut stats = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        resample.clear();
        resample.extend((0..samples.len()).map(|_| samples[rng.random_range(0..samples.len())].clone()));
        let s = statistic(&resample);
        if !s.is_finite() {
            return Err(Error::DegenerateBaseline("bootstrap statistic is not finite".into()));
        }
        stats.push(s);
    }
    stats.sort_by(f64::total_cmp);
    Ok((quantile_sorted(&stats, 0.025), quantile_sorted(&stats, 0.975)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSizeResult {
    pub cohens_d: f64,
    pub pearson_r: f64,
    pub n1: usize,
    pub n2: usize,
    pub ci_low: f64,
    pub ci_high: f64,
    pub seed: u64,
}

/// Logit-level comparison of the perturbed arm against a random arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitEquivalence {
    /// `‖l_v − l_v′‖ / ‖l_v − l_rand‖`.
    pub ratio: f64,
    pub token_agree: bool,
    pub topk_overlap: f64,
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bx), (i, &x)| if x > bx { (i, x) } else { (bi, bx) })
        .0
}

/// Indices of the `k` largest entries, ties broken by index.
pub fn top_k(xs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[b].total_cmp(&xs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Top-`k` overlap uses `k = min(10, V)`.
pub fn logit_equivalence(l_v: &[f64], l_vperp: &[f64], l_rand: &[f64]) -> Result<LogitEquivalence> {
    let n = l_v.len();
    if l_vperp.len() != n || l_rand.len() != n {
        return Err(Error::dim("logit vectors", n, l_vperp.len().max(l_rand.len())));
    }
    if n == 0 {
        return Err(Error::Empty("logit vectors"));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let denom = dist(l_v, l_rand);
    if !(denom > 0.0) {
        return Err(Error::DegenerateBaseline("random-arm logits identical to v-arm logits".into()));
    }
    let k = TOP_K.min(n);
    let a = top_k(l_v, k);
    let b = top_k(l_vperp, k);
    let shared = a.iter().filter(|i| b.contains(i)).count();
    Ok(LogitEquivalence {
        ratio: dist(l_v, l_vperp) / denom,
        token_agree: argmax(l_v) == argmax(l_vperp),
        topk_overlap: shared as f64 / k as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiagnostics<T: Real> {
    /// `JᵀJ / σ²`.
    pub fisher: DMatrix<T>,
    /// `uᵀ(JᵀJ)u = ‖Ju‖²` for each null-basis column.
    pub null_quadratic_forms: Vec<T>,
    /// Cramér-Rao variances `σ²/σᵢ²` along row directions, from the
    /// eigenvalues of the Fisher matrix.
    pub crb_pseudoinverse_spectrum: Vec<T>,
    pub degenerate_directions: usize,
}

pub fn fisher_diagnostics<T: Real>(analysis: &JacobianAnalysis<T>, sigma: T) -> Result<FisherDiagnostics<T>> {
    if !(sigma > T::zero()) {
        return Err(Error::InvalidArgument("noise sigma must be positive".into()));
    }
    let j = &analysis.jacobian;
    let gram = j.transpose() * j;
    let fisher = &gram / (sigma * sigma);
    let null_quadratic_forms = analysis
        .null_basis
        .column_iter()
        // ‖Ju‖² avoids the roundoff floor of the formed Gram matrix
        .map(|u| (j * u).norm_squared())
        .collect();
    // symmetrize before the eigensolve to shed roundoff asymmetry
    let sym = (&fisher + fisher.transpose()) * T::lit(0.5);
    let mut eigen: Vec<T> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    eigen.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
    let crb_pseudoinverse_spectrum = eigen[..analysis.rank].iter().map(|&l| T::one() / l).collect();
    Ok(FisherDiagnostics {
        fisher,
        null_quadratic_forms,
        crb_pseudoinverse_spectrum,
        degenerate_directions: analysis.null_dim(),
    })
}
