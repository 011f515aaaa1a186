//! Scalar and vector numerics shared by the model and the verifiers.

use alloc::vec::Vec;

use crate::rng::SplitMix64;

/// `e^x` (libm, works without std).
#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

/// Natural log.
#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

/// `ln(1 + e^x)` without overflow on either tail.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

/// Index of the largest element; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    assert!(!xs.is_empty(), "argmax of empty slice");
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Softmax of `logits / temperature`, shifted by the max for stability.
/// Temperature 0 collapses to a one-hot at the argmax (lowest index on ties).
pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Vec<f64> {
    assert!(temperature >= 0.0, "temperature must be non-negative");
    let mut probs = alloc::vec![0.0; logits.len()];
    if temperature == 0.0 {
        probs[argmax(logits)] = 1.0;
        return probs;
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| if x > m { x } else { m });
    let mut sum = 0.0;
    for (p, &l) in probs.iter_mut().zip(logits) {
        *p = exp((l - max) / temperature);
        sum += *p;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    probs
}

/// Gain-free RMS normalization: `x / sqrt(mean(x^2) + eps)`.
pub fn rms_norm(x: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let denom = sqrt(ms + eps);
    x.iter().map(|v| v / denom).collect()
}

/// Draws an index from a probability vector by inverse CDF walk.
/// The vector must sum to ~1; the last positive entry absorbs rounding.
pub fn sample_index(rng: &mut SplitMix64, probs: &[f64]) -> usize {
    let u = rng.next_f64();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Largest relative discrepancy between two equal-length vectors,
/// measured as `|a - b| / max(1, |a|, |b|)`.
pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "max_rel_error length mismatch");
    let mut worst = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let scale = 1.0_f64.max(abs(x)).max(abs(y));
        let err = abs(x - y) / scale;
        if err > worst {
            worst = err;
        }
    }
    worst
}

/// Total variation distance between two distributions over the same support.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    0.5 * p.iter().zip(q).map(|(&a, &b)| abs(a - b)).sum::<f64>()
}
