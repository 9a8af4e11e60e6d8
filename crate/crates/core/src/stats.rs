//! Descriptive statistics and the one-sided paired t-test used in reports.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than 2 values.
pub fn sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Option<Summary> {
        if xs.is_empty() {
            return None;
        }
        let mut s = xs.to_vec();
        s.sort_by(f64::total_cmp);
        Some(Summary {
            n: xs.len(),
            mean: mean(xs),
            sd: sd(xs),
            min: s[0],
            q25: quantile(&s, 0.25),
            median: quantile(&s, 0.5),
            q75: quantile(&s, 0.75),
            max: s[s.len() - 1],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub mean_diff: f64,
    pub t: f64,
    pub df: f64,
    /// P(T ≥ t) under the null of no difference.
    pub p_greater: f64,
}

/// One-sided paired t-test of `mean(x − y) > 0`.
pub fn paired_t_greater(x: &[f64], y: &[f64]) -> Option<TTest> {
    assert_eq!(x.len(), y.len());
    if x.len() < 2 {
        return None;
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let m = mean(&diffs);
    let s = sd(&diffs);
    let df = (diffs.len() - 1) as f64;
    let (t, p) = if s == 0.0 {
        let t = if m > 0.0 { f64::INFINITY } else if m < 0.0 { f64::NEG_INFINITY } else { 0.0 };
        (t, if m > 0.0 { 0.0 } else if m < 0.0 { 1.0 } else { 0.5 })
    } else {
        let t = m / (s / (diffs.len() as f64).sqrt());
        let dist = StudentsT::new(0.0, 1.0, df).ok()?;
        (t, 1.0 - dist.cdf(t))
    };
    Some(TTest { mean_diff: m, t, df, p_greater: p })
}

/// Equal-width histogram over `[lo, hi]` as `(bin_lo, bin_hi, count)`.
pub fn histogram(xs: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<(f64, f64, usize)> {
    let w = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &x in xs {
        let b = (((x - lo) / w).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, c)| (lo + b as f64 * w, lo + (b + 1) as f64 * w, c))
        .collect()
}
