//! Clustering quality: agreement with ground truth (ARI), compactness (WSS)
//! and the Gap statistic for choosing the number of clusters.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clusterkit::{kmeans_cluster, row_distances, ward_linkage, Clustering, FeatureMatrix, KMeansOptions, Metric};
use crate::io::fmt_f64;
use crate::seed;
use crate::similarity::{reference_measure, ContingencyTable, ReferenceKind, SimilarityMatrix};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("the two labelings share no items")]
    DisjointItems,
    #[error("K.max = {k_max} must lie in [1, {n}]")]
    KMaxOutOfRange { k_max: usize, n: usize },
    #[error("the Gap statistic needs at least 2 reference sets, got {0}")]
    TooFewReferences(usize),
    #[error("every feature has a constant range; no reference distribution can be drawn")]
    DegenerateRange,
    #[error(transparent)]
    Cluster(#[from] crate::clusterkit::ClusterError),
}

/// Counts over all unordered item pairs of whether two labelings put the pair
/// together (`same`) or apart (`diff`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairContingency {
    /// same in both
    pub a: u64,
    /// same in the first, different in the second
    pub b: u64,
    /// different in the first, same in the second
    pub c: u64,
    /// different in both
    pub d: u64,
}

impl PairContingency {
    pub fn n_pairs(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    /// Cohen's Kappa of the pair table. Equal to the Adjusted Rand Index.
    pub fn kappa(&self) -> f64 {
        let t = ContingencyTable::new(self.a, self.b, self.c, self.d);
        // A zero denominator forces b = c = 0: the labelings agree on every pair.
        reference_measure(&t, ReferenceKind::Kappa).unwrap_or(1.0)
    }
}

fn choose2(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Pair contingency of two labelings of the same items.
pub fn pair_contingency<A: Eq + Hash, B: Eq + Hash>(x: &[A], y: &[B]) -> PairContingency {
    assert_eq!(x.len(), y.len());
    let mut joint: HashMap<(&A, &B), u64> = HashMap::new();
    let mut rows: HashMap<&A, u64> = HashMap::new();
    let mut cols: HashMap<&B, u64> = HashMap::new();
    for (a, b) in x.iter().zip(y) {
        *joint.entry((a, b)).or_default() += 1;
        *rows.entry(a).or_default() += 1;
        *cols.entry(b).or_default() += 1;
    }
    let same_both: u64 = joint.values().map(|&v| choose2(v)).sum();
    let same_x: u64 = rows.values().map(|&v| choose2(v)).sum();
    let same_y: u64 = cols.values().map(|&v| choose2(v)).sum();
    let total = choose2(x.len() as u64);
    PairContingency {
        a: same_both,
        b: same_x - same_both,
        c: same_y - same_both,
        d: total + same_both - same_x - same_y,
    }
}

/// Adjusted Rand Index between two labelings given as parallel slices.
pub fn ari_labels<A: Eq + Hash, B: Eq + Hash>(x: &[A], y: &[B]) -> f64 {
    pair_contingency(x, y).kappa()
}

/// ARI of a clustering against ground-truth labels. Items without a truth
/// label are left out.
pub fn ari(truth: &BTreeMap<String, String>, c: &Clustering) -> Result<f64, EvalError> {
    ari_assignment(truth, &c.items, &c.assignment)
}

pub fn ari_assignment(truth: &BTreeMap<String, String>, items: &[String], assignment: &[usize]) -> Result<f64, EvalError> {
    let (t, p): (Vec<&String>, Vec<usize>) = items
        .iter()
        .zip(assignment)
        .filter_map(|(id, &c)| truth.get(id).map(|l| (l, c)))
        .unzip();
    if t.is_empty() {
        return Err(EvalError::DisjointItems);
    }
    Ok(ari_labels(&t, &p))
}

/// Within-cluster sum of squares: for each cluster, the sum of squared
/// distances over ordered member pairs divided by twice the cluster size.
pub fn wss(d: &crate::clusterkit::DistanceMatrix, labels: &[usize]) -> f64 {
    let n = d.n();
    assert_eq!(labels.len(), n);
    let mut sizes: HashMap<usize, usize> = HashMap::new();
    for &l in labels {
        *sizes.entry(l).or_default() += 1;
    }
    let mut per_cluster: HashMap<usize, f64> = HashMap::new();
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] == labels[j] {
                let v = d.get(i, j);
                *per_cluster.entry(labels[i]).or_default() += v * v;
            }
        }
    }
    // Unordered pairs counted once, so the 1/2 cancels against the ordered sum.
    let mut keys: Vec<usize> = per_cluster.keys().copied().collect();
    keys.sort_unstable();
    keys.iter().map(|l| per_cluster[l] / sizes[l] as f64).sum()
}

/// Clustering used inside the Gap statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum GapAlgorithm {
    Ward { metric: Metric },
    Kmeans { restarts: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapOptions {
    pub k_max: usize,
    pub references: usize,
    pub seed: u64,
    pub algorithm: GapAlgorithm,
}

impl GapOptions {
    pub fn new(k_max: usize, references: usize, seed: u64) -> Self {
        GapOptions {
            k_max,
            references,
            seed,
            algorithm: GapAlgorithm::Ward { metric: Metric::Pearson },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub k: usize,
    pub log_w: f64,
    pub expected_log_w: f64,
    pub gap: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapProfile {
    pub references: usize,
    pub rows: Vec<GapRow>,
}

impl GapProfile {
    pub fn gap(&self, k: usize) -> f64 {
        self.rows[k - 1].gap
    }

    pub fn se(&self, k: usize) -> f64 {
        self.rows[k - 1].se
    }

    pub fn k_max(&self) -> usize {
        self.rows.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,logW,ElogW,gap,se\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.k,
                fmt_f64(r.log_w),
                fmt_f64(r.expected_log_w),
                fmt_f64(r.gap),
                fmt_f64(r.se)
            ));
        }
        out
    }
}

fn safe_ln(w: f64) -> f64 {
    w.max(f64::MIN_POSITIVE).ln()
}

/// `log W_k` for k = 1..=k_max on one square matrix of (possibly undefined)
/// similarity rows.
fn log_wk_curve(rows: &[Vec<Option<f64>>], items: &[String], opts: &GapOptions, stream: u64) -> Result<Vec<f64>, EvalError> {
    match opts.algorithm {
        GapAlgorithm::Ward { metric } => {
            let d = row_distances(items.to_vec(), rows, metric);
            let tree = ward_linkage(&d);
            (1..=opts.k_max)
                .map(|k| Ok(safe_ln(wss(&d, &tree.cut(k)?))))
                .collect()
        }
        GapAlgorithm::Kmeans { restarts } => {
            let n = rows.len();
            let data: Vec<f64> = rows
                .iter()
                .enumerate()
                .flat_map(|(i, r)| r.iter().enumerate().map(move |(j, v)| if i == j { 1.0 } else { v.unwrap_or(0.0) }))
                .collect();
            let x = FeatureMatrix::new(n, n, data);
            (1..=opts.k_max)
                .map(|k| {
                    let km = KMeansOptions::new(restarts, seed::derive(opts.seed, &[stream, k as u64]));
                    let c = kmeans_cluster(items.to_vec(), &x, k, &km)?;
                    let best = c.restarts.iter().map(|r| r.wss).fold(f64::INFINITY, f64::min);
                    Ok(safe_ln(best))
                })
                .collect()
        }
    }
}

/// Gap statistic on the rows of M1 against `references` uniform reference
/// matrices, each entry drawn uniformly over its column's observed range.
pub fn gap_statistic(m1: &SimilarityMatrix, opts: &GapOptions) -> Result<GapProfile, EvalError> {
    let n = m1.n();
    if opts.k_max == 0 || opts.k_max > n {
        return Err(EvalError::KMaxOutOfRange { k_max: opts.k_max, n });
    }
    if opts.references < 2 {
        return Err(EvalError::TooFewReferences(opts.references));
    }
    let rows: Vec<Vec<Option<f64>>> = (0..n).map(|i| m1.row(i).to_vec()).collect();
    let ranges: Vec<(f64, f64)> = (0..n)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r[c])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        })
        .collect();
    if ranges.iter().all(|(lo, hi)| hi.partial_cmp(lo) != Some(std::cmp::Ordering::Greater)) {
        return Err(EvalError::DegenerateRange);
    }

    let real = log_wk_curve(&rows, &m1.items, opts, u64::MAX)?;
    let refs: Vec<Vec<f64>> = (0..opts.references)
        .into_par_iter()
        .map(|b| {
            let mut rng = seed::rng(opts.seed, &[b as u64]);
            let sample: Vec<Vec<Option<f64>>> = (0..n)
                .map(|_| {
                    ranges
                        .iter()
                        .map(|&(lo, hi)| Some(if hi > lo { rng.gen_range(lo..hi) } else if lo.is_finite() { lo } else { 0.0 }))
                        .collect()
                })
                .collect();
            log_wk_curve(&sample, &m1.items, opts, b as u64)
        })
        .collect::<Result<_, _>>()?;

    let bf = opts.references as f64;
    let rows = (0..opts.k_max)
        .map(|k| {
            let vals: Vec<f64> = refs.iter().map(|r| r[k]).collect();
            let mean = vals.iter().sum::<f64>() / bf;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (bf - 1.0);
            GapRow {
                k: k + 1,
                log_w: real[k],
                expected_log_w: mean,
                gap: mean - real[k],
                se: var.sqrt() * (1.0 + 1.0 / bf).sqrt(),
            }
        })
        .collect();
    Ok(GapProfile {
        references: opts.references,
        rows,
    })
}

/// Convenience wrapper for the default Ward + Pearson configuration.
pub fn gap_statistic_ward(m1: &SimilarityMatrix, metric: Metric, k_max: usize, references: usize, seed: u64) -> Result<GapProfile, EvalError> {
    let mut opts = GapOptions::new(k_max, references, seed);
    opts.algorithm = GapAlgorithm::Ward { metric };
    gap_statistic(m1, &opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapRule {
    FirstMax,
    FirstSeMax,
}

impl GapRule {
    pub const ALL: [GapRule; 2] = [GapRule::FirstMax, GapRule::FirstSeMax];

    pub fn name(self) -> &'static str {
        match self {
            GapRule::FirstMax => "first_max",
            GapRule::FirstSeMax => "first_se_max",
        }
    }
}

impl fmt::Display for GapRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GapRule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "first_max" | "firstMax" => Ok(GapRule::FirstMax),
            "first_se_max" | "firstSEmax" | "firstSEMax" => Ok(GapRule::FirstSeMax),
            other => Err(format!("unknown gap rule `{other}`")),
        }
    }
}

/// `first_max`: the first k whose gap is not exceeded by k + 1 (K.max if the
/// curve keeps rising). `first_se_max`: the smallest k up to that point whose
/// gap is within one standard error of it.
pub fn select_k(profile: &GapProfile, rule: GapRule) -> usize {
    let k_max = profile.k_max();
    if k_max == 0 {
        return 1;
    }
    let first_max = (1..k_max).find(|&k| profile.gap(k) >= profile.gap(k + 1)).unwrap_or(k_max);
    match rule {
        GapRule::FirstMax => first_max,
        GapRule::FirstSeMax => {
            let bar = profile.gap(first_max) - profile.se(first_max);
            (1..=first_max).find(|&k| profile.gap(k) >= bar).unwrap_or(first_max)
        }
    }
}
