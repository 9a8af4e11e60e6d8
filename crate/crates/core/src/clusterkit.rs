//! Item-based distances (M2) and the two clustering algorithms.
//!
//! Row `i` of the similarity matrix describes item `i` by its similarity to
//! every other item. Two items are close when their rows look alike, i.e. when
//! they relate to third items in the same way.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{csv_reader, fmt_f64};
use crate::seed;
use crate::similarity::SimilarityMatrix;

/// Rows sharing fewer defined coordinates than this get the fallback distance.
pub const MIN_OVERLAP: usize = 3;
pub const DEFAULT_RESTARTS: usize = 100;
pub const MAX_ITERATIONS: usize = 300;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("k = {k} is outside [1, {n}]")]
    KOutOfRange { k: usize, n: usize },
    #[error("matrix file line {line}: {message}")]
    Parse { line: u64, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `1 − r` with `r` the Pearson correlation of the paired coordinates.
    Pearson,
    /// Root mean squared coordinate difference.
    Euclidean,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Pearson => "pearson",
            Metric::Euclidean => "euclidean",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pearson" | "pearson_distance" => Ok(Metric::Pearson),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(format!("unknown distance metric `{other}`")),
        }
    }
}

/// Symmetric non-negative distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub items: Vec<String>,
    pub metric: Metric,
    values: Vec<f64>,
    /// Pairs that fell back to the median distance.
    pub fallback_pairs: usize,
}

impl DistanceMatrix {
    pub fn from_values(items: Vec<String>, metric: Metric, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), items.len() * items.len());
        DistanceMatrix {
            items,
            metric,
            values,
            fallback_pairs: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.items.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n() + j]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("item_id");
        for id in &self.items {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (i, id) in self.items.iter().enumerate() {
            out.push_str(id);
            for j in 0..self.n() {
                out.push(',');
                out.push_str(&fmt_f64(self.get(i, j)));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, metric: Metric) -> Result<Self, ClusterError> {
        let perr = |line: u64, message: String| ClusterError::Parse { line, message };
        let mut rdr = csv_reader(text.as_bytes());
        let headers = rdr.headers().map_err(|e| perr(0, e.to_string()))?.clone();
        let items: Vec<String> = headers.iter().skip(1).map(String::from).collect();
        let mut values = Vec::with_capacity(items.len() * items.len());
        let mut rows = 0;
        for row in rdr.records() {
            let row = row.map_err(|e| perr(e.position().map(|p| p.line()).unwrap_or(0), e.to_string()))?;
            let line = row.position().map(|p| p.line()).unwrap_or(0);
            if rows >= items.len() || row[0] != items[rows] {
                return Err(perr(line, format!("row `{}` does not match header order", &row[0])));
            }
            for cell in row.iter().skip(1) {
                values.push(cell.parse().map_err(|_| perr(line, format!("invalid number `{cell}`")))?);
            }
            rows += 1;
        }
        if rows != items.len() {
            return Err(perr(0, format!("expected {} rows, found {rows}", items.len())));
        }
        Ok(DistanceMatrix::from_values(items, metric, values))
    }
}

/// Distance between two rows over their pairwise-complete coordinates, or
/// `None` when fewer than [`MIN_OVERLAP`] coordinates (or no variance) remain.
fn row_distance(
    x: &[Option<f64>],
    y: &[Option<f64>],
    skip: (usize, usize),
    metric: Metric,
) -> Option<f64> {
    let pairs = x
        .iter()
        .zip(y)
        .enumerate()
        .filter(|(c, _)| *c != skip.0 && *c != skip.1)
        .filter_map(|(_, (a, b))| Some(((*a)?, (*b)?)));
    match metric {
        Metric::Euclidean => {
            let (mut n, mut ss) = (0usize, 0.0);
            for (a, b) in pairs {
                n += 1;
                ss += (a - b) * (a - b);
            }
            (n >= MIN_OVERLAP).then(|| (ss / n as f64).sqrt())
        }
        Metric::Pearson => {
            let pts: Vec<(f64, f64)> = pairs.collect();
            if pts.len() < MIN_OVERLAP {
                return None;
            }
            let n = pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
            let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
            for (a, b) in &pts {
                sxy += (a - mx) * (b - my);
                sxx += (a - mx) * (a - mx);
                syy += (b - my) * (b - my);
            }
            if sxx <= 0.0 || syy <= 0.0 {
                return None;
            }
            let r = sxy / (sxx * syy).sqrt();
            Some((1.0 - r).clamp(0.0, 2.0))
        }
    }
}

/// Pairwise distances between the rows of a square matrix with optional
/// entries. Coordinates `i` and `j` are left out when comparing rows `i` and
/// `j`.
pub fn row_distances(items: Vec<String>, rows: &[Vec<Option<f64>>], metric: Metric) -> DistanceMatrix {
    let n = rows.len();
    let upper: Vec<Vec<Option<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| row_distance(&rows[i], &rows[j], (i, j), metric))
                .collect()
        })
        .collect();

    let mut defined: Vec<f64> = upper.iter().flatten().flatten().copied().collect();
    let missing = upper.iter().flatten().filter(|v| v.is_none()).count();
    let fallback = if defined.is_empty() {
        match metric {
            Metric::Pearson => 1.0,
            Metric::Euclidean => 0.0,
        }
    } else {
        defined.sort_by(f64::total_cmp);
        let m = defined.len();
        if m % 2 == 1 {
            defined[m / 2]
        } else {
            0.5 * (defined[m / 2 - 1] + defined[m / 2])
        }
    };
    if missing > 0 {
        log::warn!("{missing} item pairs share fewer than {MIN_OVERLAP} usable coordinates; using median distance {fallback:.4}");
    }

    let mut values = vec![0.0; n * n];
    for (i, row) in upper.iter().enumerate() {
        for (off, v) in row.iter().enumerate() {
            let j = i + 1 + off;
            let d = v.unwrap_or(fallback);
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
    }
    DistanceMatrix {
        items,
        metric,
        values,
        fallback_pairs: missing,
    }
}

/// Item-based distance matrix M2 from the rows of M1.
pub fn item_distance(m1: &SimilarityMatrix, metric: Metric) -> DistanceMatrix {
    let rows: Vec<Vec<Option<f64>>> = (0..m1.n()).map(|i| m1.row(i).to_vec()).collect();
    row_distances(m1.items.clone(), &rows, metric)
}

/// Dense row-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(n_rows: usize, n_cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n_rows * n_cols);
        FeatureMatrix { n_rows, n_cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n_cols = rows.first().map_or(0, Vec::len);
        FeatureMatrix::new(rows.len(), n_cols, rows.concat())
    }

    /// M1 rows with the diagonal set to 1 and undefined entries set to 0.
    pub fn from_similarity(m1: &SimilarityMatrix) -> Self {
        let n = m1.n();
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(if i == j { 1.0 } else { m1.get(i, j).unwrap_or(0.0) });
            }
        }
        FeatureMatrix::new(n, n, data)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ward,
    Kmeans,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ward => "ward",
            Method::Kmeans => "kmeans",
        })
    }
}

/// One K-means restart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartRun {
    pub restart: usize,
    pub assignment: Vec<usize>,
    pub wss: f64,
    pub iterations: usize,
    /// Times an emptied cluster had to be reseeded.
    pub reseeds: usize,
}

/// Hard assignment of items to `k` clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub items: Vec<String>,
    pub assignment: Vec<usize>,
    pub k: usize,
    pub method: Method,
    /// Every K-means restart, in restart order. Empty for Ward.
    pub restarts: Vec<RestartRun>,
}

impl Clustering {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("item_id,cluster\n");
        for (id, c) in self.items.iter().zip(&self.assignment) {
            out.push_str(&format!("{id},{c}\n"));
        }
        out
    }

    pub fn from_csv(text: &str, method: Method) -> Result<Self, ClusterError> {
        let perr = |line: u64, message: String| ClusterError::Parse { line, message };
        let mut rdr = csv_reader(text.as_bytes());
        let mut items = Vec::new();
        let mut assignment = Vec::new();
        for row in rdr.records() {
            let row = row.map_err(|e| perr(e.position().map(|p| p.line()).unwrap_or(0), e.to_string()))?;
            let line = row.position().map(|p| p.line()).unwrap_or(0);
            let c: usize = row[1].parse().map_err(|_| perr(line, format!("invalid cluster `{}`", &row[1])))?;
            items.push(row[0].to_string());
            assignment.push(c);
        }
        let k = assignment.iter().max().map_or(0, |m| m + 1);
        Ok(Clustering {
            items,
            assignment,
            k,
            method,
            restarts: Vec::new(),
        })
    }
}

/// Renumbers labels densely in order of first appearance.
pub fn relabel(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

/// One agglomeration step. Ids below `n` are items; `n + s` is the cluster
/// formed at step `s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub n: usize,
    pub merges: Vec<Merge>,
    #[serde(skip)]
    slots: Vec<(usize, usize)>,
}

impl Dendrogram {
    /// Flat labels after undoing all but the first `n − k` merges.
    pub fn cut(&self, k: usize) -> Result<Vec<usize>, ClusterError> {
        if k == 0 || k > self.n.max(1) {
            return Err(ClusterError::KOutOfRange { k, n: self.n });
        }
        let mut labels: Vec<usize> = (0..self.n).collect();
        for &(keep, gone) in self.slots.iter().take(self.n - k) {
            for l in labels.iter_mut() {
                if *l == gone {
                    *l = keep;
                }
            }
        }
        Ok(relabel(&labels))
    }
}

/// Ward linkage via Lance–Williams updates on squared distances; merge heights
/// are reported on the original (square-rooted) scale. Ties go to the lowest
/// pair of cluster slots.
pub fn ward_linkage(d: &DistanceMatrix) -> Dendrogram {
    let n = d.n();
    let mut d2: Vec<f64> = (0..n * n).map(|x| d.values[x] * d.values[x]).collect();
    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut id: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    let mut slots = Vec::with_capacity(n.saturating_sub(1));

    for step in 0..n.saturating_sub(1) {
        let mut best = (usize::MAX, usize::MAX, f64::INFINITY);
        for i in (0..n).filter(|&i| active[i]) {
            for j in (i + 1..n).filter(|&j| active[j]) {
                let v = d2[i * n + j];
                if v < best.2 {
                    best = (i, j, v);
                }
            }
        }
        let (i, j, dij) = best;
        let (si, sj) = (size[i] as f64, size[j] as f64);
        for k in (0..n).filter(|&k| active[k] && k != i && k != j) {
            let sk = size[k] as f64;
            let v = ((si + sk) * d2[i * n + k] + (sj + sk) * d2[j * n + k] - sk * dij) / (si + sj + sk);
            d2[i * n + k] = v;
            d2[k * n + i] = v;
        }
        active[j] = false;
        size[i] += size[j];
        merges.push(Merge {
            left: id[i].min(id[j]),
            right: id[i].max(id[j]),
            height: dij.max(0.0).sqrt(),
            size: size[i],
        });
        slots.push((i, j));
        id[i] = n + step;
    }
    Dendrogram { n, merges, slots }
}

pub fn ward_cluster(d: &DistanceMatrix, k: usize) -> Result<Clustering, ClusterError> {
    let n = d.n();
    if k == 0 || k > n {
        return Err(ClusterError::KOutOfRange { k, n });
    }
    let assignment = ward_linkage(d).cut(k)?;
    Ok(Clustering {
        items: d.items.clone(),
        assignment,
        k,
        method: Method::Ward,
        restarts: Vec::new(),
    })
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Trace of a single Lloyd run.
#[derive(Debug, Clone, PartialEq)]
pub struct LloydRun {
    pub assignment: Vec<usize>,
    /// Objective after every update step.
    pub wss_trace: Vec<f64>,
    pub reseeds: usize,
}

/// Lloyd's algorithm from `k` distinct randomly chosen rows. Stops when the
/// assignment no longer changes or after `max_iter` iterations.
pub fn lloyd<R: Rng>(x: &FeatureMatrix, k: usize, max_iter: usize, rng: &mut R) -> LloydRun {
    let (n, p) = (x.n_rows, x.n_cols);
    let mut centers: Vec<f64> = sample(rng, n, k).into_iter().flat_map(|r| x.row(r).to_vec()).collect();
    let center = |c: &Vec<f64>, j: usize| c[j * p..(j + 1) * p].to_vec();
    let mut assignment = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut reseeds = 0;

    for _ in 0..max_iter {
        let mut next = vec![0usize; n];
        let mut dist = vec![0.0; n];
        for i in 0..n {
            let row = x.row(i);
            let (mut bj, mut bd) = (0, f64::INFINITY);
            for j in 0..k {
                let dd = sq_dist(row, &centers[j * p..(j + 1) * p]);
                if dd < bd {
                    bj = j;
                    bd = dd;
                }
            }
            next[i] = bj;
            dist[i] = bd;
        }
        let mut counts = vec![0usize; k];
        for &c in &next {
            counts[c] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            // Reseed at the point farthest from its own center.
            let far = (0..n)
                .filter(|&i| counts[next[i]] > 1)
                .fold(None::<usize>, |acc, i| match acc {
                    Some(a) if dist[a] >= dist[i] => Some(a),
                    _ => Some(i),
                });
            if let Some(i) = far {
                counts[next[i]] -= 1;
                next[i] = j;
                counts[j] = 1;
                dist[i] = 0.0;
                reseeds += 1;
            }
        }
        if next == assignment {
            break;
        }
        assignment = next;

        centers.iter_mut().for_each(|v| *v = 0.0);
        for (i, &c) in assignment.iter().enumerate() {
            for (cv, xv) in centers[c * p..(c + 1) * p].iter_mut().zip(x.row(i)) {
                *cv += xv;
            }
        }
        for j in 0..k {
            let m = counts[j].max(1) as f64;
            centers[j * p..(j + 1) * p].iter_mut().for_each(|v| *v /= m);
        }
        let wss = (0..n)
            .map(|i| sq_dist(x.row(i), &center(&centers, assignment[i])))
            .sum();
        trace.push(wss);
    }
    LloydRun {
        assignment,
        wss_trace: trace,
        reseeds,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl KMeansOptions {
    pub fn new(restarts: usize, seed: u64) -> Self {
        KMeansOptions {
            restarts,
            max_iter: MAX_ITERATIONS,
            seed,
        }
    }
}

/// K-means with independent seeded restarts. The reported assignment is the
/// restart with the lowest within-cluster sum of squares; every restart is
/// kept in [`Clustering::restarts`].
pub fn kmeans_cluster(
    items: Vec<String>,
    x: &FeatureMatrix,
    k: usize,
    opts: &KMeansOptions,
) -> Result<Clustering, ClusterError> {
    let n = x.n_rows;
    if k == 0 || k > n {
        return Err(ClusterError::KOutOfRange { k, n });
    }
    let runs: Vec<RestartRun> = (0..opts.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::rng(opts.seed, &[r as u64]);
            let run = lloyd(x, k, opts.max_iter, &mut rng);
            RestartRun {
                restart: r,
                wss: run.wss_trace.last().copied().unwrap_or(0.0),
                iterations: run.wss_trace.len(),
                reseeds: run.reseeds,
                assignment: run.assignment,
            }
        })
        .collect();
    let best = runs
        .iter()
        .min_by(|a, b| a.wss.total_cmp(&b.wss).then(a.restart.cmp(&b.restart)))
        .expect("at least one restart");
    Ok(Clustering {
        items,
        assignment: best.assignment.clone(),
        k,
        method: Method::Kmeans,
        restarts: runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("q{i}")).collect()
    }

    fn euclid_points(pts: &[(f64, f64)]) -> DistanceMatrix {
        let n = pts.len();
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                v[i * n + j] = ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
            }
        }
        DistanceMatrix::from_values(ids(n), Metric::Euclidean, v)
    }

    fn sim(n: usize, vals: &[f64]) -> SimilarityMatrix {
        SimilarityMatrix::from_values(ids(n), crate::Measure::KappaLearning, vals.iter().map(|&v| Some(v)).collect(), vec![0; n * n])
    }

    #[test]
    fn identical_rows_have_zero_distance() {
        // Rows 0 and 1 agree on coordinates 2..5.
        #[rustfmt::skip]
        let m = sim(5, &[
            1.0, 0.3, 0.2, 0.5, 0.9,
            0.3, 1.0, 0.2, 0.5, 0.9,
            0.2, 0.2, 1.0, 0.1, 0.4,
            0.5, 0.5, 0.1, 1.0, 0.6,
            0.9, 0.9, 0.4, 0.6, 1.0,
        ]);
        assert_relative_eq!(item_distance(&m, Metric::Pearson).get(0, 1), 0.0, epsilon = 1e-12);
        assert_relative_eq!(item_distance(&m, Metric::Euclidean).get(0, 1), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn anti_correlated_rows() {
        #[rustfmt::skip]
        let m = sim(5, &[
            1.0, 0.0, 0.1, 0.2, 0.3,
            0.0, 1.0, 0.3, 0.2, 0.1,
            0.1, 0.3, 1.0, 0.0, 0.0,
            0.2, 0.2, 0.0, 1.0, 0.0,
            0.3, 0.1, 0.0, 0.0, 1.0,
        ]);
        assert_relative_eq!(item_distance(&m, Metric::Pearson).get(0, 1), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn hand_computed_fixture() {
        #[rustfmt::skip]
        let m = sim(5, &[
            1.0, 0.5, 0.2, 0.4, 0.9,
            0.5, 1.0, 0.1, 0.5, 0.6,
            0.2, 0.1, 1.0, 0.0, 0.0,
            0.4, 0.5, 0.0, 1.0, 0.0,
            0.9, 0.6, 0.0, 0.0, 1.0,
        ]);
        // Rows 0 and 1 on coordinates {2,3,4}: x = (0.2,0.4,0.9), y = (0.1,0.5,0.6).
        // mx = 0.5, my = 0.4; dx = (-0.3,-0.1,0.4), dy = (-0.3,0.1,0.2)
        // sxy = 0.09 - 0.01 + 0.08 = 0.16; sxx = 0.26; syy = 0.14
        let r = 0.16 / (0.26f64 * 0.14).sqrt();
        let d = item_distance(&m, Metric::Pearson);
        assert_relative_eq!(d.get(0, 1), 1.0 - r, epsilon = 1e-12);
        assert_relative_eq!(d.get(1, 0), 1.0 - r, epsilon = 1e-12);
        // Squared differences 0.01 + 0.01 + 0.09 over 3 coordinates.
        let e = item_distance(&m, Metric::Euclidean);
        assert_relative_eq!(e.get(0, 1), (0.11f64 / 3.0).sqrt(), epsilon = 1e-12);
        assert_eq!(d.fallback_pairs, 0);
    }

    #[test]
    fn sparse_rows_use_median_fallback() {
        let n = 5;
        let mut vals: Vec<Option<f64>> = vec![Some(0.5); n * n];
        for i in 0..n {
            vals[i * n + i] = Some(1.0);
        }
        // Item 4 only overlaps on two coordinates with anyone.
        for j in [0, 1] {
            vals[4 * n + j] = None;
            vals[j * n + 4] = None;
        }
        vals[2 * n + 3] = Some(0.1);
        vals[3 * n + 2] = Some(0.1);
        let m = SimilarityMatrix::from_values(ids(n), crate::Measure::Kappa, vals, vec![0; n * n]);
        let d = item_distance(&m, Metric::Euclidean);
        assert!(d.fallback_pairs > 0);
        for i in 0..n {
            assert_eq!(d.get(i, i), 0.0);
            for j in 0..n {
                assert!(d.get(i, j).is_finite());
                assert_eq!(d.get(i, j), d.get(j, i));
            }
        }
    }

    #[test]
    fn ward_degenerate_cuts() {
        let d = euclid_points(&[(0.0, 0.0), (1.0, 0.0), (5.0, 1.0), (2.0, 7.0), (3.0, 3.0)]);
        let all = ward_cluster(&d, 5).unwrap();
        assert_eq!(all.assignment, vec![0, 1, 2, 3, 4]);
        let one = ward_cluster(&d, 1).unwrap();
        assert!(one.assignment.iter().all(|&c| c == 0));
        assert!(matches!(ward_cluster(&d, 0), Err(ClusterError::KOutOfRange { .. })));
        assert!(matches!(ward_cluster(&d, 6), Err(ClusterError::KOutOfRange { .. })));
    }

    /// Within-cluster sum of squared deviations from centroids.
    fn sse(pts: &[(f64, f64)], labels: &[usize]) -> f64 {
        let mut total = 0.0;
        for c in 0..=*labels.iter().max().unwrap() {
            let members: Vec<_> = pts.iter().zip(labels).filter(|(_, &l)| l == c).map(|(p, _)| *p).collect();
            if members.is_empty() {
                continue;
            }
            let m = members.len() as f64;
            let cx = members.iter().map(|p| p.0).sum::<f64>() / m;
            let cy = members.iter().map(|p| p.1).sum::<f64>() / m;
            total += members.iter().map(|p| (p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sum::<f64>();
        }
        total
    }

    fn brute_best_partition(pts: &[(f64, f64)], k: usize) -> Vec<usize> {
        let n = pts.len();
        let mut best = (f64::INFINITY, vec![]);
        for code in 0..k.pow(n as u32) {
            let labels: Vec<usize> = (0..n).map(|i| (code / k.pow(i as u32)) % k).collect();
            if (0..k).any(|c| !labels.contains(&c)) {
                continue;
            }
            let s = sse(pts, &labels);
            if s < best.0 {
                best = (s, labels);
            }
        }
        relabel(&best.1)
    }

    #[test]
    fn ward_recovers_two_pairs() {
        let pts = [(0.0, 0.0), (10.0, 10.0), (0.5, 0.2), (10.3, 9.6)];
        let expected = brute_best_partition(&pts, 2);
        assert_eq!(expected, vec![0, 1, 0, 1]);
        let c = ward_cluster(&euclid_points(&pts), 2).unwrap();
        assert_eq!(c.assignment, expected);
    }

    #[test]
    fn kmeans_recovers_two_groups_every_restart() {
        let pts = [(0.0, 0.0), (0.4, 0.1), (0.2, 0.5), (8.0, 8.0), (8.3, 7.9), (7.8, 8.4)];
        let expected = brute_best_partition(&pts, 2);
        let rows: Vec<Vec<f64>> = pts.iter().map(|p| vec![p.0, p.1]).collect();
        let x = FeatureMatrix::from_rows(&rows);
        for seed in 0..5 {
            let c = kmeans_cluster(ids(6), &x, 2, &KMeansOptions::new(20, seed)).unwrap();
            assert_eq!(c.restarts.len(), 20);
            for r in &c.restarts {
                assert_eq!(relabel(&r.assignment), expected);
            }
        }
    }

    #[test]
    fn kmeans_k_equals_n_has_zero_wss() {
        let rows: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let x = FeatureMatrix::from_rows(&rows);
        let c = kmeans_cluster(ids(7), &x, 7, &KMeansOptions::new(3, 1)).unwrap();
        for r in &c.restarts {
            assert_eq!(r.wss, 0.0);
        }
        assert!(matches!(
            kmeans_cluster(ids(7), &x, 8, &KMeansOptions::new(1, 1)),
            Err(ClusterError::KOutOfRange { .. })
        ));
    }

    #[test]
    fn duplicate_rows_share_a_cluster() {
        let rows = vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![5.0, 1.0], vec![3.0, 3.0], vec![0.0, 4.0]];
        let x = FeatureMatrix::from_rows(&rows);
        for k in 1..=4 {
            let c = kmeans_cluster(ids(5), &x, k, &KMeansOptions::new(10, 3)).unwrap();
            for r in &c.restarts {
                assert_eq!(r.assignment[0], r.assignment[1], "k={k}");
            }
        }
    }

    #[test]
    fn kmeans_is_deterministic() {
        let mut rng = seed::rng(5, &[]);
        let rows: Vec<Vec<f64>> = (0..40).map(|_| (0..6).map(|_| rng.gen::<f64>()).collect()).collect();
        let x = FeatureMatrix::from_rows(&rows);
        let a = kmeans_cluster(ids(40), &x, 5, &KMeansOptions::new(8, 9)).unwrap();
        let b = kmeans_cluster(ids(40), &x, 5, &KMeansOptions::new(8, 9)).unwrap();
        assert_eq!(a, b);
    }

    fn random_points(seed_: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
        let mut rng = seed::rng(seed_, &[]);
        (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect()
    }

    fn euclid_rows(rows: &[Vec<f64>]) -> DistanceMatrix {
        let n = rows.len();
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                v[i * n + j] = sq_dist(&rows[i], &rows[j]).sqrt();
            }
        }
        DistanceMatrix::from_values(ids(n), Metric::Euclidean, v)
    }

    proptest! {
        #[test]
        fn distance_matrix_is_symmetric(seed_ in 0u64..500, n in 3usize..12, holes in 0usize..20) {
            let mut rng = seed::rng(seed_, &[]);
            let mut vals = vec![None; n * n];
            for i in 0..n {
                vals[i * n + i] = Some(1.0);
                for j in i + 1..n {
                    let v = if rng.gen_range(0..20) < holes { None } else { Some(rng.gen_range(-1.0..1.0)) };
                    vals[i * n + j] = v;
                    vals[j * n + i] = v;
                }
            }
            let m = SimilarityMatrix::from_values(ids(n), crate::Measure::Yule, vals, vec![0; n * n]);
            for metric in [Metric::Pearson, Metric::Euclidean] {
                let d = item_distance(&m, metric);
                for i in 0..n {
                    prop_assert_eq!(d.get(i, i), 0.0);
                    for j in 0..n {
                        prop_assert_eq!(d.get(i, j), d.get(j, i));
                        prop_assert!(d.get(i, j) >= 0.0 && d.get(i, j).is_finite());
                    }
                }
            }
        }

        #[test]
        fn ward_heights_are_monotone(seed_ in 0u64..500, n in 2usize..25) {
            let d = euclid_rows(&random_points(seed_, n, 3));
            let tree = ward_linkage(&d);
            prop_assert_eq!(tree.merges.len(), n - 1);
            for w in tree.merges.windows(2) {
                prop_assert!(w[1].height >= w[0].height - 1e-9);
            }
            prop_assert_eq!(tree.merges.last().unwrap().size, n);
        }

        #[test]
        fn lloyd_objective_never_increases(seed_ in 0u64..500, n in 3usize..40, k in 1usize..6) {
            let k = k.min(n);
            let x = FeatureMatrix::from_rows(&random_points(seed_, n, 4));
            let mut rng = seed::rng(seed_, &[1]);
            let run = lloyd(&x, k, MAX_ITERATIONS, &mut rng);
            for w in run.wss_trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9, "{:?}", run.wss_trace);
            }
            let mut used = run.assignment.clone();
            used.sort();
            used.dedup();
            prop_assert_eq!(used.len(), k);
        }

        #[test]
        fn ward_is_permutation_equivariant(seed_ in 0u64..300, n in 2usize..15, k in 1usize..6) {
            let k = k.min(n);
            let pts = random_points(seed_, n, 2);
            let base = ward_cluster(&euclid_rows(&pts), k).unwrap().assignment;
            // Reverse the item order.
            let rev: Vec<Vec<f64>> = pts.iter().rev().cloned().collect();
            let permuted = ward_cluster(&euclid_rows(&rev), k).unwrap().assignment;
            let unpermuted: Vec<usize> = permuted.into_iter().rev().collect();
            prop_assert_eq!(relabel(&unpermuted), relabel(&base));
        }
    }

    #[test]
    fn matrix_csv_round_trip() {
        let d = euclid_points(&[(0.0, 0.0), (1.0, 0.5), (3.0, 2.0)]);
        let back = DistanceMatrix::from_csv(&d.to_csv(), Metric::Euclidean).unwrap();
        assert_eq!(back, d);
        let c = ward_cluster(&d, 2).unwrap();
        let cb = Clustering::from_csv(&c.to_csv(), Method::Ward).unwrap();
        assert_eq!(cb.assignment, c.assignment);
        assert_eq!(cb.items, c.items);
    }
}
