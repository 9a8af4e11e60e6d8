//! End-to-end runs: responses → M1 → (M2 | features) → clustering → ARI,
//! either on a real dataset with expert labels or on repeated simulations.
//!
//! A run is described by a versioned TOML [`PipelineConfig`]. Everything the
//! run produces is collected in memory as [`Artifacts`] first and written in
//! one go, so the same config and seed always yield the same bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bkt::{generate_dataset, SimConfig};
use crate::clusterkit::{item_distance, kmeans_cluster, ward_linkage, FeatureMatrix, KMeansOptions, Method, Metric};
use crate::dataset::{filter_learners, load_labels, load_responses, Granularity, OrderMode, ResponseDataset};
use crate::evaluation::{ari_assignment, gap_statistic, select_k, wss, GapAlgorithm, GapOptions, GapProfile, GapRule};
use crate::io::{config_hash, fmt_f64, write_with_header};
use crate::seed;
use crate::similarity::{Measure, PairTables, SimilarityMatrix, DEFAULT_MIN_SUPPORT};
use crate::stats::{histogram, mean, paired_t_greater, Summary, TTest};

pub const CONFIG_VERSION: u32 = 1;

const STREAM_REPETITION: u64 = 11;
const STREAM_KMEANS: u64 = 12;
const STREAM_GAP: u64 = 13;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("data error: {0}")]
    Data(String),
    #[error("cannot write output: {0}")]
    Io(#[from] std::io::Error),
}

impl From<crate::dataset::DatasetError> for PipelineError {
    fn from(e: crate::dataset::DatasetError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// A clustering method paired with the representation it consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Combination {
    pub method: Method,
    pub metric: Metric,
}

impl Combination {
    pub const WARD_PEARSON: Combination = Combination {
        method: Method::Ward,
        metric: Metric::Pearson,
    };
    pub const WARD_EUCLIDEAN: Combination = Combination {
        method: Method::Ward,
        metric: Metric::Euclidean,
    };
    pub const KMEANS: Combination = Combination {
        method: Method::Kmeans,
        metric: Metric::Euclidean,
    };
}

impl fmt::Display for Combination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.method, self.metric)
    }
}

impl FromStr for Combination {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ward-pearson" => Ok(Combination::WARD_PEARSON),
            "ward-euclidean" => Ok(Combination::WARD_EUCLIDEAN),
            "kmeans-euclidean" | "kmeans" => Ok(Combination::KMEANS),
            "kmeans-pearson" => Err("K-means runs on similarity rows with Euclidean distance only; \
                                     `kmeans-pearson` is not a valid combination"
                .into()),
            other => Err(format!("unknown clustering `{other}` (ward-pearson, ward-euclidean, kmeans-euclidean)")),
        }
    }
}

impl TryFrom<String> for Combination {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Combination> for String {
    fn from(c: Combination) -> Self {
        c.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataInput {
    pub responses: PathBuf,
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub order_mode: OrderMode,
    #[serde(default = "default_min_items")]
    pub min_items: usize,
    #[serde(default = "default_min_success")]
    pub min_success: f64,
    /// Ground truth used for ARI when the cluster count does not come from a
    /// granularity.
    #[serde(default = "default_truth_granularity")]
    pub truth_granularity: Granularity,
}

fn default_min_items() -> usize {
    50
}
fn default_min_success() -> f64 {
    0.25
}
fn default_truth_granularity() -> Granularity {
    Granularity::SecondGoals
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationInput {
    pub repetitions: usize,
    pub learners: usize,
    pub kcs: usize,
    pub items: usize,
    pub p_init: f64,
    pub p_slip: f64,
    pub p_guess: f64,
    pub contiguous_items: usize,
    pub shuffle_kc_order: bool,
}

impl Default for SimulationInput {
    fn default() -> Self {
        let d = SimConfig::default();
        SimulationInput {
            repetitions: 100,
            learners: d.learners,
            kcs: d.kcs,
            items: d.items,
            p_init: d.p_init,
            p_slip: d.p_slip,
            p_guess: d.p_guess,
            contiguous_items: d.contiguous_items,
            shuffle_kc_order: d.shuffle_kc_order,
        }
    }
}

impl SimulationInput {
    pub fn sim_config(&self, seed: u64) -> SimConfig {
        SimConfig {
            learners: self.learners,
            kcs: self.kcs,
            items: self.items,
            p_init: self.p_init,
            p_slip: self.p_slip,
            p_guess: self.p_guess,
            contiguous_items: self.contiguous_items,
            shuffle_kc_order: self.shuffle_kc_order,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapSettings {
    pub k_max: usize,
    pub references: usize,
    /// Restarts per k when the Gap statistic uses K-means.
    pub kmeans_restarts: usize,
}

impl Default for GapSettings {
    fn default() -> Self {
        GapSettings {
            k_max: 70,
            references: 100,
            kmeans_restarts: 10,
        }
    }
}

/// What decides the number of clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KSource {
    Fixed(usize),
    Granularity(Granularity),
    Gap(GapRule),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub seed: Option<u64>,
    #[serde(default = "default_measures")]
    pub measures: Vec<Measure>,
    #[serde(default = "default_clusterings")]
    pub clusterings: Vec<Combination>,
    pub k: Option<usize>,
    pub granularity: Option<Granularity>,
    pub gap_rule: Option<GapRule>,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_min_support")]
    pub min_support: u64,
    /// Not part of the config hash: where the outputs go does not change them.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
    pub data: Option<DataInput>,
    pub simulation: Option<SimulationInput>,
    #[serde(default)]
    pub gap: GapSettings,
}

fn default_measures() -> Vec<Measure> {
    Measure::ALL.to_vec()
}
fn default_clusterings() -> Vec<Combination> {
    vec![Combination::WARD_PEARSON]
}
fn default_restarts() -> usize {
    crate::clusterkit::DEFAULT_RESTARTS
}
fn default_min_support() -> u64 {
    DEFAULT_MIN_SUPPORT
}

impl PipelineConfig {
    /// A simulation-study config with defaults everywhere else.
    pub fn simulation(seed: u64, k: usize, repetitions: usize) -> Self {
        PipelineConfig {
            version: CONFIG_VERSION,
            seed: Some(seed),
            measures: default_measures(),
            clusterings: default_clusterings(),
            k: Some(k),
            granularity: None,
            gap_rule: None,
            restarts: default_restarts(),
            min_support: default_min_support(),
            output_dir: None,
            data: None,
            simulation: Some(SimulationInput {
                repetitions,
                ..SimulationInput::default()
            }),
            gap: GapSettings::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))
    }

    /// Loads a config file; relative input paths resolve against its folder.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(d) = &mut cfg.data {
            d.responses = base.join(&d.responses);
            d.labels = d.labels.as_ref().map(|l| base.join(l));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn k_source(&self) -> Result<KSource, ConfigError> {
        match (self.k, self.granularity, self.gap_rule) {
            (Some(k), None, None) => Ok(KSource::Fixed(k)),
            (None, Some(g), None) => Ok(KSource::Granularity(g)),
            (None, None, Some(r)) => Ok(KSource::Gap(r)),
            _ => Err(invalid("exactly one of `k`, `granularity` and `gap_rule` must be set")),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.version != CONFIG_VERSION {
            return Err(invalid(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version)));
        }
        if self.seed.is_none() {
            return Err(invalid("`seed` is required"));
        }
        if self.measures.is_empty() {
            return Err(invalid("`measures` must list at least one similarity measure"));
        }
        if self.clusterings.is_empty() {
            return Err(invalid("`clusterings` must list at least one clustering"));
        }
        if self.restarts == 0 {
            return Err(invalid("`restarts` must be positive"));
        }
        match (&self.data, &self.simulation) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(invalid("exactly one of [data] and [simulation] must be given"));
            }
            (Some(d), None) => {
                if !(0.0..=1.0).contains(&d.min_success) {
                    return Err(invalid("`data.min_success` must lie in [0, 1]"));
                }
                if d.labels.is_none() {
                    return Err(invalid("`data.labels` is required to score clusterings"));
                }
            }
            (None, Some(s)) => {
                if s.repetitions == 0 {
                    return Err(invalid("`simulation.repetitions` must be positive"));
                }
                s.sim_config(0).validate().map_err(|e| invalid(e.to_string()))?;
            }
        }
        match self.k_source()? {
            KSource::Fixed(0) => return Err(invalid("`k` must be positive")),
            KSource::Granularity(_) if self.simulation.is_some() => {
                return Err(invalid("`granularity` needs expert labels; use `k` for simulations"));
            }
            KSource::Gap(_) => {
                if self.gap.k_max < 2 {
                    return Err(invalid("`gap.k_max` must be at least 2"));
                }
                if self.gap.references < 2 {
                    return Err(invalid("`gap.references` must be at least 2"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn master_seed(&self) -> u64 {
        self.seed.expect("validated")
    }
}

/// ARI results of one (measure, clustering) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub measure: Measure,
    pub clustering: Combination,
    /// Cluster count used in each repetition.
    pub k: Vec<usize>,
    /// Ward: one value per repetition. K-means: every restart of every repetition.
    pub ari: Option<Summary>,
    /// K-means only: ARI of the lowest-WSS restart per repetition.
    pub best_restart_ari: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub clustering: Combination,
    pub baseline: Measure,
    pub other: Measure,
    pub test: Option<TTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSelection {
    pub measure: Measure,
    pub clustering: Combination,
    pub repetition: usize,
    pub first_max: usize,
    pub first_se_max: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub repetitions: usize,
    pub learners: usize,
    pub items: usize,
    pub evaluated_items: usize,
    pub accuracy: Option<f64>,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub data: DataSummary,
    pub cells: Vec<ReportCell>,
    pub comparisons: Vec<Comparison>,
    pub gap: Vec<GapSelection>,
}

impl RunReport {
    pub fn cell(&self, measure: Measure, clustering: Combination) -> Option<&ReportCell> {
        self.cells.iter().find(|c| c.measure == measure && c.clustering == clustering)
    }

    pub fn comparison(&self, clustering: Combination, other: Measure) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| c.clustering == clustering && c.other == other)
    }
}

/// Everything a run writes, keyed by file name.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub report: RunReport,
    pub files: BTreeMap<String, String>,
}

impl Artifacts {
    /// Writes every file under `dir`. CSV files get the config-hash header.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, body) in &self.files {
            let path = dir.join(name);
            if name.ends_with(".csv") {
                write_with_header(&path, &self.report.config_hash, body)?;
            } else {
                std::fs::write(&path, body)?;
            }
        }
        Ok(())
    }
}

/// One clustering outcome inside one repetition.
#[derive(Debug, Clone)]
struct CellRun {
    k: usize,
    /// (restart, ari, wss); restart is `None` for Ward.
    runs: Vec<(Option<usize>, f64, f64)>,
    best_ari: Option<f64>,
    gap: Option<(GapProfile, usize, usize)>,
}

struct Prepared {
    dataset: ResponseDataset,
    truth: BTreeMap<String, String>,
}

fn prepare_real(cfg: &PipelineConfig) -> Result<Prepared, PipelineError> {
    let d = cfg.data.as_ref().expect("validated");
    let raw = load_responses(&d.responses, d.order_mode)?;
    let dataset = filter_learners(&raw, d.min_items, d.min_success);
    let labels = load_labels(d.labels.as_ref().expect("validated"))?.prune_singletons();
    let g = cfg.granularity.unwrap_or(d.truth_granularity);
    let present: std::collections::HashSet<&String> = dataset.items().iter().collect();
    let truth = labels
        .labels(g)
        .iter()
        .filter(|(i, _)| present.contains(i))
        .map(|(i, l)| (i.clone(), l.clone()))
        .collect();
    Ok(Prepared { dataset, truth })
}

fn prepare_sim(cfg: &PipelineConfig, rep: usize) -> Result<Prepared, PipelineError> {
    let s = cfg.simulation.as_ref().expect("validated");
    let sc = s.sim_config(seed::derive(cfg.master_seed(), &[STREAM_REPETITION, rep as u64]));
    let sim = generate_dataset(&sc).map_err(|e| PipelineError::Data(e.to_string()))?;
    Ok(Prepared {
        dataset: sim.dataset,
        truth: sim.truth,
    })
}

fn n_truth_classes(truth: &BTreeMap<String, String>) -> usize {
    truth.values().collect::<std::collections::BTreeSet<_>>().len()
}

fn gap_options(cfg: &PipelineConfig, combo: Combination, n: usize, rep: usize) -> GapOptions {
    GapOptions {
        k_max: cfg.gap.k_max.min(n),
        references: cfg.gap.references,
        seed: seed::derive(cfg.master_seed(), &[STREAM_GAP, rep as u64]),
        algorithm: match combo.method {
            Method::Ward => GapAlgorithm::Ward { metric: combo.metric },
            Method::Kmeans => GapAlgorithm::Kmeans {
                restarts: cfg.gap.kmeans_restarts,
            },
        },
    }
}

fn run_cell(
    cfg: &PipelineConfig,
    m1: &SimilarityMatrix,
    truth: &BTreeMap<String, String>,
    combo: Combination,
    rep: usize,
) -> Result<CellRun, PipelineError> {
    let n = m1.n();
    let mut gap = None;
    let k = match cfg.k_source()? {
        KSource::Fixed(k) => k,
        KSource::Granularity(_) => n_truth_classes(truth),
        KSource::Gap(rule) => {
            let profile = gap_statistic(m1, &gap_options(cfg, combo, n, rep)).map_err(|e| PipelineError::Data(e.to_string()))?;
            let fm = select_k(&profile, GapRule::FirstMax);
            let fse = select_k(&profile, GapRule::FirstSeMax);
            let k = if rule == GapRule::FirstMax { fm } else { fse };
            gap = Some((profile, fm, fse));
            k
        }
    };
    if k == 0 || k > n {
        return Err(PipelineError::Data(format!("cannot form {k} clusters from {n} items")));
    }
    let score = |assignment: &[usize]| ari_assignment(truth, &m1.items, assignment).map_err(|e| PipelineError::Data(e.to_string()));

    match combo.method {
        Method::Ward => {
            let d = item_distance(m1, combo.metric);
            let labels = ward_linkage(&d).cut(k).map_err(|e| PipelineError::Data(e.to_string()))?;
            let a = score(&labels)?;
            Ok(CellRun {
                k,
                runs: vec![(None, a, wss(&d, &labels))],
                best_ari: None,
                gap,
            })
        }
        Method::Kmeans => {
            let x = FeatureMatrix::from_similarity(m1);
            let opts = KMeansOptions::new(cfg.restarts, seed::derive(cfg.master_seed(), &[STREAM_KMEANS, rep as u64]));
            let c = kmeans_cluster(m1.items.clone(), &x, k, &opts).map_err(|e| PipelineError::Data(e.to_string()))?;
            let runs = c
                .restarts
                .iter()
                .map(|r| Ok((Some(r.restart), score(&r.assignment)?, r.wss)))
                .collect::<Result<Vec<_>, PipelineError>>()?;
            let best = score(&c.assignment)?;
            Ok(CellRun {
                k,
                runs,
                best_ari: Some(best),
                gap,
            })
        }
    }
}

struct RepOutcome {
    summary: DataSummary,
    /// Indexed [measure][combination]; empty when the data is too small.
    cells: Vec<Vec<CellRun>>,
}

fn run_repetition(cfg: &PipelineConfig, prepared: Prepared, rep: usize) -> Result<RepOutcome, PipelineError> {
    let ds = &prepared.dataset;
    let evaluated = ds.items().iter().filter(|i| prepared.truth.contains_key(*i)).count();
    let summary = DataSummary {
        repetitions: 1,
        learners: ds.n_learners(),
        items: ds.n_items(),
        evaluated_items: evaluated,
        accuracy: ds.accuracy(),
        density: ds.density(),
    };
    if ds.n_items() < 2 || evaluated < 2 {
        log::warn!("repetition {rep}: fewer than two evaluable items; nothing to cluster");
        return Ok(RepOutcome { summary, cells: Vec::new() });
    }
    let tables = PairTables::from_dataset(ds);
    let mut cells = Vec::with_capacity(cfg.measures.len());
    for &measure in &cfg.measures {
        let m1 = SimilarityMatrix::from_tables(ds.items().to_vec(), &tables, measure, cfg.min_support);
        let row = cfg
            .clusterings
            .iter()
            .map(|&combo| run_cell(cfg, &m1, &prepared.truth, combo, rep))
            .collect::<Result<Vec<_>, _>>()?;
        cells.push(row);
    }
    Ok(RepOutcome { summary, cells })
}

fn csv_line(fields: &[String]) -> String {
    let mut s = fields.join(",");
    s.push('\n');
    s
}

/// Runs the configured study and returns the report and every output file.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Artifacts, PipelineError> {
    cfg.validate()?;
    let outcomes: Vec<RepOutcome> = if cfg.simulation.is_some() {
        let reps = cfg.simulation.as_ref().map_or(1, |s| s.repetitions);
        (0..reps)
            .into_par_iter()
            .map(|rep| run_repetition(cfg, prepare_sim(cfg, rep)?, rep))
            .collect::<Result<_, _>>()?
    } else {
        vec![run_repetition(cfg, prepare_real(cfg)?, 0)?]
    };
    Ok(assemble(cfg, outcomes))
}

fn assemble(cfg: &PipelineConfig, outcomes: Vec<RepOutcome>) -> Artifacts {
    let hash = cfg.hash();
    let mut files = BTreeMap::new();
    let n_reps = outcomes.len();
    let data = DataSummary {
        repetitions: n_reps,
        learners: outcomes.first().map_or(0, |o| o.summary.learners),
        items: outcomes.first().map_or(0, |o| o.summary.items),
        evaluated_items: outcomes.first().map_or(0, |o| o.summary.evaluated_items),
        accuracy: {
            let accs: Vec<f64> = outcomes.iter().filter_map(|o| o.summary.accuracy).collect();
            (!accs.is_empty()).then(|| mean(&accs))
        },
        density: outcomes.first().map_or(0.0, |o| o.summary.density),
    };
    let has_cells = outcomes.iter().all(|o| !o.cells.is_empty()) && n_reps > 0;

    let mut cells = Vec::new();
    let mut runs_csv = String::from("measure,clustering,repetition,restart,k,ari,wss\n");
    let mut summary_csv = String::from("measure,clustering,n,mean,sd,min,q25,median,q75,max\n");
    let mut hist_csv = String::from("measure,clustering,bin_lo,bin_hi,count\n");
    let mut gap_sel_csv = String::from("measure,clustering,repetition,first_max,first_se_max\n");
    let mut gap = Vec::new();
    // Per-repetition unit used for paired comparisons, keyed by (measure, combo).
    let mut units: BTreeMap<(Measure, Combination), Vec<f64>> = BTreeMap::new();

    if has_cells {
        for (mi, &measure) in cfg.measures.iter().enumerate() {
            for (ci, &combo) in cfg.clusterings.iter().enumerate() {
                let mut all = Vec::new();
                let mut best = Vec::new();
                let mut ks = Vec::new();
                let mut unit = Vec::new();
                let mut km_csv = String::from("restart,ari,wss\n");
                for (rep, o) in outcomes.iter().enumerate() {
                    let cell = &o.cells[mi][ci];
                    ks.push(cell.k);
                    for &(restart, a, w) in &cell.runs {
                        all.push(a);
                        runs_csv.push_str(&csv_line(&[
                            measure.to_string(),
                            combo.to_string(),
                            rep.to_string(),
                            restart.map(|r| r.to_string()).unwrap_or_default(),
                            cell.k.to_string(),
                            fmt_f64(a),
                            fmt_f64(w),
                        ]));
                        if let Some(r) = restart {
                            km_csv.push_str(&csv_line(&[(rep * cfg.restarts + r).to_string(), fmt_f64(a), fmt_f64(w)]));
                        }
                    }
                    if let Some(b) = cell.best_ari {
                        best.push(b);
                    }
                    let rep_aris: Vec<f64> = cell.runs.iter().map(|r| r.1).collect();
                    if n_reps > 1 {
                        unit.push(mean(&rep_aris));
                    } else {
                        unit.extend(rep_aris);
                    }
                    if let Some((profile, fm, fse)) = &cell.gap {
                        let name = if n_reps > 1 {
                            format!("gap_{measure}_{combo}_rep{rep}.csv")
                        } else {
                            format!("gap_{measure}_{combo}.csv")
                        };
                        files.insert(name, profile.to_csv());
                        gap_sel_csv.push_str(&csv_line(&[
                            measure.to_string(),
                            combo.to_string(),
                            rep.to_string(),
                            fm.to_string(),
                            fse.to_string(),
                        ]));
                        gap.push(GapSelection {
                            measure,
                            clustering: combo,
                            repetition: rep,
                            first_max: *fm,
                            first_se_max: *fse,
                        });
                    }
                }
                let s = Summary::of(&all);
                if let Some(s) = &s {
                    summary_csv.push_str(&csv_line(&[
                        measure.to_string(),
                        combo.to_string(),
                        s.n.to_string(),
                        fmt_f64(s.mean),
                        fmt_f64(s.sd),
                        fmt_f64(s.min),
                        fmt_f64(s.q25),
                        fmt_f64(s.median),
                        fmt_f64(s.q75),
                        fmt_f64(s.max),
                    ]));
                }
                for (lo, hi, count) in histogram(&all, -1.0, 1.0, 40) {
                    hist_csv.push_str(&csv_line(&[measure.to_string(), combo.to_string(), fmt_f64(lo), fmt_f64(hi), count.to_string()]));
                }
                if combo.method == Method::Kmeans {
                    files.insert(format!("kmeans_{measure}_{combo}.csv"), km_csv);
                }
                units.insert((measure, combo), unit);
                cells.push(ReportCell {
                    measure,
                    clustering: combo,
                    k: ks,
                    ari: s,
                    best_restart_ari: Summary::of(&best),
                });
            }
        }
    }

    // Table-shaped view: one row per measure, one column per clustering.
    let mut table_csv = String::from("measure");
    for combo in &cfg.clusterings {
        table_csv.push_str(&format!(",{combo}"));
    }
    table_csv.push('\n');
    for &measure in &cfg.measures {
        table_csv.push_str(measure.name());
        for &combo in &cfg.clusterings {
            let v = cells
                .iter()
                .find(|c| c.measure == measure && c.clustering == combo)
                .and_then(|c| c.ari)
                .map(|s| fmt_f64(s.mean))
                .unwrap_or_default();
            table_csv.push(',');
            table_csv.push_str(&v);
        }
        table_csv.push('\n');
    }

    let mut comparisons = Vec::new();
    let baseline = Measure::KappaLearning;
    if has_cells && cfg.measures.contains(&baseline) {
        for &combo in &cfg.clusterings {
            for &other in cfg.measures.iter().filter(|&&m| m != baseline) {
                let x = &units[&(baseline, combo)];
                let y = &units[&(other, combo)];
                comparisons.push(Comparison {
                    clustering: combo,
                    baseline,
                    other,
                    test: paired_t_greater(x, y),
                });
            }
        }
    }

    let report = RunReport {
        tool: "itemkc".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: hash,
        seed: cfg.master_seed(),
        config: cfg.clone(),
        data,
        cells,
        comparisons,
        gap,
    };
    files.insert("ari_runs.csv".into(), runs_csv);
    files.insert("ari_summary.csv".into(), summary_csv);
    files.insert("ari_table.csv".into(), table_csv);
    files.insert("ari_hist.csv".into(), hist_csv);
    if !report.gap.is_empty() {
        files.insert("gap_selection.csv".into(), gap_sel_csv);
    }
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    files.insert("report.json".into(), json);
    Artifacts { report, files }
}

/// Gap selection for one similarity matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub config_hash: String,
    pub seed: u64,
    pub clustering: Combination,
    pub k_max: usize,
    pub references: usize,
    pub selections: Vec<GapMeasureSelection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapMeasureSelection {
    pub measure: Measure,
    pub first_max: usize,
    pub first_se_max: usize,
}

/// Gap statistic for every configured measure on the configured data (the
/// first repetition for simulations), using the first configured clustering.
pub fn run_gap(cfg: &PipelineConfig) -> Result<(GapReport, BTreeMap<String, String>), PipelineError> {
    cfg.validate()?;
    if cfg.gap.k_max < 2 {
        return Err(invalid("`gap.k_max` must be at least 2").into());
    }
    if cfg.gap.references < 2 {
        return Err(invalid("`gap.references` must be at least 2").into());
    }
    let prepared = if cfg.simulation.is_some() { prepare_sim(cfg, 0)? } else { prepare_real(cfg)? };
    let combo = cfg.clusterings[0];
    let ds = &prepared.dataset;
    let mut files = BTreeMap::new();
    let mut selections = Vec::new();
    let mut table = String::from("measure,first_max,first_se_max\n");
    if ds.n_items() >= 2 {
        let tables = PairTables::from_dataset(ds);
        for &measure in &cfg.measures {
            let m1 = SimilarityMatrix::from_tables(ds.items().to_vec(), &tables, measure, cfg.min_support);
            let profile = gap_statistic(&m1, &gap_options(cfg, combo, m1.n(), 0)).map_err(|e| PipelineError::Data(e.to_string()))?;
            let fm = select_k(&profile, GapRule::FirstMax);
            let fse = select_k(&profile, GapRule::FirstSeMax);
            files.insert(format!("gap_{measure}.csv"), profile.to_csv());
            table.push_str(&format!("{measure},{fm},{fse}\n"));
            selections.push(GapMeasureSelection {
                measure,
                first_max: fm,
                first_se_max: fse,
            });
        }
    }
    files.insert("gap_selection.csv".into(), table);
    let report = GapReport {
        config_hash: cfg.hash(),
        seed: cfg.master_seed(),
        clustering: combo,
        k_max: cfg.gap.k_max,
        references: cfg.gap.references,
        selections,
    };
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    files.insert("gap_report.json".into(), json);
    Ok((report, files))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_sim() -> PipelineConfig {
        let mut cfg = PipelineConfig::simulation(5, 4, 3);
        let s = cfg.simulation.as_mut().unwrap();
        s.learners = 150;
        s.kcs = 4;
        s.items = 24;
        cfg.restarts = 4;
        cfg.clusterings = vec![Combination::WARD_PEARSON, Combination::KMEANS];
        cfg
    }

    #[test]
    fn combination_parsing() {
        assert_eq!("ward-pearson".parse::<Combination>().unwrap(), Combination::WARD_PEARSON);
        assert!("kmeans-pearson".parse::<Combination>().is_err());
        assert!("spectral".parse::<Combination>().is_err());
    }

    #[test]
    fn config_validation() {
        let ok = small_sim();
        ok.validate().unwrap();

        let mut c = ok.clone();
        c.measures.clear();
        assert!(matches!(c.validate(), Err(ConfigError::Invalid(_))));

        let mut c = ok.clone();
        c.gap_rule = Some(GapRule::FirstMax);
        assert!(c.validate().is_err());

        let mut c = ok.clone();
        c.k = None;
        c.gap_rule = Some(GapRule::FirstMax);
        c.gap.k_max = 1;
        assert!(c.validate().is_err());

        let mut c = ok.clone();
        c.seed = None;
        assert!(c.validate().is_err());

        let mut c = ok.clone();
        c.k = None;
        c.granularity = Some(Granularity::Second);
        assert!(c.validate().is_err());

        let mut c = ok;
        c.version = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = small_sim();
        let back = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let bad = format!("{}\nbogus = 1\n", cfg.to_toml());
        assert!(matches!(PipelineConfig::from_toml(&bad), Err(ConfigError::Syntax(_))));
        let text = "version = 1\nseed = 3\nk = 5\nclusterings = [\"kmeans-pearson\"]\n[simulation]\n";
        assert!(PipelineConfig::from_toml(text).is_err());
    }

    #[test]
    fn output_dir_does_not_change_hash() {
        let a = small_sim();
        let mut b = a.clone();
        b.output_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.seed = Some(6);
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn small_simulation_runs() {
        let art = run_pipeline(&small_sim()).unwrap();
        let r = &art.report;
        assert_eq!(r.data.repetitions, 3);
        assert_eq!(r.cells.len(), 8);
        let ward = r.cell(Measure::KappaLearning, Combination::WARD_PEARSON).unwrap();
        assert_eq!(ward.ari.unwrap().n, 3);
        assert_eq!(ward.k, vec![4, 4, 4]);
        let km = r.cell(Measure::Kappa, Combination::KMEANS).unwrap();
        assert_eq!(km.ari.unwrap().n, 12);
        assert_eq!(km.best_restart_ari.unwrap().n, 3);
        assert_eq!(r.comparisons.len(), 6);
        assert!(art.files.contains_key("kmeans_kappa_learning_kmeans-euclidean.csv"));
        assert_eq!(art.files["ari_table.csv"].lines().count(), 5);
        // Same config, same bytes.
        assert_eq!(run_pipeline(&small_sim()).unwrap(), art);
    }

    #[test]
    fn gap_driven_k() {
        let mut cfg = small_sim();
        cfg.k = None;
        cfg.gap_rule = Some(GapRule::FirstSeMax);
        cfg.gap.k_max = 8;
        cfg.gap.references = 5;
        cfg.gap.kmeans_restarts = 2;
        cfg.simulation.as_mut().unwrap().repetitions = 1;
        let art = run_pipeline(&cfg).unwrap();
        assert_eq!(art.report.gap.len(), 8);
        for g in &art.report.gap {
            assert!(g.first_se_max <= g.first_max);
        }
        assert!(art.files.contains_key("gap_selection.csv"));
        let (gr, files) = run_gap(&cfg).unwrap();
        assert_eq!(gr.selections.len(), 4);
        assert!(files.contains_key("gap_kappa_learning.csv"));
    }
}
