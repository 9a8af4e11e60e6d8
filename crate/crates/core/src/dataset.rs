//! First-attempt response data and expert item labels.
//!
//! Responses are stored sparsely: a learner only has rows for the items they
//! attempted. Each row carries the position at which the item was presented to
//! that learner, which the similarity stage uses to decide which item of a
//! pair came first.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::csv_reader;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("duplicate response for learner `{learner}` on item `{item}`")]
    DuplicateResponse { learner: String, item: String },
    #[error("learner `{learner}` has more than one response at position {position}")]
    DuplicatePosition { learner: String, position: u64 },
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("unknown label column `{0}`")]
    UnknownColumn(String),
    #[error("item `{0}` is labelled more than once")]
    DuplicateLabel(String),
}

fn parse_err(line: Option<&csv::Position>, message: impl Into<String>) -> DatasetError {
    DatasetError::Parse {
        line: line.map(|p| p.line()).unwrap_or(0),
        message: message.into(),
    }
}

fn csv_err(err: csv::Error) -> DatasetError {
    let line = err.position().map(|p| p.line()).unwrap_or(0);
    DatasetError::Parse {
        line,
        message: err.to_string(),
    }
}

/// How presentation order is interpreted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderMode {
    /// One global item order shared by every learner.
    #[default]
    Fixed,
    /// Each learner has their own order.
    PerLearner,
}

impl FromStr for OrderMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fixed" => Ok(OrderMode::Fixed),
            "per_learner" | "per-learner" => Ok(OrderMode::PerLearner),
            other => Err(format!("unknown order mode `{other}` (expected fixed or per_learner)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub learner_id: String,
    pub item_id: String,
    pub position: u64,
    pub correct: bool,
}

impl ResponseRecord {
    pub fn new(learner: impl Into<String>, item: impl Into<String>, position: u64, correct: bool) -> Self {
        ResponseRecord {
            learner_id: learner.into(),
            item_id: item.into(),
            position,
            correct,
        }
    }
}

/// One learner's answer to one item, with the item referenced by index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Response {
    pub item: usize,
    pub position: u64,
    pub correct: bool,
}

#[derive(Serialize, Deserialize)]
struct DatasetRepr {
    order_mode: OrderMode,
    records: Vec<ResponseRecord>,
}

/// Validated sparse learner × item matrix of first-attempt outcomes.
///
/// Learners and items are indexed in order of first appearance in the
/// records. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DatasetRepr", into = "DatasetRepr")]
pub struct ResponseDataset {
    records: Vec<ResponseRecord>,
    learners: Vec<String>,
    items: Vec<String>,
    order_mode: OrderMode,
    rows: Vec<Vec<Response>>,
}

impl TryFrom<DatasetRepr> for ResponseDataset {
    type Error = DatasetError;
    fn try_from(r: DatasetRepr) -> Result<Self, Self::Error> {
        ResponseDataset::from_records(r.records, r.order_mode)
    }
}

impl From<ResponseDataset> for DatasetRepr {
    fn from(ds: ResponseDataset) -> Self {
        DatasetRepr {
            order_mode: ds.order_mode,
            records: ds.records,
        }
    }
}

impl Default for ResponseDataset {
    fn default() -> Self {
        ResponseDataset {
            records: Vec::new(),
            learners: Vec::new(),
            items: Vec::new(),
            order_mode: OrderMode::Fixed,
            rows: Vec::new(),
        }
    }
}

impl ResponseDataset {
    /// Validates `records` and builds the indexed view.
    ///
    /// In fixed mode an item shown at different positions to different
    /// learners downgrades the dataset to per-learner ordering.
    pub fn from_records(records: Vec<ResponseRecord>, order_mode: OrderMode) -> Result<Self, DatasetError> {
        let mut learner_idx: HashMap<&str, usize> = HashMap::new();
        let mut item_idx: HashMap<&str, usize> = HashMap::new();
        let mut learners = Vec::new();
        let mut items = Vec::new();
        let mut rows: Vec<Vec<Response>> = Vec::new();
        let mut seen_pairs: HashSet<(usize, usize)> = HashSet::new();
        let mut seen_positions: HashSet<(usize, u64)> = HashSet::new();
        let mut global_pos: HashMap<usize, u64> = HashMap::new();
        let mut conflict: Option<(String, u64, u64)> = None;

        for rec in &records {
            let l = *learner_idx.entry(rec.learner_id.as_str()).or_insert_with(|| {
                learners.push(rec.learner_id.clone());
                rows.push(Vec::new());
                learners.len() - 1
            });
            let i = *item_idx.entry(rec.item_id.as_str()).or_insert_with(|| {
                items.push(rec.item_id.clone());
                items.len() - 1
            });
            if !seen_pairs.insert((l, i)) {
                return Err(DatasetError::DuplicateResponse {
                    learner: rec.learner_id.clone(),
                    item: rec.item_id.clone(),
                });
            }
            if !seen_positions.insert((l, rec.position)) {
                return Err(DatasetError::DuplicatePosition {
                    learner: rec.learner_id.clone(),
                    position: rec.position,
                });
            }
            let p = *global_pos.entry(i).or_insert(rec.position);
            if p != rec.position && conflict.is_none() {
                conflict = Some((rec.item_id.clone(), p, rec.position));
            }
            rows[l].push(Response {
                item: i,
                position: rec.position,
                correct: rec.correct,
            });
        }
        for row in &mut rows {
            row.sort_by_key(|r| r.position);
        }

        let mut mode = order_mode;
        if let (OrderMode::Fixed, Some((item, p, q))) = (order_mode, conflict) {
            log::warn!(
                "item `{item}` appears at positions {p} and {q} for different learners; \
                 switching to per-learner ordering"
            );
            mode = OrderMode::PerLearner;
        }

        Ok(ResponseDataset {
            records,
            learners,
            items,
            order_mode: mode,
            rows,
        })
    }

    pub fn records(&self) -> &[ResponseRecord] {
        &self.records
    }

    pub fn learners(&self) -> &[String] {
        &self.learners
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn order_mode(&self) -> OrderMode {
        self.order_mode
    }

    pub fn n_learners(&self) -> usize {
        self.learners.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn item_index(&self, item: &str) -> Option<usize> {
        self.items.iter().position(|x| x == item)
    }

    /// Responses of each learner, sorted by presentation position.
    pub fn rows(&self) -> &[Vec<Response>] {
        &self.rows
    }

    /// Fraction of correct first attempts over all responses.
    pub fn accuracy(&self) -> Option<f64> {
        if self.records.is_empty() {
            return None;
        }
        let correct = self.records.iter().filter(|r| r.correct).count();
        Some(correct as f64 / self.records.len() as f64)
    }

    /// Filled fraction of the learner × item matrix.
    pub fn density(&self) -> f64 {
        let cells = self.n_learners() * self.n_items();
        if cells == 0 {
            0.0
        } else {
            self.records.len() as f64 / cells as f64
        }
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("learner_id,item_id,position,correct\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.learner_id,
                r.item_id,
                r.position,
                u8::from(r.correct)
            ));
        }
        out
    }
}

/// Reads a `learner_id,item_id,position,correct` CSV file.
pub fn load_responses(path: &Path, order_mode: OrderMode) -> Result<ResponseDataset, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_responses(&text, order_mode)
}

pub fn parse_responses(text: &str, order_mode: OrderMode) -> Result<ResponseDataset, DatasetError> {
    if text.trim().is_empty() {
        return Ok(ResponseDataset::default());
    }
    let mut rdr = csv_reader(text.as_bytes());
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))
    };
    let (cl, ci, cp, cc) = (col("learner_id")?, col("item_id")?, col("position")?, col("correct")?);

    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        let pos = row.position();
        let learner = &row[cl];
        let item = &row[ci];
        if learner.is_empty() || item.is_empty() {
            return Err(parse_err(pos, "empty learner or item id"));
        }
        let position: u64 = row[cp]
            .parse()
            .map_err(|_| parse_err(pos, format!("invalid position `{}`", &row[cp])))?;
        let correct = match &row[cc] {
            "1" => true,
            "0" => false,
            other => return Err(parse_err(pos, format!("correct must be 0 or 1, got `{other}`"))),
        };
        records.push(ResponseRecord::new(learner, item, position, correct));
    }
    ResponseDataset::from_records(records, order_mode)
}

/// Keeps learners with at least `min_items` attempts and a first-attempt
/// success rate of at least `min_success`.
pub fn filter_learners(ds: &ResponseDataset, min_items: usize, min_success: f64) -> ResponseDataset {
    let keep: HashSet<usize> = ds
        .rows
        .iter()
        .enumerate()
        .filter(|(_, row)| {
            let n = row.len();
            let ok = row.iter().filter(|r| r.correct).count();
            n >= min_items && n > 0 && ok as f64 / n as f64 >= min_success
        })
        .map(|(l, _)| l)
        .collect();
    let kept_ids: HashSet<&str> = keep.iter().map(|&l| ds.learners[l].as_str()).collect();
    let records: Vec<ResponseRecord> = ds
        .records
        .iter()
        .filter(|r| kept_ids.contains(r.learner_id.as_str()))
        .cloned()
        .collect();
    // Removing learners cannot introduce duplicates or position conflicts.
    ResponseDataset::from_records(records, ds.order_mode).expect("subset of a valid dataset is valid")
}

/// Level of the expert knowledge tree used as ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    First,
    FirstGoals,
    Second,
    SecondGoals,
}

impl Granularity {
    pub const ALL: [Granularity; 4] = [
        Granularity::First,
        Granularity::FirstGoals,
        Granularity::Second,
        Granularity::SecondGoals,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Granularity::First => "first",
            Granularity::FirstGoals => "first_goals",
            Granularity::Second => "second",
            Granularity::SecondGoals => "second_goals",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Granularity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Granularity::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| format!("unknown granularity `{s}`"))
    }
}

/// Raw expert tags of one item. Each level may hold several tags.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemTags {
    pub subject: BTreeSet<String>,
    pub sub_subject: BTreeSet<String>,
    pub goal: BTreeSet<String>,
}

/// A multi-tag set becomes its own composite class, e.g. `{1,2}`.
fn composite(tags: &BTreeSet<String>) -> Option<String> {
    match tags.len() {
        0 => None,
        1 => tags.iter().next().cloned(),
        _ => Some(format!("{{{}}}", tags.iter().cloned().collect::<Vec<_>>().join(","))),
    }
}

impl ItemTags {
    /// Composite label at `g`, or `None` if the item has no tag at that level.
    ///
    /// The second level falls back to the subject for subjects without
    /// sub-subjects. Goal granularities are the Cartesian product `base×goal`;
    /// an item without a goal keeps its base label.
    pub fn label(&self, g: Granularity) -> Option<String> {
        let first = composite(&self.subject);
        let second = composite(&self.sub_subject).or_else(|| first.clone());
        let goal = composite(&self.goal);
        let with_goal = |base: Option<String>| {
            base.map(|b| match &goal {
                Some(gl) => format!("{b}×{gl}"),
                None => b,
            })
        };
        match g {
            Granularity::First => first,
            Granularity::FirstGoals => with_goal(first),
            Granularity::Second => second,
            Granularity::SecondGoals => with_goal(second),
        }
    }
}

/// Expert labels per item, composed at every granularity.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    tags: BTreeMap<String, ItemTags>,
    labels: BTreeMap<Granularity, BTreeMap<String, String>>,
}

impl LabelSet {
    pub fn from_tags(tags: BTreeMap<String, ItemTags>) -> Self {
        let labels = Granularity::ALL
            .into_iter()
            .map(|g| {
                let m = tags
                    .iter()
                    .filter_map(|(item, t)| t.label(g).map(|l| (item.clone(), l)))
                    .collect();
                (g, m)
            })
            .collect();
        LabelSet { tags, labels }
    }

    /// Uses one flat labelling at every granularity (simulation truth).
    pub fn from_flat(labels: BTreeMap<String, String>) -> Self {
        let tags = labels
            .iter()
            .map(|(item, l)| {
                let t = ItemTags {
                    subject: [l.clone()].into(),
                    ..ItemTags::default()
                };
                (item.clone(), t)
            })
            .collect();
        LabelSet::from_tags(tags)
    }

    pub fn tags(&self) -> &BTreeMap<String, ItemTags> {
        &self.tags
    }

    /// Item → label map at `g`.
    pub fn labels(&self, g: Granularity) -> &BTreeMap<String, String> {
        &self.labels[&g]
    }

    pub fn n_classes(&self, g: Granularity) -> usize {
        self.labels(g).values().collect::<BTreeSet<_>>().len()
    }

    pub fn class_sizes(&self, g: Granularity) -> BTreeMap<&str, usize> {
        let mut sizes = BTreeMap::new();
        for l in self.labels(g).values() {
            *sizes.entry(l.as_str()).or_insert(0) += 1;
        }
        sizes
    }

    /// Drops every class with a single item, together with that item, at each
    /// granularity independently.
    pub fn prune_singletons(&self) -> LabelSet {
        let labels = self
            .labels
            .iter()
            .map(|(&g, map)| {
                let sizes = self.class_sizes(g);
                let kept = map
                    .iter()
                    .filter(|(_, l)| sizes[l.as_str()] >= 2)
                    .map(|(i, l)| (i.clone(), l.clone()))
                    .collect();
                (g, kept)
            })
            .collect();
        LabelSet {
            tags: self.tags.clone(),
            labels,
        }
    }
}

/// Reads an `item_id,subject,sub_subject,goal` CSV. Only `item_id` is
/// required; multiple tags in a cell are separated by `|`.
pub fn load_labels(path: &Path) -> Result<LabelSet, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_labels(&text)
}

pub fn parse_labels(text: &str) -> Result<LabelSet, DatasetError> {
    const KNOWN: [&str; 4] = ["item_id", "subject", "sub_subject", "goal"];
    if text.trim().is_empty() {
        return Ok(LabelSet::from_tags(BTreeMap::new()));
    }
    let mut rdr = csv_reader(text.as_bytes());
    let headers = rdr.headers().map_err(csv_err)?.clone();
    if let Some(bad) = headers.iter().find(|h| !KNOWN.contains(h)) {
        return Err(DatasetError::UnknownColumn(bad.to_string()));
    }
    let find = |name: &str| headers.iter().position(|h| h == name);
    let ci = find("item_id").ok_or_else(|| DatasetError::MissingColumn("item_id".into()))?;
    let (cs, css, cg) = (find("subject"), find("sub_subject"), find("goal"));

    let split = |row: &csv::StringRecord, c: Option<usize>| -> BTreeSet<String> {
        c.map(|c| {
            row[c]
                .split('|')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect()
        })
        .unwrap_or_default()
    };

    let mut tags = BTreeMap::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        let item = row[ci].to_string();
        if item.is_empty() {
            return Err(parse_err(row.position(), "empty item id"));
        }
        let t = ItemTags {
            subject: split(&row, cs),
            sub_subject: split(&row, css),
            goal: split(&row, cg),
        };
        if tags.insert(item.clone(), t).is_some() {
            return Err(DatasetError::DuplicateLabel(item));
        }
    }
    Ok(LabelSet::from_tags(tags))
}

/// Reads an `item_id,kc` ground-truth file as written by the simulator.
pub fn load_truth(path: &Path) -> Result<BTreeMap<String, String>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rdr = csv_reader(text.as_bytes());
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))
    };
    let (ci, ck) = (find("item_id")?, find("kc")?);
    let mut out = BTreeMap::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        if out.insert(row[ci].to_string(), row[ck].to_string()).is_some() {
            return Err(DatasetError::DuplicateLabel(row[ci].to_string()));
        }
    }
    Ok(out)
}
