//! Pairwise item similarity from binary responses.
//!
//! For every pair of items the learners who answered both are tallied into a
//! 2×2 table oriented by presentation order: for each learner the item seen
//! first is the "earlier" item and the other the "later" one.
//!
//! |                 | earlier correct | earlier incorrect |
//! |-----------------|-----------------|-------------------|
//! | later correct   | a               | b                 |
//! | later incorrect | c               | d                 |
//!
//! Kappa Learning treats `b` (failed first, solved later) as agreement, so
//! only `c` counts as disagreement. The reference measures are symmetric in
//! `b` and `c`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ResponseDataset;
use crate::io::{csv_reader, fmt_opt};

/// Pairs with fewer overlapping learners than this are left undefined.
pub const DEFAULT_MIN_SUPPORT: u64 = 20;

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("an item cannot be paired with itself (`{0}`)")]
    SameItem(String),
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("matrix file line {line}: {message}")]
    Parse { line: u64, message: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl ContingencyTable {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Self {
        ContingencyTable { a, b, c, d }
    }

    pub fn n(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    /// Same learners with the earlier/later roles exchanged.
    pub fn swapped(&self) -> Self {
        ContingencyTable::new(self.a, self.c, self.b, self.d)
    }

    /// Adds one learner's outcome on the (earlier, later) item pair.
    pub fn record(&mut self, earlier_correct: bool, later_correct: bool) {
        match (earlier_correct, later_correct) {
            (true, true) => self.a += 1,
            (false, true) => self.b += 1,
            (true, false) => self.c += 1,
            (false, false) => self.d += 1,
        }
    }

    fn cells(&self) -> (f64, f64, f64, f64) {
        (self.a as f64, self.b as f64, self.c as f64, self.d as f64)
    }
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den != 0.0).then(|| num / den)
}

/// Kappa Learning: `(ad − bc) / ((a+c)(c+d))`.
///
/// Equals 1 whenever `c = 0` and the value is defined. Not bounded below by
/// −1 on degenerate tables; values are returned unclamped.
pub fn kappa_learning(t: &ContingencyTable) -> Option<f64> {
    if t.n() == 0 {
        return None;
    }
    let (a, b, c, d) = t.cells();
    ratio(a * d - b * c, (a + c) * (c + d))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    Kappa,
    PearsonPhi,
    Yule,
}

/// Cohen's Kappa, the phi coefficient, or Yule's Q on the table.
pub fn reference_measure(t: &ContingencyTable, kind: ReferenceKind) -> Option<f64> {
    if t.n() == 0 {
        return None;
    }
    let (a, b, c, d) = t.cells();
    let num = a * d - b * c;
    match kind {
        ReferenceKind::Kappa => ratio(2.0 * num, (a + b) * (b + d) + (a + c) * (c + d)),
        ReferenceKind::PearsonPhi => ratio(num, ((a + c) * (a + b) * (b + d) * (c + d)).sqrt()),
        ReferenceKind::Yule => ratio(num, a * d + b * c),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    KappaLearning,
    Kappa,
    PearsonPhi,
    Yule,
}

impl Measure {
    pub const ALL: [Measure; 4] = [Measure::KappaLearning, Measure::Kappa, Measure::Yule, Measure::PearsonPhi];

    pub fn evaluate(self, t: &ContingencyTable) -> Option<f64> {
        match self {
            Measure::KappaLearning => kappa_learning(t),
            Measure::Kappa => reference_measure(t, ReferenceKind::Kappa),
            Measure::PearsonPhi => reference_measure(t, ReferenceKind::PearsonPhi),
            Measure::Yule => reference_measure(t, ReferenceKind::Yule),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Measure::KappaLearning => "kappa_learning",
            Measure::Kappa => "kappa",
            Measure::PearsonPhi => "pearson_phi",
            Measure::Yule => "yule",
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Measure {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kappa_learning" | "kl" => Ok(Measure::KappaLearning),
            "kappa" => Ok(Measure::Kappa),
            "pearson_phi" | "pearson" | "phi" => Ok(Measure::PearsonPhi),
            "yule" => Ok(Measure::Yule),
            other => Err(format!("unknown measure `{other}`")),
        }
    }
}

/// Contingency table for items `i` and `j`, oriented per learner by which of
/// the two items that learner saw first.
pub fn contingency(ds: &ResponseDataset, i: &str, j: &str) -> Result<ContingencyTable, SimilarityError> {
    if i == j {
        return Err(SimilarityError::SameItem(i.to_string()));
    }
    let ii = ds.item_index(i).ok_or_else(|| SimilarityError::UnknownItem(i.to_string()))?;
    let jj = ds.item_index(j).ok_or_else(|| SimilarityError::UnknownItem(j.to_string()))?;
    let mut t = ContingencyTable::default();
    for row in ds.rows() {
        let ri = row.iter().find(|r| r.item == ii);
        let rj = row.iter().find(|r| r.item == jj);
        if let (Some(ri), Some(rj)) = (ri, rj) {
            let (e, l) = if ri.position < rj.position { (ri, rj) } else { (rj, ri) };
            t.record(e.correct, l.correct);
        }
    }
    Ok(t)
}

/// Oriented contingency tables for every unordered item pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTables {
    n: usize,
    cells: Vec<ContingencyTable>,
}

impl PairTables {
    /// Tallies all pairs in one pass over each learner's ordered responses.
    pub fn from_dataset(ds: &ResponseDataset) -> Self {
        let n = ds.n_items();
        let empty = || vec![[0u32; 4]; n * n];
        let counts = ds
            .rows()
            .par_chunks(64)
            .fold(empty, |mut acc, chunk| {
                for row in chunk {
                    for (p, e) in row.iter().enumerate() {
                        for l in &row[p + 1..] {
                            let (lo, hi) = if e.item < l.item { (e.item, l.item) } else { (l.item, e.item) };
                            let cell = match (e.correct, l.correct) {
                                (true, true) => 0,
                                (false, true) => 1,
                                (true, false) => 2,
                                (false, false) => 3,
                            };
                            acc[lo * n + hi][cell] += 1;
                        }
                    }
                }
                acc
            })
            .reduce(empty, |mut x, y| {
                for (a, b) in x.iter_mut().zip(&y) {
                    for k in 0..4 {
                        a[k] += b[k];
                    }
                }
                x
            });
        let cells = counts
            .into_iter()
            .map(|[a, b, c, d]| ContingencyTable::new(a.into(), b.into(), c.into(), d.into()))
            .collect();
        PairTables { n, cells }
    }

    pub fn n_items(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> ContingencyTable {
        debug_assert!(i != j);
        let (lo, hi) = if i < j { (i, j) } else { (j, i) };
        self.cells[lo * self.n + hi]
    }
}

/// Symmetric item × item similarity matrix (M1). Undefined entries are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub items: Vec<String>,
    pub measure: Measure,
    pub min_support: u64,
    values: Vec<Option<f64>>,
    support: Vec<u64>,
}

impl SimilarityMatrix {
    /// Builds a matrix from explicit values; `values` must be symmetric.
    pub fn from_values(items: Vec<String>, measure: Measure, values: Vec<Option<f64>>, support: Vec<u64>) -> Self {
        let n = items.len();
        assert_eq!(values.len(), n * n, "values must be n × n");
        assert_eq!(support.len(), n * n, "support must be n × n");
        SimilarityMatrix {
            items,
            measure,
            min_support: 0,
            values,
            support,
        }
    }

    pub fn from_tables(items: Vec<String>, tables: &PairTables, measure: Measure, min_support: u64) -> Self {
        let n = items.len();
        assert_eq!(n, tables.n_items());
        let mut values = vec![None; n * n];
        let mut support = vec![0u64; n * n];
        for i in 0..n {
            values[i * n + i] = Some(1.0);
            for j in i + 1..n {
                let t = tables.get(i, j);
                let v = if t.n() < min_support { None } else { measure.evaluate(&t) };
                values[i * n + j] = v;
                values[j * n + i] = v;
                support[i * n + j] = t.n();
                support[j * n + i] = t.n();
            }
        }
        SimilarityMatrix {
            items,
            measure,
            min_support,
            values,
            support,
        }
    }

    pub fn n(&self) -> usize {
        self.items.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i * self.n() + j]
    }

    pub fn support(&self, i: usize, j: usize) -> u64 {
        self.support[i * self.n() + j]
    }

    pub fn row(&self, i: usize) -> &[Option<f64>] {
        let n = self.n();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn undefined_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    /// Header row and column of item ids; undefined entries are empty cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("item_id");
        for id in &self.items {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (i, id) in self.items.iter().enumerate() {
            out.push_str(id);
            for v in self.row(i) {
                out.push(',');
                out.push_str(&fmt_opt(*v));
            }
            out.push('\n');
        }
        out
    }

    /// Parses the CSV form. The CSV does not carry support counts, so they are
    /// read back as zero.
    pub fn from_csv(text: &str, measure: Measure) -> Result<Self, SimilarityError> {
        let perr = |line: u64, message: String| SimilarityError::Parse { line, message };
        let mut rdr = csv_reader(text.as_bytes());
        let headers = rdr.headers().map_err(|e| perr(0, e.to_string()))?.clone();
        let items: Vec<String> = headers.iter().skip(1).map(String::from).collect();
        let n = items.len();
        let mut values = Vec::with_capacity(n * n);
        let mut rows = 0;
        for row in rdr.records() {
            let row = row.map_err(|e| perr(e.position().map(|p| p.line()).unwrap_or(0), e.to_string()))?;
            let line = row.position().map(|p| p.line()).unwrap_or(0);
            if rows >= n || row[0] != items[rows] {
                return Err(perr(line, format!("row `{}` does not match header order", &row[0])));
            }
            for cell in row.iter().skip(1) {
                if cell.is_empty() {
                    values.push(None);
                } else {
                    let v: f64 = cell.parse().map_err(|_| perr(line, format!("invalid number `{cell}`")))?;
                    values.push(Some(v));
                }
            }
            rows += 1;
        }
        if rows != n {
            return Err(perr(0, format!("expected {n} rows, found {rows}")));
        }
        Ok(SimilarityMatrix::from_values(items, measure, values, vec![0; n * n]))
    }
}

/// User-based similarity matrix M1 for `measure`.
pub fn build_similarity_matrix(ds: &ResponseDataset, measure: Measure, min_support: u64) -> SimilarityMatrix {
    let tables = PairTables::from_dataset(ds);
    SimilarityMatrix::from_tables(ds.items().to_vec(), &tables, measure, min_support)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{OrderMode, ResponseRecord};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn t(a: u64, b: u64, c: u64, d: u64) -> ContingencyTable {
        ContingencyTable::new(a, b, c, d)
    }

    // Chance-corrected agreement from observed/expected proportions.
    fn chance_corrected(po: f64, pe: f64) -> f64 {
        (po - pe) / (1.0 - pe)
    }

    /// `(Po − Pe)/(1 − Pe)` with Po = P/n and Pe = S/n², evaluated on exact
    /// integer numerators so that Pe near 1 does not cancel.
    fn agreement_exact(p: i128, s: i128, n: i128) -> f64 {
        (p * n - s) as f64 / (n * n - s) as f64
    }

    fn kl_via_agreement(t: &ContingencyTable) -> f64 {
        let (a, b, c, d) = (t.a as i128, t.b as i128, t.c as i128, t.d as i128);
        let n = a + b + c + d;
        agreement_exact(a + b + d, (a + b) * (b + d) + (a + b) * (a + c) + (b + d) * (c + d), n)
    }

    fn kappa_via_agreement(t: &ContingencyTable) -> f64 {
        let (a, b, c, d) = (t.a as i128, t.b as i128, t.c as i128, t.d as i128);
        let n = a + b + c + d;
        agreement_exact(a + d, (a + b) * (a + c) + (b + d) * (c + d), n)
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kappa_learning(&t(5, 3, 0, 2)), Some(1.0));
        assert_eq!(kappa_learning(&t(10, 10, 10, 10)), Some(0.0));
        // Po = 0.8, Pe = 0.82.
        let oracle = chance_corrected(0.8, 0.82);
        assert_relative_eq!(oracle, -1.0 / 9.0, epsilon = 1e-12);
        assert_relative_eq!(kappa_learning(&t(4, 3, 2, 1)).unwrap(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn reference_examples() {
        let x = t(4, 3, 2, 1);
        assert_relative_eq!(reference_measure(&x, ReferenceKind::Kappa).unwrap(), -4.0 / 46.0, epsilon = 1e-12);
        assert_relative_eq!(
            reference_measure(&x, ReferenceKind::PearsonPhi).unwrap(),
            -2.0 / 504f64.sqrt(),
            epsilon = 1e-12
        );
        assert_relative_eq!(reference_measure(&x, ReferenceKind::Yule).unwrap(), -0.2, epsilon = 1e-12);
        for m in Measure::ALL {
            assert_eq!(m.evaluate(&t(3, 0, 0, 7)), Some(1.0), "{m}");
        }
    }

    #[test]
    fn zero_denominators_are_undefined() {
        for m in Measure::ALL {
            assert_eq!(m.evaluate(&t(0, 0, 0, 0)), None);
        }
        assert_eq!(kappa_learning(&t(0, 5, 0, 5)), None); // a + c = 0
        assert_eq!(kappa_learning(&t(5, 5, 0, 0)), None); // c + d = 0
        assert_eq!(reference_measure(&t(5, 0, 0, 0), ReferenceKind::PearsonPhi), None);
        assert_eq!(reference_measure(&t(5, 3, 0, 0), ReferenceKind::Yule), None);
    }

    #[test]
    fn kl_can_go_below_minus_one() {
        // a = d = 0, b ≫ c.
        let v = kappa_learning(&t(0, 50, 1, 0)).unwrap();
        assert!(v < -1.0, "{v}");
    }

    fn ds(records: Vec<(&str, &str, u64, bool)>, mode: OrderMode) -> ResponseDataset {
        let recs = records.into_iter().map(|(l, i, p, c)| ResponseRecord::new(l, i, p, c)).collect();
        ResponseDataset::from_records(recs, mode).unwrap()
    }

    #[test]
    fn contingency_fixed_order() {
        let d = ds(
            vec![
                ("L1", "i", 0, true),
                ("L1", "j", 1, true),
                ("L2", "i", 0, false),
                ("L2", "j", 1, true),
                ("L3", "i", 0, true),
                ("L3", "j", 1, false),
                ("L4", "j", 1, true),
            ],
            OrderMode::Fixed,
        );
        let c = contingency(&d, "i", "j").unwrap();
        assert_eq!(c, t(1, 1, 1, 0));
        assert_eq!(c.n(), 3);
        // Orientation is by presentation order, not by argument order.
        assert_eq!(contingency(&d, "j", "i").unwrap(), c);
    }

    #[test]
    fn contingency_per_learner_order() {
        let d = ds(
            vec![("L1", "i", 0, false), ("L1", "j", 1, true), ("L2", "j", 0, false), ("L2", "i", 1, true)],
            OrderMode::PerLearner,
        );
        assert_eq!(contingency(&d, "i", "j").unwrap(), t(0, 2, 0, 0));
    }

    #[test]
    fn contingency_errors_and_empty_overlap() {
        let d = ds(vec![("L1", "i", 0, true), ("L2", "j", 0, true)], OrderMode::PerLearner);
        assert_eq!(contingency(&d, "i", "j").unwrap(), t(0, 0, 0, 0));
        assert!(matches!(contingency(&d, "i", "i"), Err(SimilarityError::SameItem(_))));
        assert!(matches!(contingency(&d, "i", "z"), Err(SimilarityError::UnknownItem(_))));
    }

    #[test]
    fn matrix_symmetry_and_support_floor() {
        let mut recs = Vec::new();
        for l in 0..25 {
            let ok = l % 2 == 0;
            recs.push((format!("L{l}"), "p", 0, ok));
            recs.push((format!("L{l}"), "q", 1, ok));
        }
        for l in 0..5 {
            recs.push((format!("L{l}"), "r", 2, true));
        }
        let records = recs.into_iter().map(|(l, i, p, c)| ResponseRecord::new(l, i, p, c)).collect();
        let d = ResponseDataset::from_records(records, OrderMode::Fixed).unwrap();
        let m = build_similarity_matrix(&d, Measure::KappaLearning, 20);
        assert_eq!(m.get(0, 1), Some(1.0));
        assert_eq!(m.get(1, 0), Some(1.0));
        assert_eq!(m.get(0, 0), Some(1.0));
        assert_eq!(m.support(0, 2), 5);
        assert_eq!(m.get(0, 2), None);
        assert_eq!(m.get(2, 0), None);

        let back = SimilarityMatrix::from_csv(&m.to_csv(), Measure::KappaLearning).unwrap();
        for i in 0..3 {
            assert_eq!(back.row(i), m.row(i));
        }
        let json: SimilarityMatrix = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(json, m);
    }

    fn arb_table() -> impl Strategy<Value = ContingencyTable> {
        (0u64..60, 0u64..60, 0u64..60, 0u64..60).prop_map(|(a, b, c, d)| t(a, b, c, d))
    }

    #[test]
    fn closed_forms_match_agreement_forms() {
        use rand::Rng;
        let mut rng = crate::seed::rng(11, &[]);
        let mut checked = 0;
        while checked < 10_000 {
            let x = t(rng.gen_range(0..200), rng.gen_range(0..200), rng.gen_range(0..200), rng.gen_range(0..200));
            let (Some(kl), Some(k)) = (kappa_learning(&x), reference_measure(&x, ReferenceKind::Kappa)) else {
                continue;
            };
            assert!((kl - kl_via_agreement(&x)).abs() < 1e-12, "{x:?}");
            assert!((k - kappa_via_agreement(&x)).abs() < 1e-12, "{x:?}");
            checked += 1;
        }
    }

    proptest! {
        #[test]
        fn bounds(x in arb_table()) {
            if let Some(v) = kappa_learning(&x) {
                prop_assert!(v <= 1.0 + 1e-12);
            }
            for k in [ReferenceKind::Kappa, ReferenceKind::PearsonPhi, ReferenceKind::Yule] {
                if let Some(v) = reference_measure(&x, k) {
                    prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v), "{:?} {}", k, v);
                }
            }
        }

        #[test]
        fn scale_invariance(x in arb_table(), s in 1u64..9) {
            let y = t(x.a * s, x.b * s, x.c * s, x.d * s);
            for m in Measure::ALL {
                match (m.evaluate(&x), m.evaluate(&y)) {
                    (Some(p), Some(q)) => prop_assert!((p - q).abs() < 1e-12),
                    (None, None) => {}
                    other => prop_assert!(false, "{:?}", other),
                }
            }
        }

        #[test]
        fn swap_symmetry(x in arb_table()) {
            let y = x.swapped();
            for m in [Measure::Kappa, Measure::PearsonPhi, Measure::Yule] {
                prop_assert_eq!(m.evaluate(&x), m.evaluate(&y));
            }
        }

        #[test]
        fn shared_order_matches_fixed_mode(
            cells in proptest::collection::vec(proptest::collection::vec(proptest::option::of(any::<bool>()), 5), 1..20)
        ) {
            let mut records = Vec::new();
            for (l, row) in cells.iter().enumerate() {
                for (i, v) in row.iter().enumerate() {
                    if let Some(c) = v {
                        records.push(ResponseRecord::new(format!("L{l}"), format!("q{i}"), i as u64, *c));
                    }
                }
            }
            let fixed = ResponseDataset::from_records(records.clone(), OrderMode::Fixed).unwrap();
            let per = ResponseDataset::from_records(records, OrderMode::PerLearner).unwrap();
            let tf = PairTables::from_dataset(&fixed);
            let tp = PairTables::from_dataset(&per);
            prop_assert_eq!(&tf, &tp);
            for i in 0..fixed.n_items() {
                for j in 0..fixed.n_items() {
                    if i != j {
                        let a = &fixed.items()[i];
                        let b = &fixed.items()[j];
                        prop_assert_eq!(tf.get(i, j), contingency(&fixed, a, b).unwrap());
                    }
                }
            }
        }
    }

    #[test]
    fn kl_is_order_sensitive() {
        let x = t(10, 8, 2, 6);
        assert_ne!(kappa_learning(&x), kappa_learning(&x.swapped()));
    }
}
