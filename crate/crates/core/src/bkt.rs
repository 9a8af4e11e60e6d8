//! Synthetic responses from individualized Bayesian Knowledge Tracing.
//!
//! Every (learner, KC) pair is a two-state hidden Markov model: the learner
//! starts without the skill, answers correctly with probability `P(G)` until
//! the skill is learned and with `1 − P(S)` afterwards, and learns after each
//! opportunity with a rate that combines a per-learner and a per-KC component
//! on the logit scale. There is no forgetting.

use std::collections::BTreeMap;

use rand::distributions::Open01;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{OrderMode, ResponseDataset, ResponseRecord};
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("{name} = {value} is not a probability strictly between 0 and 1")]
    OpenProbability { name: &'static str, value: f64 },
    #[error("invalid simulation config: {0}")]
    Config(String),
}

// Stream tags for seed derivation.
const STREAM_PLACEMENT: u64 = 1;
const STREAM_STUDENT_RATE: u64 = 2;
const STREAM_SKILL_RATE: u64 = 3;
const STREAM_EMISSION: u64 = 4;
const STREAM_TRANSITION: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub learners: usize,
    pub kcs: usize,
    pub items: usize,
    pub p_init: f64,
    pub p_slip: f64,
    pub p_guess: f64,
    /// Leading items of each KC presented back to back.
    pub contiguous_items: usize,
    /// Present KC blocks in a seeded random order instead of index order.
    pub shuffle_kc_order: bool,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            learners: 1000,
            kcs: 20,
            items: 200,
            p_init: 0.0,
            p_slip: 0.1,
            p_guess: 0.2,
            contiguous_items: 6,
            shuffle_kc_order: false,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn with_seed(seed: u64) -> Self {
        SimConfig {
            seed,
            ..SimConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.kcs == 0 || self.items < self.kcs {
            return Err(SimError::Config(format!(
                "need at least one KC and one item per KC (kcs = {}, items = {})",
                self.kcs, self.items
            )));
        }
        for (name, p) in [("p_init", self.p_init), ("p_slip", self.p_slip), ("p_guess", self.p_guess)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::Config(format!("{name} = {p} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Items per KC; sizes differ by at most one.
    pub fn kc_sizes(&self) -> Vec<usize> {
        let base = self.items / self.kcs;
        let extra = self.items % self.kcs;
        (0..self.kcs).map(|k| base + usize::from(k < extra)).collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Learning rate of a learner on a KC: `σ(logit(p_student) + logit(p_skill))`.
pub fn combine_rate(p_student: f64, p_skill: f64) -> Result<f64, SimError> {
    for (name, value) in [("p_student", p_student), ("p_skill", p_skill)] {
        if !(value > 0.0 && value < 1.0) {
            return Err(SimError::OpenProbability { name, value });
        }
    }
    Ok(sigmoid(logit(p_student) + logit(p_skill)))
}

/// Presentation order of the items and their KCs.
///
/// Items are numbered KC-major: KC 0 owns items `0..size_0`, and so on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    /// Item indices in presentation order.
    pub order: Vec<usize>,
    /// KC of every item.
    pub kc_of: Vec<usize>,
    /// Number of leading items of each KC placed as one block.
    pub block_len: Vec<usize>,
}

impl Placement {
    pub fn n_kcs(&self) -> usize {
        self.block_len.len()
    }

    /// Position of each item in the presentation order.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.order.len()];
        for (p, &i) in self.order.iter().enumerate() {
            pos[i] = p;
        }
        pos
    }

    /// Items of `kc` in presentation order.
    pub fn kc_items(&self, kc: usize) -> Vec<usize> {
        self.order.iter().copied().filter(|&i| self.kc_of[i] == kc).collect()
    }
}

/// Lays out KC blocks in KC order, then inserts each KC's remaining items at
/// uniformly chosen slots after the end of that KC's block.
pub fn place_items(config: &SimConfig) -> Placement {
    let sizes = config.kc_sizes();
    let mut rng = seed::rng(config.seed, &[STREAM_PLACEMENT]);
    let mut kc_of = Vec::with_capacity(config.items);
    let mut first_item = Vec::with_capacity(config.kcs);
    for (k, &s) in sizes.iter().enumerate() {
        first_item.push(kc_of.len());
        kc_of.extend(std::iter::repeat_n(k, s));
    }
    let mut kc_order: Vec<usize> = (0..config.kcs).collect();
    if config.shuffle_kc_order {
        kc_order.shuffle(&mut rng);
    }
    let block_len: Vec<usize> = sizes.iter().map(|&s| s.min(config.contiguous_items)).collect();

    // Blocks are atomic units, so a deferred item never splits another block.
    let mut units: Vec<Vec<usize>> = kc_order
        .iter()
        .map(|&k| (first_item[k]..first_item[k] + block_len[k]).collect())
        .collect();
    for &k in &kc_order {
        for item in first_item[k] + block_len[k]..first_item[k] + sizes[k] {
            let end = units.iter().position(|u| u[0] == first_item[k]).expect("block placed");
            let slot = rng.gen_range(end + 1..=units.len());
            units.insert(slot, vec![item]);
        }
    }
    let order = units.concat();
    Placement { order, kc_of, block_len }
}

/// Per-learner and per-KC learning-rate components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub student: Vec<f64>,
    pub skill: Vec<f64>,
}

impl RateTable {
    /// Both components drawn from U(0, 1), excluding the endpoints.
    pub fn draw(config: &SimConfig) -> Self {
        let mut rs = seed::rng(config.seed, &[STREAM_STUDENT_RATE]);
        let mut rk = seed::rng(config.seed, &[STREAM_SKILL_RATE]);
        RateTable {
            student: (0..config.learners).map(|_| rs.sample(Open01)).collect(),
            skill: (0..config.kcs).map(|_| rk.sample(Open01)).collect(),
        }
    }

    pub fn combined(&self, learner: usize, kc: usize) -> f64 {
        combine_rate(self.student[learner], self.skill[kc]).expect("rates drawn from the open interval")
    }
}

/// One learner's responses in presentation order, together with the latent
/// mastery state at each opportunity (before the emission).
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerTrace {
    pub correct: Vec<bool>,
    pub mastered: Vec<bool>,
}

/// Runs every KC's HMM for one learner. `rates[k]` is the learner's combined
/// learning rate on KC `k`.
pub fn simulate_learner(placement: &Placement, rates: &[f64], config: &SimConfig, learner: usize) -> LearnerTrace {
    let n = placement.order.len();
    let mut correct = vec![false; n];
    let mut mastered = vec![false; n];
    let positions = placement.positions();
    for (kc, &p_learn) in rates.iter().enumerate() {
        let mut emit = seed::rng(config.seed, &[STREAM_EMISSION, learner as u64, kc as u64]);
        let mut trans = seed::rng(config.seed, &[STREAM_TRANSITION, learner as u64, kc as u64]);
        let mut known = trans.gen::<f64>() < config.p_init;
        for item in placement.kc_items(kc) {
            let p = positions[item];
            mastered[p] = known;
            let p_correct = if known { 1.0 - config.p_slip } else { config.p_guess };
            correct[p] = emit.gen::<f64>() < p_correct;
            if !known {
                known = trans.gen::<f64>() < p_learn;
            }
        }
    }
    LearnerTrace { correct, mastered }
}

/// A simulated dataset with its true item → KC mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct SimDataset {
    pub dataset: ResponseDataset,
    pub truth: BTreeMap<String, String>,
    pub placement: Placement,
    pub rates: RateTable,
}

pub fn item_id(i: usize) -> String {
    format!("q{i:03}")
}

pub fn kc_id(k: usize) -> String {
    format!("kc{k:02}")
}

pub fn learner_id(l: usize) -> String {
    format!("L{l:04}")
}

/// Complete learner × item matrix in one global order shared by every learner.
pub fn generate_dataset(config: &SimConfig) -> Result<SimDataset, SimError> {
    config.validate()?;
    let placement = place_items(config);
    let rates = RateTable::draw(config);
    let rows: Vec<LearnerTrace> = (0..config.learners)
        .into_par_iter()
        .map(|l| {
            let r: Vec<f64> = (0..config.kcs).map(|k| rates.combined(l, k)).collect();
            simulate_learner(&placement, &r, config, l)
        })
        .collect();
    let mut records = Vec::with_capacity(config.learners * config.items);
    for (l, trace) in rows.iter().enumerate() {
        let lid = learner_id(l);
        for (p, (&item, &ok)) in placement.order.iter().zip(&trace.correct).enumerate() {
            records.push(ResponseRecord::new(lid.clone(), item_id(item), p as u64, ok));
        }
    }
    let dataset = ResponseDataset::from_records(records, OrderMode::Fixed).map_err(|e| SimError::Config(e.to_string()))?;
    let truth = placement
        .kc_of
        .iter()
        .enumerate()
        .map(|(i, &k)| (item_id(i), kc_id(k)))
        .collect();
    Ok(SimDataset {
        dataset,
        truth,
        placement,
        rates,
    })
}

pub fn truth_csv(truth: &BTreeMap<String, String>) -> String {
    let mut out = String::from("item_id,kc\n");
    for (i, k) in truth {
        out.push_str(&format!("{i},{k}\n"));
    }
    out
}

/// JSON manifest echoing the generating config next to a simulated dataset.
pub fn manifest_json(config: &SimConfig) -> String {
    let manifest = serde_json::json!({
        "tool": "itemkc",
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": crate::io::config_hash(config),
        "config": config,
        "kc_sizes": config.kc_sizes(),
    });
    let mut s = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn combine_rate_examples() {
        assert!((combine_rate(0.5, 0.5).unwrap() - 0.5).abs() < 1e-12);
        assert!((combine_rate(0.5, 0.8).unwrap() - 0.8).abs() < 1e-12);
        // σ(2 ln 4) = 16 / 17
        assert!((sigmoid(2.0 * 4f64.ln()) - 16.0 / 17.0).abs() < 1e-12);
        assert!((combine_rate(0.8, 0.8).unwrap() - 16.0 / 17.0).abs() < 1e-12);
        assert!(combine_rate(0.0, 0.5).is_err());
        assert!(combine_rate(0.5, 1.0).is_err());
    }

    #[test]
    fn default_placement_has_ten_items_per_kc() {
        let c = SimConfig::default();
        assert!(c.kc_sizes().iter().all(|&s| s == 10));
        let p = place_items(&c);
        assert!(p.block_len.iter().all(|&b| b == 6));
        assert_eq!(p.order.len(), 200);
    }

    #[test]
    fn small_kcs_are_fully_contiguous() {
        let c = SimConfig {
            kcs: 5,
            items: 23,
            contiguous_items: 6,
            ..SimConfig::default()
        };
        let p = place_items(&c);
        // Sizes 5,5,5,4,4: every KC fits in its block.
        let pos = p.positions();
        for k in 0..5 {
            let ps: Vec<usize> = p.kc_items(k).iter().map(|&i| pos[i]).collect();
            assert_eq!(ps.last().unwrap() - ps[0] + 1, ps.len(), "kc {k}");
        }
    }

    fn check_valid(p: &Placement) {
        let n = p.order.len();
        let mut seen = p.order.clone();
        seen.sort();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        let pos = p.positions();
        for k in 0..p.n_kcs() {
            let items = p.kc_items(k);
            let block: Vec<usize> = items[..p.block_len[k]].iter().map(|&i| pos[i]).collect();
            // Block is consecutive.
            assert!(block.windows(2).all(|w| w[1] == w[0] + 1));
            // Deferred items come after it.
            let end = *block.last().unwrap();
            assert!(items[p.block_len[k]..].iter().all(|&i| pos[i] > end));
        }
    }

    #[test]
    fn tiny_fixture_every_seed_is_valid() {
        for seed in 0..500 {
            let c = SimConfig {
                kcs: 2,
                items: 8,
                contiguous_items: 3,
                seed,
                ..SimConfig::default()
            };
            let p = place_items(&c);
            check_valid(&p);
            // KC 1's deferred item sits after its block, in the last two slots.
            let pos = p.positions();
            assert!(pos[7] > pos[6] && pos[7] >= 6);
        }
    }

    #[test]
    fn degenerate_learning_rates() {
        let c = SimConfig {
            learners: 1,
            ..SimConfig::default()
        };
        let p = place_items(&c);
        let mut first = 0usize;
        let mut later = 0usize;
        let mut n_first = 0usize;
        let mut n_later = 0usize;
        let mut never = 0usize;
        for learner in 0..300 {
            let t = simulate_learner(&p, &vec![1.0; c.kcs], &c, learner);
            for k in 0..c.kcs {
                let items = p.kc_items(k);
                let pos = p.positions();
                for (r, &i) in items.iter().enumerate() {
                    if r == 0 {
                        first += usize::from(t.correct[pos[i]]);
                        n_first += 1;
                    } else {
                        assert!(t.mastered[pos[i]]);
                        later += usize::from(t.correct[pos[i]]);
                        n_later += 1;
                    }
                }
            }
            let z = simulate_learner(&p, &vec![0.0; c.kcs], &c, learner);
            assert!(z.mastered.iter().all(|m| !m));
            never += z.correct.iter().filter(|&&x| x).count();
        }
        let f = first as f64 / n_first as f64;
        let l = later as f64 / n_later as f64;
        let z = never as f64 / (300.0 * 200.0);
        assert!((f - 0.2).abs() < 0.03, "{f}");
        assert!((l - 0.9).abs() < 0.01, "{l}");
        assert!((z - 0.2).abs() < 0.01, "{z}");
    }

    #[test]
    fn mastery_never_reverts() {
        let c = SimConfig {
            learners: 200,
            ..SimConfig::with_seed(3)
        };
        let s = generate_dataset(&c).unwrap();
        for l in 0..c.learners {
            let r: Vec<f64> = (0..c.kcs).map(|k| s.rates.combined(l, k)).collect();
            let t = simulate_learner(&s.placement, &r, &c, l);
            let pos = s.placement.positions();
            for k in 0..c.kcs {
                let states: Vec<bool> = s.placement.kc_items(k).iter().map(|&i| t.mastered[pos[i]]).collect();
                assert!(states.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_complete() {
        let c = SimConfig {
            learners: 50,
            ..SimConfig::with_seed(9)
        };
        let a = generate_dataset(&c).unwrap();
        let b = generate_dataset(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dataset.n_learners(), 50);
        assert_eq!(a.dataset.n_items(), 200);
        assert_eq!(a.dataset.records().len(), 50 * 200);
        let kcs: std::collections::BTreeSet<_> = a.truth.values().collect();
        assert_eq!(kcs.len(), 20);
        let other = generate_dataset(&SimConfig { seed: 10, ..c }).unwrap();
        assert_ne!(a.dataset, other.dataset);
    }

    proptest! {
        #[test]
        fn combine_rate_symmetric_and_increasing(p in 0.01f64..0.98, q in 0.01f64..0.98, dp in 0.001f64..0.01) {
            let r = combine_rate(p, q).unwrap();
            prop_assert!((r - combine_rate(q, p).unwrap()).abs() < 1e-12);
            prop_assert!(combine_rate(p + dp, q).unwrap() > r);
            prop_assert!(combine_rate(p, q + dp).unwrap() > r);
        }

        #[test]
        fn placement_is_a_valid_permutation(kcs in 1usize..12, per in 1usize..14, extra in 0usize..12, cont in 1usize..8, seed_ in any::<u64>(), shuffle in any::<bool>()) {
            let c = SimConfig {
                kcs,
                items: kcs * per + extra.min(kcs - 1),
                contiguous_items: cont,
                shuffle_kc_order: shuffle,
                seed: seed_,
                ..SimConfig::default()
            };
            let p = place_items(&c);
            check_valid(&p);
        }
    }
}
