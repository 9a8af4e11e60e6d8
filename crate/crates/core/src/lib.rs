//! Item similarity from binary learner responses, clustering of items into
//! knowledge components, evaluation against expert labels, and an
//! individualized Bayesian Knowledge Tracing simulator that produces data with
//! a known item-to-KC mapping.
//!
//! The typical flow is:
//!
//! 1. [`dataset`] loads first-attempt responses (and optionally expert labels)
//!    and filters out learners with too little activity.
//! 2. [`similarity`] builds per-pair contingency tables that respect the order
//!    in which each learner saw the two items, then turns them into a
//!    user-based similarity matrix with Kappa Learning or a reference measure.
//! 3. [`clusterkit`] derives an item-based distance matrix from the similarity
//!    rows and clusters it with Ward linkage or K-means.
//! 4. [`evaluation`] scores clusterings with the Adjusted Rand Index and picks
//!    a cluster count with the Gap statistic.
//! 5. [`pipeline`] wires the stages together for real data or for repeated
//!    simulation studies driven by [`bkt`].

pub mod bkt;
pub mod clusterkit;
pub mod dataset;
pub mod evaluation;
pub mod io;
pub mod pipeline;
pub mod seed;
pub mod similarity;
pub mod stats;

pub use clusterkit::{Clustering, DistanceMatrix, Metric};
pub use dataset::{Granularity, LabelSet, OrderMode, ResponseDataset, ResponseRecord};
pub use evaluation::{GapProfile, GapRule, PairContingency};
pub use similarity::{ContingencyTable, Measure, SimilarityMatrix};
