//! Decision rules for semantic segmentation under class imbalance.
//!
//! The crate compares two pixel-wise decision rules applied to softmax
//! probability maps: the Bayes rule (argmax of the posterior) and the
//! maximum-likelihood rule (argmax of posterior divided by class prior).
//! Around that core sit the pieces needed to evaluate the comparison end
//! to end:
//!
//! - [`tensor`] — dense array containers (label maps, probability maps,
//!   prior stacks) and their invariants,
//! - [`io`] — the binary tensor container and PGM export,
//! - [`priors`] — pixel-wise and global prior estimation with Gaussian
//!   smoothing and a lower cutoff,
//! - [`decision`] — the two decision rules, probability-map averaging and
//!   expected-cost evaluation,
//! - [`components`] — connected components plus small-component removal
//!   and nearby-component merging,
//! - [`metrics`] — pixel-level confusion/IoU scores and segment-level
//!   matching,
//! - [`analysis`] — empirical CDFs, stochastic dominance, size-conditioned
//!   detection histograms and non-detection heatmaps,
//! - [`synth`] — a deterministic synthetic scene generator with an exact
//!   posterior oracle and an end-to-end experiment driver.

pub mod analysis;
pub mod components;
pub mod decision;
pub mod io;
pub mod metrics;
pub mod priors;
pub mod synth;
pub mod tensor;

pub use components::{ComponentSet, Connectivity, Provenance, Segment};
pub use decision::{CostModel, DecisionRule, Priors};
pub use metrics::{ClassScores, ConfusionMatrix, MatchResult, SegmentScore};
pub use tensor::{FeatureMap, GlobalPriors, LabelMap, PriorStack, ProbabilityMap};
