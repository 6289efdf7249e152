//! Matched observational studies over a hierarchy of exposure definitions.
//!
//! The pipeline: classify subjects into progressively narrower exposure
//! groups sharing one control cohort; estimate covariate-balancing
//! propensity scores; build rank-based Mahalanobis distances with a
//! propensity caliper; construct optimal full matchings by min-cost flow,
//! escalating set sizes until covariate balance; test each exposure's null
//! by randomization inference within matched sets; and walk the hierarchy
//! with a testing-in-order rule that controls the family-wise error rate.

pub mod attrition;
pub mod balance;
pub mod cohort;
pub mod distance;
pub mod error;
pub mod flow;
pub mod gatekeeper;
pub mod inference;
pub mod matching;
pub mod outcomes;
pub mod pipeline;
pub mod propensity;
pub mod schema;
pub mod simulate;
pub mod taxonomy;

pub use error::{Error, Result};
