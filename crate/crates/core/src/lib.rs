//! Explainable dialect classification as geolinguistic profiling.
//!
//! A text-region classifier (native or external) is explained by leave-one-word-out
//! ablation; the most impactful words of correctly classified instances are then
//! aggregated into ranked, class-exclusive lexicons.
//!
//! - [`corpus`]: ingestion, region schemes, splits, synthetic corpora
//! - [`features`]: tokens, vocabulary, sparse vectors, word removal
//! - [`classifier`]: scorer contract, logistic regression, external scorer protocol
//! - [`explain`]: per-instance attribution
//! - [`aggregate`]: per-class lexicons
//! - [`eval`]: metrics, baselines, place-name shares, reports
//! - [`cli`]: the `geoprof` command line

pub mod aggregate;
pub mod classifier;
pub mod cli;
pub mod corpus;
pub mod eval;
pub mod explain;
pub mod features;
