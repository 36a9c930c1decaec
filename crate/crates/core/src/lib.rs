//! Discourse-to-price hedonic modelling.
//!
//! The crate turns raw transaction, market, discourse and image-feature tables
//! into an estimation sample and fits the hedonic price models on it:
//!
//! * [`ingest`] parses the input CSV/JSONL files and applies the `ln(1 + price)` transform.
//! * [`textmetrics`] cleans discourse text and scores sentiment, labels and topics.
//! * [`binning`] orders discourse by base-36 thread id, builds quantile pseudo-time
//!   bins, lags and rolling windows, and merges bins onto trades.
//! * [`smoothing`] fits local-level (random walk plus noise) models to bin series.
//! * [`visualindex`] builds the explicit-trait visual index (within-collection z, PC1).
//! * [`design`] assembles Mundlak within/between design matrices.
//! * [`mixedmodel`] fits the multi-component linear mixed model by maximum likelihood.
//! * [`clusterols`] fits the fixed-effects OLS benchmark with cluster-robust errors.
//! * [`simoracle`] simulates datasets with known parameters and dense brute-force oracles.
//! * [`pipeline`] wires the stages together for the command line tool.

pub mod binning;
pub mod clusterols;
pub mod design;
pub mod error;
pub mod ingest;
pub mod mixedmodel;
pub mod pipeline;
pub mod simoracle;
pub mod smoothing;
pub mod stats;
pub mod table;
pub mod textmetrics;
pub mod visualindex;

pub use error::{Error, Result};
