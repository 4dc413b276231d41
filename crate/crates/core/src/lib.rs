//! Bipartite user/URL engagement graphs reduced with truncated SVD, NMF or the
//! Infinite Relational Model, used as predictors in an L1-penalized logistic
//! regression for click-through rate prediction.
//!
//! The crate is organised as a pipeline:
//!
//! * [`ingest`] parses transaction logs, splits them by day and generates
//!   synthetic logs with planted co-cluster structure.
//! * [`graph`] builds and filters the binary user×URL graph.
//! * [`svd`], [`nmf`] and [`irm`] reduce the graph.
//! * [`features`] assembles sparse design matrices from predictor groups f1–f8.
//! * [`logreg`] trains the model with OWL-QN and predicts, including the
//!   product-form predictor for binary rows.
//! * [`eval`] computes normalized log-likelihood and lift and runs the
//!   regularization selection protocol.
//! * [`bidserver`] serves predictions over a TCP line protocol.
//! * [`experiment`] wires the stages together for end-to-end runs.

#![allow(
    clippy::needless_range_loop,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::type_complexity
)]

pub mod bidserver;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod graph;
pub mod ingest;
pub mod irm;
pub mod linalg;
pub mod logreg;
pub mod nmf;
pub mod rng;
pub mod svd;

pub use error::{Error, Result};
pub use eval::{lift, normalized_ll, EvalReport};
pub use features::{DesignMatrix, FeatureGroup, FeatureSpec, SparseRow};
pub use graph::BipartiteGraph;
pub use ingest::{Event, LabeledObservation, PlantedStructure, Transaction};
pub use irm::{IrmHyperParams, IrmResult, IrmState};
pub use logreg::{LogRegModel, WeightTable};
pub use nmf::NmfFactors;
pub use svd::SvdFactors;
