//! Training-data influence flows for gradient-descent models.
//!
//! This crate trains linear regression, logistic regression, and matrix
//! factorization models with plain (mini-batch) gradient descent while
//! measuring how much each individual's training data helped everyone
//! else's deployment predictions (outflow) and how much everyone else's
//! data helped that individual's predictions (inflow).
//!
//! Two influence methods are provided:
//!
//! * [`influence::tracin_flows_online`]: a first-order, one-pass method
//!   that accumulates gradient dot products while the model trains. A
//!   deliberately naive pairwise implementation
//!   ([`influence::tracin_flows_naive`]) exists purely as a correctness
//!   oracle.
//! * [`influence::marginal_flows`]: leave-one-unit-out retraining.
//!
//! [`reciprocity`] turns a pair of flow vectors into the summary
//! statistics used to judge whether individuals get back roughly as much
//! as they give: per-individual reciprocity scores, `(p, alpha)`
//! thresholds, inflow/outflow correlation, sign fractions, and
//! signal-to-noise ratios across repeated runs.

pub mod datamodel;
pub mod error;
pub mod influence;
pub mod ingest;
pub mod models;
pub mod reciprocity;
pub mod report;
pub mod seeding;
pub mod training;

pub use datamodel::{
    Dataset, Example, FeaturePayload, FeatureSchema, FlowLedger, IndividualId, InfluenceMethod,
    SplitPair, Violation,
};
pub use error::{Error, Result};
pub use models::{GradientVector, ModelKind, ModelSpec, ParamLayout, Parameters, RegCounts};
pub use training::{BatchMode, SamplingMode, StepHook, StepView, TrainConfig, TrainSummary};
