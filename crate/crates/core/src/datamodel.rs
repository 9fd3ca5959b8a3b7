//! Core data types: examples, datasets, splits, and flow ledgers.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stable identifier of the person a training example belongs to.
///
/// For ratings data this is the user id from the source file; for tabular
/// datasets where each row is one person it is the row ordinal.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct IndividualId(pub u64);

impl fmt::Display for IndividualId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Feature content of one example.
#[derive(Debug, Clone, PartialEq)]
pub enum FeaturePayload {
    /// Dense feature vector for regression-style models.
    Dense(Vec<f64>),
    /// (user, item) index pair for matrix factorization.
    Pair { user: usize, item: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub individual: IndividualId,
    pub features: FeaturePayload,
    pub label: f64,
}

/// Shape contract all examples of a dataset must satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSchema {
    Dense { dim: usize },
    Sparse { num_users: usize, num_items: usize },
}

/// One way an example can violate its dataset's schema.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyDataset,
    DimensionMismatch {
        position: usize,
        expected: usize,
        found: usize,
    },
    PayloadKindMismatch {
        position: usize,
    },
    UserOutOfRange {
        position: usize,
        user: usize,
        num_users: usize,
    },
    ItemOutOfRange {
        position: usize,
        item: usize,
        num_items: usize,
    },
    NonFiniteFeature {
        position: usize,
    },
    NonFiniteLabel {
        position: usize,
    },
}

impl Violation {
    pub fn position(&self) -> Option<usize> {
        match *self {
            Violation::EmptyDataset => None,
            Violation::DimensionMismatch { position, .. }
            | Violation::PayloadKindMismatch { position }
            | Violation::UserOutOfRange { position, .. }
            | Violation::ItemOutOfRange { position, .. }
            | Violation::NonFiniteFeature { position }
            | Violation::NonFiniteLabel { position } => Some(position),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Violation::EmptyDataset => write!(f, "dataset has no examples"),
            Violation::DimensionMismatch {
                position,
                expected,
                found,
            } => write!(
                f,
                "dimension mismatch at {position}: expected {expected}, found {found}"
            ),
            Violation::PayloadKindMismatch { position } => {
                write!(f, "payload kind does not match schema at {position}")
            }
            Violation::UserOutOfRange {
                position,
                user,
                num_users,
            } => write!(
                f,
                "user index {user} out of vocabulary (num_users={num_users}) at {position}"
            ),
            Violation::ItemOutOfRange {
                position,
                item,
                num_items,
            } => write!(
                f,
                "item index {item} out of vocabulary (num_items={num_items}) at {position}"
            ),
            Violation::NonFiniteFeature { position } => {
                write!(f, "non-finite feature value at {position}")
            }
            Violation::NonFiniteLabel { position } => {
                write!(f, "non-finite label at {position}")
            }
        }
    }
}

/// Checks every example against the schema. Returns all violations found,
/// in position order; an empty vector means the dataset is valid.
pub fn validate_examples(examples: &[Example], schema: &FeatureSchema) -> Vec<Violation> {
    let mut violations = Vec::new();
    if examples.is_empty() {
        violations.push(Violation::EmptyDataset);
        return violations;
    }
    for (position, ex) in examples.iter().enumerate() {
        if !ex.label.is_finite() {
            violations.push(Violation::NonFiniteLabel { position });
        }
        match (&ex.features, schema) {
            (FeaturePayload::Dense(x), FeatureSchema::Dense { dim }) => {
                if x.len() != *dim {
                    violations.push(Violation::DimensionMismatch {
                        position,
                        expected: *dim,
                        found: x.len(),
                    });
                }
                if x.iter().any(|v| !v.is_finite()) {
                    violations.push(Violation::NonFiniteFeature { position });
                }
            }
            (
                FeaturePayload::Pair { user, item },
                FeatureSchema::Sparse {
                    num_users,
                    num_items,
                },
            ) => {
                if user >= num_users {
                    violations.push(Violation::UserOutOfRange {
                        position,
                        user: *user,
                        num_users: *num_users,
                    });
                }
                if item >= num_items {
                    violations.push(Violation::ItemOutOfRange {
                        position,
                        item: *item,
                        num_items: *num_items,
                    });
                }
            }
            _ => violations.push(Violation::PayloadKindMismatch { position }),
        }
    }
    violations
}

/// Maps each individual to the positions of their examples, in ascending
/// position order. Every position appears under exactly one individual.
pub fn build_individual_index(examples: &[Example]) -> BTreeMap<IndividualId, Vec<usize>> {
    let mut index: BTreeMap<IndividualId, Vec<usize>> = BTreeMap::new();
    for (pos, ex) in examples.iter().enumerate() {
        index.entry(ex.individual).or_default().push(pos);
    }
    index
}

/// An immutable, validated collection of examples.
#[derive(Debug, Clone)]
pub struct Dataset {
    examples: Vec<Example>,
    schema: FeatureSchema,
    individual_index: BTreeMap<IndividualId, Vec<usize>>,
}

impl Dataset {
    /// Validates and indexes the examples. All construction goes through
    /// here, so downstream code may assume datasets are well formed.
    pub fn new(examples: Vec<Example>, schema: FeatureSchema) -> Result<Self> {
        let violations = validate_examples(&examples, &schema);
        if !violations.is_empty() {
            return Err(Error::Validation(violations));
        }
        let individual_index = build_individual_index(&examples);
        Ok(Dataset {
            examples,
            schema,
            individual_index,
        })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Individual -> ascending positions of that individual's examples.
    pub fn individual_index(&self) -> &BTreeMap<IndividualId, Vec<usize>> {
        &self.individual_index
    }

    pub fn individuals(&self) -> impl Iterator<Item = IndividualId> + '_ {
        self.individual_index.keys().copied()
    }

    pub fn num_individuals(&self) -> usize {
        self.individual_index.len()
    }

    /// New dataset with the given positions removed, same schema. Errors if
    /// nothing would remain.
    pub fn without_positions(&self, remove: &[usize]) -> Result<Dataset> {
        let mut drop = vec![false; self.examples.len()];
        for &pos in remove {
            if pos >= self.examples.len() {
                return Err(Error::invalid(format!(
                    "position {pos} out of range (len {})",
                    self.examples.len()
                )));
            }
            drop[pos] = true;
        }
        let kept: Vec<Example> = self
            .examples
            .iter()
            .enumerate()
            .filter(|(i, _)| !drop[*i])
            .map(|(_, ex)| ex.clone())
            .collect();
        if kept.is_empty() {
            return Err(Error::invalid(
                "removing these positions would empty the dataset",
            ));
        }
        Dataset::new(kept, self.schema)
    }
}

/// Train/deploy partition of a source dataset.
#[derive(Debug, Clone)]
pub struct SplitPair {
    pub train: Dataset,
    pub deploy: Dataset,
    /// Seed the shuffle was drawn from.
    pub seed: u64,
    pub train_fraction: f64,
    /// Source-dataset positions that went to train, in train order.
    pub train_source: Vec<usize>,
    /// Source-dataset positions that went to deploy, in deploy order.
    pub deploy_source: Vec<usize>,
}

/// Which influence method produced a ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InfluenceMethod {
    TracIn,
    Marginal,
}

impl InfluenceMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            InfluenceMethod::TracIn => "tracin",
            InfluenceMethod::Marginal => "marginal",
        }
    }
}

impl fmt::Display for InfluenceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-individual influence flows from one run.
///
/// Sign convention: positive inflow means the rest of the population's
/// training data reduced this individual's deployment loss, and positive
/// outflow means this individual's training data reduced everyone else's.
/// `inflow` and `outflow` always carry the same key set: every individual
/// observed in the split, whether or not they had examples on both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowLedger {
    pub method: InfluenceMethod,
    pub inflow: BTreeMap<IndividualId, f64>,
    pub outflow: BTreeMap<IndividualId, f64>,
    /// Influence of an individual's own training data on their own
    /// deployment examples. Not part of inflow or outflow.
    pub selfflow: Option<BTreeMap<IndividualId, f64>>,
    /// Number of train examples per individual in the run that produced
    /// this ledger. Zero means the individual only appeared on the deploy
    /// side; aggregation across splits uses this to average outflow over
    /// the splits where it is defined.
    pub train_counts: BTreeMap<IndividualId, usize>,
    /// Deploy-side analogue of `train_counts`, used the same way for
    /// inflow.
    pub deploy_counts: BTreeMap<IndividualId, usize>,
}

impl FlowLedger {
    /// Checks the structural invariants: identical key sets across all
    /// per-individual maps and finite flow values.
    pub fn validate(&self) -> Result<()> {
        let keys: Vec<IndividualId> = self.inflow.keys().copied().collect();
        let same = |other: &BTreeMap<IndividualId, f64>| other.keys().copied().eq(keys.iter().copied());
        if !same(&self.outflow) {
            return Err(Error::invalid("ledger inflow/outflow key sets differ"));
        }
        if let Some(sf) = &self.selfflow {
            if !same(sf) {
                return Err(Error::invalid("ledger selfflow key set differs"));
            }
        }
        if !self.train_counts.keys().copied().eq(keys.iter().copied())
            || !self.deploy_counts.keys().copied().eq(keys.iter().copied())
        {
            return Err(Error::invalid("ledger count key sets differ"));
        }
        for (id, v) in self.inflow.iter().chain(self.outflow.iter()) {
            if !v.is_finite() {
                return Err(Error::invalid(format!("non-finite flow for individual {id}")));
            }
        }
        if let Some(sf) = &self.selfflow {
            for (id, v) in sf {
                if !v.is_finite() {
                    return Err(Error::invalid(format!(
                        "non-finite selfflow for individual {id}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn individuals(&self) -> impl Iterator<Item = IndividualId> + '_ {
        self.inflow.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.inflow.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inflow.is_empty()
    }

    /// Writes the ledger as CSV with a fixed header:
    /// `individual_id,inflow,outflow,selfflow,method`. Selfflow cells are
    /// empty when the method does not define selfflow.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io_err = |e: csv::Error| Error::invalid(format!("ledger csv write failed: {e}"));
        w.write_record(["individual_id", "inflow", "outflow", "selfflow", "method"])
            .map_err(io_err)?;
        for id in self.inflow.keys() {
            let selfflow = self
                .selfflow
                .as_ref()
                .map(|sf| format!("{}", sf[id]))
                .unwrap_or_default();
            w.write_record([
                id.to_string(),
                format!("{}", self.inflow[id]),
                format!("{}", self.outflow[id]),
                selfflow,
                self.method.as_str().to_string(),
            ])
            .map_err(io_err)?;
        }
        w.flush().map_err(|e| Error::invalid(format!("ledger csv flush failed: {e}")))?;
        Ok(())
    }
}
