//! Influence flow computation.
//!
//! Inflow of an individual `u` is the summed influence of everyone else's
//! training examples on `u`'s deployment examples; outflow is the summed
//! influence of `u`'s training examples on everyone else's deployment
//! examples. Influence of one's own training data on one's own deployment
//! examples is tracked separately as selfflow. Positive flow means the
//! training data reduced deployment loss.
//!
//! [`tracin_flows_online`] accumulates first-order (gradient dot product)
//! influence during a single training run. [`tracin_flows_naive`] computes
//! the same quantity from the definition, pair by pair, and exists as a
//! correctness oracle for small problems. [`marginal_flows`] measures
//! influence by leave-one-out retraining instead.

mod marginal;
mod naive;
mod online;

pub use marginal::{marginal_flows, Granularity, MarginalRun};
pub use naive::tracin_flows_naive;
pub use online::{tracin_flows_online, TracinRun};

use crate::datamodel::{Dataset, FlowLedger, IndividualId, InfluenceMethod};
use crate::reciprocity::percentile;

/// Steps whose actual deployment-loss change is below this are excluded
/// from relative discrepancy statistics; the ratio is meaningless there.
pub const DISCREPANCY_ACTUAL_FLOOR: f64 = 1e-12;

/// Relative error of the first-order prediction of one step's deployment
/// loss change: `|predicted - actual| / |actual|`. `None` when the actual
/// change is too small for the ratio to mean anything.
pub fn relative_discrepancy(predicted: f64, actual: f64) -> Option<f64> {
    if actual.abs() < DISCREPANCY_ACTUAL_FLOOR {
        None
    } else {
        Some((predicted - actual).abs() / actual.abs())
    }
}

/// Per-step relative discrepancies of a training run; `None` entries are
/// steps where the actual change was below [`DISCREPANCY_ACTUAL_FLOOR`].
#[derive(Debug, Clone, Default)]
pub struct DiscrepancySeries {
    pub per_step: Vec<Option<f64>>,
}

impl DiscrepancySeries {
    pub fn defined(&self) -> Vec<f64> {
        self.per_step.iter().flatten().copied().collect()
    }

    /// Nearest-rank percentile (q in [0, 1]) over the defined steps.
    pub fn percentile(&self, q: f64) -> Option<f64> {
        let mut defined = self.defined();
        if defined.is_empty() {
            return None;
        }
        defined.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Some(percentile(&defined, q))
    }
}

/// Compact individual table shared by the flow implementations: individuals
/// of the split in sorted order, position -> slot maps for both sides, and
/// per-slot example counts.
pub(crate) struct PairTable {
    pub ids: Vec<IndividualId>,
    pub train_slot: Vec<u32>,
    pub deploy_slot: Vec<u32>,
    pub train_counts: Vec<usize>,
    pub deploy_counts: Vec<usize>,
}

impl PairTable {
    pub fn build(train: &Dataset, deploy: &Dataset) -> PairTable {
        let mut ids: Vec<IndividualId> = train.individuals().chain(deploy.individuals()).collect();
        ids.sort_unstable();
        ids.dedup();
        let slot_of = |id: IndividualId| ids.binary_search(&id).unwrap() as u32;
        let train_slot: Vec<u32> = train
            .examples()
            .iter()
            .map(|ex| slot_of(ex.individual))
            .collect();
        let deploy_slot: Vec<u32> = deploy
            .examples()
            .iter()
            .map(|ex| slot_of(ex.individual))
            .collect();
        let mut train_counts = vec![0usize; ids.len()];
        for &s in &train_slot {
            train_counts[s as usize] += 1;
        }
        let mut deploy_counts = vec![0usize; ids.len()];
        for &s in &deploy_slot {
            deploy_counts[s as usize] += 1;
        }
        PairTable {
            ids,
            train_slot,
            deploy_slot,
            train_counts,
            deploy_counts,
        }
    }

    pub fn num_slots(&self) -> usize {
        self.ids.len()
    }

    pub fn ledger(
        &self,
        method: InfluenceMethod,
        inflow: Vec<f64>,
        outflow: Vec<f64>,
        selfflow: Option<Vec<f64>>,
    ) -> FlowLedger {
        let zip = |values: Vec<f64>| {
            self.ids
                .iter()
                .copied()
                .zip(values)
                .collect::<std::collections::BTreeMap<_, _>>()
        };
        FlowLedger {
            method,
            inflow: zip(inflow),
            outflow: zip(outflow),
            selfflow: selfflow.map(zip),
            train_counts: self
                .ids
                .iter()
                .copied()
                .zip(self.train_counts.iter().copied())
                .collect(),
            deploy_counts: self
                .ids
                .iter()
                .copied()
                .zip(self.deploy_counts.iter().copied())
                .collect(),
        }
    }
}
