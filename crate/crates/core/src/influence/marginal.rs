//! Influence flows by leave-one-out retraining.
//!
//! The marginal influence of a deletion unit (an individual's training
//! examples, or a single example) on a deployment example is the change in
//! that example's prediction loss when the model is retrained without the
//! unit: `loss_without - loss_with`, so removing helpful data gives a
//! positive value. Retraining reuses the full run's initial parameters and
//! config; only the training data differs.

use rayon::prelude::*;

use crate::datamodel::{FlowLedger, InfluenceMethod, SplitPair};
use crate::error::{Error, Result};
use crate::influence::PairTable;
use crate::models::{init_params, prediction_loss, ModelSpec, Parameters};
use crate::training::{train_from, TrainConfig, TrainSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    /// Delete all of one individual's training examples at a time.
    Individual,
    /// Delete one training example at a time. Retraining count equals the
    /// train set size, so this is guarded to small problems.
    Example,
}

const MAX_EXAMPLE_UNITS: usize = 4_000;

pub struct MarginalRun {
    pub ledger: FlowLedger,
    /// Parameters of the full (nothing deleted) training run.
    pub params: Parameters,
    pub summary: TrainSummary,
}

/// Leave-one-out flows over a split. One retraining per deletion unit;
/// units are independent and run in parallel, merged in a fixed order.
pub fn marginal_flows(
    spec: &ModelSpec,
    split: &SplitPair,
    config: &TrainConfig,
    granularity: Granularity,
) -> Result<MarginalRun> {
    if split.train.schema() != split.deploy.schema() {
        return Err(Error::invalid("train and deploy schemas differ"));
    }
    if granularity == Granularity::Example && split.train.len() > MAX_EXAMPLE_UNITS {
        return Err(Error::TooLarge(format!(
            "example-granularity marginal flows would retrain {} times",
            split.train.len()
        )));
    }

    let table = PairTable::build(&split.train, &split.deploy);
    let k = table.num_slots();
    let init = init_params(spec, split.train.schema(), &split.train, config.seed)?;
    let (full_params, summary) = train_from(spec, init.clone(), &split.train, config, None)?;

    let full_losses: Vec<f64> = split
        .deploy
        .examples()
        .iter()
        .map(|ex| prediction_loss(spec, &full_params, ex))
        .collect();

    // Deletion units: (unit's slot, train positions to remove).
    let units: Vec<(u32, Vec<usize>)> = match granularity {
        Granularity::Individual => split
            .train
            .individual_index()
            .iter()
            .map(|(id, positions)| {
                let slot = table.ids.binary_search(id).unwrap() as u32;
                (slot, positions.clone())
            })
            .collect(),
        Granularity::Example => (0..split.train.len())
            .map(|pos| (table.train_slot[pos], vec![pos]))
            .collect(),
    };

    // Per unit: its slot and the summed loss delta per deployment slot.
    let per_unit: Vec<(u32, Vec<f64>)> = units
        .par_iter()
        .map(|(unit_slot, positions)| -> Result<(u32, Vec<f64>)> {
            let reduced = split.train.without_positions(positions)?;
            let (params, _) = train_from(spec, init.clone(), &reduced, config, None)?;
            let mut delta_by_slot = vec![0.0; k];
            for (pos, ex) in split.deploy.examples().iter().enumerate() {
                let delta = prediction_loss(spec, &params, ex) - full_losses[pos];
                delta_by_slot[table.deploy_slot[pos] as usize] += delta;
            }
            Ok((*unit_slot, delta_by_slot))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut inflow = vec![0.0; k];
    let mut outflow = vec![0.0; k];
    let mut selfflow = vec![0.0; k];
    for (unit_slot, delta_by_slot) in &per_unit {
        let u = *unit_slot as usize;
        for (v, delta) in delta_by_slot.iter().enumerate() {
            if v == u {
                selfflow[u] += delta;
            } else {
                outflow[u] += delta;
                inflow[v] += delta;
            }
        }
    }

    let ledger = table.ledger(InfluenceMethod::Marginal, inflow, outflow, Some(selfflow));
    ledger.validate()?;
    Ok(MarginalRun {
        ledger,
        params: full_params,
        summary,
    })
}
