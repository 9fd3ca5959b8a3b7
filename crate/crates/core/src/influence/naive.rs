//! Pairwise influence computed from the definition.
//!
//! Records every step's parameters and batch during training, then builds
//! the full train x deploy influence matrix
//! `Inf(z, z') = sum over steps with z in B_t of eta * g(w_t, z') . g(w_t, z)`
//! and aggregates it into flows with literal nested loops. Quadratic in
//! the dataset sizes and proportional to the step count in memory; guarded
//! so it is only usable on small problems. This path exists to check the
//! online implementation, so it deliberately shares no accumulation logic
//! with it.

use crate::datamodel::{Dataset, FlowLedger, InfluenceMethod, SplitPair};
use crate::error::{Error, Result};
use crate::influence::PairTable;
use crate::models::{grad_example, layout_for, ModelSpec, Parameters, RegCounts};
use crate::training::{train, StepHook, StepView, TrainConfig};

const MAX_PAIRS: usize = 4_000_000;
const MAX_STEPS: usize = 20_000;

struct Checkpoint {
    learning_rate: f64,
    batch: Vec<usize>,
    params: Parameters,
}

struct Recorder {
    checkpoints: Vec<Checkpoint>,
}

impl StepHook for Recorder {
    fn on_step(&mut self, view: &StepView<'_>) -> Result<()> {
        self.checkpoints.push(Checkpoint {
            learning_rate: view.learning_rate,
            batch: view.batch.to_vec(),
            params: view.params.clone(),
        });
        Ok(())
    }
}

/// Influence flows by the definition. Small problems only.
pub fn tracin_flows_naive(
    spec: &ModelSpec,
    split: &SplitPair,
    config: &TrainConfig,
) -> Result<FlowLedger> {
    let train_set = &split.train;
    let deploy_set = &split.deploy;
    let pairs = train_set.len().saturating_mul(deploy_set.len());
    if pairs > MAX_PAIRS || config.steps > MAX_STEPS {
        return Err(Error::TooLarge(format!(
            "naive pairwise influence on {} x {} examples over {} steps; use the online path",
            train_set.len(),
            deploy_set.len(),
            config.steps
        )));
    }

    let mut recorder = Recorder {
        checkpoints: Vec::with_capacity(config.steps),
    };
    train(spec, train_set, config, Some(&mut recorder))?;

    let layout = layout_for(spec, train_set.schema())?;
    let counts = RegCounts::from_train(train_set);
    let n = train_set.len();
    let m = deploy_set.len();

    // influence[z * m + z'] over source positions.
    let mut influence = vec![0.0f64; n * m];
    for cp in &recorder.checkpoints {
        let deploy_grads: Vec<_> = deploy_set
            .examples()
            .iter()
            .map(|ex| grad_example(spec, &cp.params, ex, &counts))
            .collect();
        for &z in &cp.batch {
            let mut g = grad_example(spec, &cp.params, &train_set.examples()[z], &counts);
            if let Some(c) = config.clip_norm {
                g.clip(c);
            }
            let row = &mut influence[z * m..(z + 1) * m];
            for (cell, h) in row.iter_mut().zip(&deploy_grads) {
                *cell += cp.learning_rate * g.dot(h, &layout);
            }
        }
    }

    aggregate_pairwise(train_set, deploy_set, &influence)
}

/// Sums a full pairwise influence matrix into per-individual flows by the
/// definition: inflow excludes the individual's own training examples,
/// outflow excludes their own deployment examples, selfflow is the own-own
/// block.
fn aggregate_pairwise(
    train_set: &Dataset,
    deploy_set: &Dataset,
    influence: &[f64],
) -> Result<FlowLedger> {
    let table = PairTable::build(train_set, deploy_set);
    let k = table.num_slots();
    let m = deploy_set.len();
    let mut inflow = vec![0.0; k];
    let mut outflow = vec![0.0; k];
    let mut selfflow = vec![0.0; k];

    for (u, _) in table.ids.iter().enumerate() {
        let u = u as u32;
        for (z, &train_slot) in table.train_slot.iter().enumerate() {
            for (zp, &deploy_slot) in table.deploy_slot.iter().enumerate() {
                let val = influence[z * m + zp];
                if deploy_slot == u && train_slot != u {
                    inflow[u as usize] += val;
                }
                if train_slot == u && deploy_slot != u {
                    outflow[u as usize] += val;
                }
                if train_slot == u && deploy_slot == u {
                    selfflow[u as usize] += val;
                }
            }
        }
    }

    let ledger = table.ledger(InfluenceMethod::TracIn, inflow, outflow, Some(selfflow));
    ledger.validate()?;
    Ok(ledger)
}
