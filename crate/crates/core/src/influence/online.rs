//! One-pass influence flow accumulation during training.
//!
//! At each step `t` the trainer applies the update
//! `w_{t+1} = w_t - eta * G_t` with `G_t` the (clipped) batch gradient
//! sum. The first-order influence of a train example `z` in the batch on a
//! deployment example `z'` is `eta * g(w_t, z') . g(w_t, z)`. Summing over
//! a whole individual's examples factorizes: with `H_t` the deployment
//! gradient sum, `A_u = G_t . H_t^u`, `B_u = G_t^u . H_t`, and
//! `C_u = G_t^u . H_t^u` (the superscript restricting to individual `u`),
//! the step adds `eta * (A_u - C_u)` to inflow, `eta * (B_u - C_u)` to
//! outflow, and `eta * C_u` to selfflow.
//!
//! For dense models the restricted sums are kept as one vector per
//! individual with examples on both sides. For matrix factorization each
//! gradient touches only one user row and one item row, so `C_u` reduces
//! to dot products over the embedding rows that `u`'s train and deploy
//! examples share; those "dual rows" are registered up front and summed
//! per step, which keeps a step linear in the number of examples times
//! the embedding dimension instead of the full parameter count.
//!
//! The same pass records, per step, the first-order prediction of the
//! deployment loss change, `-eta * G_t . H_t`, against the change actually
//! observed one step later; the relative gap is the discrepancy series.

use std::collections::HashMap;

use crate::datamodel::{Dataset, FlowLedger, InfluenceMethod, SplitPair};
use crate::error::{Error, Result};
use crate::influence::{relative_discrepancy, DiscrepancySeries, PairTable};
use crate::models::{
    grad_example_into, layout_for, loss_example, GradientVector, ModelSpec, ParamLayout,
    Parameters, RegCounts,
};
use crate::training::{train, StepHook, StepView, TrainConfig, TrainSummary};

/// Result of one tracked training run.
pub struct TracinRun {
    pub ledger: FlowLedger,
    pub params: Parameters,
    pub summary: TrainSummary,
    pub discrepancy: DiscrepancySeries,
}

const NO_ROW: u32 = u32::MAX;

/// Per-individual restricted gradient sums for one step.
enum PartStrategy {
    /// One parameter-length vector per dual individual, both sides.
    Dense {
        stride: usize,
        dual: Vec<bool>,
        train_part: Vec<f64>,
        deploy_part: Vec<f64>,
    },
    /// Embedding rows shared between an individual's two sides. Entry `k`
    /// of a position's pair is the dual-row id of its user row (`k = 0`)
    /// or item row (`k = 1`), or `NO_ROW`.
    Factored {
        dim: usize,
        row_slot: Vec<u32>,
        train_pos_rows: Vec<[u32; 2]>,
        deploy_pos_rows: Vec<[u32; 2]>,
        train_rows: Vec<f64>,
        deploy_rows: Vec<f64>,
    },
}

impl PartStrategy {
    fn build(spec: &ModelSpec, table: &PairTable, split: &SplitPair, layout: &ParamLayout) -> Self {
        if !spec.is_factorization() {
            let stride = layout.len();
            let k = table.num_slots();
            let dual: Vec<bool> = (0..k)
                .map(|s| table.train_counts[s] > 0 && table.deploy_counts[s] > 0)
                .collect();
            return PartStrategy::Dense {
                stride,
                dual,
                train_part: vec![0.0; k * stride],
                deploy_part: vec![0.0; k * stride],
            };
        }

        let dim = spec.embedding_dim;
        // Row key: (slot, side-agnostic embedding row). Item rows are
        // offset past the user rows so one usize encodes both kinds.
        let num_users = match *layout {
            ParamLayout::Embeddings { num_users, .. } => num_users,
            _ => unreachable!(),
        };
        let row_key = |user: usize, item: usize| -> (usize, usize) { (user, num_users + item) };

        let mut touched: HashMap<(u32, usize), u8> = HashMap::new();
        let mut mark = |slot: u32, row: usize, side: u8| {
            *touched.entry((slot, row)).or_insert(0) |= side;
        };
        for (pos, ex) in split.train.examples().iter().enumerate() {
            if let crate::datamodel::FeaturePayload::Pair { user, item } = ex.features {
                let (ur, ir) = row_key(user, item);
                mark(table.train_slot[pos], ur, 1);
                mark(table.train_slot[pos], ir, 1);
            }
        }
        for (pos, ex) in split.deploy.examples().iter().enumerate() {
            if let crate::datamodel::FeaturePayload::Pair { user, item } = ex.features {
                let (ur, ir) = row_key(user, item);
                mark(table.deploy_slot[pos], ur, 2);
                mark(table.deploy_slot[pos], ir, 2);
            }
        }
        // Deterministic id order keeps the per-slot summation order, and
        // with it the output bytes, independent of hash iteration order.
        let mut dual_rows: Vec<(u32, usize)> = touched
            .iter()
            .filter(|(_, &sides)| sides == 3)
            .map(|(&key, _)| key)
            .collect();
        dual_rows.sort_unstable();
        let id_of: HashMap<(u32, usize), u32> = dual_rows
            .iter()
            .enumerate()
            .map(|(i, &key)| (key, i as u32))
            .collect();
        let row_slot: Vec<u32> = dual_rows.iter().map(|&(slot, _)| slot).collect();

        let pos_rows = |examples: &[crate::datamodel::Example], slots: &[u32]| {
            examples
                .iter()
                .enumerate()
                .map(|(pos, ex)| {
                    let crate::datamodel::FeaturePayload::Pair { user, item } = ex.features
                    else {
                        unreachable!()
                    };
                    let (ur, ir) = row_key(user, item);
                    let slot = slots[pos];
                    [
                        id_of.get(&(slot, ur)).copied().unwrap_or(NO_ROW),
                        id_of.get(&(slot, ir)).copied().unwrap_or(NO_ROW),
                    ]
                })
                .collect::<Vec<[u32; 2]>>()
        };
        let train_pos_rows = pos_rows(split.train.examples(), &table.train_slot);
        let deploy_pos_rows = pos_rows(split.deploy.examples(), &table.deploy_slot);
        let r = dual_rows.len();
        PartStrategy::Factored {
            dim,
            row_slot,
            train_pos_rows,
            deploy_pos_rows,
            train_rows: vec![0.0; r * dim],
            deploy_rows: vec![0.0; r * dim],
        }
    }

    fn reset(&mut self) {
        match self {
            PartStrategy::Dense {
                train_part,
                deploy_part,
                ..
            } => {
                train_part.fill(0.0);
                deploy_part.fill(0.0);
            }
            PartStrategy::Factored {
                train_rows,
                deploy_rows,
                ..
            } => {
                train_rows.fill(0.0);
                deploy_rows.fill(0.0);
            }
        }
    }

    fn add_train(&mut self, pos: usize, slot: usize, grad: &GradientVector, layout: &ParamLayout) {
        match self {
            PartStrategy::Dense {
                stride,
                dual,
                train_part,
                ..
            } => {
                if dual[slot] {
                    grad.add_scaled_into(1.0, &mut train_part[slot * *stride..(slot + 1) * *stride], layout);
                }
            }
            PartStrategy::Factored {
                dim,
                train_pos_rows,
                train_rows,
                ..
            } =>

                add_sparse_rows(grad, train_pos_rows[pos], *dim, train_rows),
        }
    }

    fn add_deploy(&mut self, pos: usize, slot: usize, grad: &GradientVector, layout: &ParamLayout) {
        match self {
            PartStrategy::Dense {
                stride,
                dual,
                deploy_part,
                ..
            } => {
                if dual[slot] {
                    grad.add_scaled_into(1.0, &mut deploy_part[slot * *stride..(slot + 1) * *stride], layout);
                }
            }
            PartStrategy::Factored {
                dim,
                deploy_pos_rows,
                deploy_rows,
                ..
            } => add_sparse_rows(grad, deploy_pos_rows[pos], *dim, deploy_rows),
        }
    }

    /// Adds `C_u = G_t^u . H_t^u` for every individual into `c`.
    fn accumulate_c(&self, c: &mut [f64]) {
        match self {
            PartStrategy::Dense {
                stride,
                dual,
                train_part,
                deploy_part,
            } => {
                for (slot, is_dual) in dual.iter().enumerate() {
                    if !is_dual {
                        continue;
                    }
                    let a = &train_part[slot * stride..(slot + 1) * stride];
                    let b = &deploy_part[slot * stride..(slot + 1) * stride];
                    c[slot] += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
                }
            }
            PartStrategy::Factored {
                dim,
                row_slot,
                train_rows,
                deploy_rows,
                ..
            } => {
                for (r, &slot) in row_slot.iter().enumerate() {
                    let a = &train_rows[r * dim..(r + 1) * dim];
                    let b = &deploy_rows[r * dim..(r + 1) * dim];
                    c[slot as usize] += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
                }
            }
        }
    }
}

fn add_sparse_rows(grad: &GradientVector, rows: [u32; 2], dim: usize, storage: &mut [f64]) {
    let GradientVector::SparsePair {
        user_grad,
        item_grad,
        ..
    } = grad
    else {
        unreachable!("factored strategy requires sparse gradients")
    };
    for (row, part) in [(rows[0], user_grad), (rows[1], item_grad)] {
        if row != NO_ROW {
            let base = row as usize * dim;
            for (slot_val, g) in storage[base..base + dim].iter_mut().zip(part) {
                *slot_val += g;
            }
        }
    }
}

struct OnlineAccumulator<'a> {
    spec: &'a ModelSpec,
    layout: ParamLayout,
    deploy: &'a Dataset,
    counts: &'a RegCounts,
    table: &'a PairTable,
    part: PartStrategy,
    inflow: Vec<f64>,
    outflow: Vec<f64>,
    selfflow: Vec<f64>,
    g_sum: Vec<f64>,
    h_sum: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    deploy_grad: GradientVector,
    pending_predicted: Option<f64>,
    prev_deploy_loss: Option<f64>,
    per_step: Vec<Option<f64>>,
}

impl StepHook for OnlineAccumulator<'_> {
    fn on_step(&mut self, view: &StepView<'_>) -> Result<()> {
        let eta = view.learning_rate;
        let layout = self.layout;
        self.a.fill(0.0);
        self.b.fill(0.0);
        self.c.fill(0.0);
        self.part.reset();

        // Batch gradient sum G_t (gradients arrive already clipped).
        self.g_sum.fill(0.0);
        for g in view.batch_grads {
            g.add_scaled_into(1.0, &mut self.g_sum, &layout);
        }

        // Deployment pass: H_t, per-individual A_u, deployment loss, and
        // the deploy side of the restricted sums.
        self.h_sum.fill(0.0);
        let mut deploy_loss = 0.0;
        for (pos, ex) in self.deploy.examples().iter().enumerate() {
            grad_example_into(self.spec, view.params, ex, self.counts, &mut self.deploy_grad);
            deploy_loss += loss_example(self.spec, view.params, ex, self.counts);
            let slot = self.table.deploy_slot[pos] as usize;
            self.a[slot] += self.deploy_grad.dot_flat(&self.g_sum, &layout);
            self.deploy_grad.add_scaled_into(1.0, &mut self.h_sum, &layout);
            self.part.add_deploy(pos, slot, &self.deploy_grad, &layout);
        }

        // Batch pass: per-individual B_u and the train side of the
        // restricted sums. Repeated positions contribute once per draw.
        for (k, &pos) in view.batch.iter().enumerate() {
            let g = &view.batch_grads[k];
            let slot = self.table.train_slot[pos] as usize;
            self.b[slot] += g.dot_flat(&self.h_sum, &layout);
            self.part.add_train(pos, slot, g, &layout);
        }

        self.part.accumulate_c(&mut self.c);

        for s in 0..self.table.num_slots() {
            self.inflow[s] += eta * (self.a[s] - self.c[s]);
            self.outflow[s] += eta * (self.b[s] - self.c[s]);
            self.selfflow[s] += eta * self.c[s];
        }

        // Resolve the previous step's predicted loss change against the
        // observed one, then stage this step's prediction.
        if let (Some(pred), Some(prev)) = (self.pending_predicted, self.prev_deploy_loss) {
            self.per_step.push(relative_discrepancy(pred, deploy_loss - prev));
        }
        let gh: f64 = self.g_sum.iter().zip(&self.h_sum).map(|(x, y)| x * y).sum();
        self.pending_predicted = Some(-eta * gh);
        self.prev_deploy_loss = Some(deploy_loss);
        Ok(())
    }
}

impl OnlineAccumulator<'_> {
    /// Resolves the final step's prediction against the deployment loss at
    /// the final parameters.
    fn finish(&mut self, final_deploy_loss: f64) {
        if let (Some(pred), Some(prev)) = (self.pending_predicted.take(), self.prev_deploy_loss) {
            self.per_step
                .push(relative_discrepancy(pred, final_deploy_loss - prev));
        }
    }
}

/// Trains on `split.train` and accumulates influence flows toward
/// `split.deploy` in the same pass.
pub fn tracin_flows_online(
    spec: &ModelSpec,
    split: &SplitPair,
    config: &TrainConfig,
) -> Result<TracinRun> {
    if split.train.schema() != split.deploy.schema() {
        return Err(Error::invalid("train and deploy schemas differ"));
    }
    let layout = layout_for(spec, split.train.schema())?;
    let counts = RegCounts::from_train(&split.train);
    let table = PairTable::build(&split.train, &split.deploy);
    let k = table.num_slots();
    let mut acc = OnlineAccumulator {
        spec,
        layout,
        deploy: &split.deploy,
        counts: &counts,
        table: &table,
        part: PartStrategy::build(spec, &table, split, &layout),
        inflow: vec![0.0; k],
        outflow: vec![0.0; k],
        selfflow: vec![0.0; k],
        g_sum: vec![0.0; layout.len()],
        h_sum: vec![0.0; layout.len()],
        a: vec![0.0; k],
        b: vec![0.0; k],
        c: vec![0.0; k],
        deploy_grad: GradientVector::placeholder(spec, &layout),
        pending_predicted: None,
        prev_deploy_loss: None,
        per_step: Vec::with_capacity(config.steps),
    };

    let (params, summary) = train(spec, &split.train, config, Some(&mut acc))?;

    let final_deploy_loss: f64 = split
        .deploy
        .examples()
        .iter()
        .map(|ex| loss_example(spec, &params, ex, &counts))
        .sum();
    acc.finish(final_deploy_loss);

    let ledger = table.ledger(
        InfluenceMethod::TracIn,
        acc.inflow,
        acc.outflow,
        Some(acc.selfflow),
    );
    ledger.validate()?;
    Ok(TracinRun {
        ledger,
        params,
        summary,
        discrepancy: DiscrepancySeries {
            per_step: acc.per_step,
        },
    })
}
