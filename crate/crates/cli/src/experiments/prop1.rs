//! Monte-Carlo check that mean inflow equals mean outflow when batches
//! and the deployment set are drawn i.i.d. from one distribution.
//!
//! The population is a fixed finite bank of examples; every trial draws
//! fresh with-replacement batches (one per step) and a fresh deployment
//! set from the bank, computes a flow ledger, and records each
//! individual's inflow minus outflow. The verdict is PASS when every
//! individual's |mean difference| is within three paired standard
//! errors of zero.
//!
//! A separate exact check runs one mirrored configuration (deploy =
//! bank, full batch): unclipped it must be symmetric to the bit;
//! clipping caps only the training-side gradients and must break it.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;

use flowtrace_core::influence::tracin_flows_online;
use flowtrace_core::report::quantize;
use flowtrace_core::seeding::{rng_from, streams};
use flowtrace_core::{
    BatchMode, Dataset, Error, IndividualId, Result, SamplingMode, SplitPair, TrainConfig,
};

use crate::experiments::job_seed;
use crate::output::OutDir;
use crate::synth::{draw_iid, factorization_bank, linear_bank, SynthBank};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthModel {
    Linear,
    Factorization,
}

impl SynthModel {
    pub fn parse(name: &str) -> Result<SynthModel> {
        match name {
            "linear" => Ok(SynthModel::Linear),
            "mf" => Ok(SynthModel::Factorization),
            other => Err(Error::invalid(format!(
                "unknown model {other:?}; expected linear or mf"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SynthModel::Linear => "linear",
            SynthModel::Factorization => "mf",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Prop1Options {
    pub out_dir: PathBuf,
    pub trials: usize,
    pub individuals: usize,
    pub points_per_batch: usize,
    pub steps: usize,
    pub deploy_size: usize,
    pub model: SynthModel,
    pub seed: u64,
    pub clip_norm: Option<f64>,
}

impl Prop1Options {
    pub fn defaults(out_dir: PathBuf) -> Self {
        Prop1Options {
            out_dir,
            trials: 1000,
            individuals: 16,
            points_per_batch: 8,
            steps: 15,
            deploy_size: 48,
            model: SynthModel::Linear,
            seed: 0,
            clip_norm: None,
        }
    }
}

const BANK_PER_INDIVIDUAL: usize = 8;
const TRIAL_LR: f64 = 0.02;

#[derive(Debug, Serialize)]
struct IndividualVerdict {
    id: u64,
    mean_inflow: f64,
    mean_outflow: f64,
    mean_diff: f64,
    stderr: f64,
    /// |mean_diff| in standard-error units; 0 when both are zero.
    z: f64,
    pass: bool,
}

#[derive(Debug, Serialize)]
struct ExactCheck {
    clip_norm: Option<f64>,
    max_rel_asymmetry: f64,
    symmetric: bool,
}

#[derive(Debug, Serialize)]
struct Prop1Report {
    command: &'static str,
    model: &'static str,
    trials: usize,
    individuals: usize,
    points_per_batch: usize,
    steps: usize,
    deploy_size: usize,
    seed: u64,
    verdict: &'static str,
    max_z: f64,
    per_individual: Vec<IndividualVerdict>,
    exact_check: ExactCheck,
}

pub fn run(opts: &Prop1Options) -> Result<()> {
    if opts.trials < 2 {
        return Err(Error::invalid("prop1 needs at least two trials"));
    }
    let out = OutDir::create(&opts.out_dir)?;
    let SynthBank { spec, bank } = match opts.model {
        SynthModel::Linear => linear_bank(opts.individuals, BANK_PER_INDIVIDUAL, opts.seed)?,
        SynthModel::Factorization => {
            factorization_bank(opts.individuals, BANK_PER_INDIVIDUAL, opts.seed)?
        }
    };

    let diffs: Vec<Vec<(f64, f64)>> = (0..opts.trials)
        .into_par_iter()
        .map(|t| -> Result<Vec<(f64, f64)>> {
            let trial_seed = job_seed(opts.seed, streams::TRIAL, t as u64);
            let mut rng = rng_from(trial_seed, streams::DEPLOY_DRAW);
            let deploy = draw_iid(&bank, opts.deploy_size, &mut rng)?;
            let split = SplitPair {
                train: bank.clone(),
                deploy,
                seed: trial_seed,
                train_fraction: 1.0,
                train_source: (0..bank.len()).collect(),
                deploy_source: Vec::new(),
            };
            let config = TrainConfig {
                steps: opts.steps,
                learning_rate: TRIAL_LR,
                batch_mode: BatchMode::Minibatch {
                    size: opts.points_per_batch,
                    sampling: SamplingMode::WithReplacementFresh,
                },
                clip_norm: opts.clip_norm,
                seed: trial_seed,
            };
            let run = tracin_flows_online(&spec, &split, &config)?;
            Ok((0..opts.individuals as u64)
                .map(|u| {
                    let id = IndividualId(u);
                    (run.ledger.inflow[&id], run.ledger.outflow[&id])
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;

    let mut per_individual = Vec::with_capacity(opts.individuals);
    let mut max_z = 0.0f64;
    let mut all_pass = true;
    for u in 0..opts.individuals {
        let inflows: Vec<f64> = diffs.iter().map(|t| t[u].0).collect();
        let outflows: Vec<f64> = diffs.iter().map(|t| t[u].1).collect();
        let paired: Vec<f64> = inflows
            .iter()
            .zip(&outflows)
            .map(|(i, o)| i - o)
            .collect();
        let n = paired.len() as f64;
        let mean_diff = paired.iter().sum::<f64>() / n;
        let var = paired
            .iter()
            .map(|d| (d - mean_diff) * (d - mean_diff))
            .sum::<f64>()
            / (n - 1.0);
        let stderr = (var / n).sqrt();
        let z = if mean_diff == 0.0 {
            0.0
        } else if stderr == 0.0 {
            f64::INFINITY
        } else {
            mean_diff.abs() / stderr
        };
        let pass = z <= 3.0;
        all_pass &= pass;
        max_z = max_z.max(z);
        per_individual.push(IndividualVerdict {
            id: u as u64,
            mean_inflow: quantize(inflows.iter().sum::<f64>() / n),
            mean_outflow: quantize(outflows.iter().sum::<f64>() / n),
            mean_diff: quantize(mean_diff),
            stderr: quantize(stderr),
            z: quantize(z),
            pass,
        });
    }

    let exact_check = exact_mirror_check(&spec, &bank, opts)?;
    let report = Prop1Report {
        command: "prop1",
        model: opts.model.as_str(),
        trials: opts.trials,
        individuals: opts.individuals,
        points_per_batch: opts.points_per_batch,
        steps: opts.steps,
        deploy_size: opts.deploy_size,
        seed: opts.seed,
        verdict: if all_pass { "PASS" } else { "FAIL" },
        max_z: quantize(max_z),
        per_individual,
        exact_check,
    };
    out.write_json("report.json", &report)?;
    log::info!(
        "prop1 verdict: {} (max |z| = {})",
        report.verdict,
        report.max_z
    );
    Ok(())
}

/// Deploy = train, full batch: inflow must equal outflow exactly unless
/// clipping is on, which rescales only the training-side gradients.
fn exact_mirror_check(
    spec: &flowtrace_core::ModelSpec,
    bank: &Dataset,
    opts: &Prop1Options,
) -> Result<ExactCheck> {
    let split = SplitPair {
        train: bank.clone(),
        deploy: bank.clone(),
        seed: opts.seed,
        train_fraction: 1.0,
        train_source: (0..bank.len()).collect(),
        deploy_source: (0..bank.len()).collect(),
    };
    let config = TrainConfig {
        clip_norm: opts.clip_norm,
        ..TrainConfig::full_batch(opts.steps, TRIAL_LR, job_seed(opts.seed, streams::INIT, 0))
    };
    let run = tracin_flows_online(spec, &split, &config)?;
    let mut worst = 0.0f64;
    for (u, &i) in &run.ledger.inflow {
        let o = run.ledger.outflow[u];
        worst = worst.max((i - o).abs() / i.abs().max(o.abs()).max(1e-300));
    }
    Ok(ExactCheck {
        clip_norm: opts.clip_norm,
        max_rel_asymmetry: quantize(worst),
        symmetric: worst == 0.0,
    })
}
