//! Flow variability across repeated training runs of one split: how
//! stable are an individual's inflow and outflow under random
//! re-initialization? Flows are normalized per run by that run's total
//! inflow, so values read as fractions of the overall loss reduction.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;

use flowtrace_core::influence::tracin_flows_online;
use flowtrace_core::ingest::{load_movielens, random_split};
use flowtrace_core::models::ModelSpec;
use flowtrace_core::report::quantize;
use flowtrace_core::reciprocity::percentile;
use flowtrace_core::seeding::streams;
use flowtrace_core::{Dataset, Error, FlowLedger, IndividualId, Result, TrainConfig};

use crate::experiments::job_seed;
use crate::output::OutDir;

#[derive(Debug, Clone)]
pub struct FlowvarOptions {
    pub data: PathBuf,
    pub out_dir: PathBuf,
    pub individuals: usize,
    pub runs: usize,
    pub train_fraction: f64,
    pub dim: usize,
    pub lambda: f64,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl FlowvarOptions {
    pub fn defaults(data: PathBuf, out_dir: PathBuf) -> Self {
        FlowvarOptions {
            data,
            out_dir,
            individuals: 5,
            runs: 10,
            train_fraction: 0.8,
            dim: 16,
            lambda: 1.0,
            steps: 1000,
            lr: 0.0002,
            seed: 0,
        }
    }
}

#[derive(Debug, Serialize)]
struct FlowSpread {
    p05: f64,
    p25: f64,
    p50: f64,
    p75: f64,
    p95: f64,
}

#[derive(Debug, Serialize)]
struct IndividualVariability {
    id: u64,
    /// Rank position used to select this individual (0 = smallest
    /// average inflow, 1 = largest).
    rank_quantile: f64,
    normalized_inflow_per_run: Vec<f64>,
    normalized_outflow_per_run: Vec<f64>,
    inflow: FlowSpread,
    outflow: FlowSpread,
}

#[derive(Debug, Serialize)]
struct FlowvarReport {
    command: &'static str,
    runs: usize,
    individuals: usize,
    seed: u64,
    selected: Vec<IndividualVariability>,
}

pub fn run(opts: &FlowvarOptions) -> Result<()> {
    let ratings = load_movielens(&opts.data)?;
    run_on_dataset(opts, &ratings)
}

pub fn run_on_dataset(opts: &FlowvarOptions, ratings: &Dataset) -> Result<()> {
    let population = ratings.individual_index().len();
    if opts.individuals == 0 || opts.individuals > population {
        return Err(Error::invalid(format!(
            "cannot select {} individuals from a population of {population}",
            opts.individuals
        )));
    }
    if opts.runs == 0 {
        return Err(Error::invalid("flowvar needs at least one run"));
    }
    let out = OutDir::create(&opts.out_dir)?;
    let spec = ModelSpec::matrix_factorization(opts.dim, opts.lambda)?;
    let split = random_split(
        ratings,
        opts.train_fraction,
        job_seed(opts.seed, streams::SPLIT, 0),
    )?;

    let ledgers: Vec<FlowLedger> = (0..opts.runs)
        .into_par_iter()
        .map(|r| {
            let config = TrainConfig::full_batch(
                opts.steps,
                opts.lr,
                job_seed(opts.seed, streams::TRIAL, r as u64),
            );
            Ok(tracin_flows_online(&spec, &split, &config)?.ledger)
        })
        .collect::<Result<Vec<_>>>()?;

    // Normalize each run by its total inflow.
    let normalized: Vec<(Vec<f64>, Vec<f64>)> = ledgers
        .iter()
        .map(|ledger| {
            let total: f64 = ledger.inflow.values().sum();
            let inflow = ledger.inflow.values().map(|v| v / total).collect();
            let outflow = ledger.outflow.values().map(|v| v / total).collect();
            (inflow, outflow)
        })
        .collect();

    // Rank individuals by average inflow and pick evenly spaced ranks
    // from the minimum to the maximum.
    let ids: Vec<IndividualId> = ledgers[0].individuals().collect();
    let avg_inflow: Vec<f64> = (0..ids.len())
        .map(|j| normalized.iter().map(|(i, _)| i[j]).sum::<f64>() / opts.runs as f64)
        .collect();
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| avg_inflow[a].total_cmp(&avg_inflow[b]));

    let selected: Vec<IndividualVariability> = (0..opts.individuals)
        .map(|k| {
            let q = if opts.individuals == 1 {
                0.5
            } else {
                k as f64 / (opts.individuals - 1) as f64
            };
            let rank = ((q * (order.len() - 1) as f64).round()) as usize;
            let j = order[rank];
            let inflows: Vec<f64> = normalized.iter().map(|(i, _)| quantize(i[j])).collect();
            let outflows: Vec<f64> = normalized.iter().map(|(_, o)| quantize(o[j])).collect();
            let spread = |v: &[f64]| FlowSpread {
                p05: quantize(percentile(v, 0.05)),
                p25: quantize(percentile(v, 0.25)),
                p50: quantize(percentile(v, 0.5)),
                p75: quantize(percentile(v, 0.75)),
                p95: quantize(percentile(v, 0.95)),
            };
            IndividualVariability {
                id: ids[j].0,
                rank_quantile: q,
                inflow: spread(&inflows),
                outflow: spread(&outflows),
                normalized_inflow_per_run: inflows,
                normalized_outflow_per_run: outflows,
            }
        })
        .collect();

    let report = FlowvarReport {
        command: "flowvar",
        runs: opts.runs,
        individuals: opts.individuals,
        seed: opts.seed,
        selected,
    };
    out.write_json("report.json", &report)?;
    Ok(())
}
