//! Health-record experiments: one data point per individual, so a split
//! puts each individual entirely in train or deploy, and flows only
//! exist in expectation over repeated splits. Pipelines run per split
//! (split, normalize on train statistics, train, measure flows) and the
//! ledgers are averaged.
//!
//! The configured learning rate multiplies the mean batch gradient, as
//! usual for these models; the trainer's update rule sums per-example
//! gradients, so the engine rate is the configured rate divided by the
//! train-set size. Full-batch runs make the two exactly equivalent.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;

use flowtrace_core::influence::{marginal_flows, tracin_flows_online, Granularity};
use flowtrace_core::ingest::{load_csv, normalize_features, random_split};
use flowtrace_core::models::{dataset_mean_prediction_loss, ModelSpec};
use flowtrace_core::reciprocity::{aggregate_ledgers, flow_snr, ledger_scores};
use flowtrace_core::report::{build_report, quantize, Histogram};
use flowtrace_core::seeding::streams;
use flowtrace_core::{
    Dataset, Error, FlowLedger, InfluenceMethod, Result, SplitPair, TrainConfig,
};

use crate::experiments::{job_seed, mean, sample_std};
use crate::output::{score_hist_edges, snr_csv, OutDir};
use crate::experiments::movielens::write_snr_histograms;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HealthTask {
    Diabetes,
    BreastCancer,
}

impl HealthTask {
    pub fn parse(name: &str) -> Result<HealthTask> {
        match name {
            "diabetes" => Ok(HealthTask::Diabetes),
            "breastcancer" => Ok(HealthTask::BreastCancer),
            other => Err(Error::invalid(format!(
                "unknown task {other:?}; expected diabetes or breastcancer"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HealthTask::Diabetes => "diabetes",
            HealthTask::BreastCancer => "breastcancer",
        }
    }

    pub fn model(self) -> ModelSpec {
        match self {
            HealthTask::Diabetes => ModelSpec::linear(),
            HealthTask::BreastCancer => ModelSpec::logistic(),
        }
    }

    pub fn default_steps(self) -> usize {
        match self {
            HealthTask::Diabetes => 200,
            HealthTask::BreastCancer => 600,
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            HealthTask::Diabetes => 0.01,
            HealthTask::BreastCancer => 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HealthOptions {
    pub data: PathBuf,
    pub out_dir: PathBuf,
    pub task: HealthTask,
    pub splits: usize,
    pub train_fraction: f64,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub method: InfluenceMethod,
    pub clip_norm: Option<f64>,
}

impl HealthOptions {
    pub fn defaults(task: HealthTask, data: PathBuf, out_dir: PathBuf) -> Self {
        HealthOptions {
            data,
            out_dir,
            task,
            splits: 100,
            // One data point per individual: inflow sums over the other
            // side's train points and outflow over its deploy points, so
            // only an even split gives the two the same expected scale.
            train_fraction: 0.5,
            steps: task.default_steps(),
            lr: task.default_lr(),
            seed: 0,
            method: InfluenceMethod::TracIn,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Serialize)]
struct HealthSummary {
    command: &'static str,
    task: &'static str,
    method: &'static str,
    splits: usize,
    train_fraction: f64,
    steps: usize,
    lr: f64,
    engine_lr: f64,
    seed: u64,
    clip_norm: Option<f64>,
    n_individuals: usize,
    /// Mean over splits of the deployment-set prediction loss at the
    /// final parameters.
    deploy_loss_mean: f64,
    deploy_loss_std: f64,
    discrepancy_p50: Option<f64>,
    discrepancy_p80: Option<f64>,
    discrepancy_p90: Option<f64>,
}

struct SplitOutput {
    ledger: FlowLedger,
    deploy_loss: f64,
    discrepancy_defined: Vec<f64>,
}

pub fn run(opts: &HealthOptions) -> Result<()> {
    let table = load_csv(&opts.data, "target")?;
    run_on_dataset(opts, &table)
}

pub fn run_on_dataset(opts: &HealthOptions, table: &Dataset) -> Result<()> {
    let out = OutDir::create(&opts.out_dir)?;
    let spec = opts.task.model();

    let n_train = (opts.train_fraction * table.len() as f64).floor() as usize;
    if n_train == 0 {
        return Err(Error::invalid("train fraction leaves an empty train set"));
    }
    let engine_lr = opts.lr / n_train as f64;

    let outputs: Vec<SplitOutput> = (0..opts.splits)
        .into_par_iter()
        .map(|s| run_split(opts, &spec, table, engine_lr, s))
        .collect::<Result<Vec<_>>>()?;

    for (s, output) in outputs.iter().enumerate() {
        out.write_ledger(&format!("ledgers/split{s}.csv"), &output.ledger)?;
    }

    let ledgers: Vec<FlowLedger> = outputs.iter().map(|o| o.ledger.clone()).collect();
    let overall = aggregate_ledgers(&ledgers)?;
    let snr = if ledgers.len() >= 2 {
        Some(flow_snr(&ledgers)?)
    } else {
        None
    };
    let report = build_report(&overall, snr.as_ref())?;
    out.write_json("report.json", &report)?;
    if let Some(snr) = &snr {
        out.write_text("snr.csv", &snr_csv(snr))?;
        write_snr_histograms(&out, snr)?;
    }
    let scores: Vec<f64> = ledger_scores(&overall).values().copied().collect();
    out.write_histogram(
        "histograms/score_hist.csv",
        &Histogram::new(score_hist_edges(), scores),
    )?;

    let losses: Vec<f64> = outputs.iter().map(|o| o.deploy_loss).collect();
    let mut pooled: Vec<f64> = outputs
        .iter()
        .flat_map(|o| o.discrepancy_defined.iter().copied())
        .collect();
    pooled.sort_by(f64::total_cmp);
    let pct = |q: f64| -> Option<f64> {
        if pooled.is_empty() {
            None
        } else {
            Some(quantize(flowtrace_core::reciprocity::percentile(&pooled, q)))
        }
    };
    let summary = HealthSummary {
        command: "health",
        task: opts.task.as_str(),
        method: opts.method.as_str(),
        splits: opts.splits,
        train_fraction: opts.train_fraction,
        steps: opts.steps,
        lr: opts.lr,
        engine_lr: quantize(engine_lr),
        seed: opts.seed,
        clip_norm: opts.clip_norm,
        n_individuals: report.n_individuals,
        deploy_loss_mean: quantize(mean(&losses)),
        deploy_loss_std: quantize(sample_std(&losses)),
        discrepancy_p50: pct(0.5),
        discrepancy_p80: pct(0.8),
        discrepancy_p90: pct(0.9),
    };
    out.write_json("summary.json", &summary)?;
    Ok(())
}

fn run_split(
    opts: &HealthOptions,
    spec: &ModelSpec,
    table: &Dataset,
    engine_lr: f64,
    s: usize,
) -> Result<SplitOutput> {
    let raw = random_split(table, opts.train_fraction, job_seed(opts.seed, streams::SPLIT, s as u64))?;
    let (train, deploy) = normalize_features(&raw.train, &raw.deploy)?;
    let split = SplitPair {
        train,
        deploy,
        ..raw
    };
    let config = TrainConfig {
        clip_norm: opts.clip_norm,
        ..TrainConfig::full_batch(
            opts.steps,
            engine_lr,
            job_seed(opts.seed, streams::TRIAL, s as u64),
        )
    };
    let (ledger, params, discrepancy_defined) = match opts.method {
        InfluenceMethod::TracIn => {
            let run = tracin_flows_online(spec, &split, &config)?;
            (run.ledger, run.params, run.discrepancy.defined())
        }
        InfluenceMethod::Marginal => {
            let run = marginal_flows(spec, &split, &config, Granularity::Individual)?;
            (run.ledger, run.params, Vec::new())
        }
    };
    let deploy_loss = dataset_mean_prediction_loss(spec, &params, &split.deploy);
    Ok(SplitOutput {
        ledger,
        deploy_loss,
        discrepancy_defined,
    })
}
