//! Rating-prediction experiment: matrix factorization trained on random
//! 80:20 splits of the ratings, flows measured per run, statistics
//! averaged per split and over everything.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;

use flowtrace_core::influence::{marginal_flows, tracin_flows_online, Granularity};
use flowtrace_core::ingest::{load_movielens, random_split};
use flowtrace_core::models::{dataset_mean_prediction_loss, dataset_rmse, ModelSpec};
use flowtrace_core::reciprocity::{aggregate_ledgers, flow_snr, ledger_scores, SnrReport};
use flowtrace_core::report::{build_report, quantize, Histogram};
use flowtrace_core::seeding::streams;
use flowtrace_core::{
    Dataset, Error, FlowLedger, InfluenceMethod, Result, SplitPair, TrainConfig,
};

use crate::experiments::{job_seed, mean, sample_std};
use crate::output::{
    discrepancy_csv, rmse_csv, score_hist_edges, snr_csv, snr_hist_edges, DiscrepancyRow, OutDir,
    RmseRow,
};

#[derive(Debug, Clone)]
pub struct MovielensOptions {
    pub data: PathBuf,
    pub out_dir: PathBuf,
    pub splits: usize,
    pub repeats: usize,
    pub train_fraction: f64,
    pub dim: usize,
    pub lambda: f64,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub method: InfluenceMethod,
    pub clip_norm: Option<f64>,
    pub force: bool,
}

impl MovielensOptions {
    pub fn defaults(data: PathBuf, out_dir: PathBuf) -> Self {
        MovielensOptions {
            data,
            out_dir,
            splits: 10,
            repeats: 10,
            train_fraction: 0.8,
            dim: 16,
            lambda: 1.0,
            steps: 1000,
            lr: 0.0002,
            seed: 0,
            method: InfluenceMethod::TracIn,
            clip_norm: None,
            force: false,
        }
    }
}

#[derive(Debug, Serialize)]
struct MovielensSummary {
    command: &'static str,
    method: &'static str,
    splits: usize,
    repeats: usize,
    train_fraction: f64,
    dim: usize,
    lambda: f64,
    steps: usize,
    lr: f64,
    seed: u64,
    clip_norm: Option<f64>,
    n_individuals: usize,
    rmse_mean: f64,
    rmse_std: f64,
    deploy_loss_mean: f64,
    /// Pooled over all defined steps of all runs; absent when no step
    /// had a measurable loss change (e.g. zero steps).
    discrepancy_p50: Option<f64>,
    discrepancy_p80: Option<f64>,
    discrepancy_p90: Option<f64>,
}

struct RunOutput {
    ledger: FlowLedger,
    rmse: f64,
    deploy_loss: f64,
    discrepancy_defined: Vec<f64>,
    discrepancy_row: DiscrepancyRow,
}

pub fn run(opts: &MovielensOptions) -> Result<()> {
    let ratings = load_movielens(&opts.data)?;
    run_on_dataset(opts, &ratings)
}

/// The experiment body, callable on any ratings dataset (tests use a
/// small synthetic one).
pub fn run_on_dataset(opts: &MovielensOptions, ratings: &Dataset) -> Result<()> {
    if opts.method == InfluenceMethod::Marginal && !opts.force {
        let n = ratings.individual_index().len();
        return Err(Error::invalid(format!(
            "marginal influence retrains one model per individual per split \
             (about {} retrainings at {} steps each); pass --force to run it anyway",
            n * opts.splits,
            opts.steps
        )));
    }
    let out = OutDir::create(&opts.out_dir)?;
    let spec = ModelSpec::matrix_factorization(opts.dim, opts.lambda)?;

    let splits: Vec<SplitPair> = (0..opts.splits)
        .map(|s| {
            random_split(
                ratings,
                opts.train_fraction,
                job_seed(opts.seed, streams::SPLIT, s as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, usize)> = (0..opts.splits)
        .flat_map(|s| (0..opts.repeats).map(move |r| (s, r)))
        .collect();
    let runs: Vec<RunOutput> = jobs
        .par_iter()
        .map(|&(s, r)| run_one(opts, &spec, &splits[s], s, r))
        .collect::<Result<Vec<_>>>()?;

    // Per-run ledgers and rows.
    let mut rmse_rows = Vec::new();
    let mut discrepancy_rows = Vec::new();
    for ((s, r), run) in jobs.iter().zip(&runs) {
        out.write_ledger(&format!("ledgers/split{s}_repeat{r}.csv"), &run.ledger)?;
        rmse_rows.push(RmseRow {
            split: *s,
            repeat: *r,
            rmse: run.rmse,
        });
        discrepancy_rows.push(run.discrepancy_row.clone());
    }
    out.write_text("rmse.csv", &rmse_csv(&rmse_rows))?;
    out.write_text("discrepancy.csv", &discrepancy_csv(&discrepancy_rows))?;

    // Flows averaged over the repeats of each split, then over all runs.
    let per_split: Vec<FlowLedger> = (0..opts.splits)
        .map(|s| {
            let of_split: Vec<FlowLedger> = jobs
                .iter()
                .zip(&runs)
                .filter(|((js, _), _)| *js == s)
                .map(|(_, run)| run.ledger.clone())
                .collect();
            aggregate_ledgers(&of_split)
        })
        .collect::<Result<Vec<_>>>()?;
    let overall = aggregate_ledgers(&runs.iter().map(|r| r.ledger.clone()).collect::<Vec<_>>())?;

    let snr = if per_split.len() >= 2 {
        Some(flow_snr(&per_split)?)
    } else {
        None
    };
    let report = build_report(&overall, snr.as_ref())?;
    out.write_json("report.json", &report)?;
    let single = build_report(&per_split[0], None)?;
    out.write_json("report_single_split.json", &single)?;

    if let Some(snr) = &snr {
        out.write_text("snr.csv", &snr_csv(snr))?;
        write_snr_histograms(&out, snr)?;
    }
    let scores: Vec<f64> = ledger_scores(&overall).values().copied().collect();
    out.write_histogram(
        "histograms/score_hist.csv",
        &Histogram::new(score_hist_edges(), scores),
    )?;

    let mut pooled: Vec<f64> = runs
        .iter()
        .flat_map(|r| r.discrepancy_defined.iter().copied())
        .collect();
    pooled.sort_by(f64::total_cmp);
    let pct = |q: f64| -> Option<f64> {
        if pooled.is_empty() {
            None
        } else {
            Some(quantize(flowtrace_core::reciprocity::percentile(&pooled, q)))
        }
    };
    let summary = MovielensSummary {
        command: "movielens",
        method: opts.method.as_str(),
        splits: opts.splits,
        repeats: opts.repeats,
        train_fraction: opts.train_fraction,
        dim: opts.dim,
        lambda: opts.lambda,
        steps: opts.steps,
        lr: opts.lr,
        seed: opts.seed,
        clip_norm: opts.clip_norm,
        n_individuals: report.n_individuals,
        rmse_mean: quantize(mean(
            &rmse_rows.iter().map(|r| r.rmse).collect::<Vec<_>>(),
        )),
        rmse_std: quantize(sample_std(
            &rmse_rows.iter().map(|r| r.rmse).collect::<Vec<_>>(),
        )),
        deploy_loss_mean: quantize(mean(
            &runs.iter().map(|r| r.deploy_loss).collect::<Vec<_>>(),
        )),
        discrepancy_p50: pct(0.5),
        discrepancy_p80: pct(0.8),
        discrepancy_p90: pct(0.9),
    };
    out.write_json("summary.json", &summary)?;
    Ok(())
}

fn run_one(
    opts: &MovielensOptions,
    spec: &ModelSpec,
    split: &SplitPair,
    s: usize,
    r: usize,
) -> Result<RunOutput> {
    let seed = job_seed(
        opts.seed,
        streams::TRIAL,
        (s * opts.repeats + r) as u64,
    );
    let config = TrainConfig {
        clip_norm: opts.clip_norm,
        ..TrainConfig::full_batch(opts.steps, opts.lr, seed)
    };
    let (ledger, params, discrepancy) = match opts.method {
        InfluenceMethod::TracIn => {
            let run = tracin_flows_online(spec, split, &config)?;
            (run.ledger, run.params, Some(run.discrepancy))
        }
        InfluenceMethod::Marginal => {
            let run = marginal_flows(spec, split, &config, Granularity::Individual)?;
            (run.ledger, run.params, None)
        }
    };
    let rmse = dataset_rmse(spec, &params, &split.deploy)?;
    let deploy_loss = dataset_mean_prediction_loss(spec, &params, &split.deploy);
    let (defined, row) = match &discrepancy {
        Some(d) => (
            d.defined(),
            DiscrepancyRow {
                split: s,
                repeat: r,
                defined_steps: d.defined().len(),
                p50: d.percentile(0.5),
                p80: d.percentile(0.8),
                p90: d.percentile(0.9),
            },
        ),
        None => (
            Vec::new(),
            DiscrepancyRow {
                split: s,
                repeat: r,
                defined_steps: 0,
                p50: None,
                p80: None,
                p90: None,
            },
        ),
    };
    Ok(RunOutput {
        ledger,
        rmse,
        deploy_loss,
        discrepancy_defined: defined,
        discrepancy_row: row,
    })
}

pub(crate) fn write_snr_histograms(out: &OutDir, snr: &SnrReport) -> Result<()> {
    let finite = |m: &std::collections::BTreeMap<_, f64>| -> Vec<f64> {
        m.values().copied().filter(|v| v.is_finite()).collect()
    };
    out.write_histogram(
        "histograms/snr_inflow_hist.csv",
        &Histogram::new(snr_hist_edges(), finite(&snr.inflow)),
    )?;
    out.write_histogram(
        "histograms/snr_outflow_hist.csv",
        &Histogram::new(snr_hist_edges(), finite(&snr.outflow)),
    )
}
