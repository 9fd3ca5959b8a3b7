//! Acceptance suite. One test per numbered check, each printing a single
//! line `ACCEPTANCE <n> <label>: PASS|FAIL|SKIP (...)` and failing the
//! test when a measured value leaves its pinned band.
//!
//! Checks that need a dataset which is not in the tree (MovieLens 100K,
//! the health CSVs) print SKIP with instructions instead of failing; see
//! the README for how to fetch each file. Run with
//! `cargo test -p flowtrace-cli --test acceptance -- --nocapture` to see
//! every line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;
use tempfile::TempDir;

use flowtrace_cli::experiments::health::{self, HealthOptions, HealthTask};
use flowtrace_cli::experiments::movielens::{self, MovielensOptions};
use flowtrace_cli::experiments::prop1::{self, Prop1Options};
use flowtrace_core::influence::{tracin_flows_naive, tracin_flows_online};
use flowtrace_core::ingest::random_split;
use flowtrace_core::models::{
    grad_example, init_params, layout_for, loss_example, ModelSpec, Parameters, RegCounts,
};
use flowtrace_core::seeding::rng_from;
use flowtrace_core::{
    BatchMode, Dataset, Example, FeaturePayload, FeatureSchema, IndividualId, InfluenceMethod,
    ModelKind, SamplingMode, SplitPair, TrainConfig,
};

// Pinned expected bands. Sources and rationale live in the repo docs;
// failing any of these is a real regression, not a flaky tolerance.
const RMSE_8020: (f64, f64) = (0.905, 0.945);
const RMSE_9010: (f64, f64) = (0.89, 0.93);
const ML_ALPHA_MIN: f64 = 0.40;
const ML_CORR_MIN: f64 = 0.90;
const ML_SINGLE_CORR: (f64, f64) = (0.79, 0.99);
const ML_SINGLE_ALPHA_MIN: f64 = 0.15;
const NEG_INFLOW_MAX: f64 = 0.02;
const NEG_OUTFLOW: (f64, f64) = (0.05, 0.20);
const SNR_CONTRAST_MIN: f64 = 10.0;
const DIA_TRACIN_ALPHA: (f64, f64) = (0.6, 0.9);
const BC_TRACIN_ALPHA: (f64, f64) = (0.8, 1.0);
// Known red: the marginal method misses the two bands below (diabetes
// alpha(0.75) measures ~0.12, breast cancer ~0) and its SNR separation
// from tracin is ~2.6x, not the 10x that check 4 wants. The computation
// is held to a 1e-10 least-squares leave-one-out oracle in the core
// tests and the tracin bands on the same data pass, so the numbers are
// what this protocol produces. Variants that were measured and did not
// close the gap: retraining each leave-one-out model to convergence
// instead of reusing the full run's schedule (drives alpha to 0 and
// flips signs on most individuals), rescaling the learning rate for the
// smaller training set, and normalizing each split's flows by its total
// inflow before averaging. The bands stay as pinned; these tests fail
// until something legitimate closes the gap.
const DIA_MARGINAL_ALPHA: (f64, f64) = (0.2, 0.55);
const BC_MARGINAL_ALPHA: (f64, f64) = (0.3, 0.65);
const OVERTRAIN_ALPHA_MAX: f64 = 0.35;
const OVERTRAIN_LOSS_DRIFT_MAX: f64 = 0.03;
const DISCREPANCY_P80_MAX: f64 = 0.02;
const EQUIVALENCE_REL_TOL: f64 = 1e-9;
const SYMMETRY_REL_TOL: f64 = 1e-9;
const GRAD_REL_TOL: f64 = 1e-4;

struct Criterion {
    n: u32,
    label: &'static str,
}

impl Criterion {
    fn skip(&self, why: &str) {
        println!("ACCEPTANCE {} {}: SKIP ({why})", self.n, self.label);
    }

    /// Prints the verdict line and panics when any check failed, so the
    /// test result matches the printed verdict.
    fn finish(&self, checks: &[(String, bool)]) {
        let detail: Vec<&str> = checks
            .iter()
            .filter(|(_, ok)| !ok)
            .map(|(msg, _)| msg.as_str())
            .collect();
        if detail.is_empty() {
            let all: Vec<&str> = checks.iter().map(|(m, _)| m.as_str()).collect();
            println!("ACCEPTANCE {} {}: PASS ({})", self.n, self.label, all.join("; "));
        } else {
            let joined = detail.join("; ");
            println!("ACCEPTANCE {} {}: FAIL ({joined})", self.n, self.label);
            panic!("{} failed: {joined}", self.label);
        }
    }
}

fn in_band(v: f64, band: (f64, f64)) -> bool {
    (band.0..=band.1).contains(&v)
}

fn repo_root() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR")).ancestors().nth(2).unwrap()
}

fn data_file(rel: &str) -> Option<PathBuf> {
    let p = repo_root().join(rel);
    p.exists().then_some(p)
}

const ML_HINT: &str =
    "data/ml-100k/u.data missing; download instructions are in the README";
const HEALTH_HINT: &str = "health CSV missing; run scripts/fetch_health_data.py";

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn load_json(path: &Path) -> Value {
    let text = fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("reading {}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("parsing {}: {e}", path.display()))
}

/// A finished experiment run: kept directory plus its parsed reports.
struct ExpRun {
    dir: TempDir,
    report: Value,
    summary: Value,
}

impl ExpRun {
    fn alpha(&self, p: f64) -> f64 {
        self.report["p_alpha"]
            .as_array()
            .unwrap()
            .iter()
            .find(|row| row[0].as_f64() == Some(p))
            .unwrap()[1]
            .as_f64()
            .unwrap()
    }

    fn outflow_snr_p50(&self) -> f64 {
        self.report["snr_percentiles"]["outflow"]["p50"].as_f64().unwrap()
    }
}

fn run_health(
    task: HealthTask,
    method: InfluenceMethod,
    splits: usize,
    steps: Option<usize>,
) -> Option<ExpRun> {
    let csv = match task {
        HealthTask::Diabetes => data_file("data/diabetes.csv")?,
        HealthTask::BreastCancer => data_file("data/breastcancer.csv")?,
    };
    let dir = TempDir::new().unwrap();
    let mut opts = HealthOptions::defaults(task, csv, dir.path().to_path_buf());
    opts.splits = splits;
    opts.method = method;
    if let Some(s) = steps {
        opts.steps = s;
    }
    health::run(&opts).unwrap();
    let report = load_json(&dir.path().join("report.json"));
    let summary = load_json(&dir.path().join("summary.json"));
    Some(ExpRun { dir, report, summary })
}

macro_rules! health_fixture {
    ($name:ident, $task:expr, $method:expr, $splits:expr, $steps:expr) => {
        fn $name() -> Option<&'static ExpRun> {
            static CELL: OnceLock<Option<ExpRun>> = OnceLock::new();
            CELL.get_or_init(|| run_health($task, $method, $splits, $steps)).as_ref()
        }
    };
}

health_fixture!(dia_tracin_100, HealthTask::Diabetes, InfluenceMethod::TracIn, 100, None);
health_fixture!(dia_marginal_100, HealthTask::Diabetes, InfluenceMethod::Marginal, 100, None);
health_fixture!(bc_tracin_100, HealthTask::BreastCancer, InfluenceMethod::TracIn, 100, None);
health_fixture!(bc_marginal_100, HealthTask::BreastCancer, InfluenceMethod::Marginal, 100, None);
health_fixture!(dia_tracin_10, HealthTask::Diabetes, InfluenceMethod::TracIn, 10, None);
health_fixture!(dia_marginal_10, HealthTask::Diabetes, InfluenceMethod::Marginal, 10, None);
health_fixture!(dia_overtrained, HealthTask::Diabetes, InfluenceMethod::TracIn, 100, Some(1000));

fn run_movielens(configure: impl FnOnce(&mut MovielensOptions)) -> Option<ExpRun> {
    let data = data_file("data/ml-100k/u.data")?;
    let dir = TempDir::new().unwrap();
    let mut opts = MovielensOptions::defaults(data, dir.path().to_path_buf());
    configure(&mut opts);
    movielens::run(&opts).unwrap();
    let report = load_json(&dir.path().join("report.json"));
    let summary = load_json(&dir.path().join("summary.json"));
    Some(ExpRun { dir, report, summary })
}

fn ml_main() -> Option<&'static ExpRun> {
    static CELL: OnceLock<Option<ExpRun>> = OnceLock::new();
    CELL.get_or_init(|| run_movielens(|_| {})).as_ref()
}

fn ml_9010() -> Option<&'static ExpRun> {
    static CELL: OnceLock<Option<ExpRun>> = OnceLock::new();
    CELL.get_or_init(|| run_movielens(|o| o.train_fraction = 0.9)).as_ref()
}

fn ml_single(lr: f64) -> Option<ExpRun> {
    run_movielens(|o| {
        o.splits = 1;
        o.repeats = 1;
        o.lr = lr;
    })
}

#[test]
fn criterion_01_movielens_rmse() {
    let c = Criterion { n: 1, label: "movielens rmse" };
    let (Some(main), Some(nine)) = (ml_main(), ml_9010()) else {
        return c.skip(ML_HINT);
    };
    let rmse = main.summary["rmse_mean"].as_f64().unwrap();
    let rmse9 = nine.summary["rmse_mean"].as_f64().unwrap();
    c.finish(&[
        (
            format!("80:20 mean rmse {rmse:.4} in [{}, {}]", RMSE_8020.0, RMSE_8020.1),
            in_band(rmse, RMSE_8020),
        ),
        (
            format!("90:10 mean rmse {rmse9:.4} in [{}, {}]", RMSE_9010.0, RMSE_9010.1),
            in_band(rmse9, RMSE_9010),
        ),
    ]);
}

#[test]
fn criterion_02_movielens_reciprocity() {
    let c = Criterion { n: 2, label: "movielens tracin reciprocity" };
    let Some(main) = ml_main() else {
        return c.skip(ML_HINT);
    };
    let alpha = main.alpha(0.75);
    let corr = main.report["correlation"].as_f64().unwrap();
    let single = load_json(&main.dir.path().join("report_single_split.json"));
    let s_corr = single["correlation"].as_f64().unwrap();
    let s_alpha = single["p_alpha"]
        .as_array()
        .unwrap()
        .iter()
        .find(|row| row[0].as_f64() == Some(0.75))
        .unwrap()[1]
        .as_f64()
        .unwrap();
    c.finish(&[
        (format!("ten-split alpha(0.75) {alpha:.3} >= {ML_ALPHA_MIN}"), alpha >= ML_ALPHA_MIN),
        (format!("ten-split correlation {corr:.3} >= {ML_CORR_MIN}"), corr >= ML_CORR_MIN),
        (
            format!(
                "single-split correlation {s_corr:.3} in [{}, {}]",
                ML_SINGLE_CORR.0, ML_SINGLE_CORR.1
            ),
            in_band(s_corr, ML_SINGLE_CORR),
        ),
        (
            format!("single-split alpha(0.75) {s_alpha:.3} >= {ML_SINGLE_ALPHA_MIN}"),
            s_alpha >= ML_SINGLE_ALPHA_MIN,
        ),
    ]);
}

#[test]
fn criterion_03_movielens_negative_fractions() {
    let c = Criterion { n: 3, label: "movielens negative flow fractions" };
    let Some(main) = ml_main() else {
        return c.skip(ML_HINT);
    };
    let neg_in = main.report["negative_fractions"]["inflow"].as_f64().unwrap();
    let neg_out = main.report["negative_fractions"]["outflow"].as_f64().unwrap();
    c.finish(&[
        (format!("negative inflow {neg_in:.4} <= {NEG_INFLOW_MAX}"), neg_in <= NEG_INFLOW_MAX),
        (
            format!(
                "negative outflow {neg_out:.4} in [{}, {}]",
                NEG_OUTFLOW.0, NEG_OUTFLOW.1
            ),
            in_band(neg_out, NEG_OUTFLOW),
        ),
    ]);
}

#[test]
fn criterion_04_snr_separation() {
    let c = Criterion { n: 4, label: "tracin vs marginal snr separation" };
    let (Some(tracin), Some(marginal)) = (dia_tracin_10(), dia_marginal_10()) else {
        return c.skip(HEALTH_HINT);
    };
    let t = tracin.outflow_snr_p50();
    let m = marginal.outflow_snr_p50();
    let contrast = t / m;
    c.finish(&[(
        format!(
            "diabetes 10-split median outflow snr: tracin {t:.3} vs marginal {m:.3}, \
             contrast {contrast:.2}x >= {SNR_CONTRAST_MIN}x"
        ),
        contrast >= SNR_CONTRAST_MIN,
    )]);
}

#[test]
fn criterion_05_health_tracin_reciprocity() {
    let c = Criterion { n: 5, label: "health tracin reciprocity" };
    let (Some(dia), Some(bc)) = (dia_tracin_100(), bc_tracin_100()) else {
        return c.skip(HEALTH_HINT);
    };
    let da = dia.alpha(0.75);
    let ba = bc.alpha(0.75);
    c.finish(&[
        (
            format!(
                "diabetes alpha(0.75) {da:.3} in [{}, {}]",
                DIA_TRACIN_ALPHA.0, DIA_TRACIN_ALPHA.1
            ),
            in_band(da, DIA_TRACIN_ALPHA),
        ),
        (
            format!(
                "breast cancer alpha(0.75) {ba:.3} in [{}, {}]",
                BC_TRACIN_ALPHA.0, BC_TRACIN_ALPHA.1
            ),
            in_band(ba, BC_TRACIN_ALPHA),
        ),
    ]);
}

#[test]
fn criterion_06_health_marginal_reciprocity() {
    let c = Criterion { n: 6, label: "health marginal reciprocity" };
    let (Some(dia), Some(bc)) = (dia_marginal_100(), bc_marginal_100()) else {
        return c.skip(HEALTH_HINT);
    };
    let da = dia.alpha(0.75);
    let ba = bc.alpha(0.75);
    c.finish(&[
        (
            format!(
                "diabetes alpha(0.75) {da:.3} in [{}, {}]",
                DIA_MARGINAL_ALPHA.0, DIA_MARGINAL_ALPHA.1
            ),
            in_band(da, DIA_MARGINAL_ALPHA),
        ),
        (
            format!(
                "breast cancer alpha(0.75) {ba:.3} in [{}, {}]",
                BC_MARGINAL_ALPHA.0, BC_MARGINAL_ALPHA.1
            ),
            in_band(ba, BC_MARGINAL_ALPHA),
        ),
    ]);
}

#[test]
fn criterion_07_overtraining() {
    let c = Criterion { n: 7, label: "diabetes overtraining" };
    let (Some(base), Some(over)) = (dia_tracin_100(), dia_overtrained()) else {
        return c.skip(HEALTH_HINT);
    };
    let alpha = over.alpha(0.75);
    let base_loss = base.summary["deploy_loss_mean"].as_f64().unwrap();
    let over_loss = over.summary["deploy_loss_mean"].as_f64().unwrap();
    let drift = (over_loss / base_loss - 1.0).abs();
    c.finish(&[
        (
            format!("1000-step alpha(0.75) {alpha:.3} <= {OVERTRAIN_ALPHA_MAX}"),
            alpha <= OVERTRAIN_ALPHA_MAX,
        ),
        (
            format!(
                "deployment loss drift {:.2}% <= {:.0}%",
                drift * 100.0,
                OVERTRAIN_LOSS_DRIFT_MAX * 100.0
            ),
            drift <= OVERTRAIN_LOSS_DRIFT_MAX,
        ),
    ]);
}

#[test]
fn criterion_08_first_order_discrepancy() {
    let c = Criterion { n: 8, label: "first-order discrepancy" };
    if data_file("data/ml-100k/u.data").is_none() {
        return c.skip(ML_HINT);
    }
    let full = ml_single(0.0002).unwrap();
    let halved = ml_single(0.0001).unwrap();
    let p80 = full.summary["discrepancy_p80"].as_f64().unwrap();
    let p80_half = halved.summary["discrepancy_p80"].as_f64().unwrap();
    c.finish(&[
        (
            format!("80th-percentile discrepancy {:.3}% <= {:.0}%", p80 * 100.0, DISCREPANCY_P80_MAX * 100.0),
            p80 <= DISCREPANCY_P80_MAX,
        ),
        (
            format!("halved lr reduces it ({:.4}% < {:.4}%)", p80_half * 100.0, p80 * 100.0),
            p80_half < p80,
        ),
    ]);
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 + EQUIVALENCE_REL_TOL * a.abs().max(b.abs())
}

fn dense_toy(kind: ModelKind, rng: &mut impl Rng) -> Dataset {
    let dim = rng.random_range(1..=3);
    let n_ind = rng.random_range(3..=6u64);
    let mut examples = Vec::new();
    for u in 0..n_ind {
        for _ in 0..rng.random_range(1..=4) {
            let features: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let label = match kind {
                ModelKind::LogisticRegression => f64::from(rng.random_range(0..2u8)),
                _ => StandardNormal.sample(rng),
            };
            examples.push(Example {
                individual: IndividualId(u * 5 + 1),
                features: FeaturePayload::Dense(features),
                label,
            });
        }
    }
    Dataset::new(examples, FeatureSchema::Dense { dim }).unwrap()
}

fn factorization_toy(rng: &mut impl Rng) -> Dataset {
    let num_users = rng.random_range(3..=5);
    let num_items = rng.random_range(2..=4);
    let mut examples = Vec::new();
    for user in 0..num_users {
        for _ in 0..rng.random_range(2..=4) {
            examples.push(Example {
                individual: IndividualId(user as u64),
                features: FeaturePayload::Pair {
                    user,
                    item: rng.random_range(0..num_items),
                },
                label: f64::from(rng.random_range(1..=5u8)),
            });
        }
    }
    Dataset::new(examples, FeatureSchema::Sparse { num_users, num_items }).unwrap()
}

#[test]
fn criterion_09_oracle_equivalence() {
    let c = Criterion { n: 9, label: "online vs naive flow equivalence" };
    let mut rng = rng_from(0xacc9, 0);
    let mut checked = 0usize;
    let mut mismatches = 0usize;
    for case in 0..102u64 {
        let kind = match case % 3 {
            0 => ModelKind::LinearRegression,
            1 => ModelKind::LogisticRegression,
            _ => ModelKind::MatrixFactorization,
        };
        let (spec, dataset) = match kind {
            ModelKind::LinearRegression => (ModelSpec::linear(), dense_toy(kind, &mut rng)),
            ModelKind::LogisticRegression => (ModelSpec::logistic(), dense_toy(kind, &mut rng)),
            ModelKind::MatrixFactorization => (
                ModelSpec::matrix_factorization(rng.random_range(1..=3), 0.3).unwrap(),
                factorization_toy(&mut rng),
            ),
        };
        let split = random_split(&dataset, 0.6, 300 + case).unwrap();
        let batch_mode = match (case / 3) % 3 {
            0 => BatchMode::FullBatch,
            1 => BatchMode::Minibatch {
                size: rng.random_range(1..=3),
                sampling: SamplingMode::WithReplacementFresh,
            },
            _ => BatchMode::Minibatch {
                size: rng.random_range(1..=split.train.len().min(3)),
                sampling: SamplingMode::EpochShuffle,
            },
        };
        let config = TrainConfig {
            steps: rng.random_range(2..=8),
            learning_rate: rng.random_range(0.02..0.1),
            batch_mode,
            clip_norm: if case % 4 == 3 { Some(0.4) } else { None },
            seed: 7000 + case,
        };
        let online = tracin_flows_online(&spec, &split, &config).unwrap().ledger;
        let naive = tracin_flows_naive(&spec, &split, &config).unwrap();
        let ok = online.inflow.iter().all(|(u, &i)| {
            close(i, naive.inflow[u]) && close(online.outflow[u], naive.outflow[u])
        });
        if !ok {
            mismatches += 1;
        }
        checked += 1;
    }
    c.finish(&[(
        format!("{checked} randomized problems, {mismatches} beyond {EQUIVALENCE_REL_TOL} relative"),
        checked >= 100 && mismatches == 0,
    )]);
}

fn mirror_split(ds: &Dataset) -> SplitPair {
    SplitPair {
        train: ds.clone(),
        deploy: ds.clone(),
        seed: 0,
        train_fraction: 1.0,
        train_source: (0..ds.len()).collect(),
        deploy_source: (0..ds.len()).collect(),
    }
}

#[test]
fn criterion_10_exact_symmetry() {
    let c = Criterion { n: 10, label: "mirror symmetry and clipping" };
    let mut rng = rng_from(0xacc10, 0);
    let mut checks = Vec::new();
    for (spec, ds) in [
        (ModelSpec::linear(), dense_toy(ModelKind::LinearRegression, &mut rng)),
        (ModelSpec::logistic(), dense_toy(ModelKind::LogisticRegression, &mut rng)),
        (ModelSpec::matrix_factorization(2, 0.2).unwrap(), factorization_toy(&mut rng)),
    ] {
        let split = mirror_split(&ds);
        let flows = |clip: Option<f64>| {
            let config = TrainConfig {
                clip_norm: clip,
                ..TrainConfig::full_batch(20, 0.03, 5)
            };
            tracin_flows_online(&spec, &split, &config).unwrap().ledger
        };
        let clean = flows(None);
        let max_rel = clean
            .inflow
            .iter()
            .map(|(u, &i)| {
                let o = clean.outflow[u];
                (i - o).abs() / i.abs().max(o.abs()).max(1e-300)
            })
            .fold(0.0, f64::max);
        let max_abs_clean = clean
            .inflow
            .iter()
            .map(|(u, &i)| (i - clean.outflow[u]).abs())
            .fold(0.0, f64::max);
        // Clip at a thousandth of the typical gradient norm at init.
        let params = init_params(&spec, ds.schema(), &ds, 5).unwrap();
        let counts = RegCounts::from_train(&ds);
        let mut norms: Vec<f64> = ds
            .examples()
            .iter()
            .map(|ex| grad_example(&spec, &params, ex, &counts).norm())
            .collect();
        norms.sort_by(f64::total_cmp);
        let clipped = flows(Some(1e-3 * norms[norms.len() / 2]));
        let max_abs_clipped = clipped
            .inflow
            .iter()
            .map(|(u, &i)| (i - clipped.outflow[u]).abs())
            .fold(0.0, f64::max);
        checks.push((
            format!("{:?} unclipped max relative gap {max_rel:.2e} <= {SYMMETRY_REL_TOL}", spec.kind),
            max_rel <= SYMMETRY_REL_TOL,
        ));
        checks.push((
            format!(
                "{:?} clipping raises max gap ({max_abs_clean:.2e} -> {max_abs_clipped:.2e})",
                spec.kind
            ),
            max_abs_clipped > max_abs_clean,
        ));
    }
    c.finish(&checks);
}

#[test]
fn criterion_11_prop1_monte_carlo() {
    let c = Criterion { n: 11, label: "mean-flow equality monte carlo" };
    let dir = TempDir::new().unwrap();
    let opts = Prop1Options::defaults(dir.path().to_path_buf());
    prop1::run(&opts).unwrap();
    let report = load_json(&dir.path().join("report.json"));
    let verdict = report["verdict"].as_str().unwrap().to_string();
    let max_z = report["max_z"].as_f64().unwrap();
    let trials = report["trials"].as_u64().unwrap();
    c.finish(&[(
        format!("defaults verdict {verdict} (max |z| {max_z:.2} over {trials} trials)"),
        verdict == "PASS" && trials >= 1000,
    )]);
}

#[test]
fn criterion_12_gradient_correctness() {
    let c = Criterion { n: 12, label: "analytic gradients vs finite differences" };
    let mut rng = rng_from(0xacc12, 0);
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    // Dense models over random parameters and examples.
    for spec in [ModelSpec::linear(), ModelSpec::logistic()] {
        for case in 0..8usize {
            let dim = 1 + case % 4;
            let schema = FeatureSchema::Dense { dim };
            let layout = layout_for(&spec, &schema).unwrap();
            let storage: Vec<f64> = (0..layout.len())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let params = Parameters::from_storage(layout, storage).unwrap();
            let ex = Example {
                individual: IndividualId(0),
                features: FeaturePayload::Dense(
                    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect(),
                ),
                label: if spec.kind == ModelKind::LogisticRegression {
                    f64::from(rng.random_range(0..2u8))
                } else {
                    StandardNormal.sample(&mut rng)
                },
            };
            worst = worst.max(grad_gap(&spec, &params, &ex, &RegCounts::none()));
            cases += 1;
        }
    }
    // Factorization with regularization shares.
    for case in 0..6usize {
        let spec = ModelSpec::matrix_factorization(1 + case % 3, [0.0, 0.4, 1.0][case % 3]).unwrap();
        let ds = factorization_toy(&mut rng);
        let counts = RegCounts::from_train(&ds);
        let params = init_params(&spec, ds.schema(), &ds, 40 + case as u64).unwrap();
        for ex in ds.examples().iter().take(4) {
            worst = worst.max(grad_gap(&spec, &params, ex, &counts));
            cases += 1;
        }
    }
    c.finish(&[(
        format!("worst relative error {worst:.2e} < {GRAD_REL_TOL} over {cases} cases"),
        worst < GRAD_REL_TOL,
    )]);
}

fn grad_gap(spec: &ModelSpec, params: &Parameters, ex: &Example, counts: &RegCounts) -> f64 {
    let layout = *params.layout();
    let analytic = grad_example(spec, params, ex, counts).to_flat(&layout);
    let mut worst = 0.0f64;
    for j in 0..params.len() {
        let w = params.as_slice()[j];
        let h = 1e-5 * (1.0 + w.abs());
        let mut plus = params.clone();
        plus.as_mut_slice()[j] += h;
        let mut minus = params.clone();
        minus.as_mut_slice()[j] -= h;
        let numeric = (loss_example(spec, &plus, ex, counts)
            - loss_example(spec, &minus, ex, counts))
            / (2.0 * h);
        worst = worst.max(
            (analytic[j] - numeric).abs() / analytic[j].abs().max(numeric.abs()).max(1.0),
        );
    }
    worst
}

#[test]
fn criterion_13_determinism() {
    let c = Criterion { n: 13, label: "byte-identical reruns" };
    let bin = env!("CARGO_BIN_EXE_flowtrace");
    let ratings = fixture("ratings.tsv");
    let health_csv = fixture("health.csv");
    let commands: Vec<(&str, Vec<String>)> = vec![
        (
            "movielens",
            vec![
                "movielens".into(),
                "--data".into(),
                ratings.display().to_string(),
                "--splits".into(),
                "2".into(),
                "--repeats".into(),
                "1".into(),
                "--dim".into(),
                "3".into(),
                "--steps".into(),
                "30".into(),
                "--seed".into(),
                "11".into(),
            ],
        ),
        (
            "health",
            vec![
                "health".into(),
                "--task".into(),
                "diabetes".into(),
                "--data".into(),
                health_csv.display().to_string(),
                "--splits".into(),
                "3".into(),
                "--steps".into(),
                "10".into(),
                "--seed".into(),
                "4".into(),
            ],
        ),
        (
            "prop1",
            vec![
                "prop1".into(),
                "--trials".into(),
                "50".into(),
                "--individuals".into(),
                "5".into(),
                "--steps".into(),
                "6".into(),
                "--deploy-size".into(),
                "16".into(),
                "--seed".into(),
                "2".into(),
            ],
        ),
        (
            "flowvar",
            vec![
                "flowvar".into(),
                "--data".into(),
                ratings.display().to_string(),
                "--individuals".into(),
                "4".into(),
                "--runs".into(),
                "2".into(),
                "--dim".into(),
                "3".into(),
                "--steps".into(),
                "20".into(),
                "--lr".into(),
                "0.005".into(),
                "--seed".into(),
                "3".into(),
            ],
        ),
    ];
    let mut checks = Vec::new();
    for (name, args) in &commands {
        let dir = TempDir::new().unwrap();
        let mut reports = Vec::new();
        for sub in ["a", "b"] {
            let out_dir = dir.path().join(sub);
            let status = Command::new(bin)
                .args(args)
                .args(["--out-dir", out_dir.to_str().unwrap()])
                // Vary the worker count too; it must not matter.
                .args(["--workers", if sub == "a" { "1" } else { "3" }])
                .output()
                .unwrap();
            assert!(
                status.status.success(),
                "{name} rerun failed: {}",
                String::from_utf8_lossy(&status.stderr)
            );
            reports.push(fs::read(out_dir.join("report.json")).unwrap());
        }
        checks.push((
            format!("{name} report.json identical across reruns"),
            reports[0] == reports[1],
        ));
    }
    c.finish(&checks);
}
