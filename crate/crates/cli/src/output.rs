//! Report and CSV writers. Everything written here is deterministic:
//! maps are ordered, floats go through `quantize`, and JSON is emitted
//! with a fixed pretty-printer, so a rerun with the same seed produces
//! byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use flowtrace_core::report::{quantize, to_json_pretty, Histogram};
use flowtrace_core::{Error, FlowLedger, Result};
use serde::Serialize;

pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<OutDir> {
        fs::create_dir_all(root).map_err(|e| Error::io(root.display().to_string(), e))?;
        Ok(OutDir {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
        fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
        log::info!("wrote {}", path.display());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, doc: &T) -> Result<()> {
        let mut text = to_json_pretty(doc);
        text.push('\n');
        self.write_text(name, &text)
    }

    pub fn write_ledger(&self, name: &str, ledger: &FlowLedger) -> Result<()> {
        let mut buf = Vec::new();
        ledger.write_csv(&mut buf)?;
        self.write_text(
            name,
            std::str::from_utf8(&buf).expect("ledger csv is ascii"),
        )
    }

    pub fn write_histogram(&self, name: &str, hist: &Histogram) -> Result<()> {
        self.write_text(name, &hist.to_csv())
    }
}

/// One row of rmse.csv.
#[derive(Debug, Serialize)]
pub struct RmseRow {
    pub split: usize,
    pub repeat: usize,
    pub rmse: f64,
}

pub fn rmse_csv(rows: &[RmseRow]) -> String {
    let mut out = String::from("split,repeat,rmse\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            row.split,
            row.repeat,
            quantize(row.rmse)
        ));
    }
    out
}

/// One row of discrepancy.csv: per-run percentiles of the relative
/// first-order discrepancy, over the steps where it is defined.
#[derive(Debug, Clone, Serialize)]
pub struct DiscrepancyRow {
    pub split: usize,
    pub repeat: usize,
    pub defined_steps: usize,
    pub p50: Option<f64>,
    pub p80: Option<f64>,
    pub p90: Option<f64>,
}

pub fn discrepancy_csv(rows: &[DiscrepancyRow]) -> String {
    let fmt = |v: Option<f64>| v.map(|x| quantize(x).to_string()).unwrap_or_default();
    let mut out = String::from("split,repeat,defined_steps,p50,p80,p90\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.split,
            row.repeat,
            row.defined_steps,
            fmt(row.p50),
            fmt(row.p80),
            fmt(row.p90)
        ));
    }
    out
}

/// snr.csv: per-individual inflow and outflow SNR. Individuals excluded
/// from a side (fewer than two qualifying runs) get an empty cell.
pub fn snr_csv(snr: &flowtrace_core::reciprocity::SnrReport) -> String {
    let mut out = String::from("individual_id,inflow_snr,outflow_snr\n");
    let ids: std::collections::BTreeSet<_> = snr
        .inflow
        .keys()
        .chain(snr.outflow.keys())
        .copied()
        .collect();
    let fmt = |v: Option<&f64>| v.map(|x| quantize(*x).to_string()).unwrap_or_default();
    for id in ids {
        out.push_str(&format!(
            "{},{},{}\n",
            id,
            fmt(snr.inflow.get(&id)),
            fmt(snr.outflow.get(&id))
        ));
    }
    out
}

/// Bin edges used for the score histogram: twenty bins over [0, 1].
pub fn score_hist_edges() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Bin edges for SNR histograms: powers of two from 2^-8 up to 2^12,
/// clamped outer bins.
pub fn snr_hist_edges() -> Vec<f64> {
    (-8..=12).map(|e| (e as f64).exp2()).collect()
}
