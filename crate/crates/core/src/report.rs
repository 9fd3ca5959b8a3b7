//! Serializable reciprocity reports and export helpers.
//!
//! Reports quantize floats to 12 significant digits before serialization
//! so that a rerun with the same seed produces byte-identical files.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::datamodel::{FlowLedger, IndividualId};
use crate::error::Result;
use crate::reciprocity::{
    flow_correlation, ledger_scores, negative_flow_fractions, p_alpha, percentile, SnrReport,
};

/// The `p` values every report's threshold curve is evaluated at.
pub const P_ALPHA_GRID: [f64; 4] = [0.5, 0.75, 0.9, 0.95];

/// Rounds to 12 significant decimal digits. Non-finite values pass
/// through (they serialize as JSON null).
pub fn quantize(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.11e}").parse().unwrap()
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct NegativeFractions {
    pub inflow: f64,
    pub outflow: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SnrPercentiles {
    pub p10: f64,
    pub p50: f64,
    pub p90: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SnrSummary {
    pub inflow: SnrPercentiles,
    pub outflow: SnrPercentiles,
}

/// Reciprocity summary of one (possibly aggregated) ledger.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ReciprocityReport {
    pub method: String,
    pub n_individuals: usize,
    /// `[p, alpha(p)]` rows over [`P_ALPHA_GRID`].
    pub p_alpha: Vec<(f64, f64)>,
    /// Pearson correlation of inflow vs outflow; null when degenerate.
    pub correlation: Option<f64>,
    pub negative_fractions: NegativeFractions,
    /// Present when the report was built from repeated runs.
    pub snr_percentiles: Option<SnrSummary>,
    /// Per-individual scores; kept out of the serialized report.
    #[serde(skip)]
    pub scores: BTreeMap<IndividualId, f64>,
}

fn snr_percentiles(map: &BTreeMap<IndividualId, f64>) -> SnrPercentiles {
    // Infinite sentinels sort to the top and only matter for p90 upward.
    let values: Vec<f64> = map.values().copied().collect();
    if values.is_empty() {
        return SnrPercentiles {
            p10: f64::NAN,
            p50: f64::NAN,
            p90: f64::NAN,
        };
    }
    SnrPercentiles {
        p10: quantize(percentile(&values, 0.1)),
        p50: quantize(percentile(&values, 0.5)),
        p90: quantize(percentile(&values, 0.9)),
    }
}

/// Builds the report for one ledger, attaching across-run SNR percentile
/// summaries when provided.
pub fn build_report(ledger: &FlowLedger, snr: Option<&SnrReport>) -> Result<ReciprocityReport> {
    ledger.validate()?;
    let scores = ledger_scores(ledger);
    let score_values: Vec<f64> = scores.values().copied().collect();
    let p_alpha_curve = P_ALPHA_GRID
        .iter()
        .map(|&p| Ok((p, quantize(p_alpha(&score_values, p)?))))
        .collect::<Result<Vec<_>>>()?;
    let (neg_in, neg_out) = negative_flow_fractions(ledger);
    Ok(ReciprocityReport {
        method: ledger.method.as_str().to_string(),
        n_individuals: ledger.len(),
        p_alpha: p_alpha_curve,
        correlation: flow_correlation(ledger).map(quantize),
        negative_fractions: NegativeFractions {
            inflow: quantize(neg_in),
            outflow: quantize(neg_out),
        },
        snr_percentiles: snr.map(|s| SnrSummary {
            inflow: snr_percentiles(&s.inflow),
            outflow: snr_percentiles(&s.outflow),
        }),
        scores,
    })
}

/// Serializes any report document as stable, human-readable JSON.
pub fn to_json_pretty<T: Serialize>(doc: &T) -> String {
    let mut out = serde_json::to_string_pretty(doc).expect("report serialization cannot fail");
    out.push('\n');
    out
}

/// Histogram with explicit bin edges; values below the first or at/above
/// the last edge are clamped into the outer bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(edges: Vec<f64>, values: impl IntoIterator<Item = f64>) -> Histogram {
        assert!(edges.len() >= 2, "histogram needs at least two edges");
        let bins = edges.len() - 1;
        let mut counts = vec![0usize; bins];
        for v in values {
            let mut idx = match edges.iter().position(|e| v < *e) {
                Some(0) => 0,
                Some(i) => i - 1,
                None => bins - 1,
            };
            if idx >= bins {
                idx = bins - 1;
            }
            counts[idx] += 1;
        }
        Histogram { edges, counts }
    }

    /// CSV rows `bin_lo,bin_hi,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        out
    }
}
