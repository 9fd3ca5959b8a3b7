//! Reciprocity statistics over flow ledgers.
//!
//! The per-individual reciprocity score compares inflow and outflow as a
//! ratio in [0, 1]; population summaries then ask what score threshold a
//! given fraction of individuals clears, how correlated the two flows
//! are, how often they go negative, and how stable they are across
//! repeated runs.

use std::collections::{BTreeMap, BTreeSet};

use crate::datamodel::{FlowLedger, IndividualId};
use crate::error::{Error, Result};

/// Ratio-based reciprocity of one individual's flows.
///
/// Flows of the same sign score `min(i/o, o/i)`, which is 1 when they
/// match exactly and decays toward 0 as they diverge. Opposite signs (or
/// exactly one zero flow) score 0; two exactly-zero flows are in perfect,
/// if trivial, balance and score 1.
pub fn reciprocity_score(inflow: f64, outflow: f64) -> f64 {
    if inflow == 0.0 && outflow == 0.0 {
        return 1.0;
    }
    if inflow * outflow <= 0.0 {
        return 0.0;
    }
    (inflow / outflow).min(outflow / inflow)
}

/// Per-individual scores of a ledger, keyed like the ledger.
pub fn ledger_scores(ledger: &FlowLedger) -> BTreeMap<IndividualId, f64> {
    ledger
        .inflow
        .iter()
        .map(|(&id, &i)| (id, reciprocity_score(i, ledger.outflow[&id])))
        .collect()
}

/// The largest score threshold `alpha` such that at least a `p` fraction
/// of the scores are `>= alpha`; equivalently the `ceil(p*n)`-th largest
/// score. `p` must be in (0, 1].
pub fn p_alpha(scores: &[f64], p: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("p_alpha of an empty score list"));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("p must be in (0, 1], got {p}")));
    }
    let n = scores.len();
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Small epsilon so p*n lands on the intended integer despite binary
    // rounding (e.g. 0.9 * 10 evaluating just above 9).
    let k = ((p * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let k = k.min(n);
    Ok(sorted[n - k])
}

/// Nearest-rank percentile: the smallest value with at least a `q`
/// fraction of the data at or below it. `values` may be unsorted.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty list");
    assert!((0.0..=1.0).contains(&q), "q must be in [0, 1]");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let k = ((q * n as f64) - 1e-9).ceil().max(1.0) as usize;
    sorted[k.min(n) - 1]
}

/// Pearson correlation between inflow and outflow across individuals.
/// `None` when there are fewer than two individuals or either flow is
/// constant.
pub fn flow_correlation(ledger: &FlowLedger) -> Option<f64> {
    let n = ledger.len();
    if n < 2 {
        return None;
    }
    let xs: Vec<f64> = ledger.inflow.values().copied().collect();
    let ys: Vec<f64> = ledger.outflow.values().copied().collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mx = mean(&xs);
    let my = mean(&ys);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Fractions of individuals with strictly negative inflow and outflow.
pub fn negative_flow_fractions(ledger: &FlowLedger) -> (f64, f64) {
    let n = ledger.len() as f64;
    let neg = |m: &BTreeMap<IndividualId, f64>| m.values().filter(|v| **v < 0.0).count() as f64 / n;
    (neg(&ledger.inflow), neg(&ledger.outflow))
}

/// Averages ledgers from repeated runs (different splits or seeds) into
/// one. An individual's inflow is averaged over the runs where they had
/// deployment examples, outflow over the runs where they had training
/// examples; an individual absent from every qualifying run gets 0. The
/// aggregated counts are summed, preserving "ever appeared" semantics.
pub fn aggregate_ledgers(ledgers: &[FlowLedger]) -> Result<FlowLedger> {
    if ledgers.is_empty() {
        return Err(Error::invalid("aggregate_ledgers on an empty list"));
    }
    let method = ledgers[0].method;
    if ledgers.iter().any(|l| l.method != method) {
        return Err(Error::invalid("cannot aggregate ledgers of different methods"));
    }
    for l in ledgers {
        l.validate()?;
    }
    let ids: BTreeSet<IndividualId> = ledgers
        .iter()
        .flat_map(|l| l.individuals())
        .collect();

    let has_selfflow = ledgers.iter().all(|l| l.selfflow.is_some());
    let mut inflow = BTreeMap::new();
    let mut outflow = BTreeMap::new();
    let mut selfflow = BTreeMap::new();
    let mut train_counts = BTreeMap::new();
    let mut deploy_counts = BTreeMap::new();
    for &id in &ids {
        let mut isum = 0.0;
        let mut icnt = 0usize;
        let mut osum = 0.0;
        let mut ocnt = 0usize;
        let mut ssum = 0.0;
        let mut scnt = 0usize;
        let mut tc = 0usize;
        let mut dc = 0usize;
        for l in ledgers {
            let (Some(&t), Some(&d)) = (l.train_counts.get(&id), l.deploy_counts.get(&id)) else {
                continue;
            };
            tc += t;
            dc += d;
            if d > 0 {
                isum += l.inflow[&id];
                icnt += 1;
            }
            if t > 0 {
                osum += l.outflow[&id];
                ocnt += 1;
            }
            if t > 0 && d > 0 {
                if let Some(sf) = &l.selfflow {
                    ssum += sf[&id];
                    scnt += 1;
                }
            }
        }
        inflow.insert(id, if icnt > 0 { isum / icnt as f64 } else { 0.0 });
        outflow.insert(id, if ocnt > 0 { osum / ocnt as f64 } else { 0.0 });
        if has_selfflow {
            selfflow.insert(id, if scnt > 0 { ssum / scnt as f64 } else { 0.0 });
        }
        train_counts.insert(id, tc);
        deploy_counts.insert(id, dc);
    }
    let out = FlowLedger {
        method,
        inflow,
        outflow,
        selfflow: has_selfflow.then_some(selfflow),
        train_counts,
        deploy_counts,
    };
    out.validate()?;
    Ok(out)
}

/// Per-individual signal-to-noise ratio of flows across repeated runs:
/// `|mean| / sample std` over the runs where the flow is defined (deploy
/// presence for inflow, train presence for outflow). Individuals with
/// fewer than two qualifying runs are omitted; zero spread with a nonzero
/// mean maps to infinity, and zero spread around zero is omitted as
/// carrying no information.
#[derive(Debug, Clone, Default)]
pub struct SnrReport {
    pub inflow: BTreeMap<IndividualId, f64>,
    pub outflow: BTreeMap<IndividualId, f64>,
}

pub fn flow_snr(ledgers: &[FlowLedger]) -> Result<SnrReport> {
    if ledgers.len() < 2 {
        return Err(Error::invalid("snr needs at least two runs"));
    }
    let ids: BTreeSet<IndividualId> = ledgers.iter().flat_map(|l| l.individuals()).collect();
    let snr_of = |samples: &[f64]| -> Option<f64> {
        if samples.len() < 2 {
            return None;
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        if std == 0.0 {
            if mean == 0.0 {
                None
            } else {
                Some(f64::INFINITY)
            }
        } else {
            Some(mean.abs() / std)
        }
    };
    let mut report = SnrReport::default();
    for &id in &ids {
        let mut in_samples = Vec::new();
        let mut out_samples = Vec::new();
        for l in ledgers {
            let (Some(&t), Some(&d)) = (l.train_counts.get(&id), l.deploy_counts.get(&id)) else {
                continue;
            };
            if d > 0 {
                in_samples.push(l.inflow[&id]);
            }
            if t > 0 {
                out_samples.push(l.outflow[&id]);
            }
        }
        if let Some(v) = snr_of(&in_samples) {
            report.inflow.insert(id, v);
        }
        if let Some(v) = snr_of(&out_samples) {
            report.outflow.insert(id, v);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::InfluenceMethod;

    fn ledger_from(pairs: &[(u64, f64, f64)]) -> FlowLedger {
        let inflow = pairs
            .iter()
            .map(|&(id, i, _)| (IndividualId(id), i))
            .collect::<BTreeMap<_, _>>();
        let outflow = pairs
            .iter()
            .map(|&(id, _, o)| (IndividualId(id), o))
            .collect::<BTreeMap<_, _>>();
        let ones = pairs
            .iter()
            .map(|&(id, _, _)| (IndividualId(id), 1usize))
            .collect::<BTreeMap<_, _>>();
        FlowLedger {
            method: InfluenceMethod::TracIn,
            inflow,
            outflow,
            selfflow: None,
            train_counts: ones.clone(),
            deploy_counts: ones,
        }
    }

    #[test]
    fn score_matches_reference_cases() {
        assert_eq!(reciprocity_score(2.0, 1.0), 0.5);
        assert_eq!(reciprocity_score(1.0, 2.0), 0.5);
        assert_eq!(reciprocity_score(-1.0, -2.0), 0.5);
        assert_eq!(reciprocity_score(3.0, 3.0), 1.0);
        assert_eq!(reciprocity_score(1.0, -1.0), 0.0);
        assert_eq!(reciprocity_score(0.0, 5.0), 0.0);
        assert_eq!(reciprocity_score(-4.0, 0.0), 0.0);
        assert_eq!(reciprocity_score(0.0, 0.0), 1.0);
    }

    #[test]
    fn p_alpha_matches_reference_case() {
        let scores = [0.1, 0.5, 0.9, 1.0];
        assert_eq!(p_alpha(&scores, 0.75).unwrap(), 0.5);
        assert_eq!(p_alpha(&scores, 1.0).unwrap(), 0.1);
        assert_eq!(p_alpha(&scores, 0.25).unwrap(), 1.0);
        assert_eq!(p_alpha(&scores, 0.5).unwrap(), 0.9);
        // 0.9 * 10 must select the 9th largest, not fall to the 10th.
        let ten: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert_eq!(p_alpha(&ten, 0.9).unwrap(), 0.2);
        assert!(p_alpha(&[], 0.5).is_err());
        assert!(p_alpha(&scores, 0.0).is_err());
        assert!(p_alpha(&scores, 1.5).is_err());
    }

    #[test]
    fn percentile_is_nearest_rank() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(percentile(&v, 0.5), 2.0);
        assert_eq!(percentile(&v, 0.75), 3.0);
        assert_eq!(percentile(&v, 1.0), 4.0);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&[7.0], 0.5), 7.0);
    }

    #[test]
    fn correlation_matches_hand_value_and_degenerates_to_none() {
        // inflow = outflow -> correlation 1.
        let l = ledger_from(&[(1, 1.0, 1.0), (2, 2.0, 2.0), (3, 4.0, 4.0)]);
        assert!((flow_correlation(&l).unwrap() - 1.0).abs() < 1e-12);
        // Anti-correlated.
        let l = ledger_from(&[(1, 1.0, 3.0), (2, 2.0, 2.0), (3, 3.0, 1.0)]);
        assert!((flow_correlation(&l).unwrap() + 1.0).abs() < 1e-12);
        // Constant outflow -> undefined.
        let l = ledger_from(&[(1, 1.0, 2.0), (2, 5.0, 2.0)]);
        assert_eq!(flow_correlation(&l), None);
        let l = ledger_from(&[(1, 1.0, 2.0)]);
        assert_eq!(flow_correlation(&l), None);
    }

    #[test]
    fn negative_fractions_count_strictly_negative() {
        let l = ledger_from(&[(1, -1.0, 0.5), (2, 0.0, -0.5), (3, 2.0, -1.5), (4, 1.0, 1.0)]);
        let (ni, no) = negative_flow_fractions(&l);
        assert_eq!(ni, 0.25);
        assert_eq!(no, 0.5);
    }

    #[test]
    fn aggregation_averages_only_defined_sides() {
        let mut a = ledger_from(&[(1, 10.0, 2.0), (2, 4.0, 6.0)]);
        // In run a, individual 1 was train-only: inflow slot is present
        // but undefined because they had no deploy examples.
        a.deploy_counts.insert(IndividualId(1), 0);
        a.inflow.insert(IndividualId(1), 0.0);
        let b = ledger_from(&[(1, 8.0, 4.0), (3, 1.0, 1.0)]);
        let agg = aggregate_ledgers(&[a, b]).unwrap();
        // Individual 1: inflow defined only in run b.
        assert_eq!(agg.inflow[&IndividualId(1)], 8.0);
        // Outflow defined in both: mean of 2 and 4.
        assert_eq!(agg.outflow[&IndividualId(1)], 3.0);
        // Individual 2 appears only in run a.
        assert_eq!(agg.inflow[&IndividualId(2)], 4.0);
        // Individual 3 only in run b.
        assert_eq!(agg.outflow[&IndividualId(3)], 1.0);
        assert_eq!(agg.len(), 3);
        agg.validate().unwrap();
    }

    #[test]
    fn aggregation_rejects_mixed_methods() {
        let a = ledger_from(&[(1, 1.0, 1.0)]);
        let mut b = ledger_from(&[(1, 1.0, 1.0)]);
        b.method = InfluenceMethod::Marginal;
        assert!(aggregate_ledgers(&[a, b]).is_err());
    }

    #[test]
    fn snr_matches_hand_computation() {
        let runs = vec![
            ledger_from(&[(1, 1.0, 5.0)]),
            ledger_from(&[(1, 2.0, 5.0)]),
            ledger_from(&[(1, 3.0, 5.0)]),
        ];
        let snr = flow_snr(&runs).unwrap();
        // inflow samples {1,2,3}: mean 2, sample std 1 -> snr 2.
        assert!((snr.inflow[&IndividualId(1)] - 2.0).abs() < 1e-12);
        // outflow constant nonzero -> infinity sentinel.
        assert_eq!(snr.outflow[&IndividualId(1)], f64::INFINITY);
    }

    #[test]
    fn snr_excludes_underdefined_individuals() {
        let mut a = ledger_from(&[(1, 1.0, 1.0), (2, 1.0, 1.0)]);
        a.deploy_counts.insert(IndividualId(2), 0);
        let mut b = ledger_from(&[(1, 2.0, 2.0), (2, 2.0, 2.0)]);
        b.deploy_counts.insert(IndividualId(2), 0);
        let snr = flow_snr(&[a, b]).unwrap();
        // Individual 2 never has a defined inflow sample.
        assert!(!snr.inflow.contains_key(&IndividualId(2)));
        assert!(snr.outflow.contains_key(&IndividualId(2)));
        // Zero spread around zero is omitted rather than reported.
        let zeros = vec![
            ledger_from(&[(7, 0.0, 0.0)]),
            ledger_from(&[(7, 0.0, 0.0)]),
        ];
        let snr = flow_snr(&zeros).unwrap();
        assert!(snr.inflow.is_empty());
    }
}
