//! The four experiment commands.

pub mod flowvar;
pub mod health;
pub mod movielens;
pub mod prop1;

use flowtrace_core::seeding::derive_seed;
use flowtrace_core::{Error, InfluenceMethod, Result};

/// Independent seed for job `index` of a given purpose (split, run,
/// trial, ...), derived from the root seed. Purposes use the stream
/// labels from the core seeding module.
pub(crate) fn job_seed(root: u64, purpose: u64, index: u64) -> u64 {
    derive_seed(derive_seed(root, purpose), index)
}

pub fn parse_method(name: &str) -> Result<InfluenceMethod> {
    match name {
        "tracin" => Ok(InfluenceMethod::TracIn),
        "marginal" => Ok(InfluenceMethod::Marginal),
        other => Err(Error::invalid(format!(
            "unknown method {other:?}; expected tracin or marginal"
        ))),
    }
}

/// Sample standard deviation (n-1 denominator); 0 for fewer than two
/// samples.
pub(crate) fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}
