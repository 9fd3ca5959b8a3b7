//! Synthetic populations for the reciprocity-in-expectation experiment.
//!
//! Each population is a fixed finite bank of labeled examples; drawing
//! uniformly with replacement from the bank gives i.i.d. batches and
//! deployment sets from one shared distribution, which is exactly the
//! hypothesis under which mean inflow should equal mean outflow.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use flowtrace_core::models::ModelSpec;
use flowtrace_core::seeding::{rng_from, streams};
use flowtrace_core::{
    Dataset, Example, FeaturePayload, FeatureSchema, IndividualId, Result,
};

pub struct SynthBank {
    pub spec: ModelSpec,
    pub bank: Dataset,
}

/// Per-individual Gaussian feature clusters with a shared linear
/// labeling function plus an individual offset and observation noise.
pub fn linear_bank(individuals: usize, per_individual: usize, seed: u64) -> Result<SynthBank> {
    let dim = 4;
    let mut rng = rng_from(seed, streams::POPULATION);
    let truth: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut examples = Vec::with_capacity(individuals * per_individual);
    for u in 0..individuals {
        let center: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let offset: f64 = {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.5 * z
        };
        for _ in 0..per_individual {
            let x: Vec<f64> = center
                .iter()
                .map(|c| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    c + 0.5 * z
                })
                .collect();
            let noise: f64 = StandardNormal.sample(&mut rng);
            let label =
                truth.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + offset + 0.2 * noise;
            examples.push(Example {
                individual: IndividualId(u as u64),
                features: FeaturePayload::Dense(x),
                label,
            });
        }
    }
    let bank = Dataset::new(examples, FeatureSchema::Dense { dim })?;
    Ok(SynthBank {
        spec: ModelSpec::linear(),
        bank,
    })
}

/// Rating bank with additive user and item effects: each individual
/// rates a handful of items, rating = user bias + item bias + noise.
pub fn factorization_bank(
    individuals: usize,
    per_individual: usize,
    seed: u64,
) -> Result<SynthBank> {
    let num_items = (individuals / 2).max(4);
    let mut rng = rng_from(seed, streams::POPULATION);
    let user_bias: Vec<f64> = (0..individuals)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            3.0 + 0.5 * z
        })
        .collect();
    let item_bias: Vec<f64> = (0..num_items)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.5 * z
        })
        .collect();
    let mut examples = Vec::with_capacity(individuals * per_individual);
    for user in 0..individuals {
        for _ in 0..per_individual {
            let item = rng.random_range(0..num_items);
            let noise: f64 = StandardNormal.sample(&mut rng);
            examples.push(Example {
                individual: IndividualId(user as u64),
                features: FeaturePayload::Pair { user, item },
                label: user_bias[user] + item_bias[item] + 0.3 * noise,
            });
        }
    }
    let bank = Dataset::new(
        examples,
        FeatureSchema::Sparse {
            num_users: individuals,
            num_items,
        },
    )?;
    Ok(SynthBank {
        spec: ModelSpec::matrix_factorization(3, 0.1)?,
        bank,
    })
}

/// Uniform with-replacement draw of `n` examples from the bank.
pub fn draw_iid(bank: &Dataset, n: usize, rng: &mut impl Rng) -> Result<Dataset> {
    let examples: Vec<Example> = (0..n)
        .map(|_| bank.examples()[rng.random_range(0..bank.len())].clone())
        .collect();
    Dataset::new(examples, *bank.schema())
}
