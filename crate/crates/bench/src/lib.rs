//! Synthetic problem builders shared by the benchmarks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use flowtrace_core::ingest::random_split;
use flowtrace_core::seeding::rng_from;
use flowtrace_core::{Dataset, Example, FeaturePayload, FeatureSchema, IndividualId, SplitPair};

/// Linear-regression dataset: `n` examples over `dim` features, one
/// individual per four examples.
pub fn dense_problem(n: usize, dim: usize, seed: u64) -> Dataset {
    let mut rng = rng_from(seed, 0);
    let truth: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let examples = (0..n)
        .map(|i| {
            let features: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let noise: f64 = StandardNormal.sample(&mut rng);
            let label = features.iter().zip(&truth).map(|(x, w)| x * w).sum::<f64>() + 0.1 * noise;
            Example {
                individual: IndividualId((i / 4) as u64),
                features: FeaturePayload::Dense(features),
                label,
            }
        })
        .collect();
    Dataset::new(examples, FeatureSchema::Dense { dim }).unwrap()
}

/// Rating dataset: `per_user` ratings for each of `num_users` users over
/// `num_users / 2` items, ratings in 1..=5.
pub fn rating_problem(num_users: usize, per_user: usize, seed: u64) -> Dataset {
    let num_items = (num_users / 2).max(4);
    let mut rng = rng_from(seed, 0);
    let examples = (0..num_users)
        .flat_map(|user| {
            let mut rows = Vec::with_capacity(per_user);
            for _ in 0..per_user {
                rows.push(Example {
                    individual: IndividualId(user as u64),
                    features: FeaturePayload::Pair {
                        user,
                        item: rng.random_range(0..num_items),
                    },
                    label: f64::from(rng.random_range(1..=5u8)),
                });
            }
            rows
        })
        .collect();
    Dataset::new(examples, FeatureSchema::Sparse { num_users, num_items }).unwrap()
}

/// 75:25 split with a fixed seed.
pub fn split(ds: &Dataset) -> SplitPair {
    random_split(ds, 0.75, 17).unwrap()
}
