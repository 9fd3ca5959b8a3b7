//! Analytic gradients vs central finite differences.
//!
//! Every model's `grad_example` is checked against
//! `(loss(w + h e_j) - loss(w - h e_j)) / 2h` with `h = 1e-5 * (1 + |w_j|)`,
//! elementwise, requiring relative error below 1e-4.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use flowtrace_core::models::{
    grad_example, init_params, layout_for, loss_example, ModelSpec, Parameters, RegCounts,
};
use flowtrace_core::seeding::rng_from;
use flowtrace_core::{Dataset, Example, FeaturePayload, FeatureSchema, IndividualId};

const REL_TOL: f64 = 1e-4;

fn check_example(
    spec: &ModelSpec,
    params: &Parameters,
    ex: &Example,
    counts: &RegCounts,
) -> f64 {
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
        let numeric =
            (loss_example(spec, &plus, ex, counts) - loss_example(spec, &minus, ex, counts))
                / (2.0 * h);
        let rel = (analytic[j] - numeric).abs() / analytic[j].abs().max(numeric.abs()).max(1.0);
        assert!(
            rel < REL_TOL,
            "param {j}: analytic {} vs numeric {numeric} (rel {rel})",
            analytic[j]
        );
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn dense_model_gradients_match_finite_differences() {
    let mut rng = rng_from(0x6d5a, 0);
    for spec in [ModelSpec::linear(), ModelSpec::logistic()] {
        for case in 0..12 {
            let dim = 1 + case % 4;
            let examples: Vec<Example> = (0..3)
                .map(|i| Example {
                    individual: IndividualId(i),
                    features: FeaturePayload::Dense(
                        (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect(),
                    ),
                    label: if spec.kind == flowtrace_core::ModelKind::LogisticRegression {
                        f64::from(rng.random_range(0..2u8))
                    } else {
                        StandardNormal.sample(&mut rng)
                    },
                })
                .collect();
            let schema = FeatureSchema::Dense { dim };
            let ds = Dataset::new(examples, schema).unwrap();
            let layout = layout_for(&spec, &schema).unwrap();
            let storage: Vec<f64> = (0..layout.len())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let params = Parameters::from_storage(layout, storage).unwrap();
            for ex in ds.examples() {
                check_example(&spec, &params, ex, &RegCounts::none());
            }
        }
    }
}

#[test]
fn factorization_gradients_match_finite_differences() {
    let mut rng = rng_from(1234, 0);
    for case in 0..10 {
        let dim = 1 + case % 3;
        let lambda = [0.0, 0.4, 1.0][case % 3];
        let spec = ModelSpec::matrix_factorization(dim, lambda).unwrap();
        let schema = FeatureSchema::Sparse {
            num_users: 3,
            num_items: 3,
        };
        let train = Dataset::new(
            vec![
                Example {
                    individual: IndividualId(0),
                    features: FeaturePayload::Pair { user: 0, item: 0 },
                    label: 4.0,
                },
                Example {
                    individual: IndividualId(0),
                    features: FeaturePayload::Pair { user: 0, item: 1 },
                    label: 2.0,
                },
                Example {
                    individual: IndividualId(1),
                    features: FeaturePayload::Pair { user: 1, item: 0 },
                    label: 3.0,
                },
            ],
            schema,
        )
        .unwrap();
        let counts = RegCounts::from_train(&train);
        let params = init_params(&spec, &schema, &train, 1000 + case as u64).unwrap();
        for ex in train.examples() {
            check_example(&spec, &params, ex, &counts);
        }
        // An example whose user (2) and item (2) never appear in the
        // train set: the gradient must match the loss that omits their
        // regularization shares.
        let cold = Example {
            individual: IndividualId(2),
            features: FeaturePayload::Pair { user: 2, item: 2 },
            label: 1.0 + rng.random_range(0.0..2.0),
        };
        check_example(&spec, &params, &cold, &counts);
    }
}
