//! Mini-batch gradient descent with an observation hook.
//!
//! The update rule is the plain summed form
//! `w_{t+1} = w_t - eta * sum_{z in B_t} grad(w_t, z)` with an optional
//! per-example norm clip applied before the sum. A [`StepHook`] sees every
//! step's batch, parameters, and exactly the (clipped) per-example
//! gradients that the update will apply, which is what makes first-order
//! influence attribution consistent with the actual parameter movement.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::datamodel::Dataset;
use crate::error::{Error, Result};
use crate::models::{
    dataset_mean_loss, grad_example_into, init_params, layout_for, GradientVector, ModelSpec,
    Parameters, RegCounts,
};
use crate::seeding::{rng_from, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// Each batch is an independent uniform draw with replacement.
    WithReplacementFresh,
    /// Positions are shuffled once per epoch and dealt out in order; the
    /// final batch of an epoch may be short.
    EpochShuffle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    FullBatch,
    Minibatch { size: usize, sampling: SamplingMode },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_mode: BatchMode,
    /// Per-example gradient norm cap, applied before summation.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn full_batch(steps: usize, learning_rate: f64, seed: u64) -> Self {
        TrainConfig {
            steps,
            learning_rate,
            batch_mode: BatchMode::FullBatch,
            clip_norm: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::invalid(format!(
                    "clip_norm must be positive and finite, got {c}"
                )));
            }
        }
        if let BatchMode::Minibatch { size, .. } = self.batch_mode {
            if size == 0 {
                return Err(Error::invalid("batch size must be >= 1"));
            }
        }
        Ok(())
    }
}

/// Everything an observer may inspect at one step, immediately before the
/// parameter update is applied. `batch_grads[k]` is the gradient of
/// `batch[k]`'s example at the current parameters, already clipped; the
/// update the trainer applies is exactly
/// `-learning_rate * sum(batch_grads)`.
pub struct StepView<'a> {
    pub step: usize,
    pub learning_rate: f64,
    pub batch: &'a [usize],
    pub params: &'a Parameters,
    pub batch_grads: &'a [GradientVector],
}

pub trait StepHook {
    fn on_step(&mut self, view: &StepView<'_>) -> Result<()>;
}

/// Draws batch position lists for one training run.
pub struct BatchSampler {
    mode: BatchMode,
    train_size: usize,
    rng: ChaCha12Rng,
    epoch_order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(mode: BatchMode, train_size: usize, rng: ChaCha12Rng) -> Result<Self> {
        if train_size == 0 {
            return Err(Error::invalid("cannot sample batches from an empty train set"));
        }
        if let BatchMode::Minibatch {
            size,
            sampling: SamplingMode::EpochShuffle,
        } = mode
        {
            if size > train_size {
                return Err(Error::invalid(format!(
                    "epoch-shuffle batch size {size} exceeds train size {train_size}"
                )));
            }
        }
        let mut sampler = BatchSampler {
            mode,
            train_size,
            rng,
            epoch_order: Vec::new(),
            cursor: 0,
        };
        if matches!(
            mode,
            BatchMode::Minibatch {
                sampling: SamplingMode::EpochShuffle,
                ..
            }
        ) {
            sampler.epoch_order = (0..train_size).collect();
            sampler.reshuffle();
        }
        Ok(sampler)
    }

    fn reshuffle(&mut self) {
        self.epoch_order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    /// Writes the next batch's train positions into `out`.
    pub fn fill_next(&mut self, out: &mut Vec<usize>) {
        out.clear();
        match self.mode {
            BatchMode::FullBatch => out.extend(0..self.train_size),
            BatchMode::Minibatch {
                size,
                sampling: SamplingMode::WithReplacementFresh,
            } => {
                for _ in 0..size {
                    out.push(self.rng.random_range(0..self.train_size));
                }
            }
            BatchMode::Minibatch {
                size,
                sampling: SamplingMode::EpochShuffle,
            } => {
                if self.cursor >= self.epoch_order.len() {
                    self.reshuffle();
                }
                let end = (self.cursor + size).min(self.epoch_order.len());
                out.extend_from_slice(&self.epoch_order[self.cursor..end]);
                self.cursor = end;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps_run: usize,
    /// Mean per-example training loss at the final parameters.
    pub final_train_loss: f64,
}

/// Trains from the model's standard initialization for this train set.
pub fn train(
    spec: &ModelSpec,
    train_set: &Dataset,
    config: &TrainConfig,
    hook: Option<&mut dyn StepHook>,
) -> Result<(Parameters, TrainSummary)> {
    let init = init_params(spec, train_set.schema(), train_set, config.seed)?;
    train_from(spec, init, train_set, config, hook)
}

/// Trains from explicit initial parameters. Retraining variants (e.g.
/// leave-one-out) pass the original run's init here so runs differ only in
/// their data.
pub fn train_from(
    spec: &ModelSpec,
    init: Parameters,
    train_set: &Dataset,
    config: &TrainConfig,
    mut hook: Option<&mut dyn StepHook>,
) -> Result<(Parameters, TrainSummary)> {
    config.validate()?;
    let layout = layout_for(spec, train_set.schema())?;
    if *init.layout() != layout {
        return Err(Error::invalid(
            "initial parameters have a different layout than this model and train set",
        ));
    }
    let counts = RegCounts::from_train(train_set);
    let mut params = init;
    let mut sampler = BatchSampler::new(
        config.batch_mode,
        train_set.len(),
        rng_from(config.seed, streams::BATCH),
    )?;

    let mut batch: Vec<usize> = Vec::new();
    let mut batch_grads: Vec<GradientVector> = Vec::new();
    let mut update = vec![0.0; params.len()];

    for step in 0..config.steps {
        sampler.fill_next(&mut batch);
        while batch_grads.len() < batch.len() {
            batch_grads.push(GradientVector::placeholder(spec, &layout));
        }
        for (k, &pos) in batch.iter().enumerate() {
            grad_example_into(
                spec,
                &params,
                &train_set.examples()[pos],
                &counts,
                &mut batch_grads[k],
            );
            if let Some(c) = config.clip_norm {
                batch_grads[k].clip(c);
            }
        }
        if let Some(h) = hook.as_deref_mut() {
            h.on_step(&StepView {
                step,
                learning_rate: config.learning_rate,
                batch: &batch,
                params: &params,
                batch_grads: &batch_grads[..batch.len()],
            })?;
        }
        update.fill(0.0);
        for g in &batch_grads[..batch.len()] {
            g.add_scaled_into(1.0, &mut update, &layout);
        }
        params.axpy(-config.learning_rate, &update);
        if !params.all_finite() {
            return Err(Error::Divergence {
                step,
                detail: "parameters became non-finite".into(),
            });
        }
    }

    let final_train_loss = dataset_mean_loss(spec, &params, train_set, &counts);
    if !final_train_loss.is_finite() {
        return Err(Error::Divergence {
            step: config.steps,
            detail: "final training loss is non-finite".into(),
        });
    }
    Ok((
        params,
        TrainSummary {
            steps_run: config.steps,
            final_train_loss,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{Example, FeaturePayload, FeatureSchema, IndividualId};
    use crate::models::dataset_mean_loss;

    fn toy_regression(n: usize) -> Dataset {
        // y = 2x - 1 with deterministic x values.
        let examples = (0..n)
            .map(|i| {
                let x = (i as f64) / (n as f64) * 4.0 - 2.0;
                Example {
                    individual: IndividualId((i % 5) as u64),
                    features: FeaturePayload::Dense(vec![x]),
                    label: 2.0 * x - 1.0,
                }
            })
            .collect();
        Dataset::new(examples, FeatureSchema::Dense { dim: 1 }).unwrap()
    }

    fn toy_classification(n: usize) -> Dataset {
        let examples = (0..n)
            .map(|i| {
                let x = (i as f64) / (n as f64) * 4.0 - 2.0;
                Example {
                    individual: IndividualId(i as u64),
                    features: FeaturePayload::Dense(vec![x]),
                    label: if x > 0.25 { 1.0 } else { 0.0 },
                }
            })
            .collect();
        Dataset::new(examples, FeatureSchema::Dense { dim: 1 }).unwrap()
    }

    #[test]
    fn full_batch_sampler_returns_all_positions() {
        let mut s = BatchSampler::new(BatchMode::FullBatch, 4, rng_from(0, 0)).unwrap();
        let mut batch = Vec::new();
        s.fill_next(&mut batch);
        assert_eq!(batch, vec![0, 1, 2, 3]);
        s.fill_next(&mut batch);
        assert_eq!(batch, vec![0, 1, 2, 3]);
    }

    #[test]
    fn epoch_shuffle_covers_each_epoch_exactly_once() {
        let mode = BatchMode::Minibatch {
            size: 2,
            sampling: SamplingMode::EpochShuffle,
        };
        let mut s = BatchSampler::new(mode, 5, rng_from(3, 0)).unwrap();
        let mut batch = Vec::new();
        for _epoch in 0..3 {
            let mut seen = Vec::new();
            // Sizes 2, 2, 1 over a 5-example epoch.
            for expected in [2usize, 2, 1] {
                s.fill_next(&mut batch);
                assert_eq!(batch.len(), expected);
                seen.extend_from_slice(&batch);
            }
            seen.sort_unstable();
            assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn epoch_shuffle_rejects_oversized_batches() {
        let mode = BatchMode::Minibatch {
            size: 6,
            sampling: SamplingMode::EpochShuffle,
        };
        assert!(BatchSampler::new(mode, 5, rng_from(0, 0)).is_err());
    }

    #[test]
    fn with_replacement_draws_are_uniform() {
        // Chi-squared goodness of fit over 16 cells; critical value for
        // df=15 at p=0.001 is 37.697.
        let mode = BatchMode::Minibatch {
            size: 100,
            sampling: SamplingMode::WithReplacementFresh,
        };
        let mut s = BatchSampler::new(mode, 16, rng_from(1234, 0)).unwrap();
        let mut counts = [0u64; 16];
        let mut batch = Vec::new();
        for _ in 0..160 {
            s.fill_next(&mut batch);
            for &p in &batch {
                counts[p] += 1;
            }
        }
        let expected = 16000.0 / 16.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 37.697, "chi2 = {chi2}");
    }

    #[test]
    fn training_is_seed_deterministic() {
        let ds = toy_regression(20);
        let spec = ModelSpec::linear();
        let config = TrainConfig {
            steps: 50,
            learning_rate: 0.01,
            batch_mode: BatchMode::Minibatch {
                size: 4,
                sampling: SamplingMode::WithReplacementFresh,
            },
            clip_norm: None,
            seed: 7,
        };
        let (a, _) = train(&spec, &ds, &config, None).unwrap();
        let (b, _) = train(&spec, &ds, &config, None).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        let other = TrainConfig { seed: 8, ..config };
        let (c, _) = train(&spec, &ds, &other, None).unwrap();
        assert_ne!(a.as_slice(), c.as_slice());
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let ds = toy_regression(10);
        let spec = ModelSpec::linear();
        let config = TrainConfig::full_batch(0, 0.1, 0);
        let (params, summary) = train(&spec, &ds, &config, None).unwrap();
        let init = init_params(&spec, ds.schema(), &ds, 0).unwrap();
        assert_eq!(params.as_slice(), init.as_slice());
        assert_eq!(summary.steps_run, 0);
    }

    #[test]
    fn full_batch_loss_is_non_increasing_for_convex_models() {
        struct LossTrace {
            spec: ModelSpec,
            ds: Dataset,
            losses: Vec<f64>,
        }
        impl StepHook for LossTrace {
            fn on_step(&mut self, view: &StepView<'_>) -> Result<()> {
                self.losses.push(dataset_mean_loss(
                    &self.spec,
                    view.params,
                    &self.ds,
                    &RegCounts::none(),
                ));
                Ok(())
            }
        }
        for (spec, ds, lr) in [
            (ModelSpec::linear(), toy_regression(30), 0.005),
            (ModelSpec::logistic(), toy_classification(30), 0.02),
        ] {
            let config = TrainConfig::full_batch(80, lr, 0);
            let mut hook = LossTrace {
                spec,
                ds: ds.clone(),
                losses: Vec::new(),
            };
            let (params, summary) = train(&spec, &ds, &config, Some(&mut hook)).unwrap();
            hook.losses
                .push(dataset_mean_loss(&spec, &params, &ds, &RegCounts::none()));
            for w in hook.losses.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "loss increased: {} -> {}", w[0], w[1]);
            }
            assert!(summary.final_train_loss < hook.losses[0]);
        }
    }

    #[test]
    fn hook_sees_exactly_the_applied_update() {
        struct Predictor {
            predicted_next: Option<Vec<f64>>,
            checked: usize,
        }
        impl StepHook for Predictor {
            fn on_step(&mut self, view: &StepView<'_>) -> Result<()> {
                if let Some(pred) = self.predicted_next.take() {
                    assert_eq!(pred, view.params.as_slice(), "at step {}", view.step);
                    self.checked += 1;
                }
                let layout = *view.params.layout();
                let mut update = vec![0.0; view.params.len()];
                for g in view.batch_grads {
                    g.add_scaled_into(1.0, &mut update, &layout);
                }
                let mut next = view.params.clone();
                next.axpy(-view.learning_rate, &update);
                self.predicted_next = Some(next.as_slice().to_vec());
                Ok(())
            }
        }
        let ds = toy_regression(12);
        let config = TrainConfig {
            steps: 25,
            learning_rate: 0.01,
            batch_mode: BatchMode::Minibatch {
                size: 3,
                sampling: SamplingMode::EpochShuffle,
            },
            clip_norm: Some(0.5),
            seed: 5,
        };
        let mut hook = Predictor {
            predicted_next: None,
            checked: 0,
        };
        let (params, _) = train(&ModelSpec::linear(), &ds, &config, Some(&mut hook)).unwrap();
        // The last prediction must match the returned parameters bitwise.
        assert_eq!(hook.predicted_next.unwrap(), params.as_slice());
        assert_eq!(hook.checked, 24);
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let ds = toy_regression(30);
        // Absurd learning rate on a summed gradient: blows up quickly.
        let config = TrainConfig::full_batch(200, 10.0, 0);
        match train(&ModelSpec::linear(), &ds, &config, None) {
            Err(Error::Divergence { step, .. }) => assert!(step < 200),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut c = TrainConfig::full_batch(10, 0.0, 0);
        assert!(c.validate().is_err());
        c.learning_rate = 0.1;
        c.clip_norm = Some(0.0);
        assert!(c.validate().is_err());
        c.clip_norm = Some(1.0);
        c.batch_mode = BatchMode::Minibatch {
            size: 0,
            sampling: SamplingMode::WithReplacementFresh,
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn clipping_caps_every_gradient_the_update_uses() {
        struct NormCheck {
            max_seen: f64,
        }
        impl StepHook for NormCheck {
            fn on_step(&mut self, view: &StepView<'_>) -> Result<()> {
                for g in view.batch_grads {
                    self.max_seen = self.max_seen.max(g.norm());
                }
                Ok(())
            }
        }
        let ds = toy_regression(20);
        let clip = 0.01;
        let config = TrainConfig {
            clip_norm: Some(clip),
            ..TrainConfig::full_batch(10, 0.01, 0)
        };
        let mut hook = NormCheck { max_seen: 0.0 };
        train(&ModelSpec::linear(), &ds, &config, Some(&mut hook)).unwrap();
        assert!(hook.max_seen <= clip + 1e-15);
        assert!(hook.max_seen > 0.0);
    }
}
