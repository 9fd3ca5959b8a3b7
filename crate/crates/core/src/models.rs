//! Model definitions: parameter layout, per-example losses and gradients.
//!
//! All three models expose the same per-example interface so training and
//! influence code never branch on the model kind. Matrix factorization
//! gradients are materialized sparsely (one user row and one item row)
//! because influence accumulation relies on that structure for its
//! running-time bound.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, Example, FeaturePayload, FeatureSchema};
use crate::error::{Error, Result};
use crate::seeding::{rng_from, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    LinearRegression,
    LogisticRegression,
    MatrixFactorization,
}

/// Model family plus its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Embedding dimension; matrix factorization only.
    pub embedding_dim: usize,
    /// L2 strength lambda on embeddings; matrix factorization only.
    pub regularization: f64,
    /// Standard deviation of the Gaussian embedding init.
    pub init_scale: f64,
}

impl ModelSpec {
    pub fn linear() -> Self {
        ModelSpec {
            kind: ModelKind::LinearRegression,
            embedding_dim: 0,
            regularization: 0.0,
            init_scale: 0.0,
        }
    }

    pub fn logistic() -> Self {
        ModelSpec {
            kind: ModelKind::LogisticRegression,
            ..Self::linear()
        }
    }

    pub fn matrix_factorization(embedding_dim: usize, regularization: f64) -> Result<Self> {
        if embedding_dim == 0 {
            return Err(Error::invalid("embedding_dim must be >= 1"));
        }
        if !(regularization >= 0.0) {
            return Err(Error::invalid("regularization must be >= 0"));
        }
        Ok(ModelSpec {
            kind: ModelKind::MatrixFactorization,
            embedding_dim,
            regularization,
            init_scale: 0.1,
        })
    }

    pub fn with_init_scale(mut self, init_scale: f64) -> Result<Self> {
        if !(init_scale > 0.0) {
            return Err(Error::invalid("init_scale must be > 0"));
        }
        self.init_scale = init_scale;
        Ok(self)
    }

    pub fn is_factorization(&self) -> bool {
        self.kind == ModelKind::MatrixFactorization
    }
}

/// Memory layout of a parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamLayout {
    /// `dim` weights followed by one bias.
    DenseWithBias { dim: usize },
    /// `num_users` user rows followed by `num_items` item rows, each of
    /// length `dim`, stored contiguously.
    Embeddings {
        num_users: usize,
        num_items: usize,
        dim: usize,
    },
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        match *self {
            ParamLayout::DenseWithBias { dim } => dim + 1,
            ParamLayout::Embeddings {
                num_users,
                num_items,
                dim,
            } => (num_users + num_items) * dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn user_offset(&self, user: usize) -> usize {
        match *self {
            ParamLayout::Embeddings { dim, .. } => user * dim,
            ParamLayout::DenseWithBias { .. } => panic!("dense layout has no user rows"),
        }
    }

    pub fn item_offset(&self, item: usize) -> usize {
        match *self {
            ParamLayout::Embeddings { num_users, dim, .. } => (num_users + item) * dim,
            ParamLayout::DenseWithBias { .. } => panic!("dense layout has no item rows"),
        }
    }
}

/// Derives the parameter layout a model needs for a feature schema.
pub fn layout_for(spec: &ModelSpec, schema: &FeatureSchema) -> Result<ParamLayout> {
    match (spec.kind, schema) {
        (ModelKind::LinearRegression | ModelKind::LogisticRegression, FeatureSchema::Dense { dim }) => {
            Ok(ParamLayout::DenseWithBias { dim: *dim })
        }
        (
            ModelKind::MatrixFactorization,
            FeatureSchema::Sparse {
                num_users,
                num_items,
            },
        ) => Ok(ParamLayout::Embeddings {
            num_users: *num_users,
            num_items: *num_items,
            dim: spec.embedding_dim,
        }),
        _ => Err(Error::invalid("model kind does not match feature schema")),
    }
}

/// Flat parameter vector with an interpretation.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    storage: Vec<f64>,
    layout: ParamLayout,
}

impl Parameters {
    pub fn zeroed(layout: ParamLayout) -> Self {
        Parameters {
            storage: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn from_storage(layout: ParamLayout, storage: Vec<f64>) -> Result<Self> {
        if storage.len() != layout.len() {
            return Err(Error::invalid(format!(
                "parameter storage length {} does not match layout length {}",
                storage.len(),
                layout.len()
            )));
        }
        Ok(Parameters { storage, layout })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.storage
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.storage
    }

    pub fn weights(&self) -> &[f64] {
        match self.layout {
            ParamLayout::DenseWithBias { dim } => &self.storage[..dim],
            _ => panic!("weights() on embedding layout"),
        }
    }

    pub fn bias(&self) -> f64 {
        match self.layout {
            ParamLayout::DenseWithBias { dim } => self.storage[dim],
            _ => panic!("bias() on embedding layout"),
        }
    }

    pub fn user_embedding(&self, user: usize) -> &[f64] {
        let off = self.layout.user_offset(user);
        let d = self.embedding_dim();
        &self.storage[off..off + d]
    }

    pub fn item_embedding(&self, item: usize) -> &[f64] {
        let off = self.layout.item_offset(item);
        let d = self.embedding_dim();
        &self.storage[off..off + d]
    }

    fn embedding_dim(&self) -> usize {
        match self.layout {
            ParamLayout::Embeddings { dim, .. } => dim,
            _ => panic!("embedding accessor on dense layout"),
        }
    }

    /// `self += a * x` over the flat storage.
    pub fn axpy(&mut self, a: f64, x: &[f64]) {
        debug_assert_eq!(x.len(), self.storage.len());
        for (w, v) in self.storage.iter_mut().zip(x) {
            *w += a * v;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.storage.iter().all(|v| v.is_finite())
    }
}

/// Per-example gradient. Dense models produce the full vector; matrix
/// factorization produces exactly one user row and one item row.
#[derive(Debug, Clone, PartialEq)]
pub enum GradientVector {
    Dense(Vec<f64>),
    SparsePair {
        user: usize,
        user_grad: Vec<f64>,
        item: usize,
        item_grad: Vec<f64>,
    },
}

impl GradientVector {
    /// Allocates a gradient of the right shape for reuse with
    /// [`grad_example_into`].
    pub fn placeholder(spec: &ModelSpec, layout: &ParamLayout) -> Self {
        if spec.is_factorization() {
            GradientVector::SparsePair {
                user: 0,
                user_grad: vec![0.0; spec.embedding_dim],
                item: 0,
                item_grad: vec![0.0; spec.embedding_dim],
            }
        } else {
            GradientVector::Dense(vec![0.0; layout.len()])
        }
    }

    pub fn squared_norm(&self) -> f64 {
        match self {
            GradientVector::Dense(g) => g.iter().map(|v| v * v).sum(),
            GradientVector::SparsePair {
                user_grad,
                item_grad,
                ..
            } => {
                let a: f64 = user_grad.iter().map(|v| v * v).sum();
                let b: f64 = item_grad.iter().map(|v| v * v).sum();
                a + b
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.squared_norm().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        match self {
            GradientVector::Dense(g) => g.iter_mut().for_each(|v| *v *= c),
            GradientVector::SparsePair {
                user_grad,
                item_grad,
                ..
            } => {
                user_grad.iter_mut().for_each(|v| *v *= c);
                item_grad.iter_mut().for_each(|v| *v *= c);
            }
        }
    }

    /// Rescales so the norm is at most `max_norm`.
    pub fn clip(&mut self, max_norm: f64) {
        let n = self.norm();
        if n > max_norm {
            self.scale(max_norm / n);
        }
    }

    /// `out += c * self`, with `out` a flat vector in `layout` order.
    pub fn add_scaled_into(&self, c: f64, out: &mut [f64], layout: &ParamLayout) {
        match self {
            GradientVector::Dense(g) => {
                debug_assert_eq!(g.len(), out.len());
                for (o, v) in out.iter_mut().zip(g) {
                    *o += c * v;
                }
            }
            GradientVector::SparsePair {
                user,
                user_grad,
                item,
                item_grad,
            } => {
                let uo = layout.user_offset(*user);
                for (k, v) in user_grad.iter().enumerate() {
                    out[uo + k] += c * v;
                }
                let io = layout.item_offset(*item);
                for (k, v) in item_grad.iter().enumerate() {
                    out[io + k] += c * v;
                }
            }
        }
    }

    /// Dot product against a flat vector in `layout` order.
    pub fn dot_flat(&self, v: &[f64], layout: &ParamLayout) -> f64 {
        match self {
            GradientVector::Dense(g) => g.iter().zip(v).map(|(a, b)| a * b).sum(),
            GradientVector::SparsePair {
                user,
                user_grad,
                item,
                item_grad,
            } => {
                let uo = layout.user_offset(*user);
                let io = layout.item_offset(*item);
                let a: f64 = user_grad
                    .iter()
                    .zip(&v[uo..uo + user_grad.len()])
                    .map(|(a, b)| a * b)
                    .sum();
                let b: f64 = item_grad
                    .iter()
                    .zip(&v[io..io + item_grad.len()])
                    .map(|(a, b)| a * b)
                    .sum();
                a + b
            }
        }
    }

    /// Dot product between two gradients under a common layout.
    pub fn dot(&self, other: &GradientVector, layout: &ParamLayout) -> f64 {
        match (self, other) {
            (GradientVector::Dense(a), GradientVector::Dense(b)) => {
                a.iter().zip(b).map(|(x, y)| x * y).sum()
            }
            (
                GradientVector::SparsePair {
                    user: ua,
                    user_grad: uga,
                    item: ia,
                    item_grad: iga,
                },
                GradientVector::SparsePair {
                    user: ub,
                    user_grad: ugb,
                    item: ib,
                    item_grad: igb,
                },
            ) => {
                let mut acc = 0.0;
                if ua == ub {
                    acc += uga.iter().zip(ugb).map(|(x, y)| x * y).sum::<f64>();
                }
                if ia == ib {
                    acc += iga.iter().zip(igb).map(|(x, y)| x * y).sum::<f64>();
                }
                acc
            }
            (GradientVector::Dense(v), sparse) | (sparse, GradientVector::Dense(v)) => {
                sparse.dot_flat(v, layout)
            }
        }
    }

    pub fn to_flat(&self, layout: &ParamLayout) -> Vec<f64> {
        let mut out = vec![0.0; layout.len()];
        self.add_scaled_into(1.0, &mut out, layout);
        out
    }
}

/// How many training examples each user and item index has. Regularization
/// in the factorization loss is split across an entity's training examples
/// using these counts; entities without training examples contribute no
/// regularization term.
#[derive(Debug, Clone, PartialEq)]
pub struct RegCounts {
    user: Vec<usize>,
    item: Vec<usize>,
}

impl RegCounts {
    pub fn from_train(train: &Dataset) -> Self {
        match *train.schema() {
            FeatureSchema::Dense { .. } => RegCounts {
                user: Vec::new(),
                item: Vec::new(),
            },
            FeatureSchema::Sparse {
                num_users,
                num_items,
            } => {
                let mut user = vec![0usize; num_users];
                let mut item = vec![0usize; num_items];
                for ex in train.examples() {
                    if let FeaturePayload::Pair { user: u, item: i } = ex.features {
                        user[u] += 1;
                        item[i] += 1;
                    }
                }
                RegCounts { user, item }
            }
        }
    }

    /// Empty counts for dense models, which have no per-entity terms.
    pub fn none() -> Self {
        RegCounts {
            user: Vec::new(),
            item: Vec::new(),
        }
    }

    pub fn user_count(&self, user: usize) -> usize {
        self.user.get(user).copied().unwrap_or(0)
    }

    pub fn item_count(&self, item: usize) -> usize {
        self.item.get(item).copied().unwrap_or(0)
    }
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `-y ln(sigma(s)) - (1-y) ln(1-sigma(s))`, computed without overflow.
fn logistic_loss(s: f64, y: f64) -> f64 {
    if s >= 0.0 {
        (1.0 - y) * s + (-s).exp().ln_1p()
    } else {
        -y * s + s.exp().ln_1p()
    }
}

fn dense_score(params: &Parameters, x: &[f64]) -> f64 {
    params
        .weights()
        .iter()
        .zip(x)
        .map(|(w, v)| w * v)
        .sum::<f64>()
        + params.bias()
}

/// Model output for one feature payload: the estimated rating for matrix
/// factorization, the linear score for regression, and the positive-class
/// probability for logistic regression.
pub fn predict(spec: &ModelSpec, params: &Parameters, features: &FeaturePayload) -> f64 {
    match (spec.kind, features) {
        (ModelKind::LinearRegression, FeaturePayload::Dense(x)) => dense_score(params, x),
        (ModelKind::LogisticRegression, FeaturePayload::Dense(x)) => {
            sigmoid(dense_score(params, x))
        }
        (ModelKind::MatrixFactorization, FeaturePayload::Pair { user, item }) => params
            .user_embedding(*user)
            .iter()
            .zip(params.item_embedding(*item))
            .map(|(p, q)| p * q)
            .sum(),
        _ => panic!("feature payload does not match model kind"),
    }
}

/// Training loss of one example, including the example's regularization
/// share for matrix factorization.
pub fn loss_example(
    spec: &ModelSpec,
    params: &Parameters,
    ex: &Example,
    counts: &RegCounts,
) -> f64 {
    match (spec.kind, &ex.features) {
        (ModelKind::LinearRegression, FeaturePayload::Dense(x)) => {
            let r = dense_score(params, x) - ex.label;
            0.5 * r * r
        }
        (ModelKind::LogisticRegression, FeaturePayload::Dense(x)) => {
            logistic_loss(dense_score(params, x), ex.label)
        }
        (ModelKind::MatrixFactorization, FeaturePayload::Pair { user, item }) => {
            let e = predict(spec, params, &ex.features) - ex.label;
            let mut loss = e * e;
            let lambda = spec.regularization;
            if lambda > 0.0 {
                let cu = counts.user_count(*user);
                if cu > 0 {
                    let sq: f64 = params.user_embedding(*user).iter().map(|v| v * v).sum();
                    loss += lambda / cu as f64 * sq;
                }
                let ci = counts.item_count(*item);
                if ci > 0 {
                    let sq: f64 = params.item_embedding(*item).iter().map(|v| v * v).sum();
                    loss += lambda / ci as f64 * sq;
                }
            }
            0.5 * loss
        }
        _ => panic!("feature payload does not match model kind"),
    }
}

/// Loss of a prediction alone, with no regularization share. This is the
/// quantity deployment-time comparisons care about.
pub fn prediction_loss(spec: &ModelSpec, params: &Parameters, ex: &Example) -> f64 {
    match spec.kind {
        ModelKind::LinearRegression | ModelKind::MatrixFactorization => {
            let r = match (spec.kind, &ex.features) {
                (ModelKind::LinearRegression, FeaturePayload::Dense(x)) => dense_score(params, x),
                _ => predict(spec, params, &ex.features),
            } - ex.label;
            0.5 * r * r
        }
        ModelKind::LogisticRegression => {
            let FeaturePayload::Dense(x) = &ex.features else {
                panic!("feature payload does not match model kind")
            };
            logistic_loss(dense_score(params, x), ex.label)
        }
    }
}

/// Writes the gradient of [`loss_example`] with respect to the parameters
/// into `out`, reusing its buffers. `out` must come from
/// [`GradientVector::placeholder`] for the same spec and layout.
pub fn grad_example_into(
    spec: &ModelSpec,
    params: &Parameters,
    ex: &Example,
    counts: &RegCounts,
    out: &mut GradientVector,
) {
    match (spec.kind, &ex.features, out) {
        (
            ModelKind::LinearRegression | ModelKind::LogisticRegression,
            FeaturePayload::Dense(x),
            GradientVector::Dense(g),
        ) => {
            // Shared form: residual factor times (x, 1).
            let s = dense_score(params, x);
            let factor = match spec.kind {
                ModelKind::LinearRegression => s - ex.label,
                ModelKind::LogisticRegression => sigmoid(s) - ex.label,
                ModelKind::MatrixFactorization => unreachable!(),
            };
            let dim = x.len();
            debug_assert_eq!(g.len(), dim + 1);
            for (gj, xj) in g[..dim].iter_mut().zip(x) {
                *gj = factor * xj;
            }
            g[dim] = factor;
        }
        (
            ModelKind::MatrixFactorization,
            FeaturePayload::Pair { user, item },
            GradientVector::SparsePair {
                user: gu,
                user_grad,
                item: gi,
                item_grad,
            },
        ) => {
            let e = predict(spec, params, &ex.features) - ex.label;
            let p = params.user_embedding(*user);
            let q = params.item_embedding(*item);
            let lambda = spec.regularization;
            let cu = counts.user_count(*user);
            let ci = counts.item_count(*item);
            let ru = if lambda > 0.0 && cu > 0 { lambda / cu as f64 } else { 0.0 };
            let ri = if lambda > 0.0 && ci > 0 { lambda / ci as f64 } else { 0.0 };
            *gu = *user;
            *gi = *item;
            for k in 0..p.len() {
                user_grad[k] = e * q[k] + ru * p[k];
                item_grad[k] = e * p[k] + ri * q[k];
            }
        }
        _ => panic!("gradient buffer or payload does not match model kind"),
    }
}

pub fn grad_example(
    spec: &ModelSpec,
    params: &Parameters,
    ex: &Example,
    counts: &RegCounts,
) -> GradientVector {
    let mut out = GradientVector::placeholder(spec, params.layout());
    grad_example_into(spec, params, ex, counts, &mut out);
    out
}

/// Initial parameters:
///
/// * linear regression: zero weights, bias = mean train label, so the
///   model starts out predicting the average label;
/// * logistic regression: zero weights, bias = logit of the positive
///   rate, same idea;
/// * matrix factorization: i.i.d. Gaussian embeddings with standard
///   deviation `spec.init_scale`, drawn from the given seed.
pub fn init_params(
    spec: &ModelSpec,
    schema: &FeatureSchema,
    train: &Dataset,
    seed: u64,
) -> Result<Parameters> {
    let layout = layout_for(spec, schema)?;
    let mut params = Parameters::zeroed(layout);
    match spec.kind {
        ModelKind::LinearRegression => {
            let mean =
                train.examples().iter().map(|e| e.label).sum::<f64>() / train.len() as f64;
            let dim = params.len() - 1;
            params.as_mut_slice()[dim] = mean;
        }
        ModelKind::LogisticRegression => {
            let rate =
                train.examples().iter().map(|e| e.label).sum::<f64>() / train.len() as f64;
            if rate == 0.0 || rate == 1.0 {
                log::warn!("train split has a single class (positive rate {rate})");
            }
            let clamped = rate.clamp(1e-6, 1.0 - 1e-6);
            let dim = params.len() - 1;
            params.as_mut_slice()[dim] = (clamped / (1.0 - clamped)).ln();
        }
        ModelKind::MatrixFactorization => {
            let mut rng = rng_from(seed, streams::INIT);
            for w in params.as_mut_slice() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w = spec.init_scale * z;
            }
        }
    }
    Ok(params)
}

/// Mean of [`loss_example`] over a dataset.
pub fn dataset_mean_loss(
    spec: &ModelSpec,
    params: &Parameters,
    ds: &Dataset,
    counts: &RegCounts,
) -> f64 {
    ds.examples()
        .iter()
        .map(|ex| loss_example(spec, params, ex, counts))
        .sum::<f64>()
        / ds.len() as f64
}

/// Mean of [`prediction_loss`] over a dataset.
pub fn dataset_mean_prediction_loss(spec: &ModelSpec, params: &Parameters, ds: &Dataset) -> f64 {
    ds.examples()
        .iter()
        .map(|ex| prediction_loss(spec, params, ex))
        .sum::<f64>()
        / ds.len() as f64
}

/// Root mean squared prediction error. Defined for the regression-style
/// models only; logistic regression is an error.
pub fn dataset_rmse(spec: &ModelSpec, params: &Parameters, ds: &Dataset) -> Result<f64> {
    if spec.kind == ModelKind::LogisticRegression {
        return Err(Error::invalid("rmse is not defined for a classifier"));
    }
    let mse = ds
        .examples()
        .iter()
        .map(|ex| {
            let r = predict(spec, params, &ex.features) - ex.label;
            r * r
        })
        .sum::<f64>()
        / ds.len() as f64;
    Ok(mse.sqrt())
}
