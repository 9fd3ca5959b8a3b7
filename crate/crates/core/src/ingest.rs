//! Dataset loading, feature normalization, and train/deploy splitting.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;

use crate::datamodel::{
    Dataset, Example, FeaturePayload, FeatureSchema, IndividualId, SplitPair,
};
use crate::error::{Error, Result};
use crate::seeding::{rng_from, streams};

/// Loads a ratings file in the MovieLens 100K `u.data` layout: one rating
/// per line, four tab-separated integer fields
/// `user_id item_id rating timestamp`. User and item ids are 1-based in
/// the file and shifted to 0-based indices; the individual is the user.
pub fn load_movielens(path: &Path) -> Result<Dataset> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(display.clone(), e))?;
    let reader = BufReader::new(file);

    let mut examples = Vec::new();
    let mut max_user = 0usize;
    let mut max_item = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(display.clone(), e))?;
        if line.is_empty() {
            continue;
        }
        let parse = |field: Option<&str>, name: &str| -> Result<i64> {
            field
                .ok_or_else(|| Error::Parse {
                    path: display.clone(),
                    line: line_no,
                    message: format!("missing field {name}"),
                })?
                .parse::<i64>()
                .map_err(|e| Error::Parse {
                    path: display.clone(),
                    line: line_no,
                    message: format!("bad {name}: {e}"),
                })
        };
        let mut fields = line.split('\t');
        let user_id = parse(fields.next(), "user_id")?;
        let item_id = parse(fields.next(), "item_id")?;
        let rating = parse(fields.next(), "rating")?;
        parse(fields.next(), "timestamp")?;
        if fields.next().is_some() {
            return Err(Error::Parse {
                path: display.clone(),
                line: line_no,
                message: "expected exactly 4 tab-separated fields".into(),
            });
        }
        if user_id < 1 || item_id < 1 {
            return Err(Error::Parse {
                path: display.clone(),
                line: line_no,
                message: format!("ids must be >= 1, got user={user_id} item={item_id}"),
            });
        }
        let user = (user_id - 1) as usize;
        let item = (item_id - 1) as usize;
        max_user = max_user.max(user);
        max_item = max_item.max(item);
        examples.push(Example {
            individual: IndividualId(user_id as u64),
            features: FeaturePayload::Pair { user, item },
            label: rating as f64,
        });
    }
    if examples.is_empty() {
        return Err(Error::invalid(format!("{display}: no ratings found")));
    }
    Dataset::new(
        examples,
        FeatureSchema::Sparse {
            num_users: max_user + 1,
            num_items: max_item + 1,
        },
    )
}

/// Loads a dense tabular dataset from a CSV file with a header row. The
/// named column becomes the label; every other column must be numeric and
/// becomes a feature. Each row is one individual, identified by its
/// 0-based row ordinal.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(display.clone(), e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);

    let headers = reader
        .headers()
        .map_err(|e| Error::invalid(format!("{display}: cannot read header: {e}")))?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| {
            Error::invalid(format!(
                "{display}: label column {label_column:?} not found (columns: {})",
                headers.iter().collect::<Vec<_>>().join(", ")
            ))
        })?;
    let dim = headers.len() - 1;
    if dim == 0 {
        return Err(Error::invalid(format!(
            "{display}: no feature columns besides the label"
        )));
    }

    let mut examples = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            path: display.clone(),
            line: row_idx + 2,
            message: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                path: display.clone(),
                line: row_idx + 2,
                message: format!(
                    "expected {} fields, found {}",
                    headers.len(),
                    record.len()
                ),
            });
        }
        let mut features = Vec::with_capacity(dim);
        let mut label = 0.0;
        for (col, cell) in record.iter().enumerate() {
            let value: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                path: display.clone(),
                line: row_idx + 2,
                message: format!(
                    "non-numeric value {cell:?} in column {:?}",
                    &headers[col]
                ),
            })?;
            if col == label_idx {
                label = value;
            } else {
                features.push(value);
            }
        }
        examples.push(Example {
            individual: IndividualId(row_idx as u64),
            features: FeaturePayload::Dense(features),
            label,
        });
    }
    Dataset::new(examples, FeatureSchema::Dense { dim })
}

/// Standardizes dense features column-wise using statistics of the train
/// set only: each column is shifted by its train mean and scaled by its
/// train population standard deviation. Columns that are constant in the
/// train set become all zeros. The deploy set is transformed with the
/// train statistics, never its own.
pub fn normalize_features(train: &Dataset, deploy: &Dataset) -> Result<(Dataset, Dataset)> {
    let dim = match (train.schema(), deploy.schema()) {
        (FeatureSchema::Dense { dim: a }, FeatureSchema::Dense { dim: b }) if a == b => *a,
        _ => {
            return Err(Error::invalid(
                "normalize_features requires dense datasets with matching dimension",
            ))
        }
    };

    let n = train.len() as f64;
    let mut mean = vec![0.0; dim];
    for ex in train.examples() {
        let FeaturePayload::Dense(x) = &ex.features else { unreachable!() };
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; dim];
    for ex in train.examples() {
        let FeaturePayload::Dense(x) = &ex.features else { unreachable!() };
        for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();

    let transform = |ds: &Dataset| -> Result<Dataset> {
        let examples = ds
            .examples()
            .iter()
            .map(|ex| {
                let FeaturePayload::Dense(x) = &ex.features else { unreachable!() };
                let z: Vec<f64> = x
                    .iter()
                    .zip(&mean)
                    .zip(&std)
                    .map(|((v, m), s)| if *s > 0.0 { (v - m) / s } else { 0.0 })
                    .collect();
                Example {
                    individual: ex.individual,
                    features: FeaturePayload::Dense(z),
                    label: ex.label,
                }
            })
            .collect();
        Dataset::new(examples, *ds.schema())
    };
    Ok((transform(train)?, transform(deploy)?))
}

/// Splits a dataset into train and deploy sets at per-example granularity
/// with a seeded shuffle. Train gets `floor(fraction * n)` examples; both
/// sides must end up non-empty. Position lists are kept in ascending
/// source order, so the split is fully described by membership.
pub fn random_split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<SplitPair> {
    if !(0.0..=1.0).contains(&train_fraction) || !train_fraction.is_finite() {
        return Err(Error::invalid(format!(
            "train_fraction must be in [0, 1], got {train_fraction}"
        )));
    }
    let n = dataset.len();
    let n_train = (train_fraction * n as f64).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::invalid(format!(
            "split leaves an empty side: {n} examples, train_fraction {train_fraction}"
        )));
    }

    let mut positions: Vec<usize> = (0..n).collect();
    let mut rng = rng_from(seed, streams::SPLIT);
    positions.shuffle(&mut rng);

    let mut train_source = positions[..n_train].to_vec();
    let mut deploy_source = positions[n_train..].to_vec();
    train_source.sort_unstable();
    deploy_source.sort_unstable();

    let subset = |source: &[usize]| -> Result<Dataset> {
        let examples: Vec<Example> = source
            .iter()
            .map(|&pos| dataset.examples()[pos].clone())
            .collect();
        Dataset::new(examples, *dataset.schema())
    };
    Ok(SplitPair {
        train: subset(&train_source)?,
        deploy: subset(&deploy_source)?,
        seed,
        train_fraction,
        train_source,
        deploy_source,
    })
}
