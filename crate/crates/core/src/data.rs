//! Datasets and client partitioning.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FluidError, Result};
use crate::nn::Matrix;
use crate::rng::{rng_for, Stream};

/// Fraction of each client's indices held out for local evaluation.
pub const TEST_FRACTION: f64 = 0.2;

/// Minimum pairwise centroid distance for synthetic blobs, in units of the
/// per-class standard deviation.
pub const MIN_CENTROID_SEPARATION: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(FluidError::Data(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        let mut seen = vec![false; class_count];
        for &l in &labels {
            if l >= class_count {
                return Err(FluidError::Data(format!(
                    "label {l} outside [0, {class_count})"
                )));
            }
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(FluidError::Data(format!("class {missing} has no examples")));
        }
        Ok(Dataset {
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    /// Gathers a subset of examples.
    pub fn subset(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Per-class example counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Isotropic Gaussian blobs with unit standard deviation, one per class.
///
/// Centroids are placed at random inside a cube and rejected until every
/// pair is at least [`MIN_CENTROID_SEPARATION`] apart; the cube widens
/// slowly when placement keeps failing.
pub fn synth_gaussian_blobs(
    classes: usize,
    dims: usize,
    per_class: usize,
    seed: u64,
) -> Result<Dataset> {
    if classes == 0 || dims == 0 || per_class == 0 {
        return Err(FluidError::Config(
            "blob classes, dims and per_class must all be >= 1".into(),
        ));
    }
    let mut rng = rng_for(seed, Stream::Dataset, &[]);
    let sigma = 1.0;
    let min_dist = MIN_CENTROID_SEPARATION * sigma;

    let mut half_width = 0.5 * min_dist;
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut failures = 0;
    while centroids.len() < classes {
        let candidate: Vec<f64> = (0..dims)
            .map(|_| rng.random_range(-half_width..=half_width))
            .collect();
        let far_enough = centroids.iter().all(|c| {
            c.iter()
                .zip(&candidate)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                >= min_dist
        });
        if far_enough {
            centroids.push(candidate);
        } else {
            failures += 1;
            if failures % 64 == 0 {
                half_width *= 1.05;
            }
        }
    }

    let noise = Normal::new(0.0, sigma).expect("unit normal");
    let mut data = Vec::with_capacity(classes * per_class * dims);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (class, centroid) in centroids.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(centroid.iter().map(|&c| c + noise.sample(&mut rng)));
            labels.push(class);
        }
    }
    let features = Matrix::from_vec(labels.len(), dims, data)?;
    Dataset::new(features, labels, classes)
}

/// Loads `f0,...,f{d-1},label` rows with a header line.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)?;
    let width = reader.headers()?.len();
    if width < 2 {
        return Err(FluidError::Data(format!(
            "{}: need at least one feature column and a label column",
            path.display()
        )));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        for (col, field) in record.iter().enumerate() {
            if col + 1 == width {
                let label = field.trim().parse::<usize>().map_err(|e| {
                    FluidError::Data(format!("row {}: bad label {field:?}: {e}", row + 1))
                })?;
                labels.push(label);
            } else {
                let v = field.trim().parse::<f64>().map_err(|e| {
                    FluidError::Data(format!("row {}: bad feature {field:?}: {e}", row + 1))
                })?;
                data.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(FluidError::Data(format!("{}: no rows", path.display())));
    }
    let classes = labels.iter().max().unwrap() + 1;
    let features = Matrix::from_vec(labels.len(), width - 1, data)?;
    Dataset::new(features, labels, classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PartitionMode {
    Iid,
    /// Per-client class proportions drawn from a symmetric Dirichlet with
    /// the given concentration.
    LabelSkew(f64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClientSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty() && self.test.is_empty()
    }

    pub fn all(&self) -> impl Iterator<Item = usize> + '_ {
        self.train.iter().chain(&self.test).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub clients: Vec<ClientSplit>,
}

/// Assigns every example to exactly one client, then splits each client's
/// shuffled indices into train (first 80%) and test (last 20%).
pub fn partition(ds: &Dataset, clients: usize, mode: PartitionMode, seed: u64) -> Result<Partition> {
    if clients == 0 {
        return Err(FluidError::Config("partition needs at least one client".into()));
    }
    if clients > ds.len() {
        return Err(FluidError::Capacity {
            clients,
            examples: ds.len(),
        });
    }
    let mut rng = rng_for(seed, Stream::Partition, &[]);

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for idx in &mut by_class {
        idx.shuffle(&mut rng);
    }

    let mut owned: Vec<Vec<usize>> = vec![Vec::new(); clients];
    match mode {
        PartitionMode::Iid => {
            // Deal class by class so both totals and per-class counts differ
            // by at most one between clients.
            for (pos, i) in by_class.into_iter().flatten().enumerate() {
                owned[pos % clients].push(i);
            }
        }
        PartitionMode::LabelSkew(alpha) => {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(FluidError::Config(format!(
                    "Dirichlet concentration {alpha} must be positive"
                )));
            }
            let gamma = Gamma::new(alpha, 1.0)
                .map_err(|e| FluidError::Config(format!("Dirichlet concentration: {e}")))?;
            for idx in by_class {
                let draws: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = draws.iter().sum();
                let proportions: Vec<f64> = if total > 0.0 {
                    draws.iter().map(|d| d / total).collect()
                } else {
                    let mut p = vec![0.0; clients];
                    p[rng.random_range(0..clients)] = 1.0;
                    p
                };
                let n = idx.len();
                let mut start = 0;
                let mut cumulative = 0.0;
                for (c, p) in proportions.iter().enumerate() {
                    cumulative += p;
                    let end = if c + 1 == clients {
                        n
                    } else {
                        ((cumulative * n as f64).round() as usize).clamp(start, n)
                    };
                    owned[c].extend_from_slice(&idx[start..end]);
                    start = end;
                }
            }
            // every client needs at least one training example
            while let Some(empty) = owned.iter().position(Vec::is_empty) {
                let donor = (0..clients)
                    .max_by_key(|&c| (owned[c].len(), std::cmp::Reverse(c)))
                    .unwrap();
                let moved = owned[donor].pop().unwrap();
                owned[empty].push(moved);
            }
        }
    }

    let splits = owned
        .into_iter()
        .map(|mut idx| {
            idx.shuffle(&mut rng);
            let test_len = (idx.len() as f64 * TEST_FRACTION).floor() as usize;
            let test = idx.split_off(idx.len() - test_len);
            ClientSplit { train: idx, test }
        })
        .collect();
    Ok(Partition { clients: splits })
}
