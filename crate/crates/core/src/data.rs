//! Datasets, loaders and Non-IID client partitioning.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use thiserror::Error;

use crate::numcore::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{field}: bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic {
        field: &'static str,
        expected: u32,
        found: u32,
    },
    #[error("{field}: file truncated")]
    Truncated { field: &'static str },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{file}: row {row}: expected {expected} values, found {found}")]
    RowWidth {
        file: PathBuf,
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("{file}: row {row}: {message}")]
    Parse {
        file: PathBuf,
        row: usize,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    class_count: usize,
    split: Split,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        class_count: usize,
        split: Split,
    ) -> Result<Self, DataError> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(DataError::CountMismatch {
                images: features.rows(),
                labels: labels.len(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(DataError::Config(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            class_count,
            split,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_extent(&self) -> usize {
        self.features.cols()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Features and labels of the given rows.
    pub fn subset(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Per-feature mean and standard deviation (population).
    pub fn moments(&self) -> FeatureMoments {
        let (n, d) = (self.len() as f64, self.input_extent());
        let mut mean = vec![0.0; d];
        for row in self.features.row_iter() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; d];
        for row in self.features.row_iter() {
            for ((s, v), m) in std.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        std.iter_mut().for_each(|s| *s = s.sqrt());
        FeatureMoments { mean, std }
    }

    /// Copy with every feature mapped to `(x − mean) / std`; constant
    /// features are only centered.
    pub fn standardized(&self, moments: &FeatureMoments) -> Dataset {
        let mut features = self.features.clone();
        let d = self.input_extent();
        for (i, v) in features.data_mut().iter_mut().enumerate() {
            let (m, s) = (moments.mean[i % d], moments.std[i % d]);
            *v = if s > 0.0 { (*v - m) / s } else { *v - m };
        }
        Dataset {
            features,
            labels: self.labels.clone(),
            class_count: self.class_count,
            split: self.split,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMoments {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Disjoint per-client index lists over a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionMap {
    pub clients: Vec<Vec<usize>>,
    pub dirichlet_alpha: f64,
}

impl PartitionMap {
    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }
}

fn sample_dirichlet(rng: &mut ChaCha8Rng, alpha: f64, n: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|g| g / total).collect()
    } else {
        // Every gamma draw underflowed: put all mass on one client.
        let mut p = vec![0.0; n];
        p[rng.random_range(0..n)] = 1.0;
        p
    }
}

/// Class-wise Dirichlet split: for each label, client proportions are drawn
/// from `Dir(alpha · 1_N)` and that label's shuffled indices are dealt
/// accordingly. Empty clients then take one sample from the largest client.
pub fn dirichlet_partition(
    dataset: &Dataset,
    clients: usize,
    dirichlet_alpha: f64,
    seed: u64,
) -> Result<PartitionMap, DataError> {
    if clients == 0 {
        return Err(DataError::Config("client count must be at least 1".into()));
    }
    if !(dirichlet_alpha > 0.0 && dirichlet_alpha.is_finite()) {
        return Err(DataError::Config(format!(
            "dirichlet_alpha must be positive, got {dirichlet_alpha}"
        )));
    }
    if clients > dataset.len() {
        return Err(DataError::Config(format!(
            "{clients} clients exceed {} training samples",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for class in 0..dataset.class_count() {
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels[i] == class)
            .collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let props = sample_dirichlet(&mut rng, dirichlet_alpha, clients);
        let n = idx.len();
        let mut cum = 0.0;
        let mut start = 0;
        for (k, p) in props.iter().enumerate() {
            cum += p;
            let end = if k + 1 == clients {
                n
            } else {
                ((cum * n as f64).round() as usize).clamp(start, n)
            };
            parts[k].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    while let Some(empty) = parts.iter().position(Vec::is_empty) {
        let largest = (0..clients)
            .max_by(|&a, &b| parts[a].len().cmp(&parts[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        let moved = parts[largest].pop().expect("largest client is nonempty");
        parts[empty].push(moved);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(PartitionMap {
        clients: parts,
        dirichlet_alpha,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelHistogram {
    pub probs: Vec<f64>,
    /// True when the index list was empty and `probs` is the uniform fallback.
    pub from_empty: bool,
}

pub fn label_histogram(dataset: &Dataset, indices: &[usize]) -> LabelHistogram {
    histogram_of(
        indices.iter().map(|&i| dataset.labels[i]),
        dataset.class_count(),
    )
}

/// Normalized counts of `labels` over `class_count` bins.
pub fn histogram_of(labels: impl Iterator<Item = usize>, class_count: usize) -> LabelHistogram {
    let mut counts = vec![0usize; class_count];
    let mut total = 0usize;
    for y in labels {
        counts[y] += 1;
        total += 1;
    }
    if total == 0 {
        return LabelHistogram {
            probs: vec![1.0 / class_count as f64; class_count],
            from_empty: true,
        };
    }
    LabelHistogram {
        probs: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        from_empty: false,
    }
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize, field: &'static str) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(DataError::Truncated { field })
}

/// Parses an IDX image file, returning rows of pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor, DataError> {
    let magic = be_u32(bytes, 0, "images header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            field: "images",
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, "images count")? as usize;
    let rows = be_u32(bytes, 8, "images rows")? as usize;
    let cols = be_u32(bytes, 12, "images cols")? as usize;
    let width = rows * cols;
    let body = &bytes[16..];
    if width == 0 || body.len() < count * width {
        return Err(DataError::Truncated {
            field: "images pixels",
        });
    }
    let data = body[..count * width]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Ok(Tensor::matrix(count, width, data))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, DataError> {
    let magic = be_u32(bytes, 0, "labels header")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            field: "labels",
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, "labels count")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(DataError::Truncated {
            field: "labels body",
        });
    }
    Ok(body[..count].iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label pair (e.g. Fashion-MNIST).
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset, DataError> {
    let features = parse_idx_images(&read_file(images)?)?;
    let labels = parse_idx_labels(&read_file(labels)?)?;
    if features.rows() != labels.len() {
        return Err(DataError::CountMismatch {
            images: features.rows(),
            labels: labels.len(),
        });
    }
    let class_count = labels.iter().max().map_or(1, |m| m + 1).max(10);
    Dataset::new(features, labels, class_count, split)
}

pub const UCIHAR_FEATURES: usize = 561;
pub const UCIHAR_CLASSES: usize = 6;

fn parse_ucihar_features(path: &Path) -> Result<Vec<f64>, DataError> {
    let text = String::from_utf8(read_file(path)?).map_err(|e| DataError::Parse {
        file: path.to_path_buf(),
        row: 0,
        message: e.to_string(),
    })?;
    let mut data = Vec::new();
    for (r, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| DataError::Parse {
                file: path.to_path_buf(),
                row: r + 1,
                message: format!("bad number `{tok}`"),
            })?;
            data.push(v);
        }
        let found = data.len() - before;
        if found != UCIHAR_FEATURES {
            return Err(DataError::RowWidth {
                file: path.to_path_buf(),
                row: r + 1,
                expected: UCIHAR_FEATURES,
                found,
            });
        }
    }
    Ok(data)
}

fn parse_ucihar_labels(path: &Path) -> Result<Vec<usize>, DataError> {
    let text = String::from_utf8(read_file(path)?).map_err(|e| DataError::Parse {
        file: path.to_path_buf(),
        row: 0,
        message: e.to_string(),
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(r, l)| match l.trim().parse::<usize>() {
            Ok(v) if (1..=UCIHAR_CLASSES).contains(&v) => Ok(v - 1),
            _ => Err(DataError::Parse {
                file: path.to_path_buf(),
                row: r + 1,
                message: format!("unknown label `{}`", l.trim()),
            }),
        })
        .collect()
}

fn load_ucihar_split(dir: &Path, name: &str, split: Split) -> Result<Dataset, DataError> {
    let x_path = dir.join(name).join(format!("X_{name}.txt"));
    let y_path = dir.join(name).join(format!("y_{name}.txt"));
    let data = parse_ucihar_features(&x_path)?;
    let labels = parse_ucihar_labels(&y_path)?;
    let rows = data.len() / UCIHAR_FEATURES;
    if rows != labels.len() {
        return Err(DataError::CountMismatch {
            images: rows,
            labels: labels.len(),
        });
    }
    if rows == 0 {
        return Err(DataError::Truncated { field: "features" });
    }
    Dataset::new(
        Tensor::matrix(rows, UCIHAR_FEATURES, data),
        labels,
        UCIHAR_CLASSES,
        split,
    )
}

/// Loads `train/X_train.txt`, `train/y_train.txt`, `test/X_test.txt` and
/// `test/y_test.txt` from a UCI-HAR directory. Labels 1..6 map to 0..5.
pub fn load_ucihar(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    Ok((
        load_ucihar_split(dir, "train", Split::Train)?,
        load_ucihar_split(dir, "test", Split::Test)?,
    ))
}

/// Distance of each class mean from the origin in the synthetic mixture.
pub const SYNTHETIC_SEPARATION: f64 = 4.0;

/// Mean of class `c`: a scaled simplex vertex. Classes beyond the input
/// extent reuse an axis at a larger radius.
pub fn synthetic_class_mean(class: usize, input_extent: usize) -> Vec<f64> {
    let mut mean = vec![0.0; input_extent];
    let ring = class / input_extent;
    mean[class % input_extent] = SYNTHETIC_SEPARATION * (1 + ring) as f64;
    mean
}

/// Gaussian blobs with unit within-class variance and round-robin labels.
pub fn synthetic_mixture(
    class_count: usize,
    input_extent: usize,
    samples: usize,
    seed: u64,
    split: Split,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..class_count)
        .map(|c| synthetic_class_mean(c, input_extent))
        .collect();
    let labels: Vec<usize> = (0..samples).map(|i| i % class_count).collect();
    let mut data = Vec::with_capacity(samples * input_extent);
    for &y in &labels {
        for m in &means[y] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push(m + noise);
        }
    }
    Dataset::new(
        Tensor::matrix(samples, input_extent, data),
        labels,
        class_count,
        split,
    )
    .expect("synthetic dataset is consistent")
}
