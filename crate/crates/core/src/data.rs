//! Datasets, client partitioning and two-view augmentation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MATRIX_MAGIC: &[u8; 4] = b"DCMX";
pub const MATRIX_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<u32>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<u32>, num_classes: usize) -> Result<Self> {
        let rows = features.rows();
        if features.rank() != 2 || rows == 0 {
            return Err(Error::InvalidConfig("dataset needs at least one row".into()));
        }
        if labels.len() != rows {
            return Err(Error::shape("dataset", &[rows], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::InvalidConfig(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            features: self.features.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        })
    }

    /// Fraction of samples in each class.
    pub fn class_prior(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1.0;
        }
        let n = self.len() as f64;
        counts.iter().map(|c| c / n).collect()
    }
}

/// Gaussian class blobs plus an optional nuisance block.
///
/// The first `dim - nuisance_dims` coordinates carry the classes: means are
/// `separation / sqrt(2)` times orthonormal directions drawn at random, so
/// every pair of means is exactly `separation` apart, and the within-class
/// noise has standard deviation `noise_std` per coordinate and correlation
/// `within_class_corr` between coordinates. The trailing `nuisance_dims`
/// coordinates are independent `N(0, nuisance_std^2)` with no class signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub dim: usize,
    pub samples: usize,
    /// Extra samples drawn from the same distribution for evaluation.
    pub test_samples: usize,
    pub seed: u64,
    pub separation: f64,
    pub noise_std: f64,
    pub within_class_corr: f64,
    pub nuisance_dims: usize,
    pub nuisance_std: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 10,
            dim: 64,
            samples: 2000,
            test_samples: 1000,
            seed: 0,
            separation: 3.0,
            noise_std: 1.0,
            within_class_corr: 0.0,
            nuisance_dims: 0,
            nuisance_std: 1.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 1 || self.dim < self.classes + self.nuisance_dims {
            return Err(Error::InvalidConfig(
                "data.synthetic needs 1 <= classes <= dim - nuisance_dims".into(),
            ));
        }
        if self.samples == 0 {
            return Err(Error::InvalidConfig("data.synthetic.samples must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.within_class_corr) {
            return Err(Error::InvalidConfig(
                "data.synthetic.within_class_corr must lie in [0, 1)".into(),
            ));
        }
        if self.separation < 0.0 || self.noise_std < 0.0 || self.nuisance_std < 0.0 {
            return Err(Error::InvalidConfig(
                "data.synthetic separation, noise_std and nuisance_std must be non-negative".into(),
            ));
        }
        Ok(())
    }

    fn content_dim(&self) -> usize {
        self.dim - self.nuisance_dims
    }

    /// Class means, `[classes, dim]`; zero on the nuisance block.
    pub fn class_means(&self) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6d65_616e);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(self.classes);
        while basis.len() < self.classes {
            let mut v: Vec<f64> = (0..self.content_dim()).map(|_| rng.sample(StandardNormal)).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|x| *x /= norm);
                basis.push(v);
            }
        }
        let scale = self.separation / std::f64::consts::SQRT_2;
        let data = basis
            .into_iter()
            .flat_map(|b| {
                b.into_iter()
                    .map(|x| x * scale)
                    .chain(std::iter::repeat_n(0.0, self.nuisance_dims))
            })
            .collect();
        Tensor::matrix(self.classes, self.dim, data).expect("means shape")
    }

    /// Training pool and held-out test set drawn from the same classes.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let means = self.class_means();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let shared = self.within_class_corr.sqrt();
        let own = (1.0 - self.within_class_corr).sqrt();
        let draw = |n: usize, rng: &mut ChaCha8Rng| -> Result<Dataset> {
            let mut labels: Vec<u32> = (0..n).map(|i| (i % self.classes) as u32).collect();
            labels.shuffle(rng);
            let mut data = Vec::with_capacity(n * self.dim);
            for &l in &labels {
                let common: f64 = rng.sample(StandardNormal);
                let row = means.row(l as usize);
                for &m in &row[..self.content_dim()] {
                    let e: f64 = rng.sample(StandardNormal);
                    data.push(m + self.noise_std * (own * e + shared * common));
                }
                for _ in 0..self.nuisance_dims {
                    let e: f64 = rng.sample(StandardNormal);
                    data.push(self.nuisance_std * e);
                }
            }
            Dataset::new(Tensor::matrix(n, self.dim, data)?, labels, self.classes)
        };
        let train = draw(self.samples, &mut rng)?;
        let test = draw(self.test_samples.max(1), &mut rng)?;
        Ok((train, test))
    }
}

/// Writes the binary matrix format: magic `DCMX`, version byte, rows (u64),
/// cols (u64), label flag byte, `rows * cols` f64 values row-major, then
/// `rows` u32 labels when the flag is 1. All integers little-endian.
pub fn write_matrix(path: &Path, features: &Tensor, labels: Option<&[u32]>) -> Result<()> {
    let (rows, cols) = features.dims2()?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&[MATRIX_VERSION])?;
    w.write_all(&(rows as u64).to_le_bytes())?;
    w.write_all(&(cols as u64).to_le_bytes())?;
    w.write_all(&[u8::from(labels.is_some())])?;
    for v in features.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    if let Some(labels) = labels {
        if labels.len() != rows {
            return Err(Error::shape("write_matrix", &[rows], &[labels.len()]));
        }
        for l in labels {
            w.write_all(&l.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    write_matrix(path, &dataset.features, Some(&dataset.labels))
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: &mut u64, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::parse(format!("byte {offset}"), format!("truncated file while reading {what}")))?;
    *offset += buf.len() as u64;
    Ok(())
}

/// Reads the binary matrix format. Returns features and optional labels.
pub fn read_matrix(path: &Path) -> Result<(Tensor, Option<Vec<u32>>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut offset = 0u64;
    let mut magic = [0u8; 4];
    read_exact_at(&mut r, &mut magic, &mut offset, "magic")?;
    if &magic != MATRIX_MAGIC {
        return Err(Error::parse("byte 0", "bad magic, expected DCMX"));
    }
    let mut b1 = [0u8; 1];
    read_exact_at(&mut r, &mut b1, &mut offset, "version")?;
    if b1[0] != MATRIX_VERSION {
        return Err(Error::parse("byte 4", format!("unsupported version {}", b1[0])));
    }
    let mut b8 = [0u8; 8];
    read_exact_at(&mut r, &mut b8, &mut offset, "rows")?;
    let rows = u64::from_le_bytes(b8) as usize;
    read_exact_at(&mut r, &mut b8, &mut offset, "cols")?;
    let cols = u64::from_le_bytes(b8) as usize;
    read_exact_at(&mut r, &mut b1, &mut offset, "label flag")?;
    let has_labels = match b1[0] {
        0 => false,
        1 => true,
        other => return Err(Error::parse("byte 21", format!("bad label flag {other}"))),
    };
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        read_exact_at(&mut r, &mut b8, &mut offset, "payload")?;
        data.push(f64::from_le_bytes(b8));
    }
    let labels = if has_labels {
        let mut b4 = [0u8; 4];
        let mut labels = Vec::with_capacity(rows);
        for _ in 0..rows {
            read_exact_at(&mut r, &mut b4, &mut offset, "labels")?;
            labels.push(u32::from_le_bytes(b4));
        }
        Some(labels)
    } else {
        None
    };
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::parse(format!("byte {offset}"), "trailing bytes after payload"));
    }
    Ok((Tensor::matrix(rows, cols, data)?, labels))
}

fn dataset_from_parts(features: Tensor, labels: Option<Vec<u32>>) -> Result<Dataset> {
    let labels = labels.unwrap_or_else(|| vec![0; features.rows()]);
    let num_classes = labels.iter().max().map_or(1, |&m| m as usize + 1);
    Dataset::new(features, labels, num_classes)
}

/// Reads a CSV with a header row; the column named `label` holds class ids,
/// every other column is a feature.
pub fn read_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::parse("line 1", e.to_string()))?
        .clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| Error::parse("line 1", "missing `label` column"))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::parse(format!("line {line}"), e.to_string()))?;
        if record.len() != headers.len() {
            return Err(Error::parse(
                format!("line {line}"),
                format!("expected {} cells, found {}", headers.len(), record.len()),
            ));
        }
        for (col, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            let at = || format!("line {line}, column {} (`{}`)", col + 1, &headers[col]);
            if col == label_col {
                let l: u32 = cell
                    .parse()
                    .map_err(|_| Error::parse(at(), format!("label `{cell}` is not a class id")))?;
                labels.push(l);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::parse(at(), format!("cell `{cell}` is not a number")))?;
                data.push(v);
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::parse(path.display().to_string(), "no data rows"));
    }
    let cols = headers.len() - 1;
    dataset_from_parts(Tensor::matrix(rows, cols, data)?, Some(labels))
}

pub fn write_csv(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    let mut header: Vec<String> = (0..dataset.dim()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    let to_io = |e: csv::Error| Error::parse(path.display().to_string(), e.to_string());
    w.write_record(&header).map_err(to_io)?;
    for i in 0..dataset.len() {
        let mut rec: Vec<String> = dataset.features.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(dataset.labels[i].to_string());
        w.write_record(&rec).map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    /// Binary matrix files for the training pool and the test split.
    Binary { train: String, test: String },
    Csv { train: String, test: String },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticConfig::default())
    }
}

/// Loads one file in the given format (`binary` or `csv`).
pub fn load_dataset(path: &Path, format: &str) -> Result<Dataset> {
    match format {
        "binary" => {
            let (features, labels) = read_matrix(path)?;
            dataset_from_parts(features, labels)
        }
        "csv" => read_csv(path),
        other => Err(Error::InvalidConfig(format!("unknown data format `{other}`"))),
    }
}

impl DataSource {
    /// Training pool and test split. File-backed sources share the larger
    /// class count between the two splits.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let (mut train, mut test) = match self {
            DataSource::Synthetic(cfg) => return cfg.generate(),
            DataSource::Binary { train, test } => (
                load_dataset(Path::new(train), "binary")?,
                load_dataset(Path::new(test), "binary")?,
            ),
            DataSource::Csv { train, test } => (
                load_dataset(Path::new(train), "csv")?,
                load_dataset(Path::new(test), "csv")?,
            ),
        };
        if train.dim() != test.dim() {
            return Err(Error::DimensionMismatch {
                expected: train.dim(),
                got: test.dim(),
            });
        }
        let classes = train.num_classes.max(test.num_classes);
        train.num_classes = classes;
        test.num_classes = classes;
        Ok((train, test))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub samples_per_client: usize,
    /// Dirichlet concentration; 0 means one class per client.
    pub alpha: f64,
    pub seed: u64,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec {
            num_clients: 1000,
            samples_per_client: 2,
            alpha: 0.0,
            seed: 0,
        }
    }
}

impl PartitionSpec {
    pub fn validate(&self, pool: usize) -> Result<()> {
        if self.num_clients == 0 || self.samples_per_client == 0 {
            return Err(Error::InvalidConfig(
                "partition.num_clients and partition.samples_per_client must be positive".into(),
            ));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig("partition.alpha must be finite and >= 0".into()));
        }
        if self.num_clients * self.samples_per_client > pool {
            return Err(Error::InsufficientSamples(format!(
                "{} clients x {} samples exceeds the pool of {pool}",
                self.num_clients, self.samples_per_client
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    /// Row indices into the pool the partition was drawn from.
    pub indices: Vec<usize>,
    pub features: Tensor,
    /// Used to build partitions and evaluate, never by pretraining losses.
    pub labels: Vec<u32>,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Partition {
    pub clients: Vec<ClientDataset>,
    /// The class distribution each client was sampled from.
    pub class_distributions: Vec<Vec<f64>>,
    /// Draws redirected because the preferred class pool was exhausted.
    pub fallbacks: usize,
}

fn sample_index(weights: &[f64], rng: &mut impl Rng) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut u = rng.gen::<f64>() * total;
    let mut last = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last = Some(i);
            if u < w {
                return Some(i);
            }
            u -= w;
        }
    }
    last
}

fn argmax_count(pools: &[Vec<usize>], min: usize) -> Option<usize> {
    pools
        .iter()
        .enumerate()
        .filter(|(_, p)| p.len() >= min)
        .max_by_key(|(c, p)| (p.len(), std::cmp::Reverse(*c)))
        .map(|(c, _)| c)
}

fn dirichlet_draw(concentration: &[f64], prior: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    let draws: Vec<f64> = concentration
        .iter()
        .map(|&a| {
            if a > 0.0 {
                Gamma::new(a, 1.0).map_or(0.0, |g| g.sample(rng))
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|x| x / total).collect()
    } else {
        let mut one_hot = vec![0.0; prior.len()];
        if let Some(c) = sample_index(prior, rng) {
            one_hot[c] = 1.0;
        }
        one_hot
    }
}

/// Splits the pool into client datasets, sampling without replacement.
///
/// Each client draws a class distribution from `Dirichlet(alpha * prior)`
/// (`prior` = class frequencies of the pool) and fills its quota from it.
/// With `alpha == 0` the distribution is one-hot on a class drawn from the
/// prior. When a preferred class has run out, the draw falls back to the
/// client's distribution restricted to classes that still have samples, and
/// then to the class with the most samples left; every such redirect is
/// counted in [`Partition::fallbacks`] and logged.
pub fn dirichlet_partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<Partition> {
    spec.validate(dataset.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prior = dataset.class_prior();
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, &l) in dataset.labels.iter().enumerate() {
        pools[l as usize].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let concentration: Vec<f64> = prior.iter().map(|p| spec.alpha * p).collect();
    let spc = spec.samples_per_client;

    let mut clients = Vec::with_capacity(spec.num_clients);
    let mut distributions = Vec::with_capacity(spec.num_clients);
    let mut fallbacks = 0;
    for client_id in 0..spec.num_clients {
        let dist = if spec.alpha == 0.0 {
            let mut class = sample_index(&prior, &mut rng).expect("non-empty prior");
            if pools[class].len() < spc {
                fallbacks += 1;
                let open: Vec<f64> = prior
                    .iter()
                    .zip(&pools)
                    .map(|(&p, pool)| if pool.len() >= spc { p } else { 0.0 })
                    .collect();
                class = sample_index(&open, &mut rng)
                    .or_else(|| argmax_count(&pools, 1))
                    .ok_or_else(|| Error::InsufficientSamples("all class pools exhausted".into()))?;
            }
            let mut one_hot = vec![0.0; dataset.num_classes];
            one_hot[class] = 1.0;
            one_hot
        } else {
            dirichlet_draw(&concentration, &prior, &mut rng)
        };

        let mut indices = Vec::with_capacity(spc);
        for _ in 0..spc {
            let mut class = sample_index(&dist, &mut rng).unwrap_or(0);
            if pools[class].is_empty() {
                fallbacks += 1;
                let open: Vec<f64> = dist
                    .iter()
                    .zip(&pools)
                    .map(|(&p, pool)| if pool.is_empty() { 0.0 } else { p })
                    .collect();
                class = sample_index(&open, &mut rng)
                    .or_else(|| argmax_count(&pools, 1))
                    .ok_or_else(|| Error::InsufficientSamples("all class pools exhausted".into()))?;
            }
            indices.push(pools[class].pop().expect("non-empty pool"));
        }
        let subset = dataset.subset(&indices)?;
        clients.push(ClientDataset {
            client_id,
            indices,
            features: subset.features,
            labels: subset.labels,
        });
        distributions.push(dist);
    }
    if fallbacks > 0 {
        log::info!("partition: {fallbacks} draws fell back to another class");
    }
    Ok(Partition {
        clients,
        class_distributions: distributions,
        fallbacks,
    })
}

/// Total-variation distance between two distributions.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Empirical class histogram of labels, normalized.
pub fn class_histogram(labels: &[u32], num_classes: usize) -> Vec<f64> {
    let mut h = vec![0.0; num_classes];
    for &l in labels {
        h[l as usize] += 1.0;
    }
    let n = labels.len().max(1) as f64;
    h.iter().map(|c| c / n).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Standard deviation of additive Gaussian noise.
    pub noise_std: f64,
    /// Probability of zeroing each coordinate.
    pub mask_prob: f64,
    /// Length of the contiguous block whose sign may be flipped.
    pub flip_block: usize,
    pub flip_prob: f64,
    /// Extra Gaussian noise on the trailing `nuisance_dims` coordinates.
    pub nuisance_dims: usize,
    pub nuisance_noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise_std: 0.5,
            mask_prob: 0.2,
            flip_block: 0,
            flip_prob: 0.0,
            nuisance_dims: 0,
            nuisance_noise_std: 0.0,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            noise_std: 0.0,
            mask_prob: 0.0,
            flip_block: 0,
            flip_prob: 0.0,
            nuisance_dims: 0,
            nuisance_noise_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_std < 0.0 || self.nuisance_noise_std < 0.0 || !(0.0..=1.0).contains(&self.mask_prob) || !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::InvalidConfig(
                "augment: noise stds must be >= 0, mask_prob and flip_prob in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    fn augment(&self, sample: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        let mut out = sample.to_vec();
        for v in out.iter_mut() {
            if self.mask_prob > 0.0 && rng.gen::<f64>() < self.mask_prob {
                *v = 0.0;
            }
            if self.noise_std > 0.0 {
                let e: f64 = rng.sample(StandardNormal);
                *v += self.noise_std * e;
            }
        }
        let nuisance = self.nuisance_dims.min(out.len());
        if nuisance > 0 && self.nuisance_noise_std > 0.0 {
            let start = out.len() - nuisance;
            for v in &mut out[start..] {
                let e: f64 = rng.sample(StandardNormal);
                *v += self.nuisance_noise_std * e;
            }
        }
        let block = self.flip_block.min(out.len());
        if block > 0 && self.flip_prob > 0.0 && rng.gen::<f64>() < self.flip_prob {
            let start = rng.gen_range(0..=out.len() - block);
            out[start..start + block].iter_mut().for_each(|v| *v = -*v);
        }
        out
    }
}

/// Two independently augmented copies of one sample.
pub fn make_views(sample: &[f64], config: &AugmentConfig, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let a = config.augment(sample, rng);
    let b = config.augment(sample, rng);
    (a, b)
}

/// Views for every row of `features`, in row order.
pub fn make_batch_views(features: &Tensor, config: &AugmentConfig, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
    let (n, d) = features.dims2()?;
    let mut a = Vec::with_capacity(n * d);
    let mut b = Vec::with_capacity(n * d);
    for i in 0..n {
        let (va, vb) = make_views(features.row(i), config, rng);
        a.extend(va);
        b.extend(vb);
    }
    Ok((Tensor::matrix(n, d, a)?, Tensor::matrix(n, d, b)?))
}

/// Class-stratified sample of `fraction` of the dataset (at least one per
/// non-empty class), returned as sorted row indices.
pub fn stratified_subset(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "labeled_fraction {fraction} must lie in (0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut out = Vec::new();
    for mut members in by_class {
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let take = ((members.len() as f64 * fraction).round() as usize).clamp(1, members.len());
        out.extend_from_slice(&members[..take]);
    }
    out.sort_unstable();
    Ok(out)
}
