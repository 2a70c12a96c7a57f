//! Dataset ingestion, preprocessing and deterministic splitting.
//!
//! On-disk layout under a dataset root:
//!
//! ```text
//! mnist/   train-images-idx3-ubyte[.gz]  train-labels-idx1-ubyte[.gz]
//!          t10k-images-idx3-ubyte[.gz]   t10k-labels-idx1-ubyte[.gz]
//! fmnist/  (same as mnist)
//! cifar10/ data_batch_1.bin … data_batch_5.bin  test_batch.bin
//! iris/iris.csv
//! breast_cancer/breast_cancer.csv
//! ```
//!
//! Tabular files carry a header row and an integer `label` column; every
//! other column is a real-valued feature.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::GzDecoder;
use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;
const CIFAR_RECORD: usize = 1 + 3072;
/// Training images kept from the 60,000-image IDX train files; the rest is
/// the conventional validation tail and is not used.
pub const IMAGE_TRAIN_SIZE: usize = 50_000;
/// Offset added to test-split example ids so they never collide with train ids.
pub const TEST_ID_BASE: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Mnist,
    Fmnist,
    Cifar10,
    Iris,
    BreastCancer,
}

impl DatasetName {
    pub const ALL: [DatasetName; 5] = [
        DatasetName::Mnist,
        DatasetName::Fmnist,
        DatasetName::Cifar10,
        DatasetName::Iris,
        DatasetName::BreastCancer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Fmnist => "fmnist",
            DatasetName::Cifar10 => "cifar10",
            DatasetName::Iris => "iris",
            DatasetName::BreastCancer => "breast_cancer",
        }
    }

    pub fn is_tabular(self) -> bool {
        matches!(self, DatasetName::Iris | DatasetName::BreastCancer)
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['-', ' '], "_");
        Ok(match key.as_str() {
            "mnist" => DatasetName::Mnist,
            "fmnist" | "fashion_mnist" | "fashionmnist" => DatasetName::Fmnist,
            "cifar10" | "cifar_10" | "cifar" => DatasetName::Cifar10,
            "iris" => DatasetName::Iris,
            "breast_cancer" | "breastcancer" => DatasetName::BreastCancer,
            _ => return Err(Error::Config(format!("unknown dataset `{s}`"))),
        })
    }
}

/// A labelled set of examples; `features` has the example index as its
/// leading axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Examples {
    pub features: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Stable identity of each example within its dataset.
    pub ids: Vec<u64>,
}

impl Examples {
    pub fn new(features: Tensor<f32>, labels: Vec<usize>, ids: Vec<u64>) -> Result<Self> {
        let n = features.shape()[0];
        if labels.len() != n || ids.len() != n {
            return Err(Error::Dimension(format!(
                "{n} feature rows, {} labels, {} ids",
                labels.len(),
                ids.len()
            )));
        }
        Ok(Self { features, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn example_len(&self) -> usize {
        self.example_shape().iter().product()
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::Contract("selection of zero examples".into()));
        }
        Ok(Self {
            features: self.features.select_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
        })
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut c = vec![0; num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// How raw values were turned into model inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Preprocessing {
    Raw,
    /// Per-feature standardization with statistics of the named split.
    Standardize {
        mean: Vec<f64>,
        std: Vec<f64>,
        stats_from: String,
    },
    /// One mean and deviation over every train pixel.
    GlobalStandardize {
        mean: f64,
        std: f64,
        stats_from: String,
    },
    /// `(x/255 − mean)/std` per channel, with train-time crop and flip.
    ChannelNormalize {
        mean: Vec<f64>,
        std: Vec<f64>,
        augment: Augment,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    pub crop_padding: usize,
    pub flip_probability: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub name: DatasetName,
    pub train: Examples,
    pub test: Examples,
    pub num_classes: usize,
    pub input_shape: Vec<usize>,
    pub preprocessing: Preprocessing,
}

impl DatasetSplit {
    pub fn augment(&self) -> Option<Augment> {
        match &self.preprocessing {
            Preprocessing::ChannelNormalize { augment, .. } => Some(*augment),
            _ => None,
        }
    }

    /// Copy of this split with a different training set; used for shadow models.
    pub fn with_train_test(&self, train: Examples, test: Examples) -> Self {
        Self {
            train,
            test,
            ..self.clone()
        }
    }
}

fn format_err(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

/// Reads a file, transparently inflating a `.gz` sibling when the plain file is absent.
fn read_maybe_gz(path: &Path) -> Result<(PathBuf, Vec<u8>)> {
    let gz = PathBuf::from(format!("{}.gz", path.display()));
    let (actual, compressed) = if path.exists() {
        (path.to_path_buf(), path.extension().is_some_and(|e| e == "gz"))
    } else if gz.exists() {
        (gz, true)
    } else {
        return Err(format_err(path, 0, "file not found"));
    };
    let file = File::open(&actual).map_err(|e| Error::io(&actual, e))?;
    let mut buf = Vec::new();
    if compressed {
        GzDecoder::new(file).read_to_end(&mut buf)
    } else {
        std::io::BufReader::new(file).read_to_end(&mut buf)
    }
    .map_err(|e| Error::io(&actual, e))?;
    Ok((actual, buf))
}

fn be_u32(buf: &[u8], offset: usize, path: &Path) -> Result<u32> {
    buf.get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, offset as u64, "truncated header"))
}

/// Parses an IDX image file (magic 2051): `[n, rows, cols]` plus raw bytes.
pub fn parse_idx_images(buf: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(buf, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(
            path,
            0,
            format!("bad magic {magic}, expected {IDX_IMAGES_MAGIC}"),
        ));
    }
    let n = be_u32(buf, 4, path)? as usize;
    let rows = be_u32(buf, 8, path)? as usize;
    let cols = be_u32(buf, 12, path)? as usize;
    let need = 16 + n * rows * cols;
    if buf.len() < need {
        return Err(format_err(
            path,
            buf.len() as u64,
            format!("truncated image data: need {need} bytes"),
        ));
    }
    Ok((n, rows, cols, buf[16..need].to_vec()))
}

/// Parses an IDX label file (magic 2049).
pub fn parse_idx_labels(buf: &[u8], path: &Path, num_classes: usize) -> Result<Vec<usize>> {
    let magic = be_u32(buf, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(
            path,
            0,
            format!("bad magic {magic}, expected {IDX_LABELS_MAGIC}"),
        ));
    }
    let n = be_u32(buf, 4, path)? as usize;
    if buf.len() < 8 + n {
        return Err(format_err(
            path,
            buf.len() as u64,
            format!("truncated labels: need {} bytes", 8 + n),
        ));
    }
    buf[8..8 + n]
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if (l as usize) < num_classes {
                Ok(l as usize)
            } else {
                Err(format_err(
                    path,
                    8 + i as u64,
                    format!("label {l} outside [0, {num_classes})"),
                ))
            }
        })
        .collect()
}

fn load_idx_pair(dir: &Path, prefix: &str, id_base: u64) -> Result<Examples> {
    let (ipath, ibuf) = read_maybe_gz(&dir.join(format!("{prefix}-images-idx3-ubyte")))?;
    let (lpath, lbuf) = read_maybe_gz(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
    let (n, rows, cols, pixels) = parse_idx_images(&ibuf, &ipath)?;
    let labels = parse_idx_labels(&lbuf, &lpath, 10)?;
    if labels.len() != n {
        return Err(format_err(&lpath, 4, format!("{} labels for {n} images", labels.len())));
    }
    let features = Tensor::new([n, 1, rows, cols], pixels.into_iter().map(f32::from).collect())?;
    Examples::new(features, labels, (0..n as u64).map(|i| id_base + i).collect())
}

/// Parses concatenated CIFAR-10 binary records (1 label byte + 3072 pixel bytes).
pub fn parse_cifar_records(buf: &[u8], path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    if !buf.len().is_multiple_of(CIFAR_RECORD) {
        let whole = buf.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(format_err(path, whole as u64, "truncated CIFAR record"));
    }
    let n = buf.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3072);
    for (i, rec) in buf.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(format_err(
                path,
                (i * CIFAR_RECORD) as u64,
                format!("label {} outside [0, 10)", rec[0]),
            ));
        }
        labels.push(rec[0] as usize);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

fn load_cifar(dir: &Path, files: &[String], id_base: u64) -> Result<Examples> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for f in files {
        let (path, buf) = read_maybe_gz(&dir.join(f))?;
        let (l, p) = parse_cifar_records(&buf, &path)?;
        labels.extend(l);
        pixels.extend(p);
    }
    let n = labels.len();
    if n == 0 {
        return Err(format_err(dir, 0, "no CIFAR records"));
    }
    let features = Tensor::new([n, 3, 32, 32], pixels.into_iter().map(f32::from).collect())?;
    Examples::new(features, labels, (0..n as u64).map(|i| id_base + i).collect())
}

/// Reads a tabular file with a header row and a `label` column.
pub fn load_tabular(path: &Path) -> Result<(Vec<String>, Examples)> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => format_err(path, 0, "file not found"),
        _ => Error::io(path, e),
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| format_err(path, 0, e.to_string()))?
        .clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| format_err(path, 0, "no `label` column in header"))?;
    let names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_col)
        .map(|(_, h)| h.trim().to_string())
        .collect();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let off = e.position().map_or(0, |p| p.byte());
            format_err(path, off, e.to_string())
        })?;
        let off = rec.position().map_or(0, |p| p.byte());
        if rec.len() != headers.len() {
            return Err(format_err(
                path,
                off,
                format!("{} fields, header has {}", rec.len(), headers.len()),
            ));
        }
        for (i, field) in rec.iter().enumerate() {
            let field = field.trim();
            if i == label_col {
                let l: usize = field
                    .parse()
                    .map_err(|_| format_err(path, off, format!("unknown label `{field}`")))?;
                labels.push(l);
            } else {
                let v: f32 = field
                    .parse()
                    .map_err(|_| format_err(path, off, format!("non-numeric feature `{field}`")))?;
                values.push(v);
            }
        }
    }
    let n = labels.len();
    if n == 0 {
        return Err(format_err(path, 0, "no data rows"));
    }
    let features = Tensor::new([n, names.len()], values)?;
    Ok((names, Examples::new(features, labels, (0..n as u64).collect())?))
}

/// Writes examples in the tabular format read by [`load_tabular`].
pub fn write_tabular(path: &Path, names: &[String], ex: &Examples) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let to_err = |e: csv::Error| Error::Serde(e.to_string());
    let mut header: Vec<&str> = names.iter().map(String::as_str).collect();
    header.push("label");
    w.write_record(&header).map_err(to_err)?;
    let d = ex.example_len();
    for (row, &label) in ex.features.data().chunks_exact(d).zip(&ex.labels) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(label.to_string());
        w.write_record(&rec).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes raw-valued single-channel images as an IDX image/label pair.
pub fn write_idx(images: &Path, labels: &Path, ex: &Examples) -> Result<()> {
    let shape = ex.example_shape();
    let (rows, cols) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mut buf = Vec::with_capacity(16 + ex.features.numel());
    for v in [IDX_IMAGES_MAGIC, ex.len() as u32, rows as u32, cols as u32] {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    buf.extend(ex.features.data().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
    std::fs::write(images, &buf).map_err(|e| Error::io(images, e))?;
    let mut buf = Vec::with_capacity(8 + ex.len());
    for v in [IDX_LABELS_MAGIC, ex.len() as u32] {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    buf.extend(ex.labels.iter().map(|&l| l as u8));
    std::fs::write(labels, &buf).map_err(|e| Error::io(labels, e))
}

/// Writes raw-valued 3×32×32 images as CIFAR-10 binary records.
pub fn write_cifar(path: &Path, ex: &Examples) -> Result<()> {
    let mut buf = Vec::with_capacity(ex.len() * CIFAR_RECORD);
    for (img, &l) in ex.features.data().chunks_exact(3072).zip(&ex.labels) {
        buf.push(l as u8);
        buf.extend(img.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Per-class proportional split. Within each class the examples are shuffled
/// with `seed` and the first `round(fraction·n_c)` go to the first part. Both
/// parts keep the original example order.
pub fn stratified_split(ex: &Examples, fraction: f64, seed: u64) -> Result<(Examples, Examples)> {
    let (a, b) = stratified_indices(&ex.labels, fraction, seed)?;
    Ok((ex.select(&a)?, ex.select(&b)?))
}

fn stratified_indices(labels: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Contract(format!("split fraction {fraction} outside (0, 1)")));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = stream(seed, "stratified_split");
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::Contract(format!(
                "class {class} has {} example(s); stratified splitting needs at least 2",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let take = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        a.extend_from_slice(&members[..take]);
        b.extend_from_slice(&members[take..]);
    }
    a.sort_unstable();
    b.sort_unstable();
    Ok((a, b))
}

/// Seeded stratified sample of the target's training set for the shadow
/// model; the complement is the shadow's held-out (`OUT`) data.
pub fn shadow_subsample(train: &Examples, fraction: f64, seed: u64) -> Result<(Examples, Examples)> {
    stratified_split(train, fraction, seed ^ 0x5AD0_5AD0)
}

fn subset(ex: Examples, fraction: f64, seed: u64) -> Result<Examples> {
    if fraction >= 1.0 {
        return Ok(ex);
    }
    Ok(stratified_split(&ex, fraction, seed)?.0)
}

/// Loads and validates a dataset. Tabular sets are split 80-20 stratified;
/// image sets keep their canonical split. A `subset_fraction` below one takes
/// a stratified subset of each split.
pub fn load_dataset(name: DatasetName, root: &Path, subset_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(subset_fraction > 0.0 && subset_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "subset fraction {subset_fraction} outside (0, 1]"
        )));
    }
    if !root.is_dir() {
        return Err(format_err(root, 0, "dataset root does not exist"));
    }
    let (train, test, num_classes) = match name {
        DatasetName::Mnist | DatasetName::Fmnist => {
            let dir = root.join(name.as_str());
            let mut train = load_idx_pair(&dir, "train", 0)?;
            if train.len() > IMAGE_TRAIN_SIZE {
                let keep: Vec<usize> = (0..IMAGE_TRAIN_SIZE).collect();
                train = train.select(&keep)?;
            }
            (train, load_idx_pair(&dir, "t10k", TEST_ID_BASE)?, 10)
        }
        DatasetName::Cifar10 => {
            let dir = root.join("cifar10");
            let batches: Vec<String> = (1..=5)
                .map(|i| format!("data_batch_{i}.bin"))
                .filter(|f| dir.join(f).exists() || dir.join(format!("{f}.gz")).exists())
                .collect();
            if batches.is_empty() {
                return Err(format_err(&dir, 0, "no data_batch_*.bin files"));
            }
            (
                load_cifar(&dir, &batches, 0)?,
                load_cifar(&dir, &["test_batch.bin".to_string()], TEST_ID_BASE)?,
                10,
            )
        }
        DatasetName::Iris | DatasetName::BreastCancer => {
            let path = root.join(name.as_str()).join(format!("{}.csv", name.as_str()));
            let (_, all) = load_tabular(&path)?;
            let num_classes = all.labels.iter().copied().max().unwrap_or(0) + 1;
            let (train, test) = stratified_split(&all, 0.8, seed)?;
            (train, test, num_classes)
        }
    };
    let (train, test) = if name.is_tabular() {
        (train, test)
    } else {
        (
            subset(train, subset_fraction, seed)?,
            subset(test, subset_fraction, seed ^ 1)?,
        )
    };
    let input_shape = train.example_shape().to_vec();
    Ok(DatasetSplit {
        name,
        train,
        test,
        num_classes,
        input_shape,
        preprocessing: Preprocessing::Raw,
    })
}

/// Applies the dataset's preprocessing. Every statistic comes from the
/// training split.
pub fn preprocess(mut split: DatasetSplit) -> Result<DatasetSplit> {
    if split.preprocessing != Preprocessing::Raw {
        return Err(Error::Contract("split is already preprocessed".into()));
    }
    match split.name {
        DatasetName::Iris | DatasetName::BreastCancer => {
            let d = split.train.example_len();
            let n = split.train.len() as f64;
            let mut mean = vec![0.0f64; d];
            for row in split.train.features.data().chunks_exact(d) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v as f64;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![0.0f64; d];
            for row in split.train.features.data().chunks_exact(d) {
                for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(row) {
                    *s += (v as f64 - m).powi(2);
                }
            }
            let std: Vec<f64> = var
                .iter()
                .enumerate()
                .map(|(i, &s)| {
                    let sd = (s / n).sqrt();
                    if sd > 0.0 {
                        sd
                    } else {
                        warn!("feature {i} has zero variance on the training split; using unit divisor");
                        1.0
                    }
                })
                .collect();
            for ex in [&mut split.train, &mut split.test] {
                for row in ex.features.data_mut().chunks_exact_mut(d) {
                    for ((v, &m), &s) in row.iter_mut().zip(&mean).zip(&std) {
                        *v = ((*v as f64 - m) / s) as f32;
                    }
                }
            }
            split.preprocessing = Preprocessing::Standardize {
                mean,
                std,
                stats_from: "train".into(),
            };
        }
        DatasetName::Mnist | DatasetName::Fmnist => {
            let data = split.train.features.data();
            let n = data.len() as f64;
            let mean = data.iter().map(|&v| v as f64 / 255.0).sum::<f64>() / n;
            let var = data.iter().map(|&v| (v as f64 / 255.0 - mean).powi(2)).sum::<f64>() / n;
            let std = if var > 0.0 { var.sqrt() } else { 1.0 };
            for ex in [&mut split.train, &mut split.test] {
                for v in ex.features.data_mut() {
                    *v = ((*v as f64 / 255.0 - mean) / std) as f32;
                }
            }
            split.preprocessing = Preprocessing::GlobalStandardize {
                mean,
                std,
                stats_from: "train".into(),
            };
        }
        DatasetName::Cifar10 => {
            let (mean, std) = (vec![0.5; 3], vec![0.5; 3]);
            for ex in [&mut split.train, &mut split.test] {
                let plane = ex.example_len() / 3;
                for img in ex.features.data_mut().chunks_exact_mut(3 * plane) {
                    for (c, chan) in img.chunks_exact_mut(plane).enumerate() {
                        for v in chan {
                            *v = ((*v as f64 / 255.0 - mean[c]) / std[c]) as f32;
                        }
                    }
                }
            }
            split.preprocessing = Preprocessing::ChannelNormalize {
                mean,
                std,
                augment: Augment {
                    crop_padding: 4,
                    flip_probability: 0.5,
                },
            };
        }
    }
    Ok(split)
}

/// Random crop with zero padding and horizontal flip applied in place to a
/// batch of `[n, c, h, w]` images. Returns how many images were flipped.
pub fn augment_batch(data: &mut [f32], shape: &[usize], aug: Augment, rng: &mut impl Rng) -> usize {
    let &[n, c, h, w] = shape else {
        return 0;
    };
    let pad = aug.crop_padding as i64;
    let mut scratch = vec![0.0f32; c * h * w];
    let mut flipped = 0;
    for img in data.chunks_exact_mut(c * h * w).take(n) {
        let dy = rng.random_range(-pad..=pad) as isize;
        let dx = rng.random_range(-pad..=pad) as isize;
        let flip = rng.random_bool(aug.flip_probability);
        flipped += flip as usize;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = xx as isize + dx;
                    scratch[(ch * h + y) * w + x] = if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        0.0
                    } else {
                        img[(ch * h + sy as usize) * w + sx as usize]
                    };
                }
            }
        }
        img.copy_from_slice(&scratch);
    }
    flipped
}
