//! Datasets, semi-supervised splits, label corruption and epoch plans.

use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::TensorArchive;
use crate::rng::{self, Stream};
use crate::tensor::{Real, Tensor};

/// Bytes per CIFAR-10 binary record: one label byte and a 3×32×32 image.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Inputs for all `N` items plus labels for the labeled subset.
///
/// Class ids are zero-based. `None` marks an unlabeled item; its input is
/// still used by the unsupervised loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<R> {
    inputs: Tensor<R>,
    labels: Vec<Option<usize>>,
    classes: usize,
}

impl<R: Real> LabeledDataset<R> {
    pub fn new(inputs: Tensor<R>, labels: Vec<Option<usize>>, classes: usize) -> Result<Self> {
        if inputs.rank() < 2 {
            return Err(Error::data(format!(
                "inputs must be (items, ...), got shape {:?}",
                inputs.shape()
            )));
        }
        if inputs.batch_len() != labels.len() {
            return Err(Error::data(format!(
                "{} inputs but {} labels",
                inputs.batch_len(),
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::data(format!("need at least 2 classes, got {classes}")));
        }
        if let Some(bad) = labels.iter().flatten().find(|&&y| y >= classes) {
            return Err(Error::data(format!("label {bad} outside 0..{classes}")));
        }
        Ok(LabeledDataset {
            inputs,
            labels,
            classes,
        })
    }

    /// Total item count `N`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> &Tensor<R> {
        &self.inputs
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn item_shape(&self) -> &[usize] {
        self.inputs.item_shape()
    }

    /// Indices of labeled items (the set `L`).
    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i].is_some()).collect()
    }

    /// Labeled item count `M`.
    pub fn num_labeled(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.labels.iter().all(Option::is_some)
    }

    pub fn map_inputs(self, f: impl FnOnce(Tensor<R>) -> Result<Tensor<R>>) -> Result<Self> {
        let inputs = f(self.inputs)?;
        LabeledDataset::new(inputs, self.labels, self.classes)
    }

    pub fn cast<S: Real>(&self) -> LabeledDataset<S> {
        LabeledDataset {
            inputs: self.inputs.cast(),
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }

    /// Keeps exactly `labels_per_class` labels per class, chosen uniformly
    /// at random; every other item becomes unlabeled.
    pub fn split_semi_supervised(&self, labels_per_class: usize, seed: u64) -> Result<Self> {
        if !self.is_fully_labeled() {
            return Err(Error::data("semi-supervised split needs a fully labeled dataset"));
        }
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.classes];
        for (i, y) in self.labels.iter().enumerate() {
            by_class[y.unwrap()].push(i);
        }
        let mut rng = rng::stream(seed, Stream::Split);
        let mut labels = vec![None; self.len()];
        for (class, members) in by_class.iter_mut().enumerate() {
            if members.len() < labels_per_class {
                return Err(Error::data(format!(
                    "class {class} has {} items, fewer than the {labels_per_class} labels requested",
                    members.len()
                )));
            }
            members.shuffle(&mut rng);
            for &i in &members[..labels_per_class] {
                labels[i] = Some(class);
            }
        }
        LabeledDataset::new(self.inputs.clone(), labels, self.classes)
    }

    /// Redraws the labels of a uniformly chosen `floor(fraction * M)` subset
    /// of the labeled items, uniformly over all classes (the true class
    /// included).
    pub fn corrupt_labels(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::config(format!(
                "corruption fraction {fraction} outside [0, 1]"
            )));
        }
        let labeled = self.labeled_indices();
        let count = (fraction * labeled.len() as f64).floor() as usize;
        let mut rng = rng::stream(seed, Stream::Corrupt);
        let mut labels = self.labels.clone();
        for k in index::sample(&mut rng, labeled.len(), count) {
            labels[labeled[k]] = Some(rng.random_range(0..self.classes));
        }
        LabeledDataset::new(self.inputs.clone(), labels, self.classes)
    }
}

/// One epoch worth of minibatches over the global index space.
///
/// Indices `0..N` address the dataset; `N..N+P` address the extra pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub batches: Vec<Vec<usize>>,
    pub batch_size: usize,
    pub primary_len: usize,
}

impl EpochPlan {
    pub fn len(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.batches.iter().flatten().copied()
    }
}

/// Shuffles every dataset item together with up to `cap` items drawn
/// without replacement from an extra pool of `pool_len` items, then cuts
/// the result into minibatches (the last one may be short).
pub fn plan_epoch(
    primary_len: usize,
    pool_len: usize,
    cap: Option<usize>,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<EpochPlan> {
    if batch_size == 0 {
        return Err(Error::config("minibatch size must be >= 1"));
    }
    let take = cap.map_or(pool_len, |c| c.min(pool_len));
    let mut order: Vec<usize> = (0..primary_len).collect();
    if take > 0 {
        order.extend(
            index::sample(rng, pool_len, take)
                .into_iter()
                .map(|j| primary_len + j),
        );
    }
    order.shuffle(rng);
    Ok(EpochPlan {
        batches: order.chunks(batch_size).map(<[usize]>::to_vec).collect(),
        batch_size,
        primary_len,
    })
}

pub fn plan_epoch_seeded(
    primary_len: usize,
    pool_len: usize,
    cap: Option<usize>,
    batch_size: usize,
    seed: u64,
) -> Result<EpochPlan> {
    plan_epoch(primary_len, pool_len, cap, batch_size, &mut rng::stream(seed, Stream::Shuffle))
}

/// Two interleaved unit half-circles; class 0 on the upper arc centred at
/// the origin, class 1 on the lower arc centred at `(1, 0.5)`.
pub fn generate_two_moons<R: Real>(n: usize, noise: f64, rng: &mut impl Rng) -> Result<LabeledDataset<R>> {
    if n < 2 {
        return Err(Error::config("two moons needs at least 2 points"));
    }
    if !(noise >= 0.0) {
        return Err(Error::config(format!("noise sigma {noise} must be >= 0")));
    }
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let class = usize::from(i >= n / 2);
        let t = rng.random::<f64>() * std::f64::consts::PI;
        let (x, y) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let mut jitter = || noise * Distribution::<f64>::sample(&StandardNormal, rng);
        let (x, y) = (x + jitter(), y + jitter());
        points.push((x, y, class));
    }
    points.shuffle(rng);
    let data = points
        .iter()
        .flat_map(|&(x, y, _)| [R::lit(x), R::lit(y)])
        .collect();
    let labels = points.iter().map(|&(_, _, c)| Some(c)).collect();
    LabeledDataset::new(Tensor::new(vec![n, 2], data)?, labels, 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageFormat {
    CifarBinary,
    RawTensor,
    Csv,
}

impl std::str::FromStr for ImageFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar_binary" => Ok(ImageFormat::CifarBinary),
            "raw_tensor" => Ok(ImageFormat::RawTensor),
            "csv" => Ok(ImageFormat::Csv),
            other => Err(Error::config(format!(
                "unknown data format '{other}' (expected cifar_binary, raw_tensor or csv)"
            ))),
        }
    }
}

pub fn load_image_set<R: Real>(path: &Path, format: ImageFormat) -> Result<LabeledDataset<R>> {
    match format {
        ImageFormat::CifarBinary => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            parse_cifar_binary(&bytes).map_err(|e| match e {
                Error::Data(m) => Error::data(format!("{}: {m}", path.display())),
                other => other,
            })
        }
        ImageFormat::RawTensor => {
            let archive = TensorArchive::read_file(path)?;
            dataset_from_archive(&archive)
                .map_err(|e| Error::data(format!("{}: {e}", path.display())))
        }
        ImageFormat::Csv => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_csv(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
        }
    }
}

/// Parses concatenated CIFAR-10 records; pixels are scaled to `[0, 1]`.
pub fn parse_cifar_binary<R: Real>(bytes: &[u8]) -> Result<LabeledDataset<R>> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::data(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    let scale = 1.0 / 255.0;
    for record in bytes.chunks(CIFAR_RECORD) {
        let label = record[0] as usize;
        if label >= 10 {
            return Err(Error::data(format!("label byte {label} outside 0..10")));
        }
        labels.push(Some(label));
        data.extend(record[1..].iter().map(|&b| R::lit(b as f64 * scale)));
    }
    LabeledDataset::new(Tensor::new(vec![n, 3, 32, 32], data)?, labels, 10)
}

/// `inputs` tensor plus a `labels` tensor (negative = unlabeled) and an
/// optional scalar `classes`.
fn dataset_from_archive<R: Real>(archive: &TensorArchive) -> Result<LabeledDataset<R>> {
    let inputs = archive
        .get("inputs")
        .ok_or_else(|| Error::data("archive has no 'inputs' tensor"))?;
    let raw = archive
        .get("labels")
        .ok_or_else(|| Error::data("archive has no 'labels' tensor"))?;
    let labels: Vec<Option<usize>> = raw
        .data()
        .iter()
        .map(|&v| (v >= 0.0).then_some(v as usize))
        .collect();
    let classes = match archive.get("classes") {
        Some(c) => c.data().first().copied().unwrap_or(0.0) as usize,
        None => labels.iter().flatten().max().map_or(0, |m| m + 1),
    };
    LabeledDataset::new(inputs.cast(), labels, classes)
}

pub fn dataset_to_archive<R: Real>(ds: &LabeledDataset<R>) -> Result<TensorArchive> {
    let mut archive = TensorArchive::default();
    archive.push("inputs", ds.inputs.cast());
    let labels = ds
        .labels
        .iter()
        .map(|l| l.map_or(-1.0, |y| y as f32))
        .collect();
    archive.push("labels", Tensor::new(vec![ds.len()], labels)?);
    archive.push("classes", Tensor::scalar(ds.classes as f32));
    Ok(archive)
}

/// Header row with a `label` column; every other column is a feature.
/// A label of `?` marks an unlabeled item.
pub fn parse_csv<R: Real>(text: &str) -> Result<LabeledDataset<R>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::data("empty csv"))?
        .split(',')
        .map(str::trim)
        .collect();
    let label_col = header
        .iter()
        .position(|&h| h == "label")
        .ok_or_else(|| Error::data("csv header has no 'label' column"))?;
    let width = header.len() - 1;
    if width == 0 {
        return Err(Error::data("csv has no feature columns"));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != header.len() {
            return Err(Error::data(format!(
                "row {} has {} fields, header has {}",
                lineno + 2,
                fields.len(),
                header.len()
            )));
        }
        for (j, f) in fields.iter().enumerate() {
            if j == label_col {
                labels.push(if *f == "?" {
                    None
                } else {
                    Some(f.parse::<usize>().map_err(|_| {
                        Error::data(format!("row {}: bad label '{f}'", lineno + 2))
                    })?)
                });
            } else {
                let v: f64 = f.parse().map_err(|_| {
                    Error::data(format!("row {}: bad number '{f}'", lineno + 2))
                })?;
                data.push(R::lit(v));
            }
        }
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::data("csv has no rows"));
    }
    let classes = labels.iter().flatten().max().map_or(0, |m| m + 1).max(2);
    LabeledDataset::new(Tensor::new(vec![n, width], data)?, labels, classes)
}
