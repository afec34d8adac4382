//! Datasets, normalization statistics and augmentation.

mod augment;
mod loaders;

pub use augment::{augment, AugmentParams, AugmentSpec, Augmenter, Stage};
pub use loaders::{synthetic, SyntheticSpec, VOC_CLASSES};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::losses::Targets;

#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Class(u32),
    /// 0/1 per class.
    Multi(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: RgbImage,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetId {
    #[serde(rename = "cifar10")]
    Cifar10,
    #[serde(rename = "cifar100")]
    Cifar100,
    #[serde(rename = "stl10")]
    Stl10,
    #[serde(rename = "voc2012-multilabel")]
    Voc2012Multilabel,
    /// Procedurally generated; needs no files.
    #[serde(rename = "synthetic")]
    Synthetic,
}

impl DatasetId {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Cifar10 => "cifar10",
            DatasetId::Cifar100 => "cifar100",
            DatasetId::Stl10 => "stl10",
            DatasetId::Voc2012Multilabel => "voc2012-multilabel",
            DatasetId::Synthetic => "synthetic",
        }
    }

    pub fn is_multilabel(self) -> bool {
        self == DatasetId::Voc2012Multilabel
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            DatasetId::Cifar10,
            DatasetId::Cifar100,
            DatasetId::Stl10,
            DatasetId::Voc2012Multilabel,
            DatasetId::Synthetic,
        ]
        .into_iter()
        .find(|d| d.as_str() == s)
        .ok_or_else(|| {
            Error::config(format!(
                "unknown dataset `{s}` (expected cifar10, cifar100, stl10, voc2012-multilabel or synthetic)"
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Loader knobs that are not part of a dataset's identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoadOptions {
    /// Side length VOC images are resized to.
    pub voc_size: usize,
    /// Keep only the first `limit` items.
    pub limit: Option<usize>,
    pub synthetic: SyntheticSpec,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            voc_size: 112,
            limit: None,
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub id: DatasetId,
    pub split: Split,
    pub num_classes: usize,
    pub items: Vec<LabeledImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn multilabel(&self) -> bool {
        self.id.is_multilabel()
    }

    /// Image size, if all items share one.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        let first = self.items.first()?;
        let size = (first.image.width(), first.image.height());
        self.items
            .iter()
            .all(|it| (it.image.width(), it.image.height()) == size)
            .then_some(size)
    }

    /// Images and targets for the given item positions.
    pub fn gather(&self, idx: &[usize]) -> (Vec<&RgbImage>, Targets) {
        let images = idx.iter().map(|&i| &self.items[i].image).collect();
        let targets = if self.multilabel() {
            Targets::Multi(
                idx.iter()
                    .map(|&i| match &self.items[i].label {
                        Label::Multi(v) => v.clone(),
                        Label::Class(c) => one_hot(*c, self.num_classes),
                    })
                    .collect(),
            )
        } else {
            Targets::Class(
                idx.iter()
                    .map(|&i| match &self.items[i].label {
                        Label::Class(c) => *c,
                        Label::Multi(v) => argmax(v),
                    })
                    .collect(),
            )
        };
        (images, targets)
    }
}

fn one_hot(c: u32, n: usize) -> Vec<f32> {
    (0..n).map(|k| if k == c as usize { 1.0 } else { 0.0 }).collect()
}

fn argmax(v: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}

/// Reads a dataset split from `root` in its official distribution format,
/// in file order.
pub fn load_dataset(id: DatasetId, split: Split, root: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let (num_classes, mut items) = match id {
        DatasetId::Cifar10 => (10, loaders::cifar10(root, split)?),
        DatasetId::Cifar100 => (100, loaders::cifar100(root, split)?),
        DatasetId::Stl10 => (10, loaders::stl10(root, split)?),
        DatasetId::Voc2012Multilabel => (VOC_CLASSES.len(), loaders::voc(root, split, opts.voc_size)?),
        DatasetId::Synthetic => (opts.synthetic.classes, synthetic(&opts.synthetic, split)),
    };
    if let Some(limit) = opts.limit {
        items.truncate(limit);
    }
    Ok(Dataset {
        id,
        split,
        num_classes,
        items,
    })
}

/// Per-channel normalization: `(x - mean) / (std * std_scale)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub std_scale: f64,
}

/// Lower bound applied to every channel std.
pub const STD_FLOOR: f64 = 1e-6;

impl NormStats {
    pub fn with_scale(self, std_scale: f64) -> Self {
        Self { std_scale, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s > 0.0)) || !(self.std_scale > 0.0) {
            return Err(Error::config("normalization std and std_scale must be positive"));
        }
        Ok(())
    }

    fn channel_tensors(&self, like: &Tensor) -> Result<(Tensor, Tensor)> {
        let dev = like.device();
        let mean = Tensor::new(&self.mean, dev)?.to_dtype(like.dtype())?.reshape((1, 3, 1, 1))?;
        let scale: Vec<f64> = self.std.iter().map(|s| s * self.std_scale).collect();
        let scale = Tensor::new(scale.as_slice(), dev)?.to_dtype(like.dtype())?.reshape((1, 3, 1, 1))?;
        Ok((mean, scale))
    }

    /// Differentiable normalization of a `(batch, 3, H, W)` tensor.
    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        let (mean, scale) = self.channel_tensors(x)?;
        Ok(x.broadcast_sub(&mean)?.broadcast_div(&scale)?)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        let (mean, scale) = self.channel_tensors(x)?;
        Ok(x.broadcast_mul(&scale)?.broadcast_add(&mean)?)
    }
}

/// Population mean and std per channel over every pixel of every image.
pub fn compute_norm_stats(items: &[LabeledImage]) -> Result<NormStats> {
    if items.is_empty() {
        return Err(Error::arg("cannot compute normalization statistics of an empty dataset"));
    }
    let mut sum = [0.0f64; 3];
    let mut count = 0usize;
    for it in items {
        for p in it.image.pixels() {
            for k in 0..3 {
                sum[k] += f64::from(p[k]);
            }
        }
        count += it.image.pixel_count();
    }
    let mean = sum.map(|s| s / count as f64);
    let mut sq = [0.0f64; 3];
    for it in items {
        for p in it.image.pixels() {
            for k in 0..3 {
                sq[k] += (f64::from(p[k]) - mean[k]).powi(2);
            }
        }
    }
    let std = sq.map(|s| (s / count as f64).sqrt().max(STD_FLOOR));
    Ok(NormStats {
        mean,
        std,
        std_scale: 1.0,
    })
}

/// Shuffled mini-batches of positions `0..len`; the last batch may be short.
pub fn shuffled_batches(len: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Sequential mini-batches of positions `0..len`.
pub fn sequential_batches(len: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let order: Vec<usize> = (0..len).collect();
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}
