//! Recognition accuracy of quantized images, multi-label metrics and
//! rate–accuracy curves.
//!
//! Every quantized image is stored the way it would be shipped (palette
//! rounded to 8 bits) before it is classified, and its bitrate is the size
//! of that encoding.

mod metrics;
mod plot;

pub use metrics::{average_precision, mean_average_precision};
pub use plot::{render_curve_png, render_curve_svg};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::batch::{images_to_tensor, to_f64_vec};
use crate::classic::{dither, median_cut, octree_quantize};
use crate::codec::{decode_jpeg, encode_indexed_png, jpeg_reference};
use crate::data::{sequential_batches, Dataset, NormStats};
use crate::error::{Error, Result};
use crate::imaging::{IndexedImage, RgbImage};
use crate::losses::Targets;
use crate::nn::Classifier;
use crate::quantnet::Variant;
use crate::training::{TrainedClassifier, TrainedQuantizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "identity")]
    Identity,
    #[serde(rename = "mediancut")]
    MedianCut,
    #[serde(rename = "mediancut+dither")]
    MedianCutDither,
    #[serde(rename = "octree")]
    Octree,
    #[serde(rename = "colorcnn")]
    ColorCnn,
    #[serde(rename = "colorcnn_plus")]
    ColorCnnPlus,
    #[serde(rename = "jpeg")]
    Jpeg,
}

const METHODS: [Method; 7] = [
    Method::Identity,
    Method::MedianCut,
    Method::MedianCutDither,
    Method::Octree,
    Method::ColorCnn,
    Method::ColorCnnPlus,
    Method::Jpeg,
];

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Identity => "identity",
            Method::MedianCut => "mediancut",
            Method::MedianCutDither => "mediancut+dither",
            Method::Octree => "octree",
            Method::ColorCnn => "colorcnn",
            Method::ColorCnnPlus => "colorcnn_plus",
            Method::Jpeg => "jpeg",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        METHODS.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            let names: Vec<_> = METHODS.iter().map(|m| m.as_str()).collect();
            Error::config(format!("unknown method `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// Something that turns images into stored, decodable images.
pub enum Quantizer<'a> {
    /// Pass-through; bitrate is raw 24-bit RGB.
    Identity,
    MedianCut,
    MedianCutDither,
    Octree,
    Net(&'a TrainedQuantizer),
    /// Several networks of one variant; each setting uses the first that
    /// supports its color count (one ColorCNN per bit depth).
    NetPool(Vec<&'a TrainedQuantizer>),
    /// The setting is the JPEG quality.
    Jpeg,
}

impl Quantizer<'_> {
    pub fn method(&self) -> Method {
        match self {
            Quantizer::Identity => Method::Identity,
            Quantizer::MedianCut => Method::MedianCut,
            Quantizer::MedianCutDither => Method::MedianCutDither,
            Quantizer::Octree => Method::Octree,
            Quantizer::Net(q) => variant_method(q),
            Quantizer::NetPool(qs) => qs.first().map_or(Method::ColorCnnPlus, |q| variant_method(q)),
            Quantizer::Jpeg => Method::Jpeg,
        }
    }

    /// Quantizes a batch. `setting` is a bit depth (`C = 2^setting`) or,
    /// for JPEG, the quality.
    pub fn apply(&self, images: &[&RgbImage], setting: u32) -> Result<Vec<Quantized>> {
        if let Quantizer::Identity = self {
            return Ok(images
                .iter()
                .map(|img| Quantized {
                    image: (*img).clone(),
                    bpp: 24.0,
                    colors: img.distinct_colors(),
                    indexed: None,
                })
                .collect());
        }
        if let Quantizer::Jpeg = self {
            let quality = u8::try_from(setting)
                .ok()
                .filter(|q| (1..=100).contains(q))
                .ok_or_else(|| Error::config(format!("JPEG quality {setting} outside 1..=100")))?;
            return images
                .iter()
                .map(|img| {
                    let blob = jpeg_reference(img, quality)?;
                    let image = decode_jpeg(&blob)?;
                    Ok(Quantized {
                        colors: image.distinct_colors(),
                        image,
                        bpp: blob.bits_per_pixel()?,
                        indexed: None,
                    })
                })
                .collect();
        }
        if !(1..=8).contains(&setting) {
            return Err(Error::config(format!("bit depth {setting} outside 1..=8")));
        }
        let colors = 1usize << setting;
        let indexed: Vec<IndexedImage> = match self {
            Quantizer::MedianCut => images.iter().map(|img| median_cut(img, colors)).collect(),
            Quantizer::MedianCutDither => images
                .iter()
                .map(|img| dither(img, median_cut(img, colors).palette()))
                .collect::<Result<_>>()?,
            Quantizer::Octree => images.iter().map(|img| octree_quantize(img, colors)).collect(),
            Quantizer::Net(q) => run_net(q, images, colors)?,
            Quantizer::NetPool(qs) => {
                let q = qs.iter().find(|q| supports(q, colors)).ok_or_else(|| {
                    Error::config(format!("no quantizer checkpoint supports {colors} colors ({setting}-bit)"))
                })?;
                run_net(q, images, colors)?
            }
            Quantizer::Identity | Quantizer::Jpeg => unreachable!("handled above"),
        };
        indexed.into_iter().map(Quantized::from_indexed).collect()
    }
}

fn variant_method(q: &TrainedQuantizer) -> Method {
    match q.net.config().variant {
        Variant::ColorCnn => Method::ColorCnn,
        Variant::ColorCnnPlus => Method::ColorCnnPlus,
    }
}

fn supports(q: &TrainedQuantizer, colors: usize) -> bool {
    let d = q.net.config().backbone.head_channels;
    match q.net.config().variant {
        Variant::ColorCnn => colors == d,
        Variant::ColorCnnPlus => (1..=d).contains(&colors),
    }
}

fn run_net(q: &TrainedQuantizer, images: &[&RgbImage], colors: usize) -> Result<Vec<IndexedImage>> {
    if !supports(q, colors) {
        let d = q.net.config().backbone.head_channels;
        return Err(Error::config(match q.net.config().variant {
            Variant::ColorCnn => format!("this ColorCNN checkpoint produces {d} colors, not {colors}"),
            Variant::ColorCnnPlus => format!("this ColorCNN+ checkpoint supports at most {d} colors, not {colors}"),
        }));
    }
    let x = images_to_tensor(images, DType::F32, q.net.params().device())?;
    q.net.forward_test(&x, colors)
}

/// One stored image.
#[derive(Debug, Clone)]
pub struct Quantized {
    /// As decoded from storage.
    pub image: RgbImage,
    pub bpp: f64,
    /// Distinct colors in `image`.
    pub colors: usize,
    /// The indexed form, for palette-based methods.
    pub indexed: Option<IndexedImage>,
}

impl Quantized {
    fn from_indexed(ix: IndexedImage) -> Result<Self> {
        let blob = encode_indexed_png(&ix)?;
        let rec = ix.reconstruct();
        let image = RgbImage::from_rgb8(rec.width(), rec.height(), &rec.to_rgb8())?;
        Ok(Self {
            bpp: blob.bits_per_pixel()?,
            colors: ix.used_colors(),
            image,
            indexed: Some(ix),
        })
    }
}

/// Result of evaluating one method at one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: Method,
    /// Bit depth, or JPEG quality.
    pub bits: u32,
    /// Percent; top-1 for single-label data, exact match for multi-label.
    pub accuracy: f64,
    /// Percent; multi-label data only.
    pub map: Option<f64>,
    /// Mean over images of the encoded bits per pixel.
    pub bpp: f64,
    /// Mean distinct colors per image.
    pub colors: f64,
    pub dataset: String,
    pub classifier: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// Recorded in every record.
    pub seed: u64,
    /// Label written in the `classifier` column.
    pub classifier_label: Option<String>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            batch_size: 128,
            seed: 0,
            classifier_label: None,
        }
    }
}

/// Logits of `classifier` (evaluation mode) on normalized `images`.
pub fn classify(classifier: &Classifier, images: &[&RgbImage], norm: &NormStats) -> Result<Tensor> {
    let x = images_to_tensor(images, DType::F32, classifier.params().device())?;
    classifier.forward(&norm.normalize(&x)?, false)
}

/// Correct predictions in a batch: top-1 match, or all labels right at
/// probability 0.5 for multi-label targets.
pub fn count_correct(logits: &Tensor, targets: &Targets) -> Result<f64> {
    let (b, k) = logits.dims2()?;
    let v = to_f64_vec(logits)?;
    let rows = v.chunks(k.max(1));
    let correct = match targets {
        Targets::Class(labels) => rows
            .zip(labels)
            .filter(|(row, &y)| argmax(row) == y as usize)
            .count(),
        Targets::Multi(labels) => rows
            .zip(labels)
            .filter(|(row, y)| row.iter().zip(y.iter()).all(|(&z, &t)| (z >= 0.0) == (t > 0.5)))
            .count(),
    };
    debug_assert!(correct <= b);
    Ok(correct as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Percent correct of `classifier` on the unmodified `dataset`.
pub fn dataset_accuracy(classifier: &Classifier, dataset: &Dataset, norm: &NormStats, batch_size: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0.0;
    for idx in sequential_batches(dataset.len(), batch_size) {
        let (images, targets) = dataset.gather(&idx);
        correct += count_correct(&classify(classifier, &images, norm)?, &targets)?;
    }
    Ok(100.0 * correct / dataset.len() as f64)
}

fn evaluate(
    quantizer: &Quantizer,
    classifier: &TrainedClassifier,
    dataset: &Dataset,
    setting: u32,
    opts: &EvalOptions,
) -> Result<EvalRecord> {
    if dataset.is_empty() {
        return Err(Error::config(format!("{} {} split is empty", dataset.id, dataset.split)));
    }
    if classifier.meta.spec.num_classes != dataset.num_classes {
        return Err(Error::config(format!(
            "classifier predicts {} classes but {} has {}",
            classifier.meta.spec.num_classes, dataset.id, dataset.num_classes
        )));
    }
    let norm = classifier.meta.norm.with_scale(1.0);
    let (mut correct, mut bpp, mut colors) = (0.0, 0.0, 0.0);
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for idx in sequential_batches(dataset.len(), opts.batch_size) {
        let (images, targets) = dataset.gather(&idx);
        let out = quantizer.apply(&images, setting)?;
        for q in &out {
            bpp += q.bpp;
            colors += q.colors as f64;
        }
        let shown: Vec<&RgbImage> = out.iter().map(|q| &q.image).collect();
        let logits = classify(&classifier.classifier, &shown, &norm)?;
        correct += count_correct(&logits, &targets)?;
        if let Targets::Multi(y) = &targets {
            let k = dataset.num_classes;
            scores.extend(to_f64_vec(&logits)?.chunks(k).map(|r| r.to_vec()));
            labels.extend(y.iter().map(|r| r.iter().map(|&t| t > 0.5).collect::<Vec<_>>()));
        }
    }
    let n = dataset.len() as f64;
    let map = dataset
        .multilabel()
        .then(|| mean_average_precision(&scores, &labels).map(|m| 100.0 * m))
        .transpose()?;
    Ok(EvalRecord {
        method: quantizer.method(),
        bits: setting,
        accuracy: 100.0 * correct / n,
        map,
        bpp: bpp / n,
        colors: colors / n,
        dataset: dataset.id.to_string(),
        classifier: opts
            .classifier_label
            .clone()
            .unwrap_or_else(|| classifier.meta.spec.arch.to_string()),
        seed: opts.seed,
    })
}

/// Top-1 accuracy of `classifier` on every test image after quantization
/// at `setting`.
pub fn evaluate_accuracy(
    quantizer: &Quantizer,
    classifier: &TrainedClassifier,
    dataset: &Dataset,
    setting: u32,
    opts: &EvalOptions,
) -> Result<EvalRecord> {
    if classifier.meta.spec.multilabel || dataset.multilabel() {
        return Err(Error::config(
            "evaluate_accuracy needs a single-label classifier and dataset; use evaluate_multilabel",
        ));
    }
    evaluate(quantizer, classifier, dataset, setting, opts)
}

/// Exact-match accuracy and mAP of a multi-label classifier.
pub fn evaluate_multilabel(
    quantizer: &Quantizer,
    classifier: &TrainedClassifier,
    dataset: &Dataset,
    setting: u32,
    opts: &EvalOptions,
) -> Result<EvalRecord> {
    if !classifier.meta.spec.multilabel || !dataset.multilabel() {
        return Err(Error::config(
            "evaluate_multilabel needs a multi-label classifier and dataset",
        ));
    }
    evaluate(quantizer, classifier, dataset, setting, opts)
}

/// Either entry point, chosen by the dataset.
pub fn evaluate_any(
    quantizer: &Quantizer,
    classifier: &TrainedClassifier,
    dataset: &Dataset,
    setting: u32,
    opts: &EvalOptions,
) -> Result<EvalRecord> {
    if dataset.multilabel() {
        evaluate_multilabel(quantizer, classifier, dataset, setting, opts)
    } else {
        evaluate_accuracy(quantizer, classifier, dataset, setting, opts)
    }
}

/// One CSV row: `method,bits,accuracy,map,bpp,dataset,classifier,seed`.
/// `bits` holds the JPEG quality for JPEG rows; failed rows leave the
/// metric columns empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub method: Method,
    pub bits: u32,
    pub accuracy: Option<f64>,
    pub map: Option<f64>,
    pub bpp: Option<f64>,
    pub dataset: String,
    pub classifier: String,
    pub seed: u64,
}

impl From<&EvalRecord> for CurveRow {
    fn from(r: &EvalRecord) -> Self {
        Self {
            method: r.method,
            bits: r.bits,
            accuracy: Some(r.accuracy),
            map: r.map,
            bpp: Some(r.bpp),
            dataset: r.dataset.clone(),
            classifier: r.classifier.clone(),
            seed: r.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveFailure {
    pub method: Method,
    pub bits: u32,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct CurveOutput {
    pub records: Vec<EvalRecord>,
    pub failures: Vec<CurveFailure>,
    pub csv: PathBuf,
    pub svg: PathBuf,
    pub png: PathBuf,
}

/// Evaluates every method at every bit depth and JPEG at every quality,
/// writes `curve.csv` in `out_dir`, then renders `curve.svg` and
/// `curve.png` from that CSV. A failing row is recorded and skipped.
pub fn rate_accuracy_curve(
    methods: &[Quantizer],
    dataset: &Dataset,
    classifier: &TrainedClassifier,
    bits: &[u32],
    jpeg_qualities: &[u8],
    opts: &EvalOptions,
    out_dir: &Path,
) -> Result<CurveOutput> {
    std::fs::create_dir_all(out_dir)?;
    let mut jobs: Vec<(&Quantizer, u32)> = Vec::new();
    for m in methods {
        jobs.extend(bits.iter().map(|&b| (m, b)));
    }
    let jpeg = Quantizer::Jpeg;
    jobs.extend(jpeg_qualities.iter().map(|&q| (&jpeg, u32::from(q))));

    let csv = out_dir.join("curve.csv");
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_path(&csv)?;
    writer.write_record(["method", "bits", "accuracy", "map", "bpp", "dataset", "classifier", "seed"])?;
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (q, setting) in jobs {
        match evaluate_any(q, classifier, dataset, setting, opts) {
            Ok(r) => {
                log::info!(
                    "{} {setting}: accuracy {:.2}% bpp {:.4} colors {:.2}",
                    r.method,
                    r.accuracy,
                    r.bpp,
                    r.colors
                );
                writer.serialize(CurveRow::from(&r))?;
                records.push(r);
            }
            Err(e) => {
                log::warn!("{} {setting} failed: {e}", q.method());
                writer.serialize(CurveRow {
                    method: q.method(),
                    bits: setting,
                    accuracy: None,
                    map: None,
                    bpp: None,
                    dataset: dataset.id.to_string(),
                    classifier: opts
                        .classifier_label
                        .clone()
                        .unwrap_or_else(|| classifier.meta.spec.arch.to_string()),
                    seed: opts.seed,
                })?;
                failures.push(CurveFailure {
                    method: q.method(),
                    bits: setting,
                    error: e.to_string(),
                });
            }
        }
    }
    writer.flush()?;
    drop(writer);

    let rows = read_curve_csv(&csv)?;
    let svg = out_dir.join("curve.svg");
    std::fs::write(&svg, render_curve_svg(&rows))?;
    let png = out_dir.join("curve.png");
    render_curve_png(&rows)?.save(&png)?;
    Ok(CurveOutput {
        records,
        failures,
        csv,
        svg,
        png,
    })
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurveRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader.deserialize().collect::<std::result::Result<Vec<CurveRow>, _>>()?)
}
