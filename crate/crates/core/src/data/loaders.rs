//! Readers for the official binary distributions. CIFAR and STL10 are read
//! either from their extracted directory or straight from the `.tar.gz`
//! archive in `root`; VOC must be extracted.

use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Label, LabeledImage, Split};
use crate::error::{Error, Result};
use crate::imaging::RgbImage;

pub const VOC_CLASSES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

fn ingest(path: impl Into<PathBuf>, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.into(),
        reason: reason.into(),
    }
}

/// Contents of `files` from `root/dir`, or from the members `dir/<file>` of
/// `root/archive` when the directory is absent.
fn read_members(root: &Path, dir: &str, archive: &str, files: &[&str]) -> Result<Vec<Vec<u8>>> {
    let extracted = root.join(dir);
    if extracted.is_dir() {
        return files
            .iter()
            .map(|f| {
                let p = extracted.join(f);
                std::fs::read(&p).map_err(|e| ingest(&p, e.to_string()))
            })
            .collect();
    }
    let archive_path = root.join(archive);
    if !archive_path.is_file() {
        return Err(ingest(
            &extracted,
            format!("neither the directory nor the archive {} exists", archive_path.display()),
        ));
    }
    let file = File::open(&archive_path).map_err(|e| ingest(&archive_path, e.to_string()))?;
    let mut tar = tar::Archive::new(GzDecoder::new(file));
    let wanted: HashMap<String, usize> = files
        .iter()
        .enumerate()
        .map(|(i, f)| (format!("{dir}/{f}"), i))
        .collect();
    let mut found: Vec<Option<Vec<u8>>> = vec![None; files.len()];
    let entries = tar
        .entries()
        .map_err(|e| ingest(&archive_path, e.to_string()))?;
    for entry in entries {
        let mut entry = entry.map_err(|e| ingest(&archive_path, e.to_string()))?;
        let name = entry
            .path()
            .map_err(|e| ingest(&archive_path, e.to_string()))?
            .to_string_lossy()
            .trim_start_matches("./")
            .to_string();
        if let Some(&i) = wanted.get(&name) {
            let mut buf = Vec::new();
            entry
                .read_to_end(&mut buf)
                .map_err(|e| ingest(&archive_path, format!("{name}: {e}")))?;
            found[i] = Some(buf);
        }
    }
    found
        .into_iter()
        .zip(files)
        .map(|(b, f)| b.ok_or_else(|| ingest(&archive_path, format!("member {dir}/{f} missing"))))
        .collect()
}

/// Records of `label_bytes` label bytes followed by a planar 32x32 image.
fn cifar_records(
    bytes: &[u8],
    label_bytes: usize,
    label_at: usize,
    classes: u32,
    source: &Path,
) -> Result<Vec<LabeledImage>> {
    const PIXELS: usize = 32 * 32 * 3;
    let record = label_bytes + PIXELS;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(ingest(
            source,
            format!("{} bytes is not a whole number of {record}-byte records", bytes.len()),
        ));
    }
    bytes
        .chunks_exact(record)
        .map(|r| {
            let label = u32::from(r[label_at]);
            if label >= classes {
                return Err(ingest(source, format!("label {label} outside {classes} classes")));
            }
            Ok(LabeledImage {
                image: RgbImage::from_planar_rgb8(32, 32, &r[label_bytes..])?,
                label: Label::Class(label),
            })
        })
        .collect()
}

pub(super) fn cifar10(root: &Path, split: Split) -> Result<Vec<LabeledImage>> {
    let files: Vec<&str> = match split {
        Split::Train => vec![
            "data_batch_1.bin",
            "data_batch_2.bin",
            "data_batch_3.bin",
            "data_batch_4.bin",
            "data_batch_5.bin",
        ],
        Split::Test => vec!["test_batch.bin"],
    };
    let dir = "cifar-10-batches-bin";
    let blobs = read_members(root, dir, "cifar-10-binary.tar.gz", &files)?;
    let mut out = Vec::new();
    for (bytes, f) in blobs.iter().zip(&files) {
        out.extend(cifar_records(bytes, 1, 0, 10, &root.join(dir).join(f))?);
    }
    Ok(out)
}

pub(super) fn cifar100(root: &Path, split: Split) -> Result<Vec<LabeledImage>> {
    let file = match split {
        Split::Train => "train.bin",
        Split::Test => "test.bin",
    };
    let dir = "cifar-100-binary";
    let blobs = read_members(root, dir, "cifar-100-binary.tar.gz", &[file])?;
    // Coarse label first, fine label second.
    cifar_records(&blobs[0], 2, 1, 100, &root.join(dir).join(file))
}

pub(super) fn stl10(root: &Path, split: Split) -> Result<Vec<LabeledImage>> {
    const SIDE: usize = 96;
    const IMAGE: usize = SIDE * SIDE * 3;
    let (xf, yf) = match split {
        Split::Train => ("train_X.bin", "train_y.bin"),
        Split::Test => ("test_X.bin", "test_y.bin"),
    };
    let dir = "stl10_binary";
    let blobs = read_members(root, dir, "stl10_binary.tar.gz", &[xf, yf])?;
    let (x, y) = (&blobs[0], &blobs[1]);
    let xpath = root.join(dir).join(xf);
    if x.len() % IMAGE != 0 || x.len() / IMAGE != y.len() {
        return Err(ingest(
            &xpath,
            format!("{} image bytes do not match {} labels", x.len(), y.len()),
        ));
    }
    x.chunks_exact(IMAGE)
        .zip(y)
        .map(|(img, &label)| {
            // Labels are 1-based; each channel plane is stored column-major.
            if !(1..=10).contains(&label) {
                return Err(ingest(root.join(dir).join(yf), format!("label {label} outside 1..=10")));
            }
            let image = RgbImage::from_fn(SIDE, SIDE, |px, py| {
                let at = |c: usize| f32::from(img[c * SIDE * SIDE + px * SIDE + py]) / 255.0;
                [at(0), at(1), at(2)]
            });
            Ok(LabeledImage {
                image,
                label: Label::Class(u32::from(label - 1)),
            })
        })
        .collect()
}

fn voc_dir(root: &Path) -> Result<PathBuf> {
    for cand in [root.join("VOCdevkit").join("VOC2012"), root.join("VOC2012")] {
        if cand.is_dir() {
            return Ok(cand);
        }
    }
    Err(ingest(
        root.join("VOCdevkit").join("VOC2012"),
        "extracted VOC2012 directory not found",
    ))
}

/// Object classes named in one annotation file, as a 0/1 vector.
pub(super) fn voc_labels(xml: &str, source: &Path) -> Result<Vec<f32>> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| ingest(source, e.to_string()))?;
    let mut labels = vec![0.0f32; VOC_CLASSES.len()];
    for obj in doc.descendants().filter(|n| n.has_tag_name("object")) {
        let name = obj
            .children()
            .find(|n| n.has_tag_name("name"))
            .and_then(|n| n.text())
            .map(str::trim)
            .ok_or_else(|| ingest(source, "object without a name"))?;
        let k = VOC_CLASSES
            .iter()
            .position(|&c| c == name)
            .ok_or_else(|| ingest(source, format!("unknown class `{name}`")))?;
        labels[k] = 1.0;
    }
    if labels.iter().all(|&v| v == 0.0) {
        return Err(ingest(source, "annotation lists no objects"));
    }
    Ok(labels)
}

/// VOC has no public test annotations; the test split reads `val`.
pub(super) fn voc(root: &Path, split: Split, size: usize) -> Result<Vec<LabeledImage>> {
    if size == 0 {
        return Err(Error::config("voc_size must be positive"));
    }
    let base = voc_dir(root)?;
    let list = base.join("ImageSets").join("Main").join(match split {
        Split::Train => "train.txt",
        Split::Test => "val.txt",
    });
    let ids = std::fs::read_to_string(&list).map_err(|e| ingest(&list, e.to_string()))?;
    ids.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|id| {
            let ann = base.join("Annotations").join(format!("{id}.xml"));
            let xml = std::fs::read_to_string(&ann).map_err(|e| ingest(&ann, e.to_string()))?;
            let label = voc_labels(&xml, &ann)?;
            let jpg = base.join("JPEGImages").join(format!("{id}.jpg"));
            let decoded = image::open(&jpg).map_err(|e| ingest(&jpg, e.to_string()))?;
            let resized = decoded
                .resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle)
                .to_rgb8();
            Ok(LabeledImage {
                image: RgbImage::from_rgb8(size, size, resized.as_raw())?,
                label: Label::Multi(label),
            })
        })
        .collect()
}

/// Procedural classification data: each class has its own base color and
/// stripe pattern, perturbed per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            train_per_class: 32,
            test_per_class: 8,
            size: 16,
            seed: 7,
        }
    }
}

pub fn synthetic(spec: &SyntheticSpec, split: Split) -> Vec<LabeledImage> {
    let (per_class, salt) = match split {
        Split::Train => (spec.train_per_class, 0u64),
        Split::Test => (spec.test_per_class, 1),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(2).wrapping_add(salt));
    let classes = spec.classes.max(1);
    let s = spec.size.max(1);
    let mut out = Vec::with_capacity(classes * per_class);
    for i in 0..classes * per_class {
        let class = i % classes;
        let hue = class as f32 / classes as f32;
        let base = [
            0.5 + 0.4 * (std::f32::consts::TAU * hue).cos(),
            0.5 + 0.4 * (std::f32::consts::TAU * (hue + 1.0 / 3.0)).cos(),
            0.5 + 0.4 * (std::f32::consts::TAU * (hue + 2.0 / 3.0)).cos(),
        ];
        let period = 2 + class % 3;
        let vertical = class % 2 == 0;
        let phase = rng.random_range(0..period);
        let gain: f32 = rng.random_range(0.7..1.0);
        let noise_seed: u64 = rng.random();
        let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
        let image = RgbImage::from_fn(s, s, |x, y| {
            let t = if vertical { x } else { y };
            let stripe = if (t + phase) % period == 0 { 0.35 } else { 0.0 };
            let mut px = [0.0; 3];
            for k in 0..3 {
                let n: f32 = noise.random_range(-0.05..0.05);
                px[k] = (base[k] * gain - stripe + n).clamp(0.0, 1.0);
            }
            px
        });
        out.push(LabeledImage {
            image,
            label: Label::Class(class as u32),
        });
    }
    out
}
