//! Experiment configuration: a TOML file merged over built-in defaults,
//! then `--set key=value` overrides addressed by dotted paths.
//!
//! Every key of the resolved configuration exists in the defaults, so an
//! unknown key is rejected before deserialization. Tables holding a `kind`
//! tag (the learning-rate policies) are replaced wholesale when the tag
//! changes, since each kind has its own fields.

use std::path::{Path, PathBuf};

use colorquant::data::{AugmentSpec, DatasetId, LoadOptions, Stage, SyntheticSpec};
use colorquant::eval::Method;
use colorquant::losses::LossWeights;
use colorquant::nn::ClassifierArch;
use colorquant::quantnet::{BackboneConfig, BackboneKind, QuantNetConfig, Variant};
use colorquant::training::{
    ClassifierTrainConfig, LrPolicy, QuantizerTrainConfig, SgdSpec, TaskSelector, TrainSchedule,
};
use colorquant::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const DATA_ROOT_ENV: &str = "COLORQ_DATA_ROOT";
pub const SNAPSHOT_NAME: &str = "config.snapshot.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds every schedule, selector and sampler of the run.
    pub seed: u64,
    pub output: PathBuf,
    pub data_root: PathBuf,
    /// Single-threaded kernels for bit-reproducible runs.
    pub deterministic: bool,
    pub dataset: DatasetSection,
    pub classifier: ClassifierSection,
    pub quantizer: QuantizerSection,
    pub evaluate: EvaluateSection,
    pub quantize: QuantizeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub name: DatasetId,
    /// Training items kept; 0 keeps all.
    pub train_limit: usize,
    /// Test items kept; 0 keeps all.
    pub test_limit: usize,
    pub voc_size: usize,
    pub synthetic: SyntheticSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_policy: LrPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSection {
    pub arch: ClassifierArch,
    pub width: usize,
    /// Read by the quantizer and evaluation commands; empty means
    /// `<output>/classifier.ckpt`.
    pub checkpoint: PathBuf,
    pub schedule: ScheduleSection,
    pub augment: AugmentSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub kind: BackboneKind,
    pub levels: usize,
    pub base_channels: usize,
    /// 0 disables the bottleneck.
    pub bottleneck_dim: usize,
    pub head_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectorSection {
    pub bits: Vec<u32>,
    /// Explicit color counts; when non-empty they replace `bits`.
    pub colors: Vec<usize>,
    pub pace: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerSection {
    pub mode: Variant,
    /// Empty means `<output>/quantizer.ckpt`.
    pub checkpoint: PathBuf,
    /// Output colors of a ColorCNN network; sets its head width.
    pub colors: usize,
    pub backbone: BackboneSection,
    pub top_k: usize,
    pub weights: LossWeights,
    pub schedule: ScheduleSection,
    pub selector: SelectorSection,
    pub jitter: f64,
    pub std_scale: f64,
    pub sample_ratio: f64,
    pub distill: bool,
    pub pre_augment: AugmentSpec,
    pub post_augment: AugmentSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    /// Method and bit depth (or JPEG quality) of `evaluate`.
    pub method: Method,
    pub bits: u32,
    /// Methods, bit depths and JPEG qualities of `curve`.
    pub methods: Vec<Method>,
    pub bit_range: Vec<u32>,
    pub jpeg_qualities: Vec<u8>,
    /// ColorCNN checkpoints, one per color count; empty means
    /// `quantizer.checkpoint`.
    pub colorcnn_checkpoints: Vec<PathBuf>,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizeSection {
    pub method: Method,
    /// Bit depth, or JPEG quality.
    pub bits: u32,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let plus = QuantNetConfig::colorcnn_plus();
        let b = &plus.backbone;
        Self {
            seed: 0,
            output: PathBuf::from("runs/default"),
            data_root: PathBuf::from("data"),
            deterministic: false,
            dataset: DatasetSection {
                name: DatasetId::Cifar10,
                train_limit: 0,
                test_limit: 0,
                voc_size: LoadOptions::default().voc_size,
                synthetic: SyntheticSpec::default(),
            },
            classifier: ClassifierSection {
                arch: ClassifierArch::ResNet18,
                width: 64,
                checkpoint: PathBuf::new(),
                schedule: ScheduleSection {
                    epochs: 60,
                    batch_size: 128,
                    momentum: 0.9,
                    weight_decay: 5e-4,
                    lr_policy: LrPolicy::one_cycle(0.1),
                },
                augment: AugmentSpec::crop_flip(Stage::Pre),
            },
            quantizer: QuantizerSection {
                mode: Variant::ColorCnnPlus,
                checkpoint: PathBuf::new(),
                colors: 2,
                backbone: BackboneSection {
                    kind: b.kind,
                    levels: b.levels,
                    base_channels: b.base_channels,
                    bottleneck_dim: b.bottleneck_dim.unwrap_or(0),
                    head_channels: b.head_channels,
                },
                top_k: plus.top_k,
                weights: LossWeights::default(),
                schedule: ScheduleSection {
                    epochs: 300,
                    batch_size: 128,
                    momentum: 0.9,
                    weight_decay: 5e-4,
                    lr_policy: LrPolicy::cosine_warm_restart(0.01, 20.0),
                },
                selector: SelectorSection {
                    bits: vec![1, 2, 3, 4, 5, 6],
                    colors: Vec::new(),
                    pace: 20,
                },
                jitter: 1.0,
                std_scale: 4.0,
                sample_ratio: 0.3,
                distill: false,
                pre_augment: AugmentSpec::flip_only(Stage::Pre),
                post_augment: AugmentSpec::full(Stage::Post),
            },
            evaluate: EvaluateSection {
                method: Method::MedianCut,
                bits: 1,
                methods: vec![Method::MedianCut, Method::ColorCnnPlus],
                bit_range: vec![1, 2, 3, 4, 5, 6],
                jpeg_qualities: vec![1, 5, 10, 20, 40, 60, 80, 95],
                colorcnn_checkpoints: Vec::new(),
                batch_size: 128,
            },
            quantize: QuantizeSection {
                method: Method::MedianCut,
                bits: 1,
            },
        }
    }
}

fn default_table() -> Table {
    let mut cfg = ExperimentConfig::default();
    if let Ok(root) = std::env::var(DATA_ROOT_ENV) {
        if !root.is_empty() {
            cfg.data_root = PathBuf::from(root);
        }
    }
    Table::try_from(&cfg).expect("defaults serialize")
}

/// All dotted keys of the defaults.
pub fn valid_keys() -> Vec<String> {
    fn walk(prefix: &str, t: &Table, out: &mut Vec<String>) {
        for (k, v) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                Value::Table(sub) => walk(&key, sub, out),
                _ => out.push(key),
            }
        }
    }
    let mut out = Vec::new();
    walk("", &default_table(), &mut out);
    out
}

fn unknown_key(key: &str) -> Error {
    Error::Config(format!("unknown key `{key}`; valid keys are:\n  {}", valid_keys().join("\n  ")))
}

fn is_tagged(t: &Table) -> bool {
    t.contains_key("kind") && !t.values().any(Value::is_table)
}

/// Merges `over` into `base`, rejecting keys `base` does not have.
fn merge(base: &mut Table, over: Table, prefix: &str) -> Result<()> {
    for (k, v) in over {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => {
                if is_tagged(b) && o.get("kind").is_some_and(|kind| Some(kind) != b.get("kind")) {
                    *b = o;
                } else {
                    merge(b, o, &key)?;
                }
            }
            (Some(slot), v) => *slot = v,
            (None, _) => return Err(unknown_key(&key)),
        }
    }
    Ok(())
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn apply_override(root: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let (parents, leaf) = match key.rsplit_once('.') {
        Some((p, l)) => (p.split('.').collect::<Vec<_>>(), l),
        None => (Vec::new(), key),
    };
    let mut table = root;
    for part in parents {
        table = match table.get_mut(part) {
            Some(Value::Table(sub)) => sub,
            _ => return Err(unknown_key(key)),
        };
    }
    if !table.contains_key(leaf) && !is_tagged(table) {
        return Err(unknown_key(key));
    }
    table.insert(leaf.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Defaults, then the file (if any), then the overrides in order.
    ///
    /// STL10 runs default to batch size 32 for both schedules unless the
    /// file or an override sets one.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let user = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
                    _ => Error::Io(e),
                })?;
                text.parse::<Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => Table::new(),
        };
        let layered = |base: Table| -> Result<Table> {
            let mut table = base;
            merge(&mut table, user.clone(), "")?;
            for o in overrides {
                apply_override(&mut table, o)?;
            }
            Ok(table)
        };
        let mut table = layered(default_table())?;
        let is_stl = table
            .get("dataset")
            .and_then(|d| d.get("name"))
            .and_then(Value::as_str)
            == Some(DatasetId::Stl10.as_str());
        if is_stl {
            let mut base = default_table();
            for section in ["classifier", "quantizer"] {
                base[section]["schedule"]["batch_size"] = Value::Integer(32);
            }
            table = layered(base)?;
        }
        let cfg: Self = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.classifier_train()?.schedule.validate()?;
        self.quantizer_train()?.validate()?;
        if self.evaluate.batch_size == 0 {
            return Err(Error::Config("evaluate.batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(SNAPSHOT_NAME);
        std::fs::write(&path, self.to_toml())?;
        Ok(path)
    }

    pub fn load_options(&self, test: bool) -> LoadOptions {
        let limit = if test { self.dataset.test_limit } else { self.dataset.train_limit };
        LoadOptions {
            voc_size: self.dataset.voc_size,
            limit: (limit > 0).then_some(limit),
            synthetic: self.dataset.synthetic.clone(),
        }
    }

    fn schedule(&self, s: &ScheduleSection) -> TrainSchedule {
        TrainSchedule {
            epochs: s.epochs,
            batch_size: s.batch_size,
            optimizer: SgdSpec {
                momentum: s.momentum,
                weight_decay: s.weight_decay,
            },
            lr_policy: s.lr_policy,
            seed: self.seed,
        }
    }

    pub fn classifier_train(&self) -> Result<ClassifierTrainConfig> {
        let c = &self.classifier;
        Ok(ClassifierTrainConfig {
            arch: c.arch,
            width: c.width,
            schedule: self.schedule(&c.schedule),
            augment: c.augment.clone(),
        })
    }

    pub fn quantizer_train(&self) -> Result<QuantizerTrainConfig> {
        let q = &self.quantizer;
        let schedule = self.schedule(&q.schedule);
        let b = &q.backbone;
        let mut backbone = BackboneConfig {
            kind: b.kind,
            levels: b.levels,
            base_channels: b.base_channels,
            bottleneck_dim: (b.bottleneck_dim > 0).then_some(b.bottleneck_dim),
            head_channels: b.head_channels,
        };
        let selector = match q.mode {
            Variant::ColorCnn => {
                backbone.head_channels = q.colors;
                backbone.bottleneck_dim = None;
                TaskSelector {
                    colors: vec![q.colors],
                    pace: 1,
                    seed: self.seed,
                }
            }
            Variant::ColorCnnPlus if !q.selector.colors.is_empty() => TaskSelector {
                colors: q.selector.colors.clone(),
                pace: q.selector.pace,
                seed: self.seed,
            },
            Variant::ColorCnnPlus => TaskSelector::from_bits(&q.selector.bits, q.selector.pace, self.seed)?,
        };
        Ok(QuantizerTrainConfig {
            quantizer: QuantNetConfig {
                variant: q.mode,
                backbone,
                top_k: if q.mode == Variant::ColorCnn { q.colors } else { q.top_k },
            },
            weights: q.weights,
            schedule,
            selector,
            jitter: q.jitter,
            std_scale: q.std_scale,
            pre_augment: q.pre_augment.clone(),
            post_augment: q.post_augment.clone(),
            sample_ratio: q.sample_ratio,
            distill: q.distill,
        })
    }

    pub fn classifier_checkpoint(&self) -> PathBuf {
        if self.classifier.checkpoint.as_os_str().is_empty() {
            self.output.join("classifier.ckpt")
        } else {
            self.classifier.checkpoint.clone()
        }
    }

    pub fn quantizer_checkpoint(&self) -> PathBuf {
        if self.quantizer.checkpoint.as_os_str().is_empty() {
            self.output.join("quantizer.ckpt")
        } else {
            self.quantizer.checkpoint.clone()
        }
    }
}
