//! Classifier pretraining and quantizer training.
//!
//! Every random draw comes from a generator seeded by [`derive_seed`] with
//! the run seed, a purpose tag and the epoch, so a run resumed from an
//! epoch checkpoint replays exactly the draws of an uninterrupted run.

mod checkpoint;
mod classifier;
mod quantizer;
pub mod schedule;

pub use checkpoint::{Checkpoint, CheckpointKind, CHECKPOINT_VERSION};
pub use classifier::{load_classifier, train_classifier, ClassifierMeta, ClassifierTrainConfig, ClassifierTrainer, TrainedClassifier};
pub use quantizer::{
    load_quantizer, train_quantizer, QuantizerMeta, QuantizerTrainConfig, QuantizerTrainer, TrainedQuantizer,
};
pub use schedule::{apply_color_jitter, LrPolicy, SgdSpec, TaskSelector, TrainSchedule};

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Independent 64-bit seed for `(seed, tag, index)`.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

pub(crate) fn rng_for(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, index))
}

/// Where a training run writes, and how much of the schedule it executes.
#[derive(Debug, Clone, Default)]
pub struct RunControl {
    /// Written atomically at the end of every epoch.
    pub checkpoint: PathBuf,
    /// Per-epoch metrics, appended.
    pub metrics_csv: Option<PathBuf>,
    /// Continue from this checkpoint's recorded epoch and step.
    pub resume: Option<PathBuf>,
    /// Stop after this many completed epochs (counted from epoch 0).
    pub stop_after_epochs: Option<usize>,
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub rp: f64,
    pub reg: f64,
    /// Percent.
    pub train_accuracy: f64,
    /// Percent; absent when the run has no test split.
    pub test_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    /// Learning rate used at each executed step.
    pub lr_trace: Vec<f64>,
    /// Total loss at each executed step.
    pub loss_trace: Vec<f64>,
}

pub(crate) fn append_metrics(path: &Path, row: &EpochMetrics) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(row)?;
    w.flush()?;
    Ok(())
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Running means of the loss components over an epoch.
#[derive(Default)]
pub(crate) struct EpochAccumulator {
    n: usize,
    loss: f64,
    ce: f64,
    rp: f64,
    reg: f64,
    correct: f64,
    seen: usize,
}

impl EpochAccumulator {
    pub(crate) fn add(&mut self, b: &crate::losses::LossBreakdown, correct: f64, seen: usize) {
        self.n += 1;
        self.loss += b.total;
        self.ce += b.ce;
        self.rp += b.rp;
        self.reg += b.reg;
        self.correct += correct;
        self.seen += seen;
    }

    pub(crate) fn finish(&self, epoch: usize, step: usize, lr: f64, test: Option<f64>, seconds: f64) -> EpochMetrics {
        let n = self.n.max(1) as f64;
        EpochMetrics {
            epoch,
            step,
            lr,
            loss: self.loss / n,
            ce: self.ce / n,
            rp: self.rp / n,
            reg: self.reg / n,
            train_accuracy: 100.0 * self.correct / self.seen.max(1) as f64,
            test_accuracy: test,
            seconds,
        }
    }
}

pub(crate) fn check_resume_schedule(path: &Path, stored: &TrainSchedule, current: &TrainSchedule) -> Result<()> {
    if stored != current {
        return Err(Error::config(format!(
            "{} was trained with schedule {stored:?}; resuming needs the same schedule, got {current:?}",
            path.display()
        )));
    }
    Ok(())
}
