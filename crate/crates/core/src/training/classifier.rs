use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use super::{
    append_metrics, check_resume_schedule, rng_for, scalar, Checkpoint, CheckpointKind, EpochAccumulator, RunControl,
    TrainReport, TrainSchedule,
};
use crate::batch::images_to_tensor;
use crate::data::{compute_norm_stats, shuffled_batches, AugmentSpec, Augmenter, Dataset, DatasetId, NormStats, Stage};
use crate::error::{Error, Result};
use crate::eval::{count_correct, dataset_accuracy};
use crate::losses::{classification_loss, LossBreakdown};
use crate::nn::{Classifier, ClassifierArch, ClassifierSpec, ParamStore, Sgd};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub arch: ClassifierArch,
    pub width: usize,
    pub schedule: TrainSchedule,
    pub augment: AugmentSpec,
}

impl ClassifierTrainConfig {
    pub fn new(arch: ClassifierArch, width: usize, schedule: TrainSchedule) -> Self {
        Self {
            arch,
            width,
            schedule,
            augment: AugmentSpec::crop_flip(Stage::Pre),
        }
    }
}

/// Everything needed to rebuild and use a trained classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMeta {
    pub spec: ClassifierSpec,
    pub dataset: DatasetId,
    /// Statistics of the training split, `std_scale = 1`.
    pub norm: NormStats,
    /// Percent on the test split after the last completed epoch.
    pub test_accuracy: f64,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub schedule: TrainSchedule,
    pub augment: AugmentSpec,
    /// Parameter checksum at save time.
    pub checksum: String,
}

pub struct TrainedClassifier {
    pub classifier: Classifier,
    pub meta: ClassifierMeta,
}

pub fn load_classifier(path: &Path, device: &Device) -> Result<TrainedClassifier> {
    let ck = Checkpoint::load(path, CheckpointKind::Classifier, device)?;
    let meta: ClassifierMeta = ck.header_as(path)?;
    let classifier = Classifier::new(meta.spec, ParamStore::new(0, DType::F32, device))?;
    ck.restore_into(classifier.params(), path)?;
    let sum = classifier.params().checksum()?;
    if sum != meta.checksum {
        return Err(Error::CheckpointFormat {
            path: path.to_path_buf(),
            reason: format!("parameter checksum {sum} does not match recorded {}", meta.checksum),
        });
    }
    Ok(TrainedClassifier { classifier, meta })
}

/// Owns the model and optimizer of one classifier run.
pub struct ClassifierTrainer {
    classifier: Classifier,
    sgd: Sgd,
    augmenter: Augmenter,
    norm: NormStats,
    config: ClassifierTrainConfig,
}

impl ClassifierTrainer {
    pub fn new(config: ClassifierTrainConfig, train: &Dataset, device: &Device) -> Result<Self> {
        config.schedule.validate()?;
        if train.is_empty() {
            return Err(Error::config("training split is empty"));
        }
        let spec = ClassifierSpec {
            arch: config.arch,
            num_classes: train.num_classes,
            width: config.width,
            multilabel: train.multilabel(),
        };
        let store = ParamStore::new(super::derive_seed(config.schedule.seed, "init", 0), DType::F32, device);
        let classifier = Classifier::new(spec, store)?;
        let opt = config.schedule.optimizer;
        let sgd = Sgd::new(classifier.params().trainable_vars(), opt.momentum, opt.weight_decay);
        Ok(Self {
            classifier,
            sgd,
            augmenter: Augmenter::new(config.augment.clone())?,
            norm: compute_norm_stats(&train.items)?,
            config,
        })
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    /// One optimizer step on the items at `idx`. Returns the loss and the
    /// number of correct training predictions.
    pub fn step(
        &mut self,
        data: &Dataset,
        idx: &[usize],
        lr: f64,
        rng: &mut impl rand::Rng,
    ) -> Result<(LossBreakdown, f64)> {
        let (images, targets) = data.gather(idx);
        let x = images_to_tensor(&images, DType::F32, self.classifier.params().device())?;
        let x = self.augmenter.apply_random(&x, rng)?;
        let logits = self.classifier.forward(&self.norm.normalize(&x)?, true)?;
        let loss = classification_loss(&logits, &targets)?;
        let v = scalar(&loss)?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                component: "classification".into(),
                value: v,
            });
        }
        let grads = loss.backward()?;
        self.sgd.step(&grads, lr)?;
        let correct = count_correct(&logits, &targets)?;
        Ok((
            LossBreakdown {
                total: v,
                ce: v,
                rp: 0.0,
                reg: 0.0,
            },
            correct,
        ))
    }

    fn checkpoint(&self, dataset: DatasetId, test_accuracy: f64, epoch: usize, step: usize) -> Result<Checkpoint> {
        let meta = ClassifierMeta {
            spec: *self.classifier.spec(),
            dataset,
            norm: self.norm,
            test_accuracy,
            epoch,
            step,
            schedule: self.config.schedule,
            augment: self.config.augment.clone(),
            checksum: self.classifier.params().checksum()?,
        };
        Checkpoint::new(CheckpointKind::Classifier, &meta, self.classifier.params(), self.sgd.state())
    }
}

/// Trains from scratch (or from `run.resume`), evaluating on `test` and
/// checkpointing after every epoch. On a non-finite loss the error is
/// returned and the checkpoint file holds the last completed epoch.
pub fn train_classifier(
    train: &Dataset,
    test: &Dataset,
    config: &ClassifierTrainConfig,
    run: &RunControl,
    device: &Device,
) -> Result<(TrainedClassifier, TrainReport)> {
    let mut trainer = ClassifierTrainer::new(config.clone(), train, device)?;
    let schedule = config.schedule;
    let (mut epoch, mut step, mut test_accuracy) = (0, 0, 0.0);
    if let Some(path) = &run.resume {
        let ck = Checkpoint::load(path, CheckpointKind::Classifier, device)?;
        let meta: ClassifierMeta = ck.header_as(path)?;
        check_resume_schedule(path, &meta.schedule, &schedule)?;
        ck.restore_into(trainer.classifier.params(), path)?;
        trainer.sgd.load_state(&ck.buffers);
        trainer.norm = meta.norm;
        (epoch, step, test_accuracy) = (meta.epoch, meta.step, meta.test_accuracy);
    } else {
        trainer.checkpoint(train.id, 0.0, 0, 0)?.save(&run.checkpoint)?;
    }
    let steps_per_epoch = train.len().div_ceil(schedule.batch_size);
    let last = run.stop_after_epochs.map_or(schedule.epochs, |s| s.min(schedule.epochs));
    let mut report = TrainReport::default();
    while epoch < last {
        let started = Instant::now();
        let mut shuffle = rng_for(schedule.seed, "shuffle", epoch as u64);
        let mut aug = rng_for(schedule.seed, "augment", epoch as u64);
        let mut acc = EpochAccumulator::default();
        let mut lr = 0.0;
        for idx in shuffled_batches(train.len(), schedule.batch_size, &mut shuffle) {
            lr = schedule.lr_at(step, steps_per_epoch);
            let (b, correct) = trainer.step(train, &idx, lr, &mut aug)?;
            report.lr_trace.push(lr);
            report.loss_trace.push(b.total);
            acc.add(&b, correct, idx.len());
            step += 1;
        }
        epoch += 1;
        test_accuracy = dataset_accuracy(&trainer.classifier, test, &trainer.norm, schedule.batch_size)?;
        let row = acc.finish(epoch, step, lr, Some(test_accuracy), started.elapsed().as_secs_f64());
        log::info!(
            "classifier epoch {epoch}/{}: loss {:.4} train {:.2}% test {:.2}%",
            schedule.epochs,
            row.loss,
            row.train_accuracy,
            test_accuracy
        );
        trainer.checkpoint(train.id, test_accuracy, epoch, step)?.save(&run.checkpoint)?;
        if let Some(csv) = &run.metrics_csv {
            append_metrics(csv, &row)?;
        }
        report.epochs.push(row);
    }
    let meta = ClassifierMeta {
        spec: *trainer.classifier.spec(),
        dataset: train.id,
        norm: trainer.norm,
        test_accuracy,
        epoch,
        step,
        schedule,
        augment: config.augment.clone(),
        checksum: trainer.classifier.params().checksum()?,
    };
    Ok((
        TrainedClassifier {
            classifier: trainer.classifier,
            meta,
        },
        report,
    ))
}
