use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    append_metrics, apply_color_jitter, check_resume_schedule, derive_seed, rng_for, Checkpoint, CheckpointKind,
    EpochAccumulator, RunControl, TaskSelector, TrainReport, TrainSchedule, TrainedClassifier,
};
use crate::batch::{images_to_tensor, tensor_to_images};
use crate::classic::{median_cut, to_hard_assignment, HardAssignment};
use crate::data::{shuffled_batches, AugmentSpec, Augmenter, Dataset, DatasetId, NormStats, Stage};
use crate::error::{Error, Result};
use crate::eval::count_correct;
use crate::losses::{
    assignments_to_tensor, classification_loss, combined_regularizer, kd_loss, relationship_loss, total_loss,
    LossBreakdown, LossWeights, PixelSample,
};
use crate::nn::{ParamStore, Sgd};
use crate::quantnet::{QuantNet, QuantNetConfig, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerTrainConfig {
    pub quantizer: QuantNetConfig,
    pub weights: LossWeights,
    pub schedule: TrainSchedule,
    /// Color count per batch. ColorCNN needs the single value equal to its
    /// head width.
    pub selector: TaskSelector,
    /// Jitter scale; 0 disables jitter.
    pub jitter: f64,
    /// Multiplier on the classifier's normalization std during training.
    pub std_scale: f64,
    /// Applied to dataset images before the quantizer.
    pub pre_augment: AugmentSpec,
    /// Applied to the quantizer output before the classifier.
    pub post_augment: AugmentSpec,
    /// Fraction of pixels sampled for the relationship loss.
    pub sample_ratio: f64,
    /// Replace the label loss with distillation from the classifier's
    /// prediction on the unquantized image.
    pub distill: bool,
}

impl QuantizerTrainConfig {
    /// ColorCNN+ defaults with bit depths 1 to 6.
    pub fn colorcnn_plus(schedule: TrainSchedule) -> Self {
        Self {
            quantizer: QuantNetConfig::colorcnn_plus(),
            weights: LossWeights::default(),
            selector: TaskSelector::from_bits(&[1, 2, 3, 4, 5, 6], 20, schedule.seed).expect("valid bits"),
            schedule,
            jitter: 1.0,
            std_scale: 4.0,
            pre_augment: AugmentSpec::flip_only(Stage::Pre),
            post_augment: AugmentSpec::full(Stage::Post),
            sample_ratio: 0.3,
            distill: false,
        }
    }

    /// ColorCNN with a fixed color count.
    pub fn colorcnn(colors: usize, schedule: TrainSchedule) -> Self {
        Self {
            quantizer: QuantNetConfig::colorcnn(colors),
            weights: LossWeights {
                lambda: 0.0,
                ..LossWeights::default()
            },
            selector: TaskSelector {
                colors: vec![colors],
                pace: 1,
                seed: schedule.seed,
            },
            ..Self::colorcnn_plus(schedule)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.quantizer.validate()?;
        self.weights.validate()?;
        self.schedule.validate()?;
        self.selector.validate()?;
        self.pre_augment.validate()?;
        self.post_augment.validate()?;
        if !(self.jitter >= 0.0) {
            return Err(Error::config(format!("jitter {} must be >= 0", self.jitter)));
        }
        if !(self.std_scale > 0.0) {
            return Err(Error::config(format!("std_scale {} must be > 0", self.std_scale)));
        }
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            return Err(Error::config(format!("sample_ratio {} outside (0, 1]", self.sample_ratio)));
        }
        let d = self.quantizer.backbone.head_channels;
        match self.quantizer.variant {
            Variant::ColorCnn if self.selector.colors != [d] => Err(Error::config(format!(
                "ColorCNN trains one color count equal to head_channels = {d}; selector has {:?}",
                self.selector.colors
            ))),
            Variant::ColorCnnPlus if self.selector.colors.iter().any(|&c| c > d) => Err(Error::config(format!(
                "selector colors {:?} exceed head_channels = {d}",
                self.selector.colors
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerMeta {
    pub train: QuantizerTrainConfig,
    pub dataset: DatasetId,
    /// Checksum of the frozen classifier the quantizer was trained against.
    pub classifier_checksum: String,
    /// The classifier's statistics, `std_scale = 1`.
    pub classifier_norm: NormStats,
    pub epoch: usize,
    pub step: usize,
    pub checksum: String,
}

pub struct TrainedQuantizer {
    pub net: QuantNet,
    pub meta: QuantizerMeta,
}

pub fn load_quantizer(path: &Path, device: &Device) -> Result<TrainedQuantizer> {
    let ck = Checkpoint::load(path, CheckpointKind::Quantizer, device)?;
    let meta: QuantizerMeta = ck.header_as(path)?;
    let net = QuantNet::new(meta.train.quantizer.clone(), ParamStore::new(0, DType::F32, device))?;
    ck.restore_into(net.params(), path)?;
    Ok(TrainedQuantizer { net, meta })
}

/// Owns the quantizer and its optimizer; borrows the frozen classifier.
pub struct QuantizerTrainer<'a> {
    net: QuantNet,
    classifier: &'a TrainedClassifier,
    sgd: Sgd,
    pre: Augmenter,
    post: Augmenter,
    train_norm: NormStats,
    /// MedianCut targets by `(item, colors, flipped)`.
    targets: HashMap<(usize, usize, bool), HardAssignment>,
    cacheable: bool,
    config: QuantizerTrainConfig,
}

impl<'a> QuantizerTrainer<'a> {
    pub fn new(config: QuantizerTrainConfig, classifier: &'a TrainedClassifier, device: &Device) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(derive_seed(config.schedule.seed, "init", 0), DType::F32, device);
        let net = QuantNet::new(config.quantizer.clone(), store)?;
        let opt = config.schedule.optimizer;
        let sgd = Sgd::new(net.params().trainable_vars(), opt.momentum, opt.weight_decay);
        let p = &config.pre_augment;
        Ok(Self {
            sgd,
            pre: Augmenter::new(config.pre_augment.clone())?,
            post: Augmenter::new(config.post_augment.clone())?,
            train_norm: classifier.meta.norm.with_scale(config.std_scale),
            targets: HashMap::new(),
            cacheable: p.crop_padding == 0 && p.erase_prob == 0.0 && p.rotate_degrees == 0.0,
            net,
            classifier,
            config,
        })
    }

    pub fn net(&self) -> &QuantNet {
        &self.net
    }

    /// Color count used at global step `step`.
    pub fn colors_at(&self, step: usize) -> usize {
        match self.config.quantizer.variant {
            Variant::ColorCnn => self.config.quantizer.backbone.head_channels,
            Variant::ColorCnnPlus => self.config.selector.select_colors(step),
        }
    }

    fn median_cut_targets(
        &mut self,
        idx: &[usize],
        images: &[crate::imaging::RgbImage],
        flips: &[bool],
        colors: usize,
    ) -> Result<Vec<HardAssignment>> {
        let mut out = Vec::with_capacity(idx.len());
        for ((&i, img), &flip) in idx.iter().zip(images).zip(flips) {
            let key = (i, colors, flip);
            if let Some(t) = self.cacheable.then(|| self.targets.get(&key)).flatten() {
                out.push(t.clone());
                continue;
            }
            let t = to_hard_assignment(&median_cut(img, colors), colors)?;
            if self.cacheable {
                self.targets.insert(key, t.clone());
            }
            out.push(t);
        }
        Ok(out)
    }

    /// One optimizer step on the items at `idx` at global step `step`.
    /// Returns the loss and the number of correct classifier predictions.
    pub fn step(
        &mut self,
        data: &Dataset,
        idx: &[usize],
        step: usize,
        lr: f64,
        rng: &mut impl Rng,
    ) -> Result<(LossBreakdown, f64)> {
        let device = self.net.params().device().clone();
        let colors = self.colors_at(step);
        let (images, labels) = data.gather(idx);
        let x = images_to_tensor(&images, DType::F32, &device)?;
        let (_, _, h, w) = x.dims4()?;
        let params: Vec<_> = (0..idx.len()).map(|_| self.pre.sample(w, h, rng)).collect();
        let x = self.pre.apply(&x, &params)?;

        let out = self.net.forward_train(&x, colors)?;
        let w8 = self.config.weights;
        let rp = if self.config.quantizer.variant == Variant::ColorCnnPlus && w8.lambda > 0.0 {
            let shown = tensor_to_images(&x)?;
            let flips: Vec<bool> = params.iter().map(|p| p.flip).collect();
            let targets = self.median_cut_targets(idx, &shown, &flips, colors)?;
            let target = assignments_to_tensor(&targets, DType::F32, &device)?;
            let sample = PixelSample::draw(h, w, self.config.sample_ratio, rng)?;
            Some(relationship_loss(&out.prob_map, &target, &sample)?)
        } else {
            None
        };

        let z = classifier_input(&out.soft_image, &self.train_norm, self.config.jitter, &self.post, rng)?;
        let classifier = &self.classifier.classifier;
        let logits = classifier.forward(&z, false)?;
        let ce = if self.config.distill {
            let teacher = classifier.forward(&self.classifier.meta.norm.normalize(&x)?, false)?;
            kd_loss(&logits, &teacher)?
        } else {
            classification_loss(&logits, &labels)?
        };
        let reg = combined_regularizer(&out.prob_map, &w8, self.config.quantizer.variant)?;
        let (total, breakdown) = total_loss(&ce, rp.as_ref(), &reg, &w8)?;
        let grads = total.backward()?;
        self.sgd.step(&grads, lr)?;
        Ok((breakdown, count_correct(&logits, &labels)?))
    }

    fn checkpoint(&self, dataset: DatasetId, epoch: usize, step: usize) -> Result<Checkpoint> {
        Checkpoint::new(
            CheckpointKind::Quantizer,
            &self.meta(dataset, epoch, step)?,
            self.net.params(),
            self.sgd.state(),
        )
    }

    fn meta(&self, dataset: DatasetId, epoch: usize, step: usize) -> Result<QuantizerMeta> {
        Ok(QuantizerMeta {
            train: self.config.clone(),
            dataset,
            classifier_checksum: self.classifier.meta.checksum.clone(),
            classifier_norm: self.classifier.meta.norm,
            epoch,
            step,
            checksum: self.net.params().checksum()?,
        })
    }
}

/// Trains a quantizer against a frozen classifier, checkpointing after
/// every epoch. The classifier's parameters are checksummed before and
/// after; any change is an invariant violation.
pub fn train_quantizer(
    train: &Dataset,
    classifier: &TrainedClassifier,
    config: &QuantizerTrainConfig,
    run: &RunControl,
    device: &Device,
) -> Result<(TrainedQuantizer, TrainReport)> {
    let frozen = classifier.classifier.params().checksum()?;
    if frozen != classifier.meta.checksum {
        return Err(Error::Invariant("classifier parameters differ from their checkpoint".into()));
    }
    if classifier.meta.spec.num_classes != train.num_classes {
        return Err(Error::config(format!(
            "classifier predicts {} classes but {} has {}",
            classifier.meta.spec.num_classes, train.id, train.num_classes
        )));
    }
    let mut trainer = QuantizerTrainer::new(config.clone(), classifier, device)?;
    let schedule = config.schedule;
    let (mut epoch, mut step) = (0, 0);
    if let Some(path) = &run.resume {
        let ck = Checkpoint::load(path, CheckpointKind::Quantizer, device)?;
        let meta: QuantizerMeta = ck.header_as(path)?;
        check_resume_schedule(path, &meta.train.schedule, &schedule)?;
        if meta.classifier_checksum != frozen {
            return Err(Error::config(format!(
                "{} was trained against a different classifier",
                path.display()
            )));
        }
        ck.restore_into(trainer.net.params(), path)?;
        trainer.sgd.load_state(&ck.buffers);
        (epoch, step) = (meta.epoch, meta.step);
    } else {
        trainer.checkpoint(train.id, 0, 0)?.save(&run.checkpoint)?;
    }
    let steps_per_epoch = train.len().div_ceil(schedule.batch_size);
    let last = run.stop_after_epochs.map_or(schedule.epochs, |s| s.min(schedule.epochs));
    let mut report = TrainReport::default();
    while epoch < last {
        let started = Instant::now();
        let mut shuffle = rng_for(schedule.seed, "shuffle", epoch as u64);
        let mut rng = rng_for(schedule.seed, "augment", epoch as u64);
        let mut acc = EpochAccumulator::default();
        let mut lr = 0.0;
        for idx in shuffled_batches(train.len(), schedule.batch_size, &mut shuffle) {
            lr = schedule.lr_at(step, steps_per_epoch);
            let (b, correct) = trainer.step(train, &idx, step, lr, &mut rng)?;
            report.lr_trace.push(lr);
            report.loss_trace.push(b.total);
            acc.add(&b, correct, idx.len());
            step += 1;
        }
        epoch += 1;
        let row = acc.finish(epoch, step, lr, None, started.elapsed().as_secs_f64());
        log::info!(
            "quantizer epoch {epoch}/{}: loss {:.4} (ce {:.4} rp {:.4} reg {:.4}) train {:.2}%",
            schedule.epochs,
            row.loss,
            row.ce,
            row.rp,
            row.reg,
            row.train_accuracy
        );
        trainer.checkpoint(train.id, epoch, step)?.save(&run.checkpoint)?;
        if let Some(csv) = &run.metrics_csv {
            append_metrics(csv, &row)?;
        }
        report.epochs.push(row);
    }
    if classifier.classifier.params().checksum()? != frozen {
        return Err(Error::Invariant("classifier parameters changed during quantizer training".into()));
    }
    let meta = trainer.meta(train.id, epoch, step)?;
    Ok((TrainedQuantizer { net: trainer.net, meta }, report))
}

/// Normalized with the scaled std, jittered, then augmented.
fn classifier_input(
    soft_image: &Tensor,
    norm: &NormStats,
    jitter: f64,
    post: &Augmenter,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let z = apply_color_jitter(&norm.normalize(soft_image)?, jitter, rng)?;
    post.apply_random(&z, rng)
}
