#![allow(dead_code)]

use std::path::Path;

use candle_core::Device;
use colorquant::data::{load_dataset, Dataset, DatasetId, LoadOptions, Split, SyntheticSpec};
use colorquant::nn::ClassifierArch;
use colorquant::quantnet::{BackboneConfig, QuantNetConfig};
use colorquant::training::{
    train_classifier, ClassifierTrainConfig, LrPolicy, QuantizerTrainConfig, RunControl, SgdSpec, TrainSchedule,
    TrainedClassifier,
};

pub fn synthetic(split: Split, per_class: usize) -> Dataset {
    let opts = LoadOptions {
        synthetic: SyntheticSpec {
            classes: 4,
            train_per_class: per_class,
            test_per_class: per_class / 2,
            size: 12,
            seed: 11,
        },
        ..LoadOptions::default()
    };
    load_dataset(DatasetId::Synthetic, split, Path::new("."), &opts).unwrap()
}

pub fn schedule(epochs: usize, batch_size: usize, policy: LrPolicy, seed: u64) -> TrainSchedule {
    TrainSchedule {
        epochs,
        batch_size,
        optimizer: SgdSpec::default(),
        lr_policy: policy,
        seed,
    }
}

pub fn small_classifier_config(epochs: usize, seed: u64) -> ClassifierTrainConfig {
    ClassifierTrainConfig::new(
        ClassifierArch::ResNet18,
        4,
        schedule(epochs, 16, LrPolicy::one_cycle(0.05), seed),
    )
}

pub fn trained_classifier(dir: &Path) -> TrainedClassifier {
    let train = synthetic(Split::Train, 16);
    let test = synthetic(Split::Test, 16);
    let run = RunControl {
        checkpoint: dir.join("classifier.ckpt"),
        ..RunControl::default()
    };
    train_classifier(&train, &test, &small_classifier_config(2, 3), &run, &Device::Cpu)
        .unwrap()
        .0
}

pub fn small_backbone(head: usize, bottleneck: Option<usize>) -> BackboneConfig {
    BackboneConfig {
        levels: 2,
        base_channels: 4,
        bottleneck_dim: bottleneck,
        head_channels: head,
        ..BackboneConfig::default()
    }
}

pub fn small_plus_config(epochs: usize, seed: u64) -> QuantizerTrainConfig {
    let mut cfg = QuantizerTrainConfig::colorcnn_plus(schedule(
        epochs,
        8,
        LrPolicy::cosine_warm_restart(0.01, 1.0),
        seed,
    ));
    cfg.quantizer = QuantNetConfig {
        backbone: small_backbone(16, Some(4)),
        ..QuantNetConfig::colorcnn_plus()
    };
    cfg.selector = colorquant::training::TaskSelector::from_bits(&[1, 2, 3, 4], 2, seed).unwrap();
    cfg
}

pub fn small_colorcnn_config(colors: usize, epochs: usize, seed: u64) -> QuantizerTrainConfig {
    let mut cfg = QuantizerTrainConfig::colorcnn(colors, schedule(epochs, 8, LrPolicy::Constant { lr: 0.01 }, seed));
    cfg.quantizer.backbone = small_backbone(colors, None);
    cfg
}
