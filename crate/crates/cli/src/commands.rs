use std::path::{Path, PathBuf};

use candle_core::Device;
use colorquant::data::{load_dataset, Dataset, Split};
use colorquant::eval::{evaluate_any, rate_accuracy_curve, EvalOptions, EvalRecord, Method, Quantizer};
use colorquant::training::{
    load_classifier, load_quantizer, train_classifier as fit_classifier, train_quantizer as fit_quantizer,
    RunControl, TrainedQuantizer,
};
use colorquant::{Error, Result, RgbImage};
use serde::Serialize;

use crate::config::ExperimentConfig;

fn dataset(cfg: &ExperimentConfig, split: Split) -> Result<Dataset> {
    let data = load_dataset(
        cfg.dataset.name,
        split,
        &cfg.data_root,
        &cfg.load_options(split == Split::Test),
    )?;
    log::info!("{} {split}: {} items", data.id, data.len());
    Ok(data)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Invariant(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn train_classifier(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<()> {
    let train = dataset(cfg, Split::Train)?;
    let test = dataset(cfg, Split::Test)?;
    let run = RunControl {
        checkpoint: cfg.output.join("classifier.ckpt"),
        metrics_csv: Some(cfg.output.join("classifier_metrics.csv")),
        resume: resume.map(Path::to_path_buf),
        stop_after_epochs: None,
    };
    let (trained, _) = fit_classifier(&train, &test, &cfg.classifier_train()?, &run, &Device::Cpu)?;
    write_json(&cfg.output.join("classifier.json"), &trained.meta)?;
    println!(
        "classifier {} test accuracy {:.2}% -> {}",
        trained.meta.spec.arch,
        trained.meta.test_accuracy,
        run.checkpoint.display()
    );
    Ok(())
}

pub fn train_quantizer(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<()> {
    let classifier = load_classifier(&cfg.classifier_checkpoint(), &Device::Cpu)?;
    let train = dataset(cfg, Split::Train)?;
    let run = RunControl {
        checkpoint: cfg.output.join("quantizer.ckpt"),
        metrics_csv: Some(cfg.output.join("quantizer_metrics.csv")),
        resume: resume.map(Path::to_path_buf),
        stop_after_epochs: None,
    };
    let (trained, _) = fit_quantizer(&train, &classifier, &cfg.quantizer_train()?, &run, &Device::Cpu)?;
    write_json(&cfg.output.join("quantizer.json"), &trained.meta)?;
    println!("quantizer {} -> {}", cfg.quantizer.mode, run.checkpoint.display());
    Ok(())
}

/// Checkpoints backing a learned method.
fn networks(cfg: &ExperimentConfig, method: Method) -> Result<Vec<TrainedQuantizer>> {
    let paths: Vec<PathBuf> = match method {
        Method::ColorCnn if !cfg.evaluate.colorcnn_checkpoints.is_empty() => cfg.evaluate.colorcnn_checkpoints.clone(),
        Method::ColorCnn | Method::ColorCnnPlus => vec![cfg.quantizer_checkpoint()],
        _ => return Ok(Vec::new()),
    };
    let nets = paths
        .iter()
        .map(|p| load_quantizer(p, &Device::Cpu))
        .collect::<Result<Vec<_>>>()?;
    for (net, path) in nets.iter().zip(&paths) {
        let found = net.meta.train.quantizer.variant.to_string();
        if found != method.as_str() {
            return Err(Error::Config(format!(
                "{} holds a {found} quantizer but the method is {method}",
                path.display()
            )));
        }
    }
    Ok(nets)
}

fn quantizer_for(method: Method, nets: &[TrainedQuantizer]) -> Quantizer<'_> {
    match method {
        Method::Identity => Quantizer::Identity,
        Method::MedianCut => Quantizer::MedianCut,
        Method::MedianCutDither => Quantizer::MedianCutDither,
        Method::Octree => Quantizer::Octree,
        Method::Jpeg => Quantizer::Jpeg,
        Method::ColorCnn | Method::ColorCnnPlus => Quantizer::NetPool(nets.iter().collect()),
    }
}

#[derive(Serialize)]
struct QuantizeReport {
    input: PathBuf,
    output: PathBuf,
    method: Method,
    bits: u32,
    colors: usize,
    bpp: f64,
    seed: u64,
}

pub fn quantize(cfg: &ExperimentConfig, inputs: &[PathBuf]) -> Result<()> {
    let method = cfg.quantize.method;
    let nets = networks(cfg, method)?;
    let quantizer = quantizer_for(method, &nets);
    let dir = cfg.output.join("quantized");
    std::fs::create_dir_all(&dir)?;
    let mut reports = Vec::new();
    for input in inputs {
        if !input.exists() {
            return Err(Error::MissingFile(input.clone()));
        }
        let image = RgbImage::load(input)?;
        let q = quantizer.apply(&[&image], cfg.quantize.bits)?.remove(0);
        let stem = input.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
        let output = match (&q.indexed, method) {
            (Some(ix), _) => {
                let path = dir.join(format!("{stem}.png"));
                std::fs::write(&path, colorquant::codec::encode_indexed_png(ix)?.bytes)?;
                path
            }
            (None, Method::Jpeg) => {
                let path = dir.join(format!("{stem}.jpg"));
                let quality = u8::try_from(cfg.quantize.bits).map_err(|_| Error::Config("JPEG quality".into()))?;
                std::fs::write(&path, colorquant::codec::jpeg_reference(&image, quality)?.bytes)?;
                path
            }
            (None, _) => {
                let path = dir.join(format!("{stem}.png"));
                q.image.save(&path)?;
                path
            }
        };
        println!("{} -> {} ({} colors, {:.4} bpp)", input.display(), output.display(), q.colors, q.bpp);
        reports.push(QuantizeReport {
            input: input.clone(),
            output,
            method,
            bits: cfg.quantize.bits,
            colors: q.colors,
            bpp: q.bpp,
            seed: cfg.seed,
        });
    }
    write_json(&cfg.output.join("quantize.json"), &reports)
}

fn eval_options(cfg: &ExperimentConfig) -> EvalOptions {
    EvalOptions {
        batch_size: cfg.evaluate.batch_size,
        seed: cfg.seed,
        classifier_label: None,
    }
}

pub fn evaluate(cfg: &ExperimentConfig) -> Result<()> {
    let classifier = load_classifier(&cfg.classifier_checkpoint(), &Device::Cpu)?;
    let test = dataset(cfg, Split::Test)?;
    let method = cfg.evaluate.method;
    let nets = networks(cfg, method)?;
    let record: EvalRecord = evaluate_any(
        &quantizer_for(method, &nets),
        &classifier,
        &test,
        cfg.evaluate.bits,
        &eval_options(cfg),
    )?;
    write_json(&cfg.output.join("evaluation.json"), &record)?;
    println!(
        "{} {}: accuracy {:.2}%{} bpp {:.4} colors {:.2} (classifier stored {:.2}%)",
        record.method,
        record.bits,
        record.accuracy,
        record.map.map_or(String::new(), |m| format!(" mAP {m:.2}%")),
        record.bpp,
        record.colors,
        classifier.meta.test_accuracy
    );
    Ok(())
}

pub fn curve(cfg: &ExperimentConfig) -> Result<()> {
    let classifier = load_classifier(&cfg.classifier_checkpoint(), &Device::Cpu)?;
    let test = dataset(cfg, Split::Test)?;
    let nets: Vec<(Method, Vec<TrainedQuantizer>)> = cfg
        .evaluate
        .methods
        .iter()
        .map(|&m| Ok((m, networks(cfg, m)?)))
        .collect::<Result<_>>()?;
    let methods: Vec<Quantizer> = nets.iter().map(|(m, n)| quantizer_for(*m, n)).collect();
    let out = rate_accuracy_curve(
        &methods,
        &test,
        &classifier,
        &cfg.evaluate.bit_range,
        &cfg.evaluate.jpeg_qualities,
        &eval_options(cfg),
        &cfg.output,
    )?;
    for f in &out.failures {
        eprintln!("row {} {} failed: {}", f.method, f.bits, f.error);
    }
    println!(
        "{} rows ({} failed) -> {}, {}, {}",
        out.records.len() + out.failures.len(),
        out.failures.len(),
        out.csv.display(),
        out.svg.display(),
        out.png.display()
    );
    Ok(())
}
