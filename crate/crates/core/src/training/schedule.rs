use std::f64::consts::PI;

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrPolicy {
    /// Cosine warm-up from `peak / div_factor` to `peak` over the first
    /// `pct_start` of all steps, then cosine decay to
    /// `peak / (div_factor * final_div_factor)`.
    OneCycle {
        peak: f64,
        pct_start: f64,
        div_factor: f64,
        final_div_factor: f64,
    },
    /// Cosine decay from `peak` to `min` that restarts every
    /// `period_epochs`; fractional epochs advance it per batch.
    CosineWarmRestart { peak: f64, min: f64, period_epochs: f64 },
    Constant { lr: f64 },
}

impl LrPolicy {
    pub fn one_cycle(peak: f64) -> Self {
        LrPolicy::OneCycle {
            peak,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }

    pub fn cosine_warm_restart(peak: f64, period_epochs: f64) -> Self {
        LrPolicy::CosineWarmRestart {
            peak,
            min: 0.0,
            period_epochs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdSpec {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdSpec {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: SgdSpec,
    pub lr_policy: LrPolicy,
    pub seed: u64,
}

fn cos_interp(from: f64, to: f64, frac: f64) -> f64 {
    to + (from - to) / 2.0 * (1.0 + (PI * frac.clamp(0.0, 1.0)).cos())
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be at least 1"));
        }
        let sgd = &self.optimizer;
        if !(0.0..1.0).contains(&sgd.momentum) || !(sgd.weight_decay >= 0.0) {
            return Err(Error::config("momentum must lie in [0, 1) and weight_decay be >= 0"));
        }
        let ok = match self.lr_policy {
            LrPolicy::OneCycle {
                peak,
                pct_start,
                div_factor,
                final_div_factor,
            } => peak > 0.0 && pct_start > 0.0 && pct_start < 1.0 && div_factor >= 1.0 && final_div_factor >= 1.0,
            LrPolicy::CosineWarmRestart {
                peak,
                min,
                period_epochs,
            } => peak > 0.0 && (0.0..=peak).contains(&min) && period_epochs > 0.0,
            LrPolicy::Constant { lr } => lr > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid learning-rate policy {:?}", self.lr_policy)))
        }
    }

    /// Learning rate for global step `step` (0-based).
    pub fn lr_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let steps_per_epoch = steps_per_epoch.max(1);
        match self.lr_policy {
            LrPolicy::OneCycle {
                peak,
                pct_start,
                div_factor,
                final_div_factor,
            } => {
                let total = (self.epochs * steps_per_epoch) as f64;
                let initial = peak / div_factor;
                let last = initial / final_div_factor;
                let warm_end = pct_start * total - 1.0;
                let s = step as f64;
                if s <= warm_end {
                    cos_interp(initial, peak, s / warm_end.max(1.0))
                } else {
                    cos_interp(peak, last, (s - warm_end) / (total - 1.0 - warm_end).max(1.0))
                }
            }
            LrPolicy::CosineWarmRestart {
                peak,
                min,
                period_epochs,
            } => {
                let epochs = step as f64 / steps_per_epoch as f64;
                let frac = (epochs % period_epochs) / period_epochs;
                cos_interp(peak, min, frac)
            }
            LrPolicy::Constant { lr } => lr,
        }
    }
}

/// Chooses the color count for each training batch. The choice is constant
/// within blocks of `pace` consecutive batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSelector {
    /// Candidate color counts, drawn uniformly per block.
    pub colors: Vec<usize>,
    pub pace: usize,
    pub seed: u64,
}

impl TaskSelector {
    pub fn from_bits(bits: &[u32], pace: usize, seed: u64) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b == 0 || b > 8) {
            return Err(Error::config(format!("bit depth {b} outside 1..=8")));
        }
        let sel = Self {
            colors: bits.iter().map(|&b| 1usize << b).collect(),
            pace,
            seed,
        };
        sel.validate()?;
        Ok(sel)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pace == 0 || self.colors.is_empty() || self.colors.contains(&0) {
            return Err(Error::config("task selector needs pace >= 1 and a non-empty set of positive color counts"));
        }
        Ok(())
    }

    pub fn select_colors(&self, batch_index: usize) -> usize {
        let block = (batch_index / self.pace.max(1)) as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "task", block));
        self.colors[rng.random_range(0..self.colors.len())]
    }
}

/// `x + xi * n` with `n` standard normal per element; `xi = 0` returns `x`
/// unchanged.
pub fn apply_color_jitter(x: &Tensor, xi: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if xi < 0.0 {
        return Err(Error::config(format!("jitter scale {xi} must be >= 0")));
    }
    if xi == 0.0 {
        return Ok(x.clone());
    }
    let noise: Vec<f64> = (0..x.elem_count())
        .map(|_| rng.sample::<f64, _>(StandardNormal) * xi)
        .collect();
    let noise = Tensor::from_vec(noise, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x + noise)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn schedule(policy: LrPolicy, epochs: usize) -> TrainSchedule {
        TrainSchedule {
            epochs,
            batch_size: 8,
            optimizer: SgdSpec::default(),
            lr_policy: policy,
            seed: 0,
        }
    }

    #[test]
    fn one_cycle_shape() {
        let s = schedule(LrPolicy::one_cycle(0.1), 10);
        let spe = 100;
        assert!((s.lr_at(0, spe) - 0.1 / 25.0).abs() < 1e-15);
        assert!((s.lr_at(299, spe) - 0.1).abs() < 1e-15);
        let last = s.lr_at(999, spe);
        assert!((last - 0.1 / 25.0 / 1e4).abs() < 1e-15, "{last}");
        let trace: Vec<f64> = (0..1000).map(|i| s.lr_at(i, spe)).collect();
        assert!(trace[..300].windows(2).all(|w| w[0] <= w[1]));
        assert!(trace[299..].windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn warm_restart_period() {
        let s = schedule(LrPolicy::cosine_warm_restart(0.01, 20.0), 60);
        let spe = 10;
        assert_eq!(s.lr_at(0, spe), 0.01);
        assert!((s.lr_at(100, spe) - 0.005).abs() < 1e-15);
        assert!(s.lr_at(199, spe) < 1e-5);
        assert_eq!(s.lr_at(200, spe), 0.01);
        assert_eq!(s.lr_at(450, spe), s.lr_at(50, spe));
    }

    #[test]
    fn invalid_schedules() {
        assert!(schedule(LrPolicy::one_cycle(0.0), 1).validate().is_err());
        assert!(schedule(LrPolicy::one_cycle(0.1), 0).validate().is_err());
        assert!(schedule(LrPolicy::cosine_warm_restart(0.01, 20.0), 1).validate().is_ok());
    }

    #[test]
    fn task_blocks_are_constant() {
        let sel = TaskSelector::from_bits(&[1, 2, 3, 4, 5, 6], 20, 9).unwrap();
        let first = sel.select_colors(0);
        assert!((0..20).all(|i| sel.select_colors(i) == first));
        let blocks: Vec<usize> = (0..50).map(|b| sel.select_colors(b * 20)).collect();
        assert!(blocks.iter().any(|&c| c != first));
        let again = TaskSelector::from_bits(&[1, 2, 3, 4, 5, 6], 20, 9).unwrap();
        assert!((0..1000).all(|i| sel.select_colors(i) == again.select_colors(i)));
    }

    #[test]
    fn single_choice_is_constant() {
        let sel = TaskSelector::from_bits(&[3], 1, 0).unwrap();
        assert!((0..100).all(|i| sel.select_colors(i) == 8));
        assert!(TaskSelector::from_bits(&[], 20, 0).is_err());
        assert!(TaskSelector::from_bits(&[2], 0, 0).is_err());
    }

    #[test]
    fn task_frequencies_are_uniform() {
        let sel = TaskSelector::from_bits(&[1, 2, 3, 4, 5, 6], 20, 1).unwrap();
        let mut counts = [0usize; 7];
        for block in 0..6000 {
            counts[sel.select_colors(block * 20).trailing_zeros() as usize] += 1;
        }
        for &c in &counts[1..] {
            let f = c as f64 / 6000.0;
            assert!((f - 1.0 / 6.0).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn jitter_statistics() {
        let x = Tensor::full(0.25f64, (4, 3, 50, 50), &Device::Cpu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let same = apply_color_jitter(&x, 0.0, &mut rng).unwrap();
        assert_eq!(
            crate::batch::to_f64_vec(&same).unwrap(),
            crate::batch::to_f64_vec(&x).unwrap()
        );
        let y = apply_color_jitter(&x, 1.0, &mut rng).unwrap();
        let d: Vec<f64> = (y - &x)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 1.0).abs() < 0.05, "{var}");
        assert!(mean.abs() < 3.0 / n.sqrt(), "{mean}");
        assert!(apply_color_jitter(&x.to_dtype(DType::F32).unwrap(), -1.0, &mut rng).is_err());
    }
}
