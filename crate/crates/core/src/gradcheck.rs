//! Central finite-difference check of autograd gradients.
//!
//! Intended for `f64` variables: the default step of `1e-4` leaves a
//! truncation error near `1e-8` and a rounding error near `1e-12`.

use candle_core::{DType, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates probed per variable; smaller variables are probed fully.
    pub coords_per_var: usize,
    /// Denominator floor for the relative error, so that gradients which
    /// are both numerically zero compare equal.
    pub scale_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            coords_per_var: 6,
            scale_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub var: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<GradMismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= rel_tol
    }
}

/// Compares `d f / d var` from backprop with `(f(v+h) - f(v-h)) / 2h` at
/// sampled coordinates. `f` must return a scalar and is re-evaluated for
/// every probe.
pub fn check_gradients<F>(
    f: F,
    vars: &[(String, Var)],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    let out = f()?;
    if out.elem_count() != 1 {
        return Err(Error::arg(format!("gradient check needs a scalar, got {:?}", out.dims())));
    }
    let grads = out.sum_all()?.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for (name, var) in vars {
        if var.dtype() != DType::F64 {
            return Err(Error::arg(format!("{name} is {:?}; gradient checks need f64", var.dtype())));
        }
        let original = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let shape = var.as_tensor().shape().clone();
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?,
            None => vec![0.0; original.len()],
        };
        let picks: Vec<usize> = if original.len() <= opts.coords_per_var {
            (0..original.len()).collect()
        } else {
            let mut v = sample(&mut rng, original.len(), opts.coords_per_var).into_vec();
            v.sort_unstable();
            v
        };
        for i in picks {
            let probe = |delta: f64| -> Result<f64> {
                let mut values = original.clone();
                values[i] += delta;
                var.set(&Tensor::from_vec(values, &shape, var.device())?)?;
                Ok(f()?.sum_all()?.to_scalar::<f64>()?)
            };
            let plus = probe(opts.step)?;
            let minus = probe(-opts.step)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.scale_floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(GradMismatch {
                    var: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
        var.set(&Tensor::from_vec(original, &shape, var.device())?)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn cubic_passes() {
        let x = Var::new(&[0.3f64, -1.2, 2.0], &Device::Cpu).unwrap();
        let xs = x.as_tensor().clone();
        let r = check_gradients(
            || Ok((xs.sqr()? * &xs)?.sum_all()?),
            &[("x".into(), x.clone())],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.passes(1e-6), "{r:?}");
        assert_eq!(x.as_tensor().to_vec1::<f64>().unwrap(), vec![0.3, -1.2, 2.0]);
    }

    #[test]
    fn detached_path_is_caught() {
        // Analytic gradient is zero because of the detach; the numeric one
        // is not.
        let x = Var::new(&[1.5f64], &Device::Cpu).unwrap();
        let xs = x.as_tensor().clone();
        let r = check_gradients(
            || Ok(xs.detach().sqr()?.sum_all()?),
            &[("x".into(), x)],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!r.passes(1e-3));
    }
}
