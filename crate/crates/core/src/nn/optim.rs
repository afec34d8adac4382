use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;

/// SGD with heavy-ball momentum and L2 weight decay (PyTorch semantics:
/// `buf = mu * buf + (g + wd * p); p -= lr * buf`).
pub struct Sgd {
    params: Vec<(String, Var)>,
    buffers: Vec<Option<Tensor>>,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(params: Vec<(String, Var)>, momentum: f64, weight_decay: f64) -> Self {
        let buffers = vec![None; params.len()];
        Self {
            params,
            buffers,
            momentum,
            weight_decay,
        }
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        for ((_, var), buf) in self.params.iter().zip(self.buffers.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let p = var.as_tensor().detach();
            let mut g = g.detach();
            if self.weight_decay != 0.0 {
                g = (g + (&p * self.weight_decay)?)?;
            }
            let update = match buf.take() {
                Some(b) if self.momentum != 0.0 => ((b * self.momentum)? + g)?,
                _ => g,
            };
            var.set(&(p - (&update * lr)?)?)?;
            if self.momentum != 0.0 {
                *buf = Some(update);
            }
        }
        Ok(())
    }

    /// Momentum buffers by parameter name, for checkpointing.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .zip(&self.buffers)
            .filter_map(|((name, _), b)| b.as_ref().map(|b| (name.clone(), b.clone())))
            .collect()
    }

    pub fn load_state(&mut self, state: &[(String, Tensor)]) {
        for (name, value) in state {
            if let Some(i) = self.params.iter().position(|(n, _)| n == name) {
                self.buffers[i] = Some(value.clone());
            }
        }
    }
}
