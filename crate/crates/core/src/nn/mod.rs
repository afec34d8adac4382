//! Small network toolkit on top of candle: a seeded parameter store, the
//! layers the models need, the classifiers and an SGD optimizer.

mod classifier;
mod layers;
mod optim;

pub use classifier::{Classifier, ClassifierArch, ClassifierSpec};
pub use layers::{max_pool2x2, BatchNorm2d, Conv2d, Linear};
pub use optim::Sgd;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::VarMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Names containing this marker hold running statistics, not trainable
/// weights.
const RUNNING_MARKER: &str = "running_";

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    /// He-normal with the given fan-in.
    KaimingNormal { fan_in: usize },
    /// Uniform in `±1/sqrt(fan_in)`.
    FanInUniform { fan_in: usize },
    Const(f64),
}

/// Owns every variable of one model. Initial values depend only on the seed
/// and the variable's name, never on construction order.
#[derive(Clone)]
pub struct ParamStore {
    vars: VarMap,
    dtype: DType,
    device: Device,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            vars: VarMap::new(),
            dtype,
            device: device.clone(),
            seed,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> ParamPath<'_> {
        ParamPath {
            store: self,
            prefix: String::new(),
        }
    }

    pub(crate) fn create(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let values: Vec<f64> = match init {
            Init::Const(v) => vec![v; numel],
            Init::KaimingNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..numel).map(|_| normal.sample(&mut rng)).collect()
            }
            Init::FanInUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let uniform = Uniform::new_inclusive(-bound, bound).expect("valid range");
                (0..numel).map(|_| uniform.sample(&mut rng)).collect()
            }
        };
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let mut data = self.vars.data().lock().expect("param store lock");
        if data.contains_key(name) {
            return Err(Error::Invariant(format!("duplicate parameter {name}")));
        }
        let t = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(t)
    }

    /// All variables sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let data = self.vars.data().lock().expect("param store lock");
        let sorted: BTreeMap<_, _> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        sorted.into_iter().collect()
    }

    /// Variables the optimizer may update (running statistics excluded).
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.named_vars()
            .into_iter()
            .filter(|(name, _)| !name.contains(RUNNING_MARKER))
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable_vars()
            .iter()
            .map(|(_, v)| v.as_tensor().elem_count())
            .sum()
    }

    /// SHA-256 over names, shapes and raw values, in name order.
    pub fn checksum(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in self.named_vars() {
            hasher.update(name.as_bytes());
            for d in var.as_tensor().dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            let values = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }

    /// Overwrites a named variable; shapes must agree.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let data = self.vars.data().lock().expect("param store lock");
        let var = data
            .get(name)
            .ok_or_else(|| Error::Invariant(format!("unknown parameter {name}")))?;
        if var.as_tensor().dims() != value.dims() {
            return Err(Error::Invariant(format!(
                "parameter {name} has shape {:?}, got {:?}",
                var.as_tensor().dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }
}

fn name_hash(name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// A dotted prefix into a [`ParamStore`].
#[derive(Clone)]
pub struct ParamPath<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> ParamPath<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> ParamPath<'a> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamPath {
            store: self.store,
            prefix,
        }
    }

    pub(crate) fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.create(&self.pp(name).prefix, shape, init)
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }
}
