//! CIFAR-style AlexNet, VGG16 and ResNet18. All three end in global average
//! pooling, so the same weights accept 32x32, 96x96 or larger inputs.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{max_pool2x2, BatchNorm2d, Conv2d, Linear};
use super::{ParamPath, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierArch {
    AlexNet,
    Vgg16,
    ResNet18,
}

impl fmt::Display for ClassifierArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassifierArch::AlexNet => "alexnet",
            ClassifierArch::Vgg16 => "vgg16",
            ClassifierArch::ResNet18 => "resnet18",
        })
    }
}

impl FromStr for ClassifierArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alexnet" => Ok(Self::AlexNet),
            "vgg16" => Ok(Self::Vgg16),
            "resnet18" => Ok(Self::ResNet18),
            other => Err(Error::config(format!(
                "unknown classifier `{other}` (expected alexnet, vgg16 or resnet18)"
            ))),
        }
    }
}

/// Architecture plus the knobs that change parameter shapes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub arch: ClassifierArch,
    pub num_classes: usize,
    /// Width of the first stage; 64 is the standard network.
    pub width: usize,
    pub multilabel: bool,
}

enum Body {
    Alex(Vec<(Conv2d, BatchNorm2d, bool)>),
    Vgg(Vec<VggLayer>),
    Res {
        stem: (Conv2d, BatchNorm2d),
        blocks: Vec<BasicBlock>,
    },
}

enum VggLayer {
    Conv(Conv2d, BatchNorm2d),
    Pool,
}

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(path: &ParamPath, in_ch: usize, out_ch: usize, stride: usize) -> Result<Self> {
        let shortcut = if stride != 1 || in_ch != out_ch {
            Some((
                Conv2d::new(&path.pp("down.conv"), in_ch, out_ch, 1, stride, false)?,
                BatchNorm2d::new(&path.pp("down.bn"), out_ch)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(&path.pp("conv1"), in_ch, out_ch, 3, stride, false)?,
            bn1: BatchNorm2d::new(&path.pp("bn1"), out_ch)?,
            conv2: Conv2d::new(&path.pp("conv2"), out_ch, out_ch, 3, 1, false)?,
            bn2: BatchNorm2d::new(&path.pp("bn2"), out_ch)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, train)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

/// A classifier and the parameters it owns.
pub struct Classifier {
    spec: ClassifierSpec,
    store: ParamStore,
    body: Body,
    head: Linear,
}

fn scaled(channels: usize, width: usize) -> usize {
    (channels * width / 64).max(1)
}

impl Classifier {
    pub fn new(spec: ClassifierSpec, store: ParamStore) -> Result<Self> {
        if spec.num_classes == 0 || spec.width == 0 {
            return Err(Error::config("classifier needs at least one class and width > 0"));
        }
        let root = store.root();
        let w = spec.width;
        let (body, feat) = match spec.arch {
            ClassifierArch::AlexNet => {
                // (out channels, followed by 2x2 max-pool)
                let plan = [(64, true), (192, true), (384, false), (256, false), (256, true)];
                let mut layers = Vec::new();
                let mut in_ch = 3;
                for (i, (out, pool)) in plan.iter().enumerate() {
                    let out = scaled(*out, w);
                    let p = root.pp(format!("features.{i}"));
                    layers.push((
                        Conv2d::new(&p.pp("conv"), in_ch, out, 3, 1, false)?,
                        BatchNorm2d::new(&p.pp("bn"), out)?,
                        *pool,
                    ));
                    in_ch = out;
                }
                (Body::Alex(layers), in_ch)
            }
            ClassifierArch::Vgg16 => {
                const PLAN: [usize; 18] = [
                    64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0,
                ];
                let mut layers = Vec::new();
                let mut in_ch = 3;
                for (i, &c) in PLAN.iter().enumerate() {
                    if c == 0 {
                        layers.push(VggLayer::Pool);
                    } else {
                        let out = scaled(c, w);
                        let p = root.pp(format!("features.{i}"));
                        layers.push(VggLayer::Conv(
                            Conv2d::new(&p.pp("conv"), in_ch, out, 3, 1, false)?,
                            BatchNorm2d::new(&p.pp("bn"), out)?,
                        ));
                        in_ch = out;
                    }
                }
                (Body::Vgg(layers), in_ch)
            }
            ClassifierArch::ResNet18 => {
                let stem = (
                    Conv2d::new(&root.pp("stem.conv"), 3, w, 3, 1, false)?,
                    BatchNorm2d::new(&root.pp("stem.bn"), w)?,
                );
                let mut blocks = Vec::new();
                let mut in_ch = w;
                for (stage, mult) in [1usize, 2, 4, 8].into_iter().enumerate() {
                    let out = w * mult;
                    for b in 0..2 {
                        let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                        blocks.push(BasicBlock::new(
                            &root.pp(format!("layer{}.{b}", stage + 1)),
                            in_ch,
                            out,
                            stride,
                        )?);
                        in_ch = out;
                    }
                }
                (Body::Res { stem, blocks }, in_ch)
            }
        };
        let head = Linear::new(&root.pp("fc"), feat, spec.num_classes)?;
        Ok(Self {
            spec,
            store,
            body,
            head,
        })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Logits for a normalized `(batch, 3, H, W)` input.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = x.clone();
        match &self.body {
            Body::Alex(layers) => {
                for (conv, bn, pool) in layers {
                    h = bn.forward(&conv.forward(&h)?, train)?.relu()?;
                    if *pool && h.dim(2)? >= 2 {
                        h = max_pool2x2(&h)?;
                    }
                }
            }
            Body::Vgg(layers) => {
                for layer in layers {
                    h = match layer {
                        VggLayer::Conv(conv, bn) => bn.forward(&conv.forward(&h)?, train)?.relu()?,
                        VggLayer::Pool if h.dim(2)? >= 2 => max_pool2x2(&h)?,
                        VggLayer::Pool => h,
                    };
                }
            }
            Body::Res { stem, blocks } => {
                h = stem.1.forward(&stem.0.forward(&h)?, train)?.relu()?;
                for block in blocks {
                    h = block.forward(&h, train)?;
                }
            }
        }
        let pooled = h.mean((2, 3))?;
        self.head.forward(&pooled)
    }
}
