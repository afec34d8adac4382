//! Learned quantizers.
//!
//! Both variants share a U-shaped backbone. ColorCNN ends in a 1x1
//! convolution with exactly `C` outputs, one model per color count.
//! ColorCNN+ produces a `D`-channel feature map once and derives any
//! `C <= D` from it by average pooling contiguous channel slices followed by
//! a top-`K` softmax.
//!
//! At test time the probability map is collapsed by argmax and every color
//! is the mean of the pixels it owns. At train time each pixel instead
//! blends the palette by its probabilities, and each palette entry is the
//! probability-weighted mean of all pixels.

mod unet;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::batch::{tensor_to_images, to_f64_vec};
use crate::error::{Error, Result};
use crate::imaging::{IndexedImage, Rgb};
use crate::nn::{BatchNorm2d, Conv2d, ParamStore};
use unet::UNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "colorcnn")]
    ColorCnn,
    #[serde(rename = "colorcnn_plus")]
    ColorCnnPlus,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::ColorCnn => "colorcnn",
            Variant::ColorCnnPlus => "colorcnn_plus",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "colorcnn" => Ok(Self::ColorCnn),
            "colorcnn_plus" | "colorcnn+" => Ok(Self::ColorCnnPlus),
            other => Err(Error::config(format!(
                "unknown quantizer `{other}` (expected colorcnn or colorcnn_plus)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Unet,
    /// Reserved; constructing it fails.
    Dncnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub levels: usize,
    pub base_channels: usize,
    /// Width of the 1x1 bottleneck in front of the head (ColorCNN+ only).
    pub bottleneck_dim: Option<usize>,
    /// `D` for ColorCNN+, `C` for ColorCNN.
    pub head_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Unet,
            levels: 3,
            base_channels: 64,
            bottleneck_dim: Some(16),
            head_channels: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantNetConfig {
    pub variant: Variant,
    pub backbone: BackboneConfig,
    /// Nonzero probabilities per pixel (ColorCNN+ only).
    pub top_k: usize,
}

impl QuantNetConfig {
    pub fn colorcnn(colors: usize) -> Self {
        Self {
            variant: Variant::ColorCnn,
            backbone: BackboneConfig {
                bottleneck_dim: None,
                head_channels: colors,
                ..BackboneConfig::default()
            },
            top_k: colors,
        }
    }

    pub fn colorcnn_plus() -> Self {
        Self {
            variant: Variant::ColorCnnPlus,
            backbone: BackboneConfig::default(),
            top_k: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.kind == BackboneKind::Dncnn {
            return Err(Error::config(
                "the dncnn backbone is not implemented; use kind = \"unet\"",
            ));
        }
        if b.levels == 0 || b.base_channels == 0 || b.head_channels == 0 {
            return Err(Error::config(
                "backbone needs levels >= 1, base_channels >= 1 and head_channels >= 1",
            ));
        }
        if let Some(k) = b.bottleneck_dim {
            if k == 0 || k >= b.head_channels {
                return Err(Error::config(format!(
                    "bottleneck_dim {k} must lie in 1..{}",
                    b.head_channels
                )));
            }
            if self.variant == Variant::ColorCnn {
                return Err(Error::config("ColorCNN has no bottleneck; set bottleneck_dim to none"));
            }
        }
        if self.variant == Variant::ColorCnnPlus && self.top_k == 0 {
            return Err(Error::config("top_k must be at least 1"));
        }
        Ok(())
    }
}

/// Per-pixel distribution over colors, `(batch, C, H, W)`.
#[derive(Clone, Debug)]
pub struct ProbMap(Tensor);

impl ProbMap {
    /// Checks non-negativity and unit row sums (within 1e-5).
    pub fn new(probs: Tensor) -> Result<Self> {
        let (b, c, h, w) = probs.dims4()?;
        let v = to_f64_vec(&probs)?;
        let n = h * w;
        for bi in 0..b {
            for p in 0..n {
                let mut sum = 0.0;
                for ci in 0..c {
                    let x = v[(bi * c + ci) * n + p];
                    if !(x >= 0.0) {
                        return Err(Error::Invariant(format!("negative probability {x}")));
                    }
                    sum += x;
                }
                if (sum - 1.0).abs() > 1e-5 {
                    return Err(Error::Invariant(format!("probabilities sum to {sum}")));
                }
            }
        }
        Ok(Self(probs))
    }

    #[cfg(test)]
    pub(crate) fn from_raw(probs: Tensor) -> Self {
        Self(probs)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn colors(&self) -> usize {
        self.0.dim(1).unwrap_or(0)
    }

    /// Per-pixel argmax, lowest channel on ties; one `H*W` row-major vector
    /// per image.
    pub fn argmax(&self) -> Result<Vec<Vec<u16>>> {
        let (b, c, h, w) = self.0.dims4()?;
        let v = to_f64_vec(&self.0)?;
        let n = h * w;
        Ok((0..b)
            .map(|bi| {
                (0..n)
                    .map(|p| {
                        let mut best = 0;
                        for ci in 1..c {
                            if v[(bi * c + ci) * n + p] > v[(bi * c + best) * n + p] {
                                best = ci;
                            }
                        }
                        best as u16
                    })
                    .collect()
            })
            .collect())
    }
}

/// Differentiable train-time quantization of a batch.
#[derive(Clone, Debug)]
pub struct SoftQuantOutput {
    /// `(batch, 3, H, W)`.
    pub soft_image: Tensor,
    /// `(batch, C, 3)`.
    pub soft_palette: Tensor,
    pub prob_map: ProbMap,
}

/// Mean of `h` over `C` contiguous channel slices
/// `[floor(c*D/C), floor((c+1)*D/C))`.
pub fn pool_channels(h: &Tensor, colors: usize) -> Result<Tensor> {
    let (b, d, hh, ww) = h.dims4()?;
    if colors == 0 || colors > d {
        return Err(Error::arg(format!("cannot pool {d} channels into {colors}")));
    }
    if colors == d {
        return Ok(h.clone());
    }
    let mut weights = vec![0.0f64; colors * d];
    for c in 0..colors {
        let (lo, hi) = (c * d / colors, (c + 1) * d / colors);
        for j in lo..hi {
            weights[c * d + j] = 1.0 / (hi - lo) as f64;
        }
    }
    let pool = Tensor::from_vec(weights, (colors, d), h.device())?.to_dtype(h.dtype())?;
    let flat = h.reshape((b, d, hh * ww))?;
    Ok(pool
        .broadcast_matmul(&flat)?
        .reshape((b, colors, hh, ww))?)
}

/// Softmax over the `K` largest channels of each pixel; every other channel
/// is exactly zero. Ties keep the lowest channel index.
pub fn topk_softmax(logits: &Tensor, k: usize) -> Result<ProbMap> {
    let (b, c, h, w) = logits.dims4()?;
    if k == 0 || k > c {
        return Err(Error::arg(format!("top-k of {k} out of {c} channels")));
    }
    if k == c {
        return Ok(ProbMap(candle_nn::ops::softmax(logits, 1)?));
    }
    let n = h * w;
    let v = to_f64_vec(logits)?;
    let mut mask = vec![0.0f64; v.len()];
    let mut order: Vec<usize> = Vec::with_capacity(c);
    for bi in 0..b {
        for p in 0..n {
            let at = |ci: usize| v[(bi * c + ci) * n + p];
            order.clear();
            order.extend(0..c);
            // Stable sort keeps lower indices first among equal logits.
            order.sort_by(|&x, &y| at(y).total_cmp(&at(x)));
            for &ci in &order[..k] {
                mask[(bi * c + ci) * n + p] = 1.0;
            }
        }
    }
    let mask = Tensor::from_vec(mask, (b, c, h, w), logits.device())?.to_dtype(logits.dtype())?;
    // The per-pixel max is always selected, so the denominator is >= 1.
    let max = logits.max_keepdim(1)?.detach();
    let e = logits.broadcast_sub(&max)?.exp()?.mul(&mask)?;
    Ok(ProbMap(e.broadcast_div(&e.sum_keepdim(1)?)?))
}

/// Argmax indices with each palette entry the mean color of its pixels.
/// Entries no pixel selects stay black and are never referenced.
pub fn hard_quantize(m: &ProbMap, images: &Tensor) -> Result<Vec<IndexedImage>> {
    let (b, c, h, w) = m.0.dims4()?;
    if images.dims4()? != (b, 3, h, w) {
        return Err(Error::arg(format!(
            "probability map {:?} does not match images {:?}",
            m.0.dims(),
            images.dims()
        )));
    }
    let images = tensor_to_images(images)?;
    m.argmax()?
        .into_iter()
        .zip(images)
        .map(|(indices, image)| {
            let mut sums = vec![[0.0f64; 3]; c];
            let mut counts = vec![0usize; c];
            for (&i, px) in indices.iter().zip(image.pixels()) {
                let i = usize::from(i);
                counts[i] += 1;
                for k in 0..3 {
                    sums[i][k] += f64::from(px[k]);
                }
            }
            let palette: Vec<Rgb> = sums
                .iter()
                .zip(&counts)
                .map(|(s, &n)| {
                    if n == 0 {
                        [0.0; 3]
                    } else {
                        s.map(|v| (v / n as f64) as f32)
                    }
                })
                .collect();
            IndexedImage::new(w, h, indices, palette, c)
        })
        .collect()
}

/// Probability-weighted palette and the per-pixel palette blend.
pub fn soft_quantize(m: &ProbMap, images: &Tensor) -> Result<SoftQuantOutput> {
    let (b, c, h, w) = m.0.dims4()?;
    if images.dims4()? != (b, 3, h, w) {
        return Err(Error::arg(format!(
            "probability map {:?} does not match images {:?}",
            m.0.dims(),
            images.dims()
        )));
    }
    let n = h * w;
    let probs = m.0.reshape((b, c, n))?;
    let pixels = images.reshape((b, 3, n))?;
    let weighted = probs.matmul(&pixels.t()?)?; // (b, c, 3)
    let mass = probs.sum_keepdim(D::Minus1)?; // (b, c, 1)
    // An empty color has zero mass and a zero numerator; dividing by 1
    // instead yields a zero entry with zero gradient.
    let guard = mass.eq(0.0)?.to_dtype(mass.dtype())?;
    let palette = weighted.broadcast_div(&(mass + guard)?)?;
    let soft = palette.t()?.matmul(&probs)?.reshape((b, 3, h, w))?;
    Ok(SoftQuantOutput {
        soft_image: soft,
        soft_palette: palette,
        prob_map: m.clone(),
    })
}

enum Head {
    Direct(Conv2d),
    Bottleneck {
        squeeze: Conv2d,
        bn: BatchNorm2d,
        expand: Conv2d,
    },
}

/// A ColorCNN or ColorCNN+ network with its parameters.
pub struct QuantNet {
    config: QuantNetConfig,
    store: ParamStore,
    backbone: UNet,
    head: Head,
    backbone_calls: AtomicUsize,
}

impl QuantNet {
    pub fn new(config: QuantNetConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let root = store.root();
        let b = &config.backbone;
        let backbone = UNet::new(&root.pp("backbone"), b.levels, b.base_channels)?;
        let head = match b.bottleneck_dim {
            None => Head::Direct(Conv2d::new(
                &root.pp("head.out"),
                b.base_channels,
                b.head_channels,
                1,
                1,
                true,
            )?),
            Some(k) => Head::Bottleneck {
                squeeze: Conv2d::new(&root.pp("head.squeeze"), b.base_channels, k, 1, 1, true)?,
                bn: BatchNorm2d::new(&root.pp("head.bn"), k)?,
                expand: Conv2d::new(&root.pp("head.out"), k, b.head_channels, 1, 1, true)?,
            },
        };
        Ok(Self {
            config,
            store,
            backbone,
            head,
            backbone_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &QuantNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// How many times the backbone has run since construction.
    pub fn backbone_calls(&self) -> usize {
        self.backbone_calls.load(Ordering::Relaxed)
    }

    /// `h(x)`: `(batch, head_channels, H, W)` for images in `[0, 1]`.
    pub fn features(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        self.backbone_calls.fetch_add(1, Ordering::Relaxed);
        let f = self.backbone.forward(images, train)?;
        match &self.head {
            Head::Direct(conv) => conv.forward(&f),
            Head::Bottleneck {
                squeeze,
                bn,
                expand,
            } => expand.forward(&bn.forward(&squeeze.forward(&f)?, train)?.relu()?),
        }
    }

    fn check_colors(&self, colors: usize) -> Result<()> {
        let d = self.config.backbone.head_channels;
        let ok = match self.config.variant {
            Variant::ColorCnn => colors == d,
            Variant::ColorCnnPlus => (1..=d).contains(&colors),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(match self.config.variant {
                Variant::ColorCnn => format!("this ColorCNN model was trained for {d} colors, not {colors}"),
                Variant::ColorCnnPlus => format!("color count {colors} outside 1..={d}"),
            }))
        }
    }

    /// Probability map for `colors` derived from precomputed features.
    pub fn probs_from_features(&self, features: &Tensor, colors: usize) -> Result<ProbMap> {
        self.check_colors(colors)?;
        match self.config.variant {
            Variant::ColorCnn => Ok(ProbMap(candle_nn::ops::softmax(features, 1)?)),
            Variant::ColorCnnPlus => {
                let pooled = pool_channels(features, colors)?;
                topk_softmax(&pooled, self.config.top_k.min(colors))
            }
        }
    }

    pub fn forward_test(&self, images: &Tensor, colors: usize) -> Result<Vec<IndexedImage>> {
        Ok(self.forward_test_multi(images, &[colors])?.remove(0))
    }

    /// One backbone pass shared by every requested color count.
    pub fn forward_test_multi(
        &self,
        images: &Tensor,
        colors: &[usize],
    ) -> Result<Vec<Vec<IndexedImage>>> {
        for &c in colors {
            self.check_colors(c)?;
        }
        let h = self.features(images, false)?.detach();
        colors
            .iter()
            .map(|&c| hard_quantize(&self.probs_from_features(&h, c)?, images))
            .collect()
    }

    pub fn forward_train(&self, images: &Tensor, colors: usize) -> Result<SoftQuantOutput> {
        self.check_colors(colors)?;
        let h = self.features(images, true)?;
        soft_quantize(&self.probs_from_features(&h, colors)?, images)
    }
}
