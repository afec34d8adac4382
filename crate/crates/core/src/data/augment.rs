//! Random crop, erasing, rotation and horizontal flip, applied in that
//! order. Operations run on `(batch, C, H, W)` tensors and are
//! differentiable in the pixel values, so the same code serves host-side
//! augmentation and augmentation after a quantizer during training.

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabeledImage;
use crate::batch::{images_to_tensor, tensor_to_images};
use crate::error::{Error, Result};
use crate::imaging::RgbImage;

/// Where in the pipeline a spec applies: on dataset images, or on the
/// quantizer output before the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pre,
    Post,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    pub stage: Stage,
    /// Zero padding on every side before cropping back to the input size;
    /// 0 disables cropping.
    pub crop_padding: usize,
    pub erase_prob: f64,
    /// Erased fraction of the image area, `[min, max]`.
    pub erase_area: [f64; 2],
    /// Value written into erased pixels.
    pub erase_value: f64,
    /// Rotation angle is uniform in `[-rotate_degrees, rotate_degrees]`.
    pub rotate_degrees: f64,
    pub hflip_prob: f64,
}

impl AugmentSpec {
    pub fn none(stage: Stage) -> Self {
        Self {
            stage,
            crop_padding: 0,
            erase_prob: 0.0,
            erase_area: [0.02, 0.33],
            erase_value: 0.0,
            rotate_degrees: 0.0,
            hflip_prob: 0.0,
        }
    }

    /// Padded crop plus flip, the usual recipe for classifier training.
    pub fn crop_flip(stage: Stage) -> Self {
        Self {
            crop_padding: 4,
            hflip_prob: 0.5,
            ..Self::none(stage)
        }
    }

    pub fn flip_only(stage: Stage) -> Self {
        Self {
            hflip_prob: 0.5,
            ..Self::none(stage)
        }
    }

    /// Everything enabled; used after the quantizer.
    pub fn full(stage: Stage) -> Self {
        Self {
            crop_padding: 4,
            erase_prob: 0.5,
            rotate_degrees: 15.0,
            hflip_prob: 0.5,
            ..Self::none(stage)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} = {p} is not a probability")))
            }
        };
        prob("erase_prob", self.erase_prob)?;
        prob("hflip_prob", self.hflip_prob)?;
        let [lo, hi] = self.erase_area;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::config(format!("erase_area [{lo}, {hi}] must satisfy 0 < min <= max < 1")));
        }
        if !(self.rotate_degrees >= 0.0 && self.rotate_degrees <= 180.0) {
            return Err(Error::config(format!(
                "rotate_degrees = {} outside [0, 180]",
                self.rotate_degrees
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.crop_padding == 0
            && self.erase_prob == 0.0
            && self.rotate_degrees == 0.0
            && self.hflip_prob == 0.0
    }
}

/// The random choices for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    /// Top-left corner of the crop window inside the padded image.
    pub crop: Option<(usize, usize)>,
    /// `(x, y, width, height)`.
    pub erase: Option<(usize, usize, usize, usize)>,
    pub angle_degrees: f64,
    pub flip: bool,
}

pub struct Augmenter {
    spec: AugmentSpec,
}

impl Augmenter {
    pub fn new(spec: AugmentSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &AugmentSpec {
        &self.spec
    }

    pub fn sample(&self, width: usize, height: usize, rng: &mut impl Rng) -> AugmentParams {
        let s = &self.spec;
        let crop = (s.crop_padding > 0).then(|| {
            let span = 2 * s.crop_padding + 1;
            (rng.random_range(0..span), rng.random_range(0..span))
        });
        let erase = if s.erase_prob > 0.0 && rng.random_bool(s.erase_prob) {
            sample_erase(width, height, s.erase_area, rng)
        } else {
            None
        };
        let angle_degrees = if s.rotate_degrees > 0.0 {
            rng.random_range(-s.rotate_degrees..=s.rotate_degrees)
        } else {
            0.0
        };
        let flip = s.hflip_prob > 0.0 && rng.random_bool(s.hflip_prob);
        AugmentParams {
            crop,
            erase,
            angle_degrees,
            flip,
        }
    }

    /// Applies one parameter set per image.
    pub fn apply(&self, x: &Tensor, params: &[AugmentParams]) -> Result<Tensor> {
        let (b, _, _, _) = x.dims4()?;
        if params.len() != b {
            return Err(Error::arg(format!("{} parameter sets for {b} images", params.len())));
        }
        if self.spec.is_identity() {
            return Ok(x.clone());
        }
        let parts = params
            .iter()
            .enumerate()
            .map(|(i, p)| self.apply_one(&x.narrow(0, i, 1)?, p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    }

    pub fn apply_random(&self, x: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let params: Vec<_> = (0..b).map(|_| self.sample(w, h, rng)).collect();
        self.apply(x, &params)
    }

    fn apply_one(&self, x: &Tensor, p: &AugmentParams) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let mut y = x.clone();
        if let Some((dx, dy)) = p.crop {
            let pad = self.spec.crop_padding;
            y = y
                .pad_with_zeros(2, pad, pad)?
                .pad_with_zeros(3, pad, pad)?
                .narrow(2, dy, h)?
                .narrow(3, dx, w)?;
        }
        if let Some((ex, ey, ew, eh)) = p.erase {
            let mut keep = vec![1.0f64; h * w];
            for yy in ey..ey + eh {
                keep[yy * w + ex..yy * w + ex + ew].fill(0.0);
            }
            let keep = Tensor::from_vec(keep, (1, 1, h, w), x.device())?.to_dtype(x.dtype())?;
            y = y.broadcast_mul(&keep)?;
            if self.spec.erase_value != 0.0 {
                let fill = ((keep.neg()? + 1.0)? * self.spec.erase_value)?;
                y = y.broadcast_add(&fill)?;
            }
        }
        if p.angle_degrees != 0.0 {
            y = rotate(&y, p.angle_degrees)?;
        }
        if p.flip {
            let rev: Vec<u32> = (0..w as u32).rev().collect();
            y = y.contiguous()?.index_select(&Tensor::new(rev.as_slice(), x.device())?, 3)?;
        }
        debug_assert_eq!(y.dims(), &[1, c, h, w]);
        Ok(y)
    }
}

fn sample_erase(
    width: usize,
    height: usize,
    [lo, hi]: [f64; 2],
    rng: &mut impl Rng,
) -> Option<(usize, usize, usize, usize)> {
    let area = (width * height) as f64;
    for _ in 0..10 {
        let target = rng.random_range(lo..=hi) * area;
        let log_ratio = rng.random_range((0.3f64).ln()..=(1.0f64 / 0.3).ln());
        let ratio = log_ratio.exp();
        let eh = (target * ratio).sqrt().round() as usize;
        let ew = (target / ratio).sqrt().round() as usize;
        if ew >= 1 && eh >= 1 && ew < width && eh < height {
            let x = rng.random_range(0..=width - ew);
            let y = rng.random_range(0..=height - eh);
            return Some((x, y, ew, eh));
        }
    }
    None
}

/// Bilinear rotation about the image center; samples outside the image read
/// as zero.
fn rotate(x: &Tensor, degrees: f64) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let n = h * w;
    let mut idx = vec![vec![0u32; n]; 4];
    let mut wt = vec![vec![0.0f64; n]; 4];
    for oy in 0..h {
        for ox in 0..w {
            let (dx, dy) = (ox as f64 - cx, oy as f64 - cy);
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let o = oy * w + ox;
            let corners = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1.0, y0, fx * (1.0 - fy)),
                (x0, y0 + 1.0, (1.0 - fx) * fy),
                (x0 + 1.0, y0 + 1.0, fx * fy),
            ];
            for (k, (px, py, weight)) in corners.into_iter().enumerate() {
                if px >= 0.0 && py >= 0.0 && px < w as f64 && py < h as f64 {
                    idx[k][o] = (py as usize * w + px as usize) as u32;
                    wt[k][o] = weight;
                }
            }
        }
    }
    let flat = x.contiguous()?.reshape((b, c, n))?;
    let mut out: Option<Tensor> = None;
    for k in 0..4 {
        let i = Tensor::new(idx[k].as_slice(), x.device())?;
        let wk = Tensor::new(wt[k].as_slice(), x.device())?
            .to_dtype(x.dtype())?
            .reshape((1, 1, n))?;
        let term = flat.index_select(&i, 2)?.broadcast_mul(&wk)?;
        out = Some(match out {
            None => term,
            Some(acc) => (acc + term)?,
        });
    }
    Ok(out.expect("four corners").reshape((b, c, h, w))?)
}

/// Seeded host-side augmentation. Labels and sizes are unchanged.
pub fn augment(batch: &[LabeledImage], spec: &AugmentSpec, seed: u64) -> Result<Vec<LabeledImage>> {
    let aug = Augmenter::new(spec.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    batch
        .iter()
        .map(|item| {
            let img: &RgbImage = &item.image;
            let x = images_to_tensor(&[img], DType::F32, &candle_core::Device::Cpu)?;
            let y = aug.apply_random(&x, &mut rng)?;
            Ok(LabeledImage {
                image: tensor_to_images(&y)?.remove(0),
                label: item.label.clone(),
            })
        })
        .collect()
}
