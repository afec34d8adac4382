//! Training objectives. Probability maps are `(batch, C, H, W)` tensors;
//! every batched loss is the mean of its per-image values. Entropies are in
//! nats.

use candle_core::{DType, Device, Tensor, D};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classic::HardAssignment;
use crate::error::{Error, Result};
use crate::quantnet::{ProbMap, Variant};

/// Offset inside `ln` so that zero probabilities contribute zero.
const LOG_EPS: f64 = 1e-12;
/// Floor for Gram-row norms.
const ROW_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Regularizer weight.
    pub gamma: f64,
    /// Relationship-loss weight.
    pub lambda: f64,
    /// Weight of `r_info` inside the regularizer.
    pub alpha: f64,
    /// Weight of `r_conf` inside the regularizer.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lambda: 3.0,
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Ground truth for a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Class(Vec<u32>),
    /// One 0/1 vector per image.
    Multi(Vec<Vec<f32>>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Class(v) => v.len(),
            Targets::Multi(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Softmax cross-entropy for class targets, mean per-class sigmoid binary
/// cross-entropy for multi-label targets.
pub fn classification_loss(logits: &Tensor, targets: &Targets) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    if targets.len() != b {
        return Err(Error::arg(format!("{b} logit rows but {} targets", targets.len())));
    }
    match targets {
        Targets::Class(ids) => {
            if let Some(bad) = ids.iter().find(|&&t| t as usize >= k) {
                return Err(Error::arg(format!("target {bad} outside {k} classes")));
            }
            let ids = Tensor::new(ids.as_slice(), logits.device())?;
            let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
            Ok(logp.gather(&ids.unsqueeze(1)?, 1)?.mean_all()?.neg()?)
        }
        Targets::Multi(rows) => {
            if let Some(r) = rows.iter().find(|r| r.len() != k) {
                return Err(Error::arg(format!("label vector of {} for {k} classes", r.len())));
            }
            let y = Tensor::from_vec(rows.concat(), (b, k), logits.device())?.to_dtype(logits.dtype())?;
            // max(x, 0) - x*y + ln(1 + exp(-|x|))
            let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
            Ok((logits.relu()? - logits.mul(&y)?)?.add(&softplus)?.mean_all()?)
        }
    }
}

/// `KL(teacher || student)` of the softmax distributions; the teacher is
/// not differentiated.
pub fn kd_loss(student: &Tensor, teacher: &Tensor) -> Result<Tensor> {
    if student.dims() != teacher.dims() {
        return Err(Error::arg(format!(
            "student logits {:?} vs teacher {:?}",
            student.dims(),
            teacher.dims()
        )));
    }
    let (b, _) = student.dims2()?;
    let log_t = candle_nn::ops::log_softmax(&teacher.detach(), D::Minus1)?;
    let log_s = candle_nn::ops::log_softmax(student, D::Minus1)?;
    let kl = log_t.exp()?.mul(&(log_t - log_s)?)?.sum_all()?;
    Ok((kl / b as f64)?)
}

fn flat_probs(m: &ProbMap) -> Result<(Tensor, usize, usize)> {
    let (b, c, h, w) = m.tensor().dims4()?;
    Ok((m.tensor().reshape((b, c, h * w))?, b, c))
}

/// Per-color peak probability over the image, averaged over colors and
/// negated. Lies in `[-1, 0]`.
pub fn r_color(m: &ProbMap) -> Result<Tensor> {
    let (p, _, _) = flat_probs(m)?;
    Ok(p.max(D::Minus1)?.mean_all()?.neg()?)
}

/// Negative entropy of the image-averaged color distribution. Lies in
/// `[-ln C, 0]`.
pub fn r_info(m: &ProbMap) -> Result<Tensor> {
    let (p, b, _) = flat_probs(m)?;
    let avg = p.mean(D::Minus1)?;
    let neg_entropy = avg.mul(&(&avg + LOG_EPS)?.log()?)?.sum_all()?;
    Ok((neg_entropy / b as f64)?)
}

/// Mean per-pixel entropy. Lies in `[0, ln C]`.
pub fn r_conf(m: &ProbMap) -> Result<Tensor> {
    let (p, b, _) = flat_probs(m)?;
    let n = p.dim(2)?;
    let plogp = p.mul(&(&p + LOG_EPS)?.log()?)?.sum_all()?;
    Ok((plogp / (-((b * n) as f64)))?)
}

/// `r_color + alpha * r_info + beta * r_conf` for ColorCNN+; `r_color`
/// alone for ColorCNN.
pub fn combined_regularizer(m: &ProbMap, weights: &LossWeights, variant: Variant) -> Result<Tensor> {
    let color = r_color(m)?;
    if variant == Variant::ColorCnn {
        return Ok(color);
    }
    let mut total = color;
    if weights.alpha != 0.0 {
        total = (total + (r_info(m)? * weights.alpha)?)?;
    }
    if weights.beta != 0.0 {
        total = (total + (r_conf(m)? * weights.beta)?)?;
    }
    Ok(total)
}

/// Pixels shared by every image of a batch for the relationship loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelSample {
    indices: Vec<u32>,
}

impl PixelSample {
    /// `round(ratio * pixels)` distinct row-major positions (at least 2),
    /// uniformly without replacement.
    pub fn draw(height: usize, width: usize, ratio: f64, rng: &mut impl Rng) -> Result<Self> {
        let pixels = height * width;
        if pixels < 2 {
            return Err(Error::arg(format!("cannot sample 2 pixels from {height}x{width}")));
        }
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::config(format!("pixel sample ratio {ratio} outside (0, 1]")));
        }
        let n = ((ratio * pixels as f64).round() as usize).clamp(2, pixels);
        let mut indices: Vec<u32> = sample(rng, pixels, n).into_iter().map(|i| i as u32).collect();
        indices.sort_unstable();
        Ok(Self { indices })
    }

    /// Explicit positions; they must be distinct and at least 2.
    pub fn from_indices(indices: Vec<u32>) -> Result<Self> {
        let mut sorted = indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != indices.len() || indices.len() < 2 {
            return Err(Error::arg("pixel sample needs at least 2 distinct positions"));
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Stacks one-hot assignments into a `(batch, C, H, W)` tensor.
pub fn assignments_to_tensor(
    assignments: &[HardAssignment],
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let first = assignments
        .first()
        .ok_or_else(|| Error::arg("no assignments"))?;
    let (c, h, w) = (first.channels(), first.height(), first.width());
    let mut data = Vec::with_capacity(assignments.len() * c * h * w);
    for a in assignments {
        if (a.channels(), a.height(), a.width()) != (c, h, w) {
            return Err(Error::arg("assignments differ in shape"));
        }
        data.extend(a.to_chw());
    }
    Ok(Tensor::from_vec(data, (assignments.len(), c, h, w), device)?.to_dtype(dtype)?)
}

/// Row-normalized `N x N` correlation of the sampled per-pixel
/// distributions.
fn normalized_gram(m: &Tensor, idx: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = m.dims4()?;
    let picked = m.reshape((b, c, h * w))?.index_select(idx, 2)?; // (b, c, n)
    let gram = picked.t()?.matmul(&picked)?; // (b, n, n)
    let norm = gram
        .sqr()?
        .sum_keepdim(D::Minus1)?
        .maximum(ROW_NORM_EPS * ROW_NORM_EPS)?
        .sqrt()?;
    Ok(gram.broadcast_div(&norm)?)
}

/// `||A~ - A*~||_F^2 / N` between the normalized pixel correlations of the
/// soft map and of the target assignment. Invariant to relabeling colors.
pub fn relationship_loss(m: &ProbMap, target: &Tensor, sample: &PixelSample) -> Result<Tensor> {
    let (b, _, h, w) = m.tensor().dims4()?;
    let (tb, _, th, tw) = target.dims4()?;
    if (tb, th, tw) != (b, h, w) {
        return Err(Error::arg(format!(
            "probability map {:?} and target {:?} are not aligned",
            m.tensor().dims(),
            target.dims()
        )));
    }
    if let Some(&bad) = sample.indices().iter().find(|&&i| i as usize >= h * w) {
        return Err(Error::arg(format!("sampled pixel {bad} outside {h}x{w}")));
    }
    let idx = Tensor::new(sample.indices(), m.tensor().device())?;
    let a = normalized_gram(m.tensor(), &idx)?;
    let a_star = normalized_gram(&target.to_dtype(m.tensor().dtype())?.detach(), &idx)?;
    let n = sample.len() as f64;
    Ok(((a - a_star)?.sqr()?.sum_all()? / (n * b as f64))?)
}

/// The weighted objective and its components, as host scalars for logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub rp: f64,
    pub reg: f64,
}

/// `ce + lambda * rp + gamma * reg`. A non-finite component is reported by
/// name before it can reach the optimizer.
pub fn total_loss(
    ce: &Tensor,
    rp: Option<&Tensor>,
    reg: &Tensor,
    weights: &LossWeights,
) -> Result<(Tensor, LossBreakdown)> {
    let scalar = |name: &str, t: &Tensor| -> Result<f64> {
        let v = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                component: name.to_string(),
                value: v,
            })
        }
    };
    let ce_v = scalar("classification", ce)?;
    let reg_v = scalar("regularizer", reg)?;
    let mut total = (ce + (reg * weights.gamma)?)?;
    let mut rp_v = 0.0;
    if let Some(rp) = rp {
        rp_v = scalar("relationship", rp)?;
        total = (total + (rp * weights.lambda)?)?;
    }
    let total_v = scalar("total", &total)?;
    Ok((
        total,
        LossBreakdown {
            total: total_v,
            ce: ce_v,
            rp: rp_v,
            reg: reg_v,
        },
    ))
}
