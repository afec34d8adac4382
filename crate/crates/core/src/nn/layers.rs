use candle_core::{Tensor, Var, D};

use super::{Init, ParamPath};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    padding: usize,
    stride: usize,
}

impl Conv2d {
    pub fn new(
        path: &ParamPath,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = path.get(
            "weight",
            &[out_ch, in_ch, kernel, kernel],
            Init::KaimingNormal { fan_in },
        )?;
        let bias = if bias {
            Some(path.get("bias", &[out_ch], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            padding: kernel / 2,
            stride,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(path: &ParamPath, in_dim: usize, out_dim: usize) -> Result<Self> {
        let init = Init::FanInUniform { fan_in: in_dim };
        Ok(Self {
            weight: path.get("weight", &[out_dim, in_dim], init)?,
            bias: path.get("bias", &[out_dim], init)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Spatial batch normalization. Training mode normalizes with batch
/// statistics and folds them into the running estimates (momentum 0.1,
/// unbiased variance); evaluation mode uses the running estimates.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(path: &ParamPath, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: path.get("weight", &[channels], Init::Const(1.0))?,
            bias: path.get("bias", &[channels], Init::Const(0.0))?,
            running_mean: Var::from_tensor(&path.get(
                "running_mean",
                &[channels],
                Init::Const(0.0),
            )?)?,
            running_var: Var::from_tensor(&path.get(
                "running_var",
                &[channels],
                Init::Const(1.0),
            )?)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = if train {
            let flat = x.transpose(0, 1)?.reshape((c, b * h * w))?;
            let mean = flat.mean_keepdim(D::Minus1)?;
            let centered = flat.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let mean_d = mean.detach().flatten_all()?;
            let var_d = var.detach().flatten_all()?;
            self.running_mean.set(
                &((self.running_mean.as_tensor() * (1.0 - self.momentum))?
                    + (mean_d * self.momentum)?)?,
            )?;
            self.running_var.set(
                &((self.running_var.as_tensor() * (1.0 - self.momentum))?
                    + (var_d * (self.momentum * unbiased))?)?,
            )?;
            (mean.flatten_all()?, var.flatten_all()?)
        } else {
            (
                self.running_mean.as_tensor().detach(),
                self.running_var.as_tensor().detach(),
            )
        };
        let shape = (1, c, 1, 1);
        let scale = (var + self.eps)?.sqrt()?.recip()?.mul(&self.weight)?;
        let shift = self.bias.sub(&mean.mul(&scale)?)?;
        Ok(x.broadcast_mul(&scale.reshape(shape)?)?
            .broadcast_add(&shift.reshape(shape)?)?)
    }
}

/// 2x2 max pooling with stride 2; a trailing odd row or column is dropped.
/// Written as a max reduction so the whole gradient reaches each window's
/// maximum.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    let windows = x
        .narrow(2, 0, oh * 2)?
        .narrow(3, 0, ow * 2)?
        .contiguous()?
        .reshape((b, c, oh, 2, ow, 2))?
        .permute((0, 1, 2, 4, 3, 5))?
        .contiguous()?
        .reshape((b, c, oh, ow, 4))?;
    Ok(windows.max(D::Minus1)?)
}
