use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{max_pool2x2, BatchNorm2d, Conv2d, ParamPath};

/// conv3x3-BN-ReLU, twice.
struct DoubleConv {
    c1: Conv2d,
    b1: BatchNorm2d,
    c2: Conv2d,
    b2: BatchNorm2d,
}

impl DoubleConv {
    fn new(path: &ParamPath, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            c1: Conv2d::new(&path.pp("conv1"), in_ch, out_ch, 3, 1, false)?,
            b1: BatchNorm2d::new(&path.pp("bn1"), out_ch)?,
            c2: Conv2d::new(&path.pp("conv2"), out_ch, out_ch, 3, 1, false)?,
            b2: BatchNorm2d::new(&path.pp("bn2"), out_ch)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.b1.forward(&self.c1.forward(x)?, train)?.relu()?;
        Ok(self.b2.forward(&self.c2.forward(&y)?, train)?.relu()?)
    }
}

/// Encoder-decoder with skip connections. Level `i` of the encoder has
/// `base * 2^i` channels; the output has `base` channels at input
/// resolution.
pub(super) struct UNet {
    levels: usize,
    inc: DoubleConv,
    down: Vec<DoubleConv>,
    up: Vec<DoubleConv>,
}

impl UNet {
    pub(super) fn new(path: &ParamPath, levels: usize, base: usize) -> Result<Self> {
        let inc = DoubleConv::new(&path.pp("inc"), 3, base)?;
        let mut down = Vec::with_capacity(levels);
        let mut up = Vec::with_capacity(levels);
        for i in 0..levels {
            let lo = base << i;
            down.push(DoubleConv::new(&path.pp(format!("down{i}")), lo, lo * 2)?);
            up.push(DoubleConv::new(&path.pp(format!("up{i}")), lo * 3, lo)?);
        }
        Ok(Self {
            levels,
            inc,
            down,
            up,
        })
    }

    pub(super) fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::arg(format!("backbone expects 3 input channels, got {c}")));
        }
        // Replicate-pad to a multiple of 2^levels, cropped off at the end.
        let m = 1usize << self.levels;
        let (ph, pw) = ((m - h % m) % m, (m - w % m) % m);
        let mut cur = x.pad_with_same(2, 0, ph)?.pad_with_same(3, 0, pw)?;
        cur = self.inc.forward(&cur, train)?;
        let mut skips = Vec::with_capacity(self.levels);
        for block in &self.down {
            skips.push(cur.clone());
            cur = block.forward(&max_pool2x2(&cur)?, train)?;
        }
        for (block, skip) in self.up.iter().zip(skips).rev() {
            let (_, _, sh, sw) = skip.dims4()?;
            let upsampled = cur.upsample_nearest2d(sh, sw)?;
            cur = block.forward(&Tensor::cat(&[&skip, &upsampled], 1)?, train)?;
        }
        Ok(cur.narrow(2, 0, h)?.narrow(3, 0, w)?)
    }
}
