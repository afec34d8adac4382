//! Conversion between [`RgbImage`] batches and `(batch, 3, H, W)` tensors.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::imaging::RgbImage;

/// Stacks equally sized images into one channel-first tensor.
pub fn images_to_tensor(images: &[&RgbImage], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::arg("cannot build a tensor from an empty batch"))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if (img.width(), img.height()) != (w, h) {
            return Err(Error::arg(format!(
                "batch mixes {}x{} and {}x{} images",
                w,
                h,
                img.width(),
                img.height()
            )));
        }
        data.extend(img.to_chw());
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

/// Splits a `(batch, 3, H, W)` tensor back into images; values are not
/// clamped.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<RgbImage>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::arg(format!("expected 3 channels, got {c}")));
    }
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    flat.chunks_exact(3 * h * w)
        .take(b)
        .map(|planes| RgbImage::from_chw(w, h, planes))
        .collect()
}

/// Row-major copy of any tensor as `f64`.
pub(crate) fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}
