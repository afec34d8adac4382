use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageError, ImageFormat};

use super::{BlobFormat, EncodedBlob};
use crate::error::{Error, Result};
use crate::imaging::RgbImage;

/// Baseline JPEG at `quality` (1..=100) through the `image` crate's encoder.
pub fn jpeg_reference(image: &RgbImage, quality: u8) -> Result<EncodedBlob> {
    if !(1..=100).contains(&quality) {
        return Err(Error::arg(format!("JPEG quality {quality} outside 1..=100")));
    }
    let mut bytes = Vec::new();
    JpegEncoder::new_with_quality(&mut bytes, quality)
        .encode(
            &image.to_rgb8(),
            image.width() as u32,
            image.height() as u32,
            ExtendedColorType::Rgb8,
        )
        .map_err(unavailable)?;
    Ok(EncodedBlob {
        bytes,
        width: image.width(),
        height: image.height(),
        format: BlobFormat::Jpeg,
    })
}

pub fn decode_jpeg(blob: &EncodedBlob) -> Result<RgbImage> {
    let decoded = image::load_from_memory_with_format(&blob.bytes, ImageFormat::Jpeg)
        .map_err(unavailable)?
        .to_rgb8();
    let (w, h) = decoded.dimensions();
    RgbImage::from_rgb8(w as usize, h as usize, decoded.as_raw())
}

fn unavailable(e: ImageError) -> Error {
    match e {
        ImageError::Unsupported(u) => Error::Environment(format!(
            "JPEG codec unavailable ({u}); build `colorquant` with the image crate's `jpeg` feature"
        )),
        other => Error::Image(other),
    }
}
