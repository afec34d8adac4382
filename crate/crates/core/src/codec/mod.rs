//! Encoders used for bitrate metering: indexed PNG for quantized images and a
//! JPEG reference.

mod jpeg;
mod png;

pub use self::jpeg::{decode_jpeg, jpeg_reference};
pub use self::png::{bit_depth_for, decode_indexed_png, encode_indexed_png, IndexedPngInfo};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlobFormat {
    PngIndexed,
    Jpeg,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedBlob {
    pub bytes: Vec<u8>,
    pub width: usize,
    pub height: usize,
    pub format: BlobFormat,
}

impl EncodedBlob {
    pub fn bits_per_pixel(&self) -> Result<f64> {
        bits_per_pixel(self.bytes.len(), self.width, self.height)
    }
}

/// `8 * bytes / (width * height)`.
pub fn bits_per_pixel(byte_len: usize, width: usize, height: usize) -> Result<f64> {
    let area = width * height;
    if area == 0 {
        return Err(Error::arg("bits per pixel of a zero-area image"));
    }
    Ok(8.0 * byte_len as f64 / area as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bpp_arithmetic() {
        assert_eq!(bits_per_pixel(1024, 32, 32).unwrap(), 8.0);
        assert_eq!(bits_per_pixel(1024, 64, 32).unwrap(), 4.0);
        assert_eq!(bits_per_pixel(2048, 32, 32).unwrap(), 16.0);
        assert!(bits_per_pixel(10, 0, 32).is_err());
    }
}
