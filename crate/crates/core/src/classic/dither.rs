use super::nearest_index;
use crate::error::{Error, Result};
use crate::imaging::{IndexedImage, Rgb, RgbImage};

const WORKING_MIN: f32 = -0.5;
const WORKING_MAX: f32 = 1.5;

/// Floyd–Steinberg error diffusion onto a fixed palette.
///
/// Raster order, no serpentine. The quantization error of each pixel goes
/// 7/16 right, 3/16 down-left, 5/16 down and 1/16 down-right. Working values
/// are clamped to `[-0.5, 1.5]`.
pub fn dither(image: &RgbImage, palette: &[Rgb]) -> Result<IndexedImage> {
    if palette.is_empty() {
        return Err(Error::arg("palette is empty"));
    }
    let (w, h) = (image.width(), image.height());
    let mut work: Vec<Rgb> = image.pixels().collect();
    let mut indices = vec![0u16; w * h];

    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let old = work[p];
            let k = nearest_index(&old, palette);
            indices[p] = k as u16;
            let err = [
                old[0] - palette[k][0],
                old[1] - palette[k][1],
                old[2] - palette[k][2],
            ];
            let mut spread = |xx: isize, yy: usize, weight: f32| {
                if xx < 0 || xx as usize >= w || yy >= h {
                    return;
                }
                let q = &mut work[yy * w + xx as usize];
                for c in 0..3 {
                    q[c] = (q[c] + err[c] * weight).clamp(WORKING_MIN, WORKING_MAX);
                }
            };
            let xi = x as isize;
            spread(xi + 1, y, 7.0 / 16.0);
            spread(xi - 1, y + 1, 3.0 / 16.0);
            spread(xi, y + 1, 5.0 / 16.0);
            spread(xi + 1, y + 1, 1.0 / 16.0);
        }
    }
    IndexedImage::new(w, h, indices, palette.to_vec(), palette.len())
}
