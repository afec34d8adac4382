//! Image containers shared by every quantizer: a float RGB raster and the
//! indexed (index map + palette) representation.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};

pub type Rgb = [f32; 3];

/// Row-major, channel-last RGB raster with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::arg(format!(
                "{}x{} RGB image needs {} samples, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Rgb) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            width,
            height,
            bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
        )
    }

    /// Planar (CHW) 8-bit input, as stored by the CIFAR and STL10 archives.
    pub fn from_planar_rgb8(width: usize, height: usize, planes: &[u8]) -> Result<Self> {
        let n = width * height;
        if planes.len() != 3 * n {
            return Err(Error::arg(format!(
                "planar buffer has {} bytes, expected {}",
                planes.len(),
                3 * n
            )));
        }
        let mut data = Vec::with_capacity(3 * n);
        for p in 0..n {
            for c in 0..3 {
                data.push(f32::from(planes[c * n + p]) / 255.0);
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_raw(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> Rgb {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, color: Rgb) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&color);
    }

    pub fn pixels(&self) -> impl Iterator<Item = Rgb> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| unit_to_u8(v)).collect()
    }

    /// Channel-first copy, the layout used by the network tensors.
    pub fn to_chw(&self) -> Vec<f32> {
        let n = self.pixel_count();
        let mut out = vec![0.0; 3 * n];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + p] = px[c];
            }
        }
        out
    }

    pub fn from_chw(width: usize, height: usize, planes: &[f32]) -> Result<Self> {
        let n = width * height;
        if planes.len() != 3 * n {
            return Err(Error::arg(format!(
                "CHW buffer has {} values, expected {}",
                planes.len(),
                3 * n
            )));
        }
        let mut data = Vec::with_capacity(3 * n);
        for p in 0..n {
            for c in 0..3 {
                data.push(planes[c * n + p]);
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Number of distinct colors, compared bit-exactly.
    pub fn distinct_colors(&self) -> usize {
        self.pixels()
            .map(|p| p.map(f32::to_bits))
            .collect::<HashSet<_>>()
            .len()
    }

    pub fn mean_color(&self) -> Rgb {
        let mut sum = [0f64; 3];
        for p in self.pixels() {
            for c in 0..3 {
                sum[c] += f64::from(p[c]);
            }
        }
        let n = self.pixel_count().max(1) as f64;
        sum.map(|s| (s / n) as f32)
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(w as usize, h as usize, img.as_raw())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::Invariant("raster size mismatch".into()))?;
        buf.save(path)?;
        Ok(())
    }
}

pub(crate) fn unit_to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A color-quantized image: per-pixel palette indices plus the palette.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexedImage {
    width: usize,
    height: usize,
    indices: Vec<u16>,
    palette: Vec<Rgb>,
    nominal_colors: usize,
}

impl IndexedImage {
    pub fn new(
        width: usize,
        height: usize,
        indices: Vec<u16>,
        palette: Vec<Rgb>,
        nominal_colors: usize,
    ) -> Result<Self> {
        if indices.len() != width * height {
            return Err(Error::arg(format!(
                "index map has {} entries for a {}x{} image",
                indices.len(),
                width,
                height
            )));
        }
        if palette.len() > nominal_colors {
            return Err(Error::Invariant(format!(
                "palette has {} entries but the color space holds {}",
                palette.len(),
                nominal_colors
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| usize::from(i) >= palette.len()) {
            return Err(Error::Invariant(format!(
                "index {} outside a palette of {} colors",
                bad,
                palette.len()
            )));
        }
        Ok(Self {
            width,
            height,
            indices,
            palette,
            nominal_colors,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn indices(&self) -> &[u16] {
        &self.indices
    }

    pub fn palette(&self) -> &[Rgb] {
        &self.palette
    }

    pub fn nominal_colors(&self) -> usize {
        self.nominal_colors
    }

    pub fn index_at(&self, x: usize, y: usize) -> u16 {
        self.indices[y * self.width + x]
    }

    pub fn reconstruct(&self) -> RgbImage {
        let mut data = Vec::with_capacity(self.indices.len() * 3);
        for &i in &self.indices {
            data.extend_from_slice(&self.palette[usize::from(i)]);
        }
        RgbImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Number of palette entries referenced by at least one pixel.
    pub fn used_colors(&self) -> usize {
        let mut seen = vec![false; self.palette.len()];
        for &i in &self.indices {
            seen[usize::from(i)] = true;
        }
        seen.into_iter().filter(|&s| s).count()
    }

    /// Drops palette entries no pixel references, keeping the order of the
    /// survivors.
    pub fn compact(&self) -> IndexedImage {
        let mut remap = vec![u16::MAX; self.palette.len()];
        for &i in &self.indices {
            remap[usize::from(i)] = 0;
        }
        let mut palette = Vec::new();
        for (slot, color) in remap.iter_mut().zip(&self.palette) {
            if *slot == 0 {
                *slot = palette.len() as u16;
                palette.push(*color);
            }
        }
        IndexedImage {
            width: self.width,
            height: self.height,
            indices: self.indices.iter().map(|&i| remap[usize::from(i)]).collect(),
            palette,
            nominal_colors: self.nominal_colors,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chw_round_trip() {
        let img = RgbImage::from_fn(3, 2, |x, y| [x as f32 / 3.0, y as f32 / 2.0, 0.25]);
        let back = RgbImage::from_chw(3, 2, &img.to_chw()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn rejects_out_of_range_index() {
        let err = IndexedImage::new(2, 1, vec![0, 2], vec![[0.0; 3], [1.0; 3]], 2).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
    }

    #[test]
    fn compact_drops_unused_slots() {
        let ix = IndexedImage::new(
            3,
            1,
            vec![2, 0, 2],
            vec![[0.1; 3], [0.0; 3], [0.9; 3]],
            4,
        )
        .unwrap();
        let c = ix.compact();
        assert_eq!(c.palette(), &[[0.1; 3], [0.9; 3]]);
        assert_eq!(c.indices(), &[1, 0, 1]);
        assert_eq!(c.reconstruct(), ix.reconstruct());
    }
}
