//! Clustering-based color quantizers and error-diffusion dithering.
//!
//! These are the baselines the learned quantizers are compared against, and
//! MedianCut additionally provides the imitation targets for ColorCNN+.

mod dither;
mod median_cut;
mod octree;

pub use dither::dither;
pub use median_cut::median_cut;
pub use octree::octree_quantize;

use crate::error::{Error, Result};
use crate::imaging::{IndexedImage, Rgb, RgbImage};

/// Maps every pixel to the palette entry with the smallest squared RGB
/// distance. Ties go to the lowest palette index.
pub fn nearest_palette_map(image: &RgbImage, palette: &[Rgb]) -> Result<IndexedImage> {
    if palette.is_empty() {
        return Err(Error::arg("palette is empty"));
    }
    let indices = image
        .pixels()
        .map(|p| nearest_index(&p, palette) as u16)
        .collect();
    IndexedImage::new(
        image.width(),
        image.height(),
        indices,
        palette.to_vec(),
        palette.len(),
    )
}

pub(crate) fn nearest_index(p: &Rgb, palette: &[Rgb]) -> usize {
    let mut best = 0;
    let mut best_d = f32::INFINITY;
    for (k, q) in palette.iter().enumerate() {
        let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Dense one-hot assignment of each pixel to one of `channels` colors.
#[derive(Clone, Debug, PartialEq)]
pub struct HardAssignment {
    width: usize,
    height: usize,
    channels: usize,
    /// Channel-last, `height * width * channels` entries of 0 or 1.
    one_hot: Vec<f32>,
}

impl HardAssignment {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn one_hot(&self) -> &[f32] {
        &self.one_hot
    }

    pub fn at(&self, x: usize, y: usize, c: usize) -> f32 {
        self.one_hot[(y * self.width + x) * self.channels + c]
    }

    /// Per-pixel argmax, lowest channel on ties.
    pub fn argmax(&self) -> Vec<u16> {
        self.one_hot
            .chunks_exact(self.channels)
            .map(|row| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best as u16
            })
            .collect()
    }

    /// Channel-first copy (`channels * height * width`).
    pub fn to_chw(&self) -> Vec<f32> {
        let n = self.width * self.height;
        let mut out = vec![0.0; self.channels * n];
        for p in 0..n {
            for c in 0..self.channels {
                out[c * n + p] = self.one_hot[p * self.channels + c];
            }
        }
        out
    }
}

pub fn to_hard_assignment(ix: &IndexedImage, channels: usize) -> Result<HardAssignment> {
    if ix.palette().len() > channels {
        return Err(Error::Invariant(format!(
            "palette of {} colors does not fit {} channels",
            ix.palette().len(),
            channels
        )));
    }
    let mut one_hot = vec![0.0; ix.indices().len() * channels];
    for (p, &i) in ix.indices().iter().enumerate() {
        let i = usize::from(i);
        if i >= channels {
            return Err(Error::Invariant(format!(
                "index {i} outside {channels} channels"
            )));
        }
        one_hot[p * channels + i] = 1.0;
    }
    Ok(HardAssignment {
        width: ix.width(),
        height: ix.height(),
        channels,
        one_hot,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_palette_color_maps_to_its_index() {
        let palette = [[0.0, 0.0, 0.0], [0.2, 0.4, 0.6], [1.0, 1.0, 1.0]];
        let img = RgbImage::filled(1, 1, [0.2, 0.4, 0.6]);
        assert_eq!(nearest_palette_map(&img, &palette).unwrap().indices(), &[1]);
    }

    #[test]
    fn equidistant_pixel_takes_lowest_index() {
        let palette = [[0.0; 3], [1.0; 3]];
        let img = RgbImage::filled(1, 1, [0.5; 3]);
        assert_eq!(nearest_palette_map(&img, &palette).unwrap().indices(), &[0]);
    }

    #[test]
    fn nearest_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = RgbImage::from_fn(4, 4, |_, _| rng.random());
        let palette: Vec<Rgb> = (0..3).map(|_| rng.random()).collect();
        let ix = nearest_palette_map(&img, &palette).unwrap();
        for (p, &got) in img.pixels().zip(ix.indices()) {
            let dists: Vec<f32> = palette
                .iter()
                .map(|q| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum())
                .collect();
            let min = dists.iter().cloned().fold(f32::INFINITY, f32::min);
            let expected = dists.iter().position(|&d| d == min).unwrap();
            assert_eq!(usize::from(got), expected);
        }
    }

    #[test]
    fn empty_palette_is_rejected() {
        assert!(nearest_palette_map(&RgbImage::filled(1, 1, [0.0; 3]), &[]).is_err());
    }

    #[test]
    fn one_pixel_one_hot() {
        let ix = IndexedImage::new(1, 1, vec![0], vec![[0.0; 3]], 2).unwrap();
        let h = to_hard_assignment(&ix, 2).unwrap();
        assert_eq!(h.one_hot(), &[1.0, 0.0]);
    }

    #[test]
    fn palette_wider_than_channels_is_an_error() {
        let ix = IndexedImage::new(1, 1, vec![2], vec![[0.0; 3]; 3], 3).unwrap();
        assert!(matches!(
            to_hard_assignment(&ix, 2),
            Err(Error::Invariant(_))
        ));
    }

    proptest! {
        #[test]
        fn one_hot_rows_sum_to_one_and_argmax_round_trips(
            c in 1usize..20,
            raw in proptest::collection::vec(0u16..1000, 1..64),
        ) {
            let indices: Vec<u16> = raw.iter().map(|&i| i % c as u16).collect();
            let n = indices.len();
            let ix = IndexedImage::new(n, 1, indices.clone(), vec![[0.0; 3]; c], c).unwrap();
            let h = to_hard_assignment(&ix, c).unwrap();
            for row in h.one_hot().chunks_exact(c) {
                prop_assert_eq!(row.iter().sum::<f32>(), 1.0);
            }
            prop_assert_eq!(h.argmax(), indices);
        }
    }
}
