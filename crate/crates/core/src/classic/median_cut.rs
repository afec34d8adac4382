use crate::imaging::{IndexedImage, Rgb, RgbImage};

struct ColorBox {
    start: usize,
    end: usize,
}

/// Heckbert's MedianCut.
///
/// Repeatedly splits the box whose widest channel spans the largest range,
/// at the median pixel along that channel. The split point is moved to the
/// nearest boundary between distinct channel values so that no color is
/// ever divided between two boxes; boxes holding a single distinct color
/// are never split. Palette entries are box means.
///
/// An image with at most `colors` distinct colors is reproduced exactly.
pub fn median_cut(image: &RgbImage, colors: usize) -> IndexedImage {
    let colors = colors.max(1);
    let pixels: Vec<Rgb> = image.pixels().collect();
    let n = pixels.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut boxes = vec![ColorBox { start: 0, end: n }];

    while boxes.len() < colors {
        let mut pick: Option<(usize, usize, f32)> = None;
        for (b, bx) in boxes.iter().enumerate() {
            if let Some((channel, range)) = widest_channel(&pixels, &order[bx.start..bx.end]) {
                if range > 0.0 && pick.is_none_or(|(_, _, best)| range > best) {
                    pick = Some((b, channel, range));
                }
            }
        }
        let Some((b, channel, _)) = pick else { break };
        let (start, end) = (boxes[b].start, boxes[b].end);
        let slice = &mut order[start..end];
        slice.sort_by(|&i, &j| pixels[i][channel].total_cmp(&pixels[j][channel]));
        let split = start + balanced_boundary(&pixels, slice, channel);
        boxes[b].end = split;
        boxes.insert(b + 1, ColorBox { start: split, end });
    }

    let mut indices = vec![0u16; n];
    let mut palette = Vec::with_capacity(boxes.len());
    for (k, bx) in boxes.iter().enumerate() {
        let mut sum = [0f64; 3];
        for &p in &order[bx.start..bx.end] {
            indices[p] = k as u16;
            for c in 0..3 {
                sum[c] += f64::from(pixels[p][c]);
            }
        }
        let count = (bx.end - bx.start).max(1) as f64;
        palette.push(sum.map(|s| (s / count) as f32));
    }
    IndexedImage::new(image.width(), image.height(), indices, palette, colors)
        .expect("median cut produces a consistent index map")
}

fn widest_channel(pixels: &[Rgb], members: &[usize]) -> Option<(usize, f32)> {
    if members.is_empty() {
        return None;
    }
    let mut lo = [f32::INFINITY; 3];
    let mut hi = [f32::NEG_INFINITY; 3];
    for &p in members {
        for c in 0..3 {
            lo[c] = lo[c].min(pixels[p][c]);
            hi[c] = hi[c].max(pixels[p][c]);
        }
    }
    let mut best = 0;
    for c in 1..3 {
        if hi[c] - lo[c] > hi[best] - lo[best] {
            best = c;
        }
    }
    Some((best, hi[best] - lo[best]))
}

/// Offset of the value boundary closest to the median of a sorted slice.
/// The slice is known to contain at least two distinct values.
fn balanced_boundary(pixels: &[Rgb], sorted: &[usize], channel: usize) -> usize {
    let mid = sorted.len() / 2;
    let is_boundary = |i: usize| pixels[sorted[i - 1]][channel] < pixels[sorted[i]][channel];
    for step in 0..sorted.len() {
        if mid + step < sorted.len() && mid + step >= 1 && is_boundary(mid + step) {
            return mid + step;
        }
        if step <= mid && mid - step >= 1 && is_boundary(mid - step) {
            return mid - step;
        }
    }
    unreachable!("a box with nonzero range always has a value boundary")
}
