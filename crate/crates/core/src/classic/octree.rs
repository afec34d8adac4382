use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use crate::imaging::{unit_to_u8, IndexedImage, RgbImage};

const MAX_DEPTH: u8 = 8;

struct Node {
    children: [Option<usize>; 8],
    parent: Option<usize>,
    depth: u8,
    leaf: bool,
    count: u64,
    sum: [f64; 3],
    order: usize,
}

/// Reduction candidate: deepest first, then fewest pixels, then earliest in
/// pre-order traversal.
#[derive(PartialEq, Eq)]
struct Candidate {
    depth: u8,
    count: Reverse<u64>,
    order: Reverse<usize>,
    node: usize,
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.depth, self.count, self.order).cmp(&(other.depth, other.count, other.order))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Octree quantization over 8-bit color codes (depth 8).
///
/// While more than `colors` leaves remain, the deepest reducible node (all
/// children are leaves) with the fewest pixels is folded into a leaf. Each
/// surviving leaf contributes the mean of its pixels to the palette, in
/// pre-order.
pub fn octree_quantize(image: &RgbImage, colors: usize) -> IndexedImage {
    let colors = colors.max(1);
    let mut nodes = vec![Node {
        children: [None; 8],
        parent: None,
        depth: 0,
        leaf: false,
        count: 0,
        sum: [0.0; 3],
        order: 0,
    }];

    let codes: Vec<[u8; 3]> = image.pixels().map(|p| p.map(unit_to_u8)).collect();
    for (p, code) in image.pixels().zip(&codes) {
        let mut at = 0;
        for depth in 0..MAX_DEPTH {
            accumulate(&mut nodes[at], &p);
            let slot = child_slot(code, depth);
            at = match nodes[at].children[slot] {
                Some(c) => c,
                None => {
                    let id = nodes.len();
                    nodes.push(Node {
                        children: [None; 8],
                        parent: Some(at),
                        depth: depth + 1,
                        leaf: depth + 1 == MAX_DEPTH,
                        count: 0,
                        sum: [0.0; 3],
                        order: 0,
                    });
                    nodes[at].children[slot] = Some(id);
                    id
                }
            };
        }
        accumulate(&mut nodes[at], &p);
    }
    if image.pixel_count() == 0 {
        nodes[0].leaf = true;
    }

    // Pre-order numbering for deterministic tie-breaks.
    let mut stack = vec![0usize];
    let mut next = 0;
    while let Some(n) = stack.pop() {
        nodes[n].order = next;
        next += 1;
        for c in nodes[n].children.iter().rev().flatten() {
            stack.push(*c);
        }
    }

    let mut leaves = nodes.iter().filter(|n| n.leaf).count();
    let mut heap = BinaryHeap::new();
    for (id, node) in nodes.iter().enumerate() {
        if is_reducible(&nodes, node) {
            heap.push(candidate(&nodes, id));
        }
    }
    while leaves > colors {
        let Some(Candidate { node, .. }) = heap.pop() else {
            break;
        };
        let merged = nodes[node].children.iter().flatten().count();
        nodes[node].children = [None; 8];
        nodes[node].leaf = true;
        leaves = leaves + 1 - merged;
        if let Some(parent) = nodes[node].parent {
            if is_reducible(&nodes, &nodes[parent]) {
                heap.push(candidate(&nodes, parent));
            }
        }
    }

    // Palette in pre-order over surviving leaves.
    let mut palette_slot = vec![usize::MAX; nodes.len()];
    let mut palette = Vec::new();
    let mut stack = vec![0usize];
    while let Some(n) = stack.pop() {
        if nodes[n].leaf {
            palette_slot[n] = palette.len();
            let count = nodes[n].count.max(1) as f64;
            palette.push(nodes[n].sum.map(|s| (s / count) as f32));
        } else {
            for c in nodes[n].children.iter().rev().flatten() {
                stack.push(*c);
            }
        }
    }

    let indices = codes
        .iter()
        .map(|code| {
            let mut at = 0;
            let mut depth = 0;
            while !nodes[at].leaf {
                at = nodes[at].children[child_slot(code, depth)]
                    .expect("every pixel path exists in the tree");
                depth += 1;
            }
            palette_slot[at] as u16
        })
        .collect();
    IndexedImage::new(image.width(), image.height(), indices, palette, colors)
        .expect("octree produces a consistent index map")
}

fn accumulate(node: &mut Node, p: &[f32; 3]) {
    node.count += 1;
    for c in 0..3 {
        node.sum[c] += f64::from(p[c]);
    }
}

fn child_slot(code: &[u8; 3], depth: u8) -> usize {
    let shift = 7 - depth;
    let bit = |v: u8| usize::from((v >> shift) & 1);
    (bit(code[0]) << 2) | (bit(code[1]) << 1) | bit(code[2])
}

fn is_reducible(nodes: &[Node], node: &Node) -> bool {
    !node.leaf
        && node
            .children
            .iter()
            .flatten()
            .all(|&c| nodes[c].leaf)
}

fn candidate(nodes: &[Node], id: usize) -> Candidate {
    Candidate {
        depth: nodes[id].depth,
        count: Reverse(nodes[id].count),
        order: Reverse(nodes[id].order),
        node: id,
    }
}
