//! Indexed-color (color type 3) PNG writer and a reader for the same files.

use std::io::{Cursor, Write};

use flate2::write::ZlibEncoder;
use flate2::Compression;

use super::{BlobFormat, EncodedBlob};
use crate::error::{Error, Result};
use crate::imaging::{unit_to_u8, IndexedImage};

const SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];
const COLOR_TYPE_INDEXED: u8 = 3;

/// Smallest legal indexed bit depth that can address `palette_len` entries.
pub fn bit_depth_for(palette_len: usize) -> u8 {
    match palette_len {
        0..=2 => 1,
        3..=4 => 2,
        5..=16 => 4,
        _ => 8,
    }
}

/// Encodes an indexed image as PNG. Unused palette slots are dropped first,
/// so the PLTE chunk and bit depth reflect only the colors actually used.
pub fn encode_indexed_png(ix: &IndexedImage) -> Result<EncodedBlob> {
    let ix = ix.compact();
    let palette_len = ix.palette().len();
    if palette_len > 256 {
        return Err(Error::Capacity(palette_len));
    }
    let (w, h) = (ix.width(), ix.height());
    if w == 0 || h == 0 {
        return Err(Error::arg("cannot encode an empty image"));
    }
    let depth = bit_depth_for(palette_len);

    let mut out = Vec::with_capacity(64 + w * h / 2);
    out.extend_from_slice(&SIGNATURE);

    let mut ihdr = Vec::with_capacity(13);
    ihdr.extend_from_slice(&(w as u32).to_be_bytes());
    ihdr.extend_from_slice(&(h as u32).to_be_bytes());
    ihdr.extend_from_slice(&[depth, COLOR_TYPE_INDEXED, 0, 0, 0]);
    write_chunk(&mut out, b"IHDR", &ihdr);

    let plte: Vec<u8> = ix
        .palette()
        .iter()
        .flat_map(|c| c.map(unit_to_u8))
        .collect();
    write_chunk(&mut out, b"PLTE", &plte);

    let raw = filtered_scanlines(ix.indices(), w, h, depth);
    let mut z = ZlibEncoder::new(Vec::new(), Compression::best());
    z.write_all(&raw)?;
    write_chunk(&mut out, b"IDAT", &z.finish()?);
    write_chunk(&mut out, b"IEND", &[]);

    Ok(EncodedBlob {
        bytes: out,
        width: w,
        height: h,
        format: BlobFormat::PngIndexed,
    })
}

fn write_chunk(out: &mut Vec<u8>, kind: &[u8; 4], data: &[u8]) {
    out.extend_from_slice(&(data.len() as u32).to_be_bytes());
    let mut crc = crc32fast::Hasher::new();
    crc.update(kind);
    crc.update(data);
    out.extend_from_slice(kind);
    out.extend_from_slice(data);
    out.extend_from_slice(&crc.finalize().to_be_bytes());
}

/// Packs each row MSB-first at `depth` bits per index and prefixes it with
/// whichever of filter 0 (None) or 1 (Sub) has the smaller sum of absolute
/// signed residuals.
fn filtered_scanlines(indices: &[u16], w: usize, h: usize, depth: u8) -> Vec<u8> {
    let per_byte = 8 / usize::from(depth);
    let stride = w.div_ceil(per_byte);
    let mut out = Vec::with_capacity(h * (stride + 1));
    let mut packed = vec![0u8; stride];
    let mut sub = vec![0u8; stride];
    for row in indices.chunks_exact(w) {
        packed.fill(0);
        for (x, &i) in row.iter().enumerate() {
            let shift = 8 - usize::from(depth) * (x % per_byte + 1);
            packed[x / per_byte] |= (i as u8) << shift;
        }
        for b in 0..stride {
            let left = if b == 0 { 0 } else { packed[b - 1] };
            sub[b] = packed[b].wrapping_sub(left);
        }
        let cost = |bytes: &[u8]| -> u64 {
            bytes
                .iter()
                .map(|&b| u64::from((b as i8).unsigned_abs()))
                .sum()
        };
        if cost(&sub) < cost(&packed) {
            out.push(1);
            out.extend_from_slice(&sub);
        } else {
            out.push(0);
            out.extend_from_slice(&packed);
        }
    }
    out
}

/// Header fields of an indexed PNG, read back from its bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexedPngInfo {
    pub width: u32,
    pub height: u32,
    pub bit_depth: u8,
    pub palette_entries: usize,
}

/// Decodes an indexed PNG into its index map and palette (8-bit palette
/// values rescaled to `[0, 1]`).
pub fn decode_indexed_png(bytes: &[u8]) -> Result<(IndexedImage, IndexedPngInfo)> {
    let bad = |reason: String| Error::Ingestion {
        path: "<png bytes>".into(),
        reason,
    };
    let mut decoder = ::png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(::png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let info = reader.info();
    if info.color_type != ::png::ColorType::Indexed {
        return Err(bad(format!("color type {:?} is not indexed", info.color_type)));
    }
    let plte = info
        .palette
        .as_ref()
        .ok_or_else(|| bad("missing PLTE chunk".into()))?
        .to_vec();
    let depth = info.bit_depth as u8;
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![
        0u8;
        reader
            .output_buffer_size()
            .ok_or_else(|| bad("image too large".into()))?
    ];
    let frame = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    let per_byte = 8 / usize::from(depth);
    let mask = ((1u16 << depth) - 1) as u8;
    let mut indices = Vec::with_capacity(w * h);
    for row in buf.chunks_exact(frame.line_size).take(h) {
        for x in 0..w {
            let shift = 8 - usize::from(depth) * (x % per_byte + 1);
            indices.push(u16::from((row[x / per_byte] >> shift) & mask));
        }
    }
    let palette: Vec<[f32; 3]> = plte
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]].map(|v| f32::from(v) / 255.0))
        .collect();
    let entries = palette.len();
    let ix = IndexedImage::new(w, h, indices, palette, entries)?;
    Ok((
        ix,
        IndexedPngInfo {
            width: w as u32,
            height: h as u32,
            bit_depth: depth,
            palette_entries: entries,
        },
    ))
}
