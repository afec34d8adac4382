//! Versioned, tagged checkpoint container.
//!
//! Layout (little endian):
//! `magic[8] | version u32 | kind len u8 | kind | header len u32 | header
//! JSON | tensor count u32 | tensors | buffer count u32 | buffers`, where a
//! tensor is `name len u16 | name | dtype u8 | rank u8 | dims u64* | data`.
//! Tensors are stored in name order, so equal states give equal bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"CQCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Classifier,
    Quantizer,
}

impl CheckpointKind {
    fn tag(self) -> &'static str {
        match self {
            CheckpointKind::Classifier => "classifier",
            CheckpointKind::Quantizer => "quantizer",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub header: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
    /// Optimizer momentum buffers by parameter name.
    pub buffers: Vec<(String, Tensor)>,
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::CheckpointFormat {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn sorted(mut v: Vec<(String, Tensor)>) -> Vec<(String, Tensor)> {
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}

impl Checkpoint {
    pub fn new<H: Serialize>(
        kind: CheckpointKind,
        header: &H,
        params: &ParamStore,
        buffers: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        let header = serde_json::to_value(header)
            .map_err(|e| Error::Invariant(format!("checkpoint header: {e}")))?;
        Ok(Self {
            kind,
            header,
            tensors: params
                .named_vars()
                .into_iter()
                .map(|(n, v)| (n, v.as_tensor().clone()))
                .collect(),
            buffers: sorted(buffers),
        })
    }

    pub fn header_as<H: DeserializeOwned>(&self, path: &Path) -> Result<H> {
        serde_json::from_value(self.header.clone()).map_err(|e| format_err(path, format!("header: {e}")))
    }

    /// Copies stored tensors into `params`; every parameter must be present
    /// with a matching shape.
    pub fn restore_into(&self, params: &ParamStore, path: &Path) -> Result<()> {
        let names: Vec<String> = params.named_vars().into_iter().map(|(n, _)| n).collect();
        if names.len() != self.tensors.len() {
            return Err(format_err(
                path,
                format!("{} stored tensors for a model with {}", self.tensors.len(), names.len()),
            ));
        }
        for (name, t) in &self.tensors {
            params
                .assign(name, t)
                .map_err(|e| format_err(path, e.to_string()))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let tag = self.kind.tag().as_bytes();
        out.push(tag.len() as u8);
        out.extend_from_slice(tag);
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| Error::Invariant(format!("checkpoint header: {e}")))?;
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for section in [&self.tensors, &self.buffers] {
            out.extend_from_slice(&(section.len() as u32).to_le_bytes());
            for (name, t) in section.iter() {
                write_tensor(&mut out, name, t)?;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path, device: &Device) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(format_err(path, "not a colorquant checkpoint"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                path: path.to_path_buf(),
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let tag_len = r.take(1)?[0] as usize;
        let tag = String::from_utf8_lossy(r.take(tag_len)?).to_string();
        let kind = match tag.as_str() {
            "classifier" => CheckpointKind::Classifier,
            "quantizer" => CheckpointKind::Quantizer,
            other => return Err(format_err(path, format!("unknown kind `{other}`"))),
        };
        let header_len = r.u32()? as usize;
        let header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| format_err(path, format!("header: {e}")))?;
        let mut sections = Vec::with_capacity(2);
        for _ in 0..2 {
            let n = r.u32()? as usize;
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                v.push(r.tensor(device)?);
            }
            sections.push(v);
        }
        if r.pos != bytes.len() {
            return Err(format_err(path, "trailing bytes"));
        }
        let buffers = sections.pop().expect("two sections");
        let tensors = sections.pop().expect("two sections");
        Ok(Self {
            kind,
            header,
            tensors,
            buffers,
        })
    }

    /// Writes to a sibling temporary file, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut tmp = PathBuf::from(path);
        tmp.set_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Loads and checks the container kind.
    pub fn load(path: &Path, expected: CheckpointKind, device: &Device) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let ck = Self::from_bytes(&bytes, path, device)?;
        if ck.kind != expected {
            return Err(Error::CheckpointKind {
                path: path.to_path_buf(),
                found: ck.kind.tag().to_string(),
                expected: expected.tag().to_string(),
            });
        }
        Ok(ck)
    }
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    let flat = t.flatten_all()?;
    let code = match t.dtype() {
        DType::F32 => 0u8,
        DType::F64 => 1u8,
        other => return Err(Error::Invariant(format!("cannot store {other:?} tensors"))),
    };
    out.push(code);
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match code {
        0 => flat.to_vec1::<f32>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        _ => flat.to_vec1::<f64>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err(self.path, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self, device: &Device) -> Result<(String, Tensor)> {
        let name_len = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| format_err(self.path, "tensor name is not UTF-8"))?;
        let code = self.take(1)?[0];
        let rank = self.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize);
        }
        let n: usize = dims.iter().product();
        let t = match code {
            0 => {
                let raw = self.take(n * 4)?;
                let v: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(v, dims, device)?
            }
            1 => {
                let raw = self.take(n * 8)?;
                let v: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::from_vec(v, dims, device)?
            }
            other => return Err(format_err(self.path, format!("unknown dtype code {other}"))),
        };
        Ok((name, t))
    }
}
