//! Binary container for named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SDNC" | u32 version | u32 header length | header (UTF-8 JSON)
//! u32 tensor count
//! per tensor: u32 name length | name | u8 dtype tag | u32 rank | u64 dims[rank] | payload
//! ```
//!
//! Checkpoints carry the model config as the header; teacher caches reuse the
//! container with their own header.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::rng::RngState;
use crate::tensor::{DType, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SDNC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serializes `header` and `tensors` and writes them to `path`.
pub fn write_tensor_file<T: Scalar>(path: &Path, header: &str, tensors: &[(String, Tensor<T>)]) -> Result<()> {
    let payload: usize = tensors.iter().map(|(n, t)| n.len() + 16 + 8 * t.rank() + t.len() * T::DTYPE.size()).sum();
    let mut out = Vec::with_capacity(16 + header.len() + payload);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, header.len() as u32);
    out.extend_from_slice(header.as_bytes());
    put_u32(&mut out, tensors.len() as u32);
    for (name, t) in tensors {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        put_u32(&mut out, t.rank() as u32);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::format_at_byte(self.path, self.pos, message)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Reads a container written by [`write_tensor_file`], converting payloads
/// to `T` when stored at the other precision.
pub fn read_tensor_file<T: Scalar>(path: &Path) -> Result<(String, Vec<(String, Tensor<T>)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic, expected SDNC"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        r.pos -= 4;
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let header_len = r.u32("header length")? as usize;
    let header = std::str::from_utf8(r.take(header_len, "header")?)
        .map_err(|_| r.fail("header is not UTF-8"))?
        .to_string();
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| r.fail("tensor name is not UTF-8"))?
            .to_string();
        let tag = r.take(1, "dtype tag")?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| r.fail(format!("unknown dtype tag {tag}")))?;
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(r.fail(format!("implausible rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| r.fail("shape overflows"))?;
        let start = r.pos;
        let raw = r.take(len.checked_mul(dtype.size()).ok_or_else(|| r.fail("payload overflows"))?, "payload")?;
        let data: Vec<T> = match dtype {
            d if d == T::DTYPE => raw.chunks_exact(d.size()).map(T::read_le).collect(),
            DType::F32 => raw.chunks_exact(4).map(|c| T::from_f64_lossy(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::from_f64_lossy(f64::read_le(c))).collect(),
        };
        let tensor = Tensor::new(&shape, data).map_err(|e| Error::format_at_byte(path, start, format!("{name}: {e}")))?;
        tensors.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after last tensor"));
    }
    Ok((header, tensors))
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let header = serde_json::to_string(model.config()).map_err(|e| Error::Config(e.to_string()))?;
    write_tensor_file(path, &header, &model.named_tensors())
}

/// Loads a checkpoint; every tensor of the configured architecture must be
/// present exactly once.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let (header, tensors) = read_tensor_file::<T>(path)?;
    let config: ModelConfig = serde_json::from_str(&header)
        .map_err(|e| Error::Format { path: path.into(), location: "header".into(), message: e.to_string() })?;
    let mut model = build_model::<T>(&config, &mut RngState::new(0))?;
    let expected = model.named_tensors().len();
    if tensors.len() != expected {
        return Err(Error::Format {
            path: path.into(),
            location: "tensor table".into(),
            message: format!("{} tensors stored, architecture has {expected}", tensors.len()),
        });
    }
    let mut seen = std::collections::HashSet::new();
    for (name, t) in tensors {
        if !seen.insert(name.clone()) {
            return Err(Error::Format { path: path.into(), location: "tensor table".into(), message: format!("duplicate tensor {name}") });
        }
        model
            .set_tensor(&name, t)
            .map_err(|e| Error::Format { path: path.into(), location: "tensor table".into(), message: e.to_string() })?;
    }
    Ok(model)
}
