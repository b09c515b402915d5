//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "MSFTCKPT"
//! version      u32      1
//! config_len   u32      byte length of the JSON-encoded ModelConfig
//! config       [u8]     UTF-8 JSON
//! n_tensors    u32
//! repeated n_tensors times:
//!   name_len   u32
//!   name       [u8]     UTF-8
//!   ndim       u32
//!   dims       u64 * ndim
//!   values     f64 * product(dims), row-major
//! ```
//!
//! Tensor names and shapes must match the layout that the stored config
//! produces, in order.

use std::io::{Read, Write};
use std::path::Path;

use super::lm::{LanguageModel, ModelConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// First eight bytes of every checkpoint file.
pub const MAGIC: &[u8; 8] = b"MSFTCKPT";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &LanguageModel, mut out: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_vec(model.config())?;
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    let params = model.params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)
        .map_err(|e| Error::Checkpoint(format!("write failed: {e}")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<LanguageModel> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config_len = cur.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(cur.take(config_len)?)?;
    let mut model = LanguageModel::new(config)?;

    let n = cur.u32()? as usize;
    if n != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {n}",
            model.params().len()
        )));
    }
    for i in 0..n {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_owned();
        let ndim = cur.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let expected_name = &model.params().names()[i];
        let expected = &model.params().tensors()[i];
        if &name != expected_name || shape != expected.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {i}: found {name} {shape:?}, expected {expected_name} {:?}",
                expected.shape()
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        model.params_mut().tensors_mut()[i] = Tensor::new(shape, data)?;
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(model)
}

pub fn save(model: &LanguageModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    crate::io::write_atomic(path, &buf)
}

pub fn load(path: &Path) -> Result<LanguageModel> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}
