//! Binary checkpoint container for a [`NetworkBundle`].
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes   "JLUB"
//! version      u16       currently 1
//! header_len   u32
//! header       header_len bytes of JSON (the Architecture)
//! n_tensors    u32
//! per tensor:  rows u32, cols u32, rows*cols f64
//! ```
//!
//! Tensors appear in [`NetworkBundle::all_params`] order: per extractor
//! layer weight then bias, the primary head, then each secondary head.

use std::path::Path;

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::model::{init_bundle, Architecture, NetworkBundle};

pub const MAGIC: &[u8; 4] = b"JLUB";
pub const VERSION: u16 = 1;

pub fn to_bytes(bundle: &NetworkBundle) -> Vec<u8> {
    let header = serde_json::to_vec(&bundle.architecture()).expect("architecture serializes");
    let params = bundle.all_params();
    let mut out = Vec::with_capacity(64 + header.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        let (r, c) = p.shape();
        out.extend_from_slice(&(r as u32).to_le_bytes());
        out.extend_from_slice(&(c as u32).to_le_bytes());
        for v in p.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            ))),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<NetworkBundle> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic bytes, not a checkpoint".into()));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let header_len = r.u32("header length")? as usize;
    let arch: Architecture = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| Error::Format(format!("bad architecture header: {e}")))?;
    let mut bundle = init_bundle(&arch, 0).map_err(|e| Error::Format(e.to_string()))?;

    let n = r.u32("tensor count")? as usize;
    let mut params = bundle.all_params_mut();
    if n != params.len() {
        return Err(Error::Format(format!(
            "header describes {} tensors but file holds {n}",
            params.len()
        )));
    }
    for (i, p) in params.iter_mut().enumerate() {
        let rows = r.u32("tensor shape")? as usize;
        let cols = r.u32("tensor shape")? as usize;
        if (rows, cols) != p.shape() {
            return Err(Error::Format(format!(
                "tensor {i} has shape {:?}, architecture expects {:?}",
                (rows, cols),
                p.shape()
            )));
        }
        let raw = r.take(rows * cols * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        p.value = Matrix::from_shape_vec((rows, cols), data).expect("shape checked");
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last tensor",
            buf.len() - r.pos
        )));
    }
    Ok(bundle)
}

pub fn save_bundle(bundle: &NetworkBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(bundle)).map_err(|e| Error::io(path, e))
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<NetworkBundle> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}
