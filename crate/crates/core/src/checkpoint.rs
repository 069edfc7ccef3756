//! Versioned binary checkpoints for parameter sets.
//!
//! Layout (little-endian):
//! `b"S3DCKPT\0"`, `u32` version, `u32` header length, UTF-8 JSON header
//! `{"kind": .., "arch": ..}`, `u32` tensor count, then per tensor:
//! `u32` name length, name bytes, `u32` rank, `u64` dims, `f64` values.

use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::{ParamSet, Tensor};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"S3DCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub kind: String,
    pub arch: Value,
}

pub fn save<T: Scalar>(path: &Path, kind: &str, arch: &Value, params: &ParamSet<T>) -> Result<()> {
    let header = serde_json::json!({ "kind": kind, "arch": arch });
    let header = serde_json::to_vec(&header).expect("json header");
    let mut out = Vec::with_capacity(64 + params.scalar_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.f64().to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn parse_header(r: &mut Reader<'_>) -> Result<Header> {
    if r.take(8)? != MAGIC {
        return Err(Error::format(r.path, "bad checkpoint magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(r.path, format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let raw = r.take(len)?;
    let v: Value = serde_json::from_slice(raw).map_err(|e| Error::format(r.path, format!("header: {e}")))?;
    let kind = v["kind"]
        .as_str()
        .ok_or_else(|| Error::format(r.path, "header missing kind"))?
        .to_string();
    Ok(Header { kind, arch: v["arch"].clone() })
}

pub fn read_header(path: &Path) -> Result<Header> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_header(&mut Reader { buf: &buf, pos: 0, path })
}

/// Loads a checkpoint, rejecting it unless kind and architecture match.
pub fn load<T: Scalar>(path: &Path, kind: &str, arch: &Value) -> Result<ParamSet<T>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    let header = parse_header(&mut r)?;
    if header.kind != kind {
        return Err(Error::format(path, format!("expected a {kind} checkpoint, found {}", header.kind)));
    }
    if &header.arch != arch {
        return Err(Error::format(
            path,
            format!("architecture mismatch: checkpoint has {}, expected {}", header.arch, arch),
        ));
    }
    let count = r.u32()? as usize;
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(T::of(r.f64()?));
        }
        names.push(name);
        tensors.push(Tensor::new(shape, data));
    }
    if r.pos != buf.len() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Ok(ParamSet::from_parts(names, tensors))
}

/// Replaces `target`'s values with `loaded`, requiring identical names and shapes.
pub fn adopt<T: Scalar>(path: &Path, target: &mut ParamSet<T>, loaded: ParamSet<T>) -> Result<()> {
    if target.len() != loaded.len() {
        return Err(Error::format(path, "parameter count mismatch"));
    }
    for i in 0..target.len() {
        if target.name(i) != loaded.name(i) || target.get(i).shape != loaded.get(i).shape {
            return Err(Error::format(path, format!("parameter {} does not match", target.name(i))));
        }
    }
    *target = loaded;
    Ok(())
}
