//! Self-describing binary tensor container shared by checkpoint (`XCLM`) and
//! crosscoder (`XCCX`) files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic [4]u8 | version u32 | header_len u32 | header (UTF-8 JSON)
//! n_tensors u32
//! repeated: name_len u16 | name | ndim u8 | dims [ndim]u64 | data [prod(dims)]f32
//! ```

use std::path::Path;

use crate::{Error, Result};

pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn from_f64(name: impl Into<String>, dims: Vec<usize>, data: impl IntoIterator<Item = f64>) -> Self {
        let data: Vec<f32> = data.into_iter().map(|x| x as f32).collect();
        debug_assert_eq!(data.len(), dims.iter().product::<usize>());
        NamedTensor {
            name: name.into(),
            dims,
            data,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| f64::from(x)).collect()
    }
}

pub fn encode(magic: &[u8; 4], header: &str, tensors: &[NamedTensor]) -> Vec<u8> {
    let payload: usize = tensors.iter().map(|t| t.data.len() * 4 + t.name.len() + 64).sum();
    let mut out = Vec::with_capacity(16 + header.len() + payload);
    out.extend_from_slice(magic);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dims.len() as u8);
        for &d in &t.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Reader { buf, pos: 0, path }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, "unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self, len: usize) -> Result<String> {
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::format(self.path, "invalid UTF-8"))
    }


    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Decodes a container, checking the magic. Returns the JSON header and tensors.
pub fn decode(bytes: &[u8], magic: &[u8; 4], path: &Path) -> Result<(String, Vec<NamedTensor>)> {
    let mut r = Reader::new(bytes, path);
    if r.take(4)? != magic {
        return Err(Error::format(
            path,
            format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    let version = r.u32()?;
    if version != CONTAINER_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header = r.string(hlen)?;
    let n = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = r.u16()? as usize;
        let name = r.string(name_len)?;
        let ndim = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u64()? as usize);
        }
        let count: usize = dims.iter().product();
        let raw = r.take(count * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(NamedTensor { name, dims, data });
    }
    if !r.is_empty() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Ok((header, tensors))
}

/// Looks up a tensor by name and checks its shape.
pub fn take_tensor(tensors: &[NamedTensor], name: &str, dims: &[usize], path: &Path) -> Result<Vec<f64>> {
    let t = tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))?;
    if t.dims != dims {
        return Err(Error::format(
            path,
            format!("tensor {name} has shape {:?}, expected {:?}", t.dims, dims),
        ));
    }
    Ok(t.to_f64())
}
