//! Sectioned binary container shared by the model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        [u8; 4]
//! version      u32            (= 1)
//! n_sections   u32
//! section*     name_len u32, name utf-8, kind u8, payload
//!   kind 0     tensor: ndim u32, dims u32 × ndim, values f32 × Π dims
//!   kind 1     bytes:  len u32, data
//! ```
//!
//! Tensors are stored as `f32`; everything is rounded on the way in so an
//! in-memory model and its reloaded copy hash identically.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CONTAINER_VERSION: u32 = 1;

const KIND_TENSOR: u8 = 0;
const KIND_BYTES: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
enum Section {
    Tensor(Tensor),
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    magic: [u8; 4],
    sections: Vec<(String, Section)>,
}

/// SHA-256 over the `f32` renderings of `tensors`, shapes included.
pub fn content_hash<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> [u8; 32] {
    let mut h = Sha256::new();
    for t in tensors {
        h.update((t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u32).to_le_bytes());
        }
        for v in t.values() {
            h.update((*v as f32).to_le_bytes());
        }
    }
    h.finalize().into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Container {
    pub fn new(magic: [u8; 4]) -> Self {
        Container {
            magic,
            sections: Vec::new(),
        }
    }

    pub fn magic(&self) -> [u8; 4] {
        self.magic
    }

    pub fn push_tensor(&mut self, name: &str, t: &Tensor) {
        self.sections.push((name.to_string(), Section::Tensor(t.round_f32())));
    }

    pub fn push_bytes(&mut self, name: &str, data: Vec<u8>) {
        self.sections.push((name.to_string(), Section::Bytes(data)));
    }

    pub fn push_json<T: Serialize>(&mut self, name: &str, value: &T) {
        let data = serde_json::to_vec(value).expect("config values serialize");
        self.push_bytes(name, data);
    }

    fn find(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::format(String::from_utf8_lossy(&self.magic), 0, format!("missing section {name:?}")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        match self.find(name)? {
            Section::Tensor(t) => Ok(t.clone()),
            Section::Bytes(_) => Err(Error::format("<container>", 0, format!("section {name:?} is not a tensor"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.find(name)? {
            Section::Bytes(b) => Ok(b),
            Section::Tensor(_) => Err(Error::format("<container>", 0, format!("section {name:?} is not raw bytes"))),
        }
    }

    pub fn json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        serde_json::from_slice(self.bytes(name)?)
            .map_err(|e| Error::format("<container>", 0, format!("section {name:?}: {e}")))
    }

    pub fn hash32(&self, name: &str) -> Result<[u8; 32]> {
        self.bytes(name)?
            .try_into()
            .map_err(|_| Error::format("<container>", 0, format!("section {name:?} is not a 32-byte hash")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, section) in &self.sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match section {
                Section::Tensor(t) => {
                    out.push(KIND_TENSOR);
                    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u32).to_le_bytes());
                    }
                    for v in t.values() {
                        out.extend_from_slice(&(*v as f32).to_le_bytes());
                    }
                }
                Section::Bytes(b) => {
                    out.push(KIND_BYTES);
                    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
                    out.extend_from_slice(b);
                }
            }
        }
        out
    }

    pub fn parse(bytes: &[u8], magic: [u8; 4], origin: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        let found: [u8; 4] = r.take(4)?.try_into().unwrap();
        if found != magic {
            return Err(Error::BadMagic {
                path: origin.to_string(),
                expected: magic,
                found,
            });
        }
        let version = r.u32()?;
        if version != CONTAINER_VERSION {
            return Err(Error::Version {
                path: origin.to_string(),
                found: version,
            });
        }
        let n = r.u32()? as usize;
        let mut sections = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::format(origin, 0, "section name is not UTF-8"))?;
            let kind = r.take(1)?[0];
            let section = match kind {
                KIND_TENSOR => {
                    let ndim = r.u32()? as usize;
                    let mut shape = Vec::with_capacity(ndim);
                    for _ in 0..ndim {
                        shape.push(r.u32()? as usize);
                    }
                    let count: usize = shape.iter().product();
                    let raw = r.take(count.checked_mul(4).ok_or_else(|| r.truncated("tensor size overflow"))?)?;
                    let values = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                        .collect();
                    Section::Tensor(Tensor::new(shape, values)?)
                }
                KIND_BYTES => {
                    let len = r.u32()? as usize;
                    Section::Bytes(r.take(len)?.to_vec())
                }
                other => {
                    return Err(Error::format(origin, 0, format!("unknown section kind {other} for {name:?}")))
                }
            };
            sections.push((name, section));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(origin, 0, "trailing bytes after last section"));
        }
        Ok(Container { magic, sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, magic: [u8; 4]) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::parse(&bytes, magic, &path.display().to_string())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn truncated(&self, msg: &str) -> Error {
        Error::Truncated {
            path: self.origin.to_string(),
            message: format!("{msg} at byte {}", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.truncated(&format!("need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
