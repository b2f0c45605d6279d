//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "PVUDFCKP"
//! version    u32      1
//! manifest   u64 length + UTF-8 JSON
//! count      u32      number of tensors
//! per tensor:
//!   name     u32 length + UTF-8
//!   dtype    u8       0 = f32, 1 = f64
//!   ndim     u32
//!   dims     ndim x u64
//!   nbytes   u64
//!   payload  nbytes of little-endian values, row-major
//! ```
//!
//! Writes go to a temporary file in the target directory and are renamed
//! into place, so a crash never leaves a truncated checkpoint behind.

use super::{DType, Scalar, Tensor};
use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"PVUDFCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl NamedTensor {
    pub fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size());
        for v in t.data() {
            v.write_le(&mut bytes);
        }
        NamedTensor {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    /// Decodes the payload, converting between float widths if needed.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let size = self.dtype.size();
        let data: Vec<T> = match self.dtype {
            DType::F32 => self.bytes.chunks_exact(size).map(|b| T::lit(f32::read_le(b) as f64)).collect(),
            DType::F64 => self.bytes.chunks_exact(size).map(|b| T::lit(f64::read_le(b))).collect(),
        };
        Tensor::from_vec(&self.shape, data)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub manifest: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn read_exact<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64)
        .read_to_end(&mut buf)
        .map_err(|e| fmt_err(format!("reading {what}: {e}")))?;
    if buf.len() != n {
        return Err(fmt_err(format!("truncated checkpoint while reading {what}")));
    }
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r, 4, what)?.try_into().expect("4")))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r, 8, what)?.try_into().expect("8")))
}

// Guards against absurd allocations from corrupted headers.
const MAX_SECTION: u64 = 1 << 34;

impl Checkpoint {
    pub fn new(manifest: serde_json::Value) -> Self {
        Checkpoint {
            manifest,
            tensors: Vec::new(),
        }
    }

    pub fn push<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        self.tensors.push(NamedTensor::from_tensor(name, t));
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.get(name)
            .ok_or_else(|| fmt_err(format!("checkpoint has no tensor '{name}'")))?
            .to_tensor()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let io = |e: std::io::Error| fmt_err(format!("writing checkpoint: {e}"));
        let manifest = serde_json::to_vec(&self.manifest).map_err(|e| fmt_err(e.to_string()))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        buf.extend_from_slice(&manifest);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        w.write_all(&buf).map_err(io)?;
        for t in &self.tensors {
            let mut head = Vec::new();
            head.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            head.extend_from_slice(t.name.as_bytes());
            head.push(t.dtype.code());
            head.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                head.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            head.extend_from_slice(&(t.bytes.len() as u64).to_le_bytes());
            w.write_all(&head).map_err(io)?;
            w.write_all(&t.bytes).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let magic = read_exact(r, 8, "magic")?;
        if magic != MAGIC {
            return Err(fmt_err("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(r, "version")?;
        if version != VERSION {
            return Err(fmt_err(format!("unsupported checkpoint version {version}")));
        }
        let mlen = read_u64(r, "manifest length")?;
        if mlen > MAX_SECTION {
            return Err(fmt_err("manifest length out of range"));
        }
        let manifest: serde_json::Value = serde_json::from_slice(&read_exact(r, mlen as usize, "manifest")?)
            .map_err(|e| fmt_err(format!("manifest is not valid JSON: {e}")))?;
        let count = read_u32(r, "tensor count")?;
        let mut tensors = Vec::with_capacity(count.min(4096) as usize);
        for _ in 0..count {
            let nlen = read_u32(r, "name length")? as u64;
            if nlen > 4096 {
                return Err(fmt_err("tensor name too long"));
            }
            let name = String::from_utf8(read_exact(r, nlen as usize, "name")?)
                .map_err(|_| fmt_err("tensor name is not UTF-8"))?;
            let code = read_exact(r, 1, "dtype")?[0];
            let dtype = DType::from_code(code).ok_or_else(|| fmt_err(format!("unknown dtype code {code}")))?;
            let ndim = read_u32(r, "ndim")?;
            if ndim > 8 {
                return Err(fmt_err(format!("tensor '{name}' has {ndim} dims")));
            }
            let mut shape = Vec::with_capacity(ndim as usize);
            let mut count: u64 = 1;
            for _ in 0..ndim {
                let d = read_u64(r, "dim")?;
                count = count.checked_mul(d).ok_or_else(|| fmt_err("tensor size overflow"))?;
                shape.push(d as usize);
            }
            let nbytes = read_u64(r, "payload length")?;
            if Some(nbytes) != count.checked_mul(dtype.size() as u64) || nbytes > MAX_SECTION {
                return Err(fmt_err(format!("tensor '{name}' payload length does not match its shape")));
            }
            let bytes = read_exact(r, nbytes as usize, "payload")?;
            tensors.push(NamedTensor {
                name,
                dtype,
                shape,
                bytes,
            });
        }
        Ok(Checkpoint { manifest, tensors })
    }

    /// Atomic save: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => std::path::PathBuf::from("."),
        };
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let file_name = path
            .file_name()
            .ok_or_else(|| fmt_err("checkpoint path has no file name"))?
            .to_string_lossy()
            .into_owned();
        let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
        {
            let f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = std::io::BufWriter::new(f);
            self.write_to(&mut w)?;
            let f = w.into_inner().map_err(|e| Error::io(&tmp, e.into_error()))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut std::io::BufReader::new(f))
    }
}
