//! Single-file weight container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic "LSWT" | version | descriptor length | descriptor (UTF-8 JSON)
//! tensor count | per tensor: name length, name, rank, dims..., f32 LE data
//! ```
//!
//! The descriptor names the architecture and carries its hyperparameters.
//! Loading refuses descriptors whose architecture is not in [`ARCHITECTURES`]
//! or differs from the one the caller asked for.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::nn::device;

const MAGIC: &[u8; 4] = b"LSWT";
const VERSION: u32 = 1;

/// Every architecture this build knows how to reconstruct.
pub const ARCHITECTURES: &[&str] = &[
    "vae",
    "latent_diffusion",
    "control_vae",
    "denoiser",
    "detector/convnet_small",
    "detector/convnet_deep",
    "detector/attention_lite",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub arch: String,
    pub config: serde_json::Value,
    pub trained: bool,
}

impl Descriptor {
    pub fn new<C: Serialize>(arch: &str, config: &C, trained: bool) -> Result<Self> {
        Ok(Self {
            arch: arch.to_string(),
            config: serde_json::to_value(config).map_err(|e| Error::Format(e.to_string()))?,
            trained,
        })
    }

    pub fn config_as<C: for<'de> Deserialize<'de>>(&self) -> Result<C> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| Error::Format(format!("descriptor for `{}`: {e}", self.arch)))
    }
}

pub fn save(path: &Path, descriptor: &Descriptor, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    if !ARCHITECTURES.contains(&descriptor.arch.as_str()) {
        return Err(Error::Format(format!("unregistered architecture `{}`", descriptor.arch)));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    let desc = serde_json::to_vec(descriptor).map_err(|e| Error::Format(e.to_string()))?;
    put_u32(&mut buf, desc.len() as u32);
    buf.extend_from_slice(&desc);
    put_u32(&mut buf, tensors.len() as u32);
    for (name, t) in tensors {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.rank() as u32);
        for d in t.dims() {
            put_u32(&mut buf, *d as u32);
        }
        for v in t.flatten_all()?.to_vec1::<f32>()? {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    let mut f = fs::File::create(path).at(path)?;
    f.write_all(&buf).at(path)?;
    Ok(())
}

pub fn load(path: &Path, expected_arch: &str) -> Result<(Descriptor, BTreeMap<String, Tensor>)> {
    let mut bytes = Vec::new();
    fs::File::open(path).at(path)?.read_to_end(&mut bytes).at(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format(format!("{}: not a weight container", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("{}: unsupported container version {version}", path.display())));
    }
    let len = r.u32()? as usize;
    let descriptor: Descriptor =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format(format!("{}: descriptor: {e}", path.display())))?;
    if !ARCHITECTURES.contains(&descriptor.arch.as_str()) {
        return Err(Error::Format(format!("{}: unregistered architecture `{}`", path.display(), descriptor.arch)));
    }
    if descriptor.arch != expected_arch {
        return Err(Error::Format(format!(
            "{}: holds `{}` weights, expected `{expected_arch}`",
            path.display(),
            descriptor.arch
        )));
    }
    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
        let rank = r.u32()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.insert(name, Tensor::from_vec(data, dims, &device())?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{}: trailing bytes", path.display())));
    }
    Ok((descriptor, tensors))
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated weight container".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_arch_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), Tensor::new(&[[1f32, -2.5], [3.0, 0.125]], &device()).unwrap());
        let d = Descriptor::new("vae", &serde_json::json!({"k": 1}), true).unwrap();
        save(&path, &d, &m).unwrap();
        let (d2, m2) = load(&path, "vae").unwrap();
        assert_eq!(d, d2);
        assert_eq!(m2["a"].to_vec2::<f32>().unwrap(), vec![vec![1.0, -2.5], vec![3.0, 0.125]]);
        assert!(matches!(load(&path, "denoiser"), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_unregistered_and_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let d = Descriptor::new("mystery", &0, false).unwrap();
        assert!(save(&path, &d, &BTreeMap::new()).is_err());
        fs::write(&path, b"LSWT\x01\x00").unwrap();
        assert!(matches!(load(&path, "vae"), Err(Error::Format(_))));
    }
}
