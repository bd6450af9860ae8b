//! Versioned binary weight checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "MMGCKPT\0"
//! version    u32      1
//! precision  u8       8 = float64 (training), 4 = float32 (inference)
//! manifest   u32 length + UTF-8 JSON of the NetworkSpec
//! count      u32      number of tensors
//! table      per tensor: u16 name length, name, u8 rank, rank × u32 dims
//! blobs      per tensor, in table order: values at the stated precision
//! ```
//!
//! Tensor names are `node/role` with roles `kernel`, `bias`, `weight`,
//! `gamma`, `beta`, `moving_mean` and `moving_variance`. Convolution kernels
//! are `[k, c_in, filters]` (1-D) or `[kh, kw, c_in, filters]` (2-D); dense
//! weights are `[in, out]`.

use std::path::Path;

use super::network::{Network, NetworkSpec};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MMGCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    fn width(self) -> u8 {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

pub fn encode_checkpoint(network: &Network, precision: Precision) -> Vec<u8> {
    let manifest = serde_json::to_vec(network.spec()).expect("spec serialises");
    let tensors = network.state_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(precision.width());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for d in t.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
    }
    for (_, t) in &tensors {
        for v in t.data() {
            match precision {
                Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                Precision::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Rebuilds the network described by the manifest and loads its tensors.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let width = r.u8()?;
    if width != 4 && width != 8 {
        return Err(Error::Format(format!("unsupported precision width {width}")));
    }
    let manifest_len = r.u32()? as usize;
    let spec: NetworkSpec = serde_json::from_slice(r.take(manifest_len)?)
        .map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        table.push((name, shape));
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, shape) in table {
        let n: usize = shape.iter().product();
        let raw = r.take(n * width as usize)?;
        let data: Vec<f64> = if width == 8 {
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
        } else {
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect()
        };
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    let mut network = Network::new(spec, 0)?;
    network.load_state(&tensors)?;
    Ok(network)
}

pub fn save_checkpoint(path: &Path, network: &Network, precision: Precision) -> Result<()> {
    std::fs::write(path, encode_checkpoint(network, precision)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
