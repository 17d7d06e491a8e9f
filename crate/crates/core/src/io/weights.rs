//! `DDIW` binary weight blobs.
//!
//! ```text
//! magic "DDIW" | version u32 | layer count u32
//! per layer:  name length u16 | name bytes | tensor count u8 (weight, bias)
//! per tensor: rank u8 | dims u32 * rank | f32 * prod(dims)
//! ```
//!
//! All integers and floats are little-endian; layers are written in name
//! order.

use std::path::Path;

use super::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::network::{AffineParams, WeightStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DDIW";
pub const VERSION: u32 = 1;

pub fn encode_weights(store: &WeightStore<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(2);
        for t in [&p.weight, &p.bias] {
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(
                self.origin,
                format!("truncated while reading {what} at byte {}", self.pos),
            ));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self, layer: &str) -> Result<Tensor<f32>> {
        let rank = self.u8("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32("tensor dims")? as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|c| c.checked_mul(4).map(|_| c))
            .ok_or_else(|| Error::format(self.origin, format!("dimension overflow in layer `{layer}`")))?;
        let payload = self.take(count * 4, "tensor payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Ok(Tensor::from_vec(&dims, data))
    }
}

/// Decode a blob; `origin` labels errors.
pub fn decode_weights(bytes: &[u8], origin: &Path) -> Result<WeightStore<f32>> {
    let mut r = Reader { bytes, pos: 0, origin };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(origin, "bad magic (expected DDIW)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(origin, format!("unsupported version {version}")));
    }
    let layers = r.u32("layer count")?;
    let mut store = WeightStore::new();
    for _ in 0..layers {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "layer name")?)
            .map_err(|_| Error::format(origin, "layer name is not UTF-8"))?
            .to_string();
        let tensors = r.u8("tensor count")?;
        if tensors != 2 {
            return Err(Error::format(
                origin,
                format!("layer `{name}` has {tensors} tensors, expected 2"),
            ));
        }
        let weight = r.tensor(&name)?;
        let bias = r.tensor(&name)?;
        if bias.shape().len() != 1 || weight.shape().first() != Some(&bias.len()) {
            return Err(Error::format(
                origin,
                format!("layer `{name}`: bias length does not match weight rows"),
            ));
        }
        store.insert(name, AffineParams { weight, bias });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(origin, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(store)
}

pub fn save_weights(store: &WeightStore<f32>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_weights(store))
}

pub fn load_weights(path: &Path) -> Result<WeightStore<f32>> {
    decode_weights(&read_file(path)?, path)
}
