//! Versioned binary container for model checkpoints.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! "NMVQ"                      magic, 4 bytes
//! u32                         format version
//! u64 + bytes                 config snapshot (UTF-8 `key = value` text)
//! u32                         array count
//! per array:
//!   u32 + bytes               name (UTF-8)
//!   u8                        dtype: 0 = f32, 1 = f64, 2 = i64
//!   u32                       number of axes
//!   u64 * axes                extents
//!   data                      row-major values
//! [u8; 32]                    SHA-256 of every preceding byte
//! ```

use std::path::Path;

use nmvq_autodiff::{ParamStore, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::kv::KvMap;

pub const MAGIC: &[u8; 4] = b"NMVQ";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::I64(v) => v.len(),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
            ArrayData::I64(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub config: KvMap,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new(config: KvMap) -> Self {
        Checkpoint { config, arrays: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: ArrayData) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.push(NamedArray { name: name.into(), shape, data });
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor<f32>) {
        self.push(name, t.shape().to_vec(), ArrayData::F32(t.data().to_vec()));
    }

    /// Stores every parameter under `prefix` + its name.
    pub fn push_params(&mut self, prefix: &str, params: &ParamStore<f32>) {
        for (_, name, t) in params.iter() {
            self.push_tensor(format!("{prefix}{name}"), t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor<f32>> {
        let a = self.get(name).ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?;
        match &a.data {
            ArrayData::F32(v) => Ok(Tensor::new(a.shape.clone(), v.clone())?),
            _ => Err(Error::Checkpoint(format!("array `{name}` is not f32"))),
        }
    }

    pub fn tensor_f64(&self, name: &str) -> Result<Tensor<f64>> {
        let a = self.get(name).ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?;
        match &a.data {
            ArrayData::F64(v) => Ok(Tensor::new(a.shape.clone(), v.clone())?),
            _ => Err(Error::Checkpoint(format!("array `{name}` is not f64"))),
        }
    }

    pub fn ints(&self, name: &str) -> Result<(Vec<usize>, Vec<i64>)> {
        let a = self.get(name).ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?;
        match &a.data {
            ArrayData::I64(v) => Ok((a.shape.clone(), v.clone())),
            _ => Err(Error::Checkpoint(format!("array `{name}` is not i64"))),
        }
    }

    /// Overwrites every parameter in `params` from arrays named `prefix` + name.
    pub fn load_params(&self, prefix: &str, params: &mut ParamStore<f32>) -> Result<()> {
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let key = format!("{prefix}{}", params.name(id));
            let t = self.tensor(&key)?;
            if t.shape() != params.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "`{key}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    params.get(id).shape()
                )));
            }
            *params.get_mut(id) = t;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.push(a.data.tag());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let text_len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = KvMap::parse(text)?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
                .to_string();
            let tag = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = match tag {
                0 => ArrayData::F32(r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => ArrayData::F64(r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                2 => ArrayData::I64(r.take(n * 8)?.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect()),
                other => return Err(Error::Checkpoint(format!("unknown dtype tag {other} for `{name}`"))),
            };
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { config, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
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

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut cfg = KvMap::new();
        cfg.set("kind", "stage1").set("levels", 2);
        let mut ck = Checkpoint::new(cfg);
        ck.push("w", vec![2, 3], ArrayData::F32(vec![1.0, -2.5, 3.0, 0.0, 1e-7, f32::MAX]));
        ck.push("stats", vec![2], ArrayData::F64(vec![0.1, -0.2]));
        ck.push("tokens", vec![3], ArrayData::I64(vec![0, 5, 1023]));
        ck
    }

    #[test]
    fn bytes_round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"NMVQ");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes();
        bytes[20] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(b"XXXX").is_err());
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn params_load_by_name_and_check_shape() {
        let mut ps = ParamStore::<f32>::new();
        ps.add("a", Tensor::full([2], 1.0));
        let mut ck = Checkpoint::new(KvMap::new());
        ck.push_params("m.", &ps);
        let mut other = ParamStore::<f32>::new();
        other.add("a", Tensor::zeros([2]));
        ck.load_params("m.", &mut other).unwrap();
        assert_eq!(other.get(other.find("a").unwrap()).data(), &[1.0, 1.0]);
        let mut wrong = ParamStore::<f32>::new();
        wrong.add("a", Tensor::zeros([3]));
        assert!(ck.load_params("m.", &mut wrong).is_err());
    }
}
