//! Binary tensor exchange files and named-tensor checkpoints.
//!
//! Tensor record layout (little-endian):
//!
//! | offset | size      | field                                  |
//! |--------|-----------|----------------------------------------|
//! | 0      | 8         | magic `MIIPTEN1`                       |
//! | 8      | 1         | dtype tag: `1` = float32, `2` = float64 |
//! | 9      | 1         | rank                                   |
//! | 10     | 2         | reserved, zero                         |
//! | 12     | 8 × rank  | dims, `u64` each                       |
//! | …      | numel × w | row-major payload                      |
//!
//! Checkpoints are `MIIPCKPT`, a `u32` format version, a `u32`-prefixed kind string,
//! a `u64`-prefixed JSON config, a `u32` tensor count, then per tensor a
//! `u32`-prefixed name followed by a float64 tensor record.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

pub const TENSOR_MAGIC: &[u8; 8] = b"MIIPTEN1";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MIIPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn encode_tensor(t: &Tensor, dtype: DType, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(dtype as u8);
    out.push(u8::try_from(t.rank()).expect("rank fits in u8"));
    out.extend_from_slice(&[0, 0]);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated data: wanted {n} bytes at offset {}",
                self.pos
            )));
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

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|e| Error::Format(format!("invalid utf-8: {e}")))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        if self.take(8)? != TENSOR_MAGIC {
            return Err(Error::Format("bad tensor magic".into()));
        }
        let head = self.take(4)?;
        let dtype = match head[0] {
            1 => DType::F32,
            2 => DType::F64,
            other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
        };
        let rank = head[1] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(
                usize::try_from(self.u64()?).map_err(|_| Error::Format("dim overflow".into()))?,
            );
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor too large".into()))?;
        let bytes = self.take(numel * dtype.width())?;
        let data = match dtype {
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        Ok(Tensor::new(&shape, data))
    }
}

pub fn decode_tensor(buf: &[u8]) -> Result<Tensor> {
    let mut r = Reader { buf, pos: 0 };
    let t = r.tensor()?;
    if r.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor",
            buf.len() - r.pos
        )));
    }
    Ok(t)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    encode_tensor(t, dtype, &mut buf);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&buf).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// A model's parameters plus the JSON-encoded configuration that built it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config_json: String,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind.len() as u32).to_le_bytes());
        out.extend_from_slice(self.kind.as_bytes());
        out.extend_from_slice(&(self.config_json.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            encode_tensor(t, DType::F64, &mut out);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let kind_len = r.u32()? as usize;
        let kind = r.string(kind_len)?;
        let cfg_len = r.u64()? as usize;
        let config_json = r.string(cfg_len)?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = r.string(n)?;
            params.insert(name, r.tensor()?);
        }
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            kind,
            config_json,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout_is_fixed() {
        let t = Tensor::new(&[2, 1], vec![1.0, -2.0]);
        let mut buf = Vec::new();
        encode_tensor(&t, DType::F32, &mut buf);
        let mut expected = b"MIIPTEN1".to_vec();
        expected.extend_from_slice(&[1, 2, 0, 0]);
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
        assert_eq!(decode_tensor(&buf).unwrap(), t);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let mut buf = Vec::new();
        encode_tensor(&Tensor::zeros(&[3]), DType::F64, &mut buf);
        assert!(decode_tensor(&buf[..buf.len() - 1]).is_err());
        buf[0] = b'X';
        assert!(decode_tensor(&buf).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut p = ParamStore::new();
        p.insert(
            "a.w",
            Tensor::new(&[2, 2], vec![0.1, 1e-300, -3.5, f64::MIN_POSITIVE]),
        );
        p.insert("b", Tensor::new(&[1], vec![std::f64::consts::PI]));
        let c = Checkpoint {
            kind: "test".into(),
            config_json: "{\"x\":1}".into(),
            params: p,
        };
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }
}
