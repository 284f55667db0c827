//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `SEREv1`, `u32` tensor count, then per
//! tensor `u8` kind, `u32` name length, name bytes, `u8` dtype tag, `u32`
//! rank, `u64` dims, `f64` payload. A trailer holds the optimizer step,
//! the epoch, the RNG position and the run config as JSON.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::training::OptimizerState;

pub const MAGIC: &[u8; 6] = b"SEREv1";
const DTYPE_F64: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
enum Kind {
    Param = 0,
    Buffer = 1,
    AdamM = 2,
    AdamV = 3,
}

impl Kind {
    fn from_u8(b: u8) -> Result<Self> {
        Ok(match b {
            0 => Kind::Param,
            1 => Kind::Buffer,
            2 => Kind::AdamM,
            3 => Kind::AdamV,
            _ => return Err(Error::Format(format!("unknown tensor kind {b}"))),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub epoch: usize,
    pub store: ParameterStore,
    pub optimizer: OptimizerState,
    pub rng: RngState,
    /// The run config the checkpoint was produced with.
    pub config_json: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors: Vec<(Kind, &String, &Tensor)> = Vec::new();
        tensors.extend(self.store.params().map(|(n, t)| (Kind::Param, n, t)));
        tensors.extend(self.store.buffers().map(|(n, t)| (Kind::Buffer, n, t)));
        tensors.extend(self.optimizer.m.iter().map(|(n, t)| (Kind::AdamM, n, t)));
        tensors.extend(self.optimizer.v.iter().map(|(n, t)| (Kind::AdamV, n, t)));
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (kind, name, t) in tensors {
            b.push(kind as u8);
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.push(DTYPE_F64);
            b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b.extend_from_slice(&self.optimizer.step.to_le_bytes());
        b.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        b.extend_from_slice(&self.rng.seed);
        b.extend_from_slice(&self.rng.stream.to_le_bytes());
        b.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        b.extend_from_slice(&(self.config_json.len() as u64).to_le_bytes());
        b.extend_from_slice(self.config_json.as_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, at: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("not a SEREv1 checkpoint".into()));
        }
        let count = r.u32()? as usize;
        let mut store = ParameterStore::new();
        let (mut m, mut v) = (BTreeMap::new(), BTreeMap::new());
        for _ in 0..count {
            let kind = Kind::from_u8(r.u8()?)?;
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            if r.u8()? != DTYPE_F64 {
                return Err(Error::Format(format!("unsupported dtype for `{name}`")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data)?;
            match kind {
                Kind::Param => store.insert(name, t)?,
                Kind::Buffer => store.insert_buffer(name, t)?,
                Kind::AdamM => {
                    m.insert(name, t);
                }
                Kind::AdamV => {
                    v.insert(name, t);
                }
            }
        }
        let step = r.u64()?;
        let epoch = r.u64()? as usize;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let clen = r.u64()? as usize;
        let config_json = String::from_utf8(r.take(clen)?.to_vec()).map_err(|_| Error::Format("config is not UTF-8".into()))?;
        if r.at != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            epoch,
            store,
            optimizer: OptimizerState { step, m, v },
            rng: RngState { seed, stream, word_pos },
            config_json,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.b.get(self.at..self.at + n).ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
