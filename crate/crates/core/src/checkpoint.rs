//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic            8 bytes  "ALUMCKPT"
//! version          u32      1
//! descriptor_len   u32
//! descriptor       UTF-8 architecture descriptor (key=value lines)
//! seed             u64
//! epochs_done      u64
//! param_count      u32
//! per parameter:
//!   name_len       u32
//!   name           UTF-8
//!   rank           u32
//!   dims           rank × u64
//!   values         product(dims) × f64 (IEEE-754 bits)
//! ```
//!
//! Random streams are keyed by `(seed, epoch, batch, ...)`, so the seed and
//! epoch count are the whole generator state.

use std::io::{Read, Write};

use crate::error::{AlumError, Result};
use crate::network::{Architecture, Network};
use crate::tensor::DiffArray;

pub const MAGIC: &[u8; 8] = b"ALUMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub seed: u64,
    pub epochs_done: u64,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| AlumError::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.network.arch.descriptor())?;
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.epochs_done.to_le_bytes());
        put_u32(&mut out, self.network.params.len())?;
        for p in &self.network.params {
            put_str(&mut out, &p.name)?;
            put_u32(&mut out, p.array.shape().len())?;
            for &d in p.array.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.array.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(AlumError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(AlumError::Format(format!("unsupported checkpoint version {version}")));
        }
        let descriptor = r.string()?;
        let arch = Architecture::from_descriptor(&descriptor)?;
        let seed = r.u64()?;
        let epochs_done = r.u64()?;
        let count = r.u32()? as usize;
        // a fresh network gives names, groups and expected shapes
        let mut network = Network::init(arch, 0)?;
        if count != network.params.len() {
            return Err(AlumError::Format(format!(
                "checkpoint has {count} parameters, architecture needs {}",
                network.params.len()
            )));
        }
        for p in &mut network.params {
            let name = r.string()?;
            if name != p.name {
                return Err(AlumError::Format(format!(
                    "expected parameter `{}`, found `{name}`",
                    p.name
                )));
            }
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if dims != p.array.shape() {
                return Err(AlumError::Format(format!(
                    "parameter `{name}` has shape {dims:?}, expected {:?}",
                    p.array.shape()
                )));
            }
            let values = (0..p.array.len()).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            p.array = DiffArray::param(&dims, values)?;
        }
        if r.pos != bytes.len() {
            return Err(AlumError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            network,
            seed,
            epochs_done,
        })
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| AlumError::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| AlumError::Format(e.to_string()))
    }
}
