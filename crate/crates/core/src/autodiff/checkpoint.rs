//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "CNVS"
//! version      u32      = 1
//! phase        u32
//! step         u64
//! config_hash  u64
//! count        u32      number of tensors
//! per tensor:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   rank       u32
//!   dims       rank x u64
//!   values     prod(dims) x f64
//! ```

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CNVS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub phase: u32,
    pub step: u64,
    pub config_hash: u64,
}

pub fn encode(store: &ParamStore, meta: &CheckpointMeta) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + store.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&meta.phase.to_le_bytes());
    out.extend_from_slice(&meta.step.to_le_bytes());
    out.extend_from_slice(&meta.config_hash.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        let dims = store.dims(id);
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in store.value(id).data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore, CheckpointMeta)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let meta = CheckpointMeta { phase: r.u32("phase")?, step: r.u64("step")?, config_hash: r.u64("config hash")? };
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank).map(|_| r.u64("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product::<usize>().max(if rank == 0 { 1 } else { 0 });
        let raw = r.take(n * 8, &name)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let (rows, cols) = match dims.split_last() {
            None => (1, 1),
            Some((&last, rest)) => (rest.iter().product(), last),
        };
        store
            .register(&name, &dims, Tensor::from_vec(rows, cols, data)?)
            .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    store.set_step_count(meta.step);
    Ok((store, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_exact_round_trip() {
        let mut s = ParamStore::new();
        s.register("enc.w", &[2, 3], Tensor::from_vec(2, 3, vec![1.0, -0.0, 1e-300, 3.5, f64::MIN_POSITIVE, 7.0]).unwrap())
            .unwrap();
        s.register("enc.b", &[3], Tensor::row(vec![0.1, 0.2, 0.3])).unwrap();
        let meta = CheckpointMeta { phase: 2, step: 17, config_hash: 0xdead_beef };
        let bytes = encode(&s, &meta);
        assert_eq!(&bytes[..4], b"CNVS");
        let (back, m2) = decode(&bytes).unwrap();
        assert_eq!(m2, meta);
        assert!(back.values_bitwise_eq(&s));
        assert_eq!(encode(&back, &m2), bytes);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let s = ParamStore::new();
        let mut bytes = encode(&s, &CheckpointMeta::default());
        assert!(decode(&bytes[..10]).is_err());
        bytes.push(0);
        assert!(decode(&bytes).is_err());
        bytes.pop();
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
    }
}
