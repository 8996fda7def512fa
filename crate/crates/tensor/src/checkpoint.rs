//! Versioned binary container of named arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"CTCK"
//! version u32 (= 1)
//! count   u32
//! count x { name_len u32, name utf-8, ndim u32, dims u64 x ndim, values f64 x prod(dims) }
//! ```

use std::io::{Read, Write};

use crate::error::{KernelError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CTCK";
pub const VERSION: u32 = 1;

fn io_err(e: std::io::Error) -> KernelError {
    KernelError::Checkpoint(e.to_string())
}

pub fn write_arrays<W: Write>(mut w: W, arrays: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(arrays.len() as u32).to_le_bytes()).map_err(io_err)?;
    for (name, t) in arrays {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes()).map_err(io_err)?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_arrays<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(KernelError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(KernelError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name).map_err(|e| KernelError::Checkpoint(e.to_string()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u64(&mut r)? as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b).map_err(io_err)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push((name, Tensor::new(dims, data)?));
    }
    Ok(out)
}

pub fn save_store<W: Write>(w: W, store: &ParamStore) -> Result<()> {
    let arrays: Vec<_> = store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect();
    write_arrays(w, &arrays)
}

pub fn load_store<R: Read>(r: R, store: &mut ParamStore) -> Result<()> {
    store.load_named(read_arrays(r)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_round_trip() {
        let mut a = ParamStore::new(7);
        a.normal("x", 3, 2, 1.0, true);
        a.normal("y", 1, 5, 1.0, false);
        let mut buf = Vec::new();
        save_store(&mut buf, &a).unwrap();
        let mut b = ParamStore::new(99);
        b.normal("x", 3, 2, 1.0, true);
        b.normal("y", 1, 5, 1.0, false);
        load_store(buf.as_slice(), &mut b).unwrap();
        for ((_, p), (_, q)) in a.iter().zip(b.iter()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        assert!(read_arrays(&b"NOPE\x01\0\0\0\0\0\0\0"[..]).is_err());
        assert!(read_arrays(&b"CTCK\x02\0\0\0\0\0\0\0"[..]).is_err());
    }
}
