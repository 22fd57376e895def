//! Binary parameter container:
//!
//! ```text
//! magic "ODMTCKP1" | u64 count | count × (u64 name_len | name utf-8 |
//!   u64 rank | rank × u64 dim | f64 values)
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::numerics::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"ODMTCKP1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint lacks parameter {0}")]
    Missing(String),
    #[error("parameter {name}: checkpoint shape {found:?}, model shape {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

pub fn write_checkpoint<W: Write>(mut w: W, store: &ParamStore) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (_, p) in store.iter() {
        w.write_all(&(p.name.len() as u64).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u64).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Named tensors in file order.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let count = read_u64(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u64(&mut r)? as usize;
        if len > 4096 {
            return Err(CheckpointError::Malformed(format!("name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let rank = read_u64(&mut r)? as usize;
        if rank > 8 {
            return Err(CheckpointError::Malformed(format!("{name}: rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<_, _>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save(path: &Path, store: &ParamStore) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, store)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Overwrites every parameter of `store` from the file at `path`.
pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<(), CheckpointError> {
    let tensors = read_checkpoint(io::BufReader::new(fs::File::open(path)?))?;
    restore(store, tensors)
}

pub fn restore(store: &mut ParamStore, tensors: Vec<(String, Tensor)>) -> Result<(), CheckpointError> {
    let mut by_name: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    for p in store.iter_mut() {
        let t = by_name
            .remove(&p.name)
            .ok_or_else(|| CheckpointError::Missing(p.name.clone()))?;
        if t.shape() != p.value.shape() {
            return Err(CheckpointError::Shape {
                name: p.name.clone(),
                expected: p.value.shape().to_vec(),
                found: t.shape().to_vec(),
            });
        }
        p.value = t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.0, 1e-300, f64::MAX]).unwrap());
        s.add("b", Tensor::vector(&[0.25]));
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let s = store();
        save(&path, &s).unwrap();
        let mut t = store();
        t.iter_mut().for_each(|p| p.value.fill(9.0));
        load_into(&path, &mut t).unwrap();
        for ((_, a), (_, b)) in s.iter().zip(t.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn wrong_magic_and_shape_are_rejected() {
        assert!(matches!(read_checkpoint(&b"NOTACKPT\0\0\0\0\0\0\0\0"[..]), Err(CheckpointError::Magic)));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store()).unwrap();
        let mut other = ParamStore::new();
        other.add("a.w", Tensor::zeros(&[3, 2]));
        other.add("b", Tensor::zeros(&[1]));
        let err = restore(&mut other, read_checkpoint(&buf[..]).unwrap()).unwrap_err();
        assert!(matches!(err, CheckpointError::Shape { .. }));
        let mut missing = ParamStore::new();
        missing.add("c", Tensor::zeros(&[1]));
        assert!(matches!(
            restore(&mut missing, read_checkpoint(&buf[..]).unwrap()),
            Err(CheckpointError::Missing(n)) if n == "c"
        ));
    }
}
