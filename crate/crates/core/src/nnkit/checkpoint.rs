//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "INPK" | version u32 | step u64 | entry count u32
//! per entry: name len u32 | name utf-8 | flags u8 | ndim u32 | dims u32 * ndim
//!            | values f32 * numel | (if flags & 2) adam m, v f32 * numel each
//! ```
//! flags bit 0 marks trainable entries, bit 1 the presence of optimizer state.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"INPK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_f32s<W: Write, S: Scalar>(w: &mut W, vals: &[S]) -> std::io::Result<()> {
    for v in vals {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint<S: Scalar>(params: &ParamStore<S>, path: &Path, with_optimizer: bool) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let mut body = || -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&params.step.to_le_bytes())?;
        w.write_all(&(params.len() as u32).to_le_bytes())?;
        for (name, e) in params.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let flags = e.trainable as u8 | ((with_optimizer as u8) << 1);
            w.write_all(&[flags])?;
            w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
            for &d in &e.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            write_f32s(&mut w, &e.value)?;
            if with_optimizer {
                write_f32s(&mut w, &e.m)?;
                write_f32s(&mut w, &e.v)?;
            }
        }
        w.flush()
    };
    body().map_err(io)
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn f32s<S: Scalar>(&mut self, n: usize) -> Result<Vec<S>> {
        (0..n).map(|_| Ok(S::lit(f32::from_le_bytes(self.bytes()?) as f64))).collect()
    }
}

/// Reads a checkpoint into a fresh store.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<ParamStore<S>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { inner: BufReader::new(f) };
    if &r.bytes::<4>()? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint (bad magic)", path.display())));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let step = u64::from_le_bytes(r.bytes()?);
    let count = r.u32()?;
    let mut params = ParamStore::new();
    params.step = step;
    for _ in 0..count {
        let len = r.u32()? as usize;
        if len > 4096 {
            return Err(Error::Checkpoint(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.inner
            .read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("entry name is not utf-8".into()))?;
        let [flags] = r.bytes::<1>()?;
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!("{name}: implausible rank {ndim}")));
        }
        let shape: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let numel = shape.iter().product();
        let value = r.f32s(numel)?;
        params.insert(&name, &shape, value, flags & 1 == 1)?;
        if flags & 2 == 2 {
            let m = r.f32s(numel)?;
            let v = r.f32s(numel)?;
            let e = params.get_mut(&name)?;
            e.m = m;
            e.v = v;
        }
    }
    Ok(params)
}

/// Overwrites `params` from a checkpoint, requiring identical names and shapes.
pub fn load_into<S: Scalar>(params: &mut ParamStore<S>, path: &Path) -> Result<()> {
    let loaded = load_checkpoint::<S>(path)?;
    for (name, e) in params.iter() {
        let l = loaded
            .get(name)
            .map_err(|_| Error::Checkpoint(format!("checkpoint lacks entry {name}")))?;
        if l.shape != e.shape {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: model {:?}, checkpoint {:?}",
                e.shape, l.shape
            )));
        }
    }
    if let Some(extra) = loaded.names().find(|n| !params.contains(n)) {
        return Err(Error::Checkpoint(format!("checkpoint has unexpected entry {extra}")));
    }
    *params = loaded;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_optimizer_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut p = ParamStore::<f32>::new();
        p.insert("a.weight", &[2, 3], (0..6).map(|i| i as f32 * 0.5).collect(), true).unwrap();
        p.insert("a.running_mean", &[3], vec![0.1, 0.2, 0.3], false).unwrap();
        p.get_mut("a.weight").unwrap().m[2] = 0.25;
        p.step = 17;
        save_checkpoint(&p, &path, true).unwrap();
        let q: ParamStore<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
        let mut fresh = ParamStore::<f32>::new();
        fresh.insert("a.weight", &[2, 3], vec![0.0; 6], true).unwrap();
        fresh.insert("a.running_mean", &[3], vec![0.0; 3], false).unwrap();
        load_into(&mut fresh, &path).unwrap();
        assert_eq!(fresh, p);
    }

    #[test]
    fn rejects_shape_mismatch_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut p = ParamStore::<f32>::new();
        p.insert("w", &[4], vec![1.0; 4], true).unwrap();
        save_checkpoint(&p, &path, false).unwrap();
        let mut other = ParamStore::<f32>::new();
        other.insert("w", &[2, 2], vec![0.0; 4], true).unwrap();
        let err = load_into(&mut other, &path).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"));

        std::fs::write(&path, b"nope").unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }
}
