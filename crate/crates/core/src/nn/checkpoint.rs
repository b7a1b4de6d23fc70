//! Versioned binary checkpoint container: a JSON metadata blob (config,
//! epoch, seed, RNG and scheduler state) plus named f64 tensors stored
//! little-endian. Exact round-trip by construction, which the bit-identical
//! resume contract depends on.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use super::graph::Arr;

const MAGIC: &[u8; 4] = b"DCGC";
const VERSION: u32 = 1;

/// On-disk model/training-state bundle.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Arr>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Arr> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingArtifact(format!("checkpoint tensor {name}")))
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    let meta = serde_json::to_vec(&ckpt.meta)
        .map_err(|e| Error::parse(path, format!("meta encode: {e}")))?;
    w.write_all(&(meta.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&meta).map_err(io)?;
    w.write_all(&(ckpt.tensors.len() as u64).to_le_bytes())
        .map_err(io)?;
    for (name, arr) in &ckpt.tensors {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(nb).map_err(io)?;
        let shape = arr.shape();
        w.write_all(&(shape.len() as u64).to_le_bytes()).map_err(io)?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        debug_assert!(arr.is_standard_layout());
        for v in arr.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::parse(path, "not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(Error::parse(
            path,
            format!("unsupported checkpoint version {version} (expected {VERSION})"),
        ));
    }
    let meta_len = read_u64(&mut r, path)? as usize;
    let mut meta_buf = vec![0u8; meta_len];
    r.read_exact(&mut meta_buf).map_err(io)?;
    let meta = serde_json::from_slice(&meta_buf)
        .map_err(|e| Error::parse(path, format!("meta decode: {e}")))?;
    let n_tensors = read_u64(&mut r, path)? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..n_tensors {
        let name_len = read_u64(&mut r, path)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf).map_err(io)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::parse(path, "tensor name is not utf-8"))?;
        let ndim = read_u64(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r, path)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = vec![0f64; len];
        let mut buf = [0u8; 8];
        for d in &mut data {
            r.read_exact(&mut buf).map_err(io)?;
            *d = f64::from_le_bytes(buf);
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::parse(path, format!("tensor {name}: {e}")))?;
        tensors.insert(name, arr);
    }
    Ok(Checkpoint { meta, tensors })
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u64::from_le_bytes(buf))
}
