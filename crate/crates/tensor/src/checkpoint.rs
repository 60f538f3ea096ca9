//! `VGCK` parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "VGCK" | version u32 | count u64 |
//!   count × ( name_len u32 | name utf-8 | rank u32 | dims u64×rank | f64×numel )
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VGCK";
pub const VERSION: u32 = 1;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TensorError + '_ {
    move |source| TensorError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn encode<W: Write>(store: &ParamStore, mut out: W) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(store.len() as u64).to_le_bytes())?;
    for (name, t) in store.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.values() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Decodes every `(name, tensor)` entry in file order.
pub fn decode<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>> {
    let bad = |e: std::io::Error| TensorError::Checkpoint(format!("truncated or unreadable: {e}"));
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(bad)?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut input).map_err(bad)?;
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u64(&mut input).map_err(bad)?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = read_u32(&mut input).map_err(bad)? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name).map_err(bad)?;
        let name = String::from_utf8(name).map_err(|e| TensorError::Checkpoint(format!("name is not utf-8: {e}")))?;
        let rank = read_u32(&mut input).map_err(bad)? as usize;
        let dims = (0..rank)
            .map(|_| read_u64(&mut input).map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(bad)?;
        let numel: usize = dims.iter().product();
        let mut raw = vec![0u8; numel * 8];
        input.read_exact(&mut raw).map_err(bad)?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        entries.push((name, Tensor::new(&dims, values)?));
    }
    Ok(entries)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    encode(store, &mut w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path).map_err(io_err(path))?;
    decode(BufReader::new(file))
}

/// Overwrites the values of `store` from `path`; names and shapes must match
/// exactly.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let entries = read(path)?;
    restore(store, entries)
}

pub fn restore(store: &mut ParamStore, entries: Vec<(String, Tensor)>) -> Result<()> {
    if entries.len() != store.len() {
        return Err(TensorError::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, t) in entries {
        let id = store
            .find(&name)
            .ok_or_else(|| TensorError::Checkpoint(format!("unknown parameter `{name}`")))?;
        let dst = store.get_mut(id);
        if dst.shape() != t.shape() {
            return Err(TensorError::Checkpoint(format!(
                "`{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                dst.shape()
            )));
        }
        dst.values_mut().copy_from_slice(t.values());
        dst.zero_grad();
    }
    Ok(())
}
