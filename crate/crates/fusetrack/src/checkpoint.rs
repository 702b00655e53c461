//! Checkpoint serialization.
//!
//! Layout: magic `TTK1`, version u32, entry count u32, then per entry a
//! u16 name length, the UTF-8 name, a u8 rank, the extents as u32s, and
//! the values as little-endian f32s. Round-trips are bit-exact at 32-bit
//! precision.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::param::ParamStore;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"TTK1";
pub const VERSION: u32 = 1;

/// Outcome of loading a file into an existing store.
#[derive(Debug)]
pub struct LoadReport {
    /// Parameters whose values were replaced from the file.
    pub loaded: usize,
    /// Store parameters absent from the file, left untouched. Expected when
    /// a freshly attached head loads a checkpoint that predates it.
    pub missing: Vec<String>,
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(store.len() as u32).to_le_bytes())?;
    for id in store.ids() {
        let name = store.name(id);
        let t = store.value(id);
        let shape = t.shape();
        f.write_all(&(name.len() as u16).to_le_bytes())?;
        f.write_all(name.as_bytes())?;
        f.write_all(&[shape.len() as u8])?;
        for &e in shape {
            f.write_all(&(e as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.data().len());
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        f.write_all(&buf)?;
    }
    f.flush()?;
    Ok(())
}

fn read_exact_buf(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("truncated file".into()))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact_buf(r, 4)?.try_into().unwrap()))
}

/// Parameter names stored in a checkpoint, without loading any values.
/// Lets a caller pick the matching model shape before construction.
pub fn names(path: &Path) -> Result<Vec<String>> {
    let mut f = BufReader::new(std::fs::File::open(path)?);
    let magic = read_exact_buf(&mut f, 4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut f)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut f)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_exact_buf(&mut f, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(read_exact_buf(&mut f, name_len)?)
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_exact_buf(&mut f, 1)?[0] as usize;
        let mut numel = 1usize;
        for _ in 0..rank {
            numel *= read_u32(&mut f)? as usize;
        }
        std::io::copy(&mut f.by_ref().take(4 * numel as u64), &mut std::io::sink())
            .map_err(|_| Error::Checkpoint("truncated file".into()))?;
        out.push(name);
    }
    Ok(out)
}

/// Load a checkpoint into `store`. Every file entry must name an existing
/// parameter with a matching shape; store parameters absent from the file
/// keep their current values and are listed in the report.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<LoadReport> {
    let mut f = BufReader::new(std::fs::File::open(path)?);
    let magic = read_exact_buf(&mut f, 4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut f)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut f)? as usize;

    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_exact_buf(&mut f, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(read_exact_buf(&mut f, name_len)?)
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_exact_buf(&mut f, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut f)? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = read_exact_buf(&mut f, 4 * numel)?;

        let id = store
            .lookup(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if store.value(id).shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: file {:?}, store {:?}",
                shape,
                store.value(id).shape()
            )));
        }
        let data: Vec<Real> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect();
        *store.value_mut(id) = Tensor::new(&shape, data);
        seen.insert(name);
    }

    let mut extra = [0u8; 1];
    if f.read(&mut extra)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last entry".into()));
    }

    let missing: Vec<String> = store
        .ids()
        .map(|id| store.name(id).to_string())
        .filter(|n| !seen.contains(n))
        .collect();
    Ok(LoadReport { loaded: seen.len(), missing })
}
