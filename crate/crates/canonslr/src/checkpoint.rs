//! Checkpoint files: a named-parameter map with a shape header per entry
//! and little-endian float32 payloads, plus a plain-text manifest of
//! parameter names and shapes for cross-implementation comparison.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"SLRCKPT1";

/// Writes the parameter section: u32 count, then per entry a u32 name
/// length, UTF-8 name, u32 rank, u32 per dimension, and row-major f32 data.
pub(crate) fn write_entries<W: Write>(store: &ParamStore, w: &mut W, path: &Path) -> Result<()> {
    let io_err = |e: std::io::Error| Error::io(path, e);
    w.write_u32::<LittleEndian>(store.len() as u32).map_err(io_err)?;
    for i in 0..store.len() {
        let name = store.name(i).as_bytes();
        w.write_u32::<LittleEndian>(name.len() as u32).map_err(io_err)?;
        w.write_all(name).map_err(io_err)?;
        let value = store.value(i);
        w.write_u32::<LittleEndian>(value.ndim() as u32).map_err(io_err)?;
        for &d in value.shape() {
            w.write_u32::<LittleEndian>(d as u32).map_err(io_err)?;
        }
        for &v in value.iter() {
            w.write_f32::<LittleEndian>(v as f32).map_err(io_err)?;
        }
    }
    Ok(())
}

/// Writes every parameter in store order behind a file magic.
pub fn save_params(store: &ParamStore, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
    write_entries(store, &mut w, path)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a parameter section into an existing store. The stream must carry
/// exactly the store's parameters, in order, with matching names and shapes;
/// any disagreement is a format error naming the offending entry.
pub(crate) fn read_entries<R: Read>(store: &mut ParamStore, r: &mut R, path: &Path) -> Result<()> {
    let fmt = |m: String| Error::format(path, m);
    let short = |_: std::io::Error| Error::format(path, "file ends mid-entry".to_string());

    let count = r.read_u32::<LittleEndian>().map_err(short)? as usize;
    if count != store.len() {
        return Err(fmt(format!(
            "checkpoint holds {count} parameters, model has {}",
            store.len()
        )));
    }

    for i in 0..store.len() {
        let name_len = r.read_u32::<LittleEndian>().map_err(short)? as usize;
        if name_len > 4096 {
            return Err(fmt(format!("parameter name of {name_len} bytes")));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf).map_err(short)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| fmt("parameter name is not UTF-8".to_string()))?;
        if name != store.name(i) {
            return Err(fmt(format!(
                "entry {i} is {name}, model expects {}",
                store.name(i)
            )));
        }
        let ndim = r.read_u32::<LittleEndian>().map_err(short)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.read_u32::<LittleEndian>().map_err(short)? as usize);
        }
        if dims != store.value(i).shape() {
            return Err(fmt(format!(
                "{name} has shape {dims:?}, model expects {:?}",
                store.value(i).shape()
            )));
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.read_f32::<LittleEndian>().map_err(short)? as f64);
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap();
        store.set(i, arr)?;
    }
    Ok(())
}

/// Loads a `save_params` file into an existing store.
pub fn load_params(store: &mut ParamStore, path: &Path) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let fmt = |m: String| Error::format(path, m);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| fmt("file too short for header".to_string()))?;
    if &magic != MAGIC {
        return Err(fmt("not a checkpoint file".to_string()));
    }
    read_entries(store, &mut r, path)?;
    expect_eof(&mut r, path)
}

/// Errors unless the reader is exactly at end of file.
pub(crate) fn expect_eof<R: Read>(r: &mut R, path: &Path) -> Result<()> {
    let mut rest = [0u8; 1];
    match r.read(&mut rest) {
        Ok(0) => Ok(()),
        Ok(_) => Err(Error::format(path, "trailing bytes after final entry".to_string())),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Writes the text manifest (one `name shape` line per parameter).
pub fn write_manifest(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, store.manifest()).map_err(|e| Error::io(path, e))
}
