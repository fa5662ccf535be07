//! Binary frame storage: `[u32 T][u32 C][u32 H][u32 W]` header followed by
//! a row-major little-endian float32 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array4;

use crate::error::{Error, Result};

/// Writes a `[T, C, H, W]` frame array to `path`.
pub fn write_frames(path: &Path, frames: &Array4<f32>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let dims = frames.dim();
    for d in [dims.0, dims.1, dims.2, dims.3] {
        w.write_u32::<LittleEndian>(d as u32)
            .map_err(|e| Error::io(path, e))?;
    }
    debug_assert!(frames.is_standard_layout());
    for &v in frames.iter() {
        w.write_f32::<LittleEndian>(v).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a frame array written by [`write_frames`], validating the header
/// against the payload length.
pub fn read_frames(path: &Path) -> Result<Array4<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::format(path, "truncated frame header"))? as usize;
    }
    let [t, c, h, w] = dims;
    if t == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::format(path, "frame header has zero dimension"));
    }
    let count = t
        .checked_mul(c)
        .and_then(|n| n.checked_mul(h))
        .and_then(|n| n.checked_mul(w))
        .ok_or_else(|| Error::format(path, "frame header dimensions overflow"))?;
    let mut data = vec![0f32; count];
    r.read_f32_into::<LittleEndian>(&mut data)
        .map_err(|_| Error::format(path, "frame payload shorter than header implies"))?;
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(Error::format(path, "frame payload longer than header implies")),
        Err(e) => return Err(Error::io(path, e)),
    }
    Array4::from_shape_vec((t, c, h, w), data)
        .map_err(|_| Error::format(path, "frame payload does not match header shape"))
}
