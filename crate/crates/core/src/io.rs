//! Binary video container and checkpoint files.
//!
//! Video container: `b"LVSR"`, `u32` version, `n h w c` as `u32`, then the
//! `f64` payload, all little-endian and frame-major.
//!
//! Checkpoint: `b"LVCK"`, `u32` version, `u64` entry count, then per entry a
//! `u32` name length, UTF-8 name, `u32` rank, `u64` dims and `f64` payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{FrameStack, Tensor};

pub const VIDEO_MAGIC: [u8; 4] = *b"LVSR";
pub const VIDEO_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn write_f64s<W: Write>(w: &mut W, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn write_video<W: Write>(mut w: W, video: &FrameStack) -> Result<()> {
    if video.rank() != 4 {
        return Err(Error::shape("write_video", video.shape(), &[0, 0, 0, 0]));
    }
    w.write_all(&VIDEO_MAGIC)?;
    w.write_all(&VIDEO_VERSION.to_le_bytes())?;
    for &d in video.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Data(format!("dimension {d} too large")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    write_f64s(&mut w, video.data())?;
    w.flush()?;
    Ok(())
}

pub fn read_video<R: Read>(mut r: R) -> Result<FrameStack> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != VIDEO_MAGIC {
        return Err(Error::Data("not a video container".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VIDEO_VERSION {
        return Err(Error::Version(format!(
            "video container version {version}, expected {VIDEO_VERSION}"
        )));
    }
    let mut shape = [0usize; 4];
    for d in shape.iter_mut() {
        *d = read_u32(&mut r)? as usize;
    }
    let data = read_f64s(&mut r, shape.iter().product())?;
    Tensor::new(shape.to_vec(), data)
}

pub fn save_video(path: impl AsRef<Path>, video: &FrameStack) -> Result<()> {
    write_video(BufWriter::new(File::create(path)?), video)
}

pub fn load_video(path: impl AsRef<Path>) -> Result<FrameStack> {
    read_video(BufReader::new(File::open(path)?))
}

/// Serialises named tensors in order.
pub fn write_tensors<W: Write>(mut w: W, entries: &[(String, &Tensor)]) -> Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        write_f64s(&mut w, t.data())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Data("not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let count = read_u64(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Data(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let data = read_f64s(&mut r, shape.iter().product())?;
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Hex SHA-256 of a byte string.
pub fn content_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    Ok(content_hash(&std::fs::read(path)?))
}
