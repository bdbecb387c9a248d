//! Binary trajectory and embedding files. All integers and floats are
//! little-endian.
//!
//! Trajectory: magic "ITOTRAJ1", version u32, M u64, n_particles u32,
//! dim u32, frame_interval f64, temperature f64, system-id (len u32 + UTF-8),
//! then M·n_particles·dim f64 frame-major.
//!
//! Embedding: magic "ITOEMB01", n_particles u32, dim u32, then f32 row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};

use crate::conditioning::ExternalEmbedding;
use crate::error::{ItoError, Result};
use crate::systems::Trajectory;

pub const TRAJ_MAGIC: &str = "ITOTRAJ1";
pub const TRAJ_VERSION: u32 = 1;
pub const EMB_MAGIC: &str = "ITOEMB01";

fn open_read(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).map_err(|e| ItoError::io(path.display().to_string(), e))?,
    ))
}

fn open_write(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| ItoError::io(path.display().to_string(), e))?,
    ))
}

fn read_err(path: &Path, what: &str, e: std::io::Error) -> ItoError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        ItoError::Truncated {
            what: format!("{what} in {}", path.display()),
        }
    } else {
        ItoError::io(path.display().to_string(), e)
    }
}

fn write_err(path: &Path, e: std::io::Error) -> ItoError {
    ItoError::io(path.display().to_string(), e)
}

fn check_magic(r: &mut impl Read, path: &Path, expected: &'static str) -> Result<()> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| read_err(path, "magic", e))?;
    if magic != expected.as_bytes() {
        return Err(ItoError::BadMagic { expected });
    }
    Ok(())
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut w = open_write(path)?;
    let werr = |e| write_err(path, e);
    w.write_all(TRAJ_MAGIC.as_bytes()).map_err(werr)?;
    w.write_u32::<LittleEndian>(TRAJ_VERSION).map_err(werr)?;
    w.write_u64::<LittleEndian>(traj.n_frames() as u64).map_err(werr)?;
    w.write_u32::<LittleEndian>(traj.n_particles() as u32).map_err(werr)?;
    w.write_u32::<LittleEndian>(traj.dim() as u32).map_err(werr)?;
    w.write_f64::<LittleEndian>(traj.frame_interval).map_err(werr)?;
    w.write_f64::<LittleEndian>(traj.temperature).map_err(werr)?;
    let id = traj.system_id.as_bytes();
    w.write_u32::<LittleEndian>(id.len() as u32).map_err(werr)?;
    w.write_all(id).map_err(werr)?;
    for v in traj.frames.iter() {
        w.write_f64::<LittleEndian>(*v).map_err(werr)?;
    }
    w.flush().map_err(werr)
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let file_len = std::fs::metadata(path)
        .map_err(|e| ItoError::io(path.display().to_string(), e))?
        .len();
    let mut r = open_read(path)?;
    check_magic(&mut r, path, TRAJ_MAGIC)?;
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|e| read_err(path, "version", e))?;
    if version != TRAJ_VERSION {
        return Err(ItoError::BadVersion {
            expected: TRAJ_VERSION,
            got: version,
        });
    }
    let m = r
        .read_u64::<LittleEndian>()
        .map_err(|e| read_err(path, "frame count", e))?;
    let n = r
        .read_u32::<LittleEndian>()
        .map_err(|e| read_err(path, "particle count", e))?;
    let dim = r
        .read_u32::<LittleEndian>()
        .map_err(|e| read_err(path, "dimension", e))?;
    let frame_interval = r
        .read_f64::<LittleEndian>()
        .map_err(|e| read_err(path, "frame interval", e))?;
    let temperature = r
        .read_f64::<LittleEndian>()
        .map_err(|e| read_err(path, "temperature", e))?;
    let id_len = r
        .read_u32::<LittleEndian>()
        .map_err(|e| read_err(path, "system id length", e))?;
    let mut id_bytes = vec![0u8; id_len as usize];
    r.read_exact(&mut id_bytes)
        .map_err(|e| read_err(path, "system id", e))?;
    let system_id = String::from_utf8(id_bytes)
        .map_err(|_| ItoError::InvalidInput(format!("system id in {} is not UTF-8", path.display())))?;

    if m == 0 || n == 0 || dim == 0 {
        return Err(ItoError::InvalidInput(format!(
            "header of {} declares an empty trajectory ({m} x {n} x {dim})",
            path.display()
        )));
    }
    let n_values = m
        .checked_mul(n as u64)
        .and_then(|v| v.checked_mul(dim as u64))
        .ok_or_else(|| ItoError::Truncated {
            what: format!("payload in {} (header overflows)", path.display()),
        })?;
    // Header length so far: 8 + 4 + 8 + 4 + 4 + 8 + 8 + 4 + id.
    let header_len = 48 + id_len as u64;
    if file_len < header_len + n_values.saturating_mul(8) {
        return Err(ItoError::Truncated {
            what: format!("payload in {}", path.display()),
        });
    }

    let mut values = vec![0f64; n_values as usize];
    r.read_f64_into::<LittleEndian>(&mut values)
        .map_err(|e| read_err(path, "payload", e))?;
    let frames = Array3::from_shape_vec((m as usize, n as usize, dim as usize), values)
        .expect("shape matches value count");
    Ok(Trajectory {
        frames,
        frame_interval,
        system_id,
        temperature,
    })
}

/// Writes the matrix as f32; values are truncated to single precision, which
/// is exact for matrices produced by `read_embedding`.
pub fn write_embedding(path: &Path, emb: &ExternalEmbedding) -> Result<()> {
    let mut w = open_write(path)?;
    let werr = |e| write_err(path, e);
    w.write_all(EMB_MAGIC.as_bytes()).map_err(werr)?;
    w.write_u32::<LittleEndian>(emb.matrix.nrows() as u32).map_err(werr)?;
    w.write_u32::<LittleEndian>(emb.matrix.ncols() as u32).map_err(werr)?;
    for v in emb.matrix.iter() {
        w.write_f32::<LittleEndian>(*v as f32).map_err(werr)?;
    }
    w.flush().map_err(werr)
}

pub fn read_embedding(path: &Path) -> Result<ExternalEmbedding> {
    let mut r = open_read(path)?;
    check_magic(&mut r, path, EMB_MAGIC)?;
    let n = r
        .read_u32::<LittleEndian>()
        .map_err(|e| read_err(path, "particle count", e))?;
    let dim = r
        .read_u32::<LittleEndian>()
        .map_err(|e| read_err(path, "embedding dimension", e))?;
    if n == 0 || dim == 0 {
        return Err(ItoError::InvalidInput(format!(
            "header of {} declares an empty embedding ({n} x {dim})",
            path.display()
        )));
    }
    let mut values = vec![0f32; n as usize * dim as usize];
    r.read_f32_into::<LittleEndian>(&mut values)
        .map_err(|e| read_err(path, "payload", e))?;
    let matrix = Array2::from_shape_vec(
        (n as usize, dim as usize),
        values.into_iter().map(f64::from).collect(),
    )
    .expect("shape matches value count");
    Ok(ExternalEmbedding {
        matrix,
        source: path.display().to_string(),
    })
}
