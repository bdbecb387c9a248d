//! Model checkpoint format: magic, version, config and layout JSON, named
//! f32 tensors, trailing CRC32. Parameters live on the f32 grid in single
//! precision, so the round trip is bit-exact there.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::conditioning::FeatureLayout;
use crate::error::{ItoError, Result};
use crate::model::{ModelConfig, ModelParams};

pub const CKPT_MAGIC: &[u8; 8] = b"ITOCKPT1";
pub const CKPT_VERSION: u32 = 1;

fn truncated(what: &str) -> impl FnOnce(std::io::Error) -> ItoError + '_ {
    move |e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            ItoError::Truncated {
                what: what.to_string(),
            }
        } else {
            ItoError::io("<buffer>", e)
        }
    }
}

fn write_json<T: serde::Serialize>(out: &mut Vec<u8>, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec(value)?;
    out.write_u32::<LittleEndian>(bytes.len() as u32)
        .expect("vec write");
    out.extend_from_slice(&bytes);
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(cur: &mut impl Read, what: &str) -> Result<T> {
    let len = cur.read_u32::<LittleEndian>().map_err(truncated(what))? as usize;
    let mut bytes = vec![0u8; len];
    cur.read_exact(&mut bytes).map_err(truncated(what))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Model section bytes: everything up to (not including) the trailing CRC.
/// Training checkpoints append an optimizer section before the CRC.
pub(crate) fn encode_model(params: &ModelParams) -> Result<Vec<u8>> {
    params.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.write_u32::<LittleEndian>(CKPT_VERSION).expect("vec write");
    write_json(&mut out, &params.config)?;
    write_json(&mut out, &params.layout)?;
    out.write_u32::<LittleEndian>(params.tensors().len() as u32)
        .expect("vec write");
    for (name, tensor) in params.tensors() {
        out.write_u32::<LittleEndian>(name.len() as u32)
            .expect("vec write");
        out.extend_from_slice(name.as_bytes());
        out.write_u32::<LittleEndian>(2).expect("vec write");
        out.write_u64::<LittleEndian>(tensor.nrows() as u64)
            .expect("vec write");
        out.write_u64::<LittleEndian>(tensor.ncols() as u64)
            .expect("vec write");
        for v in tensor.iter() {
            out.write_f32::<LittleEndian>(*v as f32).expect("vec write");
        }
    }
    Ok(out)
}

/// Parses the model section from a cursor positioned past magic + version.
pub(crate) fn decode_model_body(cur: &mut impl Read) -> Result<ModelParams> {
    let config: ModelConfig = read_json(cur, "checkpoint model config")?;
    let layout: FeatureLayout = read_json(cur, "checkpoint feature layout")?;
    let n_tensors = cur
        .read_u32::<LittleEndian>()
        .map_err(truncated("checkpoint tensor count"))? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..n_tensors {
        let name_len = cur
            .read_u32::<LittleEndian>()
            .map_err(truncated("checkpoint tensor name"))? as usize;
        let mut name_bytes = vec![0u8; name_len];
        cur.read_exact(&mut name_bytes)
            .map_err(truncated("checkpoint tensor name"))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| ItoError::InvalidInput("tensor name is not UTF-8".to_string()))?;
        let ndim = cur
            .read_u32::<LittleEndian>()
            .map_err(truncated("checkpoint tensor dims"))?;
        if ndim != 2 {
            return Err(ItoError::InvalidInput(format!(
                "tensor '{name}' has ndim {ndim}, expected 2"
            )));
        }
        let rows = cur
            .read_u64::<LittleEndian>()
            .map_err(truncated("checkpoint tensor dims"))? as usize;
        let cols = cur
            .read_u64::<LittleEndian>()
            .map_err(truncated("checkpoint tensor dims"))? as usize;
        let count = rows.checked_mul(cols).ok_or_else(|| {
            ItoError::InvalidInput(format!("tensor '{name}' dims overflow: {rows} x {cols}"))
        })?;
        let mut payload = vec![0f32; count];
        cur.read_f32_into::<LittleEndian>(&mut payload)
            .map_err(truncated("checkpoint tensor payload"))?;
        let data: Vec<f64> = payload.into_iter().map(|v| v as f64).collect();
        let tensor = Array2::from_shape_vec((rows, cols), data).expect("count checked");
        tensors.insert(name, tensor);
    }
    ModelParams::from_tensors(config, layout, tensors)
}

/// Validates header framing and the trailing CRC32, returning the payload
/// bytes between them.
pub(crate) fn check_framing(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < CKPT_MAGIC.len() + 4 + 4 {
        return Err(ItoError::Truncated {
            what: "checkpoint header".to_string(),
        });
    }
    if &bytes[..8] != CKPT_MAGIC {
        return Err(ItoError::BadMagic {
            expected: "ITOCKPT1",
        });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(ItoError::ChecksumMismatch { stored, computed });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CKPT_VERSION {
        return Err(ItoError::BadVersion {
            expected: CKPT_VERSION,
            got: version,
        });
    }
    Ok(&body[12..])
}

pub(crate) fn append_crc(mut bytes: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    bytes
}

pub fn write_model(path: &Path, params: &ModelParams) -> Result<()> {
    let bytes = append_crc(encode_model(params)?);
    std::fs::write(path, bytes).map_err(|e| ItoError::io(path.display().to_string(), e))
}

/// Reads the model section; any trailing optimizer section is ignored.
pub fn read_model(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| ItoError::io(path.display().to_string(), e))?;
    let payload = check_framing(&bytes)?;
    let mut cur = std::io::Cursor::new(payload);
    decode_model_body(&mut cur)
}

/// Guards sampling against a checkpoint trained with a different feature
/// layout.
pub fn ensure_layout_matches(params: &ModelParams, expected: &FeatureLayout) -> Result<()> {
    if &params.layout != expected {
        return Err(ItoError::LayoutMismatch(format!(
            "checkpoint feature layout (width {}) does not match the configured layout \
             (width {})",
            params.layout.width(),
            expected.width()
        )));
    }
    Ok(())
}
