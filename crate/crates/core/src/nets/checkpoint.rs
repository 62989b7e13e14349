//! Checkpoint container: `"UPCK"`, u32 version, u32 header length, a JSON
//! header (architecture, dtype, tensor table, config echo, RNG states), then
//! every tensor as raw little-endian values in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Component, ModelBundle, Real};
use crate::envsuite::ObsShape;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"UPCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    component: Component,
    index: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    dtype: String,
    arch: super::ArchConfig,
    obs_shape: ObsShape,
    n_actions: usize,
    tensors: Vec<TensorEntry>,
    config: serde_json::Value,
    rng_states: serde_json::Value,
}

/// Checkpoint payload besides the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointExtras {
    pub config: serde_json::Value,
    pub rng_states: serde_json::Value,
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    bundle: &ModelBundle<T>,
    extras: &CheckpointExtras,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut body = Vec::new();
    for c in Component::ALL {
        for (index, t) in bundle.component(c).tensors().into_iter().enumerate() {
            tensors.push(TensorEntry {
                component: c,
                index,
                len: t.len(),
            });
            body.reserve(t.len() * T::BYTES);
            t.iter().for_each(|v| v.write_le(&mut body));
        }
    }
    let header = Header {
        dtype: T::NAME.to_string(),
        arch: bundle.arch.clone(),
        obs_shape: bundle.obs_shape,
        n_actions: bundle.n_actions,
        tensors,
        config: extras.config.clone(),
        rng_states: extras.rng_states.clone(),
    };
    let head = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + head.len() + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(head.len() as u32).to_le_bytes());
    out.extend_from_slice(&head);
    out.extend_from_slice(&body);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Scalar type name (`"f32"` or `"f64"`) stored in a checkpoint header.
pub fn checkpoint_dtype(path: &Path) -> Result<String> {
    let (header, _) = read_header(path)?;
    Ok(header.dtype)
}

fn read_header(path: &Path) -> Result<(Header, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |offset: usize, reason: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(fail(0, "not a checkpoint (bad magic or too short)".into()));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != VERSION {
        return Err(fail(4, format!("unsupported checkpoint version {version}")));
    }
    let head_len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    if bytes.len() < 12 + head_len {
        return Err(fail(12, "truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + head_len])?;
    Ok((header, bytes))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(ModelBundle<T>, CheckpointExtras)> {
    let (header, bytes) = read_header(path)?;
    let fail = |offset: usize, reason: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    let head_end = 12 + u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    if header.dtype != T::NAME {
        return Err(fail(
            12,
            format!("checkpoint dtype {} but {} requested", header.dtype, T::NAME),
        ));
    }
    let mut bundle = ModelBundle::<T>::new(&header.arch, header.obs_shape, header.n_actions, 0)?;
    let mut pos = head_end;
    for entry in &header.tensors {
        let mut slots = bundle.component_mut(entry.component).tensors_mut();
        let slot = slots.get_mut(entry.index).ok_or_else(|| {
            fail(pos, format!("unknown tensor {:?}[{}]", entry.component, entry.index))
        })?;
        if slot.len() != entry.len {
            return Err(fail(
                pos,
                format!(
                    "tensor {:?}[{}] has {} values, architecture needs {}",
                    entry.component,
                    entry.index,
                    entry.len,
                    slot.len()
                ),
            ));
        }
        let need = entry.len * T::BYTES;
        if bytes.len() < pos + need {
            return Err(fail(
                pos,
                format!("truncated tensor data: expected {need} bytes, found {}", bytes.len() - pos),
            ));
        }
        for (v, chunk) in slot.iter_mut().zip(bytes[pos..pos + need].chunks_exact(T::BYTES)) {
            *v = T::read_le(chunk);
        }
        pos += need;
    }
    if pos != bytes.len() {
        return Err(fail(pos, "trailing bytes after tensor data".into()));
    }
    Ok((
        bundle,
        CheckpointExtras {
            config: header.config,
            rng_states: header.rng_states,
        },
    ))
}
