//! Versioned binary weight container.
//!
//! Layout: magic `BPFW`, format version, a JSON header carrying the
//! model/loss configs and feature statistics, then named f64 tensors in
//! the model's parameter-visit order (followed by batch-norm buffers).
//! Weights are stored as f64 regardless of the in-memory element type,
//! so a checkpoint trained in f32 loads into an f64 model and vice versa.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::{Read, Write};
use std::path::Path;

use super::model::{BpfEstimator, LossConfig, ModelConfig};
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::features::NormStats;

const MAGIC: &[u8; 4] = b"BPFW";
const VERSION: u32 = 1;

/// Everything inference needs, as stored in the header.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub norm: NormStats,
    pub activity_threshold: f64,
    /// Element type the model was trained with (informational).
    pub trained_as: String,
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path.display().to_string(), e)
}

/// Write a checkpoint for the model.
pub fn save<T: Scalar>(
    model: &mut BpfEstimator<T>,
    meta: &CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut tensors: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |name, param, _| {
        tensors.push((name.to_string(), param.iter().map(|v| v.to_double()).collect()));
    });
    model.visit_buffers(&mut |name, buf| {
        tensors.push((name.to_string(), buf.iter().map(|v| v.to_double()).collect()));
    });

    let header = serde_json::to_vec(meta)?;
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(MAGIC).map_err(|e| io_err(path, e))?;
    w.write_u32::<LittleEndian>(VERSION).map_err(|e| io_err(path, e))?;
    w.write_u64::<LittleEndian>(header.len() as u64)
        .map_err(|e| io_err(path, e))?;
    w.write_all(&header).map_err(|e| io_err(path, e))?;
    w.write_u32::<LittleEndian>(tensors.len() as u32)
        .map_err(|e| io_err(path, e))?;
    for (name, data) in tensors {
        let bytes = name.as_bytes();
        w.write_u16::<LittleEndian>(bytes.len() as u16)
            .map_err(|e| io_err(path, e))?;
        w.write_all(bytes).map_err(|e| io_err(path, e))?;
        w.write_u64::<LittleEndian>(data.len() as u64)
            .map_err(|e| io_err(path, e))?;
        for v in data {
            w.write_f64::<LittleEndian>(v).map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Read a checkpoint and rebuild the model.
pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<(BpfEstimator<T>, CheckpointMeta)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Checkpoint(format!("cannot open {}: {e}", path.display()))
    })?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a weight checkpoint",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|e| io_err(path, e))?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header_len = r.read_u64::<LittleEndian>().map_err(|e| io_err(path, e))? as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header).map_err(|e| io_err(path, e))?;
    let meta: CheckpointMeta = serde_json::from_slice(&header)?;

    let count = r.read_u32::<LittleEndian>().map_err(|e| io_err(path, e))? as usize;
    let mut tensors: std::collections::HashMap<String, Vec<f64>> =
        std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.read_u16::<LittleEndian>().map_err(|e| io_err(path, e))? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e| io_err(path, e))?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Checkpoint(format!("bad tensor name: {e}")))?;
        let len = r.read_u64::<LittleEndian>().map_err(|e| io_err(path, e))? as usize;
        let mut data = vec![0.0f64; len];
        r.read_f64_into::<LittleEndian>(&mut data)
            .map_err(|e| io_err(path, e))?;
        tensors.insert(name, data);
    }

    let mut model = BpfEstimator::<T>::new(meta.model.clone(), 0)?;
    let mut missing: Vec<String> = Vec::new();
    model.visit_params(&mut |name, param, _| match tensors.get(name) {
        Some(data) if data.len() == param.len() => {
            for (p, &v) in param.iter_mut().zip(data) {
                *p = T::from_double(v);
            }
        }
        Some(data) => missing.push(format!("{name}: stored {} vs model {}", data.len(), param.len())),
        None => missing.push(name.to_string()),
    });
    model.visit_buffers(&mut |name, buf| match tensors.get(name) {
        Some(data) if data.len() == buf.len() => {
            for (p, &v) in buf.iter_mut().zip(data) {
                *p = T::from_double(v);
            }
        }
        _ => missing.push(name.to_string()),
    });
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint does not match model: {}",
            missing.join(", ")
        )));
    }
    Ok((model, meta))
}
