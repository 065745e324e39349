//! Self-describing model checkpoints.
//!
//! Layout: an 8-byte magic (`SLVRMDL1`, which carries the format version),
//! a little-endian u32 header length, a JSON header holding the model
//! config plus a tensor manifest (name and shape, in the model's canonical
//! tensor order), then the tensor data as little-endian f64 in row-major
//! order. The manifest makes shape mismatches loud instead of silent.

use super::{ModelConfig, MultiTaskModel};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SLVRMDL1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorInfo>,
}

#[derive(serde::Serialize, serde::Deserialize, PartialEq, Eq)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

pub fn save_model(path: &Path, model: &MultiTaskModel) -> Result<(), CheckpointError> {
    let tensors = model.named_tensors();
    let header = Header {
        config: model.config.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorInfo {
                name: name.clone(),
                shape: t.shape(),
            })
            .collect(),
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| CheckpointError::Format(e.to_string()))?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    for (_, tensor) in &tensors {
        for v in tensor.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MultiTaskModel, CheckpointError> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Format(format!(
            "unrecognized magic {magic:?}"
        )));
    }
    let mut len_bytes = [0u8; 4];
    input.read_exact(&mut len_bytes)?;
    let mut header_bytes = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
    input.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| CheckpointError::Format(format!("header: {e}")))?;
    header
        .config
        .validate()
        .map_err(CheckpointError::Format)?;

    // Rebuild the skeleton from the config, then check the manifest against
    // the shapes the config implies before overwriting any values.
    let mut model = MultiTaskModel::new(&header.config);
    {
        let expected: Vec<TensorInfo> = model
            .named_tensors()
            .iter()
            .map(|(name, t)| TensorInfo {
                name: name.clone(),
                shape: t.shape(),
            })
            .collect();
        if header.tensors.len() != expected.len() {
            return Err(CheckpointError::Format(format!(
                "manifest lists {} tensors, config implies {}",
                header.tensors.len(),
                expected.len()
            )));
        }
        for (got, want) in header.tensors.iter().zip(&expected) {
            if got != want {
                return Err(CheckpointError::Format(format!(
                    "tensor {} has shape {:?}, config implies {} with shape {:?}",
                    got.name, got.shape, want.name, want.shape
                )));
            }
        }
    }
    for (name, mut tensor) in model.named_tensors_mut() {
        let mut buf = [0u8; 8];
        for i in 0..tensor.len() {
            input.read_exact(&mut buf).map_err(|e| {
                CheckpointError::Format(format!("tensor {name} truncated: {e}"))
            })?;
            tensor.set_flat(i, f64::from_le_bytes(buf));
        }
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(CheckpointError::Format(
            "trailing bytes after tensor data".into(),
        ));
    }
    Ok(model)
}
