//! Checkpoint save/load and external tensor-archive import.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "LSLM" | u32 version | u64 header_len | JSON header | f32-LE payload
//! ```
//!
//! The header carries the [`ModelConfig`] and an ordered tensor directory
//! (name, shape, dtype, element offset/len into the payload). Save → load is
//! bit-exact; load validates everything before constructing a model, so a
//! corrupt file never yields a partial model.
//!
//! The import path reads the common tensor-archive layout (u64 header
//! length, JSON header mapping tensor names to dtype/shape/byte ranges,
//! raw buffer) through a name-mapping table.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerModel};

const MAGIC: &[u8; 4] = b"LSLM";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Element (not byte) offset into the payload.
    offset: u64,
    /// Element count.
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Writes the model as a single-file checkpoint; byte-identical for
/// identical models.
pub fn save(model: &TransformerModel, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    for p in model.params() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: "f32".to_string(),
            offset,
            len: p.value.len() as u64,
        });
        offset += p.value.len() as u64;
    }
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        tensors,
    })?;

    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for p in model.params() {
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Loads a checkpoint, validating magic, version, config, tensor directory,
/// and payload shape before any model is constructed.
pub fn load(path: &Path) -> Result<TransformerModel> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 {
        return Err(bad(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad(format!("bad magic {:?}, expected {MAGIC:?}", &bytes[0..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad(format!("header length {header_len} exceeds file size")))?;
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| bad(format!("unparsable header: {e}")))?;
    header
        .config
        .validate()
        .map_err(|e| bad(format!("invalid config: {e}")))?;

    let mut model = TransformerModel::skeleton(header.config)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.shape().to_vec()))
        .collect();
    if header.tensors.len() != expected.len() {
        return Err(bad(format!(
            "tensor directory has {} entries, model needs {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let payload = &bytes[payload_start..];
    let mut running = 0u64;
    for (entry, (name, shape)) in header.tensors.iter().zip(&expected) {
        if &entry.name != name {
            return Err(bad(format!(
                "tensor {:?} out of place; expected {name:?}",
                entry.name
            )));
        }
        if &entry.shape != shape {
            return Err(bad(format!(
                "tensor {name:?} has shape {:?}, expected {shape:?}",
                entry.shape
            )));
        }
        if entry.dtype != "f32" {
            return Err(bad(format!("tensor {name:?} has dtype {:?}, only f32 is supported", entry.dtype)));
        }
        let numel: usize = shape.iter().product();
        if entry.len != numel as u64 || entry.offset != running {
            return Err(bad(format!(
                "tensor {name:?} has offset {} / len {}, expected {running} / {numel}",
                entry.offset, entry.len
            )));
        }
        running += entry.len;
    }
    if payload.len() != running as usize * 4 {
        return Err(bad(format!(
            "payload holds {} bytes, tensor directory needs {}",
            payload.len(),
            running * 4
        )));
    }

    let mut cursor = 0usize;
    for p in model.params_mut() {
        for v in p.value.data_mut() {
            *v = f32::from_le_bytes(payload[cursor..cursor + 4].try_into().expect("4 bytes"));
            cursor += 4;
        }
    }
    Ok(model)
}

// ── external tensor archives ──────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct ArchiveTensor {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

/// Writes the model in the tensor-archive byte layout under its internal
/// parameter names.
pub fn export_archive(model: &TransformerModel, path: &Path) -> Result<()> {
    let mut header = serde_json::Map::new();
    let mut offset = 0u64;
    for p in model.params() {
        let end = offset + p.value.len() as u64 * 4;
        header.insert(
            p.name.clone(),
            serde_json::to_value(ArchiveTensor {
                dtype: "F32".to_string(),
                shape: p.value.shape().to_vec(),
                data_offsets: [offset, end],
            })?,
        );
        offset = end;
    }
    let header = serde_json::to_vec(&header)?;
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for p in model.params() {
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Imports an external tensor archive through `mapping` (external name →
/// internal parameter path). Every model parameter must be mapped and
/// shape-compatible; all problems are reported at once. Unmapped extra
/// tensors are returned as ignored-tensor notes.
pub fn import_external(
    path: &Path,
    mapping: &BTreeMap<String, String>,
    config: ModelConfig,
) -> Result<(TransformerModel, Vec<String>)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 {
        return Err(Error::Import(vec![format!(
            "file too short ({} bytes)",
            bytes.len()
        )]));
    }
    let header_len = u64::from_le_bytes(bytes[0..8].try_into().expect("8 bytes")) as usize;
    let payload_start = 8usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Import(vec![format!("header length {header_len} exceeds file size")]))?;
    let raw: serde_json::Map<String, serde_json::Value> =
        serde_json::from_slice(&bytes[8..payload_start])
            .map_err(|e| Error::Import(vec![format!("unparsable header: {e}")]))?;
    let mut archive: HashMap<String, ArchiveTensor> = HashMap::new();
    for (name, value) in raw {
        if name == "__metadata__" {
            continue;
        }
        let tensor: ArchiveTensor = serde_json::from_value(value)
            .map_err(|e| Error::Import(vec![format!("tensor {name:?}: {e}")]))?;
        archive.insert(name, tensor);
    }
    let payload = &bytes[payload_start..];

    // Reverse the mapping: every internal parameter needs exactly one
    // external source.
    let mut by_internal: HashMap<&str, &str> = HashMap::new();
    let mut problems = Vec::new();
    for (external, internal) in mapping {
        if let Some(prev) = by_internal.insert(internal.as_str(), external.as_str()) {
            problems.push(format!(
                "parameter {internal:?} mapped from both {prev:?} and {external:?}"
            ));
        }
    }

    let mut model = TransformerModel::skeleton(config)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.shape().to_vec()))
        .collect();
    let mut sources: Vec<Option<(u64, u64)>> = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let Some(external) = by_internal.get(name.as_str()) else {
            problems.push(format!("missing mapping for {name:?}"));
            sources.push(None);
            continue;
        };
        let Some(tensor) = archive.get(*external) else {
            problems.push(format!("archive has no tensor {external:?} (wanted for {name:?})"));
            sources.push(None);
            continue;
        };
        if tensor.dtype != "F32" {
            problems.push(format!(
                "tensor {external:?} has dtype {}, only F32 is accepted (convert 16-bit floats before import)",
                tensor.dtype
            ));
            sources.push(None);
            continue;
        }
        if &tensor.shape != shape {
            problems.push(format!(
                "tensor {external:?} has shape {:?}, parameter {name:?} needs {shape:?}",
                tensor.shape
            ));
            sources.push(None);
            continue;
        }
        let [start, end] = tensor.data_offsets;
        let numel: usize = shape.iter().product();
        if end < start || (end - start) as usize != numel * 4 || end as usize > payload.len() {
            problems.push(format!(
                "tensor {external:?} has byte range {start}..{end}, expected {} bytes within {}",
                numel * 4,
                payload.len()
            ));
            sources.push(None);
            continue;
        }
        sources.push(Some((start, end)));
    }
    if !problems.is_empty() {
        return Err(Error::Import(problems));
    }

    let mapped: std::collections::HashSet<&str> =
        mapping.keys().map(|s| s.as_str()).collect();
    let mut ignored: Vec<String> = archive
        .keys()
        .filter(|name| !mapped.contains(name.as_str()))
        .map(|name| format!("ignored unmapped tensor {name:?}"))
        .collect();
    ignored.sort();

    for (p, source) in model.params_mut().into_iter().zip(sources) {
        let (start, _) = source.expect("validated above");
        let mut cursor = start as usize;
        for v in p.value.data_mut() {
            *v = f32::from_le_bytes(payload[cursor..cursor + 4].try_into().expect("4 bytes"));
            cursor += 4;
        }
    }
    Ok((model, ignored))
}

/// Identity name mapping (internal names on both sides) covering every
/// parameter of `config`; the baseline mapping file for archives written by
/// [`export_archive`].
pub fn identity_mapping(config: &ModelConfig) -> Result<BTreeMap<String, String>> {
    let model = TransformerModel::skeleton(config.clone())?;
    Ok(model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.name.clone()))
        .collect())
}
