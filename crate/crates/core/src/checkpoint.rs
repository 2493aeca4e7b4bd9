//! Checkpoint file: one JSON header line (config echo, tensor shapes,
//! seed), then the raw little-endian 64-bit parameter payload in the
//! model's declared order. Writing is deterministic, so identical training
//! runs produce byte-identical files.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

const FORMAT_TAG: &str = "s2cast-checkpoint";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    seed: u64,
    config: serde_json::Value,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(
    path: &Path,
    config: &serde_json::Value,
    seed: u64,
    params: &ModelParams,
) -> Result<()> {
    let specs = ModelParams::param_specs(&params.config);
    let header = CheckpointHeader {
        format: FORMAT_TAG.to_string(),
        version: 1,
        seed,
        config: config.clone(),
        params: specs.into_iter().map(|(name, shape)| ParamEntry { name, shape }).collect(),
    };
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for p in params.params() {
        for &v in p.value.data() {
            w.write_all(&(v as f64).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint back: the config echo plus named tensors in file
/// order. The caller decides how to interpret the config.
pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, u64, Vec<(String, Tensor)>)> {
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut header_line = String::new();
    reader.read_line(&mut header_line)?;
    let header: CheckpointHeader = serde_json::from_str(header_line.trim_end())
        .map_err(|e| Error::data(format!("{}: bad checkpoint header: {}", path.display(), e)))?;
    if header.format != FORMAT_TAG || header.version != 1 {
        return Err(Error::data(format!("{}: not a version-1 checkpoint", path.display())));
    }
    let mut tensors = Vec::with_capacity(header.params.len());
    let mut buf = Vec::new();
    for entry in header.params {
        let numel: usize = entry.shape.iter().product();
        buf.resize(numel * 8, 0);
        reader.read_exact(&mut buf).map_err(|_| {
            Error::data(format!("{}: truncated payload at `{}`", path.display(), entry.name))
        })?;
        let data: Vec<crate::tensor::Real> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")) as crate::tensor::Real)
            .collect();
        tensors.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(Error::data(format!("{}: trailing bytes after payload", path.display())));
    }
    Ok((header.config, header.seed, tensors))
}
