//! Checkpoint container: a text header (magic line, then one compact JSON
//! line holding config, tensor manifest with byte offsets, fingerprints and
//! step) followed by raw little-endian f32 tensor data in manifest order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::token_bridge::VocabMap;

use super::params::{ModelConfig, Params};
use super::PolicyCheckpoint;

const MAGIC: &str = "CKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    vocab_map: Option<VocabMap>,
    vocab_map_fingerprint: Option<u64>,
    codebook_fingerprint: Option<u64>,
    step: u64,
}

pub fn save_checkpoint(path: &Path, ckpt: &PolicyCheckpoint) -> Result<()> {
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    ckpt.params.for_each(|name, t| {
        tensors.push(TensorEntry {
            name,
            shape: [t.nrows(), t.ncols()],
            offset,
        });
        offset += (t.len() * 4) as u64;
    });
    let header = Header {
        config: ckpt.config.clone(),
        tensors,
        vocab_map: ckpt.vocab_map.clone(),
        vocab_map_fingerprint: ckpt.vocab_map.as_ref().map(|m| m.fingerprint()),
        codebook_fingerprint: ckpt.codebook_fingerprint,
        step: ckpt.step,
    };

    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    ckpt.params.for_each(|_, t| {
        for x in t.iter() {
            out.write_all(&x.to_le_bytes()).expect("buffered write");
        }
    });
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyCheckpoint> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut magic = String::new();
    reader.read_line(&mut magic)?;
    if magic.trim_end() != MAGIC {
        return Err(Error::Data(format!("{}: not a CKPT1 file", path.display())));
    }
    let mut header_line = String::new();
    reader.read_line(&mut header_line)?;
    let header: Header = serde_json::from_str(header_line.trim_end())?;
    header.config.validate()?;

    let mut data = Vec::new();
    reader.read_to_end(&mut data)?;

    let mut params = Params::<f32>::zeros(&header.config);
    let mut expected = Vec::new();
    params.for_each(|name, t| expected.push((name, [t.nrows(), t.ncols()])));
    if expected.len() != header.tensors.len() {
        return Err(Error::Data(format!(
            "{}: tensor manifest has {} entries, config implies {}",
            path.display(),
            header.tensors.len(),
            expected.len()
        )));
    }
    for (entry, (name, shape)) in header.tensors.iter().zip(&expected) {
        if &entry.name != name || entry.shape != *shape {
            return Err(Error::Data(format!(
                "{}: tensor {} shape/order mismatch",
                path.display(),
                entry.name
            )));
        }
    }

    let total: usize = header.tensors.iter().map(|t| t.shape[0] * t.shape[1] * 4).sum();
    if data.len() != total {
        return Err(Error::Data(format!(
            "{}: expected {total} data bytes, got {}",
            path.display(),
            data.len()
        )));
    }

    let mut idx = 0usize;
    let mut bad = false;
    params.for_each_mut(|_, t| {
        let n = t.len();
        let mut flat = Vec::with_capacity(n);
        for c in data[idx..idx + n * 4].chunks_exact(4) {
            let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
            bad |= !v.is_finite();
            flat.push(v);
        }
        *t = Array2::from_shape_vec((t.nrows(), t.ncols()), flat).expect("shape checked");
        idx += n * 4;
    });
    if bad {
        return Err(Error::Data(format!(
            "{}: non-finite parameter value",
            path.display()
        )));
    }

    Ok(PolicyCheckpoint {
        config: header.config,
        params,
        vocab_map: header.vocab_map,
        codebook_fingerprint: header.codebook_fingerprint,
        step: header.step,
    })
}
