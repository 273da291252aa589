//! Binary embedding files: magic "EMB1", dim (u32 LE), frame count (u32 LE),
//! then frames row-major as 32-bit IEEE floats, little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::EmbeddingSequence;

const MAGIC: &[u8; 4] = b"EMB1";

pub fn write_embedding(path: &Path, emb: &EmbeddingSequence) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + emb.as_slice().len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(emb.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(emb.num_frames() as u32).to_le_bytes());
    for x in emb.as_slice() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_embedding(path: &Path) -> Result<EmbeddingSequence> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Data(format!("{}: not an EMB1 file", path.display())));
    }
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let frames = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + dim * frames * 4;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "{}: expected {expected} bytes for {frames}x{dim}, got {}",
            path.display(),
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data(format!(
            "{}: non-finite frame value",
            path.display()
        )));
    }
    EmbeddingSequence::new(dim, data)
}
