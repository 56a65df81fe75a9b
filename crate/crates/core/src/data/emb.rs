use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"EMB1";

/// Row-major `count × dim` table of embedding vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub count: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl EmbeddingTable {
    pub fn new(count: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != count * dim {
            return Err(Error::config(format!(
                "embedding table {count}×{dim} needs {} values, got {}",
                count * dim,
                data.len()
            )));
        }
        Ok(EmbeddingTable { count, dim, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.count as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

pub fn parse_embeddings(bytes: &[u8]) -> Result<EmbeddingTable> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(0, "missing EMB1 magic"));
    }
    let u32_at = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::format(off as u64, "truncated header"))
    };
    let count = u32_at(4)? as usize;
    let dim = u32_at(8)? as usize;
    let n = count
        .checked_mul(dim)
        .ok_or_else(|| Error::format(4, "count × dim overflows"))?;
    let payload = &bytes[12..];
    if payload.len() < 4 * n {
        let complete = payload.len() / 4;
        return Err(Error::format(
            (12 + 4 * complete) as u64,
            format!("truncated payload: expected {n} values, found {complete}"),
        ));
    }
    if payload.len() > 4 * n {
        return Err(Error::format((12 + 4 * n) as u64, "trailing bytes after payload"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(EmbeddingTable { count, dim, data })
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&bytes)
}

pub fn save_embeddings(path: impl AsRef<Path>, table: &EmbeddingTable) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, table.to_bytes()).map_err(|e| Error::io(path, e))
}
