use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingStore;
use crate::error::{Error, Result};

use super::TrainConfig;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Square projection plus bias, followed by re-normalization:
/// `v -> normalize(W v + b)`. Shared by queries and passages.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterModel {
    pub dim: usize,
    /// Row-major `dim x dim`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl AdapterModel {
    pub fn identity(dim: usize) -> Self {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        AdapterModel {
            dim,
            w,
            b: vec![0.0; dim],
        }
    }

    /// `W x + b`, before normalization.
    pub fn forward_raw(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.w[r * d..(r + 1) * d];
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.b[r];
        }
    }

    pub fn num_params(&self) -> usize {
        self.dim * self.dim + self.dim
    }

    /// Writes a one-line JSON header followed by little-endian `f32` values
    /// of `W` (row-major) then `b`.
    pub fn write_checkpoint(&self, path: &Path, seed: u64, config: &TrainConfig) -> Result<()> {
        let header = CheckpointHeader {
            dim: self.dim,
            format_version: CHECKPOINT_FORMAT_VERSION,
            seed,
            config: config.clone(),
        };
        let mut bytes = serde_json::to_vec(&header).expect("header serializes");
        bytes.push(b'\n');
        for x in self.w.iter().chain(&self.b) {
            bytes.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_checkpoint(path: &Path) -> Result<(Self, CheckpointHeader)> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        let header: CheckpointHeader =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, 1, e.to_string()))?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::parse(path, 1, format!("unsupported format_version {}", header.format_version)));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
        let d = header.dim;
        if payload.len() != (d * d + d) * 4 {
            return Err(Error::parse(path, 2, format!("expected {} parameter bytes, found {}", (d * d + d) * 4, payload.len())));
        }
        let values: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let model = AdapterModel {
            dim: d,
            w: values[..d * d].to_vec(),
            b: values[d * d..].to_vec(),
        };
        Ok((model, header))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dim: usize,
    pub format_version: u32,
    pub seed: u64,
    pub config: TrainConfig,
}

/// Maps every row of `store` through the adapter; ids and order preserved.
pub fn apply_adapter(model: &AdapterModel, store: &EmbeddingStore) -> Result<EmbeddingStore> {
    if store.dim() != model.dim {
        return Err(Error::DimensionMismatch {
            expected: model.dim,
            found: store.dim(),
        });
    }
    let d = model.dim;
    let mut x = vec![0.0; d];
    let mut out = vec![0.0; d];
    let mut rows = Vec::with_capacity(store.len());
    for (id, row) in store.iter() {
        for (dst, &src) in x.iter_mut().zip(row) {
            *dst = src as f64;
        }
        model.forward_raw(&x, &mut out);
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNorm(id.to_owned()));
        }
        rows.push((id.to_owned(), out.iter().map(|v| (v / norm) as f32).collect()));
    }
    EmbeddingStore::from_rows(d, rows)
}
