//! Fixed-dimension unit-norm embedding storage and exact cosine retrieval.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

/// Rows whose norm deviates from 1 by more than this are reported on load.
pub const NORM_TOLERANCE: f64 = 1e-3;

pub const BINARY_MAGIC: &[u8; 8] = b"EMBF0001";

/// `dot(u, v) / (|u| |v|)` accumulated in 64-bit.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm(if nu == 0.0 { "u" } else { "v" }.into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

pub(crate) fn dot_f32(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub passage_id: String,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub query_id: String,
    pub ranked: Vec<Hit>,
}

/// Immutable id-indexed matrix of unit-norm vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<f32>,
    index: HashMap<String, usize>,
    off_norm: Vec<String>,
}

impl EmbeddingStore {
    /// Builds a store, re-normalizing every row to unit length. Rows that
    /// were off by more than [`NORM_TOLERANCE`] are remembered in
    /// [`EmbeddingStore::norm_warnings`].
    pub fn from_rows(dim: usize, rows: impl IntoIterator<Item = (String, Vec<f32>)>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        let mut store = EmbeddingStore {
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
            index: HashMap::new(),
            off_norm: Vec::new(),
        };
        for (id, v) in rows {
            store.push(id, &v)?;
        }
        Ok(store)
    }

    fn push(&mut self, id: String, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: v.len(),
            });
        }
        if self.index.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("embedding `{id}`")));
        }
        if norm == 0.0 {
            return Err(Error::ZeroNorm(id));
        }
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            self.off_norm.push(id.clone());
        }
        self.vectors.extend(v.iter().map(|&x| (x as f64 / norm) as f32));
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Ids whose input row was not unit-norm within tolerance.
    pub fn norm_warnings(&self) -> &[String] {
        &self.off_norm
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn row(&self, pos: usize) -> &[f32] {
        &self.vectors[pos * self.dim..(pos + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|p| self.row(p))
    }

    pub fn require(&self, id: &str) -> Result<&[f32]> {
        self.get(id).ok_or_else(|| Error::MissingEmbedding(id.to_owned()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .enumerate()
            .map(move |(i, id)| (id.as_str(), self.row(i)))
    }

    /// Keeps only rows whose id satisfies `keep`, preserving order.
    pub fn filter(&self, mut keep: impl FnMut(&str) -> bool) -> EmbeddingStore {
        let mut out = EmbeddingStore {
            dim: self.dim,
            ids: Vec::new(),
            vectors: Vec::new(),
            index: HashMap::new(),
            off_norm: Vec::new(),
        };
        for (id, row) in self.iter() {
            if keep(id) {
                out.index.insert(id.to_owned(), out.ids.len());
                out.ids.push(id.to_owned());
                out.vectors.extend_from_slice(row);
            }
        }
        out
    }

    /// Exact top-`k` by cosine, ties broken by ascending passage id.
    pub fn top_k(
        &self,
        query_id: &str,
        query: &[f32],
        k: usize,
        exclude: Option<&HashSet<String>>,
    ) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if self.is_empty() {
            return Err(Error::EmptyStore);
        }
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: query.len(),
            });
        }
        let qn = query.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        if qn == 0.0 {
            return Err(Error::ZeroNorm(query_id.to_owned()));
        }
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .filter(|&i| exclude.is_none_or(|ex| !ex.contains(&self.ids[i])))
            .map(|i| (dot_f32(query, self.row(i)) / qn, i))
            .collect();
        let better = |a: &(f64, usize), b: &(f64, usize)| {
            b.0.total_cmp(&a.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
        };
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, better);
            scored.truncate(k);
        }
        scored.sort_unstable_by(better);
        Ok(RetrievalResult {
            query_id: query_id.to_owned(),
            ranked: scored
                .into_iter()
                .enumerate()
                .map(|(r, (score, i))| Hit {
                    passage_id: self.ids[i].clone(),
                    score,
                    rank: r + 1,
                })
                .collect(),
        })
    }

    /// Runs [`EmbeddingStore::top_k`] for every row of `queries`, in order.
    pub fn search_all(&self, queries: &EmbeddingStore, k: usize) -> Result<Vec<RetrievalResult>> {
        (0..queries.len())
            .into_par_iter()
            .map(|i| self.top_k(&queries.ids[i], queries.row(i), k, None))
            .collect()
    }

    pub fn read_jsonl(path: &Path, expected_dim: Option<usize>) -> Result<Self> {
        let records: Vec<EmbeddingRecord> = jsonl::read(path)?;
        let dim = match (expected_dim, records.first()) {
            (Some(d), _) => d,
            (None, Some(r)) => r.vector.len(),
            (None, None) => return Err(Error::parse(path, 0, "no embeddings and no dimension")),
        };
        Self::from_rows(dim, records.into_iter().map(|r| (r.id, r.vector)))
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let records: Vec<EmbeddingRecord> = self
            .iter()
            .map(|(id, v)| EmbeddingRecord {
                id: id.to_owned(),
                vector: v.to_vec(),
            })
            .collect();
        jsonl::write(path, &records)
    }

    /// Packed layout: magic `EMBF0001`, `u32` dim, `u64` count, then per
    /// record a `u16` id length, the id bytes and `dim` `f32`s. All
    /// little-endian.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(BINARY_MAGIC).map_err(io)?;
        w.write_all(&(self.dim as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.len() as u64).to_le_bytes()).map_err(io)?;
        for (id, row) in self.iter() {
            let len = u16::try_from(id.len()).map_err(|_| Error::invalid(format!("id too long: `{id}`")))?;
            w.write_all(&len.to_le_bytes()).map_err(io)?;
            w.write_all(id.as_bytes()).map_err(io)?;
            for x in row {
                w.write_all(&x.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn read_binary(path: &Path, expected_dim: Option<usize>) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let truncated = |_| Error::parse(path, 0, "truncated embedding file");
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != BINARY_MAGIC {
            return Err(Error::parse(path, 0, "bad magic, expected EMBF0001"));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b4).map_err(truncated)?;
        let dim = u32::from_le_bytes(b4) as usize;
        if let Some(expected) = expected_dim {
            if expected != dim {
                return Err(Error::DimensionMismatch { expected, found: dim });
            }
        }
        r.read_exact(&mut b8).map_err(truncated)?;
        let count = u64::from_le_bytes(b8) as usize;
        let mut rows = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            r.read_exact(&mut b2).map_err(truncated)?;
            let mut id = vec![0u8; u16::from_le_bytes(b2) as usize];
            r.read_exact(&mut id).map_err(truncated)?;
            let id = String::from_utf8(id).map_err(|_| Error::parse(path, 0, "id is not UTF-8"))?;
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                r.read_exact(&mut b4).map_err(truncated)?;
                v.push(f32::from_le_bytes(b4));
            }
            rows.push((id, v));
        }
        if r.read(&mut b2).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::parse(path, 0, "trailing bytes after last record"));
        }
        Self::from_rows(dim, rows)
    }

    /// Reads either format, sniffing the magic bytes.
    pub fn read(path: &Path, expected_dim: Option<usize>) -> Result<Self> {
        let mut magic = [0u8; 8];
        let is_binary = File::open(path)
            .and_then(|mut f| f.read_exact(&mut magic))
            .map(|_| &magic == BINARY_MAGIC)
            .unwrap_or(false);
        if !path.exists() {
            return Err(Error::io(path, std::io::ErrorKind::NotFound.into()));
        }
        if is_binary {
            Self::read_binary(path, expected_dim)
        } else {
            Self::read_jsonl(path, expected_dim)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(rows: &[(&str, &[f32])]) -> EmbeddingStore {
        let dim = rows[0].1.len();
        EmbeddingStore::from_rows(dim, rows.iter().map(|(id, v)| (id.to_string(), v.to_vec()))).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let c = cosine_similarity(&[h, h], &[1.0, 0.0]).unwrap();
        assert!((c - 0.7071).abs() < 1e-4);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn top1_of_orthogonal() {
        let s = store(&[("a", &[1.0, 0.0, 0.0]), ("b", &[0.0, 1.0, 0.0]), ("c", &[0.0, 0.0, 1.0])]);
        let r = s.top_k("q", &[0.0, 1.0, 0.0], 1, None).unwrap();
        assert_eq!(r.ranked.len(), 1);
        assert_eq!(r.ranked[0].passage_id, "b");
        assert_eq!(r.ranked[0].rank, 1);
        assert!((r.ranked[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn k_beyond_size_and_exclusion() {
        let s = store(&[("a", &[1.0, 0.0]), ("b", &[0.0, 1.0]), ("c", &[1.0, 1.0])]);
        let r = s.top_k("q", &[1.0, 0.0], 10, None).unwrap();
        let ids: Vec<_> = r.ranked.iter().map(|h| h.passage_id.as_str()).collect();
        assert_eq!(ids, ["a", "c", "b"]);
        let ex: HashSet<String> = ["a".to_string()].into();
        let r = s.top_k("q", &[1.0, 0.0], 10, Some(&ex)).unwrap();
        assert!(r.ranked.iter().all(|h| h.passage_id != "a"));
        assert_eq!(r.ranked[0].rank, 1);
    }

    #[test]
    fn ties_break_on_id() {
        let s = store(&[("z", &[1.0, 0.0]), ("m", &[1.0, 0.0]), ("a", &[1.0, 0.0])]);
        let r = s.top_k("q", &[1.0, 0.0], 2, None).unwrap();
        assert_eq!(r.ranked[0].passage_id, "a");
        assert_eq!(r.ranked[1].passage_id, "m");
    }

    #[test]
    fn errors() {
        let s = store(&[("a", &[1.0, 0.0])]);
        assert!(s.top_k("q", &[1.0, 0.0], 0, None).is_err());
        let empty = EmbeddingStore::from_rows(2, Vec::new()).unwrap();
        assert!(matches!(empty.top_k("q", &[1.0, 0.0], 1, None), Err(Error::EmptyStore)));
        assert!(matches!(
            EmbeddingStore::from_rows(2, vec![("x".into(), vec![0.0, 0.0])]),
            Err(Error::ZeroNorm(_))
        ));
        assert!(matches!(
            EmbeddingStore::from_rows(2, vec![("x".into(), vec![1.0])]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn renormalizes_and_warns() {
        let s = EmbeddingStore::from_rows(2, vec![("x".into(), vec![3.0, 4.0]), ("y".into(), vec![1.0, 0.0])]).unwrap();
        assert_eq!(s.norm_warnings(), ["x".to_string()]);
        let row = s.get("x").unwrap();
        assert!((row[0] - 0.6).abs() < 1e-7 && (row[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn binary_round_trip_and_dim_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let s = store(&[("α", &[0.6, 0.8]), ("b", &[0.0, 1.0])]);
        s.write_binary(&path).unwrap();
        assert_eq!(EmbeddingStore::read(&path, None).unwrap(), s);
        assert!(matches!(
            EmbeddingStore::read_binary(&path, Some(3)),
            Err(Error::DimensionMismatch { expected: 3, found: 2 })
        ));
        let json = dir.path().join("e.jsonl");
        s.write_jsonl(&json).unwrap();
        assert_eq!(EmbeddingStore::read(&json, Some(2)).unwrap(), s);
        assert!(EmbeddingStore::read(&json, Some(4)).is_err());
    }
}
