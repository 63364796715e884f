//! Cross-encoder teacher scores: ingestion, global percentile-clipped
//! min-max normalization, and a seeded oracle teacher built from qrels.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Qrels;
use crate::jsonl;
use crate::rng::SeededStream;

/// Lookup of a score for a (query, passage) pair.
pub trait PairScores: Sync {
    fn score(&self, query_id: &str, passage_id: &str) -> Option<f64>;

    fn require(&self, query_id: &str, passage_id: &str) -> Result<f64> {
        self.score(query_id, passage_id).ok_or_else(|| Error::MissingScore {
            query_id: query_id.to_owned(),
            passage_id: passage_id.to_owned(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub query_id: String,
    pub passage_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct PairTable {
    by_query: HashMap<String, HashMap<String, f64>>,
    len: usize,
}

impl PairTable {
    fn insert(&mut self, query_id: String, passage_id: String, score: f64) -> Result<()> {
        let row = self.by_query.entry(query_id.clone()).or_default();
        if row.contains_key(&passage_id) {
            return Err(Error::DuplicateId(format!("({query_id}, {passage_id})")));
        }
        row.insert(passage_id, score);
        self.len += 1;
        Ok(())
    }

    fn get(&self, q: &str, p: &str) -> Option<f64> {
        self.by_query.get(q).and_then(|r| r.get(p)).copied()
    }

    fn sorted_records(&self) -> Vec<ScoreRecord> {
        let mut out: Vec<ScoreRecord> = self
            .by_query
            .iter()
            .flat_map(|(q, row)| {
                row.iter().map(move |(p, &s)| ScoreRecord {
                    query_id: q.clone(),
                    passage_id: p.clone(),
                    score: s,
                })
            })
            .collect();
        out.sort_by(|a, b| (&a.query_id, &a.passage_id).cmp(&(&b.query_id, &b.passage_id)));
        out
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.by_query.values().flat_map(|r| r.values().copied())
    }
}

/// Unbounded teacher logits keyed by (query, passage).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawScoreTable {
    table: PairTable,
}

impl RawScoreTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: impl IntoIterator<Item = ScoreRecord>) -> Result<Self> {
        let mut t = Self::new();
        for r in records {
            t.insert(r.query_id, r.passage_id, r.score)?;
        }
        Ok(t)
    }

    pub fn insert(&mut self, query_id: String, passage_id: String, score: f64) -> Result<()> {
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("teacher score for ({query_id}, {passage_id})")));
        }
        self.table.insert(query_id, passage_id, score)
    }

    pub fn len(&self) -> usize {
        self.table.len
    }

    pub fn is_empty(&self) -> bool {
        self.table.len == 0
    }

    pub fn records(&self) -> Vec<ScoreRecord> {
        self.table.sorted_records()
    }

    /// Keeps only the pairs whose query satisfies `keep`.
    pub fn retain_queries(&self, mut keep: impl FnMut(&str) -> bool) -> RawScoreTable {
        let mut out = RawScoreTable::new();
        for (q, row) in &self.table.by_query {
            if keep(q) {
                out.table.len += row.len();
                out.table.by_query.insert(q.clone(), row.clone());
            }
        }
        out
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        Self::from_records(jsonl::read::<ScoreRecord>(path)?)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        jsonl::write(path, &self.records())
    }
}

impl PairScores for RawScoreTable {
    fn score(&self, q: &str, p: &str) -> Option<f64> {
        self.table.get(q, p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationHeader {
    pub lo: f64,
    pub hi: f64,
}

/// Teacher scores clipped into `[0, 1]`, with the percentile bounds used.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedScoreTable {
    table: PairTable,
    pub lo: f64,
    pub hi: f64,
}

impl PairScores for NormalizedScoreTable {
    fn score(&self, q: &str, p: &str) -> Option<f64> {
        self.table.get(q, p)
    }
}

impl NormalizedScoreTable {
    pub fn len(&self) -> usize {
        self.table.len
    }

    pub fn is_empty(&self) -> bool {
        self.table.len == 0
    }

    pub fn records(&self) -> Vec<ScoreRecord> {
        self.table.sorted_records()
    }

    /// Applies this table's bounds to one raw value.
    pub fn map(&self, raw: f64) -> f64 {
        ((raw - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }

    /// Header line `{"lo", "hi"}` followed by one record per pair.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_value(NormalizationHeader {
            lo: self.lo,
            hi: self.hi,
        })
        .expect("header serializes");
        let records: Vec<serde_json::Value> = std::iter::once(header)
            .chain(
                self.records()
                    .into_iter()
                    .map(|r| serde_json::to_value(r).expect("record serializes")),
            )
            .collect();
        jsonl::write(path, &records)
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "missing {lo, hi} header"))?
            .map_err(|e| Error::io(path, e))?;
        let header: NormalizationHeader =
            serde_json::from_str(&first).map_err(|e| Error::parse(path, 1, e.to_string()))?;
        let mut table = PairTable::default();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: ScoreRecord =
                serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 2, e.to_string()))?;
            if !(0.0..=1.0).contains(&r.score) {
                return Err(Error::parse(path, i + 2, "normalized score outside [0, 1]"));
            }
            table.insert(r.query_id, r.passage_id, r.score)?;
        }
        Ok(NormalizedScoreTable {
            table,
            lo: header.lo,
            hi: header.hi,
        })
    }
}

/// Percentile of `sorted` (ascending) by linear interpolation between
/// closest ranks, inclusive convention: position `h = (n - 1) * q`, result
/// `x[floor h] + (h - floor h) * (x[floor h + 1] - x[floor h])`.
/// `q` is a fraction in `[0, 1]`.
pub fn percentile_inclusive(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty sample");
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Pools every raw score, takes the 1st and 99th percentiles as bounds and
/// maps `x -> clamp((x - lo) / (hi - lo), 0, 1)`.
pub fn normalize_scores(raw: &RawScoreTable) -> Result<NormalizedScoreTable> {
    let mut pooled: Vec<f64> = raw.table.values().collect();
    if pooled.is_empty() {
        return Err(Error::invalid("cannot normalize an empty score table"));
    }
    pooled.sort_by(f64::total_cmp);
    let lo = percentile_inclusive(&pooled, 0.01);
    let hi = percentile_inclusive(&pooled, 0.99);
    if hi <= lo {
        return Err(Error::DegenerateTeacher(lo));
    }
    let span = hi - lo;
    let by_query = raw
        .table
        .by_query
        .iter()
        .map(|(q, row)| {
            let row = row
                .iter()
                .map(|(p, &x)| (p.clone(), ((x - lo) / span).clamp(0.0, 1.0)))
                .collect();
            (q.clone(), row)
        })
        .collect();
    Ok(NormalizedScoreTable {
        table: PairTable {
            by_query,
            len: raw.table.len,
        },
        lo,
        hi,
    })
}

/// Synthetic teacher: `grade + noise_sd * z` for every judged pair plus any
/// `extra_pairs` (unjudged pairs have grade 0). Pairs are visited in
/// ascending (query id, passage id) byte order, drawing one normal per pair
/// from [`SeededStream`].
pub fn oracle_teacher<'a>(
    ground_truth: &Qrels,
    extra_pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    noise_seed: u64,
    noise_sd: f64,
) -> Result<RawScoreTable> {
    if ground_truth.is_empty() {
        return Err(Error::invalid("oracle teacher needs non-empty qrels"));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::invalid(format!("noise_sd must be a finite value >= 0, got {noise_sd}")));
    }
    let mut pairs: BTreeSet<(String, String)> = ground_truth
        .pairs()
        .map(|(q, p, _)| (q.to_owned(), p.to_owned()))
        .collect();
    pairs.extend(extra_pairs.into_iter().map(|(q, p)| (q.to_owned(), p.to_owned())));
    let mut stream = SeededStream::new(noise_seed);
    let mut table = RawScoreTable::new();
    for (q, p) in pairs {
        let grade = ground_truth.grade(&q, &p) as f64;
        let z = stream.normal();
        table.insert(q, p, grade + noise_sd * z)?;
    }
    Ok(table)
}
