//! TREC-style evaluation: qrels and run files, NDCG@k, Recall@k, MAP and
//! teacher reranking of a run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embeddings::RetrievalResult;
use crate::error::{Error, Result};
use crate::teacher::PairScores;

/// Maximum entries per query in a run.
pub const MAX_RUN_DEPTH: usize = 1000;

/// Graded judgments, `query -> passage -> grade`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: impl Into<String>, passage_id: impl Into<String>, grade: u32) {
        self.judgments
            .entry(query_id.into())
            .or_default()
            .insert(passage_id.into(), grade);
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }

    pub fn grade(&self, query_id: &str, passage_id: &str) -> u32 {
        self.judgments
            .get(query_id)
            .and_then(|r| r.get(passage_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn judged(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query_id)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str, u32)> {
        self.judgments
            .iter()
            .flat_map(|(q, r)| r.iter().map(move |(p, &g)| (q.as_str(), p.as_str(), g)))
    }

    /// Parses `qid 0 docid grade` lines.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut q = Qrels::new();
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if fields.len() != 4 {
                return Err(Error::parse(path, i + 1, "expected `qid 0 docid grade`"));
            }
            let grade: u32 = fields[3]
                .parse()
                .map_err(|_| Error::parse(path, i + 1, format!("bad grade `{}`", fields[3])))?;
            q.insert(fields[0], fields[2], grade);
        }
        Ok(q)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_trec(&self) -> String {
        let mut out = String::new();
        for (q, p, g) in self.pairs() {
            writeln!(out, "{q} 0 {p} {g}").unwrap();
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_trec()).map_err(|e| Error::io(path, e))
    }
}

/// Ranked results per query plus a run tag.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFile {
    pub tag: String,
    rankings: BTreeMap<String, Vec<(String, f64)>>,
}

impl RunFile {
    pub fn new(tag: impl Into<String>) -> Self {
        RunFile {
            tag: tag.into(),
            rankings: BTreeMap::new(),
        }
    }

    /// Adds a ranking; entries must already be in rank order with
    /// non-increasing scores.
    pub fn insert(&mut self, query_id: impl Into<String>, ranked: Vec<(String, f64)>) -> Result<()> {
        let query_id = query_id.into();
        if ranked.len() > MAX_RUN_DEPTH {
            return Err(Error::invalid(format!(
                "query `{query_id}` has {} entries, limit is {MAX_RUN_DEPTH}",
                ranked.len()
            )));
        }
        if ranked.windows(2).any(|w| w[1].1 > w[0].1) {
            return Err(Error::invalid(format!("query `{query_id}`: scores increase with rank")));
        }
        let mut seen = BTreeSet::new();
        if let Some((p, _)) = ranked.iter().find(|(p, _)| !seen.insert(p.as_str())) {
            return Err(Error::DuplicateId(format!("{query_id}/{p}")));
        }
        self.rankings.insert(query_id, ranked);
        Ok(())
    }

    pub fn from_results(tag: impl Into<String>, results: &[RetrievalResult]) -> Result<Self> {
        let mut run = RunFile::new(tag);
        for r in results {
            run.insert(
                r.query_id.clone(),
                r.ranked.iter().map(|h| (h.passage_id.clone(), h.score)).collect(),
            )?;
        }
        Ok(run)
    }

    pub fn ranking(&self, query_id: &str) -> Option<&[(String, f64)]> {
        self.rankings.get(query_id).map(Vec::as_slice)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.rankings.keys().map(String::as_str)
    }

    /// `qid Q0 docid rank score tag` lines, queries in id order.
    pub fn to_trec(&self) -> String {
        let mut out = String::new();
        for (q, ranked) in &self.rankings {
            for (r, (p, s)) in ranked.iter().enumerate() {
                writeln!(out, "{q} Q0 {p} {} {s} {}", r + 1, self.tag).unwrap();
            }
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut tag = None;
        let mut rows: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() {
                continue;
            }
            if f.len() != 6 {
                return Err(Error::parse(path, i + 1, "expected `qid Q0 docid rank score tag`"));
            }
            let rank: usize = f[3]
                .parse()
                .map_err(|_| Error::parse(path, i + 1, format!("bad rank `{}`", f[3])))?;
            let score: f64 = f[4]
                .parse()
                .map_err(|_| Error::parse(path, i + 1, format!("bad score `{}`", f[4])))?;
            tag.get_or_insert_with(|| f[5].to_owned());
            rows.entry(f[0].to_owned()).or_default().push((rank, f[2].to_owned(), score));
        }
        let mut run = RunFile::new(tag.unwrap_or_default());
        for (q, mut entries) in rows {
            entries.sort_by_key(|e| e.0);
            run.insert(q, entries.into_iter().map(|(_, p, s)| (p, s)).collect())
                .map_err(|e| Error::parse(path, 0, e.to_string()))?;
        }
        Ok(run)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_trec()).map_err(|e| Error::io(path, e))
    }
}

/// Per-query values and their mean over queries with at least one
/// relevant judgment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
    /// Judged queries with no relevant passage; left out of the mean.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded: Vec<String>,
    /// Judged queries absent from the run; scored 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing: Vec<String>,
}

fn per_query_metric(
    run: &RunFile,
    qrels: &Qrels,
    f: impl Fn(&[(String, f64)], &BTreeMap<String, u32>) -> f64,
) -> MetricResult {
    let mut out = MetricResult::default();
    for (q, judged) in &qrels.judgments {
        if judged.values().all(|&g| g == 0) {
            out.excluded.push(q.clone());
            continue;
        }
        let value = match run.ranking(q) {
            Some(ranked) => f(ranked, judged),
            None => {
                out.missing.push(q.clone());
                0.0
            }
        };
        out.per_query.insert(q.clone(), value);
    }
    if !out.per_query.is_empty() {
        out.mean = out.per_query.values().sum::<f64>() / out.per_query.len() as f64;
    }
    out
}

fn gain(grade: u32) -> f64 {
    2f64.powi(grade as i32) - 1.0
}

/// NDCG@k with exponential gain `2^grade - 1` and `log2(rank + 1)` discount.
pub fn ndcg_at_k(run: &RunFile, qrels: &Qrels, k: usize) -> Result<MetricResult> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    Ok(per_query_metric(run, qrels, |ranked, judged| {
        let dcg: f64 = ranked
            .iter()
            .take(k)
            .enumerate()
            .map(|(r, (p, _))| gain(judged.get(p).copied().unwrap_or(0)) / ((r + 2) as f64).log2())
            .sum();
        let mut grades: Vec<u32> = judged.values().copied().collect();
        grades.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = grades
            .iter()
            .take(k)
            .enumerate()
            .map(|(r, &g)| gain(g) / ((r + 2) as f64).log2())
            .sum();
        dcg / idcg
    }))
}

/// Fraction of relevant (grade >= 1) passages found in the top `k`.
pub fn recall_at_k(run: &RunFile, qrels: &Qrels, k: usize) -> Result<MetricResult> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    Ok(per_query_metric(run, qrels, |ranked, judged| {
        let relevant = judged.values().filter(|&&g| g >= 1).count();
        let found = ranked
            .iter()
            .take(k)
            .filter(|(p, _)| judged.get(p).is_some_and(|&g| g >= 1))
            .count();
        found as f64 / relevant as f64
    }))
}

/// Mean average precision over the full run depth.
pub fn map_metric(run: &RunFile, qrels: &Qrels) -> MetricResult {
    per_query_metric(run, qrels, |ranked, judged| {
        let relevant = judged.values().filter(|&&g| g >= 1).count();
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (r, (p, _)) in ranked.iter().enumerate() {
            if judged.get(p).is_some_and(|&g| g >= 1) {
                hits += 1;
                sum += hits as f64 / (r + 1) as f64;
            }
        }
        sum / relevant as f64
    })
}

/// `{metric -> {per_query, mean}}` as written to disk.
pub type MetricReport = BTreeMap<String, MetricResult>;

/// NDCG@10, Recall@100 and MAP in one report.
pub fn standard_report(run: &RunFile, qrels: &Qrels) -> MetricReport {
    let mut report = MetricReport::new();
    report.insert("ndcg_cut_10".into(), ndcg_at_k(run, qrels, 10).expect("k > 0"));
    report.insert("recall_100".into(), recall_at_k(run, qrels, 100).expect("k > 0"));
    report.insert("map".into(), map_metric(run, qrels));
    report
}

/// Reorders each query's top `depth` by teacher score (descending, ties to
/// the smaller passage id). The reranked block carries teacher scores;
/// entries past `depth` follow in their original order, their scores
/// shifted down only when needed to stay non-increasing.
pub fn rerank_run(run: &RunFile, teacher: &impl PairScores, depth: usize) -> Result<RunFile> {
    let mut out = RunFile::new(format!("{}.rerank", run.tag));
    for (q, ranked) in &run.rankings {
        let cut = depth.min(ranked.len());
        let mut block: Vec<(String, f64)> = ranked[..cut]
            .iter()
            .map(|(p, _)| teacher.require(q, p).map(|s| (p.clone(), s)))
            .collect::<Result<_>>()?;
        block.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tail = &ranked[cut..];
        let shift = match (block.last(), tail.first()) {
            (Some((_, last)), Some((_, first))) if first > last => first - last + 1.0,
            _ => 0.0,
        };
        block.extend(tail.iter().map(|(p, s)| (p.clone(), s - shift)));
        out.insert(q.clone(), block)?;
    }
    Ok(out)
}
