//! Generated-query ingestion, validation and the two-stage
//! retrieval/teacher filter.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_text, Corpus};
use crate::embeddings::EmbeddingStore;
use crate::error::{Error, Result};
use crate::jsonl;
use crate::teacher::{NormalizedScoreTable, PairScores};

/// Retrieval depth of the first filtering stage.
pub const FILTER_DEPTH: usize = 20;

/// Queries are asked to stay under this many words.
pub const MAX_QUERY_WORDS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryType {
    Question,
    Claim,
    Title,
    Keywords,
    UserSearch,
    UserSearchFewshot,
    Human,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedQuery {
    pub query_id: String,
    pub text: String,
    pub source_passage_id: String,
    pub qtype: QueryType,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueryWarning {
    TooLong { words: usize },
    EmptyAfterNormalization,
}

/// Flags queries of 20 or more whitespace tokens, or ones that normalize to
/// nothing. Never rejects.
pub fn validate_query(q: &GeneratedQuery) -> Vec<QueryWarning> {
    let mut warnings = Vec::new();
    let words = q.text.split_whitespace().count();
    if words >= MAX_QUERY_WORDS {
        warnings.push(QueryWarning::TooLong { words });
    }
    if normalize_text(&q.text).is_empty() {
        warnings.push(QueryWarning::EmptyAfterNormalization);
    }
    warnings
}

/// Reads query records and checks the structural invariants: unique ids,
/// non-empty text, and (when a corpus is given) a known source passage.
pub fn read_queries(path: &Path, corpus: Option<&Corpus>) -> Result<Vec<GeneratedQuery>> {
    let queries: Vec<GeneratedQuery> = jsonl::read(path)?;
    check_queries(&queries, corpus)?;
    Ok(queries)
}

pub fn check_queries(queries: &[GeneratedQuery], corpus: Option<&Corpus>) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for q in queries {
        if !seen.insert(q.query_id.as_str()) {
            return Err(Error::DuplicateId(q.query_id.clone()));
        }
        if q.text.is_empty() {
            return Err(Error::invalid(format!("query `{}` has empty text", q.query_id)));
        }
        if let Some(c) = corpus {
            if !c.contains(&q.source_passage_id) {
                return Err(Error::UnknownPassage(q.source_passage_id.clone()));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept: Vec<String>,
    pub dropped_stage1: Vec<String>,
    pub dropped_stage2: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct FilterCounts {
    input: usize,
    kept: usize,
    dropped_stage1: usize,
    dropped_stage2: usize,
}

#[derive(Serialize, Deserialize)]
struct FilterReportFile {
    kept: Vec<String>,
    dropped_stage1: Vec<String>,
    dropped_stage2: Vec<String>,
    counts: FilterCounts,
}

impl FilterReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = FilterReportFile {
            kept: self.kept.clone(),
            dropped_stage1: self.dropped_stage1.clone(),
            dropped_stage2: self.dropped_stage2.clone(),
            counts: FilterCounts {
                input: self.kept.len() + self.dropped_stage1.len() + self.dropped_stage2.len(),
                kept: self.kept.len(),
                dropped_stage1: self.dropped_stage1.len(),
                dropped_stage2: self.dropped_stage2.len(),
            },
        };
        jsonl::write_json(path, &file)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let f: FilterReportFile = jsonl::read_json(path)?;
        Ok(FilterReport {
            kept: f.kept,
            dropped_stage1: f.dropped_stage1,
            dropped_stage2: f.dropped_stage2,
        })
    }
}

enum Verdict {
    Kept,
    Stage1,
    Stage2,
}

fn judge(
    q: &GeneratedQuery,
    query_embs: &EmbeddingStore,
    passage_embs: &EmbeddingStore,
    teacher: &impl PairScores,
    depth: usize,
) -> Result<Verdict> {
    let qv = query_embs.require(&q.query_id)?;
    let retrieved = passage_embs.top_k(&q.query_id, qv, depth, None)?;
    if !retrieved.ranked.iter().any(|h| h.passage_id == q.source_passage_id) {
        return Ok(Verdict::Stage1);
    }
    let mut best: Option<(f64, &str)> = None;
    for hit in &retrieved.ranked {
        let s = teacher.require(&q.query_id, &hit.passage_id)?;
        let better = match best {
            None => true,
            Some((bs, bid)) => s > bs || (s == bs && hit.passage_id.as_str() < bid),
        };
        if better {
            best = Some((s, &hit.passage_id));
        }
    }
    match best {
        Some((_, id)) if id == q.source_passage_id => Ok(Verdict::Kept),
        _ => Ok(Verdict::Stage2),
    }
}

/// Two-stage filter: drop a query when its source passage is missing from
/// the top [`FILTER_DEPTH`] by student cosine, then when the teacher does
/// not rank the source first among those retrieved passages.
pub fn filter_queries(
    queries: &[GeneratedQuery],
    query_embs: &EmbeddingStore,
    passage_embs: &EmbeddingStore,
    teacher: &NormalizedScoreTable,
) -> Result<FilterReport> {
    filter_queries_at_depth(queries, query_embs, passage_embs, teacher, FILTER_DEPTH)
}

pub fn filter_queries_at_depth(
    queries: &[GeneratedQuery],
    query_embs: &EmbeddingStore,
    passage_embs: &EmbeddingStore,
    teacher: &impl PairScores,
    depth: usize,
) -> Result<FilterReport> {
    let verdicts: Vec<Verdict> = queries
        .par_iter()
        .map(|q| judge(q, query_embs, passage_embs, teacher, depth))
        .collect::<Result<_>>()?;
    let mut report = FilterReport::default();
    for (q, v) in queries.iter().zip(verdicts) {
        let list = match v {
            Verdict::Kept => &mut report.kept,
            Verdict::Stage1 => &mut report.dropped_stage1,
            Verdict::Stage2 => &mut report.dropped_stage2,
        };
        list.push(q.query_id.clone());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn query(text: &str) -> GeneratedQuery {
        GeneratedQuery {
            query_id: "q".into(),
            text: text.into(),
            source_passage_id: "p".into(),
            qtype: QueryType::Question,
        }
    }

    #[test]
    fn length_warnings() {
        assert!(validate_query(&query("what is the capital city")).is_empty());
        let w25 = vec!["w"; 25].join(" ");
        assert_eq!(validate_query(&query(&w25)), [QueryWarning::TooLong { words: 25 }]);
        let w20 = vec!["w"; 20].join(" ");
        assert_eq!(validate_query(&query(&w20)), [QueryWarning::TooLong { words: 20 }]);
        let w19 = vec!["w"; 19].join(" ");
        assert!(validate_query(&query(&w19)).is_empty());
        assert_eq!(validate_query(&query("?!")), [QueryWarning::EmptyAfterNormalization]);
    }

    #[test]
    fn qtype_wire_names() {
        let q: GeneratedQuery = serde_json::from_str(
            r#"{"query_id":"a","text":"t","source_passage_id":"p","qtype":"user_search_fewshot"}"#,
        )
        .unwrap();
        assert_eq!(q.qtype, QueryType::UserSearchFewshot);
    }
}
