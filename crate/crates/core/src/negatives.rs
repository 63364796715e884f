//! Hard-negative mining with teacher-based false-negative removal, and the
//! threshold sweep that re-mines, re-trains and re-evaluates per threshold.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingStore;
use crate::error::{Error, Result};
use crate::eval::{self, RunFile};
use crate::jsonl;
use crate::loss::LossConfig;
use crate::teacher::{NormalizedScoreTable, PairScores};
use crate::trainer::{self, apply_adapter, TrainConfig};

/// A query, its positive, exactly `k` mined negatives and the normalized
/// teacher scores `[positive, negatives...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingGroup {
    pub query_id: String,
    pub positive_id: String,
    pub negative_ids: Vec<String>,
    pub teacher_scores: Vec<f64>,
}

impl TrainingGroup {
    pub fn k(&self) -> usize {
        self.negative_ids.len()
    }

    /// Structural invariants plus the de-noising inequality at `threshold`.
    pub fn check(&self, threshold_fraction: f64) -> Result<()> {
        let fail = |msg: &str| Err(Error::invalid(format!("group `{}`: {msg}", self.query_id)));
        if self.teacher_scores.len() != self.negative_ids.len() + 1 {
            return fail("teacher_scores must have k + 1 entries");
        }
        if self.negative_ids.contains(&self.positive_id) {
            return fail("positive listed among negatives");
        }
        let distinct: HashSet<&String> = self.negative_ids.iter().collect();
        if distinct.len() != self.negative_ids.len() {
            return fail("duplicate negatives");
        }
        if self.teacher_scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return fail("teacher score outside [0, 1]");
        }
        let bound = threshold_fraction * self.teacher_scores[0];
        if self.teacher_scores[1..].iter().any(|&s| s >= bound) {
            return fail("negative at or above the de-noising threshold");
        }
        Ok(())
    }
}

pub fn read_groups(path: &Path) -> Result<Vec<TrainingGroup>> {
    jsonl::read(path)
}

pub fn write_groups(path: &Path, groups: &[TrainingGroup]) -> Result<()> {
    jsonl::write(path, groups)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningConfig {
    pub k: usize,
    /// Negatives must score strictly below this fraction of the positive.
    pub threshold_fraction: f64,
    pub mining_depth: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            k: 19,
            threshold_fraction: 0.60,
            mining_depth: 50,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_fraction > 0.0 && self.threshold_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "threshold_fraction must be in (0, 1], got {}",
                self.threshold_fraction
            )));
        }
        if self.mining_depth < self.k + 1 {
            return Err(Error::invalid("mining_depth must be at least k + 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Rejection {
    InsufficientNegatives { query_id: String, found: usize },
    ZeroPositiveScore { query_id: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum MineOutcome {
    Group(TrainingGroup),
    Rejected(Rejection),
}

/// Scans the top `mining_depth` passages (positive excluded) in rank order,
/// keeping those whose teacher score is strictly below
/// `threshold_fraction * teacher(positive)`, until `k` are found.
pub fn mine_negatives(
    query_id: &str,
    positive_id: &str,
    passage_embs: &EmbeddingStore,
    query_embs: &EmbeddingStore,
    teacher: &impl PairScores,
    cfg: &MiningConfig,
) -> Result<MineOutcome> {
    cfg.validate()?;
    let positive_score = teacher.require(query_id, positive_id)?;
    if positive_score <= 0.0 {
        return Ok(MineOutcome::Rejected(Rejection::ZeroPositiveScore {
            query_id: query_id.to_owned(),
        }));
    }
    let bound = cfg.threshold_fraction * positive_score;
    let exclude: HashSet<String> = [positive_id.to_owned()].into();
    let retrieved = passage_embs.top_k(query_id, query_embs.require(query_id)?, cfg.mining_depth, Some(&exclude))?;
    let mut negative_ids = Vec::with_capacity(cfg.k);
    let mut teacher_scores = Vec::with_capacity(cfg.k + 1);
    teacher_scores.push(positive_score);
    for hit in &retrieved.ranked {
        if negative_ids.len() == cfg.k {
            break;
        }
        let s = teacher.require(query_id, &hit.passage_id)?;
        if s < bound {
            negative_ids.push(hit.passage_id.clone());
            teacher_scores.push(s);
        }
    }
    if negative_ids.len() < cfg.k {
        return Ok(MineOutcome::Rejected(Rejection::InsufficientNegatives {
            query_id: query_id.to_owned(),
            found: negative_ids.len(),
        }));
    }
    Ok(MineOutcome::Group(TrainingGroup {
        query_id: query_id.to_owned(),
        positive_id: positive_id.to_owned(),
        negative_ids,
        teacher_scores,
    }))
}

/// Mines every `(query, positive)` pair, in input order.
pub fn mine_all(
    pairs: &[(String, String)],
    passage_embs: &EmbeddingStore,
    query_embs: &EmbeddingStore,
    teacher: &impl PairScores,
    cfg: &MiningConfig,
) -> Result<(Vec<TrainingGroup>, Vec<Rejection>)> {
    let outcomes: Vec<MineOutcome> = pairs
        .par_iter()
        .map(|(q, p)| mine_negatives(q, p, passage_embs, query_embs, teacher, cfg))
        .collect::<Result<_>>()?;
    let mut groups = Vec::new();
    let mut rejections = Vec::new();
    for o in outcomes {
        match o {
            MineOutcome::Group(g) => groups.push(g),
            MineOutcome::Rejected(r) => rejections.push(r),
        }
    }
    Ok((groups, rejections))
}

/// Inputs needed to mine training groups.
pub struct MiningSource<'a> {
    /// `(query_id, positive_id)` for every query that survived filtering.
    pub pairs: &'a [(String, String)],
    pub passage_embs: &'a EmbeddingStore,
    pub query_embs: &'a EmbeddingStore,
    pub teacher: &'a NormalizedScoreTable,
    pub mining: MiningConfig,
}

/// Held-out queries to evaluate each trained adapter on.
pub struct EvalBundle<'a> {
    pub query_embs: &'a EmbeddingStore,
    pub passage_embs: &'a EmbeddingStore,
    pub qrels: &'a eval::Qrels,
    pub depth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub map: f64,
    pub ndcg10: f64,
    pub recall100: f64,
}

/// Trains an adapter on `groups` and scores it on `bundle`.
pub fn train_and_evaluate(
    groups: &[TrainingGroup],
    source: &MiningSource<'_>,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    bundle: &EvalBundle<'_>,
) -> Result<(eval::MetricReport, trainer::TrainReport)> {
    let (model, report) = trainer::train(groups, source.query_embs, source.passage_embs, train_cfg, loss_cfg)?;
    let queries = apply_adapter(&model, bundle.query_embs)?;
    let passages = apply_adapter(&model, bundle.passage_embs)?;
    let run = RunFile::from_results("adapted", &passages.search_all(&queries, bundle.depth)?)?;
    Ok((eval::standard_report(&run, bundle.qrels), report))
}

/// For each threshold: re-mine with that threshold, train with the fixed
/// seed in `train_cfg`, evaluate. Rows come back in input order.
pub fn threshold_sweep(
    source: &MiningSource<'_>,
    thresholds: &[f64],
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    bundle: &EvalBundle<'_>,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        let annotate = |e: Error| Error::AtThreshold {
            threshold,
            source: Box::new(e),
        };
        let mining = MiningConfig {
            threshold_fraction: threshold,
            ..source.mining
        };
        let (groups, rejections) = mine_all(source.pairs, source.passage_embs, source.query_embs, source.teacher, &mining)
            .map_err(annotate)?;
        tracing::info!(threshold, groups = groups.len(), rejected = rejections.len(), "mined");
        let (metrics, _) = train_and_evaluate(&groups, source, train_cfg, loss_cfg, bundle).map_err(annotate)?;
        rows.push(SweepRow {
            threshold,
            map: metrics["map"].mean,
            ndcg10: metrics["ndcg_cut_10"].mean,
            recall100: metrics["recall_100"].mean,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("threshold,map,ndcg10,recall100\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.threshold, r.map, r.ndcg10, r.recall100).unwrap();
    }
    s
}
