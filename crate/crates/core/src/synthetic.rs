//! Seeded synthetic fixtures with known ground truth: a topic-structured
//! retrieval task with planted false negatives, a filtering fixture with a
//! planted stage-1/stage-2 partition, and a de-noising fixture with planted
//! near-duplicates of a positive.

use std::collections::BTreeSet;

use crate::corpus::{Corpus, PassageRecord};
use crate::embeddings::EmbeddingStore;
use crate::error::Result;
use crate::eval::Qrels;
use crate::querygen::{filter_queries, FilterReport, GeneratedQuery, QueryType};
use crate::rng::SeededStream;
use crate::teacher::{normalize_scores, oracle_teacher, NormalizedScoreTable, RawScoreTable};
use crate::trainer::TrainConfig;

const QTYPES: [QueryType; 6] = [
    QueryType::Question,
    QueryType::Claim,
    QueryType::Title,
    QueryType::Keywords,
    QueryType::UserSearch,
    QueryType::UserSearchFewshot,
];

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ren", "tas", "vo", "qu", "ber", "sil", "dan", "po", "xe", "ju", "nor", "fi", "gal", "he",
    "tri", "mon", "sa", "ul", "ze", "cor", "pi",
];

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn gaussian(rng: &mut SeededStream, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.normal()).collect()
}

fn word(rng: &mut SeededStream) -> String {
    let len = 2 + rng.below(3) as usize;
    (0..len).map(|_| SYLLABLES[rng.below(SYLLABLES.len() as u64) as usize]).collect()
}

/// Knobs of the end-to-end task.
///
/// Latent vectors are built from three blocks: a topic block shared by the
/// whole topic, a subtopic block shared by subtopic siblings and a
/// passage-specific block. Base embeddings append an independent nuisance
/// block, so they carry the signal only partially.
///
/// The teacher's grades for a query are 3 for its source passage, 2 for the
/// other passages of its subtopic, 1 for the rest of its topic and 0
/// otherwise. Held-out judgments grade subtopic siblings
/// `eval_sibling_grade`: at 3 they are as relevant as the source, so the
/// teacher's normalized score for them (about two thirds of the positive's)
/// makes them false negatives that a 0.6 threshold removes and a 0.95
/// threshold keeps.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub topics: usize,
    pub subtopics_per_topic: usize,
    pub passages_per_subtopic: usize,
    pub block_dim: usize,
    pub nuisance_dim: usize,
    pub topic_weight: f64,
    pub subtopic_weight: f64,
    pub passage_weight: f64,
    pub nuisance_weight: f64,
    /// Distance of a query's latent from its source passage.
    pub query_noise: f64,
    pub train_queries: usize,
    pub eval_queries: usize,
    pub teacher_noise_sd: f64,
    pub eval_sibling_grade: u32,
    /// Retrieval depth (base embeddings) whose pairs get teacher scores.
    pub teacher_depth: usize,
    /// Extra passages that are substrings of existing ones.
    pub planted_duplicates: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            topics: 100,
            subtopics_per_topic: 2,
            passages_per_subtopic: 10,
            block_dim: 8,
            nuisance_dim: 8,
            topic_weight: 1.0,
            subtopic_weight: 1.0,
            passage_weight: 0.7,
            nuisance_weight: 1.0,
            query_noise: 0.3,
            train_queries: 400,
            eval_queries: 100,
            teacher_noise_sd: 0.05,
            eval_sibling_grade: 3,
            teacher_depth: 60,
            planted_duplicates: 0,
            seed: 17,
        }
    }
}

impl TaskConfig {
    pub fn dim(&self) -> usize {
        3 * self.block_dim + self.nuisance_dim
    }
}

pub struct SyntheticTask {
    pub config: TaskConfig,
    pub corpus: Corpus,
    pub passage_embs: EmbeddingStore,
    pub queries: Vec<GeneratedQuery>,
    pub query_embs: EmbeddingStore,
    pub train_qrels: Qrels,
    pub eval_query_embs: EmbeddingStore,
    pub eval_qrels: Qrels,
    pub teacher_raw: RawScoreTable,
}

struct Latent {
    topic: usize,
    subtopic: usize,
    z: Vec<f64>,
}

impl SyntheticTask {
    pub fn generate(cfg: &TaskConfig) -> Result<Self> {
        let mut rng = SeededStream::new(cfg.seed);
        let b = cfg.block_dim;
        let dim = cfg.dim();
        let embed = |rng: &mut SeededStream, z: &[f64]| -> Vec<f32> {
            let nuisance = unit(gaussian(rng, cfg.nuisance_dim));
            let v: Vec<f64> = z
                .iter()
                .copied()
                .chain(nuisance.iter().map(|x| x * cfg.nuisance_weight))
                .collect();
            unit(v).into_iter().map(|x| x as f32).collect()
        };

        let mut latents = Vec::new();
        let mut records = Vec::new();
        let mut passage_rows = Vec::new();
        for t in 0..cfg.topics {
            let topic = unit(gaussian(&mut rng, b));
            let vocab: Vec<String> = (0..30).map(|_| word(&mut rng)).collect();
            for st in 0..cfg.subtopics_per_topic {
                let sub = unit(gaussian(&mut rng, b));
                for _ in 0..cfg.passages_per_subtopic {
                    let own = unit(gaussian(&mut rng, b));
                    let z: Vec<f64> = topic
                        .iter()
                        .map(|x| x * cfg.topic_weight)
                        .chain(sub.iter().map(|x| x * cfg.subtopic_weight))
                        .chain(own.iter().map(|x| x * cfg.passage_weight))
                        .collect();
                    let id = format!("p{:05}", latents.len());
                    let words = 14 + rng.below(8) as usize;
                    let text: Vec<String> = (0..words)
                        .map(|_| vocab[rng.below(vocab.len() as u64) as usize].clone())
                        .collect();
                    let mut text = text.join(" ");
                    text.push('.');
                    passage_rows.push((id.clone(), embed(&mut rng, &z)));
                    records.push(PassageRecord { id, text });
                    latents.push(Latent { topic: t, subtopic: st, z });
                }
            }
        }
        let n_passages = latents.len();

        for i in 0..cfg.planted_duplicates {
            let src = rng.below(n_passages as u64) as usize;
            let words: Vec<&str> = records[src].text.trim_end_matches('.').split(' ').collect();
            let start = rng.below(3) as usize;
            let snippet = words[start..start + 6].join("  ").to_uppercase();
            let v = passage_rows[src].1.clone();
            let id = format!("dup{i:04}");
            passage_rows.push((id.clone(), v));
            records.push(PassageRecord {
                id,
                text: format!("{snippet}!"),
            });
        }

        let mut sources: Vec<usize> = (0..n_passages).collect();
        rng.shuffle(&mut sources);
        let train_sources = &sources[..cfg.train_queries];
        let eval_sources = &sources[cfg.train_queries..cfg.train_queries + cfg.eval_queries];

        let judge = |qrels: &mut Qrels, qid: &str, src: usize, sibling_grade: u32| {
            let l = &latents[src];
            for (j, other) in latents.iter().enumerate() {
                if other.topic != l.topic {
                    continue;
                }
                let grade = if j == src {
                    3
                } else if other.subtopic == l.subtopic {
                    sibling_grade
                } else {
                    1
                };
                qrels.insert(qid, format!("p{j:05}"), grade);
            }
        };
        let query_latent = |rng: &mut SeededStream, src: usize| -> Vec<f64> {
            let z = &latents[src].z;
            let scale = z.iter().map(|x| x * x).sum::<f64>().sqrt();
            let noise = unit(gaussian(rng, z.len()));
            z.iter().zip(noise).map(|(a, e)| a + cfg.query_noise * scale * e).collect()
        };

        let mut queries = Vec::new();
        let mut query_rows = Vec::new();
        let mut train_qrels = Qrels::new();
        for (i, &src) in train_sources.iter().enumerate() {
            let qid = format!("q{i:04}");
            let z = query_latent(&mut rng, src);
            query_rows.push((qid.clone(), embed(&mut rng, &z)));
            let words: Vec<&str> = records[src].text.trim_end_matches('.').split(' ').collect();
            let take = 4 + rng.below(5) as usize;
            let start = rng.below((words.len() - take) as u64) as usize;
            queries.push(GeneratedQuery {
                query_id: qid.clone(),
                text: words[start..start + take].join(" "),
                source_passage_id: records[src].id.clone(),
                qtype: QTYPES[i % QTYPES.len()],
            });
            judge(&mut train_qrels, &qid, src, 2);
        }

        let mut eval_rows = Vec::new();
        let mut eval_qrels = Qrels::new();
        for (i, &src) in eval_sources.iter().enumerate() {
            let qid = format!("t{i:04}");
            let z = query_latent(&mut rng, src);
            eval_rows.push((qid.clone(), embed(&mut rng, &z)));
            judge(&mut eval_qrels, &qid, src, cfg.eval_sibling_grade);
        }

        let passage_embs = EmbeddingStore::from_rows(dim, passage_rows)?;
        let query_embs = EmbeddingStore::from_rows(dim, query_rows)?;
        let eval_query_embs = EmbeddingStore::from_rows(dim, eval_rows)?;

        let retrieved = passage_embs.search_all(&query_embs, cfg.teacher_depth + cfg.planted_duplicates)?;
        let pairs: BTreeSet<(&str, &str)> = retrieved
            .iter()
            .flat_map(|r| r.ranked.iter().map(move |h| (r.query_id.as_str(), h.passage_id.as_str())))
            .collect();
        let teacher_raw = oracle_teacher(&train_qrels, pairs, cfg.seed ^ 0x7eac, cfg.teacher_noise_sd)?;

        Ok(SyntheticTask {
            config: cfg.clone(),
            corpus: Corpus::new(records)?,
            passage_embs,
            queries,
            query_embs,
            train_qrels,
            eval_query_embs,
            eval_qrels,
            teacher_raw,
        })
    }
}

/// Training inputs after query filtering: surviving `(query, source)` pairs
/// and teacher scores renormalized over the surviving queries only.
pub struct PreparedTask {
    pub filter: FilterReport,
    pub pairs: Vec<(String, String)>,
    pub teacher: NormalizedScoreTable,
}

impl SyntheticTask {
    pub fn prepare(&self) -> Result<PreparedTask> {
        let all = normalize_scores(&self.teacher_raw)?;
        let filter = filter_queries(&self.queries, &self.query_embs, &self.passage_embs, &all)?;
        let kept: BTreeSet<&str> = filter.kept.iter().map(String::as_str).collect();
        let pairs = self
            .queries
            .iter()
            .filter(|q| kept.contains(q.query_id.as_str()))
            .map(|q| (q.query_id.clone(), q.source_passage_id.clone()))
            .collect();
        let teacher = normalize_scores(&self.teacher_raw.retain_queries(|q| kept.contains(q)))?;
        Ok(PreparedTask { filter, pairs, teacher })
    }
}

/// Trainer settings sized for the synthetic task: small batches and a
/// large step so that a few hundred groups train in seconds.
pub fn fixture_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        queries_per_batch: 64,
        chunk_size: 64,
        seed: 1,
        ..Default::default()
    }
}

/// Fifty queries with a planted filtering outcome: queries `0..15` have
/// their source passage at retrieval rank 21, queries `15..25` retrieve it
/// first but the teacher prefers another retrieved passage, the rest pass.
pub struct FilterFixture {
    pub queries: Vec<GeneratedQuery>,
    pub query_embs: EmbeddingStore,
    pub passage_embs: EmbeddingStore,
    pub teacher: NormalizedScoreTable,
    pub planted: FilterReport,
}

pub fn filter_fixture(seed: u64) -> Result<FilterFixture> {
    const QUERIES: usize = 50;
    const STAGE1: usize = 15;
    const STAGE2: usize = 10;
    const DISTRACTORS: usize = 45;
    const FREE: usize = 50;
    let dim = FREE + 14;
    let axis = |i: usize, w: f64, v: &mut Vec<f64>| v[i] += w;
    let vec_at = |main: usize, c: f64, side: usize| {
        let mut v = vec![0.0; dim];
        axis(main, c, &mut v);
        axis(side, (1.0 - c * c).sqrt(), &mut v);
        v.into_iter().map(|x| x as f32).collect::<Vec<f32>>()
    };

    let mut queries = Vec::new();
    let mut q_rows = Vec::new();
    let mut p_rows = Vec::new();
    let mut qrels = Qrels::new();
    let mut planted = FilterReport::default();
    for i in 0..QUERIES {
        let qid = format!("fq{i:02}");
        let src = format!("fq{i:02}-src");
        let stage1_fail = i < STAGE1;
        let stage2_fail = (STAGE1..STAGE1 + STAGE2).contains(&i);
        q_rows.push((qid.clone(), vec_at(i, 1.0, FREE)));
        p_rows.push((src.clone(), vec_at(i, if stage1_fail { 0.5 } else { 0.95 }, FREE)));
        for j in 0..DISTRACTORS {
            let c = if stage1_fail {
                if j < 20 { 0.9 - 0.005 * j as f64 } else { 0.3 }
            } else {
                0.8 - 0.01 * j as f64
            };
            p_rows.push((format!("fq{i:02}-d{j:02}"), vec_at(i, c, FREE + 1 + j % 13)));
        }
        qrels.insert(&qid, &src, 2);
        if stage2_fail {
            qrels.insert(&qid, format!("fq{i:02}-d02"), 3);
        }
        queries.push(GeneratedQuery {
            query_id: qid.clone(),
            text: format!("planted query {i}"),
            source_passage_id: src,
            qtype: QTYPES[i % QTYPES.len()],
        });
        let bucket = if stage1_fail {
            &mut planted.dropped_stage1
        } else if stage2_fail {
            &mut planted.dropped_stage2
        } else {
            &mut planted.kept
        };
        bucket.push(qid);
    }
    let query_embs = EmbeddingStore::from_rows(dim, q_rows)?;
    let passage_embs = EmbeddingStore::from_rows(dim, p_rows)?;
    let pairs: Vec<(String, String)> = queries
        .iter()
        .flat_map(|q| {
            std::iter::once(q.source_passage_id.clone())
                .chain((0..DISTRACTORS).map(|j| format!("{}-d{j:02}", q.query_id)))
                .map(|p| (q.query_id.clone(), p))
                .collect::<Vec<_>>()
        })
        .collect();
    let raw = oracle_teacher(&qrels, pairs.iter().map(|(q, p)| (q.as_str(), p.as_str())), seed, 0.01)?;
    Ok(FilterFixture {
        queries,
        query_embs,
        passage_embs,
        teacher: normalize_scores(&raw)?,
        planted,
    })
}

/// Queries whose positive has five near-duplicates among the top 20
/// retrieved candidates (at ranks 2, 5, 9, 14 and 18 of the
/// positive-excluded list), followed by 45 ordinary candidates.
pub struct DenoiseFixture {
    pub pairs: Vec<(String, String)>,
    pub query_embs: EmbeddingStore,
    pub passage_embs: EmbeddingStore,
    pub teacher: NormalizedScoreTable,
    /// Candidate ids per query in retrieval order (positive excluded).
    pub ranked_candidates: Vec<Vec<String>>,
    pub near_duplicates: Vec<Vec<String>>,
}

pub const NEAR_DUPLICATE_RANKS: [usize; 5] = [2, 5, 9, 14, 18];

pub fn denoise_fixture(queries: usize, seed: u64) -> Result<DenoiseFixture> {
    const CANDIDATES: usize = 50;
    let dim = queries + CANDIDATES + 1;
    let mut q_rows = Vec::new();
    let mut p_rows = Vec::new();
    let mut qrels = Qrels::new();
    let mut pairs = Vec::new();
    let mut ranked_candidates = Vec::new();
    let mut near_duplicates = Vec::new();
    for i in 0..queries {
        let qid = format!("dq{i}");
        let pos = format!("dq{i}-pos");
        let mut v = vec![0.0f32; dim];
        v[i] = 1.0;
        q_rows.push((qid.clone(), v.clone()));
        p_rows.push((pos.clone(), v));
        qrels.insert(&qid, &pos, 2);
        let mut ranked = Vec::new();
        let mut dups = Vec::new();
        for r in 1..=CANDIDATES {
            let is_dup = NEAR_DUPLICATE_RANKS.contains(&r);
            let id = format!("dq{i}-{}{r:02}", if is_dup { "dup" } else { "c" });
            let c = 0.95 - 0.01 * r as f64;
            let mut v = vec![0.0f32; dim];
            v[i] = c as f32;
            v[queries + r] = (1.0 - c * c).sqrt() as f32;
            p_rows.push((id.clone(), v));
            if is_dup {
                qrels.insert(&qid, &id, 2);
                dups.push(id.clone());
            }
            ranked.push(id);
        }
        pairs.push((qid, pos));
        ranked_candidates.push(ranked);
        near_duplicates.push(dups);
    }
    let query_embs = EmbeddingStore::from_rows(dim, q_rows)?;
    let passage_embs = EmbeddingStore::from_rows(dim, p_rows)?;
    let extra: Vec<(String, String)> = pairs
        .iter()
        .zip(&ranked_candidates)
        .flat_map(|((q, _), cands)| cands.iter().map(move |c| (q.clone(), c.clone())))
        .collect();
    let raw = oracle_teacher(&qrels, extra.iter().map(|(q, p)| (q.as_str(), p.as_str())), seed, 0.02)?;
    Ok(DenoiseFixture {
        pairs,
        query_embs,
        passage_embs,
        teacher: normalize_scores(&raw)?,
        ranked_candidates,
        near_duplicates,
    })
}
