//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use distill_core::corpus::normalize_text;
use distill_core::loss::{BatchEmbeddings, BatchScores};
use distill_core::embeddings::EmbeddingStore;
use distill_core::negatives::TrainingGroup;
use distill_core::rng::SeededStream;
use distill_core::teacher::{RawScoreTable, ScoreRecord};
use distill_core::trainer::AdapterModel;

pub const FD_STEP: f64 = 1e-5;

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += FD_STEP;
    let mut xm = x.to_vec();
    xm[i] -= FD_STEP;
    (f(&xp) - f(&xm)) / (2.0 * FD_STEP)
}

/// `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

/// Central differences of `f` along every coordinate of `x`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    (0..x.len()).map(|i| central_diff(&mut f, x, i)).collect()
}

/// Relative error of a whole gradient vector: `|a - n|_2 / |n|_2`, or the
/// absolute error when the numeric gradient vanishes.
pub fn vector_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / scale.max(1.0e-8)
}

pub fn random_vec(rng: &mut SeededStream, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.normal()).collect()
}

pub fn random_embeddings(rng: &mut SeededStream, n: usize, k: usize, dim: usize) -> BatchEmbeddings {
    BatchEmbeddings {
        n,
        k,
        dim,
        queries: random_vec(rng, n * dim),
        positives: random_vec(rng, n * dim),
        negatives: random_vec(rng, n * k * dim),
    }
}

pub fn random_teacher(rng: &mut SeededStream, n: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    let pos = (0..n).map(|_| rng.uniform()).collect();
    let neg = (0..n * k).map(|_| rng.uniform()).collect();
    (pos, neg)
}

/// Concatenation of every student score slot, in field order.
pub fn flatten_student(b: &BatchScores) -> Vec<f64> {
    [&b.student_pos, &b.student_neg, &b.student_cross, &b.student_cross_neg]
        .into_iter()
        .flatten()
        .copied()
        .collect()
}

/// Inverse of [`flatten_student`] on a template batch.
pub fn with_student(template: &BatchScores, flat: &[f64]) -> BatchScores {
    let (n, k) = (template.n, template.k);
    let mut b = template.clone();
    let mut at = 0;
    for (field, len) in [
        (&mut b.student_pos, n),
        (&mut b.student_neg, n * k),
        (&mut b.student_cross, n * n),
        (&mut b.student_cross_neg, n * n * k),
    ] {
        field.copy_from_slice(&flat[at..at + len]);
        at += len;
    }
    b
}

pub fn flatten_embeddings(e: &BatchEmbeddings) -> Vec<f64> {
    [&e.queries, &e.positives, &e.negatives].into_iter().flatten().copied().collect()
}

pub fn with_embeddings(template: &BatchEmbeddings, flat: &[f64]) -> BatchEmbeddings {
    let mut e = template.clone();
    let (a, b) = (e.queries.len(), e.positives.len());
    e.queries.copy_from_slice(&flat[..a]);
    e.positives.copy_from_slice(&flat[a..a + b]);
    e.negatives.copy_from_slice(&flat[a + b..]);
    e
}

/// Survivor ids by brute force: a passage goes when its normalized text
/// occurs inside a different normalized text, or equals the text of an
/// earlier passage.
pub fn naive_survivors(records: &[(String, String)]) -> BTreeSet<String> {
    let norms: Vec<String> = records.iter().map(|(_, t)| normalize_text(t)).collect();
    let mut keep = BTreeSet::new();
    for (i, a) in norms.iter().enumerate() {
        let removed = norms.iter().enumerate().any(|(j, b)| {
            j != i && ((a != b && b.contains(a.as_str())) || (a == b && j < i))
        });
        if !removed {
            keep.insert(records[i].0.clone());
        }
    }
    keep
}

pub fn flatten_grads(g: &distill_core::loss::ScoreGrads) -> Vec<f64> {
    [&g.pos, &g.neg, &g.cross, &g.cross_neg].into_iter().flatten().copied().collect()
}

pub fn flatten_embedding_grads(g: &distill_core::loss::EmbeddingGrads) -> Vec<f64> {
    [&g.queries, &g.positives, &g.negatives].into_iter().flatten().copied().collect()
}

/// Worst gradient-check errors over a family of random batches.
#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub batches: usize,
    /// Worst `|a - n|_2 / |n|_2` for listwise, InfoNCE and combined, with
    /// respect to scores and then embeddings.
    pub worst_vector: [f64; 6],
    /// Worst per-entry `|a - n| / (|n| + 1e-8)`, same order.
    pub worst_entry: [f64; 6],
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.worst_vector.iter().copied().fold(0.0, f64::max)
    }
}

/// Random batches with `1 <= n <= 8`, `0 <= K <= 4`, `2 <= dim <= 16`,
/// Gaussian raw embeddings and uniform teacher scores.
pub fn gradient_check(batches: u64, cfg: &distill_core::loss::LossConfig) -> GradCheck {
    use distill_core::loss::{combined_loss, infonce_loss, listwise_kl_loss};
    let mut out = GradCheck {
        batches: batches as usize,
        ..Default::default()
    };
    for seed in 0..batches {
        let mut rng = SeededStream::new(0x9c4d ^ seed);
        let n = 1 + rng.below(8) as usize;
        let k = rng.below(5) as usize;
        let dim = 2 + rng.below(15) as usize;
        let emb = random_embeddings(&mut rng, n, k, dim);
        let (tp, tn) = random_teacher(&mut rng, n, k);
        let scores = emb.scores(tp.clone(), tn.clone()).unwrap();
        let flat = flatten_student(&scores);
        let flat_emb = flatten_embeddings(&emb);
        let losses: [&dyn Fn(&BatchScores) -> (f64, distill_core::loss::ScoreGrads); 3] = [
            &|b| {
                let o = listwise_kl_loss(b, cfg).unwrap();
                (o.loss, o.grads)
            },
            &|b| {
                let o = infonce_loss(b, cfg).unwrap();
                (o.loss, o.grads)
            },
            &|b| {
                let o = combined_loss(b, cfg).unwrap();
                (o.loss, o.grads)
            },
        ];
        for (l, loss) in losses.iter().enumerate() {
            let (_, grads) = loss(&scores);
            let analytic = flatten_grads(&grads);
            let numeric = numeric_gradient(|x| loss(&with_student(&scores, x)).0, &flat);
            record(&mut out, l, &analytic, &numeric);

            let analytic = flatten_embedding_grads(&emb.backprop(&grads).unwrap());
            let numeric = numeric_gradient(
                |x| loss(&with_embeddings(&emb, x).scores(tp.clone(), tn.clone()).unwrap()).0,
                &flat_emb,
            );
            record(&mut out, 3 + l, &analytic, &numeric);
        }
    }
    out
}

fn record(out: &mut GradCheck, slot: usize, analytic: &[f64], numeric: &[f64]) {
    out.worst_vector[slot] = out.worst_vector[slot].max(vector_rel_err(analytic, numeric));
    let entry = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max);
    out.worst_entry[slot] = out.worst_entry[slot].max(entry);
}

const WORDS: [&str; 12] = ["the", "cat", "sat", "on", "a", "mat", "Dog", "runs", "far", "éclair", "naïve", "x"];
const SEPARATORS: [&str; 6] = [" ", "  ", ", ", "! ", " — ", "\t"];

/// Up to `max_len` passages over a tiny vocabulary so that containment is
/// common: fresh texts, substrings of earlier texts with case and
/// punctuation noise, exact copies and the occasional empty text.
pub fn random_corpus(rng: &mut SeededStream, max_len: usize) -> Vec<(String, String)> {
    let n = 1 + rng.below(max_len as u64) as usize;
    let mut texts: Vec<String> = Vec::with_capacity(n);
    for _ in 0..n {
        let roll = rng.below(100);
        let text = if roll < 3 {
            if rng.below(2) == 0 { String::new() } else { "?!  ".to_owned() }
        } else if roll < 10 && !texts.is_empty() {
            texts[rng.below(texts.len() as u64) as usize].clone()
        } else if roll < 40 && !texts.is_empty() {
            let src = &texts[rng.below(texts.len() as u64) as usize];
            let words: Vec<&str> = src.split_whitespace().collect();
            if words.is_empty() {
                String::new()
            } else {
                let start = rng.below(words.len() as u64) as usize;
                let len = 1 + rng.below((words.len() - start) as u64) as usize;
                let mut t = words[start..start + len].join(" ");
                if rng.below(2) == 0 {
                    t = t.to_uppercase();
                }
                t.push('.');
                t
            }
        } else {
            let len = 1 + rng.below(8) as usize;
            let mut t = String::new();
            for i in 0..len {
                if i > 0 {
                    t.push_str(SEPARATORS[rng.below(SEPARATORS.len() as u64) as usize]);
                }
                t.push_str(WORDS[rng.below(WORDS.len() as u64) as usize]);
            }
            t
        };
        texts.push(text);
    }
    texts.into_iter().enumerate().map(|(i, t)| (format!("p{i}"), t)).collect()
}

/// `n` passages of 20 to 60 words from a 5,000-word vocabulary, about one
/// in twenty a verbatim slice of an earlier passage.
pub fn large_corpus(n: usize, seed: u64) -> Vec<(String, String)> {
    let mut rng = SeededStream::new(seed);
    let vocab: Vec<String> = (0..5000)
        .map(|_| {
            let len = 3 + rng.below(6) as usize;
            (0..len).map(|_| (b'a' + rng.below(26) as u8) as char).collect()
        })
        .collect();
    let mut texts: Vec<String> = Vec::with_capacity(n);
    for _ in 0..n {
        let text = if !texts.is_empty() && rng.below(20) == 0 {
            let src = &texts[rng.below(texts.len() as u64) as usize];
            let words: Vec<&str> = src.split(' ').collect();
            let start = rng.below(words.len() as u64 / 2) as usize;
            let end = (start + 10).min(words.len());
            words[start..end].join(" ")
        } else {
            let len = 20 + rng.below(41) as usize;
            let words: Vec<&str> = (0..len).map(|_| vocab[rng.below(5000) as usize].as_str()).collect();
            words.join(" ")
        };
        texts.push(text);
    }
    texts.into_iter().enumerate().map(|(i, t)| (format!("d{i:06}"), t)).collect()
}

/// Checks one dedup result against the brute-force survivors and the
/// attribution contract. Returns a description of the first violation.
pub fn check_dedup(records: &[(String, String)]) -> Result<(), String> {
    use distill_core::corpus::{dedup_corpus, Corpus};
    let corpus = Corpus::from_pairs(records.iter().map(|(i, t)| (i.as_str(), t.as_str()))).map_err(|e| e.to_string())?;
    let (kept, removals) = dedup_corpus(&corpus);
    let got: BTreeSet<String> = kept.passages().iter().map(|p| p.id.clone()).collect();
    let want = naive_survivors(records);
    if got != want {
        return Err(format!("survivors differ: got {got:?}, want {want:?}"));
    }
    if got.len() + removals.len() != records.len() {
        return Err("kept and removed do not partition the input".into());
    }
    for r in &removals {
        let (Some(a), Some(b)) = (corpus.get(&r.removed), kept.get(&r.kept_superstring)) else {
            return Err(format!("bad attribution {r:?}"));
        };
        if !b.norm_text.contains(a.norm_text.as_str()) {
            return Err(format!("{r:?}: kept text does not contain the removed text"));
        }
    }
    let ps = kept.passages();
    for a in ps {
        for b in ps {
            if a.id != b.id && b.norm_text.contains(a.norm_text.as_str()) {
                return Err(format!("`{}` still inside `{}`", a.id, b.id));
            }
        }
    }
    Ok(())
}

pub enum Metric {
    Ndcg(usize),
    Recall(usize),
    Map,
}

/// A single-query ranking with judged grades and its hand-computed score.
pub struct MetricFixture {
    pub name: &'static str,
    pub grades: &'static [(&'static str, u32)],
    pub ranked: &'static [&'static str],
    pub metric: Metric,
    pub expected: f64,
}

pub fn metric_fixtures() -> Vec<MetricFixture> {
    use Metric::*;
    let f = |name, grades, ranked, metric, expected| MetricFixture { name, grades, ranked, metric, expected };
    vec![
        f("ndcg perfect single", &[("a", 1)], &["a", "x"], Ndcg(10), 1.0),
        // 1 / log2(3)
        f("ndcg relevant at two", &[("a", 1)], &["x", "a"], Ndcg(10), 0.63093),
        f("ndcg relevant at three", &[("a", 1)], &["x", "y", "a"], Ndcg(10), 0.5),
        // (1 + 3/log2 3) / (3 + 1/log2 3)
        f("ndcg swapped grades", &[("a", 2), ("b", 1)], &["b", "a"], Ndcg(10), 0.79671),
        // (1 + 3/log2 3 + 7/2) / (7 + 3/log2 3 + 1/2)
        f("ndcg reversed three grades", &[("a", 3), ("b", 2), ("c", 1)], &["c", "b", "a"], Ndcg(10), 0.68061),
        f("ndcg gap in binary", &[("a", 1), ("b", 1)], &["a", "x", "b"], Ndcg(10), 0.91972),
        f("ndcg graded late", &[("a", 3), ("b", 1)], &["x", "b", "a"], Ndcg(10), 0.54134),
        f("ndcg nothing relevant retrieved", &[("a", 1)], &["x", "y"], Ndcg(10), 0.0),
        f("ndcg beyond cutoff", &[("a", 1)], &["x", "y", "a"], Ndcg(2), 0.0),
        f("ndcg judged zero ignored", &[("a", 1), ("b", 0)], &["b", "a"], Ndcg(10), 0.63093),
        // (1 + 2/3) / 2
        f("map two of two", &[("a", 1), ("c", 1)], &["a", "b", "c"], Map, 0.83333),
        // (1/2 + 2/4) / 3
        f("map two of three", &[("a", 1), ("b", 1), ("c", 1)], &["x", "a", "y", "b"], Map, 0.33333),
        f("map grade two counts once", &[("a", 2)], &["x", "a"], Map, 0.5),
        f("recall cut at two", &[("a", 1), ("b", 1), ("c", 1)], &["a", "x", "b"], Recall(2), 0.33333),
        f("recall grade zero is not relevant", &[("a", 1), ("b", 0)], &["b", "a"], Recall(100), 1.0),
        f("recall half", &[("a", 1), ("b", 1), ("c", 1), ("d", 1)], &["a", "x", "c"], Recall(100), 0.5),
    ]
}

impl MetricFixture {
    /// Computes the fixture's metric through the library.
    pub fn evaluate(&self) -> f64 {
        use distill_core::eval::{map_metric, ndcg_at_k, recall_at_k, Qrels, RunFile};
        let mut qrels = Qrels::new();
        for &(p, g) in self.grades {
            qrels.insert("q", p, g);
        }
        let mut run = RunFile::new("fixture");
        let n = self.ranked.len();
        run.insert("q", self.ranked.iter().enumerate().map(|(i, p)| (p.to_string(), (n - i) as f64)).collect())
            .unwrap();
        match self.metric {
            Metric::Ndcg(k) => ndcg_at_k(&run, &qrels, k).unwrap().mean,
            Metric::Recall(k) => recall_at_k(&run, &qrels, k).unwrap().mean,
            Metric::Map => map_metric(&run, &qrels).mean,
        }
    }
}

/// `n` queries, each with one positive and `k` negatives drawn from a
/// shared pool, plus teacher scores that favour the positive.
pub struct TrainingSet {
    pub groups: Vec<TrainingGroup>,
    pub queries: EmbeddingStore,
    pub passages: EmbeddingStore,
}

pub fn training_set(seed: u64, n: usize, k: usize, dim: usize) -> TrainingSet {
    let mut rng = SeededStream::new(seed);
    let pool = n + 3 * k;
    let row = |id: String, rng: &mut SeededStream| {
        (id, random_vec(rng, dim).into_iter().map(|x| x as f32).collect::<Vec<f32>>())
    };
    let passages: Vec<_> = (0..pool).map(|i| row(format!("p{i:04}"), &mut rng)).collect();
    let queries: Vec<_> = (0..n).map(|i| row(format!("q{i:04}"), &mut rng)).collect();
    let groups = (0..n)
        .map(|i| {
            let mut negs: Vec<usize> = (0..pool).filter(|&j| j != i).collect();
            rng.shuffle(&mut negs);
            let mut teacher = vec![0.7 + 0.3 * rng.uniform()];
            teacher.extend((0..k).map(|_| 0.4 * rng.uniform()));
            TrainingGroup {
                query_id: format!("q{i:04}"),
                positive_id: format!("p{i:04}"),
                negative_ids: negs[..k].iter().map(|j| format!("p{j:04}")).collect(),
                teacher_scores: teacher,
            }
        })
        .collect();
    TrainingSet {
        groups,
        queries: EmbeddingStore::from_rows(dim, queries).unwrap(),
        passages: EmbeddingStore::from_rows(dim, passages).unwrap(),
    }
}

pub fn perturbed_model(dim: usize, seed: u64, scale: f64) -> AdapterModel {
    let mut rng = SeededStream::new(seed);
    let mut m = AdapterModel::identity(dim);
    m.w.iter_mut().for_each(|w| *w += scale * rng.normal());
    m.b.iter_mut().for_each(|b| *b += scale * rng.normal());
    m
}

pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// A random mining problem where the teacher scores every candidate
/// strictly below the positive.
pub fn random_problem(seed: u64, n_passages: usize) -> (EmbeddingStore, EmbeddingStore, RawScoreTable) {
    let mut rng = SeededStream::new(seed);
    let dim = 6;
    let mut row = |id: String| (id, (0..dim).map(|_| rng.normal() as f32).collect::<Vec<f32>>());
    let passages = EmbeddingStore::from_rows(dim, (0..n_passages).map(|i| row(format!("p{i:03}")))).unwrap();
    let queries = EmbeddingStore::from_rows(dim, (0..4).map(|i| row(format!("q{i}")))).unwrap();
    let mut records = Vec::new();
    for q in 0..4 {
        for p in 0..n_passages {
            let score = if p == q { 0.9 } else { 0.89 * rng.uniform() };
            records.push(ScoreRecord { query_id: format!("q{q}"), passage_id: format!("p{p:03}"), score });
        }
    }
    (passages, queries, RawScoreTable::from_records(records).unwrap())
}
