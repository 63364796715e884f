//! One batch of the combined objective with two-pass gradient caching.
//!
//! Pass 1 runs the adapter over every query and passage of the batch,
//! computes the loss and its gradient with respect to each adapted
//! embedding, scoring query rows one block at a time. Pass 2 walks the
//! batch in chunks and back-propagates the cached embedding gradients
//! through the adapter into `W` and `b`. The result is the gradient of the
//! full batch, whatever the chunk size.

use rayon::prelude::*;

use crate::embeddings::EmbeddingStore;
use crate::error::{Error, Result};
use crate::loss::{infonce_row, listwise_row, LossConfig};
use crate::negatives::TrainingGroup;

use super::adapter::AdapterModel;

/// Base embeddings and teacher scores of one batch. Passage rows hold the
/// `n` positives followed by the `n k` negatives (negative `kk` of query
/// `i` at row `n + i k + kk`), matching the InfoNCE candidate order.
#[derive(Debug, Clone)]
pub struct BatchInputs {
    pub n: usize,
    pub k: usize,
    pub dim: usize,
    pub queries: Vec<f64>,
    pub passages: Vec<f64>,
    pub teacher: Vec<f64>,
}

impl BatchInputs {
    pub fn gather(groups: &[&TrainingGroup], query_embs: &EmbeddingStore, passage_embs: &EmbeddingStore) -> Result<Self> {
        let n = groups.len();
        let k = groups.first().map_or(0, |g| g.k());
        let dim = query_embs.dim();
        if passage_embs.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: passage_embs.dim(),
            });
        }
        let widen = |v: &[f32], out: &mut Vec<f64>| out.extend(v.iter().map(|&x| x as f64));
        let mut b = BatchInputs {
            n,
            k,
            dim,
            queries: Vec::with_capacity(n * dim),
            passages: Vec::with_capacity(n * (k + 1) * dim),
            teacher: Vec::with_capacity(n * (k + 1)),
        };
        for g in groups {
            if g.k() != k {
                return Err(Error::invalid(format!("group `{}` has {} negatives, batch expects {k}", g.query_id, g.k())));
            }
            widen(query_embs.require(&g.query_id)?, &mut b.queries);
            widen(passage_embs.require(&g.positive_id)?, &mut b.passages);
            b.teacher.extend_from_slice(&g.teacher_scores);
        }
        for g in groups {
            for id in &g.negative_ids {
                widen(passage_embs.require(id)?, &mut b.passages);
            }
        }
        Ok(b)
    }

    fn passage_count(&self) -> usize {
        self.n * (self.k + 1)
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub listwise: f64,
    pub contrastive: f64,
    pub grad_w: Vec<f64>,
    pub grad_b: Vec<f64>,
    pub score_min: f64,
    pub score_max: f64,
}

struct Adapted {
    raw_norm: Vec<f64>,
    unit: Vec<f64>,
}

fn adapt(model: &AdapterModel, inputs: &[f64], dim: usize) -> Result<Adapted> {
    let rows: Vec<(f64, Vec<f64>)> = inputs
        .par_chunks(dim)
        .map(|x| {
            let mut r = vec![0.0; dim];
            model.forward_raw(x, &mut r);
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter_mut().for_each(|v| *v /= norm);
            (norm, r)
        })
        .collect();
    let mut out = Adapted {
        raw_norm: Vec::with_capacity(rows.len()),
        unit: Vec::with_capacity(inputs.len()),
    };
    for (i, (norm, r)) in rows.into_iter().enumerate() {
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNorm(format!("adapted row {i}")));
        }
        out.raw_norm.push(norm);
        out.unit.extend(r);
    }
    Ok(out)
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Gradient through `e = r / |r|`: `(g - (g . e) e) / |r|`, in place.
fn through_normalization(grad: &mut [f64], adapted: &Adapted, dim: usize) {
    grad.par_chunks_mut(dim)
        .zip(adapted.unit.par_chunks(dim))
        .zip(adapted.raw_norm.par_iter())
        .for_each(|((g, e), &norm)| {
            let ge = dot(g, e);
            for (gi, ei) in g.iter_mut().zip(e) {
                *gi = (*gi - ge * ei) / norm;
            }
        });
}

impl AdapterModel {
    /// Accumulates `dW += g x^T`, `db += g` for a chunk of rows.
    fn accumulate_param_grads(&self, inputs: &[f64], grads: &[f64], grad_w: &mut [f64], grad_b: &mut [f64]) {
        let d = self.dim;
        grad_w
            .par_chunks_mut(d)
            .zip(grad_b.par_iter_mut())
            .enumerate()
            .for_each(|(a, (w_row, b_a))| {
                for (x, g) in inputs.chunks(d).zip(grads.chunks(d)) {
                    let ga = g[a];
                    if ga != 0.0 {
                        for (w, xi) in w_row.iter_mut().zip(x) {
                            *w += ga * xi;
                        }
                        *b_a += ga;
                    }
                }
            });
    }
}

/// Loss and parameter gradients of the combined objective on one batch.
/// `chunk = None` scores all query rows at once and back-propagates the
/// whole batch in one go.
pub fn batch_gradients(model: &AdapterModel, batch: &BatchInputs, cfg: &LossConfig, chunk: Option<usize>) -> Result<StepOutput> {
    let (n, k, d) = (batch.n, batch.k, batch.dim);
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let m = batch.passage_count();
    let block = chunk.unwrap_or(n).max(1);

    // Pass 1: adapted embeddings without parameter bookkeeping.
    let q = adapt(model, &batch.queries, d)?;
    let p = adapt(model, &batch.passages, d)?;

    let inv_n = 1.0 / n as f64;
    let mut grad_q = vec![0.0; n * d];
    let mut grad_p = vec![0.0; m * d];
    let mut listwise_terms = Vec::with_capacity(n);
    let mut contrastive_terms = Vec::with_capacity(n);
    let (mut score_min, mut score_max) = (f64::INFINITY, f64::NEG_INFINITY);

    for start in (0..n).step_by(block) {
        let end = (start + block).min(n);
        let rows: Vec<(f64, f64, Vec<f64>, f64, f64)> = (start..end)
            .into_par_iter()
            .map(|i| {
                let eq = &q.unit[i * d..(i + 1) * d];
                let logits: Vec<f64> = p.unit.chunks(d).map(|ep| dot(eq, ep)).collect();
                let lo = logits.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let (lc, gc) = infonce_row(&logits, i, cfg.tau_contrastive);
                let student: Vec<f64> = std::iter::once(logits[i])
                    .chain((0..k).map(|kk| logits[n + i * k + kk]))
                    .collect();
                let (ll, gl) = listwise_row(&student, &batch.teacher[i * (k + 1)..(i + 1) * (k + 1)], cfg)?;
                let mut g: Vec<f64> = gc.iter().map(|x| x * cfg.contrastive_weight * inv_n).collect();
                let lw = cfg.listwise_weight * inv_n;
                g[i] += gl[0] * lw;
                for kk in 0..k {
                    g[n + i * k + kk] += gl[1 + kk] * lw;
                }
                Ok((ll, lc, g, lo, hi))
            })
            .collect::<Result<_>>()?;

        for (offset, (ll, lc, g, lo, hi)) in rows.iter().enumerate() {
            let i = start + offset;
            listwise_terms.push(*ll);
            contrastive_terms.push(*lc);
            score_min = score_min.min(*lo);
            score_max = score_max.max(*hi);
            let gq = &mut grad_q[i * d..(i + 1) * d];
            for (c, ep) in p.unit.chunks(d).enumerate() {
                let w = g[c];
                for (a, b) in gq.iter_mut().zip(ep) {
                    *a += w * b;
                }
            }
        }
        grad_p.par_chunks_mut(d).enumerate().for_each(|(c, gp)| {
            for (offset, row) in rows.iter().enumerate() {
                let w = row.2[c];
                if w != 0.0 {
                    let i = start + offset;
                    for (a, b) in gp.iter_mut().zip(&q.unit[i * d..(i + 1) * d]) {
                        *a += w * b;
                    }
                }
            }
        });
    }

    let listwise = listwise_terms.iter().sum::<f64>() * inv_n;
    let contrastive = contrastive_terms.iter().sum::<f64>() * inv_n;
    let loss = cfg.listwise_weight * listwise + cfg.contrastive_weight * contrastive;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {loss} (scores in [{score_min}, {score_max}])"
        )));
    }

    through_normalization(&mut grad_q, &q, d);
    through_normalization(&mut grad_p, &p, d);

    // Pass 2: inject cached embedding gradients chunk by chunk.
    let mut grad_w = vec![0.0; d * d];
    let mut grad_b = vec![0.0; d];
    let slot_chunk = chunk.unwrap_or(usize::MAX).max(1);
    for (inputs, grads) in [(&batch.queries, &grad_q), (&batch.passages, &grad_p)] {
        let rows = inputs.len() / d;
        for start in (0..rows).step_by(slot_chunk.min(rows.max(1))) {
            let end = start.saturating_add(slot_chunk).min(rows);
            model.accumulate_param_grads(&inputs[start * d..end * d], &grads[start * d..end * d], &mut grad_w, &mut grad_b);
        }
    }

    Ok(StepOutput {
        loss,
        listwise,
        contrastive,
        grad_w,
        grad_b,
        score_min,
        score_max,
    })
}
