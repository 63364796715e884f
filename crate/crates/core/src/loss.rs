//! Listwise distillation (KL between teacher and student softmax
//! distributions over a positive and its hard negatives), in-batch InfoNCE
//! against every positive and hard negative in the batch, their weighted
//! sum, and exact gradients.
//!
//! All arithmetic is 64-bit. Per-query terms are reduced in query order, so
//! results are bitwise reproducible regardless of thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Temperature of the student (dense retriever) distribution.
    pub tau_student: f64,
    /// Temperature of the teacher (cross-encoder) distribution.
    pub tau_teacher: f64,
    pub tau_contrastive: f64,
    pub contrastive_weight: f64,
    /// Weight of the listwise term; 0 leaves a contrastive-only objective.
    pub listwise_weight: f64,
    pub k: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau_student: 0.05,
            tau_teacher: 0.3,
            tau_contrastive: 0.01,
            contrastive_weight: 0.1,
            listwise_weight: 1.0,
            k: 19,
        }
    }
}

impl LossConfig {
    /// InfoNCE alone at unit weight.
    pub fn contrastive_only() -> Self {
        LossConfig {
            contrastive_weight: 1.0,
            listwise_weight: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("tau_student", self.tau_student),
            ("tau_teacher", self.tau_teacher),
            ("tau_contrastive", self.tau_contrastive),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {t}")));
            }
        }
        for (name, w) in [
            ("contrastive_weight", self.contrastive_weight),
            ("listwise_weight", self.listwise_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!("{name} must be >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Every score entering both losses for a batch of `n` queries with `k`
/// hard negatives each. Matrices are row-major by query.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchScores {
    pub n: usize,
    pub k: usize,
    /// `s(q_i, p_i)`, length `n`.
    pub student_pos: Vec<f64>,
    /// `s(q_i, p_ik)`, `n x k`.
    pub student_neg: Vec<f64>,
    /// `s(q_i, p_j)`, `n x n`.
    pub student_cross: Vec<f64>,
    /// `s(q_i, p_jk)`, `n x (n k)` with column `j * k + kk`.
    pub student_cross_neg: Vec<f64>,
    pub teacher_pos: Vec<f64>,
    pub teacher_neg: Vec<f64>,
}

/// Gradients with the same layout as the student fields of [`BatchScores`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrads {
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
    pub cross: Vec<f64>,
    pub cross_neg: Vec<f64>,
}

impl ScoreGrads {
    pub fn zeros(n: usize, k: usize) -> Self {
        ScoreGrads {
            pos: vec![0.0; n],
            neg: vec![0.0; n * k],
            cross: vec![0.0; n * n],
            cross_neg: vec![0.0; n * n * k],
        }
    }

    fn axpy(&mut self, a: f64, other: &ScoreGrads) {
        for (dst, src) in [
            (&mut self.pos, &other.pos),
            (&mut self.neg, &other.neg),
            (&mut self.cross, &other.cross),
            (&mut self.cross_neg, &other.cross_neg),
        ] {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += a * s;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Unweighted per-query terms, before averaging.
    pub per_query: Vec<f64>,
    pub grads: ScoreGrads,
}

impl BatchScores {
    pub fn validate(&self) -> Result<()> {
        let (n, k) = (self.n, self.k);
        let shapes = [
            ("student_pos", self.student_pos.len(), n),
            ("student_neg", self.student_neg.len(), n * k),
            ("student_cross", self.student_cross.len(), n * n),
            ("student_cross_neg", self.student_cross_neg.len(), n * n * k),
            ("teacher_pos", self.teacher_pos.len(), n),
            ("teacher_neg", self.teacher_neg.len(), n * k),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::invalid(format!("{name} has {got} entries, expected {want}")));
            }
        }
        Ok(())
    }

    fn listwise_student_row(&self, i: usize) -> Vec<f64> {
        let k = self.k;
        std::iter::once(self.student_pos[i])
            .chain(self.student_neg[i * k..(i + 1) * k].iter().copied())
            .collect()
    }

    fn listwise_teacher_row(&self, i: usize) -> Vec<f64> {
        let k = self.k;
        std::iter::once(self.teacher_pos[i])
            .chain(self.teacher_neg[i * k..(i + 1) * k].iter().copied())
            .collect()
    }

    /// InfoNCE candidates for query `i`: all `n` positives, then all `n k`
    /// hard negatives. The target is column `i`.
    fn contrastive_row(&self, i: usize) -> Vec<f64> {
        let (n, k) = (self.n, self.k);
        self.student_cross[i * n..(i + 1) * n]
            .iter()
            .chain(&self.student_cross_neg[i * n * k..(i + 1) * n * k])
            .copied()
            .collect()
    }
}

fn check_finite(xs: &[f64], what: &str) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what}[{i}] = {}", xs[i]))),
        None => Ok(()),
    }
}

/// Tempered softmax with max subtraction.
pub fn listwise_distributions(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    check_finite(scores, "scores")?;
    Ok(softmax(scores, tau))
}

fn softmax(scores: &[f64], tau: f64) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|&s| ((s - max) / tau).exp()).collect();
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    out
}

/// `ln sum exp(scores / tau)` split as `(max, ln_1p(rest))`, so that
/// `lse = max / tau + ln_1p(rest)`. The arg-max term contributes exactly 1
/// to the shifted sum; keeping the remainder apart preserves its precision
/// when one score dominates.
fn log_sum_exp_parts(scores: &[f64], tau: f64) -> (f64, f64) {
    let (arg, max) = scores
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, s)| if s > best.1 { (i, s) } else { best });
    let rest: f64 = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, &s)| ((s - max) / tau).exp())
        .sum();
    (max, rest.ln_1p())
}

/// `ln softmax(scores / tau)[j]`, with the shift folded in before the
/// division so a dominant entry yields exactly `-ln_1p(rest)`.
fn log_softmax_at(scores: &[f64], tau: f64, parts: (f64, f64), j: usize) -> f64 {
    (scores[j] - parts.0) / tau - parts.1
}

/// One query's listwise term `KL(p_teacher || p_student)` and its gradient
/// with respect to the student scores, `(p_s - p_t) / tau_student`.
pub fn listwise_row(student: &[f64], teacher: &[f64], cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    let ps = listwise_distributions(student, cfg.tau_student)?;
    let pt = listwise_distributions(teacher, cfg.tau_teacher)?;
    let zs = log_sum_exp_parts(student, cfg.tau_student);
    let zt = log_sum_exp_parts(teacher, cfg.tau_teacher);
    let mut kl = 0.0;
    for j in 0..student.len() {
        if pt[j] > 0.0 {
            let log_pt = log_softmax_at(teacher, cfg.tau_teacher, zt, j);
            let log_ps = log_softmax_at(student, cfg.tau_student, zs, j);
            kl += pt[j] * (log_pt - log_ps);
        }
    }
    let grad = ps
        .iter()
        .zip(&pt)
        .map(|(s, t)| (s - t) / cfg.tau_student)
        .collect();
    Ok((kl.max(0.0), grad))
}

/// One query's InfoNCE term `-ln softmax(logits / tau)[target]` and its
/// gradient `(softmax - onehot) / tau`.
pub fn infonce_row(logits: &[f64], target: usize, tau: f64) -> (f64, Vec<f64>) {
    let loss = -log_softmax_at(logits, tau, log_sum_exp_parts(logits, tau), target);
    let mut grad = softmax(logits, tau);
    // `p_target - 1` summed from the other entries avoids cancellation.
    grad[target] = -grad
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != target)
        .map(|(_, p)| p)
        .sum::<f64>();
    for g in &mut grad {
        *g /= tau;
    }
    (loss, grad)
}

/// Mean over queries of `KL(teacher || student)`.
pub fn listwise_kl_loss(batch: &BatchScores, cfg: &LossConfig) -> Result<LossOutput> {
    batch.validate()?;
    if batch.n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let (n, k) = (batch.n, batch.k);
    let rows: Vec<(f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| listwise_row(&batch.listwise_student_row(i), &batch.listwise_teacher_row(i), cfg))
        .collect::<Result<_>>()?;
    let mut grads = ScoreGrads::zeros(n, k);
    let scale = 1.0 / n as f64;
    let mut per_query = Vec::with_capacity(n);
    for (i, (l, g)) in rows.into_iter().enumerate() {
        per_query.push(l);
        grads.pos[i] = g[0] * scale;
        for kk in 0..k {
            grads.neg[i * k + kk] = g[1 + kk] * scale;
        }
    }
    finish(per_query, grads)
}

/// In-batch InfoNCE whose denominator covers every positive (including the
/// query's own) and every mined hard negative in the batch.
pub fn infonce_loss(batch: &BatchScores, cfg: &LossConfig) -> Result<LossOutput> {
    batch.validate()?;
    if batch.n == 0 {
        return Err(Error::invalid("InfoNCE needs at least one query"));
    }
    check_finite(&batch.student_cross, "student_cross")?;
    check_finite(&batch.student_cross_neg, "student_cross_neg")?;
    let (n, k) = (batch.n, batch.k);
    let rows: Vec<(f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| infonce_row(&batch.contrastive_row(i), i, cfg.tau_contrastive))
        .collect();
    let mut grads = ScoreGrads::zeros(n, k);
    let scale = 1.0 / n as f64;
    let mut per_query = Vec::with_capacity(n);
    for (i, (l, g)) in rows.into_iter().enumerate() {
        per_query.push(l);
        for j in 0..n {
            grads.cross[i * n + j] = g[j] * scale;
        }
        for c in 0..n * k {
            grads.cross_neg[i * n * k + c] = g[n + c] * scale;
        }
    }
    finish(per_query, grads)
}

fn finish(per_query: Vec<f64>, grads: ScoreGrads) -> Result<LossOutput> {
    let loss = per_query.iter().sum::<f64>() / per_query.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss = {loss}")));
    }
    Ok(LossOutput {
        loss,
        per_query,
        grads,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedOutput {
    pub loss: f64,
    pub listwise: LossOutput,
    pub contrastive: LossOutput,
    pub grads: ScoreGrads,
}

/// `listwise_weight * listwise + contrastive_weight * infonce`, gradients
/// summed alike.
pub fn combined_loss(batch: &BatchScores, cfg: &LossConfig) -> Result<CombinedOutput> {
    cfg.validate()?;
    let listwise = listwise_kl_loss(batch, cfg)?;
    let contrastive = infonce_loss(batch, cfg)?;
    let mut grads = ScoreGrads::zeros(batch.n, batch.k);
    grads.axpy(cfg.listwise_weight, &listwise.grads);
    grads.axpy(cfg.contrastive_weight, &contrastive.grads);
    let loss = cfg.listwise_weight * listwise.loss + cfg.contrastive_weight * contrastive.loss;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("combined loss = {loss}")));
    }
    Ok(CombinedOutput {
        loss,
        listwise,
        contrastive,
        grads,
    })
}

/// Writes `query_index,listwise,infonce` rows for debugging.
pub fn write_loss_terms_csv(path: &std::path::Path, out: &CombinedOutput) -> Result<()> {
    use std::fmt::Write as _;
    let mut s = String::from("query_index,listwise,infonce\n");
    for (i, (l, c)) in out.listwise.per_query.iter().zip(&out.contrastive.per_query).enumerate() {
        writeln!(s, "{i},{l},{c}").unwrap();
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Raw (pre-normalization) embeddings of a batch: `n` queries, their `n`
/// positives and `n k` negatives, each row of length `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEmbeddings {
    pub n: usize,
    pub k: usize,
    pub dim: usize,
    pub queries: Vec<f64>,
    pub positives: Vec<f64>,
    pub negatives: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrads {
    pub queries: Vec<f64>,
    pub positives: Vec<f64>,
    pub negatives: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// `d cos(u, v) / d u = v / (|u||v|) - cos(u, v) u / |u|^2`.
pub fn cosine_grad_wrt_first(u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm("cosine operand".into()));
    }
    let cos = dot(u, v) / (nu * nv);
    Ok(u.iter()
        .zip(v)
        .map(|(a, b)| b / (nu * nv) - cos * a / (nu * nu))
        .collect())
}

impl BatchEmbeddings {
    fn row(m: &[f64], i: usize, dim: usize) -> &[f64] {
        &m[i * dim..(i + 1) * dim]
    }

    fn check(&self) -> Result<()> {
        let (n, k, d) = (self.n, self.k, self.dim);
        if self.queries.len() != n * d || self.positives.len() != n * d || self.negatives.len() != n * k * d {
            return Err(Error::invalid("batch embedding shapes disagree with n, k, dim"));
        }
        let zero = |m: &[f64]| m.chunks(d).position(|r| norm(r) == 0.0);
        for (name, m) in [("query", &self.queries), ("positive", &self.positives), ("negative", &self.negatives)] {
            if let Some(i) = zero(m) {
                return Err(Error::ZeroNorm(format!("{name} {i}")));
            }
        }
        Ok(())
    }

    fn cos(u: &[f64], v: &[f64]) -> f64 {
        dot(u, v) / (norm(u) * norm(v))
    }

    /// Cosine scores for every slot of [`BatchScores`].
    pub fn scores(&self, teacher_pos: Vec<f64>, teacher_neg: Vec<f64>) -> Result<BatchScores> {
        self.check()?;
        let (n, k, d) = (self.n, self.k, self.dim);
        let q = |i| Self::row(&self.queries, i, d);
        let p = |j| Self::row(&self.positives, j, d);
        let ng = |c| Self::row(&self.negatives, c, d);
        let mut b = BatchScores {
            n,
            k,
            student_pos: (0..n).map(|i| Self::cos(q(i), p(i))).collect(),
            student_neg: Vec::with_capacity(n * k),
            student_cross: Vec::with_capacity(n * n),
            student_cross_neg: Vec::with_capacity(n * n * k),
            teacher_pos,
            teacher_neg,
        };
        for i in 0..n {
            b.student_neg.extend((0..k).map(|kk| Self::cos(q(i), ng(i * k + kk))));
            b.student_cross.extend((0..n).map(|j| Self::cos(q(i), p(j))));
            b.student_cross_neg.extend((0..n * k).map(|c| Self::cos(q(i), ng(c))));
        }
        b.validate()?;
        Ok(b)
    }

    /// Chain rule from score gradients to raw embedding gradients, summing
    /// over every score each embedding takes part in.
    pub fn backprop(&self, g: &ScoreGrads) -> Result<EmbeddingGrads> {
        self.check()?;
        let (n, k, d) = (self.n, self.k, self.dim);
        let mut out = EmbeddingGrads {
            queries: vec![0.0; n * d],
            positives: vec![0.0; n * d],
            negatives: vec![0.0; n * k * d],
        };
        let q = |i| Self::row(&self.queries, i, d);
        let p = |j| Self::row(&self.positives, j, d);
        let ng = |c| Self::row(&self.negatives, c, d);

        let accumulate = |weight: f64, qi: usize, target: Target, out: &mut EmbeddingGrads| -> Result<()> {
            if weight == 0.0 {
                return Ok(());
            }
            let (v, slot): (&[f64], &mut [f64]) = match target {
                Target::Pos(j) => (p(j), &mut out.positives[j * d..(j + 1) * d]),
                Target::Neg(c) => (ng(c), &mut out.negatives[c * d..(c + 1) * d]),
            };
            let dv = cosine_grad_wrt_first(v, q(qi))?;
            for (s, x) in slot.iter_mut().zip(&dv) {
                *s += weight * x;
            }
            let du = cosine_grad_wrt_first(q(qi), v)?;
            for (s, x) in out.queries[qi * d..(qi + 1) * d].iter_mut().zip(&du) {
                *s += weight * x;
            }
            Ok(())
        };

        for i in 0..n {
            accumulate(g.pos[i], i, Target::Pos(i), &mut out)?;
            for kk in 0..k {
                accumulate(g.neg[i * k + kk], i, Target::Neg(i * k + kk), &mut out)?;
            }
            for j in 0..n {
                accumulate(g.cross[i * n + j], i, Target::Pos(j), &mut out)?;
            }
            for c in 0..n * k {
                accumulate(g.cross_neg[i * n * k + c], i, Target::Neg(c), &mut out)?;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy)]
enum Target {
    Pos(usize),
    Neg(usize),
}

/// Free-function form of [`BatchEmbeddings::backprop`].
pub fn backprop_scores_to_embeddings(grads: &ScoreGrads, embeddings: &BatchEmbeddings) -> Result<EmbeddingGrads> {
    embeddings.backprop(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_softmax() {
        let p = listwise_distributions(&[0.3; 20], 0.05).unwrap();
        assert!(p.iter().all(|x| (x - 0.05).abs() < 1e-15));
    }

    #[test]
    fn saturated_softmax() {
        let p = listwise_distributions(&[1.0, -1.0, -1.0], 0.01).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_softmax() {
        let p = listwise_distributions(&[1.0, 0.5, 0.0], 0.5).unwrap();
        for (got, want) in p.iter().zip([0.6652, 0.2447, 0.0900]) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
        assert!(listwise_distributions(&[f64::NAN, 0.0], 1.0).is_err());
        assert!(listwise_distributions(&[0.0], 0.0).is_err());
    }

    #[test]
    fn single_candidate_infonce_is_zero() {
        let (l, g) = infonce_row(&[0.7], 0, 0.01);
        assert_eq!(l, 0.0);
        assert_eq!(g, [0.0]);
    }

    #[test]
    fn uniform_teacher_gradient_sign() {
        let cfg = LossConfig::default();
        let student = [0.9, 0.1, 0.5, -0.2];
        let (_, g) = listwise_row(&student, &[0.4; 4], &cfg).unwrap();
        let ps = listwise_distributions(&student, cfg.tau_student).unwrap();
        for (gi, pi) in g.iter().zip(ps) {
            assert_eq!(*gi > 0.0, pi > 0.25);
        }
    }

    #[test]
    fn cosine_grad_special_cases() {
        let g = cosine_grad_wrt_first(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(g, [0.0, 1.0]);
        let g = cosine_grad_wrt_first(&[0.6, 0.8], &[0.6, 0.8]).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-15));
        assert!(cosine_grad_wrt_first(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn empty_batch_rejected() {
        let b = BatchScores {
            n: 0,
            k: 0,
            student_pos: vec![],
            student_neg: vec![],
            student_cross: vec![],
            student_cross_neg: vec![],
            teacher_pos: vec![],
            teacher_neg: vec![],
        };
        assert!(infonce_loss(&b, &LossConfig::default()).is_err());
    }
}
