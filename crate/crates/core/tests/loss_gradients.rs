mod common;

use common::*;
use distill_core::loss::*;
use distill_core::rng::SeededStream;
use proptest::prelude::*;

fn scores_n1k1(student: [f64; 2], teacher: [f64; 2]) -> BatchScores {
    BatchScores {
        n: 1,
        k: 1,
        student_pos: vec![student[0]],
        student_neg: vec![student[1]],
        student_cross: vec![student[0]],
        student_cross_neg: vec![student[1]],
        teacher_pos: vec![teacher[0]],
        teacher_neg: vec![teacher[1]],
    }
}

fn random_scores(rng: &mut SeededStream, n: usize, k: usize) -> BatchScores {
    let mut cos = |len: usize| (0..len).map(|_| 2.0 * rng.uniform() - 1.0).collect::<Vec<_>>();
    let student_pos = cos(n);
    let student_neg = cos(n * k);
    let student_cross = cos(n * n);
    let student_cross_neg = cos(n * n * k);
    let teacher_pos = (0..n).map(|_| rng.uniform()).collect();
    let teacher_neg = (0..n * k).map(|_| rng.uniform()).collect();
    BatchScores {
        n,
        k,
        student_pos,
        student_neg,
        student_cross,
        student_cross_neg,
        teacher_pos,
        teacher_neg,
    }
}

#[test]
fn randomized_batches_match_finite_differences() {
    let check = gradient_check(100, &LossConfig::default());
    assert!(check.worst() < 1e-6, "{check:?}");
}

#[test]
fn listwise_single_pair_against_direct_formula() {
    let cfg = LossConfig::default();
    let b = scores_n1k1([1.0, 0.0], [1.0, 0.0]);
    let out = listwise_kl_loss(&b, &cfg).unwrap();

    let (et, es) = ((-1.0f64 / 0.3).exp(), (-1.0f64 / 0.05).exp());
    let (pt, qt) = (1.0 / (1.0 + et), et / (1.0 + et));
    let (ps, qs) = (1.0 / (1.0 + es), es / (1.0 + es));
    let want = pt * (pt / ps).ln() + qt * (qt / qs).ln();
    assert!((out.loss - want).abs() < 1e-12, "{} vs {want}", out.loss);

    let flat = flatten_student(&b);
    let numeric = numeric_gradient(|x| listwise_kl_loss(&with_student(&b, x), &cfg).unwrap().loss, &flat);
    for (a, n) in flatten_grads(&out.grads).iter().zip(&numeric) {
        assert!(rel_err(*a, *n) < 1e-6, "{a} vs {n}");
    }
}

#[test]
fn infonce_two_queries_against_direct_formula() {
    let cfg = LossConfig::default();
    let b = BatchScores {
        n: 2,
        k: 1,
        student_pos: vec![0.80, 0.70],
        student_neg: vec![0.75, 0.72],
        student_cross: vec![0.80, 0.77, 0.74, 0.70],
        student_cross_neg: vec![0.75, 0.78, 0.69, 0.72],
        teacher_pos: vec![1.0, 0.9],
        teacher_neg: vec![0.2, 0.3],
    };
    let out = infonce_loss(&b, &cfg).unwrap();
    let tau = 0.01;
    let row = |pos: f64, all: [f64; 4]| -> f64 {
        let denom: f64 = all.iter().map(|s| (s / tau).exp()).sum();
        -((pos / tau).exp() / denom).ln()
    };
    let want = (row(0.80, [0.80, 0.77, 0.75, 0.78]) + row(0.70, [0.74, 0.70, 0.69, 0.72])) / 2.0;
    assert!((out.loss - want).abs() < 1e-10 * want.abs().max(1.0), "{} vs {want}", out.loss);

    let flat = flatten_student(&b);
    let numeric = numeric_gradient(|x| infonce_loss(&with_student(&b, x), &cfg).unwrap().loss, &flat);
    for (a, n) in flatten_grads(&out.grads).iter().zip(&numeric) {
        assert!(rel_err(*a, *n) < 1e-6, "{a} vs {n}");
    }
}

#[test]
fn matched_distributions_give_zero_kl() {
    let cfg = LossConfig::default();
    let mut rng = SeededStream::new(4);
    let mut b = random_scores(&mut rng, 5, 19);
    let ratio = cfg.tau_teacher / cfg.tau_student;
    // Teacher rows are the student rows rescaled by the temperature ratio,
    // so both tempered softmaxes coincide.
    b.student_pos.iter_mut().for_each(|s| *s *= 0.1);
    b.student_neg.iter_mut().for_each(|s| *s *= 0.1);
    b.teacher_pos = b.student_pos.iter().map(|s| s * ratio + 0.5).collect();
    b.teacher_neg = b.student_neg.iter().map(|s| s * ratio + 0.5).collect();
    let out = listwise_kl_loss(&b, &cfg).unwrap();
    assert!(out.loss.abs() < 1e-12, "{}", out.loss);
    assert!(flatten_grads(&out.grads).iter().all(|g| g.abs() < 1e-12));

    let combined = combined_loss(&b, &cfg).unwrap();
    let infonce = infonce_loss(&b, &cfg).unwrap();
    assert!((combined.loss - 0.1 * infonce.loss).abs() < 1e-12);
}

#[test]
fn combined_is_the_weighted_sum() {
    let cfg = LossConfig::default();
    let mut rng = SeededStream::new(11);
    let b = random_scores(&mut rng, 4, 3);
    let c = combined_loss(&b, &cfg).unwrap();
    let l = listwise_kl_loss(&b, &cfg).unwrap();
    let i = infonce_loss(&b, &cfg).unwrap();
    assert!((c.loss - (l.loss + 0.1 * i.loss)).abs() < 1e-12);
    let (gc, gl, gi) = (flatten_grads(&c.grads), flatten_grads(&l.grads), flatten_grads(&i.grads));
    for j in 0..gc.len() {
        assert!((gc[j] - (gl[j] + 0.1 * gi[j])).abs() < 1e-12);
    }

    let zero = LossConfig {
        contrastive_weight: 0.0,
        ..cfg
    };
    let c0 = combined_loss(&b, &zero).unwrap();
    assert_eq!(c0.loss, l.loss);
    assert_eq!(flatten_grads(&c0.grads), gl);

    let only = combined_loss(&b, &LossConfig::contrastive_only()).unwrap();
    assert_eq!(only.loss, i.loss);
}

#[test]
fn cosine_gradient_matches_finite_differences() {
    let mut rng = SeededStream::new(8);
    for _ in 0..20 {
        let u = random_vec(&mut rng, 8);
        let v = random_vec(&mut rng, 8);
        let analytic = cosine_grad_wrt_first(&u, &v).unwrap();
        let cos = |x: &[f64]| {
            let d: f64 = x.iter().zip(&v).map(|(a, b)| a * b).sum();
            let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            d / (nx * nv)
        };
        let numeric = numeric_gradient(cos, &u);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(rel_err(*a, *n) < 1e-6, "{a} vs {n}");
        }
    }
}

#[test]
fn free_function_backprop_agrees_with_method() {
    let mut rng = SeededStream::new(21);
    let emb = random_embeddings(&mut rng, 3, 2, 5);
    let (tp, tn) = random_teacher(&mut rng, 3, 2);
    let scores = emb.scores(tp, tn).unwrap();
    let g = combined_loss(&scores, &LossConfig::default()).unwrap().grads;
    assert_eq!(backprop_scores_to_embeddings(&g, &emb).unwrap(), emb.backprop(&g).unwrap());
}

#[test]
fn zero_norm_embedding_is_rejected() {
    let mut rng = SeededStream::new(2);
    let mut emb = random_embeddings(&mut rng, 2, 1, 3);
    emb.negatives[..3].iter_mut().for_each(|x| *x = 0.0);
    assert!(emb.scores(vec![0.5; 2], vec![0.5; 2]).is_err());
}

#[test]
fn loss_terms_csv_has_one_row_per_query() {
    let mut rng = SeededStream::new(5);
    let b = random_scores(&mut rng, 3, 2);
    let out = combined_loss(&b, &LossConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("terms.csv");
    write_loss_terms_csv(&path, &out).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "query_index,listwise,infonce");
    assert_eq!(lines.len(), 4);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(scores in prop::collection::vec(-1.0f64..1.0, 1..40), tau in 0.005f64..1.0) {
        let p = listwise_distributions(&scores, tau).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn kl_is_non_negative(seed in any::<u64>(), n in 1usize..6, k in 0usize..6) {
        let b = random_scores(&mut SeededStream::new(seed), n, k);
        let out = listwise_kl_loss(&b, &LossConfig::default()).unwrap();
        prop_assert!(out.per_query.iter().all(|l| *l >= 0.0));
    }

    #[test]
    fn near_equal_distributions_have_small_positive_kl(seed in any::<u64>(), eps in 1e-4f64..1e-2) {
        let cfg = LossConfig::default();
        let mut rng = SeededStream::new(seed);
        let student: Vec<f64> = (0..6).map(|_| 0.1 * (2.0 * rng.uniform() - 1.0)).collect();
        let mut teacher: Vec<f64> = student.iter().map(|s| s * cfg.tau_teacher / cfg.tau_student).collect();
        teacher[0] += eps;
        let (kl, _) = listwise_row(&student, &teacher, &cfg).unwrap();
        let shift = eps / cfg.tau_teacher;
        prop_assert!(kl > 0.0 && kl < shift * shift, "kl {}", kl);
    }

    #[test]
    fn permuting_queries_keeps_the_combined_loss(seed in any::<u64>(), n in 2usize..7, k in 0usize..4) {
        let cfg = LossConfig::default();
        let mut rng = SeededStream::new(seed);
        let b = random_scores(&mut rng, n, k);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let mut p = b.clone();
        for (new, &old) in perm.iter().enumerate() {
            p.student_pos[new] = b.student_pos[old];
            p.teacher_pos[new] = b.teacher_pos[old];
            for kk in 0..k {
                p.student_neg[new * k + kk] = b.student_neg[old * k + kk];
                p.teacher_neg[new * k + kk] = b.teacher_neg[old * k + kk];
            }
            for (new_j, &old_j) in perm.iter().enumerate() {
                p.student_cross[new * n + new_j] = b.student_cross[old * n + old_j];
                for kk in 0..k {
                    p.student_cross_neg[new * n * k + new_j * k + kk] = b.student_cross_neg[old * n * k + old_j * k + kk];
                }
            }
        }
        let a = combined_loss(&b, &cfg).unwrap().loss;
        let c = combined_loss(&p, &cfg).unwrap().loss;
        prop_assert!((a - c).abs() < 1e-9, "{} vs {}", a, c);
    }

    #[test]
    fn infonce_decreases_as_the_positive_rises(seed in any::<u64>(), n in 1usize..6, k in 0usize..4, bump in 1e-3f64..0.5) {
        let cfg = LossConfig::default();
        let b = random_scores(&mut SeededStream::new(seed), n, k);
        let i = (seed as usize) % n;
        let mut up = b.clone();
        up.student_cross[i * n + i] += bump;
        let before = infonce_loss(&b, &cfg).unwrap().per_query[i];
        let after = infonce_loss(&up, &cfg).unwrap().per_query[i];
        prop_assert!(after <= before);
        // Once the positive holds all the mass the change drops below f64
        // resolution.
        if before > 1e-12 {
            prop_assert!(after < before, "{} -> {}", before, after);
        }
    }

    #[test]
    fn infonce_row_is_shift_invariant(seed in any::<u64>(), len in 1usize..30, shift in -5.0f64..5.0) {
        let mut rng = SeededStream::new(seed);
        let logits: Vec<f64> = (0..len).map(|_| 2.0 * rng.uniform() - 1.0).collect();
        let target = rng.below(len as u64) as usize;
        let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
        let (a, _) = infonce_row(&logits, target, 0.01);
        let (b, _) = infonce_row(&shifted, target, 0.01);
        prop_assert!((a - b).abs() < 1e-9);
    }
}
