//! All-rank top-N evaluation, the mean-average-distance over-smoothing
//! measure, and a small wall-clock inference benchmark.

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::InteractionSet;
use crate::error::{Error, Result};
use crate::numkit::{dot, norm2, DenseMatrix};
use crate::student::StudentModel;
use crate::teacher::TeacherModel;

/// Ranked recommendations for one user.
#[derive(Debug, Clone)]
pub struct RankingResult {
    pub user: usize,
    pub items: Vec<usize>,
}

/// Metrics averaged over every user with at least one held-out interaction.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricReport {
    pub n: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub evaluated_users: usize,
}

/// Top-N items for one user: score every item with the dot product, mask
/// already-seen items, break score ties toward the lower item index.
fn rank_user(
    emb: &DenseMatrix,
    user_count: usize,
    item_count: usize,
    masks: &[&InteractionSet],
    user: usize,
    n: usize,
) -> Vec<usize> {
    let hu = emb.row(user);
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(item_count);
    'items: for j in 0..item_count {
        for m in masks {
            if m.contains(user, j) {
                continue 'items;
            }
        }
        scored.push((dot(hu, emb.row(user_count + j)), j));
    }
    if n == 0 || scored.is_empty() {
        return Vec::new();
    }
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1))
    };
    if scored.len() > n {
        scored.select_nth_unstable_by(n - 1, cmp);
        scored.truncate(n);
    }
    scored.sort_unstable_by(cmp);
    scored.into_iter().map(|(_, j)| j).collect()
}

/// Full top-N rankings for every user that has held-out items.
pub fn rank_all(
    emb: &DenseMatrix,
    user_count: usize,
    item_count: usize,
    masks: &[&InteractionSet],
    heldout: &InteractionSet,
    n: usize,
) -> Vec<RankingResult> {
    let users: Vec<usize> = (0..user_count)
        .filter(|&u| !heldout.items_of(u).is_empty())
        .collect();
    users
        .into_par_iter()
        .map(|u| RankingResult {
            user: u,
            items: rank_user(emb, user_count, item_count, masks, u, n),
        })
        .collect()
}

/// Recall@N for one user: hits within the top N over min(|relevant|, N)
/// would overstate nothing — the conventional |relevant| denominator is used.
pub fn recall_at_n(ranked: &[usize], relevant: &[usize]) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = ranked
        .iter()
        .filter(|j| relevant.binary_search(j).is_ok())
        .count();
    hits as f64 / relevant.len() as f64
}

/// Binary-relevance NDCG@N with a log2 position discount; the ideal DCG
/// places min(|relevant|, N) hits at the top.
pub fn ndcg_at_n(ranked: &[usize], relevant: &[usize]) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let mut dcg = 0.0;
    for (pos, j) in ranked.iter().enumerate() {
        if relevant.binary_search(j).is_ok() {
            dcg += 1.0 / ((pos as f64 + 2.0).log2());
        }
    }
    let ideal = relevant.len().min(ranked.len().max(1));
    let idcg: f64 = (0..ideal).map(|pos| 1.0 / ((pos as f64 + 2.0).log2())).sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// Average Recall@N and NDCG@N across all users with held-out interactions.
/// Per-user values are computed in parallel but reduced in user order, so
/// results are bitwise deterministic.
pub fn evaluate(
    emb: &DenseMatrix,
    user_count: usize,
    item_count: usize,
    masks: &[&InteractionSet],
    heldout: &InteractionSet,
    n: usize,
) -> MetricReport {
    let users: Vec<usize> = (0..user_count)
        .filter(|&u| !heldout.items_of(u).is_empty())
        .collect();
    let per_user: Vec<(f64, f64)> = users
        .par_iter()
        .map(|&u| {
            let ranked = rank_user(emb, user_count, item_count, masks, u, n);
            let relevant = heldout.items_of(u);
            (recall_at_n(&ranked, relevant), ndcg_at_n(&ranked, relevant))
        })
        .collect();
    let count = per_user.len();
    let (mut recall, mut ndcg) = (0.0, 0.0);
    for (r, g) in per_user {
        recall += r;
        ndcg += g;
    }
    if count > 0 {
        recall /= count as f64;
        ndcg /= count as f64;
    }
    MetricReport {
        n,
        recall,
        ndcg,
        evaluated_users: count,
    }
}

/// Global embedding rows of the `count` highest-degree nodes in the training
/// graph, users and items pooled; degree ties break toward the lower index.
pub fn top_popular(train: &InteractionSet, count: usize) -> Vec<usize> {
    let deg = train.degrees();
    let mut order: Vec<usize> = (0..deg.len()).collect();
    order.sort_by_key(|&n| (std::cmp::Reverse(deg[n]), n));
    order.truncate(count);
    order
}

/// Mean average distance: mean of 1 - cosine over all ordered pairs of
/// distinct rows. Zero-norm rows are skipped; the second return value is how
/// many were skipped. Smaller values mean more over-smoothing.
pub fn mad(emb: &DenseMatrix, rows: &[usize]) -> Result<(f64, usize)> {
    let usable: Vec<usize> = rows.iter().copied().filter(|&r| norm2(emb.row(r)) > 0.0).collect();
    let excluded = rows.len() - usable.len();
    if usable.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "mad needs at least 2 nonzero rows, got {}",
            usable.len()
        )));
    }
    let norms: Vec<f64> = usable.iter().map(|&r| norm2(emb.row(r))).collect();
    let mut total = 0.0;
    for (a, &ra) in usable.iter().enumerate() {
        for (b, &rb) in usable.iter().enumerate() {
            if a == b {
                continue;
            }
            let cos = dot(emb.row(ra), emb.row(rb)) / (norms[a] * norms[b]);
            total += 1.0 - cos.clamp(-1.0, 1.0);
        }
    }
    let pairs = usable.len() * (usable.len() - 1);
    Ok((total / pairs as f64, excluded))
}

/// Median wall-clock seconds for full-catalog scoring of the given users by
/// the teacher (graph propagation included) and by the student, plus the
/// speedup ratio teacher/student.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BenchReport {
    pub teacher_median_s: f64,
    pub student_median_s: f64,
    pub speedup: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn bench_inference(
    teacher: &mut TeacherModel,
    student: &StudentModel,
    users: &[usize],
    reps: usize,
) -> Result<BenchReport> {
    if reps == 0 || users.is_empty() {
        return Err(Error::InvalidInput("bench needs reps > 0 and users".into()));
    }
    let item_count = student.item_count;
    let user_count = student.user_count;
    let score_all = |emb: &DenseMatrix| -> f64 {
        let mut acc = 0.0;
        for &u in users {
            let hu = emb.row(u);
            for j in 0..item_count {
                acc += dot(hu, emb.row(user_count + j));
            }
        }
        acc
    };
    let mut t_times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = std::time::Instant::now();
        teacher.propagate()?;
        let acc = score_all(teacher.readout()?);
        std::hint::black_box(acc);
        t_times.push(t0.elapsed().as_secs_f64());
    }
    let mut s_times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = std::time::Instant::now();
        let (h_all, _) = student.forward_all()?;
        let acc = score_all(&h_all);
        std::hint::black_box(acc);
        s_times.push(t0.elapsed().as_secs_f64());
    }
    let tm = median(t_times);
    let sm = median(s_times);
    Ok(BenchReport {
        teacher_median_s: tm,
        student_median_s: sm,
        speedup: if sm > 0.0 { tm / sm } else { f64::INFINITY },
    })
}
