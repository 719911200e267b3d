//! Property-based checks: dense oracles for the sparse kernels and metrics,
//! sampling invariants, and structural properties of the loss terms.

use std::collections::HashSet;

use glrec::dataset::{
    build_splits, sample_bpr, sample_t2, IdMaps, InteractionSet, KdTriplet, LoadedEdges,
};
use glrec::distill::{embed_kd, omega_weights, pred_kd, BatchGradients, LossWeights};
use glrec::eval::{evaluate, mad, ndcg_at_n, rank_all, recall_at_n};
use glrec::numkit::{cosine, logsumexp, spmm, xavier_init, Rng, SparseAdjacency};
use glrec::student::StudentModel;
use proptest::prelude::*;

fn arb_edges(max_users: usize, max_items: usize) -> impl Strategy<Value = (usize, usize, Vec<(usize, usize)>)> {
    (2..max_users, 2..max_items).prop_flat_map(|(users, items)| {
        let pairs = proptest::collection::hash_set((0..users, 0..items), 1..(users * items).min(120))
            .prop_map(|s| s.into_iter().collect::<Vec<_>>());
        (Just(users), Just(items), pairs)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spmm_matches_dense_matmul(
        (users, items, edges) in arb_edges(8, 8),
        seed in 0u64..1000,
        cols in 1usize..5,
    ) {
        let train = InteractionSet::new(users, items, edges).unwrap();
        let adj = glrec::teacher::normalize_adjacency(&train);
        let x = xavier_init(users + items, cols, &mut Rng::new(seed)).unwrap();
        let sparse = spmm(&adj, &x).unwrap();
        let dense = adj.to_dense().matmul(&x).unwrap();
        for (a, b) in sparse.values.iter().zip(&dense.values) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn logsumexp_bounds(xs in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
        let lse = logsumexp(&xs).unwrap();
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lse >= max - 1e-12);
        prop_assert!(lse <= max + (xs.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn cosine_in_unit_interval(
        a in proptest::collection::vec(-5.0f64..5.0, 3),
        b in proptest::collection::vec(-5.0f64..5.0, 3),
    ) {
        prop_assume!(a.iter().any(|&v| v.abs() > 1e-6));
        prop_assume!(b.iter().any(|&v| v.abs() > 1e-6));
        let c = cosine(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
    }

    #[test]
    fn split_partitions_edges((users, items, edges) in arb_edges(10, 10), seed in 0u64..1000) {
        let loaded = LoadedEdges {
            edges: edges.clone(),
            id_maps: IdMaps {
                users: (0..users).map(|u| u.to_string()).collect(),
                items: (0..items).map(|i| i.to_string()).collect(),
            },
            duplicate_count: 0,
        };
        let split = build_splits(loaded, (0.7, 0.05, 0.25), &mut Rng::new(seed)).unwrap();
        let mut all: Vec<(usize, usize)> = split.train.edges.clone();
        all.extend(&split.valid.edges);
        all.extend(&split.test.edges);
        all.sort_unstable();
        let mut orig = edges;
        orig.sort_unstable();
        prop_assert_eq!(all.len(), orig.len()); // disjointness: no duplicates
        prop_assert_eq!(all, orig); // union preserved
        // every evaluated user has train history
        for held in [&split.valid, &split.test] {
            for &(u, _) in &held.edges {
                prop_assert!(!split.train.items_of(u).is_empty());
            }
        }
    }

    #[test]
    fn bpr_negative_never_observed((users, items, edges) in arb_edges(10, 10), seed in 0u64..1000) {
        let train = InteractionSet::new(users, items, edges).unwrap();
        // skip saturated instances where some sampled user may have no negatives
        prop_assume!((0..users).all(|u| train.items_of(u).len() < items));
        let (triplets, _) = sample_bpr(&train, 64, &mut Rng::new(seed)).unwrap();
        for t in triplets {
            prop_assert!(train.contains(t.user, t.pos_item));
            prop_assert!(!train.contains(t.user, t.neg_item));
        }
    }

    #[test]
    fn metrics_match_brute_force(
        (users, items, edges) in arb_edges(12, 12),
        seed in 0u64..1000,
        n in 1usize..8,
    ) {
        let all = InteractionSet::new(users, items, edges).unwrap();
        // deterministically alternate edges into train and heldout
        let mut train_e = Vec::new();
        let mut held_e = Vec::new();
        for (k, &e) in all.edges.iter().enumerate() {
            if k % 2 == 0 { train_e.push(e) } else { held_e.push(e) }
        }
        let train = InteractionSet::new(users, items, train_e).unwrap();
        let held = InteractionSet::new(users, items, held_e).unwrap();
        let emb = xavier_init(users + items, 4, &mut Rng::new(seed)).unwrap();
        let report = evaluate(&emb, users, items, &[&train], &held, n);

        // brute force: full stable sort per user
        let mut sum_recall = 0.0;
        let mut sum_ndcg = 0.0;
        let mut evaluated = 0usize;
        for u in 0..users {
            let relevant = held.items_of(u);
            if relevant.is_empty() { continue; }
            evaluated += 1;
            let mut scored: Vec<(usize, f64)> = (0..items)
                .filter(|&j| !train.contains(u, j))
                .map(|j| (j, glrec::numkit::dot(emb.row(u), emb.row(users + j))))
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let ranked: Vec<usize> = scored.into_iter().take(n).map(|(j, _)| j).collect();
            let hits = ranked.iter().filter(|j| relevant.contains(j)).count();
            sum_recall += hits as f64 / relevant.len() as f64;
            let mut dcg = 0.0;
            for (pos, j) in ranked.iter().enumerate() {
                if relevant.contains(j) {
                    dcg += 1.0 / (pos as f64 + 2.0).log2();
                }
            }
            let ideal = relevant.len().min(ranked.len().max(1));
            let idcg: f64 = (0..ideal).map(|p| 1.0 / (p as f64 + 2.0).log2()).sum();
            sum_ndcg += if idcg > 0.0 { dcg / idcg } else { 0.0 };
        }
        prop_assert_eq!(report.evaluated_users, evaluated);
        if evaluated > 0 {
            prop_assert!((report.recall - sum_recall / evaluated as f64).abs() < 1e-12);
            prop_assert!((report.ndcg - sum_ndcg / evaluated as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn mad_permutation_and_scale_invariant(seed in 0u64..1000, scale in 0.1f64..10.0) {
        let emb = xavier_init(8, 4, &mut Rng::new(seed)).unwrap();
        let rows: Vec<usize> = (0..8).collect();
        let (base, _) = mad(&emb, &rows).unwrap();
        let perm = vec![5, 2, 7, 0, 3, 6, 1, 4];
        let (permuted, _) = mad(&emb, &perm).unwrap();
        prop_assert!((base - permuted).abs() < 1e-12);
        let mut scaled = emb.clone();
        scaled.scale(scale);
        let (s, _) = mad(&scaled, &rows).unwrap();
        prop_assert!((base - s).abs() < 1e-9);
    }

    #[test]
    fn omega_values_and_grad12_identity(seed in 0u64..1000, eps in 0.01f64..0.5) {
        let mut rng = Rng::new(seed);
        let nodes: Vec<usize> = (0..6).collect();
        let rand_rows = |rng: &mut Rng| -> Vec<Vec<f64>> {
            (0..6).map(|_| (0..4).map(|_| rng.uniform(-2.0, 2.0)).collect()).collect()
        };
        let grad1 = rand_rows(&mut rng);
        let grad2 = rand_rows(&mut rng);
        let grad_rec = rand_rows(&mut rng);
        let grad12: Vec<Vec<f64>> = grad1
            .iter()
            .zip(&grad2)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        let bg = BatchGradients { nodes: nodes.clone(), grad1, grad2, grad12, grad_rec };
        // grad12 must be the exact element-wise sum
        for k in 0..bg.nodes.len() {
            for a in 0..4 {
                prop_assert_eq!(bg.grad12[k][a], bg.grad1[k][a] + bg.grad2[k][a]);
            }
        }
        let omega = omega_weights(&bg, eps).unwrap();
        for &n in &nodes {
            let w = omega[&n];
            prop_assert!((w - (1.0 - eps)).abs() < 1e-15 || (w - (1.0 + eps)).abs() < 1e-15);
        }
    }

    #[test]
    fn embed_kd_loss_nonnegative(seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let users = 3 + rng.below(4);
        let items = 2 + rng.below(4);
        let h = xavier_init(users + items, 4, &mut rng).unwrap();
        let t = xavier_init(users + items, 4, &mut rng).unwrap();
        let batch = vec![(rng.below(users), rng.below(items))];
        let (loss, _) = embed_kd(&h, &t, &batch, users, items, 0.5).unwrap();
        prop_assert!(loss >= -1e-12);
    }

    #[test]
    fn pred_kd_never_below_teacher_entropy(seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let zs: Vec<f64> = (0..16).map(|_| rng.uniform(-5.0, 5.0)).collect();
        let zt: Vec<f64> = (0..16).map(|_| rng.uniform(-5.0, 5.0)).collect();
        let tau = rng.uniform(0.3, 3.0);
        let (loss, _) = pred_kd(&zs, &zt, tau).unwrap();
        let entropy: f64 = zt
            .iter()
            .map(|&z| {
                let p = 1.0 / (1.0 + (-z / tau).exp());
                -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
            })
            .sum();
        prop_assert!(loss >= entropy - 1e-9);
    }

    #[test]
    fn zero_weight_student_is_identity(seed in 0u64..1000, layers in 1usize..4) {
        let rng = Rng::new(seed);
        let mut emb_rng = rng.split(1);
        let mut w_rng = rng.split(2);
        let mut student = StudentModel::new(3, 4, 4, layers, 0.01, &mut emb_rng, &mut w_rng).unwrap();
        for w in &mut student.weights {
            w.scale(0.0);
        }
        let (h_all, _) = student.forward_all().unwrap();
        prop_assert_eq!(h_all.values, student.embeddings.values.clone());
    }
}

#[test]
fn sampling_is_seed_deterministic() {
    let train = InteractionSet::new(5, 6, vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]).unwrap();
    let a = sample_t2(&train, 32, &mut Rng::new(7).split(3)).unwrap();
    let b = sample_t2(&train, 32, &mut Rng::new(7).split(3)).unwrap();
    assert_eq!(a, b);
    let c = sample_t2(&train, 32, &mut Rng::new(7).split(4)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn rank_all_positions_are_unique_and_masked() {
    let mut rng = Rng::new(99);
    let users = 6;
    let items = 9;
    let mut edges = Vec::new();
    for u in 0..users {
        for i in 0..items {
            if rng.next_f64() < 0.3 {
                edges.push((u, i));
            }
        }
    }
    let all = InteractionSet::new(users, items, edges).unwrap();
    let mut train_e = Vec::new();
    let mut held_e = Vec::new();
    for (k, &e) in all.edges.iter().enumerate() {
        if k % 3 == 0 {
            held_e.push(e)
        } else {
            train_e.push(e)
        }
    }
    let train = InteractionSet::new(users, items, train_e).unwrap();
    let held = InteractionSet::new(users, items, held_e).unwrap();
    let emb = xavier_init(users + items, 4, &mut rng).unwrap();
    for res in rank_all(&emb, users, items, &[&train], &held, 5) {
        let set: HashSet<usize> = res.items.iter().copied().collect();
        assert_eq!(set.len(), res.items.len());
        for &j in &res.items {
            assert!(!train.contains(res.user, j));
        }
    }
}

#[test]
fn metric_edge_cases() {
    assert_eq!(recall_at_n(&[], &[1]), 0.0);
    assert_eq!(ndcg_at_n(&[], &[1]), 0.0);
    let w = LossWeights::default();
    assert!(w.validate().is_ok());
}

#[test]
fn adjacency_rejects_duplicates() {
    let entries = vec![(0, 1, 0.5), (0, 1, 0.5), (1, 0, 0.5)];
    assert!(SparseAdjacency::from_entries(2, &entries).is_err());
}

#[test]
fn t1_allows_equal_item_pair() {
    let mut rng = Rng::new(1);
    let triplets = glrec::dataset::sample_t1(3, 1, 10, &mut rng).unwrap();
    assert!(triplets.iter().all(|t: &KdTriplet| t.item_j == 0 && t.item_k == 0));
}
