//! Interaction data loading, train/valid/test splitting, and the three batch
//! samplers used in training (BPR triplets, uniform KD triplets, observed
//! pairs).

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::Rng;

/// Users, items and observed (user, item) pairs, with per-user sorted item
/// adjacency for binary-search membership tests.
#[derive(Debug, Clone)]
pub struct InteractionSet {
    pub user_count: usize,
    pub item_count: usize,
    pub edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
}

impl InteractionSet {
    pub fn new(user_count: usize, item_count: usize, mut edges: Vec<(usize, usize)>) -> Result<Self> {
        edges.sort_unstable();
        let before = edges.len();
        edges.dedup();
        if edges.len() != before {
            return Err(Error::Data("duplicate (user,item) pair".into()));
        }
        let mut adjacency = vec![Vec::new(); user_count];
        for &(u, i) in &edges {
            if u >= user_count || i >= item_count {
                return Err(Error::Data(format!(
                    "edge ({u},{i}) out of range {user_count}x{item_count}"
                )));
            }
            adjacency[u].push(i);
        }
        // edges are sorted, so each user's item list is sorted too
        Ok(InteractionSet {
            user_count,
            item_count,
            edges,
            adjacency,
        })
    }

    #[inline]
    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.adjacency[user].binary_search(&item).is_ok()
    }

    #[inline]
    pub fn items_of(&self, user: usize) -> &[usize] {
        &self.adjacency[user]
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Degree of every node in the bipartite graph, users first then items.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.user_count + self.item_count];
        for &(u, i) in &self.edges {
            deg[u] += 1;
            deg[self.user_count + i] += 1;
        }
        deg
    }
}

/// Raw-id to dense-index tables, in first-appearance order.
#[derive(Debug, Clone, Default)]
pub struct IdMaps {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

/// Edges as loaded from disk, before splitting.
#[derive(Debug)]
pub struct LoadedEdges {
    pub edges: Vec<(usize, usize)>,
    pub id_maps: IdMaps,
    pub duplicate_count: usize,
}

/// Train/valid/test interaction sets sharing one dense id space.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: InteractionSet,
    pub valid: InteractionSet,
    pub test: InteractionSet,
    pub id_maps: IdMaps,
}

/// Parse a `user<TAB>item` TSV. Extra columns are ignored, duplicates are
/// dropped and counted, dense indices follow first appearance.
pub fn load_tsv(path: &Path) -> Result<LoadedEdges> {
    let file = std::fs::File::open(path)?;
    parse_tsv(BufReader::new(file))
}

fn parse_tsv<R: BufRead>(reader: R) -> Result<LoadedEdges> {
    let mut user_index: HashMap<String, usize> = HashMap::new();
    let mut item_index: HashMap<String, usize> = HashMap::new();
    let mut id_maps = IdMaps::default();
    let mut seen: std::collections::HashSet<(usize, usize)> = std::collections::HashSet::new();
    let mut edges = Vec::new();
    let mut duplicate_count = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let user = cols.next().unwrap_or("");
        let item = cols.next().ok_or(Error::Parse {
            line: lineno + 1,
            msg: "expected at least two tab-separated columns".into(),
        })?;
        if user.is_empty() || item.is_empty() {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: "empty user or item id".into(),
            });
        }
        let u = *user_index.entry(user.to_string()).or_insert_with(|| {
            id_maps.users.push(user.to_string());
            id_maps.users.len() - 1
        });
        let i = *item_index.entry(item.to_string()).or_insert_with(|| {
            id_maps.items.push(item.to_string());
            id_maps.items.len() - 1
        });
        if seen.insert((u, i)) {
            edges.push((u, i));
        } else {
            duplicate_count += 1;
        }
    }
    if edges.is_empty() {
        return Err(Error::Data("no interactions found".into()));
    }
    Ok(LoadedEdges {
        edges,
        id_maps,
        duplicate_count,
    })
}

/// Per-interaction random split. Users with fewer than 3 interactions keep
/// everything in train so validation/test users always have train history.
pub fn build_splits(
    loaded: LoadedEdges,
    ratios: (f64, f64, f64),
    rng: &mut Rng,
) -> Result<SplitDataset> {
    let (r_train, r_valid, r_test) = ratios;
    if (r_train + r_valid + r_test - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must sum to 1, got {r_train}+{r_valid}+{r_test}"
        )));
    }
    if loaded.edges.is_empty() {
        return Err(Error::Data("cannot split empty edge set".into()));
    }
    let user_count = loaded.id_maps.users.len();
    let item_count = loaded.id_maps.items.len();
    let mut per_user = vec![0usize; user_count];
    for &(u, _) in &loaded.edges {
        per_user[u] += 1;
    }
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for &(u, i) in &loaded.edges {
        if per_user[u] < 3 {
            train.push((u, i));
            continue;
        }
        let x = rng.next_f64();
        if x < r_train {
            train.push((u, i));
        } else if x < r_train + r_valid {
            valid.push((u, i));
        } else {
            test.push((u, i));
        }
    }
    // a splittable user could still lose every train edge to chance;
    // reclaim one interaction so the user stays rankable
    let mut has_train = vec![false; user_count];
    for &(u, _) in &train {
        has_train[u] = true;
    }
    for bucket in [&mut valid, &mut test] {
        let mut k = 0;
        while k < bucket.len() {
            let (u, i) = bucket[k];
            if !has_train[u] {
                bucket.swap_remove(k);
                train.push((u, i));
                has_train[u] = true;
            } else {
                k += 1;
            }
        }
    }
    Ok(SplitDataset {
        train: InteractionSet::new(user_count, item_count, train)?,
        valid: InteractionSet::new(user_count, item_count, valid)?,
        test: InteractionSet::new(user_count, item_count, test)?,
        id_maps: loaded.id_maps,
    })
}

/// Load pre-split train.tsv/valid.tsv/test.tsv from a directory, building one
/// shared id space (train ids first, then ids first seen in valid/test).
pub fn load_presplit(dir: &Path) -> Result<SplitDataset> {
    let mut user_index: HashMap<String, usize> = HashMap::new();
    let mut item_index: HashMap<String, usize> = HashMap::new();
    let mut id_maps = IdMaps::default();
    let mut parts: Vec<Vec<(usize, usize)>> = Vec::new();
    for name in ["train.tsv", "valid.tsv", "test.tsv"] {
        let path = dir.join(name);
        let loaded = load_tsv(&path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let mut edges = Vec::with_capacity(loaded.edges.len());
        for &(u, i) in &loaded.edges {
            let user = &loaded.id_maps.users[u];
            let item = &loaded.id_maps.items[i];
            let gu = *user_index.entry(user.clone()).or_insert_with(|| {
                id_maps.users.push(user.clone());
                id_maps.users.len() - 1
            });
            let gi = *item_index.entry(item.clone()).or_insert_with(|| {
                id_maps.items.push(item.clone());
                id_maps.items.len() - 1
            });
            edges.push((gu, gi));
        }
        parts.push(edges);
    }
    let user_count = id_maps.users.len();
    let item_count = id_maps.items.len();
    let test = parts.pop().unwrap();
    let valid = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    Ok(SplitDataset {
        train: InteractionSet::new(user_count, item_count, train)?,
        valid: InteractionSet::new(user_count, item_count, valid)?,
        test: InteractionSet::new(user_count, item_count, test)?,
        id_maps,
    })
}

/// BPR triplet: positive item from the user's train adjacency, negative not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BprTriplet {
    pub user: usize,
    pub pos_item: usize,
    pub neg_item: usize,
}

/// KD triplet: user and both items drawn uniformly over the full sets; no
/// positive/negative distinction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KdTriplet {
    pub user: usize,
    pub item_j: usize,
    pub item_k: usize,
}

/// Observed (user, item) pairs drawn from train edges with replacement.
pub type PairBatch = Vec<(usize, usize)>;

/// Sample BPR triplets: positives uniform over train edges, negatives by
/// rejection. A positive is resampled (and a warning counted) if 100
/// rejections fail, which only happens for users interacting with nearly
/// every item.
pub fn sample_bpr(
    train: &InteractionSet,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<(Vec<BprTriplet>, usize)> {
    if train.is_empty() {
        return Err(Error::Data("sample_bpr on empty train set".into()));
    }
    let mut out = Vec::with_capacity(batch_size);
    let mut rejected_positives = 0usize;
    let bail = 100 * batch_size + 1000;
    while out.len() < batch_size {
        if rejected_positives > bail {
            return Err(Error::Data(
                "sample_bpr: no negative items available for any sampled user".into(),
            ));
        }
        let (user, pos_item) = train.edges[rng.below(train.len())];
        let mut found = None;
        for _ in 0..100 {
            let neg = rng.below(train.item_count);
            if !train.contains(user, neg) {
                found = Some(neg);
                break;
            }
        }
        match found {
            Some(neg_item) => out.push(BprTriplet {
                user,
                pos_item,
                neg_item,
            }),
            None => rejected_positives += 1,
        }
    }
    Ok((out, rejected_positives))
}

/// Uniform KD triplets over the holistic user and item sets.
pub fn sample_t1(
    user_count: usize,
    item_count: usize,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<KdTriplet>> {
    if n == 0 {
        return Err(Error::InvalidInput("sample_t1 with n=0".into()));
    }
    if user_count == 0 || item_count == 0 {
        return Err(Error::InvalidInput("sample_t1 on empty universe".into()));
    }
    Ok((0..n)
        .map(|_| KdTriplet {
            user: rng.below(user_count),
            item_j: rng.below(item_count),
            item_k: rng.below(item_count),
        })
        .collect())
}

/// Observed pairs, uniform with replacement over train edges.
pub fn sample_t2(train: &InteractionSet, n: usize, rng: &mut Rng) -> Result<PairBatch> {
    if train.is_empty() {
        return Err(Error::Data("sample_t2 on empty train set".into()));
    }
    Ok((0..n).map(|_| train.edges[rng.below(train.len())]).collect())
}

/// Synthetic community dataset: `communities` equal-sized user/item blocks,
/// each user drawing `per_user` distinct items, `in_block` of them from the
/// user's own block and the rest uniform.
pub fn synth_blocks(
    user_count: usize,
    item_count: usize,
    communities: usize,
    per_user: usize,
    in_block: f64,
    rng: &mut Rng,
) -> LoadedEdges {
    let items_per_block = item_count / communities;
    let mut edges = Vec::new();
    for u in 0..user_count {
        let block = u * communities / user_count;
        let mut picked = std::collections::HashSet::new();
        while picked.len() < per_user {
            let item = if rng.next_f64() < in_block {
                block * items_per_block + rng.below(items_per_block)
            } else {
                rng.below(item_count)
            };
            if picked.insert(item) {
                edges.push((u, item));
            }
        }
    }
    let id_maps = IdMaps {
        users: (0..user_count).map(|u| format!("u{u}")).collect(),
        items: (0..item_count).map(|i| format!("i{i}")).collect(),
    };
    LoadedEdges {
        edges,
        id_maps,
        duplicate_count: 0,
    }
}
