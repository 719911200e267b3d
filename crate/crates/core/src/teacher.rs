//! LightGCN-style teacher: symmetric adjacency normalization with self-loops,
//! L-layer linear propagation with layer-sum readout, BPR training with
//! weight decay.

use crate::dataset::{sample_bpr, BprTriplet, InteractionSet, SplitDataset};
use crate::error::{Error, Result};
use crate::eval;
use crate::numkit::{adam_step, spmm, xavier_init, AdamState, DenseMatrix, Rng, SparseAdjacency};
use crate::trainer::{EpochRecord, RunConfig};

/// Build D^{-1/2}(A+I)D^{-1/2} over the bipartite train graph. User nodes
/// occupy rows [0, I), item nodes [I, I+J). Degrees are taken on A+I, so an
/// isolated node gets a single self-loop entry of 1.
pub fn normalize_adjacency(train: &InteractionSet) -> SparseAdjacency {
    let dim = train.user_count + train.item_count;
    let mut degree = vec![1.0f64; dim]; // self-loop
    for &(u, i) in &train.edges {
        degree[u] += 1.0;
        degree[train.user_count + i] += 1.0;
    }
    let mut entries = Vec::with_capacity(2 * train.edges.len() + dim);
    for &(u, i) in &train.edges {
        let a = u;
        let b = train.user_count + i;
        let w = 1.0 / (degree[a] * degree[b]).sqrt();
        entries.push((a, b, w));
        entries.push((b, a, w));
    }
    for (a, &d) in degree.iter().enumerate() {
        entries.push((a, a, 1.0 / d));
    }
    SparseAdjacency::from_entries(dim, &entries)
        .expect("normalized adjacency is symmetric by construction")
}

/// Teacher model state. `layers` and `readout` are caches filled by
/// [`TeacherModel::propagate`]; the only trainable tensor is `embeddings`.
#[derive(Debug, Clone)]
pub struct TeacherModel {
    pub user_count: usize,
    pub item_count: usize,
    /// Initial embeddings, (I+J) x d.
    pub embeddings: DenseMatrix,
    pub layer_count: usize,
    pub adjacency: SparseAdjacency,
    /// Opt-in 1/(L+1) readout averaging for sensitivity checks; the default
    /// readout is the plain layer sum.
    pub layer_average: bool,
    layers: Vec<DenseMatrix>,
    readout: Option<DenseMatrix>,
}

impl TeacherModel {
    pub fn new(
        train: &InteractionSet,
        dim: usize,
        layer_count: usize,
        layer_average: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let nodes = train.user_count + train.item_count;
        Ok(TeacherModel {
            user_count: train.user_count,
            item_count: train.item_count,
            embeddings: xavier_init(nodes, dim, rng)?,
            layer_count,
            adjacency: normalize_adjacency(train),
            layer_average,
            layers: Vec::new(),
            readout: None,
        })
    }

    pub fn from_embeddings(
        train: &InteractionSet,
        embeddings: DenseMatrix,
        layer_count: usize,
        layer_average: bool,
    ) -> Result<Self> {
        if embeddings.rows != train.user_count + train.item_count {
            return Err(Error::InvalidShape(format!(
                "embeddings have {} rows, graph has {} nodes",
                embeddings.rows,
                train.user_count + train.item_count
            )));
        }
        Ok(TeacherModel {
            user_count: train.user_count,
            item_count: train.item_count,
            embeddings,
            layer_count,
            adjacency: normalize_adjacency(train),
            layer_average,
            layers: Vec::new(),
            readout: None,
        })
    }

    /// Run the propagation H_{l+1} = Adj * H_l and cache every layer plus the
    /// readout sum.
    pub fn propagate(&mut self) -> Result<()> {
        let mut layers = Vec::with_capacity(self.layer_count + 1);
        layers.push(self.embeddings.clone());
        for _ in 0..self.layer_count {
            let next = spmm(&self.adjacency, layers.last().unwrap())?;
            layers.push(next);
        }
        let mut readout = DenseMatrix::zeros(self.embeddings.rows, self.embeddings.cols);
        for layer in &layers {
            readout.add_scaled(layer, 1.0);
        }
        if self.layer_average {
            readout.scale(1.0 / (self.layer_count + 1) as f64);
        }
        if !readout.is_finite() {
            return Err(Error::NonFinite("teacher propagation".into()));
        }
        self.layers = layers;
        self.readout = Some(readout);
        Ok(())
    }

    pub fn readout(&self) -> Result<&DenseMatrix> {
        self.readout
            .as_ref()
            .ok_or_else(|| Error::Contract("propagate() not called".into()))
    }

    pub fn layers(&self) -> &[DenseMatrix] {
        &self.layers
    }

    /// Frozen distillation targets: the high-order layer sum H_2 + .. + H_L.
    pub fn targets(&self) -> Result<DenseMatrix> {
        if self.layer_count < 2 {
            return Err(Error::Config(format!(
                "embedding distillation needs layer_count >= 2, got {}",
                self.layer_count
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::Contract("propagate() not called".into()));
        }
        let mut out = DenseMatrix::zeros(self.embeddings.rows, self.embeddings.cols);
        for layer in &self.layers[2..] {
            out.add_scaled(layer, 1.0);
        }
        Ok(out)
    }

    /// Backpropagate a readout gradient to the initial embeddings. The
    /// propagation is linear, so the backward pass is the same chained spmm
    /// (the adjacency is symmetric): grad_H0 = sum_{l=0..L} Adj^l * G.
    pub fn backprop_readout(&self, readout_grad: &DenseMatrix) -> Result<DenseMatrix> {
        let mut acc = readout_grad.clone();
        let mut cur = readout_grad.clone();
        for _ in 0..self.layer_count {
            cur = spmm(&self.adjacency, &cur)?;
            acc.add_scaled(&cur, 1.0);
        }
        if self.layer_average {
            acc.scale(1.0 / (self.layer_count + 1) as f64);
        }
        Ok(acc)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    // log(1 + e^x), stable for large |x|
    if x > 35.0 {
        x
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// BPR ranking loss over final embeddings (readout rows): user u scores item
/// rows at user_count + item. Returns the loss without the decay term.
pub fn bpr_loss(final_emb: &DenseMatrix, user_count: usize, triplets: &[BprTriplet]) -> f64 {
    triplets
        .iter()
        .map(|t| {
            let hu = final_emb.row(t.user);
            let hj = final_emb.row(user_count + t.pos_item);
            let hk = final_emb.row(user_count + t.neg_item);
            let z = crate::numkit::dot(hu, hj) - crate::numkit::dot(hu, hk);
            softplus(-z)
        })
        .sum()
}

/// Gradient of [`bpr_loss`] on the final embedding rows.
pub fn bpr_grad(
    final_emb: &DenseMatrix,
    user_count: usize,
    triplets: &[BprTriplet],
) -> DenseMatrix {
    let mut grad = DenseMatrix::zeros(final_emb.rows, final_emb.cols);
    let d = final_emb.cols;
    for t in triplets {
        let (u, j, k) = (t.user, user_count + t.pos_item, user_count + t.neg_item);
        let hu = final_emb.row(u).to_vec();
        let hj = final_emb.row(j).to_vec();
        let hk = final_emb.row(k).to_vec();
        let z = crate::numkit::dot(&hu, &hj) - crate::numkit::dot(&hu, &hk);
        // d(-log sigm(z))/dz = sigm(z) - 1
        let g = sigmoid(z) - 1.0;
        let gu = grad.row_mut(u);
        for a in 0..d {
            gu[a] += g * (hj[a] - hk[a]);
        }
        let gj = grad.row_mut(j);
        for a in 0..d {
            gj[a] += g * hu[a];
        }
        let gk = grad.row_mut(k);
        for a in 0..d {
            gk[a] -= g * hu[a];
        }
    }
    grad
}

/// One BPR training step: loss, analytic gradient through the propagation,
/// Adam update. Requires `propagate` to have been called for this step.
pub fn teacher_bpr_step(
    model: &mut TeacherModel,
    triplets: &[BprTriplet],
    lambda_t: f64,
    lr: f64,
    state: &mut AdamState,
    plain_sgd: bool,
) -> Result<f64> {
    let readout = model.readout()?;
    let loss = bpr_loss(readout, model.user_count, triplets)
        + lambda_t * model.embeddings.frobenius_sq();
    if !loss.is_finite() {
        return Err(Error::Divergence("teacher BPR loss is non-finite".into()));
    }
    let readout_grad = bpr_grad(readout, model.user_count, triplets);
    let mut grad = model.backprop_readout(&readout_grad)?;
    grad.add_scaled(&model.embeddings, 2.0 * lambda_t);
    if plain_sgd {
        if !grad.is_finite() {
            return Err(Error::NonFinite("teacher gradient".into()));
        }
        model.embeddings.add_scaled(&grad, -lr);
    } else {
        adam_step(&mut model.embeddings, &grad, state, lr)?;
    }
    // caches are stale after the update
    model.layers.clear();
    model.readout = None;
    Ok(loss)
}

/// Train the teacher with early stopping on validation Recall@20, returning
/// the best-validation checkpoint. The returned model is propagated.
pub fn train_teacher(split: &SplitDataset, cfg: &RunConfig) -> Result<(TeacherModel, Vec<EpochRecord>)> {
    let root = Rng::new(cfg.seed);
    let mut init_rng = root.split(streams::TEACHER_INIT);
    let mut bpr_rng = root.split(streams::TEACHER_BPR);
    let mut model = TeacherModel::new(
        &split.train,
        cfg.dim,
        cfg.teacher_layers,
        cfg.layer_average,
        &mut init_rng,
    )?;
    let mut state = AdamState::new(model.embeddings.values.len());
    let steps_per_epoch = split.train.len().div_ceil(cfg.bpr_batch).max(1);

    let mut records = Vec::new();
    let mut best = model.embeddings.clone();
    let mut best_recall = f64::NEG_INFINITY;
    let mut since_improve = 0usize;
    for epoch in 0..cfg.epochs {
        let t0 = std::time::Instant::now();
        let mut epoch_loss = 0.0;
        for _ in 0..steps_per_epoch {
            let (triplets, _) = sample_bpr(&split.train, cfg.bpr_batch, &mut bpr_rng)?;
            model.propagate()?;
            epoch_loss += teacher_bpr_step(
                &mut model,
                &triplets,
                cfg.weights.lambda_t,
                cfg.learning_rate,
                &mut state,
                cfg.plain_sgd,
            )?;
        }
        let mut record = EpochRecord::new(epoch, epoch_loss);
        if epoch % cfg.eval_every == 0 {
            model.propagate()?;
            let metrics = eval::evaluate(
                model.readout()?,
                split.train.user_count,
                split.train.item_count,
                &[&split.train],
                &split.valid,
                20,
            );
            record.recall20 = metrics.recall;
            record.ndcg20 = metrics.ndcg;
            if metrics.recall > best_recall {
                best_recall = metrics.recall;
                best = model.embeddings.clone();
                since_improve = 0;
            } else {
                since_improve += 1;
            }
            if since_improve >= cfg.patience {
                record.seconds = t0.elapsed().as_secs_f64();
                records.push(record);
                break;
            }
        }
        record.seconds = t0.elapsed().as_secs_f64();
        records.push(record);
    }
    model.embeddings = best;
    model.propagate()?;
    Ok((model, records))
}

/// Named RNG streams derived from the run seed.
pub mod streams {
    pub const TEACHER_INIT: u64 = 1;
    pub const TEACHER_BPR: u64 = 2;
    pub const STUDENT_INIT: u64 = 3;
    pub const STUDENT_WEIGHTS: u64 = 4;
    pub const T1: u64 = 5;
    pub const T2: u64 = 6;
    pub const SPLIT: u64 = 7;
    pub const BASELINE_BPR: u64 = 8;
}
