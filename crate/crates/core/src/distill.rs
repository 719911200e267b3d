//! Student-side objective: prediction-level KD, embedding-level contrastive
//! KD, adaptive contrastive regularization, recommendation and weight-decay
//! terms, all with exact analytic gradients on the output embeddings, plus
//! the gradient-comparison rule that sets the per-node regularization weight.

use std::collections::HashMap;

use crate::dataset::{KdTriplet, PairBatch};
use crate::error::{Error, Result};
use crate::numkit::{dot, logsumexp, norm2, DenseMatrix};
use crate::student::{StudentModel, StudentGradients};

const PROB_FLOOR: f64 = 1e-12;

/// All scalar hyperparameters of the student objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda_t: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub tau3: f64,
    pub epsilon: f64,
    /// Learning rate.
    pub eta: f64,
    /// Maximum training epochs.
    pub max_epochs: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.01,
            lambda4: 1e-7,
            lambda_t: 1e-6,
            tau1: 1.0,
            tau2: 1.0,
            tau3: 1.0,
            epsilon: 0.2,
            eta: 1e-3,
            max_epochs: 100,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda_t", self.lambda_t),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        for (name, v) in [("tau1", self.tau1), ("tau2", self.tau2), ("tau3", self.tau3)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0,1), got {}",
                self.epsilon
            )));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        Ok(())
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

/// Prediction-level KD on preference-difference scores: temperature-scaled
/// sigmoids with a binary cross-entropy between them. The teacher scores
/// carry no gradient. Returns the loss and dloss/dz_s per sample.
pub fn pred_kd(z_s: &[f64], z_t: &[f64], tau1: f64) -> Result<(f64, Vec<f64>)> {
    if tau1 <= 0.0 {
        return Err(Error::Config(format!("tau1 must be > 0, got {tau1}")));
    }
    if z_s.len() != z_t.len() {
        return Err(Error::InvalidShape(format!(
            "score arrays of length {} vs {}",
            z_s.len(),
            z_t.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(z_s.len());
    for (&zs, &zt) in z_s.iter().zip(z_t) {
        let zbar_t = sigmoid(zt / tau1);
        let zbar_s = sigmoid(zs / tau1);
        let zc = zbar_s.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        loss += -(zbar_t * zc.ln() + (1.0 - zbar_t) * (1.0 - zc).ln());
        // chain rule dL/dzbar * dzbar/dz; algebraically -(zbar_t - zbar_s)/tau1
        let dl_dzbar = -(zbar_t / zc - (1.0 - zbar_t) / (1.0 - zc));
        grad.push(dl_dzbar * zbar_s * (1.0 - zbar_s) / tau1);
    }
    Ok((loss, grad))
}

fn row_norms(m: &DenseMatrix) -> Vec<f64> {
    (0..m.rows).map(|r| norm2(m.row(r))).collect()
}

/// d cos(h, t) / dh for fixed t, given precomputed norms.
#[inline]
fn cos_grad(h: &[f64], t: &[f64], nh: f64, nt: f64, cosv: f64, out: &mut [f64], scale: f64) {
    let a = scale / (nh * nt);
    let b = scale * cosv / (nh * nh);
    for i in 0..h.len() {
        out[i] += a * t[i] - b * h[i];
    }
}

/// Embedding-level contrastive KD. For every anchor occurrence in the batch
/// the anchor's frozen teacher target is contrasted against the student
/// embedding of every same-side catalog node. Returns the loss and exact
/// gradients on all touched student rows.
pub fn embed_kd(
    h_all: &DenseMatrix,
    targets: &DenseMatrix,
    batch: &PairBatch,
    user_count: usize,
    item_count: usize,
    tau2: f64,
) -> Result<(f64, DenseMatrix)> {
    if tau2 <= 0.0 {
        return Err(Error::Config(format!("tau2 must be > 0, got {tau2}")));
    }
    if h_all.rows != user_count + item_count || targets.rows != h_all.rows {
        return Err(Error::InvalidShape("embed_kd catalog shape mismatch".into()));
    }
    let norms = row_norms(h_all);
    let t_norms = row_norms(targets);
    for (r, &n) in norms.iter().enumerate() {
        if n == 0.0 {
            return Err(Error::DegenerateVector(format!("student row {r} has zero norm")));
        }
    }
    let mut loss = 0.0;
    let mut grad = DenseMatrix::zeros(h_all.rows, h_all.cols);
    let mut scratch = vec![0.0f64; user_count.max(item_count)];
    let mut anchor_term = |anchor: usize, cat_start: usize, cat_len: usize,
                           loss: &mut f64, grad: &mut DenseMatrix|
     -> Result<()> {
        let t = targets.row(anchor);
        let nt = t_norms[anchor];
        if nt == 0.0 {
            return Err(Error::DegenerateVector(format!(
                "teacher target row {anchor} has zero norm"
            )));
        }
        let scores = &mut scratch[..cat_len];
        for c in 0..cat_len {
            let row = cat_start + c;
            scores[c] = dot(h_all.row(row), t) / (norms[row] * nt) / tau2;
        }
        let lse = logsumexp(scores)?;
        *loss += lse - scores[anchor - cat_start];
        for c in 0..cat_len {
            let row = cat_start + c;
            let p = (scores[c] - lse).exp();
            let coeff = p - if row == anchor { 1.0 } else { 0.0 };
            if coeff == 0.0 {
                continue;
            }
            let h = h_all.row(row);
            let cosv = scores[c] * tau2;
            cos_grad(
                h,
                t,
                norms[row],
                nt,
                cosv,
                grad.row_mut(row),
                coeff / tau2,
            );
        }
        Ok(())
    };
    for &(u, j) in batch {
        anchor_term(u, 0, user_count, &mut loss, &mut grad)?;
        anchor_term(user_count + j, user_count, item_count, &mut loss, &mut grad)?;
    }
    Ok((loss, grad))
}

/// Recommendation loss: negative sum of positive-pair scores.
pub fn rec_loss(h_all: &DenseMatrix, batch: &PairBatch, user_count: usize) -> (f64, DenseMatrix) {
    let mut loss = 0.0;
    let mut grad = DenseMatrix::zeros(h_all.rows, h_all.cols);
    for &(u, j) in batch {
        let jr = user_count + j;
        let hu = h_all.row(u).to_vec();
        let hj = h_all.row(jr).to_vec();
        loss -= dot(&hu, &hj);
        let gu = grad.row_mut(u);
        for (g, &v) in gu.iter_mut().zip(&hj) {
            *g -= v;
        }
        let gj = grad.row_mut(jr);
        for (g, &v) in gj.iter_mut().zip(&hu) {
            *g -= v;
        }
    }
    (loss, grad)
}

/// Per-node output-embedding gradients of the batch losses, used by the
/// adaptive weighting rule. grad12 is grad1 + grad2 by construction.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub nodes: Vec<usize>,
    pub grad1: Vec<Vec<f64>>,
    pub grad2: Vec<Vec<f64>>,
    pub grad12: Vec<Vec<f64>>,
    pub grad_rec: Vec<Vec<f64>>,
}

impl BatchGradients {
    /// Gather the rows of the per-loss gradient matrices for every node that
    /// appears in the pair batch (deduplicated, users then items).
    pub fn gather(
        batch: &PairBatch,
        user_count: usize,
        g1: &DenseMatrix,
        g2: &DenseMatrix,
        g_rec: &DenseMatrix,
    ) -> Self {
        let mut seen = std::collections::HashSet::new();
        let mut nodes = Vec::new();
        for &(u, j) in batch {
            if seen.insert(u) {
                nodes.push(u);
            }
            let jr = user_count + j;
            if seen.insert(jr) {
                nodes.push(jr);
            }
        }
        let take = |m: &DenseMatrix, n: usize| m.row(n).to_vec();
        let grad1: Vec<_> = nodes.iter().map(|&n| take(g1, n)).collect();
        let grad2: Vec<_> = nodes.iter().map(|&n| take(g2, n)).collect();
        let grad12 = grad1
            .iter()
            .zip(&grad2)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        let grad_rec = nodes.iter().map(|&n| take(g_rec, n)).collect();
        BatchGradients {
            nodes,
            grad1,
            grad2,
            grad12,
            grad_rec,
        }
    }
}

/// The adaptive weighting rule: 1-eps when the combined distillation gradient
/// agrees with the recommendation gradient more than the two distillation
/// gradients agree with each other, 1+eps otherwise (ties included).
pub fn omega_weights(grads: &BatchGradients, epsilon: f64) -> Result<HashMap<usize, f64>> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Config(format!("epsilon must lie in (0,1), got {epsilon}")));
    }
    let mut out = HashMap::with_capacity(grads.nodes.len());
    for (k, &node) in grads.nodes.iter().enumerate() {
        let lhs = dot(&grads.grad12[k], &grads.grad_rec[k]);
        let rhs = dot(&grads.grad1[k], &grads.grad2[k]);
        let omega = if lhs > rhs { 1.0 - epsilon } else { 1.0 + epsilon };
        out.insert(node, omega);
    }
    Ok(out)
}

/// One push-apart term: omega * log sum_{s in catalog} exp(h_a . h_s / tau3).
/// Accumulates exact gradients on the anchor and every catalog row. The
/// catalog includes the anchor itself.
fn push_apart(
    h_all: &DenseMatrix,
    anchor: usize,
    cat_start: usize,
    cat_len: usize,
    omega: f64,
    tau3: f64,
    scratch: &mut Vec<f64>,
    grad: &mut DenseMatrix,
) -> Result<f64> {
    scratch.clear();
    let ha = h_all.row(anchor).to_vec();
    for c in 0..cat_len {
        scratch.push(dot(&ha, h_all.row(cat_start + c)) / tau3);
    }
    let lse = logsumexp(scratch)?;
    let d = h_all.cols;
    let mut anchor_acc = vec![0.0; d];
    for c in 0..cat_len {
        let p = (scratch[c] - lse).exp();
        let row = cat_start + c;
        let hs = h_all.row(row);
        for a in 0..d {
            anchor_acc[a] += p * hs[a];
        }
        let g = grad.row_mut(row);
        let w = omega * p / tau3;
        for a in 0..d {
            g[a] += w * ha[a];
        }
    }
    let g = grad.row_mut(anchor);
    let w = omega / tau3;
    for a in 0..d {
        g[a] += w * anchor_acc[a];
    }
    Ok(omega * lse)
}

/// Adaptive contrastive regularization: user-user and user-item terms for
/// batch users, item-item terms for batch items.
pub fn contrastive_reg(
    h_all: &DenseMatrix,
    batch: &PairBatch,
    omega: &HashMap<usize, f64>,
    user_count: usize,
    item_count: usize,
    tau3: f64,
) -> Result<(f64, DenseMatrix)> {
    if tau3 <= 0.0 {
        return Err(Error::Config(format!("tau3 must be > 0, got {tau3}")));
    }
    let mut loss = 0.0;
    let mut grad = DenseMatrix::zeros(h_all.rows, h_all.cols);
    let mut scratch = Vec::new();
    for &(u, j) in batch {
        let jr = user_count + j;
        let omega_u = *omega
            .get(&u)
            .ok_or_else(|| Error::Contract(format!("missing omega for user node {u}")))?;
        let omega_j = *omega
            .get(&jr)
            .ok_or_else(|| Error::Contract(format!("missing omega for item node {jr}")))?;
        loss += push_apart(h_all, u, 0, user_count, omega_u, tau3, &mut scratch, &mut grad)?;
        loss += push_apart(h_all, u, user_count, item_count, omega_u, tau3, &mut scratch, &mut grad)?;
        loss += push_apart(h_all, jr, user_count, item_count, omega_j, tau3, &mut scratch, &mut grad)?;
    }
    Ok((loss, grad))
}

/// Squared Frobenius norm of the initial embeddings and its gradient.
pub fn weight_decay(embeddings: &DenseMatrix) -> (f64, DenseMatrix) {
    let loss = embeddings.frobenius_sq();
    let mut grad = embeddings.clone();
    grad.scale(2.0);
    (loss, grad)
}

/// Scalar values of every component of one training step.
#[derive(Debug, Clone, Default)]
pub struct LossReport {
    pub rec: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub total: f64,
    /// Fraction of batch nodes assigned the weakened 1-eps weight.
    pub omega_low_frac: f64,
}

/// Frozen teacher context plus the two sampled batches for one step.
pub struct StepInputs<'a> {
    pub teacher_readout: &'a DenseMatrix,
    pub teacher_targets: &'a DenseMatrix,
    pub t1: &'a [KdTriplet],
    pub t2: &'a PairBatch,
}

/// Full parameter gradients plus the loss report for one step.
pub struct StepOutput {
    pub report: LossReport,
    pub embedding_grad: DenseMatrix,
    pub weight_grads: Vec<DenseMatrix>,
    pub omega: HashMap<usize, f64>,
}

fn difference_scores(
    emb: &DenseMatrix,
    user_count: usize,
    t1: &[KdTriplet],
) -> Vec<f64> {
    t1.iter()
        .map(|t| {
            let hu = emb.row(t.user);
            dot(hu, emb.row(user_count + t.item_j)) - dot(hu, emb.row(user_count + t.item_k))
        })
        .collect()
}

/// Scatter dL/dz of the prediction KD back onto output-embedding rows.
fn scatter_pred_grad(
    h_all: &DenseMatrix,
    user_count: usize,
    t1: &[KdTriplet],
    dz: &[f64],
    grad: &mut DenseMatrix,
) {
    let d = h_all.cols;
    for (t, &g) in t1.iter().zip(dz) {
        if g == 0.0 {
            continue;
        }
        let (u, j, k) = (t.user, user_count + t.item_j, user_count + t.item_k);
        let hu = h_all.row(u).to_vec();
        let hj = h_all.row(j).to_vec();
        let hk = h_all.row(k).to_vec();
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
}

fn check_finite(name: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(format!("loss component {name}")))
    }
}

/// One full student step: forward the catalog, evaluate every loss term in
/// order (prediction KD, embedding KD, per-node weights, regularization,
/// recommendation, decay), backpropagate the weighted sum through the MLP.
///
/// `omega_override` substitutes frozen weights, used by gradient checks that
/// treat the weighting rule as a constant.
pub fn assemble_step(
    student: &StudentModel,
    weights: &LossWeights,
    inputs: &StepInputs,
    omega_override: Option<&HashMap<usize, f64>>,
) -> Result<StepOutput> {
    weights.validate()?;
    let user_count = student.user_count;
    let item_count = student.item_count;
    let (h_all, caches) = student.forward_all()?;
    let zeros = || DenseMatrix::zeros(h_all.rows, h_all.cols);

    let (l1, g1) = if weights.lambda1 > 0.0 {
        let z_s = difference_scores(&h_all, user_count, inputs.t1);
        let z_t = difference_scores(inputs.teacher_readout, user_count, inputs.t1);
        let (l1, dz) = pred_kd(&z_s, &z_t, weights.tau1)?;
        let mut g1 = zeros();
        scatter_pred_grad(&h_all, user_count, inputs.t1, &dz, &mut g1);
        (check_finite("l1", l1)?, g1)
    } else {
        (0.0, zeros())
    };

    let (l2, g2) = if weights.lambda2 > 0.0 {
        let (l2, g2) = embed_kd(
            &h_all,
            inputs.teacher_targets,
            inputs.t2,
            user_count,
            item_count,
            weights.tau2,
        )?;
        (check_finite("l2", l2)?, g2)
    } else {
        (0.0, zeros())
    };

    let (l_rec, g_rec) = rec_loss(&h_all, inputs.t2, user_count);
    check_finite("rec", l_rec)?;

    let omega = match omega_override {
        Some(o) => o.clone(),
        None => {
            let bg = BatchGradients::gather(inputs.t2, user_count, &g1, &g2, &g_rec);
            omega_weights(&bg, weights.epsilon)?
        }
    };
    let low = 1.0 - weights.epsilon;
    let omega_low_frac = if omega.is_empty() {
        0.0
    } else {
        omega.values().filter(|&&w| (w - low).abs() < 1e-12).count() as f64 / omega.len() as f64
    };

    let (l3, g3) = if weights.lambda3 > 0.0 {
        let (l3, g3) = contrastive_reg(&h_all, inputs.t2, &omega, user_count, item_count, weights.tau3)?;
        (check_finite("l3", l3)?, g3)
    } else {
        (0.0, zeros())
    };

    let (l4, decay_grad) = weight_decay(&student.embeddings);
    check_finite("l4", l4)?;

    // weighted sum of output-embedding gradients
    let mut out_grad = g_rec;
    out_grad.add_scaled(&g1, weights.lambda1);
    out_grad.add_scaled(&g2, weights.lambda2);
    out_grad.add_scaled(&g3, weights.lambda3);

    // through the MLP, chunk by chunk
    let mut embedding_grad = DenseMatrix::zeros(h_all.rows, h_all.cols);
    let mut weight_grads: Vec<DenseMatrix> = student
        .weights
        .iter()
        .map(|w| DenseMatrix::zeros(w.rows, w.cols))
        .collect();
    for cache in &caches {
        let mut upstream = DenseMatrix::zeros(cache.indices.len(), h_all.cols);
        for (r, &idx) in cache.indices.iter().enumerate() {
            upstream.row_mut(r).copy_from_slice(out_grad.row(idx));
        }
        let StudentGradients {
            weight_grads: wg,
            embedding_rows,
        } = student.backward(cache, &upstream)?;
        for (acc, g) in weight_grads.iter_mut().zip(&wg) {
            acc.add_scaled(g, 1.0);
        }
        for (r, &idx) in cache.indices.iter().enumerate() {
            let row = embedding_grad.row_mut(idx);
            for (a, &v) in embedding_rows[r].iter().enumerate() {
                row[a] += v;
            }
        }
    }
    embedding_grad.add_scaled(&decay_grad, weights.lambda4);

    let total = l_rec
        + weights.lambda1 * l1
        + weights.lambda2 * l2
        + weights.lambda3 * l3
        + weights.lambda4 * l4;
    check_finite("total", total)?;

    Ok(StepOutput {
        report: LossReport {
            rec: l_rec,
            l1,
            l2,
            l3,
            l4,
            total,
            omega_low_frac,
        },
        embedding_grad,
        weight_grads,
        omega,
    })
}

/// Loss value of the composite objective at frozen omega, for gradient
/// checks against finite differences.
pub fn composite_loss(
    student: &StudentModel,
    weights: &LossWeights,
    inputs: &StepInputs,
    omega: &HashMap<usize, f64>,
) -> Result<f64> {
    let out = assemble_step(student, weights, inputs, Some(omega))?;
    Ok(out.report.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;
    use crate::numkit::xavier_init;

    #[test]
    fn pred_kd_zero_scores() {
        let (loss, grad) = pred_kd(&[0.0], &[0.0], 1.0).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert!(grad[0].abs() < 1e-15);
    }

    #[test]
    fn pred_kd_saturated_teacher() {
        // zbar_t -> 1 at z_t = +inf-ish; z_s = 0 gives loss log 2, grad -0.5
        let (loss, grad) = pred_kd(&[0.0], &[1e4], 1.0).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-9);
        assert!((grad[0] + 0.5).abs() < 1e-9);
    }

    #[test]
    fn pred_kd_matches_closed_form() {
        let mut rng = Rng::new(77);
        for _ in 0..1000 {
            let zs = rng.uniform(-6.0, 6.0);
            let zt = rng.uniform(-6.0, 6.0);
            let tau = [0.3, 1.0, 3.0][rng.below(3)];
            let (_, grad) = pred_kd(&[zs], &[zt], tau).unwrap();
            let closed = -(sigmoid(zt / tau) - sigmoid(zs / tau)) / tau;
            assert!((grad[0] - closed).abs() < 1e-12, "zs={zs} zt={zt} tau={tau}");
        }
    }

    #[test]
    fn pred_kd_cross_entropy_floor() {
        let mut rng = Rng::new(13);
        for _ in 0..200 {
            let zt = rng.uniform(-4.0, 4.0);
            let zs = rng.uniform(-4.0, 4.0);
            let (loss, _) = pred_kd(&[zs], &[zt], 1.0).unwrap();
            let p = sigmoid(zt);
            let floor = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
            assert!(loss >= floor - 1e-12);
        }
        // equality when zbar_s == zbar_t
        let (loss, _) = pred_kd(&[1.3], &[1.3], 1.0).unwrap();
        let p = sigmoid(1.3);
        let floor = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
        assert!((loss - floor).abs() < 1e-12);
    }

    #[test]
    fn embed_kd_single_candidate_is_zero() {
        let h = xavier_init(2, 3, &mut Rng::new(1)).unwrap();
        let t = xavier_init(2, 3, &mut Rng::new(2)).unwrap();
        let (loss, grad) = embed_kd(&h, &t, &vec![(0, 0)], 1, 1, 1.0).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.values.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn embed_kd_perfect_anchor_value() {
        // anchor user 0 has cosine 1 with its target, the other users -1
        let users = 4;
        let d = 2;
        let mut h = DenseMatrix::zeros(users + 1, d);
        h.row_mut(0).copy_from_slice(&[1.0, 0.0]);
        for u in 1..users {
            h.row_mut(u).copy_from_slice(&[-1.0, 0.0]);
        }
        h.row_mut(users).copy_from_slice(&[0.0, 1.0]); // lone item
        let mut t = DenseMatrix::zeros(users + 1, d);
        t.row_mut(0).copy_from_slice(&[2.0, 0.0]);
        t.row_mut(users).copy_from_slice(&[0.0, 1.0]);
        let (loss, _) = embed_kd(&h, &t, &vec![(0, 0)], users, 1, 1.0).unwrap();
        // user term: log(e^1 + 3 e^-1) - 1; item term 0 (single candidate)
        let expect = (1f64.exp() + 3.0 * (-1f64).exp()).ln() - 1.0;
        assert!((loss - expect).abs() < 1e-12, "loss={loss} expect={expect}");
    }

    #[test]
    fn embed_kd_nonnegative() {
        let mut rng = Rng::new(42);
        for trial in 0..20 {
            let users = 3 + trial % 4;
            let items = 2 + trial % 3;
            let h = xavier_init(users + items, 4, &mut rng).unwrap();
            let t = xavier_init(users + items, 4, &mut rng).unwrap();
            let batch = vec![(rng.below(users), rng.below(items))];
            let (loss, _) = embed_kd(&h, &t, &batch, users, items, 0.7).unwrap();
            assert!(loss >= -1e-12);
        }
    }

    #[test]
    fn embed_kd_zero_norm_rejected() {
        let mut h = xavier_init(3, 2, &mut Rng::new(3)).unwrap();
        h.row_mut(1).copy_from_slice(&[0.0, 0.0]);
        let t = xavier_init(3, 2, &mut Rng::new(4)).unwrap();
        let err = embed_kd(&h, &t, &vec![(0, 0)], 2, 1, 1.0).unwrap_err();
        assert!(matches!(err, Error::DegenerateVector(_)));
    }

    #[test]
    fn rec_loss_examples() {
        let h = DenseMatrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (loss, grad) = rec_loss(&h, &vec![(0, 0)], 1);
        assert_eq!(loss, 0.0);
        assert_eq!(grad.row(0), &[0.0, -1.0]);

        let h2 = DenseMatrix::from_vec(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let (loss2, grad2) = rec_loss(&h2, &vec![(0, 0)], 1);
        assert_eq!(loss2, -1.0);
        assert_eq!(grad2.row(0), &[-1.0, 0.0]);

        let (loss3, grad3) = rec_loss(&h, &vec![], 1);
        assert_eq!(loss3, 0.0);
        assert!(grad3.values.iter().all(|&v| v == 0.0));
    }

    fn bg(
        g1: Vec<f64>,
        g2: Vec<f64>,
        grec: Vec<f64>,
    ) -> BatchGradients {
        let g12 = g1.iter().zip(&g2).map(|(a, b)| a + b).collect::<Vec<_>>();
        BatchGradients {
            nodes: vec![0],
            grad1: vec![g1],
            grad2: vec![g2],
            grad12: vec![g12],
            grad_rec: vec![grec],
        }
    }

    #[test]
    fn omega_agreement_weakens() {
        let g = bg(vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0]);
        let omega = omega_weights(&g, 0.2).unwrap();
        assert!((omega[&0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn omega_tie_strengthens() {
        let g = bg(vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]);
        let omega = omega_weights(&g, 0.2).unwrap();
        assert!((omega[&0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn omega_absent_from_t1_reduces_to_sign_test() {
        // grad1 = 0: condition becomes <grad2, grad_rec> > 0
        let pos = bg(vec![0.0, 0.0], vec![1.0, 0.0], vec![0.5, 0.0]);
        assert!((omega_weights(&pos, 0.2).unwrap()[&0] - 0.8).abs() < 1e-15);
        let neg = bg(vec![0.0, 0.0], vec![1.0, 0.0], vec![-0.5, 0.0]);
        assert!((omega_weights(&neg, 0.2).unwrap()[&0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn push_apart_single_node_value() {
        let h = DenseMatrix::from_vec(1, 1, vec![1.0]).unwrap();
        let mut grad = DenseMatrix::zeros(1, 1);
        let mut scratch = Vec::new();
        let v = push_apart(&h, 0, 0, 1, 1.0, 1.0, &mut scratch, &mut grad).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn contrastive_reg_zero_omega_contributes_nothing() {
        let h = xavier_init(5, 3, &mut Rng::new(6)).unwrap();
        let omega: HashMap<usize, f64> = [(0usize, 0.0), (3usize, 0.0)].into();
        let (loss, grad) = contrastive_reg(&h, &vec![(0, 0)], &omega, 3, 2, 1.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn contrastive_reg_missing_omega_is_contract_violation() {
        let h = xavier_init(5, 3, &mut Rng::new(7)).unwrap();
        let omega = HashMap::new();
        assert!(matches!(
            contrastive_reg(&h, &vec![(0, 0)], &omega, 3, 2, 1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn weight_decay_examples() {
        let z = DenseMatrix::zeros(2, 2);
        assert_eq!(weight_decay(&z).0, 0.0);
        let m = DenseMatrix::from_vec(1, 1, vec![3.0]).unwrap();
        let (l, g) = weight_decay(&m);
        assert_eq!(l, 9.0);
        assert_eq!(g.values[0], 6.0);
    }
}
