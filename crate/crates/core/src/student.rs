//! Residual-MLP student: a shared stack of FC layers applied to trainable
//! initial embeddings for both users and items. Forward caches
//! pre-activations so the backward pass is an exact chain rule.
//!
//! One layer computes leaky_relu(W x) + x with no bias.

use crate::error::{Error, Result};
use crate::numkit::{xavier_init, DenseMatrix, Rng};

#[derive(Debug, Clone)]
pub struct StudentModel {
    pub user_count: usize,
    pub item_count: usize,
    /// Initial embeddings, (I+J) x d.
    pub embeddings: DenseMatrix,
    /// d x d transformation per layer.
    pub weights: Vec<DenseMatrix>,
    pub leaky_slope: f64,
    /// Chunk size for full-catalog forward passes.
    pub chunk_size: usize,
}

/// Cached activations for one forward batch.
pub struct ForwardCache {
    pub indices: Vec<usize>,
    /// Input to each layer, layer-major: inputs[l] is batch x d.
    pub inputs: Vec<DenseMatrix>,
    /// Pre-activation W*x of each layer.
    pub preacts: Vec<DenseMatrix>,
    pub outputs: DenseMatrix,
}

/// Gradients produced by one backward pass.
pub struct StudentGradients {
    pub weight_grads: Vec<DenseMatrix>,
    /// Per batch row, aligned with the cache's indices.
    pub embedding_rows: Vec<Vec<f64>>,
}

impl StudentModel {
    pub fn new(
        user_count: usize,
        item_count: usize,
        dim: usize,
        layer_count: usize,
        leaky_slope: f64,
        emb_rng: &mut Rng,
        weight_rng: &mut Rng,
    ) -> Result<Self> {
        let weights = (0..layer_count)
            .map(|_| xavier_init(dim, dim, weight_rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(StudentModel {
            user_count,
            item_count,
            embeddings: xavier_init(user_count + item_count, dim, emb_rng)?,
            weights,
            leaky_slope,
            chunk_size: 8192,
        })
    }

    /// Rebuild a student from stored tensors, e.g. a loaded checkpoint.
    pub fn from_parts(
        user_count: usize,
        item_count: usize,
        embeddings: DenseMatrix,
        weights: Vec<DenseMatrix>,
        leaky_slope: f64,
    ) -> Result<Self> {
        if embeddings.rows != user_count + item_count {
            return Err(Error::InvalidShape(format!(
                "embeddings have {} rows, expected {}",
                embeddings.rows,
                user_count + item_count
            )));
        }
        let d = embeddings.cols;
        for w in &weights {
            if w.rows != d || w.cols != d {
                return Err(Error::InvalidShape(format!(
                    "layer weight is {}x{}, expected {d}x{d}",
                    w.rows, w.cols
                )));
            }
        }
        Ok(StudentModel {
            user_count,
            item_count,
            embeddings,
            weights,
            leaky_slope,
            chunk_size: 8192,
        })
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols
    }

    pub fn node_count(&self) -> usize {
        self.user_count + self.item_count
    }

    /// Global row index for an item.
    #[inline]
    pub fn item_row(&self, item: usize) -> usize {
        self.user_count + item
    }

    /// Forward pass for the given node rows, caching activations.
    pub fn forward(&self, indices: &[usize]) -> Result<ForwardCache> {
        let d = self.dim();
        for &idx in indices {
            if idx >= self.node_count() {
                return Err(Error::InvalidInput(format!(
                    "node index {idx} out of range {}",
                    self.node_count()
                )));
            }
        }
        let mut x = DenseMatrix::zeros(indices.len(), d);
        for (r, &idx) in indices.iter().enumerate() {
            x.row_mut(r).copy_from_slice(self.embeddings.row(idx));
        }
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut preacts = Vec::with_capacity(self.weights.len());
        for w in &self.weights {
            let mut p = DenseMatrix::zeros(indices.len(), d);
            for r in 0..indices.len() {
                let xr = x.row(r);
                let pr = p.row_mut(r);
                for a in 0..d {
                    let wrow = w.row(a);
                    pr[a] = crate::numkit::dot(wrow, xr);
                }
            }
            let mut out = DenseMatrix::zeros(indices.len(), d);
            for r in 0..indices.len() {
                let xr = x.row(r);
                let pr = p.row(r);
                let or = out.row_mut(r);
                for a in 0..d {
                    let act = if pr[a] > 0.0 { pr[a] } else { self.leaky_slope * pr[a] };
                    or[a] = act + xr[a];
                }
            }
            inputs.push(x);
            preacts.push(p);
            x = out;
        }
        Ok(ForwardCache {
            indices: indices.to_vec(),
            inputs,
            preacts,
            outputs: x,
        })
    }

    /// Full-catalog forward in chunks. Returns the (I+J) x d output matrix
    /// and the per-chunk caches needed for a later backward pass.
    pub fn forward_all(&self) -> Result<(DenseMatrix, Vec<ForwardCache>)> {
        let n = self.node_count();
        let d = self.dim();
        let mut outputs = DenseMatrix::zeros(n, d);
        let mut caches = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + self.chunk_size).min(n);
            let indices: Vec<usize> = (start..end).collect();
            let cache = self.forward(&indices)?;
            for (r, &idx) in cache.indices.iter().enumerate() {
                outputs.row_mut(idx).copy_from_slice(cache.outputs.row(r));
            }
            caches.push(cache);
            start = end;
        }
        Ok((outputs, caches))
    }

    /// Exact reverse of the forward pass. `upstream` holds gradients on the
    /// output embeddings, one row per cached batch row.
    pub fn backward(&self, cache: &ForwardCache, upstream: &DenseMatrix) -> Result<StudentGradients> {
        let d = self.dim();
        let batch = cache.indices.len();
        if upstream.rows != batch || upstream.cols != d {
            return Err(Error::Contract(format!(
                "upstream is {}x{}, cache batch is {batch}x{d}",
                upstream.rows, upstream.cols
            )));
        }
        if cache.inputs.len() != self.weights.len() {
            return Err(Error::Contract(
                "forward cache does not match the current layer stack".into(),
            ));
        }
        let mut weight_grads: Vec<DenseMatrix> = self
            .weights
            .iter()
            .map(|w| DenseMatrix::zeros(w.rows, w.cols))
            .collect();
        let mut g = upstream.clone();
        for l in (0..self.weights.len()).rev() {
            let w = &self.weights[l];
            let x = &cache.inputs[l];
            let p = &cache.preacts[l];
            let mut g_next = DenseMatrix::zeros(batch, d);
            for r in 0..batch {
                let gr = g.row(r);
                let pr = p.row(r);
                let xr = x.row(r);
                // g_p = g .* leaky'(p)
                let mut gp = vec![0.0; d];
                for a in 0..d {
                    let slope = if pr[a] > 0.0 { 1.0 } else { self.leaky_slope };
                    gp[a] = gr[a] * slope;
                }
                let wg = &mut weight_grads[l];
                for a in 0..d {
                    if gp[a] == 0.0 {
                        continue;
                    }
                    let row = wg.row_mut(a);
                    for b in 0..d {
                        row[b] += gp[a] * xr[b];
                    }
                }
                // g_x = W^T g_p + g (residual path)
                let gn = g_next.row_mut(r);
                for a in 0..d {
                    if gp[a] != 0.0 {
                        let wrow = w.row(a);
                        for b in 0..d {
                            gn[b] += gp[a] * wrow[b];
                        }
                    }
                }
                for b in 0..d {
                    gn[b] += gr[b];
                }
            }
            g = g_next;
        }
        let embedding_rows = (0..batch).map(|r| g.row(r).to_vec()).collect();
        Ok(StudentGradients {
            weight_grads,
            embedding_rows,
        })
    }
}

/// Dot-product preference score.
#[inline]
pub fn score(h_i: &[f64], h_j: &[f64]) -> f64 {
    crate::numkit::dot(h_i, h_j)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(dim: usize, layers: usize, seed: u64) -> StudentModel {
        let root = Rng::new(seed);
        StudentModel::new(3, 4, dim, layers, 0.01, &mut root.split(0), &mut root.split(1)).unwrap()
    }

    #[test]
    fn zero_weights_are_identity() {
        let mut m = model(4, 2, 1);
        for w in &mut m.weights {
            w.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let cache = m.forward(&[0, 3, 6]).unwrap();
        for (r, &idx) in cache.indices.iter().enumerate() {
            assert_eq!(cache.outputs.row(r), m.embeddings.row(idx));
        }
    }

    #[test]
    fn identity_weight_doubles_positive_input() {
        let mut m = model(3, 1, 2);
        for a in 0..3 {
            for b in 0..3 {
                m.weights[0].set(a, b, if a == b { 1.0 } else { 0.0 });
            }
        }
        m.embeddings.row_mut(0).copy_from_slice(&[0.5, 1.0, 2.0]);
        let cache = m.forward(&[0]).unwrap();
        assert_eq!(cache.outputs.row(0), &[1.0, 2.0, 4.0]);
    }

    #[test]
    fn negative_preactivation_uses_leaky_branch() {
        let mut m = model(2, 1, 3);
        // W maps x to -x, so p = -x and output = alpha*(-x) + x
        for a in 0..2 {
            for b in 0..2 {
                m.weights[0].set(a, b, if a == b { -1.0 } else { 0.0 });
            }
        }
        m.embeddings.row_mut(1).copy_from_slice(&[2.0, 3.0]);
        let cache = m.forward(&[1]).unwrap();
        let alpha = m.leaky_slope;
        assert!((cache.outputs.get(0, 0) - (alpha * -2.0 + 2.0)).abs() < 1e-15);
        assert!((cache.outputs.get(0, 1) - (alpha * -3.0 + 3.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = model(4, 2, 4);
        let cache = m.forward(&[0, 1]).unwrap();
        let upstream = DenseMatrix::zeros(2, 4);
        let grads = m.backward(&cache, &upstream).unwrap();
        assert!(grads.weight_grads.iter().all(|g| g.values.iter().all(|&v| v == 0.0)));
        assert!(grads.embedding_rows.iter().all(|r| r.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn zero_weight_backward_passes_upstream_through() {
        let mut m = model(3, 2, 5);
        for w in &mut m.weights {
            w.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let cache = m.forward(&[2]).unwrap();
        let upstream = DenseMatrix::from_vec(1, 3, vec![0.1, -0.2, 0.3]).unwrap();
        let grads = m.backward(&cache, &upstream).unwrap();
        // W = 0: the W^T g_p branch vanishes, the residual path carries g
        for (a, &g) in upstream.values.iter().enumerate() {
            assert!((grads.embedding_rows[0][a] - g).abs() < 1e-15);
        }
        // grad on the last W is the leaky'(0)-branch outer product g_p x^T
        let x = cache.inputs[1].row(0);
        for a in 0..3 {
            for b in 0..3 {
                let expect = upstream.values[a] * m.leaky_slope * x[b];
                assert!((grads.weight_grads[1].get(a, b) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for layers in [1, 2, 3] {
            let m = model(4, layers, 10 + layers as u64);
            let indices: Vec<usize> = (0..7).collect();
            // loss = sum of squares of outputs; upstream = 2*outputs
            let cache = m.forward(&indices).unwrap();
            let mut upstream = cache.outputs.clone();
            upstream.scale(2.0);
            let grads = m.backward(&cache, &upstream).unwrap();

            let loss = |m: &StudentModel| -> f64 {
                let c = m.forward(&indices).unwrap();
                c.outputs.values.iter().map(|v| v * v).sum()
            };
            let h = 1e-5;
            // embedding rows
            for (r, &idx) in indices.iter().enumerate() {
                for a in 0..4 {
                    let mut mp = m.clone();
                    let mut mm = m.clone();
                    mp.embeddings.row_mut(idx)[a] += h;
                    mm.embeddings.row_mut(idx)[a] -= h;
                    let fd = (loss(&mp) - loss(&mm)) / (2.0 * h);
                    let an = grads.embedding_rows[r][a];
                    let denom = fd.abs().max(an.abs()).max(1e-8);
                    assert!(
                        ((fd - an) / denom).abs() < 1e-4,
                        "layers={layers} emb[{idx}][{a}]: fd={fd} an={an}"
                    );
                }
            }
            // weight entries
            for l in 0..layers {
                for a in 0..4 {
                    for b in 0..4 {
                        let mut mp = m.clone();
                        let mut mm = m.clone();
                        *mp.weights[l].row_mut(a).get_mut(b).unwrap() += h;
                        *mm.weights[l].row_mut(a).get_mut(b).unwrap() -= h;
                        let fd = (loss(&mp) - loss(&mm)) / (2.0 * h);
                        let an = grads.weight_grads[l].get(a, b);
                        let denom = fd.abs().max(an.abs()).max(1e-8);
                        assert!(
                            ((fd - an) / denom).abs() < 1e-4,
                            "layers={layers} W{l}[{a}][{b}]: fd={fd} an={an}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn score_examples() {
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        let z = score(&[1.0, 0.0], &[0.5, 0.0]) - score(&[1.0, 0.0], &[0.2, 0.0]);
        assert!((z - 0.3).abs() < 1e-15);
        assert_eq!(score(&[2.0, 3.0], &[2.0, 3.0]), 13.0);
    }

    #[test]
    fn forward_all_matches_batched() {
        let mut m = model(4, 2, 6);
        m.chunk_size = 3; // force several chunks
        let (all, _) = m.forward_all().unwrap();
        let indices: Vec<usize> = (0..m.node_count()).collect();
        let cache = m.forward(&indices).unwrap();
        assert_eq!(all.values, cache.outputs.values);
    }
}
