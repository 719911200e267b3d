//! Training orchestration: run configuration, per-epoch records, the
//! distillation loop, and the graph-free BPR baseline.

use serde::{Deserialize, Serialize};

use crate::dataset::{sample_bpr, sample_t1, sample_t2, SplitDataset};
use crate::distill::{assemble_step, LossWeights, StepInputs};
use crate::error::{Error, Result};
use crate::eval;
use crate::numkit::{adam_step, AdamState, DenseMatrix, Rng};
use crate::student::{StudentModel, StudentGradients};
use crate::teacher::{self, streams, TeacherModel};

/// What to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Teacher,
    Distill,
    BaselineBprMlp,
}

/// Everything a run needs besides the data.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dim: usize,
    pub teacher_layers: usize,
    pub student_layers: usize,
    pub leaky_slope: f64,
    /// Average graph layers in the teacher readout instead of summing them.
    pub layer_average: bool,
    pub seed: u64,
    pub epochs: usize,
    /// Evaluation rounds without improvement before stopping.
    pub patience: usize,
    /// Evaluate every this many epochs.
    pub eval_every: usize,
    pub learning_rate: f64,
    /// Plain SGD updates instead of Adam.
    pub plain_sgd: bool,
    pub bpr_batch: usize,
    pub t1_batch: usize,
    pub t2_batch: usize,
    pub weights: LossWeights,
    pub disable_l1: bool,
    pub disable_l2: bool,
    pub disable_l3: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let weights = LossWeights::default();
        RunConfig {
            dim: 32,
            teacher_layers: 3,
            student_layers: 2,
            leaky_slope: 0.01,
            layer_average: false,
            seed: 1,
            epochs: weights.max_epochs,
            patience: 5,
            eval_every: 1,
            learning_rate: weights.eta,
            plain_sgd: false,
            bpr_batch: 4096,
            t1_batch: 100_000,
            t2_batch: 4096,
            weights,
            disable_l1: false,
            disable_l2: false,
            disable_l3: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dim must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if self.bpr_batch == 0 || self.t1_batch == 0 || self.t2_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky_slope must lie in (0,1), got {}",
                self.leaky_slope
            )));
        }
        self.weights.validate()
    }

    /// Loss weights with the ablation switches applied.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights.clone();
        if self.disable_l1 {
            w.lambda1 = 0.0;
        }
        if self.disable_l2 {
            w.lambda2 = 0.0;
        }
        if self.disable_l3 {
            w.lambda3 = 0.0;
        }
        w
    }
}

/// One row of the per-epoch metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_rec: f64,
    pub loss_l1: f64,
    pub loss_l2: f64,
    pub loss_l3: f64,
    pub loss_l4: f64,
    /// NaN when the epoch was not evaluated.
    pub recall20: f64,
    pub ndcg20: f64,
    pub omega_low_frac: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn new(epoch: usize, loss_total: f64) -> Self {
        EpochRecord {
            epoch,
            loss_total,
            loss_rec: 0.0,
            loss_l1: 0.0,
            loss_l2: 0.0,
            loss_l3: 0.0,
            loss_l4: 0.0,
            recall20: f64::NAN,
            ndcg20: f64::NAN,
            omega_low_frac: 0.0,
            seconds: 0.0,
        }
    }
}

struct StudentOptimizer {
    emb: AdamState,
    weights: Vec<AdamState>,
    plain_sgd: bool,
    lr: f64,
}

impl StudentOptimizer {
    fn new(student: &StudentModel, plain_sgd: bool, lr: f64) -> Self {
        StudentOptimizer {
            emb: AdamState::new(student.embeddings.values.len()),
            weights: student
                .weights
                .iter()
                .map(|w| AdamState::new(w.values.len()))
                .collect(),
            plain_sgd,
            lr,
        }
    }

    fn apply(
        &mut self,
        student: &mut StudentModel,
        emb_grad: &DenseMatrix,
        weight_grads: &[DenseMatrix],
    ) -> Result<()> {
        if self.plain_sgd {
            student.embeddings.add_scaled(emb_grad, -self.lr);
            for (w, g) in student.weights.iter_mut().zip(weight_grads) {
                w.add_scaled(g, -self.lr);
            }
        } else {
            adam_step(&mut student.embeddings, emb_grad, &mut self.emb, self.lr)?;
            for ((w, g), st) in student
                .weights
                .iter_mut()
                .zip(weight_grads)
                .zip(&mut self.weights)
            {
                adam_step(w, g, st, self.lr)?;
            }
        }
        Ok(())
    }
}

struct BestTracker {
    recall: f64,
    since_improve: usize,
    embeddings: DenseMatrix,
    weights: Vec<DenseMatrix>,
}

impl BestTracker {
    fn new(student: &StudentModel) -> Self {
        BestTracker {
            recall: f64::NEG_INFINITY,
            since_improve: 0,
            embeddings: student.embeddings.clone(),
            weights: student.weights.clone(),
        }
    }

    /// Returns true when patience is exhausted.
    fn observe(&mut self, student: &StudentModel, recall: f64, patience: usize) -> bool {
        if recall > self.recall {
            self.recall = recall;
            self.embeddings = student.embeddings.clone();
            self.weights = student.weights.clone();
            self.since_improve = 0;
        } else {
            self.since_improve += 1;
        }
        self.since_improve >= patience
    }

    fn restore(self, student: &mut StudentModel) {
        student.embeddings = self.embeddings;
        student.weights = self.weights;
    }
}

fn new_student(split: &SplitDataset, cfg: &RunConfig) -> Result<StudentModel> {
    let root = Rng::new(cfg.seed);
    let mut emb_rng = root.split(streams::STUDENT_INIT);
    let mut weight_rng = root.split(streams::STUDENT_WEIGHTS);
    StudentModel::new(
        split.train.user_count,
        split.train.item_count,
        cfg.dim,
        cfg.student_layers,
        cfg.leaky_slope,
        &mut emb_rng,
        &mut weight_rng,
    )
}

fn eval_student(student: &StudentModel, split: &SplitDataset) -> Result<eval::MetricReport> {
    let (h_all, _) = student.forward_all()?;
    Ok(eval::evaluate(
        &h_all,
        split.train.user_count,
        split.train.item_count,
        &[&split.train],
        &split.valid,
        20,
    ))
}

/// Distill a propagated, frozen teacher into a fresh student. Returns the
/// best-validation student and the per-epoch log.
pub fn distill(
    split: &SplitDataset,
    teacher: &TeacherModel,
    cfg: &RunConfig,
) -> Result<(StudentModel, Vec<EpochRecord>)> {
    cfg.validate()?;
    let weights = cfg.effective_weights();
    let readout = teacher.readout()?.clone();
    let targets = if weights.lambda2 > 0.0 {
        teacher.targets()?
    } else {
        DenseMatrix::zeros(readout.rows, readout.cols)
    };

    let mut student = new_student(split, cfg)?;
    let root = Rng::new(cfg.seed);
    let mut t1_rng = root.split(streams::T1);
    let mut t2_rng = root.split(streams::T2);
    let mut opt = StudentOptimizer::new(&student, cfg.plain_sgd, cfg.learning_rate);
    let steps_per_epoch = split.train.len().div_ceil(cfg.t2_batch).max(1);

    let mut records = Vec::new();
    let mut best = BestTracker::new(&student);
    'epochs: for epoch in 0..cfg.epochs {
        let t0 = std::time::Instant::now();
        let mut record = EpochRecord::new(epoch, 0.0);
        let mut omega_low = 0.0;
        for _ in 0..steps_per_epoch {
            let t1 = if weights.lambda1 > 0.0 {
                sample_t1(
                    split.train.user_count,
                    split.train.item_count,
                    cfg.t1_batch,
                    &mut t1_rng,
                )?
            } else {
                Vec::new()
            };
            let t2 = sample_t2(&split.train, cfg.t2_batch, &mut t2_rng)?;
            let inputs = StepInputs {
                teacher_readout: &readout,
                teacher_targets: &targets,
                t1: &t1,
                t2: &t2,
            };
            let out = assemble_step(&student, &weights, &inputs, None)?;
            opt.apply(&mut student, &out.embedding_grad, &out.weight_grads)?;
            record.loss_total += out.report.total;
            record.loss_rec += out.report.rec;
            record.loss_l1 += out.report.l1;
            record.loss_l2 += out.report.l2;
            record.loss_l3 += out.report.l3;
            record.loss_l4 += out.report.l4;
            omega_low += out.report.omega_low_frac;
        }
        record.omega_low_frac = omega_low / steps_per_epoch as f64;
        if epoch % cfg.eval_every == 0 {
            let metrics = eval_student(&student, split)?;
            record.recall20 = metrics.recall;
            record.ndcg20 = metrics.ndcg;
            if best.observe(&student, metrics.recall, cfg.patience) {
                record.seconds = t0.elapsed().as_secs_f64();
                records.push(record);
                break 'epochs;
            }
        }
        record.seconds = t0.elapsed().as_secs_f64();
        records.push(record);
    }
    best.restore(&mut student);
    Ok((student, records))
}

/// BPR gradient on output embeddings, accumulated via the softplus
/// derivative. Kept separate from the teacher's implementation on purpose so
/// the two can be cross-checked.
pub fn bpr_output_grad(
    h_all: &DenseMatrix,
    user_count: usize,
    triplets: &[crate::dataset::BprTriplet],
) -> DenseMatrix {
    let d = h_all.cols;
    let mut grad = DenseMatrix::zeros(h_all.rows, h_all.cols);
    for t in triplets {
        let (u, j, k) = (t.user, user_count + t.pos_item, user_count + t.neg_item);
        let hu = h_all.row(u).to_vec();
        let hj = h_all.row(j).to_vec();
        let hk = h_all.row(k).to_vec();
        let z: f64 = hu
            .iter()
            .zip(hj.iter().zip(&hk))
            .map(|(a, (b, c))| a * (b - c))
            .sum();
        // d softplus(-z) / dz = -sigmoid(-z)
        let g = -if z >= 0.0 {
            1.0 / (1.0 + z.exp())
        } else {
            let e = (-z).exp();
            e / (1.0 + e)
        };
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

/// Graph-free baseline: the same MLP student trained with BPR alone plus
/// embedding decay, no teacher involved.
pub fn baseline_bpr_mlp(
    split: &SplitDataset,
    cfg: &RunConfig,
) -> Result<(StudentModel, Vec<EpochRecord>)> {
    cfg.validate()?;
    let mut student = new_student(split, cfg)?;
    let root = Rng::new(cfg.seed);
    let mut bpr_rng = root.split(streams::BASELINE_BPR);
    let mut opt = StudentOptimizer::new(&student, cfg.plain_sgd, cfg.learning_rate);
    let steps_per_epoch = split.train.len().div_ceil(cfg.bpr_batch).max(1);

    let mut records = Vec::new();
    let mut best = BestTracker::new(&student);
    'epochs: for epoch in 0..cfg.epochs {
        let t0 = std::time::Instant::now();
        let mut record = EpochRecord::new(epoch, 0.0);
        for _ in 0..steps_per_epoch {
            let (triplets, _) = sample_bpr(&split.train, cfg.bpr_batch, &mut bpr_rng)?;
            let (h_all, caches) = student.forward_all()?;
            let loss = teacher::bpr_loss(&h_all, split.train.user_count, &triplets);
            let out_grad = bpr_output_grad(&h_all, split.train.user_count, &triplets);

            let mut emb_grad = DenseMatrix::zeros(h_all.rows, h_all.cols);
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
                    let row = emb_grad.row_mut(idx);
                    for (a, &v) in embedding_rows[r].iter().enumerate() {
                        row[a] += v;
                    }
                }
            }
            emb_grad.add_scaled(&student.embeddings, 2.0 * cfg.weights.lambda_t);
            opt.apply(&mut student, &emb_grad, &weight_grads)?;
            record.loss_total += loss
                + cfg.weights.lambda_t * student.embeddings.frobenius_sq();
            record.loss_rec += loss;
        }
        if epoch % cfg.eval_every == 0 {
            let metrics = eval_student(&student, split)?;
            record.recall20 = metrics.recall;
            record.ndcg20 = metrics.ndcg;
            if best.observe(&student, metrics.recall, cfg.patience) {
                record.seconds = t0.elapsed().as_secs_f64();
                records.push(record);
                break 'epochs;
            }
        }
        record.seconds = t0.elapsed().as_secs_f64();
        records.push(record);
    }
    best.restore(&mut student);
    Ok((student, records))
}

/// Artifacts of a full run.
pub enum RunArtifacts {
    Teacher {
        model: TeacherModel,
        records: Vec<EpochRecord>,
    },
    Student {
        model: StudentModel,
        teacher: Option<TeacherModel>,
        records: Vec<EpochRecord>,
    },
}

/// Train the requested mode from scratch. Distillation first trains (or
/// reuses) a teacher, then the student.
pub fn run(split: &SplitDataset, cfg: &RunConfig, mode: Mode) -> Result<RunArtifacts> {
    cfg.validate()?;
    match mode {
        Mode::Teacher => {
            let (model, records) = teacher::train_teacher(split, cfg)?;
            Ok(RunArtifacts::Teacher { model, records })
        }
        Mode::Distill => {
            let (teacher_model, _) = teacher::train_teacher(split, cfg)?;
            let (model, records) = distill(split, &teacher_model, cfg)?;
            Ok(RunArtifacts::Student {
                model,
                teacher: Some(teacher_model),
                records,
            })
        }
        Mode::BaselineBprMlp => {
            let (model, records) = baseline_bpr_mlp(split, cfg)?;
            Ok(RunArtifacts::Student {
                model,
                teacher: None,
                records,
            })
        }
    }
}
