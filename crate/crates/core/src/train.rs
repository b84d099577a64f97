//! Tuple mining, the lazy quadruplet and distillation losses, Adam, and the
//! teacher / student training loops.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Split, SubmapIndex, SubmapRecord};
use crate::error::{Error, Result};
use crate::heads::GlobalDescriptor;
use crate::model::{describe, forward_batch, EpcNetConfig, ModelParams};
use crate::nn::{accumulate_grads, Forward, Mode};
use crate::tensor::{Parameter, ReduceKind, Scalar, Tape, Tensor, Var};

pub const POSITIVE_RADIUS: f64 = 10.0;
pub const NEGATIVE_RADIUS: f64 = 50.0;

/// Anchor, positives (≤ 10 m), negatives (≥ 50 m) and the extra negative.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Quadruplet {
    pub anchor: u64,
    pub positives: Vec<u64>,
    pub negatives: Vec<u64>,
    pub neg_star: u64,
}

impl Quadruplet {
    /// Anchor, positives, negatives, then the extra negative.
    pub fn members(&self) -> Vec<u64> {
        let mut v = vec![self.anchor];
        v.extend(&self.positives);
        v.extend(&self.negatives);
        v.push(self.neg_star);
        v
    }
}

/// Why an anchor produced no tuple.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipReason {
    TooFewPositives { found: usize },
    TooFewNegatives { found: usize },
    NoExtraNegative,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Mined {
    Tuple(Quadruplet),
    Skip(SkipReason),
}

/// Samples a tuple for `anchor` among `pool` (usually the training split).
pub fn mine_quadruplet(pool: &[&SubmapRecord], anchor: u64, n_pos: usize, n_neg: usize, seed: u64) -> Result<Mined> {
    let a = pool
        .iter()
        .find(|r| r.id == anchor)
        .ok_or_else(|| Error::invalid(format!("anchor {anchor} is not in the mining pool")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos_cand: Vec<u64> = pool
        .iter()
        .filter(|r| r.id != anchor && a.distance(r) <= POSITIVE_RADIUS)
        .map(|r| r.id)
        .collect();
    let neg_cand: Vec<&SubmapRecord> = pool.iter().copied().filter(|r| a.distance(r) >= NEGATIVE_RADIUS).collect();
    if pos_cand.len() < n_pos || pos_cand.is_empty() {
        return Ok(Mined::Skip(SkipReason::TooFewPositives { found: pos_cand.len() }));
    }
    if neg_cand.len() < n_neg || neg_cand.is_empty() {
        return Ok(Mined::Skip(SkipReason::TooFewNegatives { found: neg_cand.len() }));
    }
    let positives: Vec<u64> = pos_cand.choose_multiple(&mut rng, n_pos).copied().collect();
    let negs: Vec<&SubmapRecord> = neg_cand.choose_multiple(&mut rng, n_neg).copied().collect();
    let star_cand: Vec<u64> = neg_cand
        .iter()
        .filter(|r| negs.iter().all(|n| n.distance(r) >= NEGATIVE_RADIUS))
        .map(|r| r.id)
        .collect();
    let Some(&neg_star) = star_cand.choose(&mut rng) else {
        return Ok(Mined::Skip(SkipReason::NoExtraNegative));
    };
    Ok(Mined::Tuple(Quadruplet {
        anchor,
        positives,
        negatives: negs.iter().map(|r| r.id).collect(),
        neg_star,
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositiveMode {
    /// Closest positive.
    Best,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegStarPairing {
    /// Second hinge compares the extra negative with each negative.
    PerNegative,
    /// Second hinge compares the extra negative with the anchor.
    Anchor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub positive: PositiveMode,
    pub neg_star: NegStarPairing,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            beta: 0.2,
            lambda: 0.1,
            positive: PositiveMode::Best,
            neg_star: NegStarPairing::PerNegative,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid("loss margins must be >= 0"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be >= 0"));
        }
        Ok(())
    }
}

/// Squared distances between rows `a[i]` and `b[i]` of `desc`, as a vector.
fn row_sq_dists<T: Scalar>(tape: &mut Tape<T>, desc: Var, a: &[usize], b: &[usize]) -> Result<Var> {
    let x = tape.gather_rows(desc, a)?;
    let y = tape.gather_rows(desc, b)?;
    let d = tape.sub(x, y)?;
    let sq = tape.mul(d, d)?;
    tape.reduce(sq, 1, ReduceKind::Sum)
}

/// `max_j [margin + δ_pos − δ_j]₊` for a one-element `pos` and a vector `other`.
fn hinge_max<T: Scalar>(tape: &mut Tape<T>, pos: Var, other: Var, margin: f64) -> Result<Var> {
    let n = tape.shape(other)[0];
    let p = tape.reshape(pos, &[1, 1])?;
    let p = tape.gather_rows(p, &vec![0; n])?;
    let p = tape.reshape(p, &[n])?;
    let diff = tape.sub(p, other)?;
    let shifted = tape.add_scalar(diff, margin);
    let h = tape.relu(shifted);
    tape.reduce(h, 0, ReduceKind::Max)
}

/// Rows of one tuple inside a batched descriptor matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TupleRows {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub neg_star: usize,
}

/// Lazy quadruplet loss of one tuple, on the tape.
pub fn lazy_quadruplet_loss_on<T: Scalar>(tape: &mut Tape<T>, desc: Var, rows: &TupleRows, cfg: &LossConfig) -> Result<Var> {
    if rows.positives.is_empty() || rows.negatives.is_empty() {
        return Err(Error::invalid("lazy quadruplet loss needs at least one positive and one negative"));
    }
    let d_pos = row_sq_dists(tape, desc, &vec![rows.anchor; rows.positives.len()], &rows.positives)?;
    let d_pos = match cfg.positive {
        PositiveMode::Best => {
            let neg = tape.scale(d_pos, -1.0);
            let m = tape.reduce(neg, 0, ReduceKind::Max)?;
            tape.scale(m, -1.0)
        }
        PositiveMode::Mean => tape.reduce(d_pos, 0, ReduceKind::Mean)?,
    };
    let d_neg = row_sq_dists(tape, desc, &vec![rows.anchor; rows.negatives.len()], &rows.negatives)?;
    let first = hinge_max(tape, d_pos, d_neg, cfg.alpha)?;
    let d_star = match cfg.neg_star {
        NegStarPairing::PerNegative => {
            row_sq_dists(tape, desc, &rows.negatives, &vec![rows.neg_star; rows.negatives.len()])?
        }
        NegStarPairing::Anchor => row_sq_dists(tape, desc, &[rows.anchor], &[rows.neg_star])?,
    };
    let second = hinge_max(tape, d_pos, d_star, cfg.beta)?;
    tape.add(first, second)
}

fn stack(descs: &[&GlobalDescriptor]) -> Result<Tensor<f64>> {
    let dim = descs[0].dim();
    if let Some(bad) = descs.iter().find(|d| d.dim() != dim) {
        return Err(Error::shape("descriptor stack", &[dim], &[bad.dim()]));
    }
    Tensor::from_rows(&descs.iter().map(|d| d.values.iter().map(|&v| v as f64).collect()).collect::<Vec<_>>())
}

/// Lazy quadruplet loss of explicit descriptors (64-bit arithmetic).
pub fn lazy_quadruplet_loss(
    anchor: &GlobalDescriptor,
    positives: &[GlobalDescriptor],
    negatives: &[GlobalDescriptor],
    neg_star: &GlobalDescriptor,
    cfg: &LossConfig,
) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::invalid("lazy quadruplet loss needs at least one positive and one negative"));
    }
    let mut all = vec![anchor];
    all.extend(positives);
    all.extend(negatives);
    all.push(neg_star);
    let (np, nn) = (positives.len(), negatives.len());
    let rows = TupleRows {
        anchor: 0,
        positives: (1..=np).collect(),
        negatives: (np + 1..=np + nn).collect(),
        neg_star: np + nn + 1,
    };
    let mut tape = Tape::new();
    let desc = tape.constant(stack(&all)?);
    let loss = lazy_quadruplet_loss_on(&mut tape, desc, &rows, cfg)?;
    Ok(tape.value(loss).data()[0])
}

/// `‖t − s‖²` between row blocks `student` and `teacher` of equal shape,
/// averaged over rows.
pub fn sse_loss_on<T: Scalar>(tape: &mut Tape<T>, student: Var, teacher: Var) -> Result<Var> {
    let rows = tape.shape(student)[0];
    let d = tape.sub(teacher, student)?;
    let sq = tape.mul(d, d)?;
    let total = tape.sum_all(sq)?;
    Ok(tape.scale(total, 1.0 / rows as f64))
}

pub fn sse_loss(student: &GlobalDescriptor, teacher: &GlobalDescriptor) -> Result<f64> {
    if student.dim() != teacher.dim() {
        return Err(Error::shape("sse_loss", &[student.dim()], &[teacher.dim()]));
    }
    let mut tape = Tape::new();
    let s = tape.constant(stack(&[student])?);
    let t = tape.constant(stack(&[teacher])?);
    let l = sse_loss_on(&mut tape, s, t)?;
    Ok(tape.value(l).data()[0])
}

/// `lazy + λ·sse`.
pub fn final_loss(lazy: f64, sse: f64, cfg: &LossConfig) -> f64 {
    if cfg.lambda == 0.0 {
        lazy
    } else {
        lazy + cfg.lambda * sse
    }
}

/// Adam with bias correction. Moments are created on the first step.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    /// Fails if any parameter has not received a gradient since the last step.
    pub fn step<'p>(&mut self, params: impl IntoIterator<Item = &'p mut Parameter<T>>) -> Result<()> {
        let mut params: Vec<&mut Parameter<T>> = params.into_iter().collect();
        if let Some(p) = params.iter().find(|p| !p.has_grad()) {
            return Err(Error::invalid(format!(
                "optimizer step before backward: `{}` has no gradient",
                p.name
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(&params).any(|(m, p)| m.len() != p.numel()) {
            return Err(Error::invalid("optimizer state does not match the parameter list"));
        }
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data().to_vec();
            for (i, (w, g)) in p.value.data_mut().iter_mut().zip(grad).enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Tuples per optimizer step.
    pub batch_size: usize,
    pub positives: usize,
    pub negatives: usize,
    pub lr: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 4,
            positives: 1,
            negatives: 4,
            lr: 5e-5,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.positives == 0 || self.negatives == 0 {
            return Err(Error::invalid("batch_size, positives and negatives must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        self.loss.validate()
    }
}

/// Per-epoch means of the two loss components.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lazy: f64,
    pub sse: f64,
    pub tuples: usize,
    pub seconds: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} lazy={:.6} sse={:.6} tuples={} seconds={:.2}",
            self.epoch, self.lazy, self.sse, self.tuples, self.seconds
        )
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub model: ModelParams<f32>,
    pub log: Vec<EpochLog>,
}

impl TrainRun {
    /// Loss values only (no timings), for determinism comparisons.
    pub fn trace(&self) -> Vec<(f64, f64)> {
        self.log.iter().map(|e| (e.lazy, e.sse)).collect()
    }
}

fn epoch_seed(seed: u64, epoch: usize, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((epoch as u64) << 32) ^ salt
}

/// Mines one tuple per training anchor, in a seeded shuffled order.
fn mine_epoch(pool: &[&SubmapRecord], cfg: &TrainConfig, epoch: usize) -> Result<Vec<Quadruplet>> {
    let mut order: Vec<u64> = pool.iter().map(|r| r.id).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch, 0)));
    let mut tuples = Vec::new();
    for (i, &a) in order.iter().enumerate() {
        let s = epoch_seed(cfg.seed, epoch, 1 + i as u64);
        if let Mined::Tuple(q) = mine_quadruplet(pool, a, cfg.positives, cfg.negatives, s)? {
            tuples.push(q);
        }
    }
    Ok(tuples)
}

/// Records of the training split.
pub fn training_pool(index: &SubmapIndex) -> Vec<&SubmapRecord> {
    index.split(Split::Train)
}

fn train_loop(
    dataset: &Dataset,
    model_cfg: &EpcNetConfig,
    cfg: &TrainConfig,
    teacher: Option<&HashMap<u64, Vec<f32>>>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainRun> {
    cfg.validate()?;
    let pool = training_pool(&dataset.index);
    let mut model = ModelParams::<f32>::init(model_cfg, cfg.seed)?;
    let mut adam = Adam::new(cfg.lr);
    let lambda = if teacher.is_some() { cfg.loss.lambda } else { 0.0 };
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let tuples = mine_epoch(&pool, cfg, epoch)?;
        if tuples.is_empty() {
            return Err(Error::NoTuples);
        }
        let (mut lazy_sum, mut sse_sum) = (0.0, 0.0);
        for batch in tuples.chunks(cfg.batch_size) {
            let (lazy, sse) = train_step(dataset, &mut model, &mut adam, batch, &cfg.loss, lambda, teacher)?;
            lazy_sum += lazy * batch.len() as f64;
            sse_sum += sse * batch.len() as f64;
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            lazy: lazy_sum / tuples.len() as f64,
            sse: sse_sum / tuples.len() as f64,
            tuples: tuples.len(),
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainRun { model, log })
}

/// One optimizer step on a batch of tuples. Each distinct submap is forwarded
/// once; returns the batch means of the lazy loss and the distillation term.
fn train_step(
    dataset: &Dataset,
    model: &mut ModelParams<f32>,
    adam: &mut Adam<f32>,
    batch: &[Quadruplet],
    loss_cfg: &LossConfig,
    lambda: f64,
    teacher: Option<&HashMap<u64, Vec<f32>>>,
) -> Result<(f64, f64)> {
    let mut row_of: BTreeMap<u64, usize> = BTreeMap::new();
    let mut ids = Vec::new();
    for q in batch {
        for id in q.members() {
            row_of.entry(id).or_insert_with(|| {
                ids.push(id);
                ids.len() - 1
            });
        }
    }
    let clouds = ids.iter().map(|&id| dataset.cloud(id)).collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let mut fw = Forward::new(&mut tape, Mode::Train);
    let out = forward_batch(&mut fw, model, &clouds)?;
    let (bindings, bn_updates, _) = fw.into_parts();
    let desc = out.descriptors;
    let mut lazy_terms = Vec::with_capacity(batch.len());
    for q in batch {
        let rows = TupleRows {
            anchor: row_of[&q.anchor],
            positives: q.positives.iter().map(|id| row_of[id]).collect(),
            negatives: q.negatives.iter().map(|id| row_of[id]).collect(),
            neg_star: row_of[&q.neg_star],
        };
        lazy_terms.push(lazy_quadruplet_loss_on(&mut tape, desc, &rows, loss_cfg)?);
    }
    let lazy_all = tape.concat(&lazy_terms, 0)?;
    let lazy = tape.reduce(lazy_all, 0, ReduceKind::Mean)?;
    let mut sse_value = 0.0;
    let mut loss = lazy;
    if let Some(targets) = teacher {
        let dim = tape.shape(desc)[1];
        let mut t = Vec::with_capacity(ids.len() * dim);
        for id in &ids {
            let v = targets
                .get(id)
                .ok_or_else(|| Error::invalid(format!("no teacher descriptor for submap {id}")))?;
            if v.len() != dim {
                return Err(Error::shape("distillation", &[dim], &[v.len()]));
            }
            t.extend_from_slice(v);
        }
        let t = tape.constant(Tensor::new(vec![ids.len(), dim], t)?);
        let sse = sse_loss_on(&mut tape, desc, t)?;
        sse_value = tape.value(sse).data()[0] as f64;
        if lambda != 0.0 {
            let weighted = tape.scale(sse, lambda);
            loss = tape.add(lazy, weighted)?;
        }
    }
    let lazy_value = tape.value(lazy).data()[0] as f64;
    let total = tape.value(loss).data()[0];
    if !total.is_finite() {
        return Err(Error::NumericFailure(format!("training loss is {total}")));
    }
    let grads = tape.backward(loss)?;
    accumulate_grads(model.params_mut(), &bindings, &grads)?;
    model.apply_bn_updates(&bn_updates)?;
    adam.step(model.params_mut())?;
    Ok((lazy_value, sse_value))
}

/// Trains a network from scratch with the lazy quadruplet loss.
pub fn train_teacher(dataset: &Dataset, model_cfg: &EpcNetConfig, cfg: &TrainConfig) -> Result<TrainRun> {
    train_loop(dataset, model_cfg, cfg, None, |_| {})
}

pub fn train_teacher_logged(
    dataset: &Dataset,
    model_cfg: &EpcNetConfig,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainRun> {
    train_loop(dataset, model_cfg, cfg, None, on_epoch)
}

/// Inference-mode teacher descriptors of every training submap.
pub fn teacher_targets(teacher: &ModelParams<f32>, dataset: &Dataset) -> Result<HashMap<u64, Vec<f32>>> {
    training_pool(&dataset.index)
        .iter()
        .map(|r| {
            let d = describe(teacher, &[dataset.cloud(r.id)?])?;
            Ok((r.id, d.into_iter().next().expect("one cloud").values))
        })
        .collect()
}

/// Trains the student with `lazy + λ·sse` against a frozen teacher. The SSE
/// term is averaged over the distinct submaps of each step and is logged even
/// when λ = 0, in which case it does not enter the objective.
pub fn train_student_distill(
    dataset: &Dataset,
    teacher: &ModelParams<f32>,
    student_cfg: &EpcNetConfig,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    train_student_distill_logged(dataset, teacher, student_cfg, cfg, |_| {})
}

pub fn train_student_distill_logged(
    dataset: &Dataset,
    teacher: &ModelParams<f32>,
    student_cfg: &EpcNetConfig,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainRun> {
    if teacher.config.output_dim != student_cfg.output_dim {
        return Err(Error::shape(
            "train_student_distill",
            &[teacher.config.output_dim],
            &[student_cfg.output_dim],
        ));
    }
    let targets = teacher_targets(teacher, dataset)?;
    train_loop(dataset, student_cfg, cfg, Some(&targets), on_epoch)
}
