//! Joint learning and unlearning.
//!
//! Each epoch alternates two phases:
//!
//! 1. **Inner loop.** With the representation fixed, fit every secondary
//!    head to its task by full-batch descent on `Σ β_m L_m` until the loss
//!    plateaus (or `max_steps`). Only secondary heads move.
//! 2. **Joint pass.** One shuffled pass over the primary data. Each step
//!    takes a minibatch step on `L_p + α L_conf`, where the confusion term
//!    pushes every (now fixed) secondary head's output on a cycled
//!    secondary minibatch toward uniform. Only the representation and the
//!    primary head move.
//!
//! With no secondary tasks the inner loop and confusion term vanish and
//! training reduces to the plain baseline.

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, sgd_step, Matrix, Tape};
use crate::datagen::{LabeledDataset, TaskDataset};
use crate::error::{Error, Result};
use crate::eval::{
    adjacent_accuracy, group_kls, mean_class_accuracy, rescaled_score, MetricsRecord, TaskMetrics,
};
use crate::losses::{
    confusion_loss, joint_loss, secondary_classification_loss, secondary_confusion_loss,
    softmax_loss, ClassWeights, ConfusionVariant, LossWeights, TaskBatch,
};
use crate::model::{
    init_bundle, Architecture, Head, HeadSpec, ModelConfig, NetworkBundle, ParamSelector,
};

// rng streams carved out of the run seed
const STREAM_PRIMARY: u64 = 1;
const STREAM_SECONDARY: u64 = 100;
const STREAM_REINIT: u64 = 10_000;
const PROBE_SEED_SALT: u64 = 0x5EED_9B0E;

/// Step size used when fitting secondary heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerStep {
    /// `base_lr × head_lr_boost`.
    #[default]
    Fixed,
    /// `1/L` per head, where L bounds the curvature of that head's loss on
    /// the current embeddings. Converges at the same rate whatever the
    /// scale of the representation.
    Adaptive,
    /// Steps preconditioned by the inverse of a fixed upper bound on each
    /// head's loss Hessian (half the weighted Gram matrix of the augmented
    /// embeddings). Monotone, and insensitive to how the representation is
    /// conditioned.
    Preconditioned,
}

/// Stopping rule and step size for the secondary-head inner loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InnerPolicy {
    pub max_steps: usize,
    /// Relative loss improvement below which a step counts as stalled.
    pub plateau_tol: f64,
    /// Consecutive stalled steps that end the loop.
    pub plateau_patience: usize,
    pub step: InnerStep,
    /// Weight decay `l2/2 · ‖W‖²` on secondary head weights (not biases).
    pub l2: f64,
}

impl Default for InnerPolicy {
    fn default() -> Self {
        Self {
            max_steps: 200,
            plateau_tol: 1e-4,
            plateau_patience: 5,
            step: InnerStep::Fixed,
            l2: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    /// Per secondary task; empty means 1 for every task.
    pub betas: Vec<f64>,
    pub base_lr: f64,
    /// Multiplier on the learning rate of every classification head.
    pub head_lr_boost: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub inner: InnerPolicy,
    pub confusion_variant: ConfusionVariant,
    pub seed: u64,
    /// Extractor layer indices whose weights never change.
    pub frozen_layers: Vec<usize>,
    /// Reinitialize secondary heads before every epoch's first inner loop.
    pub reinit_secondary_heads: bool,
    /// Refit secondary heads every this many joint steps as well as at the
    /// start of each epoch. `None` runs one inner loop per epoch.
    pub inner_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            betas: Vec::new(),
            base_lr: 1e-4,
            head_lr_boost: 10.0,
            epochs: 20,
            batch_size: 32,
            inner: InnerPolicy::default(),
            confusion_variant: ConfusionVariant::Ce,
            seed: 0,
            frozen_layers: Vec::new(),
            reinit_secondary_heads: false,
            inner_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.base_lr) || !positive(self.head_lr_boost) {
            return Err(Error::Config(format!(
                "learning rates must be positive (base_lr={}, head_lr_boost={})",
                self.base_lr, self.head_lr_boost
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.inner_every == Some(0) {
            return Err(Error::Config("inner_every must be at least 1".into()));
        }
        if self.inner.max_steps == 0 {
            return Err(Error::Config("inner.max_steps must be at least 1".into()));
        }
        if !(self.inner.plateau_tol.is_finite() && self.inner.plateau_tol >= 0.0) {
            return Err(Error::Config("inner.plateau_tol must be nonnegative".into()));
        }
        if !(self.inner.l2.is_finite() && self.inner.l2 >= 0.0) {
            return Err(Error::Config("inner.l2 must be nonnegative".into()));
        }
        LossWeights {
            alpha: self.alpha,
            betas: self.betas.clone(),
        }
        .validate()
    }

    pub fn head_lr(&self) -> f64 {
        self.base_lr * self.head_lr_boost
    }

    /// Resolved β for `m` secondary tasks.
    pub fn betas_for(&self, m: usize) -> Result<Vec<f64>> {
        if self.betas.is_empty() {
            return Ok(vec![1.0; m]);
        }
        if self.betas.len() != m {
            return Err(Error::Config(format!(
                "{} betas configured for {m} secondary tasks",
                self.betas.len()
            )));
        }
        Ok(self.betas.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InnerReport {
    pub steps: usize,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss_primary: f64,
    pub loss_confusion: f64,
    pub loss_joint: f64,
}

struct Cursor {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cursor {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

/// Live state of one training run.
pub struct TrainState {
    pub config: TrainConfig,
    pub bundle: NetworkBundle,
    pub epoch: usize,
    pub history: Vec<MetricsRecord>,
    betas: Vec<f64>,
    primary_weights: ClassWeights,
    secondary_weights: Vec<ClassWeights>,
    primary_rng: ChaCha8Rng,
    secondary_cursors: Vec<Cursor>,
}

pub fn select_rows(x: &Matrix, idx: &[usize]) -> Matrix {
    x.select(Axis(0), idx)
}

fn select_labels(labels: &[usize], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| labels[i]).collect()
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl TrainState {
    pub fn new(
        config: &TrainConfig,
        model: &ModelConfig,
        primary: &LabeledDataset,
        secondary: &[TaskDataset],
    ) -> Result<Self> {
        config.validate()?;
        primary.validate()?;
        if primary.is_empty() {
            return Err(Error::Config("primary dataset is empty".into()));
        }
        for s in secondary {
            if s.x.nrows() == 0 {
                return Err(Error::Config(format!(
                    "secondary dataset '{}' is empty",
                    s.task.name
                )));
            }
            if s.x.ncols() != primary.input_dim() {
                return Err(Error::Config(format!(
                    "secondary dataset '{}' has {} features, primary has {}",
                    s.task.name,
                    s.x.ncols(),
                    primary.input_dim()
                )));
            }
            if s.task.labels.len() != s.x.nrows() {
                return Err(Error::Config(format!(
                    "secondary dataset '{}' label count mismatch",
                    s.task.name
                )));
            }
        }
        let arch = Architecture::mlp(
            model,
            primary.input_dim(),
            HeadSpec {
                name: primary.primary.name.clone(),
                classes: primary.primary.classes,
            },
            secondary
                .iter()
                .map(|s| HeadSpec {
                    name: s.task.name.clone(),
                    classes: s.task.classes,
                })
                .collect(),
        );
        let mut bundle = init_bundle(&arch, config.seed)?;
        for &i in &config.frozen_layers {
            bundle.set_frozen(i, true)?;
        }
        let betas = config.betas_for(secondary.len())?;
        let primary_weights =
            ClassWeights::from_labels(&primary.primary.labels, primary.primary.classes)?;
        let secondary_weights = secondary
            .iter()
            .map(|s| ClassWeights::from_labels(&s.task.labels, s.task.classes))
            .collect::<Result<_>>()?;
        let secondary_cursors = secondary
            .iter()
            .enumerate()
            .map(|(m, s)| {
                Cursor::new(
                    s.x.nrows(),
                    stream_rng(config.seed, STREAM_SECONDARY + m as u64),
                )
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            bundle,
            epoch: 0,
            history: Vec::new(),
            betas,
            primary_weights,
            secondary_weights,
            primary_rng: stream_rng(config.seed, STREAM_PRIMARY),
            secondary_cursors,
        })
    }

    pub fn secondary_count(&self) -> usize {
        self.bundle.secondary_heads.len()
    }

    /// Fits the secondary heads to the current representation.
    pub fn train_secondary_inner(&mut self, secondary: &[TaskDataset]) -> Result<InnerReport> {
        if secondary.is_empty() {
            return Err(Error::Config("inner loop needs at least one secondary task".into()));
        }
        if secondary.len() != self.secondary_count() {
            return Err(Error::Config(format!(
                "{} secondary datasets for {} heads",
                secondary.len(),
                self.secondary_count()
            )));
        }
        if let Some(s) = secondary.iter().find(|s| s.x.nrows() == 0) {
            return Err(Error::Config(format!("secondary dataset '{}' is empty", s.task.name)));
        }
        let embeddings: Vec<Matrix> = secondary
            .iter()
            .map(|s| self.bundle.embed(&s.x))
            .collect::<Result<_>>()?;
        let policy = self.config.inner.clone();
        let lrs: Vec<f64> = match policy.step {
            InnerStep::Fixed => vec![self.config.head_lr(); secondary.len()],
            InnerStep::Adaptive => embeddings
                .iter()
                .zip(&self.betas)
                .zip(&self.secondary_weights)
                .map(|((e, &beta), w)| {
                    let gram = e.t().dot(e) / e.nrows() as f64;
                    let wmax = w.as_slice().iter().cloned().fold(0.0, f64::max);
                    let l = 0.5 * beta * wmax * (largest_eigenvalue(&gram).sqrt() + 1.0).powi(2)
                        + policy.l2;
                    if l > 0.0 {
                        1.0 / l
                    } else {
                        0.0
                    }
                })
                .collect(),
            InnerStep::Preconditioned => vec![1.0; secondary.len()],
        };
        let preconditioners: Vec<Option<Matrix>> = match policy.step {
            InnerStep::Preconditioned => embeddings
                .iter()
                .zip(secondary)
                .zip(self.betas.iter().zip(&self.secondary_weights))
                .map(|((e, s), (&beta, w))| {
                    hessian_bound_inverse(e, &s.task.labels, w, beta, policy.l2)
                })
                .collect::<Result<_>>()?,
            _ => vec![None; secondary.len()],
        };

        let mut prev: Option<f64> = None;
        let mut stalled = 0;
        let mut steps = 0;
        let mut last = f64::NAN;
        while steps < policy.max_steps {
            let mut tape = Tape::new();
            let mut bound = Vec::with_capacity(secondary.len());
            let mut logits = Vec::with_capacity(secondary.len());
            for (head, e) in self.bundle.secondary_heads.iter().zip(&embeddings) {
                let b = head.bind(&mut tape);
                let ev = tape.constant(e.clone());
                let z = tape.matmul(ev, b.weight)?;
                logits.push(tape.add_bias(z, b.bias)?);
                bound.push(b);
            }
            let tasks: Vec<TaskBatch<'_>> = logits
                .iter()
                .zip(secondary)
                .zip(&self.secondary_weights)
                .map(|((&z, s), w)| TaskBatch {
                    logits: z,
                    labels: &s.task.labels,
                    weights: w,
                })
                .collect();
            let ls = secondary_classification_loss(&mut tape, &tasks, &self.betas)?;
            tape.backward(ls)?;
            last = tape.scalar(ls);
            if policy.l2 > 0.0 {
                let sq: f64 = self
                    .bundle
                    .secondary_heads
                    .iter()
                    .map(|h| h.weight.value.iter().map(|v| v * v).sum::<f64>())
                    .sum();
                last += 0.5 * policy.l2 * sq;
            }
            for (((head, b), &lr), pre) in self
                .bundle
                .secondary_heads
                .iter_mut()
                .zip(&bound)
                .zip(&lrs)
                .zip(&preconditioners)
            {
                head.accumulate(&tape, b);
                if policy.l2 > 0.0 {
                    head.weight.grad.scaled_add(policy.l2, &head.weight.value);
                }
                if let Some(pinv) = pre {
                    precondition(head, pinv);
                }
                sgd_step(head.params_mut(), lr);
                autodiff::zero_grads(head.params_mut());
            }
            steps += 1;

            if let Some(p) = prev {
                let improvement = (p - last) / p.abs().max(f64::MIN_POSITIVE);
                if improvement < policy.plateau_tol {
                    stalled += 1;
                } else {
                    stalled = 0;
                }
                if stalled >= policy.plateau_patience {
                    break;
                }
            }
            prev = Some(last);
        }
        Ok(InnerReport {
            steps,
            final_loss: last,
        })
    }

    /// One SGD step on `L_p + α L_conf` for the representation and primary head.
    pub fn joint_step(
        &mut self,
        primary_x: &Matrix,
        primary_y: &[usize],
        secondary_x: &[Matrix],
        alpha: f64,
    ) -> Result<StepReport> {
        if secondary_x.len() != self.secondary_count() {
            return Err(Error::Config(format!(
                "{} secondary batches for {} heads",
                secondary_x.len(),
                self.secondary_count()
            )));
        }
        let mut tape = Tape::new();
        let bound = self.bundle.bind(&mut tape);
        let x = tape.constant(primary_x.clone());
        let e = self.bundle.forward_features(&mut tape, &bound, x)?;
        let z = tape.matmul(e, bound.primary.weight)?;
        let z = tape.add_bias(z, bound.primary.bias)?;
        let lp = softmax_loss(&mut tape, z, primary_y, &self.primary_weights)?;

        let (total, lconf) = if secondary_x.is_empty() {
            (lp, None)
        } else {
            let mut logits = Vec::with_capacity(secondary_x.len());
            for (xm, bh) in secondary_x.iter().zip(&bound.secondary) {
                let xv = tape.constant(xm.clone());
                let em = self.bundle.forward_features(&mut tape, &bound, xv)?;
                let zm = tape.matmul(em, bh.weight)?;
                logits.push(tape.add_bias(zm, bh.bias)?);
            }
            let lc = secondary_confusion_loss(&mut tape, &logits, self.config.confusion_variant)?;
            (joint_loss(&mut tape, lp, lc, alpha)?, Some(lc))
        };
        tape.backward(total)?;

        // only the representation and primary head take this step
        for (l, (w, b)) in self.bundle.extractor.layers.iter_mut().zip(&bound.layers) {
            l.weight.accumulate(&tape, *w);
            l.bias.accumulate(&tape, *b);
        }
        self.bundle.primary_head.accumulate(&tape, &bound.primary);
        let base_lr = self.config.base_lr;
        let head_lr = self.config.head_lr();
        let mut repr = self.bundle.params_of_mut(ParamSelector::Repr)?;
        sgd_step(repr.iter_mut().map(|p| &mut **p), base_lr);
        autodiff::zero_grads(repr);
        let mut head = self.bundle.params_of_mut(ParamSelector::Primary)?;
        sgd_step(head.iter_mut().map(|p| &mut **p), head_lr);
        autodiff::zero_grads(head);

        Ok(StepReport {
            loss_primary: tape.scalar(lp),
            loss_confusion: lconf.map_or(0.0, |v| tape.scalar(v)),
            loss_joint: tape.scalar(total),
        })
    }

    /// One shuffled pass of joint steps over the primary data, cycling
    /// secondary minibatches. With `inner_every = Some(k)` the secondary
    /// heads are refit after every `k` joint steps. Returns mean (L_p, L_conf).
    pub fn joint_pass(
        &mut self,
        primary: &LabeledDataset,
        secondary: &[TaskDataset],
    ) -> Result<(f64, f64)> {
        let mut order: Vec<usize> = (0..primary.len()).collect();
        order.shuffle(&mut self.primary_rng);
        let bs = self.config.batch_size;
        let alpha = self.config.alpha;
        let (mut sum_p, mut sum_c, mut batches) = (0.0, 0.0, 0usize);
        let refit = self.config.inner_every.filter(|_| !secondary.is_empty());
        for (i, chunk) in order.chunks(bs).enumerate() {
            if let Some(k) = refit {
                if i > 0 && i % k == 0 {
                    self.train_secondary_inner(secondary)?;
                }
            }
            let xb = select_rows(&primary.x, chunk);
            let yb = select_labels(&primary.primary.labels, chunk);
            let sec: Vec<Matrix> = secondary
                .iter()
                .zip(&mut self.secondary_cursors)
                .map(|(s, c)| select_rows(&s.x, &c.next_batch(bs)))
                .collect();
            let r = self.joint_step(&xb, &yb, &sec, alpha)?;
            sum_p += r.loss_primary;
            sum_c += r.loss_confusion;
            batches += 1;
        }
        Ok((sum_p / batches as f64, sum_c / batches as f64))
    }

    fn reinit_secondary(&mut self) {
        let mut rng = stream_rng(self.config.seed, STREAM_REINIT + self.epoch as u64);
        let emb = self.bundle.embedding_dim();
        let bound = 1.0 / (emb as f64).sqrt();
        for h in &mut self.bundle.secondary_heads {
            h.weight.value = Matrix::from_shape_simple_fn((emb, h.classes), || {
                rand::Rng::random_range(&mut rng, -bound..bound)
            });
            h.bias.value.fill(0.0);
        }
    }

    /// Inner loop (when there are secondary tasks), joint pass, evaluation.
    pub fn run_epoch(
        &mut self,
        primary: &LabeledDataset,
        secondary: &[TaskDataset],
        eval: &LabeledDataset,
    ) -> Result<&MetricsRecord> {
        if !secondary.is_empty() {
            if self.config.reinit_secondary_heads {
                self.reinit_secondary();
            }
            self.train_secondary_inner(secondary)?;
        }
        let (lp, lc) = self.joint_pass(primary, secondary)?;
        self.epoch += 1;
        let record = evaluate(
            &self.bundle,
            eval,
            self.epoch,
            (lp, lc),
            self.config.seed ^ PROBE_SEED_SALT,
        )?;
        self.history.push(record);
        Ok(self.history.last().expect("just pushed"))
    }

    /// Mean confusion loss of the current secondary heads on `x_per_task`.
    pub fn confusion_on(&self, x_per_task: &[Matrix]) -> Result<f64> {
        let mut tape = Tape::new();
        let mut logits = Vec::new();
        for (head, x) in self.bundle.secondary_heads.iter().zip(x_per_task) {
            let e = self.bundle.embed(x)?;
            let z = tape.constant(head.logits(&e)?);
            logits.push(z);
        }
        let mut total = 0.0;
        for &z in &logits {
            let l = confusion_loss(&mut tape, z, self.config.confusion_variant);
            total += tape.scalar(l);
        }
        Ok(total / logits.len().max(1) as f64)
    }
}

fn check_eval(bundle: &NetworkBundle, eval: &LabeledDataset) -> Result<()> {
    if eval.input_dim() != bundle.input_dim() {
        return Err(Error::Config(format!(
            "evaluation data has {} features, network expects {}",
            eval.input_dim(),
            bundle.input_dim()
        )));
    }
    if eval.primary.classes != bundle.primary_head.classes {
        return Err(Error::Config(format!(
            "evaluation primary task has {} classes, head has {}",
            eval.primary.classes, bundle.primary_head.classes
        )));
    }
    for h in &bundle.secondary_heads {
        if let Some(t) = eval.task(&h.name) {
            if t.classes != h.classes {
                return Err(Error::Config(format!(
                    "task '{}' has {} classes in evaluation data but {} in the network",
                    h.name, t.classes, h.classes
                )));
            }
        }
    }
    Ok(())
}

/// Metrics of `bundle` on `eval`: primary accuracies, a fresh linear probe
/// per spurious task of `eval`, and group-pair prediction KL.
pub fn evaluate(
    bundle: &NetworkBundle,
    eval: &LabeledDataset,
    epoch: usize,
    losses: (f64, f64),
    probe_seed: u64,
) -> Result<MetricsRecord> {
    check_eval(bundle, eval)?;
    let emb = bundle.embed(&eval.x)?;
    let preds = bundle.primary_head.predict(&emb)?;
    let labels = &eval.primary.labels;
    let tasks = eval
        .spurious
        .iter()
        .map(|t| {
            let acc = probe_train(&emb, &t.labels, t.classes, probe_seed)?;
            Ok(TaskMetrics {
                name: t.name.clone(),
                classes: t.classes,
                probe_accuracy: acc,
                rescaled_score: rescaled_score(1.0 - acc, t.classes),
                percent_unlearned: None,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MetricsRecord {
        epoch,
        primary_accuracy: mean_class_accuracy(&preds, labels, eval.primary.classes)?,
        primary_adjacent_accuracy: adjacent_accuracy(&preds, labels)?,
        loss_primary: losses.0,
        loss_confusion: losses.1,
        tasks,
        kl: group_kls(&preds, eval)?,
    })
}

fn build_state(
    config: &TrainConfig,
    model: &ModelConfig,
    primary: &LabeledDataset,
    secondary: &[TaskDataset],
    eval: &LabeledDataset,
) -> Result<TrainState> {
    let state = TrainState::new(config, model, primary, secondary)?;
    check_eval(&state.bundle, eval)?;
    Ok(state)
}

/// Trains with joint learning and unlearning for `config.epochs` epochs,
/// evaluating on `eval` after each.
pub fn run_jlu(
    config: &TrainConfig,
    model: &ModelConfig,
    primary: &LabeledDataset,
    secondary: &[TaskDataset],
    eval: &LabeledDataset,
) -> Result<(NetworkBundle, Vec<MetricsRecord>)> {
    let mut state = build_state(config, model, primary, secondary, eval)?;
    for _ in 0..config.epochs {
        state.run_epoch(primary, secondary, eval)?;
    }
    Ok((state.bundle, state.history))
}

/// Plain SGD on the primary loss only.
pub fn run_baseline(
    config: &TrainConfig,
    model: &ModelConfig,
    primary: &LabeledDataset,
    eval: &LabeledDataset,
) -> Result<(NetworkBundle, Vec<MetricsRecord>)> {
    run_jlu(config, model, primary, &[], eval)
}

/// Settings for the linear probe.
const PROBE_MAX_STEPS: usize = 1500;
const PROBE_L2: f64 = 1e-4;
const PROBE_TOL: f64 = 1e-7;
const PROBE_PATIENCE: usize = 10;

/// Trains a fresh softmax-regression probe on half of each class and returns
/// its mean-class accuracy on a class-balanced held-out half.
pub fn probe_train(embeddings: &Matrix, labels: &[usize], classes: usize, seed: u64) -> Result<f64> {
    if labels.len() != embeddings.nrows() {
        return Err(Error::Data(format!(
            "{} labels for {} embeddings",
            labels.len(),
            embeddings.nrows()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Data(format!("label {l} out of range for {classes} classes")));
        }
        by_class[l].push(i);
    }
    if let Some(k) = by_class.iter().position(|c| c.len() < 2) {
        return Err(Error::Data(format!(
            "class {k} has fewer than 2 samples; cannot fill both probe splits"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test_parts = Vec::new();
    for idx in &mut by_class {
        idx.shuffle(&mut rng);
        let half = idx.len() / 2;
        train.extend_from_slice(&idx[..half]);
        test_parts.push(idx[half..].to_vec());
    }
    let per_class = test_parts.iter().map(Vec::len).min().expect("classes >= 1");
    let test: Vec<usize> = test_parts
        .iter()
        .flat_map(|p| p[..per_class].iter().copied())
        .collect();

    let xtr = select_rows(embeddings, &train);
    let ytr = select_labels(labels, &train);
    let mean = xtr.mean_axis(Axis(0)).expect("nonempty");
    let std = xtr.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let xtr = (&xtr - &mean) / &std;
    let xte = (&select_rows(embeddings, &test) - &mean) / &std;

    let head = fit_softmax_regression(&xtr, &ytr, classes);
    let preds = head.predict(&xte)?;
    mean_class_accuracy(&preds, &select_labels(labels, &test), classes)
}

/// Full-batch gradient descent with step 1/L on L2-regularized softmax regression.
fn fit_softmax_regression(x: &Matrix, y: &[usize], classes: usize) -> Head {
    let (n, d) = x.dim();
    let gram = x.t().dot(x) / n as f64;
    // Hessian of the mean softmax loss is bounded by 0.5 * λmax([x 1]ᵀ[x 1] / n)
    let lipschitz = 0.5 * (largest_eigenvalue(&gram) + 1.0) + PROBE_L2;
    let lr = 1.0 / lipschitz;
    let mut onehot = Matrix::zeros((n, classes));
    for (i, &l) in y.iter().enumerate() {
        onehot[[i, l]] = 1.0;
    }
    let mut head = Head::zeros("probe", d, classes);
    let mut prev = f64::INFINITY;
    let mut stalled = 0;
    for _ in 0..PROBE_MAX_STEPS {
        let logits = x.dot(&head.weight.value) + &head.bias.value;
        let lsm = autodiff::log_softmax_rows(&logits);
        let loss = -(&lsm * &onehot).sum() / n as f64
            + 0.5 * PROBE_L2 * head.weight.value.mapv(|w| w * w).sum();
        let g = (lsm.mapv(f64::exp) - &onehot) / n as f64;
        let gw = x.t().dot(&g) + &head.weight.value * PROBE_L2;
        let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
        head.weight.value.scaled_add(-lr, &gw);
        head.bias.value.scaled_add(-lr, &gb);
        if (prev - loss) / prev.abs().max(1e-12) < PROBE_TOL {
            stalled += 1;
            if stalled >= PROBE_PATIENCE {
                break;
            }
        } else {
            stalled = 0;
        }
        prev = loss;
    }
    head
}

/// Inverse of `β/2 · Σ_i w_i [e_i 1]ᵀ[e_i 1] / n + l2 (on the weight rows)`,
/// which bounds the Hessian of the weighted, decayed softmax loss in each
/// class column. `None` when there is nothing to fit.
fn hessian_bound_inverse(
    e: &Matrix,
    labels: &[usize],
    weights: &ClassWeights,
    beta: f64,
    l2: f64,
) -> Result<Option<Matrix>> {
    if beta == 0.0 && l2 == 0.0 {
        return Ok(None);
    }
    let (n, d) = e.dim();
    let w = weights.as_slice();
    let mut aug = Matrix::ones((n, d + 1));
    aug.slice_mut(ndarray::s![.., ..d]).assign(e);
    let mut scaled = aug.clone();
    for (mut row, &y) in scaled.rows_mut().into_iter().zip(labels) {
        row *= w[y];
    }
    let mut p = aug.t().dot(&scaled) * (0.5 * beta / n as f64);
    for i in 0..d {
        p[[i, i]] += l2;
    }
    let m = nalgebra::DMatrix::from_row_iterator(d + 1, d + 1, p.iter().cloned());
    let eig = m.symmetric_eigen();
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    if !(top > 0.0 && top.is_finite()) {
        return Err(Error::Contract("degenerate embedding Gram matrix".into()));
    }
    let floor = 1e-8 * top;
    let inv_vals = eig.eigenvalues.map(|v| 1.0 / v.max(floor));
    let inv = &eig.eigenvectors * nalgebra::DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
    Ok(Some(Matrix::from_shape_fn((d + 1, d + 1), |(i, j)| inv[(i, j)])))
}

/// Replaces a head's accumulated gradient `[∂W; ∂b]` by `P⁻¹ [∂W; ∂b]`.
fn precondition(head: &mut Head, pinv: &Matrix) {
    let d = head.weight.value.nrows();
    let mut g = Matrix::zeros((d + 1, head.classes));
    g.slice_mut(ndarray::s![..d, ..]).assign(&head.weight.grad);
    g.slice_mut(ndarray::s![d.., ..]).assign(&head.bias.grad);
    let step = pinv.dot(&g);
    head.weight.grad.assign(&step.slice(ndarray::s![..d, ..]));
    head.bias.grad.assign(&step.slice(ndarray::s![d.., ..]));
}

fn largest_eigenvalue(m: &Matrix) -> f64 {
    let d = m.nrows();
    let mut v = ndarray::Array1::from_elem(d, 1.0 / (d as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..100 {
        let w = m.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = v.dot(&w);
        v = w / norm;
    }
    // power iteration approaches from below; pad so the step stays stable
    lambda.max(0.0) * 1.05
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Parameter;
    use crate::datagen::{
        balanced_test, sample_dataset, CentroidLayout, JointSpec, Split, SyntheticSpec, TaskSpec,
    };
    use rand::Rng;

    fn spec(primary_signal: f64, spurious_signal: f64, rho: f64) -> SyntheticSpec {
        SyntheticSpec {
            input_dim: 6,
            tasks: vec![
                TaskSpec {
                    name: "age".into(),
                    classes: 3,
                    signal_scale: primary_signal,
                    layout: CentroidLayout::Ordinal,
                },
                TaskSpec {
                    name: "gender".into(),
                    classes: 2,
                    signal_scale: spurious_signal,
                    layout: CentroidLayout::Random,
                },
            ],
            noise_sigma: 1.0,
            centroid_seed: 3,
            train_joint: JointSpec::Biased { rho: vec![rho] },
            test_joint: JointSpec::Uniform,
        }
    }

    fn small_model() -> ModelConfig {
        ModelConfig {
            hidden: vec![8],
            embedding_dim: 4,
            ..Default::default()
        }
    }

    fn config() -> TrainConfig {
        TrainConfig {
            base_lr: 0.01,
            epochs: 2,
            batch_size: 16,
            seed: 5,
            ..Default::default()
        }
    }

    struct Fixture {
        train: LabeledDataset,
        secondary: Vec<TaskDataset>,
        test: LabeledDataset,
    }

    fn fixture(s: &SyntheticSpec, n: usize) -> Fixture {
        let train = sample_dataset(s, n, Split::Train, 1).unwrap();
        let sec = sample_dataset(s, n, Split::Test, 2).unwrap();
        Fixture {
            secondary: vec![sec.task_dataset("gender").unwrap()],
            test: balanced_test(s, 6 * 40, 3).unwrap(),
            train,
        }
    }

    fn snapshot(ps: &[&Parameter]) -> Vec<Matrix> {
        ps.iter().map(|p| p.value.clone()).collect()
    }

    fn repr_and_primary(b: &NetworkBundle) -> Vec<Matrix> {
        let mut ps: Vec<&Parameter> = Vec::new();
        for l in &b.extractor.layers {
            ps.push(&l.weight);
            ps.push(&l.bias);
        }
        ps.push(&b.primary_head.weight);
        ps.push(&b.primary_head.bias);
        snapshot(&ps)
    }

    fn secondary_params(b: &NetworkBundle) -> Vec<Matrix> {
        let ps: Vec<&Parameter> = b
            .secondary_heads
            .iter()
            .flat_map(|h| [&h.weight, &h.bias])
            .collect();
        snapshot(&ps)
    }

    fn primary_batch(f: &Fixture, n: usize) -> (Matrix, Vec<usize>) {
        let idx: Vec<usize> = (0..n).collect();
        (
            select_rows(&f.train.x, &idx),
            select_labels(&f.train.primary.labels, &idx),
        )
    }

    #[test]
    fn inner_loop_moves_only_secondary_heads() {
        for step in [InnerStep::Fixed, InnerStep::Adaptive, InnerStep::Preconditioned] {
            let f = fixture(&spec(1.0, 1.0, 0.8), 200);
            let mut cfg = config();
            cfg.inner.step = step;
            let mut st = TrainState::new(&cfg, &small_model(), &f.train, &f.secondary).unwrap();
            let before = repr_and_primary(&st.bundle);
            let heads = secondary_params(&st.bundle);
            let r = st.train_secondary_inner(&f.secondary).unwrap();
            assert!(r.steps >= 1 && r.final_loss.is_finite());
            assert_eq!(repr_and_primary(&st.bundle), before);
            assert_ne!(secondary_params(&st.bundle), heads);
        }
    }

    #[test]
    fn joint_step_leaves_secondary_heads_untouched() {
        let f = fixture(&spec(1.0, 1.0, 0.8), 200);
        let mut st = TrainState::new(&config(), &small_model(), &f.train, &f.secondary).unwrap();
        st.train_secondary_inner(&f.secondary).unwrap();
        let heads = secondary_params(&st.bundle);
        let before = repr_and_primary(&st.bundle);
        let (x, y) = primary_batch(&f, 16);
        let sx = vec![select_rows(&f.secondary[0].x, &(0..16).collect::<Vec<_>>())];
        let r = st.joint_step(&x, &y, &sx, 1.0).unwrap();
        assert!(r.loss_confusion > 0.0);
        assert_eq!(secondary_params(&st.bundle), heads);
        assert_ne!(repr_and_primary(&st.bundle), before);
    }

    #[test]
    fn zero_alpha_is_a_plain_primary_step() {
        let f = fixture(&spec(1.0, 1.0, 0.8), 200);
        let cfg = config();
        let mut with = TrainState::new(&cfg, &small_model(), &f.train, &f.secondary).unwrap();
        let mut without = TrainState::new(&cfg, &small_model(), &f.train, &f.secondary).unwrap();
        with.train_secondary_inner(&f.secondary).unwrap();
        without.bundle.secondary_heads.clear();
        let (x, y) = primary_batch(&f, 16);
        let sx = vec![select_rows(&f.secondary[0].x, &(0..16).collect::<Vec<_>>())];
        with.joint_step(&x, &y, &sx, 0.0).unwrap();
        without.joint_step(&x, &y, &[], 0.0).unwrap();
        for (a, b) in repr_and_primary(&with.bundle)
            .iter()
            .zip(&repr_and_primary(&without.bundle))
        {
            let diff = (a - b).mapv(f64::abs).fold(0.0, |m: f64, &v| m.max(v));
            assert!(diff < 1e-12, "max diff {diff}");
        }
    }

    #[test]
    fn small_joint_step_lowers_the_joint_loss() {
        let f = fixture(&spec(1.0, 1.0, 0.8), 200);
        let mut cfg = config();
        cfg.base_lr = 1e-4;
        cfg.head_lr_boost = 1.0;
        let mut st = TrainState::new(&cfg, &small_model(), &f.train, &f.secondary).unwrap();
        st.train_secondary_inner(&f.secondary).unwrap();
        let (x, y) = primary_batch(&f, 64);
        let sx = vec![select_rows(&f.secondary[0].x, &(0..64).collect::<Vec<_>>())];
        let first = st.joint_step(&x, &y, &sx, 0.5).unwrap();
        let second = st.joint_step(&x, &y, &sx, 0.5).unwrap();
        assert!(second.loss_joint < first.loss_joint);
    }

    #[test]
    fn joint_steps_push_confusion_toward_uniform() {
        let f = fixture(&spec(1.0, 1.0, 0.8), 400);
        let mut cfg = config();
        cfg.epochs = 10;
        let mut st = TrainState::new(&cfg, &small_model(), &f.train, &f.secondary).unwrap();
        let rows: Vec<usize> = (0..64).collect();
        let probe = vec![select_rows(&f.secondary[0].x, &rows)];
        let mut held = 0;
        for epoch in 0..cfg.epochs {
            st.train_secondary_inner(&f.secondary).unwrap();
            let before = st.confusion_on(&probe).unwrap();
            let (x, y) = primary_batch(&f, cfg.batch_size);
            let sx = vec![select_rows(&f.secondary[0].x, &rows[..cfg.batch_size])];
            st.joint_step(&x, &y, &sx, cfg.alpha).unwrap();
            if st.confusion_on(&probe).unwrap() <= before {
                held += 1;
            }
            st.joint_pass(&f.train, &f.secondary).unwrap();
            assert!(before.is_finite(), "epoch {epoch}");
        }
        assert!(held * 10 >= cfg.epochs * 8, "held in {held} of {} epochs", cfg.epochs);
    }

    #[test]
    fn zero_epochs_return_the_initial_network() {
        let f = fixture(&spec(1.0, 1.0, 0.8), 100);
        let mut cfg = config();
        cfg.epochs = 0;
        let init = TrainState::new(&cfg, &small_model(), &f.train, &f.secondary).unwrap();
        let (bundle, history) =
            run_jlu(&cfg, &small_model(), &f.train, &f.secondary, &f.test).unwrap();
        assert!(history.is_empty());
        assert_eq!(repr_and_primary(&bundle), repr_and_primary(&init.bundle));
        assert_eq!(secondary_params(&bundle), secondary_params(&init.bundle));
    }

    #[test]
    fn invalid_settings_are_config_errors() {
        let f = fixture(&spec(1.0, 1.0, 0.8), 100);
        let mut cfg = config();
        cfg.inner.max_steps = 0;
        assert!(matches!(
            TrainState::new(&cfg, &small_model(), &f.train, &f.secondary),
            Err(Error::Config(_))
        ));
        let mut empty = f.secondary.clone();
        empty[0].x = Matrix::zeros((0, 6));
        empty[0].task.labels.clear();
        assert!(matches!(
            TrainState::new(&config(), &small_model(), &f.train, &empty),
            Err(Error::Config(_))
        ));
        let mut st = TrainState::new(&config(), &small_model(), &f.train, &f.secondary).unwrap();
        assert!(matches!(st.train_secondary_inner(&[]), Err(Error::Config(_))));
    }

    #[test]
    fn inner_loop_fits_separable_secondary_labels() {
        for step in [InnerStep::Adaptive, InnerStep::Preconditioned] {
            let f = fixture(&spec(1.0, 6.0, 0.5), 400);
            let mut cfg = config();
            cfg.inner = InnerPolicy {
                max_steps: 500,
                step,
                ..Default::default()
            };
            let mut st = TrainState::new(&cfg, &small_model(), &f.train, &f.secondary).unwrap();
            st.train_secondary_inner(&f.secondary).unwrap();
            let s = &f.secondary[0];
            let emb = st.bundle.embed(&s.x).unwrap();
            let preds = st.bundle.secondary_heads[0].predict(&emb).unwrap();
            let acc = mean_class_accuracy(&preds, &s.task.labels, 2).unwrap();
            assert!(acc > 0.95, "{step:?}: head accuracy {acc}");
        }
    }

    #[test]
    fn baseline_learns_a_separable_primary_task() {
        let s = spec(6.0, 1.0, 0.5);
        let f = fixture(&s, 600);
        let mut cfg = config();
        cfg.epochs = 5;
        let (bundle, history) = run_baseline(&cfg, &small_model(), &f.train, &f.test).unwrap();
        assert!(bundle.secondary_heads.is_empty());
        assert_eq!(history.len(), 5);
        let acc = history.last().unwrap().primary_accuracy;
        assert!(acc > 0.95, "primary accuracy {acc}");
        assert!(history.iter().all(MetricsRecord::is_finite));
    }

    #[test]
    fn runs_are_deterministic() {
        let f = fixture(&spec(1.0, 1.0, 0.8), 200);
        let a = run_jlu(&config(), &small_model(), &f.train, &f.secondary, &f.test).unwrap();
        let b = run_jlu(&config(), &small_model(), &f.train, &f.secondary, &f.test).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(repr_and_primary(&a.0), repr_and_primary(&b.0));
        assert!(a.1.iter().all(MetricsRecord::is_finite));
    }

    fn gaussian_features(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_shape_simple_fn((n, d), || rng.sample(rand_distr::StandardNormal))
    }

    #[test]
    fn probe_reads_a_linear_feature() {
        let x = gaussian_features(400, 5, 11);
        let y: Vec<usize> = x.column(2).iter().map(|&v| usize::from(v > 0.0)).collect();
        let acc = probe_train(&x, &y, 2, 1).unwrap();
        assert!(acc > 0.95, "probe accuracy {acc}");
        assert_eq!(acc, probe_train(&x, &y, 2, 1).unwrap());
    }

    #[test]
    fn probe_is_near_chance_on_random_labels() {
        let x = gaussian_features(600, 5, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let y: Vec<usize> = (0..600).map(|_| rng.random_range(0..2)).collect();
        let acc = probe_train(&x, &y, 2, 1).unwrap();
        assert!((acc - 0.5).abs() < 0.1, "probe accuracy {acc}");
    }

    #[test]
    fn probe_rejects_tiny_classes() {
        let x = gaussian_features(10, 2, 1);
        let mut y = vec![0; 10];
        y[0] = 1;
        assert!(matches!(probe_train(&x, &y, 2, 1), Err(Error::Data(_))));
    }
}
