//! Classification, confusion and joint objectives, all reduced as batch means.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};

/// Per-class loss weights for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0; classes])
    }

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::Config(format!(
                "class weights must be positive and finite: {weights:?}"
            )));
        }
        Ok(Self(weights))
    }

    /// Inverse relative class frequency, normalized so the mean weight is 1.
    pub fn from_labels(labels: &[usize], classes: usize) -> Result<Self> {
        let mut counts = vec![0usize; classes];
        for &y in labels {
            if y >= classes {
                return Err(Error::Data(format!("label {y} out of range for {classes} classes")));
            }
            counts[y] += 1;
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Data(format!(
                "class {k} never occurs; cannot weight by inverse frequency"
            )));
        }
        let n = labels.len() as f64;
        let raw: Vec<f64> = counts.iter().map(|&c| n / c as f64).collect();
        let mean = raw.iter().sum::<f64>() / classes as f64;
        Ok(Self(raw.into_iter().map(|w| w / mean).collect()))
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn class_weights_from(labels: &[usize], classes: usize) -> Result<ClassWeights> {
    ClassWeights::from_labels(labels, classes)
}

/// Weight `alpha` on the confusion term and `betas[m]` on secondary task `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub betas: Vec<f64>,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.alpha) || !self.betas.iter().all(|&b| ok(b)) {
            return Err(Error::Config(format!(
                "alpha and betas must be finite and nonnegative (alpha={}, betas={:?})",
                self.alpha, self.betas
            )));
        }
        Ok(())
    }
}

/// How the confusion objective compares a head's softmax output with uniform.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfusionVariant {
    /// Cross-entropy of the uniform distribution against the prediction.
    #[default]
    Ce,
    /// KL(p ‖ u).
    Kl,
    /// KL(u ‖ p); same gradient as `Ce`, offset by ln K.
    KlUniform,
}

/// Weighted mean over the batch of `-w[y] log p_y`.
pub fn softmax_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    weights: &ClassWeights,
) -> Result<Var> {
    let (n, k) = tape.shape(logits);
    if n == 0 || labels.len() != n {
        return Err(Error::Data(format!(
            "softmax_loss got {} labels for a batch of {n}",
            labels.len()
        )));
    }
    if weights.classes() != k {
        return Err(Error::Data(format!(
            "{} class weights for {k} logits",
            weights.classes()
        )));
    }
    let mut mask = Matrix::zeros((n, k));
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Data(format!("label {y} out of range for {k} classes")));
        }
        mask[[i, y]] = -weights.0[y] / n as f64;
    }
    let lsm = tape.log_softmax_rows(logits);
    let picked = tape.masked_by(lsm, mask)?;
    Ok(tape.sum(picked))
}

/// Batch mean of `-(1/K) Σ_k log p_k`; minimized (= ln K) by uniform output.
pub fn confusion_loss_ce(tape: &mut Tape, logits: Var) -> Var {
    let (n, k) = tape.shape(logits);
    let lsm = tape.log_softmax_rows(logits);
    let s = tape.sum(lsm);
    tape.scale(s, -1.0 / (n * k) as f64)
}

/// Batch mean of KL(p ‖ u) = ln K − H(p).
pub fn confusion_loss_kl(tape: &mut Tape, logits: Var) -> Var {
    let (n, k) = tape.shape(logits);
    let lsm = tape.log_softmax_rows(logits);
    let p = tape.softmax_rows(logits);
    let plogp = tape.mul(p, lsm).expect("same shape");
    let s = tape.sum(plogp);
    let neg_h = tape.scale(s, 1.0 / n as f64);
    let ln_k = tape.constant(Matrix::from_elem((1, 1), (k as f64).ln()));
    tape.add(neg_h, ln_k).expect("scalars")
}

/// Batch mean of KL(u ‖ p) = CE(u, p) − ln K.
pub fn confusion_loss_kl_uniform(tape: &mut Tape, logits: Var) -> Var {
    let (_, k) = tape.shape(logits);
    let ce = confusion_loss_ce(tape, logits);
    let c = tape.constant(Matrix::from_elem((1, 1), -(k as f64).ln()));
    tape.add(ce, c).expect("scalars")
}

pub fn confusion_loss(tape: &mut Tape, logits: Var, variant: ConfusionVariant) -> Var {
    match variant {
        ConfusionVariant::Ce => confusion_loss_ce(tape, logits),
        ConfusionVariant::Kl => confusion_loss_kl(tape, logits),
        ConfusionVariant::KlUniform => confusion_loss_kl_uniform(tape, logits),
    }
}

/// Logits and targets of one secondary task within a batch.
pub struct TaskBatch<'a> {
    pub logits: Var,
    pub labels: &'a [usize],
    pub weights: &'a ClassWeights,
}

/// `Σ_m β_m L_m`.
pub fn secondary_classification_loss(
    tape: &mut Tape,
    tasks: &[TaskBatch<'_>],
    betas: &[f64],
) -> Result<Var> {
    if tasks.is_empty() {
        return Err(Error::Contract("secondary classification loss needs at least one task".into()));
    }
    if tasks.len() != betas.len() {
        return Err(Error::Config(format!(
            "{} betas for {} secondary tasks",
            betas.len(),
            tasks.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (t, &beta) in tasks.iter().zip(betas) {
        let l = softmax_loss(tape, t.logits, t.labels, t.weights)?;
        let l = tape.scale(l, beta);
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    Ok(total.expect("non-empty"))
}

/// `(1/M) Σ_m L_conf,m`.
pub fn secondary_confusion_loss(
    tape: &mut Tape,
    logits: &[Var],
    variant: ConfusionVariant,
) -> Result<Var> {
    if logits.is_empty() {
        return Err(Error::Contract(
            "confusion loss over zero secondary tasks; skip the term instead".into(),
        ));
    }
    let mut total: Option<Var> = None;
    for &z in logits {
        let l = confusion_loss(tape, z, variant);
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    Ok(tape.scale(total.expect("non-empty"), 1.0 / logits.len() as f64))
}

/// `L_p + α L_conf`.
pub fn joint_loss(tape: &mut Tape, primary: Var, confusion: Var, alpha: f64) -> Result<Var> {
    let c = tape.scale(confusion, alpha);
    tape.add(primary, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::f64::consts::LN_2;

    fn eval(logits: Matrix, f: impl FnOnce(&mut Tape, Var) -> Var) -> f64 {
        let mut t = Tape::new();
        let z = t.leaf(logits, true);
        let l = f(&mut t, z);
        t.scalar(l)
    }

    fn logits_of(p: &[f64]) -> Matrix {
        Matrix::from_shape_vec((1, p.len()), p.iter().map(|v| v.ln()).collect()).unwrap()
    }

    #[test]
    fn softmax_loss_cases() {
        let w = ClassWeights::uniform(4);
        let perfect = eval(array![[50.0, 0.0, 0.0, 0.0]], |t, z| {
            softmax_loss(t, z, &[0], &w).unwrap()
        });
        assert!(perfect < 1e-20);
        let uniform = eval(Matrix::zeros((3, 4)), |t, z| {
            softmax_loss(t, z, &[0, 3, 1], &w).unwrap()
        });
        assert!((uniform - 4f64.ln()).abs() < 1e-12);

        let w = ClassWeights::new(vec![2.0, 1.0]).unwrap();
        let weighted = eval(Matrix::zeros((2, 2)), |t, z| softmax_loss(t, z, &[0, 1], &w).unwrap());
        assert!((weighted - 1.5 * LN_2).abs() < 1e-12);
        assert!((weighted - 1.0397).abs() < 1e-4);
    }

    #[test]
    fn softmax_loss_rejects_bad_labels() {
        let w = ClassWeights::uniform(2);
        let mut t = Tape::new();
        let z = t.leaf(Matrix::zeros((2, 2)), true);
        assert!(matches!(softmax_loss(&mut t, z, &[0, 2], &w), Err(Error::Data(_))));
        assert!(matches!(softmax_loss(&mut t, z, &[0], &w), Err(Error::Data(_))));
    }

    #[test]
    fn confusion_ce_cases() {
        let u = eval(Matrix::zeros((5, 4)), confusion_loss_ce);
        assert!((u - 4f64.ln()).abs() < 1e-12);
        let half = eval(logits_of(&[0.5, 0.5]), confusion_loss_ce);
        assert!((half - LN_2).abs() < 1e-12);
        let skew = eval(logits_of(&[0.9, 0.1]), confusion_loss_ce);
        let direct = -0.5 * (0.9f64.ln() + 0.1f64.ln());
        assert!((skew - direct).abs() < 1e-12);
        assert!((skew - 1.2040).abs() < 1e-4 && skew > LN_2);
    }

    #[test]
    fn confusion_kl_cases() {
        let u = eval(Matrix::zeros((3, 5)), confusion_loss_kl);
        assert!(u.abs() < 1e-12);
        let v = eval(logits_of(&[0.25, 0.75]), confusion_loss_kl);
        let direct = 0.25 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln();
        assert!((v - direct).abs() < 1e-12);
        assert!((v - 0.1308).abs() < 1e-4);
        let one_hot = eval(array![[800.0, 0.0, 0.0]], confusion_loss_kl);
        assert!((one_hot - 3f64.ln()).abs() < 1e-9);
        assert!(one_hot.is_finite());
    }

    #[test]
    fn kl_uniform_is_ce_minus_ln_k() {
        let z = array![[0.3, -1.2, 2.0], [0.0, 0.5, 0.1]];
        let ce = eval(z.clone(), confusion_loss_ce);
        let klu = eval(z, confusion_loss_kl_uniform);
        assert!((ce - klu - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn secondary_losses() {
        let w = ClassWeights::uniform(2);
        let mut t = Tape::new();
        let z = t.leaf(array![[0.2, -0.4], [1.0, 0.0]], true);
        let single = softmax_loss(&mut t, z, &[1, 0], &w).unwrap();
        let tasks = [TaskBatch {
            logits: z,
            labels: &[1, 0],
            weights: &w,
        }];
        let ls = secondary_classification_loss(&mut t, &tasks, &[1.0]).unwrap();
        assert_eq!(t.scalar(ls), t.scalar(single));
        let zero = secondary_classification_loss(&mut t, &tasks, &[0.0]).unwrap();
        assert_eq!(t.scalar(zero), 0.0);
        assert!(secondary_classification_loss(&mut t, &tasks, &[1.0, 1.0]).is_err());
        assert!(secondary_classification_loss(&mut t, &[], &[]).is_err());

        // logits chosen so that -ln p_y is exactly 1.0 and 0.5
        let la = t.leaf(logits_of(&[(-1.0f64).exp(), 1.0 - (-1.0f64).exp()]), true);
        let lb = t.leaf(logits_of(&[(-0.5f64).exp(), 1.0 - (-0.5f64).exp()]), true);
        let two = [
            TaskBatch { logits: la, labels: &[0], weights: &w },
            TaskBatch { logits: lb, labels: &[0], weights: &w },
        ];
        let total = secondary_classification_loss(&mut t, &two, &[1.0, 2.0]).unwrap();
        assert!((t.scalar(total) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn secondary_confusion_is_mean() {
        let mut t = Tape::new();
        let a = t.leaf(logits_of(&[0.9, 0.1]), true);
        let b = t.leaf(logits_of(&[0.5, 0.5]), true);
        let la = confusion_loss_ce(&mut t, a);
        let lb = confusion_loss_ce(&mut t, b);
        let m1 = secondary_confusion_loss(&mut t, &[a], ConfusionVariant::Ce).unwrap();
        assert_eq!(t.scalar(m1), t.scalar(la));
        let m2 = secondary_confusion_loss(&mut t, &[a, b], ConfusionVariant::Ce).unwrap();
        assert!((t.scalar(m2) - (t.scalar(la) + t.scalar(lb)) / 2.0).abs() < 1e-15);
        let u1 = t.leaf(Matrix::zeros((2, 4)), true);
        let u2 = t.leaf(Matrix::zeros((3, 4)), true);
        let mu = secondary_confusion_loss(&mut t, &[u1, u2], ConfusionVariant::Ce).unwrap();
        assert!((t.scalar(mu) - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            secondary_confusion_loss(&mut t, &[], ConfusionVariant::Ce),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn joint_loss_arithmetic() {
        let mut t = Tape::new();
        let lp = t.leaf(array![[1.0]], true);
        let lc = t.leaf(array![[2.0]], true);
        let j = joint_loss(&mut t, lp, lc, 0.1).unwrap();
        assert!((t.scalar(j) - 1.2).abs() < 1e-15);
        let j0 = joint_loss(&mut t, lp, lc, 0.0).unwrap();
        assert_eq!(t.scalar(j0), 1.0);
    }

    #[test]
    fn class_weight_cases() {
        let w = ClassWeights::from_labels(&[0, 1, 2, 0, 1, 2], 3).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 1.0, 1.0]);
        let w = ClassWeights::from_labels(&[0, 0, 0, 1], 2).unwrap();
        assert!((w.as_slice()[0] - 0.5).abs() < 1e-15);
        assert!((w.as_slice()[1] - 1.5).abs() < 1e-15);
        assert!(matches!(
            ClassWeights::from_labels(&[1, 1, 1], 2),
            Err(Error::Data(_))
        ));
        assert!(ClassWeights::new(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn loss_weight_validation() {
        assert!(LossWeights { alpha: 0.1, betas: vec![1.0] }.validate().is_ok());
        assert!(LossWeights { alpha: -0.1, betas: vec![] }.validate().is_err());
        assert!(LossWeights { alpha: 0.1, betas: vec![f64::NAN] }.validate().is_err());
    }
}
