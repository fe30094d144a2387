//! Accuracy variants, rescaled scores, prediction-distribution divergence
//! and embedding projection.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::autodiff::Matrix;
use crate::datagen::LabeledDataset;
use crate::error::{Error, Result};

/// Additive smoothing applied before taking the KL divergence.
pub const KL_SMOOTHING: f64 = 1e-6;

fn check_lengths(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean over classes of per-class recall.
pub fn mean_class_accuracy(preds: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    check_lengths(preds, labels)?;
    let mut hit = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if l >= classes {
            return Err(Error::Data(format!("label {l} out of range for {classes} classes")));
        }
        total[l] += 1;
        if p == l {
            hit[l] += 1;
        }
    }
    if let Some(k) = total.iter().position(|&t| t == 0) {
        return Err(Error::Data(format!("class {k} absent from labels")));
    }
    let sum: f64 = hit
        .iter()
        .zip(&total)
        .map(|(&h, &t)| h as f64 / t as f64)
        .sum();
    Ok(sum / classes as f64)
}

/// Fraction of predictions at most one ordinal class away from the label.
pub fn adjacent_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(&p, &l)| p.abs_diff(l) <= 1).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `a = 1 − e / e_max` with `e_max = 1 − 1/K`: 1 is perfect, 0 is chance.
pub fn rescaled_score(mean_class_error: f64, classes: usize) -> f64 {
    let e_max = 1.0 - 1.0 / classes as f64;
    1.0 - mean_class_error / e_max
}

/// Share of the baseline's above-chance score removed by unlearning, in percent.
///
/// `None` when the baseline itself is at or below chance.
pub fn percent_unlearned(baseline_score: f64, blind_score: f64) -> Option<f64> {
    if !(baseline_score > 0.0) {
        return None;
    }
    Some((100.0 * (baseline_score - blind_score) / baseline_score).min(100.0))
}

/// Normalized histogram of `preds` over `classes` for samples where `mask` holds.
pub fn prediction_distribution(preds: &[usize], mask: &[bool], classes: usize) -> Result<Vec<f64>> {
    if preds.len() != mask.len() {
        return Err(Error::Data("group mask length differs from predictions".into()));
    }
    let mut hist = vec![0usize; classes];
    let mut n = 0usize;
    for (&p, _) in preds.iter().zip(mask).filter(|(_, &m)| m) {
        if p >= classes {
            return Err(Error::Data(format!("prediction {p} out of range")));
        }
        hist[p] += 1;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("empty group".into()));
    }
    Ok(hist.into_iter().map(|c| c as f64 / n as f64).collect())
}

fn smooth(p: &[f64]) -> Vec<f64> {
    let total: f64 = p.iter().map(|v| v + KL_SMOOTHING).sum();
    p.iter().map(|v| (v + KL_SMOOTHING) / total).collect()
}

/// `Σ p_k ln(p_k / q_k)` after additive smoothing of both arguments.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Data(format!(
            "distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    let (p, q) = (smooth(p), smooth(q));
    let kl: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
    Ok(kl.max(0.0))
}

/// Projects rows onto the top two principal components.
///
/// Components are sign-fixed so their largest-magnitude coordinate is positive.
pub fn project_embeddings(embeddings: &Matrix) -> Result<Matrix> {
    let (n, d) = embeddings.dim();
    if n < 2 || d < 2 {
        return Err(Error::Data(format!(
            "projection needs at least 2 rows and 2 columns, got {n} x {d}"
        )));
    }
    let mean = embeddings.mean_axis(ndarray::Axis(0)).expect("n >= 2");
    let centered = embeddings - &mean;
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = top * 1e-10 + f64::MIN_POSITIVE;
    let rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > tol)
        .count();
    if rank < 2 {
        return Err(Error::Degenerate { rank });
    }
    let mut basis = Matrix::zeros((d, 2));
    for (c, &i) in order.iter().take(2).enumerate() {
        let v = eig.eigenvectors.column(i);
        let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for r in 0..d {
            basis[[r, c]] = sign * v[r];
        }
    }
    Ok(centered.dot(&basis))
}

/// Writes `pc1,pc2,e0..e{d-1},y_primary,y_<task>...`.
pub fn write_embeddings(
    embeddings: &Matrix,
    projection: &Matrix,
    ds: &LabeledDataset,
    w: &mut impl Write,
) -> std::io::Result<()> {
    let mut header = vec!["pc1".to_string(), "pc2".to_string()];
    header.extend((0..embeddings.ncols()).map(|j| format!("e{j}")));
    header.push("y_primary".into());
    header.extend(ds.spurious.iter().map(|t| format!("y_{}", t.name)));
    writeln!(w, "{}", header.join(","))?;
    for i in 0..embeddings.nrows() {
        let mut row: Vec<String> = projection.row(i).iter().map(|v| format!("{v:?}")).collect();
        row.extend(embeddings.row(i).iter().map(|v| format!("{v:?}")));
        row.push(ds.primary.labels[i].to_string());
        row.extend(ds.spurious.iter().map(|t| t.labels[i].to_string()));
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()
}

/// Probe results for one spurious task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskMetrics {
    pub name: String,
    pub classes: usize,
    /// Mean-class accuracy of a fresh linear probe on the embedding.
    pub probe_accuracy: f64,
    pub rescaled_score: f64,
    /// Filled in only when a baseline is available for comparison.
    pub percent_unlearned: Option<f64>,
}

/// KL between primary prediction distributions of two groups of a spurious task.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupKl {
    pub task: String,
    pub a: usize,
    pub b: usize,
    pub value: f64,
}

impl GroupKl {
    pub fn column(&self) -> String {
        format!("kl_{}_{}_{}", self.task, self.a, self.b)
    }
}

/// One evaluation snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub primary_accuracy: f64,
    pub primary_adjacent_accuracy: f64,
    pub loss_primary: f64,
    pub loss_confusion: f64,
    pub tasks: Vec<TaskMetrics>,
    pub kl: Vec<GroupKl>,
}

impl MetricsRecord {
    pub fn csv_header(&self) -> String {
        let mut cols: Vec<String> = [
            "epoch",
            "primary_acc",
            "primary_adj_acc",
            "loss_primary",
            "loss_confusion",
        ]
        .map(String::from)
        .to_vec();
        for t in &self.tasks {
            cols.push(format!("probe_acc_{}", t.name));
            cols.push(format!("rescaled_{}", t.name));
        }
        cols.extend(self.kl.iter().map(GroupKl::column));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let f = |v: f64| format!("{v:.6}");
        let mut cols = vec![
            self.epoch.to_string(),
            f(self.primary_accuracy),
            f(self.primary_adjacent_accuracy),
            f(self.loss_primary),
            f(self.loss_confusion),
        ];
        for t in &self.tasks {
            cols.push(f(t.probe_accuracy));
            cols.push(f(t.rescaled_score));
        }
        cols.extend(self.kl.iter().map(|k| f(k.value)));
        cols.join(",")
    }

    pub fn is_finite(&self) -> bool {
        [
            self.primary_accuracy,
            self.primary_adjacent_accuracy,
            self.loss_primary,
            self.loss_confusion,
        ]
        .iter()
        .chain(self.tasks.iter().flat_map(|t| [&t.probe_accuracy, &t.rescaled_score]))
        .chain(self.kl.iter().map(|k| &k.value))
        .all(|v| v.is_finite())
    }

    /// Mean of all group-pair KL values (0 when there are none).
    pub fn mean_kl(&self) -> f64 {
        if self.kl.is_empty() {
            0.0
        } else {
            self.kl.iter().map(|k| k.value).sum::<f64>() / self.kl.len() as f64
        }
    }
}

/// Renders a history as CSV text (header plus one row per record).
pub fn metrics_csv(history: &[MetricsRecord]) -> String {
    let mut out = String::new();
    if let Some(first) = history.first() {
        out.push_str(&first.csv_header());
        out.push('\n');
    }
    for r in history {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Group-pair KL of primary predictions for every pair of labels `a < b`
/// of every spurious task in `ds`.
pub fn group_kls(preds: &[usize], ds: &LabeledDataset) -> Result<Vec<GroupKl>> {
    let k = ds.primary.classes;
    let mut out = Vec::new();
    for task in &ds.spurious {
        let dists: Vec<Option<Vec<f64>>> = (0..task.classes)
            .map(|g| {
                let mask: Vec<bool> = task.labels.iter().map(|&l| l == g).collect();
                prediction_distribution(preds, &mask, k).ok()
            })
            .collect();
        for a in 0..task.classes {
            for b in a + 1..task.classes {
                if let (Some(pa), Some(pb)) = (&dists[a], &dists[b]) {
                    out.push(GroupKl {
                        task: task.name.clone(),
                        a,
                        b,
                        value: kl_divergence(pa, pb)?,
                    });
                }
            }
        }
    }
    Ok(out)
}
