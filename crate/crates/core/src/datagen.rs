//! Seeded synthetic datasets with controllable label correlations.
//!
//! Every sample carries one label per task (the first task is the primary
//! one). Features follow an additive-centroid Gaussian model
//!
//! ```text
//! x = Σ_t signal_scale_t · centroid_t[label_t] + σ ε,   ε ~ N(0, I)
//! ```
//!
//! and labels are drawn from a joint probability table over label tuples,
//! which is where the bias lives.

use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

/// Fixed seed for the Monte-Carlo Bayes oracle.
pub const ORACLE_SEED: u64 = 0x0B1A5_0AC1E;
pub const ORACLE_SAMPLES: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Placement of a task's class centroids in input space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CentroidLayout {
    /// Random Gaussian directions, centered across classes and scaled to unit norm.
    Random,
    /// Evenly spaced on a random line from -u to +u, so adjacent classes are close.
    Ordinal,
    /// Explicit K × input_dim rows.
    Explicit { rows: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub classes: usize,
    pub signal_scale: f64,
    #[serde(default = "default_layout")]
    pub layout: CentroidLayout,
}

fn default_layout() -> CentroidLayout {
    CentroidLayout::Random
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtremeBias {
    Eb1,
    Eb2,
}

/// How a split's joint label table is built from the task list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum JointSpec {
    /// Independent, uniform labels.
    Uniform,
    /// Uniform primary; each secondary task follows the primary with strength
    /// `rho[m]` (see [`biased_joint_multi`]).
    Biased { rho: Vec<f64> },
    /// Disjoint support between a buffered ordinal task and a binary task.
    /// Requires exactly two tasks.
    ExtremeBias {
        variant: ExtremeBias,
        buffered_task: String,
    },
    /// Explicit row-major table over the task label tuple.
    Table { probs: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub input_dim: usize,
    /// First task is primary, the rest are spurious.
    pub tasks: Vec<TaskSpec>,
    pub noise_sigma: f64,
    #[serde(default)]
    pub centroid_seed: u64,
    pub train_joint: JointSpec,
    #[serde(default = "uniform_joint")]
    pub test_joint: JointSpec,
}

fn uniform_joint() -> JointSpec {
    JointSpec::Uniform
}

/// Probability table over label tuples, row-major in task order.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTable {
    dims: Vec<usize>,
    probs: Vec<f64>,
}

impl JointTable {
    pub fn new(dims: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        let cells: usize = dims.iter().product();
        if dims.is_empty() || cells != probs.len() {
            return Err(Error::Config(format!(
                "joint table for dims {dims:?} needs {cells} entries, got {}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Config("joint table has negative or non-finite entries".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("joint table sums to {total}, not 1")));
        }
        Ok(Self { dims, probs })
    }

    pub fn uniform(dims: &[usize]) -> Self {
        let cells: usize = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            probs: vec![1.0 / cells as f64; cells],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn cells(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, labels: &[usize]) -> f64 {
        self.probs[self.index_of(labels)]
    }

    pub fn index_of(&self, labels: &[usize]) -> usize {
        labels
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&l, &d)| acc * d + l)
    }

    pub fn labels_of(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.dims.len()];
        for (slot, &d) in out.iter_mut().zip(&self.dims).rev() {
            *slot = index % d;
            index /= d;
        }
        out
    }

    pub fn marginal(&self, axis: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.dims[axis]];
        for (i, &p) in self.probs.iter().enumerate() {
            m[self.labels_of(i)[axis]] += p;
        }
        m
    }

    /// Swaps the two axes of a 2-task table.
    pub fn transpose(&self) -> Result<Self> {
        let [a, b] = self.dims[..] else {
            return Err(Error::Config("transpose needs a two-task table".into()));
        };
        let mut probs = vec![0.0; a * b];
        for i in 0..a {
            for j in 0..b {
                probs[j * a + i] = self.probs[i * b + j];
            }
        }
        Ok(Self {
            dims: vec![b, a],
            probs,
        })
    }

    pub fn total_variation(&self, other: &JointTable) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

/// `P(y, s) = rho · [s = map(y)] / K_p + (1 − rho) / (K_p K_s)` with
/// `map(y) = ⌊y K_s / K_p⌋` (the identity when `K_p == K_s`).
pub fn biased_joint(rho: f64, kp: usize, ks: usize) -> Result<JointTable> {
    biased_joint_multi(kp, &[(ks, rho)])
}

/// Uniform primary with each secondary task conditionally independent given
/// the primary label, following it with strength `rho`.
pub fn biased_joint_multi(kp: usize, secondary: &[(usize, f64)]) -> Result<JointTable> {
    if kp < 2 || secondary.iter().any(|&(k, _)| k < 2) {
        return Err(Error::Config("every task needs at least 2 classes".into()));
    }
    if let Some(&(_, rho)) = secondary.iter().find(|(_, r)| !(0.0..=1.0).contains(r)) {
        return Err(Error::Config(format!("rho must lie in [0, 1], got {rho}")));
    }
    let mut dims = vec![kp];
    dims.extend(secondary.iter().map(|&(k, _)| k));
    let mut table = JointTable::uniform(&dims);
    for i in 0..table.cells() {
        let labels = table.labels_of(i);
        let y = labels[0];
        let mut p = 1.0 / kp as f64;
        for (&s, &(ks, rho)) in labels[1..].iter().zip(secondary) {
            let hit = if s == y * ks / kp { 1.0 } else { 0.0 };
            p *= rho * hit + (1.0 - rho) / ks as f64;
        }
        table.probs[i] = p;
    }
    Ok(table)
}

/// Disjoint-support table over (ordinal task with `kp ≥ 3` classes, binary task).
///
/// The middle ordinal class `(kp − 1) / 2` is a buffer with zero mass. EB1
/// pairs binary class 0 with the classes below the buffer and class 1 with
/// those above; EB2 swaps them. Each binary class carries half the mass.
pub fn extreme_bias_joint(variant: ExtremeBias, kp: usize, ks: usize) -> Result<JointTable> {
    if kp < 3 {
        return Err(Error::Config(format!(
            "extreme bias needs at least 3 ordinal classes (low, buffer, high), got {kp}"
        )));
    }
    if ks != 2 {
        return Err(Error::Config(format!("extreme bias needs a binary task, got {ks} classes")));
    }
    let buffer = (kp - 1) / 2;
    let low = buffer;
    let high = kp - buffer - 1;
    let mut probs = vec![0.0; kp * 2];
    for y in 0..kp {
        let (s, share) = match y.cmp(&buffer) {
            std::cmp::Ordering::Less => (0, 0.5 / low as f64),
            std::cmp::Ordering::Greater => (1, 0.5 / high as f64),
            std::cmp::Ordering::Equal => continue,
        };
        let s = match variant {
            ExtremeBias::Eb1 => s,
            ExtremeBias::Eb2 => 1 - s,
        };
        probs[y * 2 + s] = share;
    }
    JointTable::new(vec![kp, 2], probs)
}

/// Index of the buffer (zero-mass) class for an extreme-bias ordinal task.
pub fn buffer_class(kp: usize) -> usize {
    (kp - 1) / 2
}

impl SyntheticSpec {
    pub fn dims(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.classes).collect()
    }

    pub fn task_index(&self, name: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::Config(format!("unknown task '{name}'")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task (the primary) is required".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma {} invalid", self.noise_sigma)));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if t.classes < 2 {
                return Err(Error::Config(format!("task '{}' needs at least 2 classes", t.name)));
            }
            if !t.signal_scale.is_finite() {
                return Err(Error::Config(format!("task '{}' signal_scale not finite", t.name)));
            }
            if t.name.is_empty() || t.name == "primary" || t.name.contains([',', '"', '\n']) {
                return Err(Error::Config(format!("invalid task name '{}'", t.name)));
            }
            if self.tasks[..i].iter().any(|o| o.name == t.name) {
                return Err(Error::Config(format!("duplicate task name '{}'", t.name)));
            }
        }
        self.centroids()?;
        self.joint(Split::Train)?;
        self.joint(Split::Test)?;
        Ok(())
    }

    /// Per-task K × input_dim centroid matrices, deterministic in `centroid_seed`.
    pub fn centroids(&self) -> Result<Vec<Matrix>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.centroid_seed);
        let d = self.input_dim;
        self.tasks
            .iter()
            .map(|t| {
                let k = t.classes;
                let m = match &t.layout {
                    CentroidLayout::Random => {
                        let mut m: Matrix = Matrix::from_shape_simple_fn((k, d), || {
                            StandardNormal.sample(&mut rng)
                        });
                        let mean = m.mean_axis(ndarray::Axis(0)).expect("k >= 2");
                        m -= &mean;
                        for mut row in m.rows_mut() {
                            let norm = row.dot(&row).sqrt();
                            if norm > 0.0 {
                                row /= norm;
                            }
                        }
                        m
                    }
                    CentroidLayout::Ordinal => {
                        let mut u: Vec<f64> =
                            (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                        u.iter_mut().for_each(|v| *v /= norm);
                        Matrix::from_shape_fn((k, d), |(c, j)| {
                            (2.0 * c as f64 / (k - 1) as f64 - 1.0) * u[j]
                        })
                    }
                    CentroidLayout::Explicit { rows } => {
                        if rows.len() != k || rows.iter().any(|r| r.len() != d) {
                            return Err(Error::Config(format!(
                                "task '{}' explicit centroids must be {k} x {d}",
                                t.name
                            )));
                        }
                        Matrix::from_shape_fn((k, d), |(c, j)| rows[c][j])
                    }
                };
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config(format!("task '{}' centroids not finite", t.name)));
                }
                Ok(m * t.signal_scale)
            })
            .collect()
    }

    pub fn joint(&self, split: Split) -> Result<JointTable> {
        let spec = match split {
            Split::Train => &self.train_joint,
            Split::Test => &self.test_joint,
        };
        let dims = self.dims();
        match spec {
            JointSpec::Uniform => Ok(JointTable::uniform(&dims)),
            JointSpec::Biased { rho } => {
                if rho.len() != dims.len() - 1 {
                    return Err(Error::Config(format!(
                        "biased joint needs one rho per spurious task ({}), got {}",
                        dims.len() - 1,
                        rho.len()
                    )));
                }
                let sec: Vec<(usize, f64)> = dims[1..].iter().copied().zip(rho.clone()).collect();
                biased_joint_multi(dims[0], &sec)
            }
            JointSpec::ExtremeBias {
                variant,
                buffered_task,
            } => {
                if dims.len() != 2 {
                    return Err(Error::Config("extreme bias needs exactly two tasks".into()));
                }
                match self.task_index(buffered_task)? {
                    0 => extreme_bias_joint(*variant, dims[0], dims[1]),
                    _ => extreme_bias_joint(*variant, dims[1], dims[0])?.transpose(),
                }
            }
            JointSpec::Table { probs } => JointTable::new(dims, probs.clone()),
        }
    }

    /// Mean input vector for one label tuple.
    fn cell_means(&self, centroids: &[Matrix], table: &JointTable) -> Matrix {
        let mut means = Matrix::zeros((table.cells(), self.input_dim));
        for i in 0..table.cells() {
            let labels = table.labels_of(i);
            let mut row = means.row_mut(i);
            for (c, &l) in centroids.iter().zip(&labels) {
                row += &c.row(l);
            }
        }
        means
    }
}

/// Labels of one task over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskLabels {
    pub name: String,
    pub classes: usize,
    pub labels: Vec<usize>,
}

/// Features plus primary and spurious labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub x: Matrix,
    pub primary: TaskLabels,
    pub spurious: Vec<TaskLabels>,
}

/// Features with the labels of a single task, as used to train one head.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub x: Matrix,
    pub task: TaskLabels,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn task(&self, name: &str) -> Option<&TaskLabels> {
        std::iter::once(&self.primary)
            .chain(&self.spurious)
            .find(|t| t.name == name)
    }

    pub fn spurious_names(&self) -> Vec<String> {
        self.spurious.iter().map(|t| t.name.clone()).collect()
    }

    pub fn task_dataset(&self, name: &str) -> Result<TaskDataset> {
        let task = self
            .task(name)
            .ok_or_else(|| Error::Data(format!("dataset has no task '{name}'")))?;
        Ok(TaskDataset {
            x: self.x.clone(),
            task: task.clone(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        for t in std::iter::once(&self.primary).chain(&self.spurious) {
            if t.labels.len() != n {
                return Err(Error::Data(format!(
                    "task '{}' has {} labels for {n} samples",
                    t.name,
                    t.labels.len()
                )));
            }
            if let Some(&bad) = t.labels.iter().find(|&&l| l >= t.classes) {
                return Err(Error::Data(format!(
                    "task '{}' label {bad} out of range for {} classes",
                    t.name, t.classes
                )));
            }
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(())
    }
}

fn build_dataset(
    spec: &SyntheticSpec,
    cells: &[usize],
    table: &JointTable,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledDataset> {
    let centroids = spec.centroids()?;
    let means = spec.cell_means(&centroids, table);
    let n = cells.len();
    let d = spec.input_dim;
    let mut x = Matrix::zeros((n, d));
    for (i, &cell) in cells.iter().enumerate() {
        for j in 0..d {
            let eps: f64 = StandardNormal.sample(rng);
            x[[i, j]] = means[[cell, j]] + spec.noise_sigma * eps;
        }
    }
    let mut tasks: Vec<TaskLabels> = spec
        .tasks
        .iter()
        .map(|t| TaskLabels {
            name: t.name.clone(),
            classes: t.classes,
            labels: Vec::with_capacity(n),
        })
        .collect();
    for &cell in cells {
        for (t, l) in tasks.iter_mut().zip(table.labels_of(cell)) {
            t.labels.push(l);
        }
    }
    let primary = tasks.remove(0);
    Ok(LabeledDataset {
        x,
        primary,
        spurious: tasks,
    })
}

/// Draws `n` samples with labels from the split's joint table.
pub fn sample_dataset(
    spec: &SyntheticSpec,
    n: usize,
    split: Split,
    seed: u64,
) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    spec.validate()?;
    let table = spec.joint(split)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = WeightedIndex::new(table.probs())
        .map_err(|e| Error::Config(format!("joint table unusable: {e}")))?;
    let cells: Vec<usize> = (0..n).map(|_| dist.sample(&mut rng)).collect();
    build_dataset(spec, &cells, &table, &mut rng)
}

/// Independent uniform labels with exactly `n / cells` samples per label tuple.
pub fn balanced_test(spec: &SyntheticSpec, n: usize, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let table = JointTable::uniform(&spec.dims());
    let cells = table.cells();
    if n == 0 || !n.is_multiple_of(cells) {
        return Err(Error::Config(format!(
            "balanced test size {n} must be a positive multiple of {cells} label cells"
        )));
    }
    let mut order: Vec<usize> = (0..n).map(|i| i % cells).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    build_dataset(spec, &order, &table, &mut rng)
}

/// Monte-Carlo accuracy of the Bayes-optimal classifier for `task` under the
/// split's joint, using the exact class-conditional Gaussian mixtures.
pub fn bayes_oracle_accuracy(spec: &SyntheticSpec, task: &str, split: Split) -> Result<f64> {
    let t = spec.task_index(task)?;
    let ds = sample_dataset(spec, ORACLE_SAMPLES, split, ORACLE_SEED)?;
    let table = spec.joint(split)?;
    let centroids = spec.centroids()?;
    let means = spec.cell_means(&centroids, &table);
    let k = spec.tasks[t].classes;
    let truth = if t == 0 {
        &ds.primary.labels
    } else {
        &ds.spurious[t - 1].labels
    };
    let cell_labels: Vec<usize> = (0..table.cells()).map(|c| table.labels_of(c)[t]).collect();
    let live: Vec<usize> = (0..table.cells()).filter(|&c| table.probs()[c] > 0.0).collect();
    let sigma2 = spec.noise_sigma * spec.noise_sigma;

    let mut correct = 0usize;
    let mut scores = vec![f64::NEG_INFINITY; k];
    for (i, &y) in truth.iter().enumerate() {
        let x = ds.x.row(i);
        scores.fill(f64::NEG_INFINITY);
        for &c in &live {
            let diff = &x - &means.row(c);
            let d2 = diff.dot(&diff);
            let log_p = table.probs()[c].ln();
            let s = if sigma2 > 0.0 {
                log_p - d2 / (2.0 * sigma2)
            } else if d2 < 1e-18 {
                log_p
            } else {
                f64::NEG_INFINITY
            };
            let slot = &mut scores[cell_labels[c]];
            *slot = log_add_exp(*slot, s);
        }
        let mut best = 0;
        for c in 1..k {
            if scores[c] > scores[best] {
                best = c;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / truth.len() as f64)
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Writes `f0..f{d-1},y_primary,y_<task>...` with shortest round-trip floats.
pub fn export_dataset(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_dataset(ds, &mut w).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(ds: &LabeledDataset, w: &mut impl Write) -> std::io::Result<()> {
    let mut header: Vec<String> = (0..ds.input_dim()).map(|j| format!("f{j}")).collect();
    header.push("y_primary".into());
    header.extend(ds.spurious.iter().map(|t| format!("y_{}", t.name)));
    writeln!(w, "{}", header.join(","))?;
    for i in 0..ds.len() {
        let mut fields: Vec<String> = ds.x.row(i).iter().map(|v| format!("{v:?}")).collect();
        fields.push(ds.primary.labels[i].to_string());
        fields.extend(ds.spurious.iter().map(|t| t.labels[i].to_string()));
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()
}

/// Reads a dataset CSV. Class counts are inferred as `max(label) + 1` (at least 2);
/// the primary task is named `primary`.
pub fn import_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(file)
}

pub fn read_dataset(input: impl std::io::Read) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let parse_err = |e: csv::Error| {
        let line = e.position().map_or(0, |p| p.line());
        Error::Parse {
            line,
            msg: e.to_string(),
        }
    };
    let headers = rdr.headers().map_err(parse_err)?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Parse {
            line: 1,
            msg: "empty file, expected a header row".into(),
        });
    }
    let d = headers.iter().take_while(|h| h.starts_with('f')).count();
    for (j, h) in headers.iter().take(d).enumerate() {
        if h != format!("f{j}") {
            return Err(Error::Parse {
                line: 1,
                msg: format!("feature column {j} is named '{h}', expected 'f{j}'"),
            });
        }
    }
    if d == 0 {
        return Err(Error::Parse {
            line: 1,
            msg: "no feature columns f0..".into(),
        });
    }
    if headers.get(d) != Some("y_primary") {
        return Err(Error::Parse {
            line: 1,
            msg: format!("missing label column 'y_primary' after {d} feature columns"),
        });
    }
    let mut names = vec!["primary".to_string()];
    for h in headers.iter().skip(d + 1) {
        match h.strip_prefix("y_") {
            Some(n) if !n.is_empty() => names.push(n.to_string()),
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("unexpected column '{h}', label columns must be y_<task>"),
                })
            }
        }
    }

    let mut feats = Vec::new();
    let mut labels: Vec<Vec<usize>> = vec![Vec::new(); names.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(parse_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != headers.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        for (j, field) in rec.iter().enumerate() {
            if j < d {
                let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("bad number '{field}' in column {}", &headers[j]),
                })?;
                feats.push(v);
            } else {
                let l: usize = field.trim().parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("bad label '{field}' in column {}", &headers[j]),
                })?;
                labels[j - d].push(l);
            }
        }
    }
    let n = labels[0].len();
    if n == 0 {
        return Err(Error::Parse {
            line: 2,
            msg: "no data rows".into(),
        });
    }
    let x = Matrix::from_shape_vec((n, d), feats).expect("row lengths checked");
    let mut tasks: Vec<TaskLabels> = names
        .into_iter()
        .zip(labels)
        .map(|(name, labels)| TaskLabels {
            name,
            classes: labels.iter().max().map_or(2, |&m| (m + 1).max(2)),
            labels,
        })
        .collect();
    let primary = tasks.remove(0);
    Ok(LabeledDataset {
        x,
        primary,
        spurious: tasks,
    })
}
