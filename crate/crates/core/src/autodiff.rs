//! Tape-based reverse-mode differentiation over dense 2-D arrays.
//!
//! Every operation appends a node to a [`Tape`] and returns a [`Var`]
//! handle. Calling [`Tape::backward`] on a 1×1 node walks the tape in
//! reverse and adds each node's adjoint into its stored gradient, so
//! repeated calls accumulate until [`Tape::zero_grads`].
//!
//! Persistent model weights live outside any tape as [`Parameter`]s.
//! A forward pass copies them onto the tape as leaves; after `backward`
//! the leaf gradients are folded back with [`Parameter::accumulate`].
//!
//! ```
//! use jlu::autodiff::Tape;
//! use ndarray::array;
//!
//! let mut tape = Tape::new();
//! let a = tape.leaf(array![[1.0, 2.0], [3.0, 4.0]], true);
//! let b = tape.constant(array![[1.0], [1.0]]);
//! let y = tape.matmul(a, b).unwrap();
//! let s = tape.sum(y);
//! tape.backward(s).unwrap();
//! assert_eq!(tape.value(y), &array![[3.0], [7.0]]);
//! assert_eq!(tape.grad(a), &array![[1.0, 1.0], [1.0, 1.0]]);
//! ```

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Elementwise product with a constant matrix held in the node.
    MaskedBy(Var, Matrix),
    Relu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::MaskedBy(a, _)
            | Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::Sum(a) => vec![*a],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MaskedBy(..) => "masked_by",
            Op::Relu(..) => "relu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::Sum(..) => "sum",
        }
    }
}

/// One recorded value together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct TensorNode {
    value: Matrix,
    grad: Matrix,
    op: Op,
    requires_grad: bool,
}

impl TensorNode {
    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }

    pub fn value(&self) -> &Matrix {
        &self.value
    }

    pub fn grad(&self) -> &Matrix {
        &self.grad
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Name of the producing operation ("leaf" for inputs).
    pub fn op_name(&self) -> &'static str {
        self.op.name()
    }

    pub fn inputs(&self) -> Vec<Var> {
        self.op.inputs()
    }
}

/// Execution-ordered record of a forward computation.
///
/// Nodes are only ever appended, and every op refers to earlier nodes, so
/// the tape is topologically sorted by construction.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<TensorNode>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &TensorNode {
        &self.nodes[v.0]
    }

    pub fn nodes(&self) -> &[TensorNode] {
        &self.nodes
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let grad = Matrix::zeros(value.dim());
        self.nodes.push(TensorNode {
            value,
            grad,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        let grad = Matrix::zeros(value.dim());
        self.nodes.push(TensorNode {
            value,
            grad,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    /// Copies a parameter onto the tape. Frozen parameters become constants.
    pub fn param(&mut self, p: &Parameter) -> Var {
        self.leaf(p.value.clone(), !p.frozen)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let value = self.value(a).dot(self.value(b));
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Adds a 1×cols bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.0 != 1 || sb.1 != sx.1 {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let value = self.value(x) + self.value(b);
        Ok(self.push(value, Op::AddBias(x, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a) + self.value(b);
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a) * self.value(b);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    /// Elementwise product with a constant mask (no gradient flows to it).
    pub fn masked_by(&mut self, a: Var, mask: Matrix) -> Result<Var> {
        if self.shape(a) != mask.dim() {
            return Err(Error::Dimension {
                op: "masked_by",
                lhs: self.shape(a),
                rhs: mask.dim(),
            });
        }
        let value = self.value(a) * &mask;
        Ok(self.push(value, Op::MaskedBy(a, mask)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn softmax_rows(&mut self, logits: Var) -> Var {
        let value = softmax_rows(self.value(logits));
        self.push(value, Op::SoftmaxRows(logits))
    }

    pub fn log_softmax_rows(&mut self, logits: Var) -> Var {
        let value = log_softmax_rows(self.value(logits));
        self.push(value, Op::LogSoftmaxRows(logits))
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::from_elem((1, 1), s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(())
    }

    /// Back-propagates from a scalar output, adding into every node's
    /// gradient that requires one.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.shape(output) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 output, got {:?}",
                self.shape(output)
            )));
        }
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        let mut adjoints: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        adjoints[output.0] = Some(Matrix::ones((1, 1)));

        for i in (0..=output.0).rev() {
            let Some(adj) = adjoints[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let send = |v: Var, g: Matrix, adjoints: &mut Vec<Option<Matrix>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut adjoints[v.0] {
                    Some(acc) => *acc += &g,
                    slot => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = adj.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&adj);
                    send(*a, ga, &mut adjoints);
                    send(*b, gb, &mut adjoints);
                }
                Op::AddBias(x, b) => {
                    let gb = adj.sum_axis(Axis(0)).insert_axis(Axis(0));
                    send(*b, gb, &mut adjoints);
                    send(*x, adj.clone(), &mut adjoints);
                }
                Op::Add(a, b) => {
                    send(*a, adj.clone(), &mut adjoints);
                    send(*b, adj.clone(), &mut adjoints);
                }
                Op::Mul(a, b) => {
                    let ga = &adj * &self.nodes[b.0].value;
                    let gb = &adj * &self.nodes[a.0].value;
                    send(*a, ga, &mut adjoints);
                    send(*b, gb, &mut adjoints);
                }
                Op::Scale(a, c) => send(*a, &adj * *c, &mut adjoints),
                Op::MaskedBy(a, mask) => send(*a, &adj * mask, &mut adjoints),
                Op::Relu(x) => {
                    let mut g = adj.clone();
                    Zip::from(&mut g)
                        .and(&self.nodes[x.0].value)
                        .for_each(|g, &v| {
                            if v <= 0.0 {
                                *g = 0.0;
                            }
                        });
                    send(*x, g, &mut adjoints);
                }
                Op::SoftmaxRows(x) => {
                    // dx = y * (dy - rowsum(dy * y))
                    let y = &node.value;
                    let dots = (&adj * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let g = y * &(&adj - &dots);
                    send(*x, g, &mut adjoints);
                }
                Op::LogSoftmaxRows(x) => {
                    // dx = dy - softmax(x) * rowsum(dy)
                    let p = node.value.mapv(f64::exp);
                    let sums = adj.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let g = &adj - &(&p * &sums);
                    send(*x, g, &mut adjoints);
                }
                Op::Sum(a) => {
                    let g = Matrix::from_elem(self.shape(*a), adj[[0, 0]]);
                    send(*a, g, &mut adjoints);
                }
            }
            self.nodes[i].grad += &adj;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad.fill(0.0);
        }
    }
}

/// A persistent trainable matrix (a weight or bias) owned by a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Matrix,
    pub grad: Matrix,
    pub frozen: bool,
}

impl Parameter {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.dim());
        Self {
            value,
            grad,
            frozen: false,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }

    /// Adds the gradient recorded for this parameter's leaf on `tape`.
    pub fn accumulate(&mut self, tape: &Tape, leaf: Var) {
        if !self.frozen {
            self.grad += tape.grad(leaf);
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Plain gradient descent: `value -= lr * grad` on every unfrozen parameter.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Parameter>, lr: f64) {
    for p in params {
        if p.frozen {
            continue;
        }
        p.value.scaled_add(-lr, &p.grad);
    }
}

pub fn zero_grads<'a>(params: impl IntoIterator<Item = &'a mut Parameter>) {
    for p in params {
        p.zero_grad();
    }
}

/// Central-difference estimate of `df/dp`, one element at a time.
pub fn finite_diff_grad(mut f: impl FnMut(&Matrix) -> f64, p: &Matrix, step: f64) -> Matrix {
    assert!(step > 0.0, "finite difference step must be positive");
    let mut probe = p.clone();
    let mut out = Matrix::zeros(p.dim());
    for idx in 0..p.len() {
        let (r, c) = (idx / p.ncols(), idx % p.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + step;
        let up = f(&probe);
        probe[[r, c]] = orig - step;
        let down = f(&probe);
        probe[[r, c]] = orig;
        out[[r, c]] = (up - down) / (2.0 * step);
    }
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = log_softmax_rows(logits);
    out.mapv_inplace(f64::exp);
    out
}

/// Row-wise log-softmax via log-sum-exp.
pub fn log_softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut t = Tape::new();
        let i = t.constant(Matrix::eye(2));
        let m = t.constant(array![[1.5, -2.0], [0.25, 4.0]]);
        let r = t.matmul(i, m).unwrap();
        assert_eq!(t.value(r), t.value(m));

        let a = t.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = t.constant(array![[1.0], [1.0]]);
        let r = t.matmul(a, b).unwrap();
        assert_eq!(t.value(r), &array![[3.0], [7.0]]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros((2, 3)));
        let b = t.constant(Matrix::zeros((2, 3)));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(err, Error::Dimension { lhs: (2, 3), rhs: (2, 3), .. }));
    }

    #[test]
    fn add_bias_cases() {
        let mut t = Tape::new();
        let x = t.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let zero = t.constant(Matrix::zeros((1, 2)));
        let same = t.add_bias(x, zero).unwrap();
        assert_eq!(t.value(same), t.value(x));

        let b = t.leaf(array![[10.0, 20.0]], true);
        let r = t.add_bias(x, b).unwrap();
        assert_eq!(t.value(r), &array![[11.0, 22.0], [13.0, 24.0]]);

        let bad = t.constant(Matrix::zeros((1, 3)));
        assert!(t.add_bias(x, bad).is_err());

        let mut t = Tape::new();
        let x = t.constant(Matrix::from_elem((5, 3), 0.3));
        let b = t.leaf(Matrix::zeros((1, 3)), true);
        let y = t.add_bias(x, b).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(b), &array![[5.0, 5.0, 5.0]]);
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let mut t = Tape::new();
        let x = t.leaf(array![[-1.0, 0.0, 2.0]], true);
        let y = t.relu(x);
        assert_eq!(t.value(y), &array![[0.0, 0.0, 2.0]]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        // subgradient at exactly 0 is 0
        assert_eq!(t.grad(x), &array![[0.0, 0.0, 1.0]]);

        let mut t = Tape::new();
        let x = t.constant(array![[0.5, 3.0]]);
        let y = t.relu(x);
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn relu_gradient_matches_finite_differences_off_kink() {
        let x0 = array![[-1.0, 2.0]];
        let mut t = Tape::new();
        let x = t.leaf(x0.clone(), true);
        let y = t.relu(x);
        let s = t.sum(y);
        t.backward(s).unwrap();
        let fd = finite_diff_grad(|m| m.mapv(|v| v.max(0.0)).sum(), &x0, 1e-5);
        for (a, b) in t.grad(x).iter().zip(fd.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((fd[[0, 0]] - 0.0).abs() < 1e-6 && (fd[[0, 1]] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_cases() {
        let p = softmax_rows(&array![[0.0, 0.0, 0.0, 0.0]]);
        for v in p.iter() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let p = softmax_rows(&array![[1000.0, 1000.0 + 3f64.ln()]]);
        assert!((p[[0, 0]] - 0.25).abs() < 1e-12);
        assert!((p[[0, 1]] - 0.75).abs() < 1e-12);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn backward_on_leaf_and_accumulation() {
        let mut t = Tape::new();
        let x = t.leaf(array![[3.0]], true);
        t.backward(x).unwrap();
        assert_eq!(t.grad(x), &array![[1.0]]);

        let mut t = Tape::new();
        let w = t.leaf(array![[1.0, -2.0], [0.5, 3.0]], true);
        let sq = t.mul(w, w).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        let once = t.grad(w).clone();
        t.backward(s).unwrap();
        assert_eq!(t.grad(w), &(&once * 2.0));
        t.zero_grads();
        assert!(t.grad(w).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros((2, 2)), true);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn non_differentiable_leaves_keep_zero_grad() {
        let mut t = Tape::new();
        let x = t.constant(array![[1.0, 2.0]]);
        let w = t.leaf(array![[1.0], [1.0]], true);
        let y = t.matmul(x, w).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert!(t.grad(x).iter().all(|&g| g == 0.0));
        assert_eq!(t.grad(w), &array![[1.0], [2.0]]);
    }

    #[test]
    fn sgd_step_cases() {
        let mut p = Parameter::new(array![[1.0]]);
        p.grad = array![[2.0]];
        sgd_step([&mut p], 0.1);
        assert!((p.value[[0, 0]] - 0.8).abs() < 1e-15);

        let mut z = Parameter::new(array![[1.0, 2.0]]);
        sgd_step([&mut z], 0.5);
        assert_eq!(z.value, array![[1.0, 2.0]]);

        let mut f = Parameter::new(array![[1.0]]);
        f.frozen = true;
        f.grad = array![[7.0]];
        sgd_step([&mut f], 0.1);
        assert_eq!(f.value, array![[1.0]]);
    }

    #[test]
    fn finite_diff_cases() {
        let g = finite_diff_grad(|m| m[[0, 0]] * m[[0, 0]], &array![[3.0]], 1e-5);
        assert!((g[[0, 0]] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &Matrix::ones((2, 3)), 1e-5);
        assert!(g.iter().all(|&v| v == 0.0));
        // d softmax_0 / dx at x = 0 is p0(1-p0) = 0.25 and -p0 p1 = -0.25
        let g = finite_diff_grad(|m| softmax_rows(m)[[0, 0]], &array![[0.0, 0.0]], 1e-5);
        assert!((g[[0, 0]] - 0.25).abs() < 1e-5);
        assert!((g[[0, 1]] + 0.25).abs() < 1e-5);
    }

    #[test]
    fn tape_records_in_topological_order() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::ones((2, 2)), true);
        let b = t.relu(a);
        let c = t.add(a, b).unwrap();
        let s = t.sum(c);
        for (i, n) in t.nodes().iter().enumerate() {
            assert!(n.inputs().iter().all(|v| v.index() < i));
        }
        assert_eq!(t.node(s).op_name(), "sum");
        assert_eq!(t.node(a).op_name(), "leaf");
    }
}
