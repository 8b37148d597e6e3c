use rand::Rng;

use super::tensor::{add_row_in_place, matmul_into, Tensor};
use super::AutodiffError;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Training or inference behavior for stochastic layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Sqrt(Var),
    Square(Var),
    Hinge(Var, f64),
    Mask(Var, Vec<f64>),
    RowSum(Var),
    Mean(Var),
    ConcatCols(Var, Var),
    GatherCols(Var, Vec<usize>),
    PermuteRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode computation tape.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and `backward` is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<Tensor> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[var.0].clone(), g.clone()))
    }

    /// Gradient of `var`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.0].clone()))
    }
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

    /// Records a leaf; it participates in differentiation iff the tensor
    /// `requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, requires_grad)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Leaf, false)
    }

    /// Copies the value of `var` into a new constant leaf, cutting the
    /// gradient path.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.value(var).clone();
        self.constant(value)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.value(var).data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), m, k, self.value(b).data(), n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// Adds the row vector `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (m, n) = self.dims(a);
        if self.value(bias).len() != n {
            return Err(self.mismatch("add_row", a, bias));
        }
        let mut out = self.value(a).data().to_vec();
        add_row_in_place(&mut out, self.value(bias).data());
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::AddRow(a, bias), rg))
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch(name, a, b));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    /// Square root; the subgradient at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    /// `max(a - threshold, 0)` elementwise.
    pub fn hinge(&mut self, a: Var, threshold: f64) -> Var {
        self.map(a, |x| (x - threshold).max(0.0), Op::Hinge(a, threshold))
    }

    /// Inverted dropout: in training mode each unit is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Identity in eval mode or when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var, AutodiffError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::InvalidRate(rate));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let t = self.value(a);
        let out = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mask(a, mask), rg))
    }

    /// Sums each row: `m x n -> m x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let out = self
            .value(a)
            .data()
            .chunks_exact(n)
            .map(|row| row.iter().sum())
            .collect();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(vec![m, 1], out), Op::RowSum(a), rg)
    }

    /// Mean over every element, producing a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(v), Op::Mean(a), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, p) = self.dims(a);
        let (m2, q) = self.dims(b);
        if m != m2 {
            return Err(self.mismatch("concat_cols", a, b));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(&da[i * p..(i + 1) * p]);
            out.extend_from_slice(&db[i * q..(i + 1) * q]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![m, p + q], out),
            Op::ConcatCols(a, b),
            rg,
        ))
    }

    /// Picks `a[i, cols[i]]` from each row: `m x n -> m x 1`.
    pub fn gather_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var, AutodiffError> {
        let (m, n) = self.dims(a);
        if cols.len() != m || cols.iter().any(|&c| c >= n) {
            return Err(AutodiffError::IndexOutOfRange {
                op: "gather_cols",
                bound: n,
            });
        }
        let d = self.value(a).data();
        let out = cols.iter().enumerate().map(|(i, &c)| d[i * n + c]).collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![m, 1], out),
            Op::GatherCols(a, cols.to_vec()),
            rg,
        ))
    }

    /// Row `i` of the result is row `perm[i]` of `a`.
    pub fn permute_rows(&mut self, a: Var, perm: &[usize]) -> Result<Var, AutodiffError> {
        let (m, n) = self.dims(a);
        if perm.len() != m || perm.iter().any(|&p| p >= m) {
            return Err(AutodiffError::IndexOutOfRange {
                op: "permute_rows",
                bound: m,
            });
        }
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(m * n);
        for &p in perm {
            out.extend_from_slice(&d[p * n..(p + 1) * n]);
        }
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::PermuteRows(a, perm.to_vec()),
            rg,
        ))
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients, AutodiffError> {
        let out_len = self.value(output).len();
        if out_len != 1 {
            return Err(AutodiffError::NonScalarOutput {
                shape: self.value(output).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing
                .iter_mut()
                .zip(contrib)
                .for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        f: impl Fn(&mut [f64]),
    ) {
        if !self.rg(v) {
            return;
        }
        let len = self.value(v).len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                // dA = dY * B^T
                self.accumulate_with(grads, *a, |ga| {
                    let mut bt = vec![0.0; n * k];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = bd[p * n + j];
                        }
                    }
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        let dst = &mut ga[i * k..(i + 1) * k];
                        for (j, &gij) in gi.iter().enumerate() {
                            if gij == 0.0 {
                                continue;
                            }
                            for (d, &b) in dst.iter_mut().zip(&bt[j * k..(j + 1) * k]) {
                                *d += gij * b;
                            }
                        }
                    }
                });
                // dB = A^T * dY
                self.accumulate_with(grads, *b, |gb| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (d, &s) in gb[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                *d += aip * s;
                            }
                        }
                    }
                });
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.to_vec());
                let n = self.value(*bias).len();
                self.accumulate_with(grads, *bias, |gb| {
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, g.iter().zip(bd).map(|(x, y)| x * y).collect());
                self.accumulate(grads, *b, g.iter().zip(ad).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.iter().map(|x| c * x).collect()),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Tanh(a) => {
                let d = g.iter().zip(out).map(|(x, y)| x * (1.0 - y * y)).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let ad = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(ad)
                    .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                self.accumulate(grads, *a, g.iter().zip(out).map(|(x, y)| x * y).collect());
            }
            Op::Sqrt(a) => {
                let d = g
                    .iter()
                    .zip(out)
                    .map(|(x, &y)| if y > 0.0 { x * 0.5 / y } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let ad = self.value(*a).data();
                self.accumulate(grads, *a, g.iter().zip(ad).map(|(x, y)| 2.0 * x * y).collect());
            }
            Op::Hinge(a, c) => {
                let ad = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(ad)
                    .map(|(x, &v)| if v > *c { *x } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Mask(a, mask) => {
                self.accumulate(grads, *a, g.iter().zip(mask).map(|(x, m)| x * m).collect());
            }
            Op::RowSum(a) => {
                let n = self.dims(*a).1;
                let d = g
                    .iter()
                    .flat_map(|&x| std::iter::repeat_n(x, n))
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Mean(a) => {
                let len = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0] / len as f64; len]);
            }
            Op::ConcatCols(a, b) => {
                let (m, p) = self.dims(*a);
                let q = self.dims(*b).1;
                let w = p + q;
                let ga = (0..m).flat_map(|i| g[i * w..i * w + p].iter().copied()).collect();
                let gb = (0..m)
                    .flat_map(|i| g[i * w + p..(i + 1) * w].iter().copied())
                    .collect();
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::GatherCols(a, cols) => {
                let n = self.dims(*a).1;
                self.accumulate_with(grads, *a, |ga| {
                    for (i, &c) in cols.iter().enumerate() {
                        ga[i * n + c] += g[i];
                    }
                });
            }
            Op::PermuteRows(a, perm) => {
                let n = self.dims(*a).1;
                self.accumulate_with(grads, *a, |ga| {
                    for (i, &p) in perm.iter().enumerate() {
                        for j in 0..n {
                            ga[p * n + j] += g[i * n + j];
                        }
                    }
                });
            }
        }
    }
}
