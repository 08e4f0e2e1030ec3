//! A small reverse-mode differentiation tape over dense `f64` matrices.
//!
//! Every value is a 2-D matrix; vectors are `1 × n` rows. Nodes are appended in
//! evaluation order, so a single reverse sweep visits every consumer before
//! its inputs.

use std::ops::Range;

use ndarray::{concatenate, s, Array1, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_COEF: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Gelu(Var),
    MulConst(Var, Array2<f64>),
    ConstMatMul(Array2<f64>, Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, Range<usize>),
    SliceCols(Var, Range<usize>),
    MeanRows(Var),
    ShiftedScale { x: Var, coef: f64 },
    PinvInit { x: Var, col: usize, row: usize },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Array2<f64>> {
        self.grads[var.0].as_ref()
    }

    pub fn take(&mut self, var: Var) -> Option<Array2<f64>> {
        self.grads[var.0].take()
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

    pub fn value(&self, var: Var) -> &Array2<f64> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let g = self.grad_of(&[a, b]);
        self.push(value, Op::MatMul(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let g = self.grad_of(&[a, b]);
        self.push(value, Op::Add(a, b), g)
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1 x n row");
        let value = self.value(a) + self.value(row);
        let g = self.grad_of(&[a, row]);
        self.push(value, Op::AddRow(a, row), g)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let g = self.grad_of(&[a]);
        self.push(value, Op::Scale(a, factor), g)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let g = self.grad_of(&[a]);
        self.push(value, Op::Transpose(a), g)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let g = self.grad_of(&[a]);
        self.push(value, Op::SoftmaxRows(a), g)
    }

    /// Row-wise layer normalization with a `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let input = self.value(x);
        let width = input.ncols() as f64;
        let mut normed = input.to_owned();
        let mut inv_std = Array1::zeros(input.nrows());
        for (mut row, inv) in normed.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / width;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / width;
            *inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row *= *inv;
        }
        let value = &normed * self.value(gain) + self.value(bias);
        let g = self.grad_of(&[x, gain, bias]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            g,
        )
    }

    /// GELU, tanh form.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| {
            let inner = (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_COEF * x * x * x);
            0.5 * x * (1.0 + inner.tanh())
        });
        let g = self.grad_of(&[a]);
        self.push(value, Op::Gelu(a), g)
    }

    /// Elementwise product with a constant matrix (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Array2<f64>) -> Var {
        let value = self.value(a) * &mask;
        let g = self.grad_of(&[a]);
        self.push(value, Op::MulConst(a, mask), g)
    }

    /// `c · a` for a constant left factor.
    pub fn const_matmul(&mut self, c: Array2<f64>, a: Var) -> Var {
        let value = c.dot(self.value(a));
        let g = self.grad_of(&[a]);
        self.push(value, Op::ConstMatMul(c, a), g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column count mismatch");
        let g = self.grad_of(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row count mismatch");
        let g = self.grad_of(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn slice_rows(&mut self, a: Var, range: Range<usize>) -> Var {
        let value = self.value(a).slice(s![range.clone(), ..]).to_owned();
        let g = self.grad_of(&[a]);
        self.push(value, Op::SliceRows(a, range), g)
    }

    pub fn slice_cols(&mut self, a: Var, range: Range<usize>) -> Var {
        let value = self.value(a).slice(s![.., range.clone()]).to_owned();
        let g = self.grad_of(&[a]);
        self.push(value, Op::SliceCols(a, range), g)
    }

    /// Column means as a `1 × n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean_rows of an empty matrix")
            .insert_axis(Axis(0));
        let g = self.grad_of(&[a]);
        self.push(value, Op::MeanRows(a), g)
    }

    /// `diag · I + coef · x` for a square `x`.
    pub fn shifted_scale(&mut self, x: Var, diag: f64, coef: f64) -> Var {
        let input = self.value(x);
        assert_eq!(input.nrows(), input.ncols(), "shifted_scale needs a square matrix");
        let mut value = input * coef;
        value.diag_mut().mapv_inplace(|d| d + diag);
        let g = self.grad_of(&[x]);
        self.push(value, Op::ShiftedScale { x, coef }, g)
    }

    /// Newton–Schulz starting point `xᵀ / (max col-sum · max row-sum)` of |x|.
    pub fn pinv_init(&mut self, x: Var) -> Var {
        let input = self.value(x);
        let abs = input.mapv(f64::abs);
        let col_sums = abs.sum_axis(Axis(0));
        let row_sums = abs.sum_axis(Axis(1));
        let col = argmax(col_sums.iter().copied());
        let row = argmax(row_sums.iter().copied());
        let denom = col_sums[col] * row_sums[row];
        let value = input.t().mapv(|v| v / denom);
        let g = self.grad_of(&[x]);
        self.push(value, Op::PinvInit { x, col, row }, g)
    }

    /// Reverse sweep seeded with upstream gradients for one or more outputs.
    pub fn backward(&self, seeds: &[(Var, Array2<f64>)]) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (var, seed) in seeds {
            assert_eq!(seed.dim(), self.value(*var).dim(), "seed shape mismatch");
            accumulate(&mut grads, *var, seed.clone());
            last = last.max(var.0);
        }
        for index in (0..=last).rev() {
            let node = &self.nodes[index];
            if !node.needs_grad {
                continue;
            }
            let Some(upstream) = grads[index].take() else {
                continue;
            };
            self.propagate(node, &upstream, &mut grads);
            grads[index] = Some(upstream);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, up: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let wants = |v: &Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(a) {
                    accumulate(grads, *a, up.dot(&self.value(*b).t()));
                }
                if wants(b) {
                    accumulate(grads, *b, self.value(*a).t().dot(up));
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate(grads, *a, up.clone());
                }
                if wants(b) {
                    accumulate(grads, *b, up.clone());
                }
            }
            Op::AddRow(a, row) => {
                if wants(a) {
                    accumulate(grads, *a, up.clone());
                }
                if wants(row) {
                    accumulate(grads, *row, up.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, factor) => accumulate(grads, *a, up * *factor),
            Op::Transpose(a) => accumulate(grads, *a, up.t().to_owned()),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = up * y;
                for (mut row, y_row) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot = row.sum();
                    row.zip_mut_with(&y_row, |d, &yv| *d -= yv * dot);
                }
                accumulate(grads, *a, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                if wants(gain) {
                    let dg = (up * normed).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(grads, *gain, dg);
                }
                if wants(bias) {
                    accumulate(grads, *bias, up.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if wants(x) {
                    let width = normed.ncols() as f64;
                    let dnormed = up * self.value(*gain);
                    let mut dx = Array2::zeros(normed.dim());
                    for ((mut out, dn), (xh, inv)) in dx
                        .rows_mut()
                        .into_iter()
                        .zip(dnormed.rows())
                        .zip(normed.rows().into_iter().zip(inv_std.iter()))
                    {
                        let sum_dn = dn.sum();
                        let sum_dn_xh = dn.dot(&xh);
                        for ((o, &d), &h) in out.iter_mut().zip(dn.iter()).zip(xh.iter()) {
                            *o = inv / width * (width * d - sum_dn - h * sum_dn_xh);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Gelu(a) => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                let mut dx = self.value(*a).mapv(|x| {
                    let inner = c * (x + GELU_COEF * x * x * x);
                    let t = inner.tanh();
                    let dinner = c * (1.0 + 3.0 * GELU_COEF * x * x);
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
                });
                dx *= up;
                accumulate(grads, *a, dx);
            }
            Op::MulConst(a, mask) => accumulate(grads, *a, up * mask),
            Op::ConstMatMul(c, a) => accumulate(grads, *a, c.t().dot(up)),
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for part in parts {
                    let rows = self.value(*part).nrows();
                    if wants(part) {
                        accumulate(grads, *part, up.slice(s![start..start + rows, ..]).to_owned());
                    }
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for part in parts {
                    let cols = self.value(*part).ncols();
                    if wants(part) {
                        accumulate(grads, *part, up.slice(s![.., start..start + cols]).to_owned());
                    }
                    start += cols;
                }
            }
            Op::SliceRows(a, range) => {
                let mut dx = Array2::zeros(self.value(*a).dim());
                dx.slice_mut(s![range.clone(), ..]).assign(up);
                accumulate(grads, *a, dx);
            }
            Op::SliceCols(a, range) => {
                let mut dx = Array2::zeros(self.value(*a).dim());
                dx.slice_mut(s![.., range.clone()]).assign(up);
                accumulate(grads, *a, dx);
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).nrows();
                let row = up.row(0).mapv(|v| v / rows as f64);
                let dx = row
                    .broadcast((rows, row.len()))
                    .expect("broadcast mean gradient")
                    .to_owned();
                accumulate(grads, *a, dx);
            }
            Op::ShiftedScale { x, coef } => accumulate(grads, *x, up * *coef),
            Op::PinvInit { x, col, row } => {
                let input = self.value(*x);
                let abs = input.mapv(f64::abs);
                let col_sum = abs.column(*col).sum();
                let row_sum = abs.row(*row).sum();
                let denom = col_sum * row_sum;
                // y = xᵀ / denom; d(1/denom) flows through the two maximal sums.
                let mut dx = up.t().mapv(|v| v / denom);
                let weighted = (up * &input.t()).sum();
                let dscale = -weighted / denom;
                for ((i, j), d) in dx.indexed_iter_mut() {
                    let sign = input[[i, j]].signum();
                    if j == *col {
                        *d += dscale * sign / col_sum;
                    }
                    if i == *row {
                        *d += dscale * sign / row_sum;
                    }
                }
                accumulate(grads, *x, dx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], var: Var, delta: Array2<f64>) {
    match &mut grads[var.0] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn finite_difference(
        x: &Array2<f64>,
        h: f64,
        f: impl Fn(&Array2<f64>) -> f64,
    ) -> Array2<f64> {
        let mut grad = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (i, j) = (idx / x.ncols(), idx % x.ncols());
            let mut plus = x.clone();
            plus[[i, j]] += h;
            let mut minus = x.clone();
            minus[[i, j]] -= h;
            grad[[i, j]] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        grad
    }

    /// Builds a scalar by contracting the output with fixed weights.
    fn check_unary(x: Array2<f64>, build: impl Fn(&mut Tape, Var) -> Var) {
        let weights = |dim: (usize, usize)| {
            Array2::from_shape_fn(dim, |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.6)
        };
        let eval = |x: &Array2<f64>| {
            let mut tape = Tape::new();
            let v = tape.param(x.clone());
            let y = build(&mut tape, v);
            let w = weights(tape.value(y).dim());
            (tape.value(y) * &w).sum()
        };
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let y = build(&mut tape, v);
        let w = weights(tape.value(y).dim());
        let grads = tape.backward(&[(y, w)]);
        let analytic = grads.get(v).unwrap();
        let numeric = finite_difference(&x, 1e-5, eval);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-6, "analytic {a} vs numeric {n}");
        }
    }

    fn sample() -> Array2<f64> {
        array![[0.3, -1.2, 0.8], [1.5, 0.1, -0.4], [-0.7, 0.9, 0.2]]
    }

    #[test]
    fn softmax_gradient() {
        check_unary(sample(), |t, v| t.softmax_rows(v));
    }

    #[test]
    fn layer_norm_gradient() {
        check_unary(sample(), |t, v| {
            let g = t.constant(array![[1.2, 0.7, -0.3]]);
            let b = t.constant(array![[0.1, 0.0, -0.2]]);
            t.layer_norm(v, g, b)
        });
    }

    #[test]
    fn gelu_gradient() {
        check_unary(sample(), |t, v| t.gelu(v));
    }

    #[test]
    fn pinv_init_gradient() {
        check_unary(sample().mapv(|v| v.abs() + 0.1), |t, v| t.pinv_init(v));
    }

    #[test]
    fn matmul_chain_gradient() {
        check_unary(sample(), |t, v| {
            let vt = t.transpose(v);
            let p = t.matmul(v, vt);
            let s = t.shifted_scale(p, 2.0, -0.5);
            let m = t.mean_rows(s);
            let c = t.concat_rows(&[m, v]);
            t.slice_cols(c, 1..3)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(&array![[1000.0, 1001.0], [-5.0, 5.0]]);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
