//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D matrix. Scalars are `1 x 1`, row
//! vectors are `1 x n`. Operations append a node and record enough state to
//! run the chain rule backwards from a scalar output.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    MulElem(Var, Var),
    MulCol(Var, Var),
    Column(Var, usize),
    ConcatCols(Var, Var),
    GatherRows(Var, Arc<Vec<usize>>),
    TakePerRow(Var, Arc<Vec<Vec<usize>>>),
    AssembleRows(Arc<Vec<(Var, usize)>>),
    MeanPoolRows(Var, usize),
    L2NormalizeRows(Var),
    MaskedSoftmaxRows(Var),
    LogSumExpRows(Var),
    LogWeightedSumExp(Var, Var),
    MeanAll(Var),
    SumAll(Var),
    Gelu(Var),
    QuickGelu(Var),
    Tanh(Var),
    Reciprocal(Var),
    LayerNormRows {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Arc<Matrix>,
        inv_std: Arc<Vec<f64>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: Arc<Vec<Matrix>>,
    },
}

/// Layout of a batched multi-head attention call. Inputs are stacked as
/// `(batch * seq_len) x width` with each sample's tokens contiguous.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub causal: bool,
}

#[derive(Debug)]
struct Node {
    value: Arc<Matrix>,
    op: Op,
    needs_grad: bool,
}

/// A recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `var`; `None` when the output does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, zero-filled when absent.
    pub fn get_or_zeros(&self, var: Var, shape: (usize, usize)) -> Matrix {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape))
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * A * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

fn quick_gelu_parts(x: f64) -> (f64, f64) {
    let sig = 1.0 / (1.0 + (-1.702 * x).exp());
    (x * sig, sig + 1.702 * x * sig * (1.0 - sig))
}

/// Row-wise softmax where `-inf` entries receive exactly zero weight.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = if *v == f64::NEG_INFINITY {
                0.0
            } else {
                (*v - max).exp()
            };
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
    out
}

const NORM_EPS: f64 = 1e-12;

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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => self.op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Constant => vec![],
            Op::AssembleRows(src) => {
                let mut v: Vec<Var> = src.iter().map(|(v, _)| *v).collect();
                v.sort_unstable_by_key(|v| v.0);
                v.dedup();
                v
            }
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::AddRow(a, b)
            | Op::MulScalar(a, b)
            | Op::MulElem(a, b)
            | Op::MulCol(a, b)
            | Op::ConcatCols(a, b)
            | Op::LogWeightedSumExp(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Column(a, _)
            | Op::GatherRows(a, _)
            | Op::TakePerRow(a, _)
            | Op::MeanPoolRows(a, _)
            | Op::L2NormalizeRows(a)
            | Op::MaskedSoftmaxRows(a)
            | Op::LogSumExpRows(a)
            | Op::MeanAll(a)
            | Op::SumAll(a)
            | Op::Gelu(a)
            | Op::QuickGelu(a)
            | Op::Tanh(a)
            | Op::Reciprocal(a) => vec![*a],
            Op::LayerNormRows {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }

    /// Trainable input. Gradients are tracked.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Fixed input. No gradient is propagated into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    /// Fixed input shared without copying.
    pub fn constant_shared(&mut self, value: Arc<Matrix>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.dim()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, var: Var) -> f64 {
        let v = self.value(var);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a 1 x n bias");
        let out = self.value(a) + r;
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    /// Multiplies `a` by a `1 x 1` node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let out = self.value(a) * sv;
        self.push(out, Op::MulScalar(a, s))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::MulElem(a, b))
    }

    /// Scales row `i` of `a` by `col[i, 0]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let c = self.value(col);
        assert_eq!(c.ncols(), 1, "mul_col expects a B x 1 column");
        let out = self.value(a) * c;
        self.push(out, Op::MulCol(a, col))
    }

    pub fn column(&mut self, a: Var, j: usize) -> Var {
        let out = self.value(a).slice(s![.., j..j + 1]).to_owned();
        self.push(out, Op::Column(a, j))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let out = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols: row counts differ");
        self.push(out, Op::ConcatCols(a, b))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let out = self.value(a).select(Axis(0), &idx);
        self.push(out, Op::GatherRows(a, Arc::new(idx)))
    }

    /// `out[r][c] = a[r][idx[r][c]]`; every index list must have equal length.
    pub fn take_per_row(&mut self, a: Var, idx: Vec<Vec<usize>>) -> Var {
        let av = self.value(a);
        let width = idx.first().map_or(0, |r| r.len());
        let mut out = Matrix::zeros((idx.len(), width));
        for (r, cols) in idx.iter().enumerate() {
            assert_eq!(cols.len(), width, "take_per_row: ragged index lists");
            for (c, &j) in cols.iter().enumerate() {
                out[[r, c]] = av[[r, j]];
            }
        }
        self.push(out, Op::TakePerRow(a, Arc::new(idx)))
    }

    /// Stacks single rows taken from several nodes: output row `r` is row
    /// `sources[r].1` of `sources[r].0`.
    pub fn assemble_rows(&mut self, sources: Vec<(Var, usize)>) -> Var {
        let width = sources.first().map_or(0, |(v, _)| self.shape(*v).1);
        let mut out = Matrix::zeros((sources.len(), width));
        for (r, &(v, row)) in sources.iter().enumerate() {
            out.row_mut(r).assign(&self.value(v).row(row));
        }
        self.push(out, Op::AssembleRows(Arc::new(sources)))
    }

    /// Averages consecutive blocks of `group` rows.
    pub fn mean_pool_rows(&mut self, a: Var, group: usize) -> Var {
        let av = self.value(a);
        assert!(group > 0 && av.nrows().is_multiple_of(group), "mean_pool_rows: rows not divisible by group");
        let n = av.nrows() / group;
        let mut out = Matrix::zeros((n, av.ncols()));
        for i in 0..n {
            let block = av.slice(s![i * group..(i + 1) * group, ..]);
            out.row_mut(i).assign(&(block.sum_axis(Axis(0)) / group as f64));
        }
        self.push(out, Op::MeanPoolRows(a, group))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt().max(NORM_EPS);
            row.mapv_inplace(|v| v / n);
        }
        self.push(out, Op::L2NormalizeRows(a))
    }

    /// Row softmax; entries equal to `-inf` are excluded from the support.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::MaskedSoftmaxRows(a))
    }

    /// Row softmax restricted to entries where `mask` is true.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &ndarray::Array2<bool>) -> Var {
        let mut logits = self.value(a).clone();
        Zip::from(&mut logits).and(mask).for_each(|l, &m| {
            if !m {
                *l = f64::NEG_INFINITY;
            }
        });
        let out = softmax_rows(&logits);
        self.push(out, Op::MaskedSoftmaxRows(a))
    }

    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros((av.nrows(), 1));
        for (i, row) in av.rows().into_iter().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            out[[i, 0]] = max + sum.ln();
        }
        self.push(out, Op::LogSumExpRows(a))
    }

    /// Row-wise `log Σ_j w_ij · exp(l_ij)` for nonnegative weights `w`.
    pub fn log_weighted_sum_exp(&mut self, weights: Var, logits: Var) -> Var {
        let w = self.value(weights);
        let l = self.value(logits);
        assert_eq!(w.dim(), l.dim(), "log_weighted_sum_exp: shape mismatch");
        let mut out = Matrix::zeros((w.nrows(), 1));
        for i in 0..w.nrows() {
            let max = l.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = w
                .row(i)
                .iter()
                .zip(l.row(i).iter())
                .map(|(wv, lv)| wv * (lv - max).exp())
                .sum();
            out[[i, 0]] = max + sum.ln();
        }
        self.push(out, Op::LogWeightedSumExp(weights, logits))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Matrix::from_elem((1, 1), av.sum() / av.len() as f64);
        self.push(out, Op::MeanAll(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Matrix::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::SumAll(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| gelu_parts(x).0);
        self.push(out, Op::Gelu(a))
    }

    /// `x · sigmoid(1.702 x)`
    pub fn quick_gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| quick_gelu_parts(x).0);
        self.push(out, Op::QuickGelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn reciprocal(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::recip);
        self.push(out, Op::Reciprocal(a))
    }

    /// Row-wise layer normalization with `1 x n` gain and bias.
    pub fn layer_norm_rows(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let x = self.value(input);
        let n = x.ncols() as f64;
        let mut normalized = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in normalized.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &normalized * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNormRows {
                input,
                gamma,
                beta,
                normalized: Arc::new(normalized),
                inv_std: Arc::new(inv_std),
            },
        )
    }

    /// Scaled dot-product attention over per-sample token blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let rows = shape.batch * shape.seq_len;
        let width = qv.ncols();
        assert_eq!(qv.nrows(), rows, "attention: q rows != batch * seq_len");
        assert_eq!(kv.dim(), qv.dim(), "attention: k shape differs from q");
        assert_eq!(vv.dim(), qv.dim(), "attention: v shape differs from q");
        assert_eq!(width % shape.heads, 0, "attention: width not divisible by heads");
        let dh = width / shape.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let l = shape.seq_len;
        let mut out = Matrix::zeros((rows, width));
        let mut probs = Vec::with_capacity(shape.batch * shape.heads);
        for b in 0..shape.batch {
            let r = b * l..(b + 1) * l;
            for h in 0..shape.heads {
                let c = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![r.clone(), c.clone()]);
                let kh = kv.slice(s![r.clone(), c.clone()]);
                let vh = vv.slice(s![r.clone(), c.clone()]);
                let mut scores = qh.dot(&kh.t()) * scale;
                if shape.causal {
                    for i in 0..l {
                        for j in i + 1..l {
                            scores[[i, j]] = f64::NEG_INFINITY;
                        }
                    }
                }
                let p = softmax_rows(&scores);
                out.slice_mut(s![r.clone(), c.clone()]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs: Arc::new(probs),
            },
        )
    }

    /// Runs the chain rule from the scalar `output` back to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(
            self.shape(output),
            (1, 1),
            "backward expects a scalar output"
        );
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::from_elem((1, 1), 1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |var: Var, delta: Matrix| {
            if !self.nodes[var.0].needs_grad {
                return;
            }
            match &mut grads[var.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                acc(*a, g.dot(&self.value(*b).t()));
                acc(*b, self.value(*a).t().dot(g));
            }
            Op::MatMulT(a, b) => {
                acc(*a, g.dot(self.value(*b)));
                acc(*b, g.t().dot(self.value(*a)));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::MulScalar(a, s) => {
                acc(*a, g * self.scalar(*s));
                acc(*s, Matrix::from_elem((1, 1), (g * self.value(*a)).sum()));
            }
            Op::MulElem(a, b) => {
                acc(*a, g * self.value(*b));
                acc(*b, g * self.value(*a));
            }
            Op::MulCol(a, col) => {
                acc(*a, g * self.value(*col));
                acc(
                    *col,
                    (g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1)),
                );
            }
            Op::Column(a, j) => {
                let mut d = Matrix::zeros(self.shape(*a));
                d.slice_mut(s![.., *j..*j + 1]).assign(g);
                acc(*a, d);
            }
            Op::ConcatCols(a, b) => {
                let wa = self.shape(*a).1;
                acc(*a, g.slice(s![.., ..wa]).to_owned());
                acc(*b, g.slice(s![.., wa..]).to_owned());
            }
            Op::GatherRows(a, idx) => {
                let mut d = Matrix::zeros(self.shape(*a));
                for (r, &src) in idx.iter().enumerate() {
                    let mut row = d.row_mut(src);
                    row += &g.row(r);
                }
                acc(*a, d);
            }
            Op::TakePerRow(a, idx) => {
                let mut d = Matrix::zeros(self.shape(*a));
                for (r, cols) in idx.iter().enumerate() {
                    for (c, &j) in cols.iter().enumerate() {
                        d[[r, j]] += g[[r, c]];
                    }
                }
                acc(*a, d);
            }
            Op::AssembleRows(src) => {
                let mut per_var: Vec<(Var, Matrix)> = Vec::new();
                for (r, &(v, row)) in src.iter().enumerate() {
                    if !self.nodes[v.0].needs_grad {
                        continue;
                    }
                    let pos = match per_var.iter().position(|(pv, _)| *pv == v) {
                        Some(p) => p,
                        None => {
                            per_var.push((v, Matrix::zeros(self.shape(v))));
                            per_var.len() - 1
                        }
                    };
                    let mut dst = per_var[pos].1.row_mut(row);
                    dst += &g.row(r);
                }
                for (v, d) in per_var {
                    acc(v, d);
                }
            }
            Op::MeanPoolRows(a, group) => {
                let mut d = Matrix::zeros(self.shape(*a));
                let inv = 1.0 / *group as f64;
                for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                    row.assign(&(&g.row(r / group) * inv));
                }
                acc(*a, d);
            }
            Op::L2NormalizeRows(a) => {
                let x = self.value(*a);
                let mut d = Matrix::zeros(x.dim());
                for i in 0..x.nrows() {
                    let xr = x.row(i);
                    let n = xr.dot(&xr).sqrt().max(NORM_EPS);
                    let gr = g.row(i);
                    let yg = xr.dot(&gr) / n;
                    let mut dr = d.row_mut(i);
                    Zip::from(&mut dr)
                        .and(&gr)
                        .and(&xr)
                        .for_each(|dv, &gv, &xv| *dv = (gv - (xv / n) * yg) / n);
                }
                acc(*a, d);
            }
            Op::MaskedSoftmaxRows(a) => {
                let y = out;
                let mut d = Matrix::zeros(y.dim());
                for i in 0..y.nrows() {
                    let dot: f64 = y.row(i).dot(&g.row(i));
                    Zip::from(d.row_mut(i))
                        .and(y.row(i))
                        .and(g.row(i))
                        .for_each(|dv, &yv, &gv| *dv = yv * (gv - dot));
                }
                acc(*a, d);
            }
            Op::LogSumExpRows(a) => {
                let sm = softmax_rows(self.value(*a));
                acc(*a, sm * g);
            }
            Op::LogWeightedSumExp(w, l) => {
                let wv = self.value(*w);
                let lv = self.value(*l);
                let mut dw = Matrix::zeros(wv.dim());
                let mut dl = Matrix::zeros(wv.dim());
                for i in 0..wv.nrows() {
                    let max = lv.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = lv.row(i).iter().map(|v| (v - max).exp()).collect();
                    let denom: f64 = wv.row(i).iter().zip(&e).map(|(a, b)| a * b).sum();
                    for j in 0..wv.ncols() {
                        dw[[i, j]] = g[[i, 0]] * e[j] / denom;
                        dl[[i, j]] = g[[i, 0]] * wv[[i, j]] * e[j] / denom;
                    }
                }
                acc(*w, dw);
                acc(*l, dl);
            }
            Op::MeanAll(a) => {
                let shape = self.shape(*a);
                let n = (shape.0 * shape.1) as f64;
                acc(*a, Matrix::from_elem(shape, g[[0, 0]] / n));
            }
            Op::SumAll(a) => acc(*a, Matrix::from_elem(self.shape(*a), g[[0, 0]])),
            Op::Gelu(a) => acc(*a, self.value(*a).mapv(|x| gelu_parts(x).1) * g),
            Op::QuickGelu(a) => acc(*a, self.value(*a).mapv(|x| quick_gelu_parts(x).1) * g),
            Op::Tanh(a) => acc(*a, self.value(*a).mapv(|x| 1.0 - x.tanh().powi(2)) * g),
            Op::Reciprocal(a) => acc(*a, self.value(*a).mapv(|x| -1.0 / (x * x)) * g),
            Op::LayerNormRows {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let gam = self.value(*gamma);
                acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(
                    *gamma,
                    (g * &**normalized).sum_axis(Axis(0)).insert_axis(Axis(0)),
                );
                let n = normalized.ncols() as f64;
                let gx = g * gam;
                let mut d = Matrix::zeros(gx.dim());
                for i in 0..gx.nrows() {
                    let xh = normalized.row(i);
                    let gr = gx.row(i);
                    let mean_g = gr.sum() / n;
                    let mean_gx = gr.dot(&xh) / n;
                    Zip::from(d.row_mut(i))
                        .and(&gr)
                        .and(&xh)
                        .for_each(|dv, &gv, &xv| *dv = inv_std[i] * (gv - mean_g - xv * mean_gx));
                }
                acc(*input, d);
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let width = qv.ncols();
                let dh = width / shape.heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let l = shape.seq_len;
                let mut dq = Matrix::zeros(qv.dim());
                let mut dk = Matrix::zeros(kv.dim());
                let mut dv = Matrix::zeros(vv.dim());
                for b in 0..shape.batch {
                    let r = b * l..(b + 1) * l;
                    for h in 0..shape.heads {
                        let c = h * dh..(h + 1) * dh;
                        let p = &probs[b * shape.heads + h];
                        let go = g.slice(s![r.clone(), c.clone()]);
                        let qh = qv.slice(s![r.clone(), c.clone()]);
                        let kh = kv.slice(s![r.clone(), c.clone()]);
                        let vh = vv.slice(s![r.clone(), c.clone()]);
                        dv.slice_mut(s![r.clone(), c.clone()])
                            .assign(&p.t().dot(&go));
                        let dp = go.dot(&vh.t());
                        let mut ds = Matrix::zeros(p.dim());
                        for i in 0..l {
                            let dot: f64 = p.row(i).dot(&dp.row(i));
                            for j in 0..l {
                                ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot) * scale;
                            }
                        }
                        dq.slice_mut(s![r.clone(), c.clone()]).assign(&ds.dot(&kh));
                        dk.slice_mut(s![r.clone(), c.clone()])
                            .assign(&ds.t().dot(&qh));
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_grad_close, numeric_grad};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks d(sum(w ⊙ f(x)))/dx against central differences.
    fn check_unary(build: impl Fn(&mut Tape, Var) -> Var, x: Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe = {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let out = build(&mut t, v);
            rand_matrix(&mut rng, t.shape(out).0, t.shape(out).1)
        };
        let eval = |xv: &Matrix| {
            let mut t = Tape::new();
            let v = t.leaf(xv.clone());
            let out = build(&mut t, v);
            let p = t.constant(probe.clone());
            let m = t.mul_elem(out, p);
            let s = t.sum_all(m);
            (t, v, s)
        };
        let (t, v, s) = eval(&x);
        let analytic = t.backward(s).get_or_zeros(v, x.dim());
        let numeric = numeric_grad(|xv| {
            let (t, _, s) = eval(xv);
            t.scalar(s)
        }, &x, 1e-6);
        assert_grad_close(&analytic, &numeric, 1e-6, "unary op");
    }

    #[test]
    fn elementwise_and_row_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_matrix(&mut rng, 4, 5);
        check_unary(|t, v| t.gelu(v), x.clone());
        check_unary(|t, v| t.quick_gelu(v), x.clone());
        check_unary(|t, v| t.tanh(v), x.clone());
        check_unary(|t, v| t.l2_normalize_rows(v), x.clone());
        check_unary(|t, v| t.softmax_rows(v), x.clone());
        check_unary(|t, v| t.log_sum_exp_rows(v), x.clone());
        check_unary(|t, v| t.mean_all(v), x.clone());
        check_unary(|t, v| t.column(v, 2), x.clone());
        check_unary(|t, v| t.gather_rows(v, vec![3, 0, 0, 2]), x.clone());
        check_unary(|t, v| t.take_per_row(v, vec![vec![0, 4], vec![1, 1], vec![2, 3], vec![4, 0]]), x.clone());
        check_unary(|t, v| t.scale(v, -2.5), x.clone());
    }

    #[test]
    fn assemble_and_pool_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_matrix(&mut rng, 3, 4);
        let other = rand_matrix(&mut rng, 2, 4);
        check_unary(|t, v| {
            let o = t.leaf(other.clone());
            t.assemble_rows(vec![(v, 2), (o, 1), (v, 2), (v, 0)])
        }, x.clone());
        check_unary(|t, v| t.mean_pool_rows(v, 3), rand_matrix(&mut rng, 6, 2));
        check_unary(|t, v| t.reciprocal(v), rand_matrix(&mut rng, 2, 3).mapv(|x| x.abs() + 0.5));
    }

    #[test]
    fn masked_softmax_gradient_ignores_excluded_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_matrix(&mut rng, 3, 3);
        let mask = ndarray::arr2(&[[true, false, true], [false, true, false], [true, true, true]]);
        check_unary(|t, v| t.masked_softmax_rows(v, &mask), x.clone());
        let mut t = Tape::new();
        let v = t.constant(x);
        let y = t.masked_softmax_rows(v, &mask);
        let y = t.value(y);
        assert_eq!(y[[0, 1]], 0.0);
        assert_eq!(y[[1, 1]], 1.0);
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = rand_matrix(&mut rng, 5, 3);
        let c = rand_matrix(&mut rng, 4, 5);
        let col = rand_matrix(&mut rng, 4, 1);
        let row = rand_matrix(&mut rng, 1, 5);
        let x = rand_matrix(&mut rng, 4, 5);
        check_unary(|t, v| { let bb = t.leaf(b.clone()); t.matmul(v, bb) }, x.clone());
        check_unary(|t, v| { let cc = t.leaf(c.clone()); t.matmul_t(v, cc) }, x.clone());
        check_unary(|t, v| { let cc = t.leaf(c.clone()); t.matmul_t(cc, v) }, x.clone());
        check_unary(|t, v| { let cc = t.leaf(col.clone()); t.mul_col(v, cc) }, x.clone());
        check_unary(|t, v| { let cc = t.leaf(x.clone()); t.mul_col(cc, v) }, col.clone());
        check_unary(|t, v| { let cc = t.leaf(x.clone()); t.add_row(cc, v) }, row.clone());
        check_unary(|t, v| { let cc = t.leaf(c.clone()); t.mul_elem(v, cc) }, x.clone());
        check_unary(|t, v| { let cc = t.leaf(c.clone()); t.concat_cols(cc, v) }, x.clone());
        check_unary(|t, v| { let cc = t.leaf(x.clone()); t.mul_scalar(cc, v) }, Matrix::from_elem((1, 1), 0.7));
    }

    #[test]
    fn log_weighted_sum_exp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = rand_matrix(&mut rng, 3, 4);
        let w = rand_matrix(&mut rng, 3, 4).mapv(|v| v.abs() + 0.1);
        check_unary(|t, v| { let ww = t.leaf(w.clone()); t.log_weighted_sum_exp(ww, v) }, l.clone());
        check_unary(|t, v| { let ll = t.leaf(l.clone()); t.log_weighted_sum_exp(v, ll) }, w.clone());
    }

    #[test]
    fn layer_norm_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_matrix(&mut rng, 3, 6);
        let gamma = rand_matrix(&mut rng, 1, 6);
        let beta = rand_matrix(&mut rng, 1, 6);
        check_unary(|t, v| { let g = t.leaf(gamma.clone()); let b = t.leaf(beta.clone()); t.layer_norm_rows(v, g, b, 1e-5) }, x.clone());
        check_unary(|t, v| { let xx = t.leaf(x.clone()); let b = t.leaf(beta.clone()); t.layer_norm_rows(xx, v, b, 1e-5) }, gamma.clone());
    }

    #[test]
    fn attention_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for causal in [false, true] {
            let shape = AttentionShape { batch: 2, seq_len: 3, heads: 2, causal };
            let q = rand_matrix(&mut rng, 6, 4);
            let k = rand_matrix(&mut rng, 6, 4);
            let v = rand_matrix(&mut rng, 6, 4);
            check_unary(|t, x| { let kk = t.leaf(k.clone()); let vv = t.leaf(v.clone()); t.attention(x, kk, vv, shape) }, q.clone());
            check_unary(|t, x| { let qq = t.leaf(q.clone()); let vv = t.leaf(v.clone()); t.attention(qq, x, vv, shape) }, k.clone());
            check_unary(|t, x| { let qq = t.leaf(q.clone()); let kk = t.leaf(k.clone()); t.attention(qq, kk, x, shape) }, v.clone());
        }
    }

    #[test]
    fn single_token_attention_returns_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = rand_matrix(&mut rng, 3, 4);
        let v = rand_matrix(&mut rng, 3, 4);
        let mut t = Tape::new();
        let (qq, vv) = (t.constant(q.clone()), t.constant(v.clone()));
        let out = t.attention(qq, qq, vv, AttentionShape { batch: 3, seq_len: 1, heads: 2, causal: false });
        assert!((t.value(out) - &v).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::from_elem((2, 2), 1.0));
        let b = t.leaf(Matrix::from_elem((2, 2), 2.0));
        let c = t.mul_elem(a, b);
        let s = t.sum_all(c);
        let g = t.backward(s);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap(), &Matrix::from_elem((2, 2), 1.0));
    }
}
