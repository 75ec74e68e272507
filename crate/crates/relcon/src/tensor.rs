//! Dense 64-bit tensors and a reverse-mode gradient tape.
//!
//! Parameters are long-lived [`Tensor`] values that own their gradient
//! buffers. A [`Tape`] records one forward pass; [`Tape::backward`]
//! replays it in reverse and accumulates gradients into the tape's
//! leaves, from where callers copy them back into parameters. Dropping
//! the tape frees every intermediate buffer.

use crate::{Error, Result};

/// Dense row-major tensor. One or two dimensions; a 1-D tensor of
/// length `d` behaves as a `d x 1` column.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() || shape.is_empty() || shape.len() > 2 {
            return Err(Error::ShapeMismatch {
                op: "tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    /// Trainable tensor with i.i.d. normal entries.
    pub fn randn<R: rand::Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        use rand_distr_normal::draw_standard_normal;
        let n = shape.iter().product();
        let data = (0..n).map(|_| draw_standard_normal(rng) * std).collect();
        Tensor {
            shape,
            data,
            requires_grad: true,
            grad: None,
        }
    }

    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|x| *x = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let g = self
            .grad
            .get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

// rand_distr pulls a whole crate for one function; Box-Muller is enough here.
mod rand_distr_normal {
    pub fn draw_standard_normal<R: rand::Rng>(rng: &mut R) -> f64 {
        loop {
            let u1: f64 = rng.gen::<f64>();
            let u2: f64 = rng.gen::<f64>();
            if u1 > f64::MIN_POSITIVE {
                return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            }
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddColBias { a: Var, bias: Var },
    Tanh { a: Var },
    SoftmaxRows { a: Var },
    MaskFillCols { a: Var, mask: Vec<bool> },
    L2Normalize { a: Var, norm: f64 },
    Sum { a: Var },
    Dot { a: Var, b: Var },
    GatherRows { a: Var, idx: Vec<usize> },
    ConcatCols { parts: Vec<Var> },
    SliceCol { a: Var, col: usize },
    StackScalars { parts: Vec<Var> },
    LogSumExpRow { a: Var },
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

impl Node {
    fn shape_vec(&self) -> Vec<usize> {
        vec![self.rows, self.cols]
    }
}

/// Ordered record of executed primitive operations. Node order is a
/// topological order of the computation by construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(rows * cols, data.len());
        self.nodes.push(Node {
            rows,
            cols,
            data,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Copy a tensor onto the tape as a leaf. Gradients accumulate on
    /// the tape node; harvest them with [`Tape::grad`].
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.rows(),
            t.cols(),
            t.data.clone(),
            t.requires_grad,
            Op::Leaf,
        )
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch {
                op: "constant",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(rows, cols, data, false, Op::Leaf))
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.push(1, 1, vec![v], false, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.node(v).data.len(), 1);
        self.node(v).data[0]
    }

    /// Gradient buffer of a node, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    fn binary_elementwise_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.rows != nb.rows || na.cols != nb.cols {
            return Err(Error::ShapeMismatch {
                op,
                lhs: na.shape_vec(),
                rhs: nb.shape_vec(),
            });
        }
        Ok(())
    }

    /// Standard matrix product `a[p x q] * b[q x r]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        let (p, q, q2, r) = (na.rows, na.cols, nb.rows, nb.cols);
        if q != q2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: na.shape_vec(),
                rhs: nb.shape_vec(),
            });
        }
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            let arow = &na.data[i * q..(i + 1) * q];
            let orow = &mut out[i * r..(i + 1) * r];
            for (k, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = &nb.data[k * r..(k + 1) * r];
                for (o, &bkj) in orow.iter_mut().zip(brow) {
                    *o += aik * bkj;
                }
            }
        }
        let needs = na.needs_grad || nb.needs_grad;
        Ok(self.push(p, r, out, needs, Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let na = self.node(a);
        let (r, c) = (na.rows, na.cols);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = na.data[i * c + j];
            }
        }
        let needs = na.needs_grad;
        self.push(c, r, out, needs, Op::Transpose { a })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise_check("add", a, b)?;
        let (na, nb) = (self.node(a), self.node(b));
        let out = na.data.iter().zip(&nb.data).map(|(x, y)| x + y).collect();
        let needs = na.needs_grad || nb.needs_grad;
        Ok(self.push(na.rows, na.cols, out, needs, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise_check("sub", a, b)?;
        let (na, nb) = (self.node(a), self.node(b));
        let out = na.data.iter().zip(&nb.data).map(|(x, y)| x - y).collect();
        let needs = na.needs_grad || nb.needs_grad;
        Ok(self.push(na.rows, na.cols, out, needs, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise_check("mul", a, b)?;
        let (na, nb) = (self.node(a), self.node(b));
        let out = na.data.iter().zip(&nb.data).map(|(x, y)| x * y).collect();
        let needs = na.needs_grad || nb.needs_grad;
        Ok(self.push(na.rows, na.cols, out, needs, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let na = self.node(a);
        let out = na.data.iter().map(|x| x * c).collect();
        let needs = na.needs_grad;
        self.push(na.rows, na.cols, out, needs, Op::Scale { a, c })
    }

    /// Broadcast-add a column vector `bias[r x 1]` to every column of `a[r x c]`.
    pub fn add_col_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(bias));
        if nb.cols != 1 || nb.rows != na.rows {
            return Err(Error::ShapeMismatch {
                op: "add_col_bias",
                lhs: na.shape_vec(),
                rhs: nb.shape_vec(),
            });
        }
        let (r, c) = (na.rows, na.cols);
        let mut out = na.data.clone();
        for i in 0..r {
            let b = nb.data[i];
            for o in &mut out[i * c..(i + 1) * c] {
                *o += b;
            }
        }
        let needs = na.needs_grad || nb.needs_grad;
        Ok(self.push(r, c, out, needs, Op::AddColBias { a, bias }))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let na = self.node(a);
        let out = na.data.iter().map(|x| x.tanh()).collect();
        let needs = na.needs_grad;
        self.push(na.rows, na.cols, out, needs, Op::Tanh { a })
    }

    /// Row-wise softmax with max-subtraction. `-inf` entries get weight
    /// exactly zero; NaN or `+inf` entries are rejected; a row of only
    /// `-inf` is an empty-attention error.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let na = self.node(a);
        let (r, c) = (na.rows, na.cols);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &na.data[i * c..(i + 1) * c];
            let mut max = f64::NEG_INFINITY;
            for &x in row {
                if x.is_nan() || x == f64::INFINITY {
                    return Err(Error::NonFinite {
                        op: "softmax",
                        detail: format!("row {i} contains {x}"),
                    });
                }
                max = max.max(x);
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::EmptyAttention);
            }
            let orow = &mut out[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let needs = na.needs_grad;
        Ok(self.push(r, c, out, needs, Op::SoftmaxRows { a }))
    }

    /// Set masked columns to `-inf` across all rows. Gradient is zero
    /// through masked positions.
    pub fn mask_fill_cols(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let na = self.node(a);
        let (r, c) = (na.rows, na.cols);
        if mask.len() != c {
            return Err(Error::ShapeMismatch {
                op: "mask_fill_cols",
                lhs: na.shape_vec(),
                rhs: vec![mask.len()],
            });
        }
        let mut out = na.data.clone();
        for i in 0..r {
            for (j, &m) in mask.iter().enumerate() {
                if m {
                    out[i * c + j] = f64::NEG_INFINITY;
                }
            }
        }
        let needs = na.needs_grad;
        Ok(self.push(
            r,
            c,
            out,
            needs,
            Op::MaskFillCols {
                a,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Normalize a vector-shaped node to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let na = self.node(a);
        if na.rows != 1 && na.cols != 1 {
            return Err(Error::ShapeMismatch {
                op: "l2_normalize",
                lhs: na.shape_vec(),
                rhs: vec![1],
            });
        }
        let norm = na.data.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 1e-12) {
            return Err(Error::DegenerateVector {
                op: "l2_normalize",
                norm,
            });
        }
        let out = na.data.iter().map(|x| x / norm).collect();
        let needs = na.needs_grad;
        Ok(self.push(na.rows, na.cols, out, needs, Op::L2Normalize { a, norm }))
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, a: Var) -> Var {
        let na = self.node(a);
        let s = na.data.iter().sum();
        let needs = na.needs_grad;
        self.push(1, 1, vec![s], needs, Op::Sum { a })
    }

    /// Inner product of two vector-shaped nodes of equal length.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.data.len() != nb.data.len()
            || (na.rows != 1 && na.cols != 1)
            || (nb.rows != 1 && nb.cols != 1)
        {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: na.shape_vec(),
                rhs: nb.shape_vec(),
            });
        }
        let s = na.data.iter().zip(&nb.data).map(|(x, y)| x * y).sum();
        let needs = na.needs_grad || nb.needs_grad;
        Ok(self.push(1, 1, vec![s], needs, Op::Dot { a, b }))
    }

    /// Gather rows of `a[R x C]` into a new `[idx.len() x C]` node.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let na = self.node(a);
        let (r, c) = (na.rows, na.cols);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::IndexOutOfRange {
                    what: "gather_rows",
                    index: i,
                    limit: r,
                });
            }
            out.extend_from_slice(&na.data[i * c..(i + 1) * c]);
        }
        let needs = na.needs_grad;
        Ok(self.push(
            idx.len(),
            c,
            out,
            needs,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Concatenate nodes with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract {
                detail: "concat_cols of zero parts".into(),
            });
        }
        let r = self.node(parts[0]).rows;
        let mut cols = 0;
        let mut needs = false;
        for &p in parts {
            let n = self.node(p);
            if n.rows != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![r],
                    rhs: n.shape_vec(),
                });
            }
            cols += n.cols;
            needs |= n.needs_grad;
        }
        let mut out = vec![0.0; r * cols];
        let mut at = 0;
        for &p in parts {
            let n = self.node(p);
            for i in 0..r {
                out[i * cols + at..i * cols + at + n.cols]
                    .copy_from_slice(&n.data[i * n.cols..(i + 1) * n.cols]);
            }
            at += n.cols;
        }
        Ok(self.push(
            r,
            cols,
            out,
            needs,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Extract column `col` of `a[r x c]` as an `[r x 1]` node.
    pub fn slice_col(&mut self, a: Var, col: usize) -> Result<Var> {
        let na = self.node(a);
        let (r, c) = (na.rows, na.cols);
        if col >= c {
            return Err(Error::IndexOutOfRange {
                what: "slice_col",
                index: col,
                limit: c,
            });
        }
        let out = (0..r).map(|i| na.data[i * c + col]).collect();
        let needs = na.needs_grad;
        Ok(self.push(r, 1, out, needs, Op::SliceCol { a, col }))
    }

    /// Stack scalar nodes into a `[1 x k]` row.
    pub fn stack_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::with_capacity(parts.len());
        let mut needs = false;
        for &p in parts {
            let n = self.node(p);
            if n.data.len() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "stack_scalars",
                    lhs: n.shape_vec(),
                    rhs: vec![1, 1],
                });
            }
            out.push(n.data[0]);
            needs |= n.needs_grad;
        }
        Ok(self.push(
            1,
            parts.len(),
            out,
            needs,
            Op::StackScalars {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Stable log-sum-exp over a `[1 x L]` row, as a scalar node.
    pub fn log_sum_exp_row(&mut self, a: Var) -> Result<Var> {
        let na = self.node(a);
        if na.rows != 1 {
            return Err(Error::ShapeMismatch {
                op: "log_sum_exp_row",
                lhs: na.shape_vec(),
                rhs: vec![1],
            });
        }
        let mut max = f64::NEG_INFINITY;
        for &x in &na.data {
            if !x.is_finite() {
                return Err(Error::NonFinite {
                    op: "log_sum_exp",
                    detail: format!("{x}"),
                });
            }
            max = max.max(x);
        }
        let sum: f64 = na.data.iter().map(|&x| (x - max).exp()).sum();
        let lse = max + sum.ln();
        let needs = na.needs_grad;
        Ok(self.push(1, 1, vec![lse], needs, Op::LogSumExpRow { a }))
    }

    /// Reverse pass from a scalar node. Each call propagates in fresh
    /// scratch buffers and adds the result into node gradients, so
    /// repeated calls without a fresh tape accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        {
            let n = self.node(loss);
            if n.data.len() != 1 {
                return Err(Error::NotAScalar {
                    shape: n.shape_vec(),
                });
            }
        }
        let mut scratch: Vec<Option<Vec<f64>>> = Vec::new();
        scratch.resize_with(loss.0 + 1, || None);
        scratch[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || scratch[i].is_none() {
                continue;
            }
            let g = scratch[i].take().unwrap();
            self.step_backward(i, &g, &mut scratch);
            let n = &mut self.nodes[i];
            let acc = n.grad.get_or_insert_with(|| vec![0.0; n.data.len()]);
            for (x, d) in acc.iter_mut().zip(&g) {
                *x += d;
            }
        }
        Ok(())
    }

    fn step_backward(&self, i: usize, g: &[f64], scratch: &mut [Option<Vec<f64>>]) {
        let buf = |scratch: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var| -> Vec<f64> {
            scratch[v.0]
                .take()
                .unwrap_or_else(|| vec![0.0; nodes[v.0].data.len()])
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (p, q) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                let r = self.nodes[b.0].cols;
                if self.nodes[a.0].needs_grad {
                    // dL/da[i,k] = sum_j g[i,j] * b[k,j]
                    let bd = &self.nodes[b.0].data;
                    let mut ga = buf(scratch, &self.nodes, *a);
                    for ii in 0..p {
                        let grow = &g[ii * r..(ii + 1) * r];
                        let garow = &mut ga[ii * q..(ii + 1) * q];
                        for (k, d) in garow.iter_mut().enumerate() {
                            let brow = &bd[k * r..(k + 1) * r];
                            let mut s = 0.0;
                            for (&gj, &bj) in grow.iter().zip(brow) {
                                s += gj * bj;
                            }
                            *d += s;
                        }
                    }
                    scratch[a.0] = Some(ga);
                }
                if self.nodes[b.0].needs_grad {
                    // dL/db[k,j] = sum_i a[i,k] * g[i,j]
                    let ad = &self.nodes[a.0].data;
                    let mut gb = buf(scratch, &self.nodes, *b);
                    for ii in 0..p {
                        let grow = &g[ii * r..(ii + 1) * r];
                        let arow = &ad[ii * q..(ii + 1) * q];
                        for (k, &aik) in arow.iter().enumerate() {
                            if aik == 0.0 {
                                continue;
                            }
                            let gbrow = &mut gb[k * r..(k + 1) * r];
                            for (d, &gj) in gbrow.iter_mut().zip(grow) {
                                *d += aik * gj;
                            }
                        }
                    }
                    scratch[b.0] = Some(gb);
                }
            }
            Op::Transpose { a } => {
                if self.nodes[a.0].needs_grad {
                    let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let mut ga = buf(scratch, &self.nodes, *a);
                    for ii in 0..r {
                        for j in 0..c {
                            ga[ii * c + j] += g[j * r + ii];
                        }
                    }
                    scratch[a.0] = Some(ga);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.nodes[v.0].needs_grad {
                        let mut gv = buf(scratch, &self.nodes, v);
                        for (x, d) in gv.iter_mut().zip(g) {
                            *x += d;
                        }
                        scratch[v.0] = Some(gv);
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.nodes[a.0].needs_grad {
                    let mut ga = buf(scratch, &self.nodes, *a);
                    for (x, d) in ga.iter_mut().zip(g) {
                        *x += d;
                    }
                    scratch[a.0] = Some(ga);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = buf(scratch, &self.nodes, *b);
                    for (x, d) in gb.iter_mut().zip(g) {
                        *x -= d;
                    }
                    scratch[b.0] = Some(gb);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].needs_grad {
                    let bd = &self.nodes[b.0].data;
                    let mut ga = buf(scratch, &self.nodes, *a);
                    for ((x, d), y) in ga.iter_mut().zip(g).zip(bd) {
                        *x += d * y;
                    }
                    scratch[a.0] = Some(ga);
                }
                if self.nodes[b.0].needs_grad {
                    let ad = &self.nodes[a.0].data;
                    let mut gb = buf(scratch, &self.nodes, *b);
                    for ((x, d), y) in gb.iter_mut().zip(g).zip(ad) {
                        *x += d * y;
                    }
                    scratch[b.0] = Some(gb);
                }
            }
            Op::Scale { a, c } => {
                if self.nodes[a.0].needs_grad {
                    let mut ga = buf(scratch, &self.nodes, *a);
                    for (x, d) in ga.iter_mut().zip(g) {
                        *x += d * c;
                    }
                    scratch[a.0] = Some(ga);
                }
            }
            Op::AddColBias { a, bias } => {
                let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                if self.nodes[a.0].needs_grad {
                    let mut ga = buf(scratch, &self.nodes, *a);
                    for (x, d) in ga.iter_mut().zip(g) {
                        *x += d;
                    }
                    scratch[a.0] = Some(ga);
                }
                if self.nodes[bias.0].needs_grad {
                    let mut gb = buf(scratch, &self.nodes, *bias);
                    for ii in 0..r {
                        let mut s = 0.0;
                        for &d in &g[ii * c..(ii + 1) * c] {
                            s += d;
                        }
                        gb[ii] += s;
                    }
                    scratch[bias.0] = Some(gb);
                }
            }
            Op::Tanh { a } => {
                if self.nodes[a.0].needs_grad {
                    let y = &self.nodes[i].data;
                    let mut ga = buf(scratch, &self.nodes, *a);
                    for ((x, d), yi) in ga.iter_mut().zip(g).zip(y) {
                        *x += d * (1.0 - yi * yi);
                    }
                    scratch[a.0] = Some(ga);
                }
            }
            Op::SoftmaxRows { a } => {
                if self.nodes[a.0].needs_grad {
                    let (r, c) = (self.nodes[i].rows, self.nodes[i].cols);
                    let y = &self.nodes[i].data;
                    let mut ga = buf(scratch, &self.nodes, *a);
                    for ii in 0..r {
                        let yrow = &y[ii * c..(ii + 1) * c];
                        let grow = &g[ii * c..(ii + 1) * c];
                        let dotp: f64 = yrow.iter().zip(grow).map(|(s, d)| s * d).sum();
                        let garow = &mut ga[ii * c..(ii + 1) * c];
                        for ((x, &s), &d) in garow.iter_mut().zip(yrow).zip(grow) {
                            *x += s * (d - dotp);
                        }
                    }
                    scratch[a.0] = Some(ga);
                }
            }
            Op::MaskFillCols { a, mask } => {
                if self.nodes[a.0].needs_grad {
                    let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let mut ga = buf(scratch, &self.nodes, *a);
                    for ii in 0..r {
                        for (j, &m) in mask.iter().enumerate() {
                            if !m {
                                ga[ii * c + j] += g[ii * c + j];
                            }
                        }
                    }
                    scratch[a.0] = Some(ga);
                }
            }
            Op::L2Normalize { a, norm } => {
                if self.nodes[a.0].needs_grad {
                    let y = &self.nodes[i].data;
                    let dotp: f64 = y.iter().zip(g).map(|(yi, d)| yi * d).sum();
                    let mut ga = buf(scratch, &self.nodes, *a);
                    for ((x, d), yi) in ga.iter_mut().zip(g).zip(y) {
                        *x += (d - yi * dotp) / norm;
                    }
                    scratch[a.0] = Some(ga);
                }
            }
            Op::Sum { a } => {
                if self.nodes[a.0].needs_grad {
                    let d = g[0];
                    let mut ga = buf(scratch, &self.nodes, *a);
                    for x in ga.iter_mut() {
                        *x += d;
                    }
                    scratch[a.0] = Some(ga);
                }
            }
            Op::Dot { a, b } => {
                let d = g[0];
                if self.nodes[a.0].needs_grad {
                    let bd = &self.nodes[b.0].data;
                    let mut ga = buf(scratch, &self.nodes, *a);
                    for (x, y) in ga.iter_mut().zip(bd) {
                        *x += d * y;
                    }
                    scratch[a.0] = Some(ga);
                }
                if self.nodes[b.0].needs_grad {
                    let ad = &self.nodes[a.0].data;
                    let mut gb = buf(scratch, &self.nodes, *b);
                    for (x, y) in gb.iter_mut().zip(ad) {
                        *x += d * y;
                    }
                    scratch[b.0] = Some(gb);
                }
            }
            Op::GatherRows { a, idx } => {
                if self.nodes[a.0].needs_grad {
                    let c = self.nodes[a.0].cols;
                    let mut ga = buf(scratch, &self.nodes, *a);
                    for (k, &row) in idx.iter().enumerate() {
                        let grow = &g[k * c..(k + 1) * c];
                        let garow = &mut ga[row * c..(row + 1) * c];
                        for (x, d) in garow.iter_mut().zip(grow) {
                            *x += d;
                        }
                    }
                    scratch[a.0] = Some(ga);
                }
            }
            Op::ConcatCols { parts } => {
                let (r, cols) = (self.nodes[i].rows, self.nodes[i].cols);
                let mut at = 0;
                for &p in parts {
                    let pc = self.nodes[p.0].cols;
                    if self.nodes[p.0].needs_grad {
                        let mut gp = buf(scratch, &self.nodes, p);
                        for ii in 0..r {
                            let src = &g[ii * cols + at..ii * cols + at + pc];
                            let dst = &mut gp[ii * pc..(ii + 1) * pc];
                            for (x, d) in dst.iter_mut().zip(src) {
                                *x += d;
                            }
                        }
                        scratch[p.0] = Some(gp);
                    }
                    at += pc;
                }
            }
            Op::SliceCol { a, col } => {
                if self.nodes[a.0].needs_grad {
                    let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let mut ga = buf(scratch, &self.nodes, *a);
                    for ii in 0..r {
                        ga[ii * c + col] += g[ii];
                    }
                    scratch[a.0] = Some(ga);
                }
            }
            Op::StackScalars { parts } => {
                for (k, &p) in parts.iter().enumerate() {
                    if self.nodes[p.0].needs_grad {
                        let mut gp = buf(scratch, &self.nodes, p);
                        gp[0] += g[k];
                        scratch[p.0] = Some(gp);
                    }
                }
            }
            Op::LogSumExpRow { a } => {
                if self.nodes[a.0].needs_grad {
                    let lse = self.nodes[i].data[0];
                    let xs = &self.nodes[a.0].data;
                    let d = g[0];
                    let mut ga = buf(scratch, &self.nodes, *a);
                    for (x, &xi) in ga.iter_mut().zip(xs) {
                        *x += d * (xi - lse).exp();
                    }
                    scratch[a.0] = Some(ga);
                }
            }
        }
    }
}

/// Summary of a finite-difference gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compare an analytic gradient against central finite differences of
/// `f` over a flat parameter vector. `f` must be deterministic; it is
/// evaluated twice at `theta` to verify that.
pub fn grad_check(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    theta: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::Config {
            detail: format!("finite-difference step {step:e} outside [1e-7, 1e-3]"),
        });
    }
    if theta.len() != analytic.len() {
        return Err(Error::ShapeMismatch {
            op: "grad_check",
            lhs: vec![theta.len()],
            rhs: vec![analytic.len()],
        });
    }
    let v1 = f(theta)?;
    let v2 = f(theta)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(Error::Determinism {
            detail: format!("f returned {v1} then {v2} at the same point"),
        });
    }
    let mut work = theta.to_vec();
    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    for i in 0..theta.len() {
        let orig = work[i];
        work[i] = orig + step;
        let up = f(&work)?;
        work[i] = orig - step;
        let down = f(&work)?;
        work[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let rel = (analytic[i] - numeric).abs()
            / analytic[i].abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst_index,
        checked: theta.len(),
    })
}
