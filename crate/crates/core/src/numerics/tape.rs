//! Wengert-tape reverse-mode automatic differentiation.
//!
//! Every forward operation appends one node holding its op tag, input ids,
//! and output value. `backward` replays the tape in reverse, accumulating
//! gradients additively; values never read by the root get gradient zero.

use crate::error::{Error, Result};
use crate::numerics::params::ParamId;
use crate::numerics::tensor::Tensor;

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Elementwise op tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Sqrt,
}

impl UnaryOp {
    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Relu => "relu",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sqrt => "sqrt",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a[m,k] * b[k,n]
    MatMul,
    /// a[m,k] * b[n,k]^T
    MatMulNT,
    /// a[n,k]^T * b[n,p]
    MatMulTN,
    Add,
    Sub,
    Mul,
    Div,
    /// matrix + row broadcast
    AddRow,
    /// matrix * row broadcast
    MulRow,
    Scale(f64),
    AddConst(f64),
    /// tensor * 1-element tensor
    ScaleByVar,
    Unary(UnaryOp),
    SoftmaxLastDim,
    LayerNorm {
        eps: f64,
    },
    Clamp {
        lo: f64,
        hi: f64,
    },
    SumAll,
    MeanAll,
    SumLastDim,
    MinLastDim {
        argmins: Vec<usize>,
    },
    GatherRows {
        indices: Vec<usize>,
    },
    GatherCols {
        indices: Vec<usize>,
    },
    /// one element per row, by column index
    TakePerRow {
        cols: Vec<usize>,
    },
    SliceRows {
        start: usize,
        end: usize,
    },
    /// rows indexed by an (h,w) grid, replicated by `factor`
    UpsampleRows {
        h: usize,
        w: usize,
        factor: usize,
    },
    /// columns indexed by an (h,w) grid, replicated by `factor`
    UpsampleCols {
        h: usize,
        w: usize,
        factor: usize,
    },
    Reshape,
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
}

/// Ordered record of primitive operations with their values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// (var index, parameter id) for leaves bound to trainable storage.
    param_bindings: Vec<(usize, ParamId)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn param_bindings(&self) -> &[(usize, ParamId)] {
        &self.param_bindings
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor) -> Var {
        self.nodes.push(Node { op, inputs, value });
        Var(self.nodes.len() - 1)
    }

    /// Record a constant (gradient computed but typically discarded).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, vec![], value)
    }

    /// Record a leaf bound to a parameter, so its gradient can be routed
    /// back to the parameter's accumulator.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        let v = self.push(Op::Leaf, vec![], value);
        self.param_bindings.push((v.0, id));
        v
    }

    // ── binary matrix ops ───────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).matrix_dims()?;
        let (k2, n) = self.value(b).matrix_dims()?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul, vec![a.0, b.0], t))
    }

    /// a[m,k] · b[n,k]ᵀ → [m,n]
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).matrix_dims()?;
        let (n, k2) = self.value(b).matrix_dims()?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for p in 0..k {
                    acc += arow[p] * brow[p];
                }
                out[i * n + j] = acc;
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMulNT, vec![a.0, b.0], t))
    }

    /// a[n,k]ᵀ · b[n,p] → [k,p]; accumulation runs in ascending n for
    /// every output entry, so it matches a naive triple loop bit-for-bit.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).matrix_dims()?;
        let (n2, p) = self.value(b).matrix_dims()?;
        if n != n2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_tn",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut out = vec![0.0; k * p];
        for i in 0..n {
            let arow = &av[i * k..(i + 1) * k];
            let brow = &bv[i * p..(i + 1) * p];
            for q in 0..k {
                let aiq = arow[q];
                if aiq == 0.0 {
                    continue;
                }
                let orow = &mut out[q * p..(q + 1) * p];
                for j in 0..p {
                    orow[j] += aiq * brow[j];
                }
            }
        }
        let t = Tensor::new(vec![k, p], out)?;
        Ok(self.push(Op::MatMulTN, vec![a.0, b.0], t))
    }

    // ── elementwise binary ──────────────────────────────────────────

    fn zip(&mut self, op: Op, name: &'static str, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let f = |x: f64, y: f64| match op {
            Op::Add => x + y,
            Op::Sub => x - y,
            Op::Mul => x * y,
            Op::Div => x / y,
            _ => unreachable!(),
        };
        let vals: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), vals)?;
        Ok(self.push(op, vec![a.0, b.0], t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Div, "div", a, b)
    }

    fn row_broadcast(&mut self, op: Op, name: &'static str, m: Var, row: Var) -> Result<Var> {
        let (rows, cols) = self.value(m).matrix_dims()?;
        let (rrows, rcols) = self.value(row).matrix_dims()?;
        if rrows != 1 || rcols != cols {
            return Err(Error::ShapeMismatch {
                op: name,
                left: self.value(m).shape().to_vec(),
                right: self.value(row).shape().to_vec(),
            });
        }
        let mv = self.value(m).values();
        let rv = self.value(row).values();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let x = mv[i * cols + j];
                out.push(match op {
                    Op::AddRow => x + rv[j],
                    Op::MulRow => x * rv[j],
                    _ => unreachable!(),
                });
            }
        }
        let t = Tensor::new(self.value(m).shape().to_vec(), out)?;
        Ok(self.push(op, vec![m.0, row.0], t))
    }

    /// matrix + row (broadcast over rows)
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        self.row_broadcast(Op::AddRow, "add_row", m, row)
    }

    /// matrix ⊙ row (broadcast over rows)
    pub fn mul_row(&mut self, m: Var, row: Var) -> Result<Var> {
        self.row_broadcast(Op::MulRow, "mul_row", m, row)
    }

    // ── scalar-constant ops ─────────────────────────────────────────

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let vals: Vec<f64> = self.value(a).values().iter().map(|&x| x * c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), vals).expect("same shape");
        self.push(Op::Scale(c), vec![a.0], t)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let vals: Vec<f64> = self.value(a).values().iter().map(|&x| x + c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), vals).expect("same shape");
        self.push(Op::AddConst(c), vec![a.0], t)
    }

    /// tensor × scalar variable (1-element tensor)
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let vals: Vec<f64> = self.value(a).values().iter().map(|&x| x * sv).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), vals)?;
        Ok(self.push(Op::ScaleByVar, vec![a.0, s.0], t))
    }

    // ── elementwise unary ("elementwise" in the module contract) ────

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let src = self.value(a).values();
        // domain checks with the offending index
        match op {
            UnaryOp::Log => {
                if let Some(i) = src.iter().position(|&x| x <= 0.0) {
                    return Err(Error::Domain {
                        op: "log",
                        value: src[i],
                        index: i,
                    });
                }
            }
            UnaryOp::Sqrt => {
                if let Some(i) = src.iter().position(|&x| x < 0.0) {
                    return Err(Error::Domain {
                        op: "sqrt",
                        value: src[i],
                        index: i,
                    });
                }
            }
            _ => {}
        }
        let f = |x: f64| match op {
            UnaryOp::Sigmoid => {
                // split on sign for stability
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Sqrt => x.sqrt(),
        };
        let vals: Vec<f64> = src.iter().map(|&x| f(x)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), vals)?;
        Ok(self.push(Op::Unary(op), vec![a.0], t))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a).expect("no domain")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a).expect("no domain")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a).expect("no domain")
    }

    // ── structured ops ──────────────────────────────────────────────

    /// Row-stochastic softmax over the last dimension, computed with
    /// max-subtraction.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let cols = *shape.last().ok_or_else(|| Error::ShapeMismatch {
            op: "softmax_lastdim",
            left: shape.clone(),
            right: vec![],
        })?;
        if cols == 0 {
            return Err(Error::ShapeMismatch {
                op: "softmax_lastdim",
                left: shape,
                right: vec![],
            });
        }
        let src = self.value(a).values();
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(cols) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / sum));
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(Op::SoftmaxLastDim, vec![a.0], t))
    }

    /// Per-row standardization with affine output, epsilon inside the
    /// square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (rows, cols) = self.value(x).matrix_dims()?;
        let (_, gc) = self.value(gain).matrix_dims()?;
        let (_, bc) = self.value(bias).matrix_dims()?;
        if gc != cols || bc != cols {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: self.value(x).shape().to_vec(),
                right: self.value(gain).shape().to_vec(),
            });
        }
        let xv = self.value(x).values();
        let gv = self.value(gain).values();
        let bv = self.value(bias).values();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let row = &xv[i * cols..(i + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            for j in 0..cols {
                out.push((row[j] - mean) * inv * gv[j] + bv[j]);
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(Op::LayerNorm { eps: EPS }, vec![x.0, gain.0, bias.0], t))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let vals: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .map(|&x| x.clamp(lo, hi))
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), vals).expect("same shape");
        self.push(Op::Clamp { lo, hi }, vec![a.0], t)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).values().iter().sum();
        self.push(Op::SumAll, vec![a.0], Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).values().iter().sum();
        self.push(Op::MeanAll, vec![a.0], Tensor::scalar(s / n))
    }

    /// [m,n] → [m]: per-row sum.
    pub fn sum_lastdim(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).matrix_dims()?;
        let src = self.value(a).values();
        let out: Vec<f64> = (0..rows)
            .map(|i| src[i * cols..(i + 1) * cols].iter().sum())
            .collect();
        let t = Tensor::new(vec![rows], out)?;
        Ok(self.push(Op::SumLastDim, vec![a.0], t))
    }

    /// [m,n] → [m]: per-row minimum; gradient routes to the first argmin.
    pub fn min_lastdim(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).matrix_dims()?;
        let src = self.value(a).values();
        let mut out = Vec::with_capacity(rows);
        let mut argmins = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = &src[i * cols..(i + 1) * cols];
            let mut best = 0;
            for j in 1..cols {
                if row[j] < row[best] {
                    best = j;
                }
            }
            out.push(row[best]);
            argmins.push(best);
        }
        let t = Tensor::new(vec![rows], out)?;
        Ok(self.push(Op::MinLastDim { argmins }, vec![a.0], t))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(a).matrix_dims()?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "gather_rows: index {bad} out of {rows} rows"
            )));
        }
        let src = self.value(a).values();
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let t = Tensor::new(vec![indices.len(), cols], out)?;
        Ok(self.push(
            Op::GatherRows {
                indices: indices.to_vec(),
            },
            vec![a.0],
            t,
        ))
    }

    pub fn gather_cols(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(a).matrix_dims()?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= cols) {
            return Err(Error::contract(format!(
                "gather_cols: index {bad} out of {cols} cols"
            )));
        }
        let src = self.value(a).values();
        let mut out = Vec::with_capacity(rows * indices.len());
        for i in 0..rows {
            for &j in indices {
                out.push(src[i * cols + j]);
            }
        }
        let t = Tensor::new(vec![rows, indices.len()], out)?;
        Ok(self.push(
            Op::GatherCols {
                indices: indices.to_vec(),
            },
            vec![a.0],
            t,
        ))
    }

    /// [m,n] → [m]: element (i, cols[i]) per row.
    pub fn take_per_row(&mut self, a: Var, cols_idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(a).matrix_dims()?;
        if cols_idx.len() != rows {
            return Err(Error::contract(format!(
                "take_per_row: {} indices for {rows} rows",
                cols_idx.len()
            )));
        }
        if let Some(&bad) = cols_idx.iter().find(|&&j| j >= cols) {
            return Err(Error::contract(format!(
                "take_per_row: column {bad} out of {cols}"
            )));
        }
        let src = self.value(a).values();
        let out: Vec<f64> = cols_idx
            .iter()
            .enumerate()
            .map(|(i, &j)| src[i * cols + j])
            .collect();
        let t = Tensor::new(vec![rows], out)?;
        Ok(self.push(
            Op::TakePerRow {
                cols: cols_idx.to_vec(),
            },
            vec![a.0],
            t,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).matrix_dims()?;
        if start >= end || end > rows {
            return Err(Error::contract(format!(
                "slice_rows: range {start}..{end} out of {rows} rows"
            )));
        }
        let src = self.value(a).values();
        let out = src[start * cols..end * cols].to_vec();
        let t = Tensor::new(vec![end - start, cols], out)?;
        Ok(self.push(Op::SliceRows { start, end }, vec![a.0], t))
    }

    /// Rows form an h×w grid; replicate each into a factor×factor block:
    /// [(h·w), c] → [(h·f·w·f), c].
    pub fn upsample_rows(&mut self, a: Var, h: usize, w: usize, factor: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).matrix_dims()?;
        if rows != h * w || factor == 0 {
            return Err(Error::contract(format!(
                "upsample_rows: {rows} rows vs grid {h}x{w}, factor {factor}"
            )));
        }
        let src = self.value(a).values();
        let (hh, ww) = (h * factor, w * factor);
        let mut out = Vec::with_capacity(hh * ww * cols);
        for y in 0..hh {
            for x in 0..ww {
                let sy = y / factor;
                let sx = x / factor;
                let r = sy * w + sx;
                out.extend_from_slice(&src[r * cols..(r + 1) * cols]);
            }
        }
        let t = Tensor::new(vec![hh * ww, cols], out)?;
        Ok(self.push(Op::UpsampleRows { h, w, factor }, vec![a.0], t))
    }

    /// Columns form an h×w grid; [r, (h·w)] → [r, (h·f·w·f)].
    pub fn upsample_cols(&mut self, a: Var, h: usize, w: usize, factor: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).matrix_dims()?;
        if cols != h * w || factor == 0 {
            return Err(Error::contract(format!(
                "upsample_cols: {cols} cols vs grid {h}x{w}, factor {factor}"
            )));
        }
        let src = self.value(a).values();
        let (hh, ww) = (h * factor, w * factor);
        let mut out = Vec::with_capacity(rows * hh * ww);
        for i in 0..rows {
            let row = &src[i * cols..(i + 1) * cols];
            for y in 0..hh {
                for x in 0..ww {
                    out.push(row[(y / factor) * w + (x / factor)]);
                }
            }
        }
        let t = Tensor::new(vec![rows, hh * ww], out)?;
        Ok(self.push(Op::UpsampleCols { h, w, factor }, vec![a.0], t))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::contract(format!(
                "reshape: {:?} to {shape:?}",
                self.value(a).shape()
            )));
        }
        let t = Tensor::new(shape, self.value(a).values().to_vec())?;
        Ok(self.push(Op::Reshape, vec![a.0], t))
    }

    // ── reverse pass ────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar root with respect to every tape
    /// value. Entries left `None` were never reached (gradient zero).
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: usize, delta: &[f64]) {
        let entry = grads[target].get_or_insert_with(|| {
            Tensor::zeros(self.nodes[target].value.shape().to_vec())
        });
        for (dst, &d) in entry.values_mut().iter_mut().zip(delta) {
            *dst += d;
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gv = g.values();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (m, k) = self.nodes[a].value.matrix_dims().unwrap();
                let (_, n) = self.nodes[b].value.matrix_dims().unwrap();
                let av = self.nodes[a].value.values();
                let bv = self.nodes[b].value.values();
                // dA = dC · Bᵀ
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += gv[i * n + j] * bv[p * n + j];
                        }
                        da[i * k + p] = acc;
                    }
                }
                // dB = Aᵀ · dC
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += aip * gv[i * n + j];
                        }
                    }
                }
                self.accumulate(grads, a, &da);
                self.accumulate(grads, b, &db);
            }
            Op::MatMulNT => {
                // C = A · Bᵀ; dA = dC · B, dB = dCᵀ · A
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (m, k) = self.nodes[a].value.matrix_dims().unwrap();
                let (n, _) = self.nodes[b].value.matrix_dims().unwrap();
                let av = self.nodes[a].value.values();
                let bv = self.nodes[b].value.values();
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = gv[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            da[i * k + p] += gij * bv[j * k + p];
                        }
                    }
                }
                let mut db = vec![0.0; n * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = gv[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            db[j * k + p] += gij * av[i * k + p];
                        }
                    }
                }
                self.accumulate(grads, a, &da);
                self.accumulate(grads, b, &db);
            }
            Op::MatMulTN => {
                // C = Aᵀ · B (A: n×k, B: n×p); dA = B · dCᵀ, dB = A · dC
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (n, k) = self.nodes[a].value.matrix_dims().unwrap();
                let (_, p) = self.nodes[b].value.matrix_dims().unwrap();
                let av = self.nodes[a].value.values();
                let bv = self.nodes[b].value.values();
                let mut da = vec![0.0; n * k];
                let mut db = vec![0.0; n * p];
                for i in 0..n {
                    for q in 0..k {
                        let mut acc = 0.0;
                        for j in 0..p {
                            acc += bv[i * p + j] * gv[q * p + j];
                        }
                        da[i * k + q] = acc;
                    }
                    for j in 0..p {
                        let mut acc = 0.0;
                        for q in 0..k {
                            acc += av[i * k + q] * gv[q * p + j];
                        }
                        db[i * p + j] = acc;
                    }
                }
                self.accumulate(grads, a, &da);
                self.accumulate(grads, b, &db);
            }
            Op::Add => {
                self.accumulate(grads, node.inputs[0], gv);
                self.accumulate(grads, node.inputs[1], gv);
            }
            Op::Sub => {
                self.accumulate(grads, node.inputs[0], gv);
                let neg: Vec<f64> = gv.iter().map(|&x| -x).collect();
                self.accumulate(grads, node.inputs[1], &neg);
            }
            Op::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let av = self.nodes[a].value.values();
                let bv = self.nodes[b].value.values();
                let da: Vec<f64> = gv.iter().zip(bv).map(|(&g, &y)| g * y).collect();
                let db: Vec<f64> = gv.iter().zip(av).map(|(&g, &x)| g * x).collect();
                self.accumulate(grads, a, &da);
                self.accumulate(grads, b, &db);
            }
            Op::Div => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let bv = self.nodes[b].value.values();
                let cv = node.value.values();
                let da: Vec<f64> = gv.iter().zip(bv).map(|(&g, &y)| g / y).collect();
                let db: Vec<f64> = gv
                    .iter()
                    .zip(cv.iter().zip(bv))
                    .map(|(&g, (&c, &y))| -g * c / y)
                    .collect();
                self.accumulate(grads, a, &da);
                self.accumulate(grads, b, &db);
            }
            Op::AddRow => {
                let (m, row) = (node.inputs[0], node.inputs[1]);
                let (rows, cols) = self.nodes[m].value.matrix_dims().unwrap();
                self.accumulate(grads, m, gv);
                let mut dr = vec![0.0; cols];
                for i in 0..rows {
                    for j in 0..cols {
                        dr[j] += gv[i * cols + j];
                    }
                }
                self.accumulate(grads, row, &dr);
            }
            Op::MulRow => {
                let (m, row) = (node.inputs[0], node.inputs[1]);
                let (rows, cols) = self.nodes[m].value.matrix_dims().unwrap();
                let mv = self.nodes[m].value.values();
                let rv = self.nodes[row].value.values();
                let mut dm = vec![0.0; rows * cols];
                let mut dr = vec![0.0; cols];
                for i in 0..rows {
                    for j in 0..cols {
                        let gij = gv[i * cols + j];
                        dm[i * cols + j] = gij * rv[j];
                        dr[j] += gij * mv[i * cols + j];
                    }
                }
                self.accumulate(grads, m, &dm);
                self.accumulate(grads, row, &dr);
            }
            Op::Scale(c) => {
                let da: Vec<f64> = gv.iter().map(|&g| g * c).collect();
                self.accumulate(grads, node.inputs[0], &da);
            }
            Op::AddConst(_) => {
                self.accumulate(grads, node.inputs[0], gv);
            }
            Op::ScaleByVar => {
                let (a, s) = (node.inputs[0], node.inputs[1]);
                let sv = self.nodes[s].value.values()[0];
                let av = self.nodes[a].value.values();
                let da: Vec<f64> = gv.iter().map(|&g| g * sv).collect();
                let ds: f64 = gv.iter().zip(av).map(|(&g, &x)| g * x).sum();
                self.accumulate(grads, a, &da);
                self.accumulate(grads, s, &[ds]);
            }
            Op::Unary(op) => {
                let a = node.inputs[0];
                let xv = self.nodes[a].value.values();
                let yv = node.value.values();
                let da: Vec<f64> = gv
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| {
                        let d = match op {
                            UnaryOp::Sigmoid => yv[i] * (1.0 - yv[i]),
                            UnaryOp::Tanh => 1.0 - yv[i] * yv[i],
                            UnaryOp::Relu => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Exp => yv[i],
                            UnaryOp::Log => 1.0 / xv[i],
                            UnaryOp::Sqrt => 0.5 / yv[i],
                        };
                        g * d
                    })
                    .collect();
                self.accumulate(grads, a, &da);
            }
            Op::SoftmaxLastDim => {
                let a = node.inputs[0];
                let yv = node.value.values();
                let cols = *node.value.shape().last().unwrap();
                let mut da = vec![0.0; yv.len()];
                for (r, (yrow, grow)) in yv.chunks(cols).zip(gv.chunks(cols)).enumerate() {
                    let dot: f64 = yrow.iter().zip(grow).map(|(&y, &g)| y * g).sum();
                    for j in 0..cols {
                        da[r * cols + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(grads, a, &da);
            }
            Op::LayerNorm { eps } => {
                let (x, gain, bias) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let (rows, cols) = self.nodes[x].value.matrix_dims().unwrap();
                let xv = self.nodes[x].value.values();
                let gv2 = self.nodes[gain].value.values();
                let mut dx = vec![0.0; rows * cols];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                let n = cols as f64;
                for i in 0..rows {
                    let row = &xv[i * cols..(i + 1) * cols];
                    let grow = &gv[i * cols..(i + 1) * cols];
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> =
                        grow.iter().zip(gv2).map(|(&g, &gn)| g * gn).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / n;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(&d, &h)| d * h).sum::<f64>() / n;
                    for j in 0..cols {
                        dx[i * cols + j] =
                            inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                    }
                }
                self.accumulate(grads, x, &dx);
                self.accumulate(grads, gain, &dgain);
                self.accumulate(grads, bias, &dbias);
            }
            Op::Clamp { lo, hi } => {
                let a = node.inputs[0];
                let xv = self.nodes[a].value.values();
                let da: Vec<f64> = gv
                    .iter()
                    .zip(xv)
                    .map(|(&g, &x)| if x >= *lo && x <= *hi { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, a, &da);
            }
            Op::SumAll => {
                let a = node.inputs[0];
                let n = self.nodes[a].value.numel();
                let da = vec![gv[0]; n];
                self.accumulate(grads, a, &da);
            }
            Op::MeanAll => {
                let a = node.inputs[0];
                let n = self.nodes[a].value.numel();
                let da = vec![gv[0] / n as f64; n];
                self.accumulate(grads, a, &da);
            }
            Op::SumLastDim => {
                let a = node.inputs[0];
                let (rows, cols) = self.nodes[a].value.matrix_dims().unwrap();
                let mut da = vec![0.0; rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        da[i * cols + j] = gv[i];
                    }
                }
                self.accumulate(grads, a, &da);
            }
            Op::MinLastDim { argmins } => {
                let a = node.inputs[0];
                let (rows, cols) = self.nodes[a].value.matrix_dims().unwrap();
                let mut da = vec![0.0; rows * cols];
                for i in 0..rows {
                    da[i * cols + argmins[i]] = gv[i];
                }
                self.accumulate(grads, a, &da);
            }
            Op::GatherRows { indices } => {
                let a = node.inputs[0];
                let (rows, cols) = self.nodes[a].value.matrix_dims().unwrap();
                let mut da = vec![0.0; rows * cols];
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..cols {
                        da[i * cols + j] += gv[k * cols + j];
                    }
                }
                self.accumulate(grads, a, &da);
            }
            Op::GatherCols { indices } => {
                let a = node.inputs[0];
                let (rows, cols) = self.nodes[a].value.matrix_dims().unwrap();
                let sel = indices.len();
                let mut da = vec![0.0; rows * cols];
                for i in 0..rows {
                    for (k, &j) in indices.iter().enumerate() {
                        da[i * cols + j] += gv[i * sel + k];
                    }
                }
                self.accumulate(grads, a, &da);
            }
            Op::TakePerRow { cols: cidx } => {
                let a = node.inputs[0];
                let (rows, cols) = self.nodes[a].value.matrix_dims().unwrap();
                let mut da = vec![0.0; rows * cols];
                for i in 0..rows {
                    da[i * cols + cidx[i]] += gv[i];
                }
                self.accumulate(grads, a, &da);
            }
            Op::SliceRows { start, .. } => {
                let a = node.inputs[0];
                let (rows, cols) = self.nodes[a].value.matrix_dims().unwrap();
                let mut da = vec![0.0; rows * cols];
                da[start * cols..start * cols + gv.len()].copy_from_slice(gv);
                self.accumulate(grads, a, &da);
            }
            Op::UpsampleRows { h, w, factor } => {
                let a = node.inputs[0];
                let (_, cols) = self.nodes[a].value.matrix_dims().unwrap();
                let (hh, ww) = (h * factor, w * factor);
                let mut da = vec![0.0; h * w * cols];
                for y in 0..hh {
                    for x in 0..ww {
                        let src = (y / factor) * w + (x / factor);
                        let dst = y * ww + x;
                        for j in 0..cols {
                            da[src * cols + j] += gv[dst * cols + j];
                        }
                    }
                }
                self.accumulate(grads, a, &da);
            }
            Op::UpsampleCols { h, w, factor } => {
                let a = node.inputs[0];
                let (rows, _) = self.nodes[a].value.matrix_dims().unwrap();
                let (hh, ww) = (h * factor, w * factor);
                let cols_out = hh * ww;
                let mut da = vec![0.0; rows * h * w];
                for i in 0..rows {
                    for y in 0..hh {
                        for x in 0..ww {
                            let src = (y / factor) * w + (x / factor);
                            da[i * h * w + src] += gv[i * cols_out + y * ww + x];
                        }
                    }
                }
                self.accumulate(grads, a, &da);
            }
            Op::Reshape => {
                self.accumulate(grads, node.inputs[0], gv);
            }
        }
    }
}

/// Gradient map produced by one reverse pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the given var; `None` means exactly zero (never read).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_case() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = tape.leaf(t2(&[vec![3.0], vec![4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).values(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_scalar_oracle() {
        // [[1,2]] x [[3],[4]] = [[1*3 + 2*4]] = [[11]]
        let mut tape = Tape::new();
        let a = tape.leaf(t2(&[vec![1.0, 2.0]]));
        let b = tape.leaf(t2(&[vec![3.0], vec![4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).values(), &[11.0]);
    }

    #[test]
    fn matmul_zero_case() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(t2(&[vec![1.0], vec![2.0], vec![3.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert!(tape.value(c).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![2, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap());
        let y = tape.softmax_lastdim(x).unwrap();
        for &v in tape.value(y).values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_inputs_stable() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let y = tape.softmax_lastdim(x).unwrap();
        let v = tape.value(y).values();
        assert!(v[0] > 0.999_999 && v[1] < 1e-6);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_exp_normalize_oracle() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.softmax_lastdim(x).unwrap();
        let z: f64 = (1f64).exp() + (2f64).exp() + (3f64).exp();
        let expect = [(1f64).exp() / z, (2f64).exp() / z, (3f64).exp() / z];
        for (a, e) in tape.value(y).values().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-14);
        }
        let sum: f64 = tape.value(y).values().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).values()[0], 0.5);
        let t = tape.tanh(x);
        assert_eq!(tape.value(t).values()[0], 0.0);
        let h = tape.leaf(Tensor::scalar(0.5));
        let th = tape.tanh(h);
        assert!((tape.value(th).values()[0] - 0.4621171573).abs() < 1e-9);
    }

    #[test]
    fn log_domain_error_reports_index() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
        match tape.unary(UnaryOp::Log, x) {
            Err(Error::Domain { index, value, .. }) => {
                assert_eq!(index, 1);
                assert_eq!(value, -2.0);
            }
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let gain = tape.leaf(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let bias = tape.leaf(Tensor::zeros(vec![2]));

        // constant row maps to zeros
        let x = tape.leaf(t2(&[vec![5.0, 5.0]]));
        let y = tape.layer_norm(x, gain, bias).unwrap();
        assert!(tape.value(y).values().iter().all(|&v| v == 0.0));

        // row [1,-1]: mean 0, var 1 -> close to [1,-1]
        let x2 = tape.leaf(t2(&[vec![1.0, -1.0]]));
        let y2 = tape.layer_norm(x2, gain, bias).unwrap();
        let v = tape.value(y2).values();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((v[0] - expect).abs() < 1e-12 && (v[1] + expect).abs() < 1e-12);

        // zero gain -> bias broadcast
        let g0 = tape.leaf(Tensor::zeros(vec![2]));
        let b2 = tape.leaf(Tensor::new(vec![2], vec![7.0, -3.0]).unwrap());
        let x3 = tape.leaf(t2(&[vec![0.3, 0.9], vec![2.0, -1.0]]));
        let y3 = tape.layer_norm(x3, g0, b2).unwrap();
        assert_eq!(tape.value(y3).values(), &[7.0, -3.0, 7.0, -3.0]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let s = tape.sum_all(p);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().values(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_analytic() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(p, p).unwrap();
        let s = tape.sum_all(sq);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().values(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::zeros(vec![2]));
        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn unread_value_has_zero_gradient() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let q = tape.leaf(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let s = tape.sum_all(p);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(q).is_none());
    }

    #[test]
    fn bitwise_deterministic_gradients() {
        let build = || {
            let mut tape = Tape::new();
            let a = tape.leaf(t2(&[vec![0.3, -0.7], vec![1.2, 0.4]]));
            let b = tape.leaf(t2(&[vec![0.9, 0.1], vec![-0.5, 2.0]]));
            let c = tape.matmul(a, b).unwrap();
            let d = tape.sigmoid(c);
            let s = tape.mean_all(d);
            let g = tape.backward(s).unwrap();
            (
                g.get(a).unwrap().values().to_vec(),
                g.get(b).unwrap().values().to_vec(),
            )
        };
        let (a1, b1) = build();
        let (a2, b2) = build();
        assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(b1.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
