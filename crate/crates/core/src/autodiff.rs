//! Tape-based reverse-mode differentiation over 2-D matrices.
//!
//! Every node holds a row-major matrix value. Rank-1 parameters enter the
//! tape as `1×n` rows and scalars as `1×1`. Each op checks its output for
//! non-finite values and reports the op name on failure.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// GELU tanh-approximation coefficients (√(2/π) and the cubic term).
pub const GELU_C: f64 = 0.797_884_560_8;
pub const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn add_assign(&mut self, other: &[f64]) {
        for (a, b) in self.data.iter_mut().zip(other) {
            *a += b;
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Gelu(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    Slice {
        x: Var,
        r0: usize,
        c0: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that needs one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient as a matrix-shaped tensor, or zeros if the loss does not
    /// depend on `v`.
    pub fn get(&self, graph: &Graph, v: Var) -> Tensor {
        let node = &graph.nodes[v.0];
        match &self.grads[v.0] {
            Some(m) => Tensor::from_parts(vec![m.rows, m.cols], m.data.clone()),
            None => Tensor::zeros(&[node.value.rows, node.value.cols]),
        }
    }

    /// Gradient reshaped to `shape`.
    pub fn get_shaped(&self, graph: &Graph, v: Var, shape: &[usize]) -> Tensor {
        let t = self.get(graph, v);
        Tensor::from_parts(shape.to_vec(), t.into_data())
    }
}

fn check(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: &'static str, value: Mat, kind: Op, inputs: &[Var]) -> Result<Var> {
        check(op, &value.data)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op: kind,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, t: &Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Mat {
                rows: t.rows(),
                cols: t.cols(),
                data: t.data().to_vec(),
            },
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn constant_matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        self.nodes.push(Node {
            value: Mat { rows, cols, data },
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let m = &self.nodes[v.0].value;
        (m.rows, m.cols)
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn value(&self, v: Var) -> Tensor {
        let m = &self.nodes[v.0].value;
        Tensor::from_parts(vec![m.rows, m.cols], m.data.clone())
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    fn mat(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    // ---- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, mb) = (self.mat(a), self.mat(b));
        if ma.cols != mb.rows {
            return Err(Error::shape(
                "matmul",
                format!("{}x{} @ {}x{}", ma.rows, ma.cols, mb.rows, mb.cols),
            ));
        }
        let data = linalg::matmul(&ma.data, &mb.data, ma.rows, ma.cols, mb.cols);
        let value = Mat {
            rows: ma.rows,
            cols: mb.cols,
            data,
        };
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, mb) = (self.mat(a), self.mat(b));
        if ma.cols != mb.cols {
            return Err(Error::shape(
                "matmul_nt",
                format!("{}x{} @ ({}x{})^T", ma.rows, ma.cols, mb.rows, mb.cols),
            ));
        }
        let data = linalg::matmul_nt(&ma.data, &mb.data, ma.rows, ma.cols, mb.rows);
        let value = Mat {
            rows: ma.rows,
            cols: mb.rows,
            data,
        };
        self.push("matmul_nt", value, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let m = self.mat(a);
        let value = Mat {
            rows: m.cols,
            cols: m.rows,
            data: linalg::transpose(&m.data, m.rows, m.cols),
        };
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        let (ma, mb) = (self.mat(a), self.mat(b));
        if (ma.rows, ma.cols) != (mb.rows, mb.cols) {
            return Err(Error::shape(
                op,
                format!("{}x{} vs {}x{}", ma.rows, ma.cols, mb.rows, mb.cols),
            ));
        }
        Ok(Mat {
            rows: ma.rows,
            cols: ma.cols,
            data: ma.data.iter().zip(&mb.data).map(|(x, y)| f(*x, *y)).collect(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ma, mr) = (self.mat(a), self.mat(row));
        if mr.rows != 1 || mr.cols != ma.cols {
            return Err(Error::shape(
                "add_row",
                format!("{}x{} + row {}x{}", ma.rows, ma.cols, mr.rows, mr.cols),
            ));
        }
        let mut data = ma.data.clone();
        for chunk in data.chunks_mut(ma.cols) {
            for (x, b) in chunk.iter_mut().zip(&mr.data) {
                *x += b;
            }
        }
        let value = Mat {
            rows: ma.rows,
            cols: ma.cols,
            data,
        };
        self.push("add_row", value, Op::AddRow(a, row), &[a, row])
    }

    fn unary(&mut self, op: &'static str, a: Var, kind: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let m = self.mat(a);
        let value = Mat {
            rows: m.rows,
            cols: m.cols,
            data: m.data.iter().map(|&x| f(x)).collect(),
        };
        self.push(op, value, kind, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, Op::AddScalar(a), |x| x + c)
    }

    /// Multiplies every entry of `a` by the `1×1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let ms = self.mat(s);
        if ms.data.len() != 1 {
            return Err(Error::shape("scale_by", "scale must be 1x1"));
        }
        let c = ms.data[0];
        let m = self.mat(a);
        let value = Mat {
            rows: m.rows,
            cols: m.cols,
            data: m.data.iter().map(|x| x * c).collect(),
        };
        self.push("scale_by", value, Op::ScaleBy(a, s), &[a, s])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, Op::Log(a), f64::ln)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, Op::Gelu(a), gelu)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let m = self.mat(a);
        let mut data = m.data.clone();
        for row in data.chunks_mut(m.cols) {
            softmax_in_place(row);
        }
        let value = Mat {
            rows: m.rows,
            cols: m.cols,
            data,
        };
        self.push("softmax_rows", value, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let m = self.mat(a);
        let mut data = m.data.clone();
        for row in data.chunks_mut(m.cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let value = Mat {
            rows: m.rows,
            cols: m.cols,
            data,
        };
        self.push("log_softmax_rows", value, Op::LogSoftmaxRows(a), &[a])
    }

    /// Row-wise LayerNorm with affine `gamma`, `beta` (both `1×n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (mx, mg, mb) = (self.mat(x), self.mat(gamma), self.mat(beta));
        let n = mx.cols;
        if mg.data.len() != n || mb.data.len() != n {
            return Err(Error::shape("layer_norm", "affine width mismatch"));
        }
        let mut xhat = vec![0.0; mx.data.len()];
        let mut rstd = vec![0.0; mx.rows];
        let mut out = vec![0.0; mx.data.len()];
        for r in 0..mx.rows {
            let row = &mx.data[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * mg.data[c] + mb.data[c];
            }
        }
        let value = Mat {
            rows: mx.rows,
            cols: n,
            data: out,
        };
        let kind = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        self.push("layer_norm", value, kind, &[x, gamma, beta])
    }

    /// Divides each row by `max(‖row‖₂, 1e-12)`.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let m = self.mat(x);
        let mut norms = Vec::with_capacity(m.rows);
        let mut data = m.data.clone();
        for row in data.chunks_mut(m.cols) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let value = Mat {
            rows: m.rows,
            cols: m.cols,
            data,
        };
        self.push("l2_normalize_rows", value, Op::L2NormalizeRows { x, norms }, &[x])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.mat(a).data.iter().sum();
        self.push("sum_all", Mat { rows: 1, cols: 1, data: vec![s] }, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let m = self.mat(a);
        let s = m.data.iter().sum::<f64>() / m.data.len() as f64;
        self.push("mean_all", Mat { rows: 1, cols: 1, data: vec![s] }, Op::MeanAll(a), &[a])
    }

    /// Column means: `r×c → 1×c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let m = self.mat(a);
        let mut out = vec![0.0; m.cols];
        for row in m.data.chunks(m.cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / m.rows as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let value = Mat {
            rows: 1,
            cols: m.cols,
            data: out,
        };
        self.push("mean_rows", value, Op::MeanRows(a), &[a])
    }

    /// Block `[r0, r1) × [c0, c1)`.
    pub fn slice(&mut self, x: Var, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Result<Var> {
        let m = self.mat(x);
        if rows.end > m.rows || cols.end > m.cols || rows.is_empty() || cols.is_empty() {
            return Err(Error::shape(
                "slice",
                format!("{rows:?} x {cols:?} of {}x{}", m.rows, m.cols),
            ));
        }
        let w = cols.len();
        let mut data = Vec::with_capacity(rows.len() * w);
        for r in rows.clone() {
            data.extend_from_slice(&m.data[r * m.cols + cols.start..r * m.cols + cols.end]);
        }
        let value = Mat {
            rows: rows.len(),
            cols: w,
            data,
        };
        let kind = Op::Slice {
            x,
            r0: rows.start,
            c0: cols.start,
        };
        self.push("slice", value, kind, &[x])
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let m = self.mat(x);
        if idx.iter().any(|&i| i >= m.rows) || idx.is_empty() {
            return Err(Error::shape("gather_rows", format!("index out of {} rows", m.rows)));
        }
        let mut data = Vec::with_capacity(idx.len() * m.cols);
        for &i in idx {
            data.extend_from_slice(&m.data[i * m.cols..(i + 1) * m.cols]);
        }
        let value = Mat {
            rows: idx.len(),
            cols: m.cols,
            data,
        };
        let kind = Op::GatherRows { x, idx: idx.to_vec() };
        self.push("gather_rows", value, kind, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.mat(parts[0]).cols;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let m = self.mat(p);
            if m.cols != cols {
                return Err(Error::shape("concat_rows", "column mismatch"));
            }
            rows += m.rows;
            data.extend_from_slice(&m.data);
        }
        let value = Mat { rows, cols, data };
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.mat(parts[0]).rows;
        let widths: Vec<usize> = parts.iter().map(|&p| self.mat(p).cols).collect();
        if parts.iter().any(|&p| self.mat(p).rows != rows) {
            return Err(Error::shape("concat_cols", "row mismatch"));
        }
        let cols: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.mat(p).data[r * w..(r + 1) * w]);
            }
        }
        let value = Mat { rows, cols, data };
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    // ---- reverse pass ------------------------------------------------

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lm = self.mat(loss);
        if lm.data.len() != 1 {
            return Err(Error::shape("backward", "loss must be 1x1"));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat {
            rows: 1,
            cols: 1,
            data: vec![1.0],
        });
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, delta: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        match slot {
            Some(m) => m.add_assign(delta),
            None => {
                let val = &self.nodes[v.0].value;
                *slot = Some(Mat {
                    rows: val.rows,
                    cols: val.cols,
                    data: delta.to_vec(),
                });
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ma, mb) = (self.mat(*a), self.mat(*b));
                if self.wants(*a) {
                    let da = linalg::matmul_nt(&g.data, &mb.data, g.rows, g.cols, mb.rows);
                    self.accumulate(grads, *a, &da);
                }
                if self.wants(*b) {
                    let db = linalg::matmul_tn(&ma.data, &g.data, ma.rows, ma.cols, g.cols);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::MatMulNT(a, b) => {
                let (ma, mb) = (self.mat(*a), self.mat(*b));
                if self.wants(*a) {
                    let da = linalg::matmul(&g.data, &mb.data, g.rows, g.cols, mb.cols);
                    self.accumulate(grads, *a, &da);
                }
                if self.wants(*b) {
                    let db = linalg::matmul_tn(&g.data, &ma.data, g.rows, g.cols, ma.cols);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Transpose(a) => {
                let dt = linalg::transpose(&g.data, g.rows, g.cols);
                self.accumulate(grads, *a, &dt);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, &g.data);
                self.accumulate(grads, *b, &g.data);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, &g.data);
                let neg: Vec<f64> = g.data.iter().map(|v| -v).collect();
                self.accumulate(grads, *b, &neg);
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, &g.data);
                if self.wants(*row) {
                    let mut dr = vec![0.0; g.cols];
                    for chunk in g.data.chunks(g.cols) {
                        for (d, v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *row, &dr);
                }
            }
            Op::Mul(a, b) => {
                let (ma, mb) = (self.mat(*a), self.mat(*b));
                if self.wants(*a) {
                    let da: Vec<f64> = g.data.iter().zip(&mb.data).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, &da);
                }
                if self.wants(*b) {
                    let db: Vec<f64> = g.data.iter().zip(&ma.data).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.data.iter().map(|v| v * c).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, &g.data),
            Op::ScaleBy(a, s) => {
                let c = self.mat(*s).data[0];
                if self.wants(*a) {
                    let da: Vec<f64> = g.data.iter().map(|v| v * c).collect();
                    self.accumulate(grads, *a, &da);
                }
                if self.wants(*s) {
                    let ds: f64 = g.data.iter().zip(&self.mat(*a).data).map(|(x, y)| x * y).sum();
                    self.accumulate(grads, *s, &[ds]);
                }
            }
            Op::Exp(a) => {
                let da: Vec<f64> = g.data.iter().zip(&y.data).map(|(gv, yv)| gv * yv).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Log(a) => {
                let x = &self.mat(*a).data;
                let da: Vec<f64> = g.data.iter().zip(x).map(|(gv, xv)| gv / xv).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Sigmoid(a) => {
                let da: Vec<f64> = g.data.iter().zip(&y.data).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Gelu(a) => {
                let x = &self.mat(*a).data;
                let da: Vec<f64> = g.data.iter().zip(x).map(|(gv, xv)| gv * gelu_grad(*xv)).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Clamp(a, lo, hi) => {
                let x = &self.mat(*a).data;
                let da: Vec<f64> = g
                    .data
                    .iter()
                    .zip(x)
                    .map(|(gv, xv)| if xv >= lo && xv <= hi { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::SoftmaxRows(a) => {
                let mut da = vec![0.0; g.data.len()];
                for ((d, gr), yr) in da.chunks_mut(g.cols).zip(g.data.chunks(g.cols)).zip(y.data.chunks(g.cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, s)| x * s).sum();
                    for ((dv, gv), s) in d.iter_mut().zip(gr).zip(yr) {
                        *dv = s * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::LogSoftmaxRows(a) => {
                let mut da = vec![0.0; g.data.len()];
                for ((d, gr), yr) in da.chunks_mut(g.cols).zip(g.data.chunks(g.cols)).zip(y.data.chunks(g.cols)) {
                    let total: f64 = gr.iter().sum();
                    for ((dv, gv), ly) in d.iter_mut().zip(gr).zip(yr) {
                        *dv = gv - ly.exp() * total;
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = g.cols;
                let gam = &self.mat(*gamma).data;
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for (gr, hr) in g.data.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            dg[c] += gr[c] * hr[c];
                            db[c] += gr[c];
                        }
                    }
                    self.accumulate(grads, *gamma, &dg);
                    self.accumulate(grads, *beta, &db);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.data.len()];
                    let inv_n = 1.0 / n as f64;
                    for r in 0..g.rows {
                        let gr = &g.data[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..n {
                            let dh = gr[c] * gam[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[c];
                        }
                        mean_dh *= inv_n;
                        mean_dh_h *= inv_n;
                        for c in 0..n {
                            let dh = gr[c] * gam[c];
                            dx[r * n + c] = rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let xm = self.mat(*x);
                let mut dx = vec![0.0; g.data.len()];
                for r in 0..g.rows {
                    let sl = r * g.cols..(r + 1) * g.cols;
                    let (gr, yr, xr) = (&g.data[sl.clone()], &y.data[sl.clone()], &xm.data[sl.clone()]);
                    let raw_norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if raw_norm < 1e-12 {
                        // Clamped branch: y = x / 1e-12 is linear.
                        for (d, gv) in dx[sl].iter_mut().zip(gr) {
                            *d = gv / norms[r];
                        }
                        continue;
                    }
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in dx[sl].iter_mut().zip(gr).zip(yr) {
                        *d = (gv - yv * dot) / norms[r];
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::SumAll(a) => {
                let m = self.mat(*a);
                let da = vec![g.data[0]; m.data.len()];
                self.accumulate(grads, *a, &da);
            }
            Op::MeanAll(a) => {
                let m = self.mat(*a);
                let da = vec![g.data[0] / m.data.len() as f64; m.data.len()];
                self.accumulate(grads, *a, &da);
            }
            Op::MeanRows(a) => {
                let m = self.mat(*a);
                let inv = 1.0 / m.rows as f64;
                let mut da = Vec::with_capacity(m.data.len());
                for _ in 0..m.rows {
                    da.extend(g.data.iter().map(|v| v * inv));
                }
                self.accumulate(grads, *a, &da);
            }
            Op::Slice { x, r0, c0 } => {
                if self.wants(*x) {
                    let xm = self.mat(*x);
                    let mut dx = Mat::zeros(xm.rows, xm.cols);
                    for r in 0..g.rows {
                        let dst = (r0 + r) * xm.cols + c0;
                        dx.data[dst..dst + g.cols].copy_from_slice(&g.data[r * g.cols..(r + 1) * g.cols]);
                    }
                    self.accumulate(grads, *x, &dx.data);
                }
            }
            Op::GatherRows { x, idx } => {
                if self.wants(*x) {
                    let xm = self.mat(*x);
                    let mut dx = Mat::zeros(xm.rows, xm.cols);
                    for (r, &src) in idx.iter().enumerate() {
                        let dst = &mut dx.data[src * xm.cols..(src + 1) * xm.cols];
                        for (d, v) in dst.iter_mut().zip(&g.data[r * g.cols..(r + 1) * g.cols]) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *x, &dx.data);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.mat(p).data.len();
                    self.accumulate(grads, p, &g.data[offset..offset + n]);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let w = self.mat(p).cols;
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(g.rows * w);
                        for r in 0..g.rows {
                            dp.extend_from_slice(&g.data[r * g.cols + c0..r * g.cols + c0 + w]);
                        }
                        self.accumulate(grads, p, &dp);
                    }
                    c0 += w;
                }
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Named parameter set used by the generic differentiation entry points.
pub type NamedTensors = BTreeMap<String, Tensor>;

/// Evaluates `loss_fn` on a fresh tape and returns the loss value and
/// `∂loss/∂p` for every named parameter, shaped like the parameter.
pub fn grad<F>(params: &NamedTensors, loss_fn: F) -> Result<(f64, NamedTensors)>
where
    F: FnOnce(&mut Graph, &BTreeMap<String, Var>) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: BTreeMap<String, Var> = params.iter().map(|(k, t)| (k.clone(), g.param(t))).collect();
    let loss = loss_fn(&mut g, &vars)?;
    let value = g.scalar(loss);
    let grads = g.backward(loss)?;
    let out = params
        .iter()
        .map(|(k, t)| (k.clone(), grads.get_shaped(&g, vars[k], t.shape())))
        .collect();
    Ok((value, out))
}

/// Loss value only, on a fresh tape.
pub fn eval_loss<F>(params: &NamedTensors, loss_fn: F) -> Result<f64>
where
    F: FnOnce(&mut Graph, &BTreeMap<String, Var>) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: BTreeMap<String, Var> = params.iter().map(|(k, t)| (k.clone(), g.constant(t))).collect();
    let loss = loss_fn(&mut g, &vars)?;
    Ok(g.scalar(loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut p = NamedTensors::new();
        p.insert("p".into(), Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.0]).unwrap());
        let (v, g) = grad(&p, |g, vars| g.sum_all(vars["p"])).unwrap();
        assert_eq!(v, 5.5);
        assert_eq!(g["p"], Tensor::full(&[2, 3], 1.0));
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut p = NamedTensors::new();
        p.insert("p".into(), Tensor::new(vec![2], vec![3.0, -4.0]).unwrap());
        let (v, g) = grad(&p, |g, vars| {
            let sq = g.mul(vars["p"], vars["p"])?;
            let s = g.sum_all(sq)?;
            g.scale(s, 0.5)
        })
        .unwrap();
        assert_eq!(v, 12.5);
        assert_eq!(g["p"].data(), &[3.0, -4.0]);
    }

    #[test]
    fn non_finite_names_the_op() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        match g.log(x) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "log"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..16).map(|i| (i as f64 * 1.7).sin() * 5.0).collect();
        let x = g.constant(&Tensor::matrix(4, 4, data).unwrap());
        let y = g.softmax_rows(x).unwrap();
        for row in g.data(y).chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardises_rows() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).cos() * 3.0 + i as f64).collect();
        let x = g.constant(&Tensor::matrix(4, 4, data).unwrap());
        let one = g.constant(&Tensor::full(&[4], 1.0));
        let zero = g.constant(&Tensor::zeros(&[4]));
        let y = g.layer_norm(x, one, zero, 1e-12).unwrap();
        for row in g.data(y).chunks(4) {
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn gelu_coefficients_are_pinned() {
        assert_eq!(GELU_C, 0.7978845608);
        assert_eq!(GELU_A, 0.044715);
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(&Tensor::full(&[2, 2], 2.0));
        let p = g.param(&Tensor::full(&[2, 2], 3.0));
        let y = g.mul(c, p).unwrap();
        let s = g.sum_all(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(&g, c), Tensor::zeros(&[2, 2]));
        assert_eq!(grads.get(&g, p), Tensor::full(&[2, 2], 2.0));
    }
}
