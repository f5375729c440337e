//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in execution order,
//! which is already a topological order, so [`Graph::backward`] is a single
//! reverse sweep. Parameter leaves read their values from a
//! [`ParameterStore`] and the sweep accumulates into its gradient slots.

use std::collections::HashMap;

use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into};
use super::{ParamId, ParameterStore, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ColSum(Var),
    Sum(Var),
    SumSquares(Var),
    Mse(Var, Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(value, op, needs)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const, false)
    }

    /// Leaf for a stored parameter. Repeated requests return the same node.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(shape_err!("matmul {n}x{k} by {k2}x{m}"));
        }
        let mut out = vec![0.0; n * m];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let t = Tensor::matrix(n, m, out)?;
        Ok(self.push_derived(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (m, k2) = self.shape(b);
        if k != k2 {
            return Err(shape_err!("matmul_nt {n}x{k} by ({m}x{k2})^T"));
        }
        let mut out = vec![0.0; n * m];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let t = Tensor::matrix(n, m, out)?;
        Ok(self.push_derived(t, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        self.push_derived(t, Op::Transpose(a), &[a])
    }

    fn zip_same(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push_derived(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, x: Var, row: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (n, m) = self.shape(x);
        let (r, c) = self.shape(row);
        if r != 1 || c != m {
            return Err(shape_err!("{what}: {n}x{m} with row {r}x{c}"));
        }
        let rv = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(m)
            .flat_map(|xr| xr.iter().zip(rv).map(|(&a, &b)| f(a, b)))
            .collect();
        Tensor::matrix(n, m, data)
    }

    /// Adds a `1 x m` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast(x, row, "add_row", |a, b| a + b)?;
        Ok(self.push_derived(t, Op::AddRow(x, row), &[x, row]))
    }

    /// Multiplies every row of `x` elementwise by a `1 x m` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast(x, row, "mul_row", |a, b| a * b)?;
        Ok(self.push_derived(t, Op::MulRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * s).collect()).unwrap();
        self.push_derived(t, Op::Scale(a, s), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = v
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let t = Tensor::new(v.shape().to_vec(), data).unwrap();
        self.push_derived(t, Op::Gelu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(m) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let t = Tensor::matrix(n, m, out).unwrap();
        self.push_derived(t, Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise normalization followed by the affine map `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, m) = self.shape(x);
        if self.shape(gamma) != (1, m) || self.shape(beta) != (1, m) {
            return Err(shape_err!("layer_norm affine parameters must be 1x{m}"));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; n * m];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &xv[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..m {
                let h = (row[j] - mean) * rs;
                xhat[i * m + j] = h;
                out[i * m + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::matrix(n, m, out)?;
        Ok(self.push_derived(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Rows of `x` picked by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, m) = self.shape(x);
        if idx.is_empty() {
            return Err(shape_err!("gather_rows with no indices"));
        }
        let mut out = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            if i >= n {
                return Err(shape_err!("gather_rows index {i} out of {n} rows"));
            }
            out.extend_from_slice(self.value(x).row(i));
        }
        let t = Tensor::matrix(idx.len(), m, out)?;
        Ok(self.push_derived(t, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts
            .first()
            .map(|&p| self.shape(p).1)
            .ok_or_else(|| shape_err!("concat_rows of nothing"))?;
        let mut out = Vec::new();
        let mut n = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != m {
                return Err(shape_err!("concat_rows: width {c} vs {m}"));
            }
            n += r;
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::matrix(n, m, out)?;
        Ok(self.push_derived(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| shape_err!("concat_cols of nothing"))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != n {
                return Err(shape_err!("concat_cols: height {r} vs {n}"));
            }
            widths.push(c);
        }
        let m: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::matrix(n, m, out)?;
        Ok(self.push_derived(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (n, m) = self.shape(x);
        if width == 0 || start + width > m {
            return Err(shape_err!("slice_cols {start}..{} of width {m}", start + width));
        }
        let out: Vec<f64> = (0..n)
            .flat_map(|i| self.value(x).row(i)[start..start + width].to_vec())
            .collect();
        let t = Tensor::matrix(n, width, out)?;
        Ok(self.push_derived(t, Op::SliceCols(x, start), &[x]))
    }

    /// Column sums: `n x m -> 1 x m`.
    pub fn col_sum(&mut self, x: Var) -> Var {
        let (_, m) = self.shape(x);
        let mut out = vec![0.0; m];
        for row in self.value(x).data().chunks_exact(m) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let t = Tensor::matrix(1, m, out).unwrap();
        self.push_derived(t, Op::ColSum(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push_derived(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push_derived(Tensor::scalar(s), Op::SumSquares(x), &[x])
    }

    /// Mean squared difference over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err!("mse: {:?} vs {:?}", self.value(a).shape(), self.value(b).shape()));
        }
        let n = self.value(a).numel() as f64;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        Ok(self.push_derived(Tensor::scalar(s), Op::Mse(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(x).clone().reshape(vec![rows, cols])?;
        Ok(self.push_derived(t, Op::Reshape(x), &[x]))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into `store`'s gradients.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::NoForward);
        }
        if self.value(loss).numel() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let (n, m) = (node.value.rows(), node.value.cols());
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                if self.nodes[v.0].needs_grad {
                    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
                    f(buf);
                }
            };
            match &node.op {
                Op::Const => {}
                Op::Param(id) => {
                    for (d, s) in store.grad_mut(*id).data_mut().iter_mut().zip(&g) {
                        *d += s;
                    }
                }
                Op::MatMul(a, b) => {
                    let k = self.value(*a).cols();
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    acc(*a, &mut |da| matmul_nt_into(&g, bv, da, n, m, k));
                    acc(*b, &mut |db| matmul_tn_into(av, &g, db, n, k, m));
                }
                Op::MatMulNt(a, b) => {
                    let k = self.value(*a).cols();
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    acc(*a, &mut |da| matmul_into(&g, bv, da, n, m, k));
                    acc(*b, &mut |db| matmul_tn_into(&g, av, db, n, m, k));
                }
                Op::Transpose(a) => acc(*a, &mut |da| {
                    for r in 0..n {
                        for c in 0..m {
                            da[c * n + r] += g[r * m + c];
                        }
                    }
                }),
                Op::Add(a, b) => {
                    acc(*a, &mut |da| add_into(da, &g));
                    acc(*b, &mut |db| add_into(db, &g));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |da| add_into(da, &g));
                    acc(*b, &mut |db| db.iter_mut().zip(&g).for_each(|(d, s)| *d -= s));
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    acc(*a, &mut |da| {
                        for ((d, s), y) in da.iter_mut().zip(&g).zip(bv) {
                            *d += s * y;
                        }
                    });
                    acc(*b, &mut |db| {
                        for ((d, s), x) in db.iter_mut().zip(&g).zip(av) {
                            *d += s * x;
                        }
                    });
                }
                Op::AddRow(x, row) => {
                    acc(*x, &mut |dx| add_into(dx, &g));
                    acc(*row, &mut |dr| {
                        for gr in g.chunks_exact(m) {
                            add_into(dr, gr);
                        }
                    });
                }
                Op::MulRow(x, row) => {
                    let xv = self.value(*x).data();
                    let rv = self.value(*row).data();
                    acc(*x, &mut |dx| {
                        for (dxr, gr) in dx.chunks_exact_mut(m).zip(g.chunks_exact(m)) {
                            for ((d, s), r) in dxr.iter_mut().zip(gr).zip(rv) {
                                *d += s * r;
                            }
                        }
                    });
                    acc(*row, &mut |dr| {
                        for (xr, gr) in xv.chunks_exact(m).zip(g.chunks_exact(m)) {
                            for ((d, s), xx) in dr.iter_mut().zip(gr).zip(xr) {
                                *d += s * xx;
                            }
                        }
                    });
                }
                Op::Scale(a, s) => acc(*a, &mut |da| {
                    for (d, v) in da.iter_mut().zip(&g) {
                        *d += s * v;
                    }
                }),
                Op::Gelu(a) => {
                    let xv = self.value(*a).data();
                    acc(*a, &mut |da| {
                        for ((d, s), &x) in da.iter_mut().zip(&g).zip(xv) {
                            let u = GELU_C * (x + GELU_A * x * x * x);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                            *d += s * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                        }
                    });
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.data();
                    acc(*a, &mut |da| {
                        for ((dr, yr), gr) in da.chunks_exact_mut(m).zip(y.chunks_exact(m)).zip(g.chunks_exact(m)) {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for ((d, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                                *d += yy * (gg - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gamma).data();
                    acc(*gamma, &mut |dg| {
                        for (hr, gr) in xhat.chunks_exact(m).zip(g.chunks_exact(m)) {
                            for ((d, h), s) in dg.iter_mut().zip(hr).zip(gr) {
                                *d += s * h;
                            }
                        }
                    });
                    acc(*beta, &mut |db| {
                        for gr in g.chunks_exact(m) {
                            add_into(db, gr);
                        }
                    });
                    acc(*x, &mut |dx| {
                        let mut dh = vec![0.0; m];
                        for r in 0..n {
                            let hr = &xhat[r * m..(r + 1) * m];
                            let gr = &g[r * m..(r + 1) * m];
                            for j in 0..m {
                                dh[j] = gr[j] * gv[j];
                            }
                            let mean_dh = dh.iter().sum::<f64>() / m as f64;
                            let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                            for j in 0..m {
                                dx[r * m + j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                            }
                        }
                    });
                }
                Op::GatherRows(x, idx) => acc(*x, &mut |dx| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut dx[src * m..(src + 1) * m], &g[r * m..(r + 1) * m]);
                    }
                }),
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(*p).numel();
                        acc(*p, &mut |dp| add_into(dp, &g[offset..offset + len]));
                        offset += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        acc(*p, &mut |dp| {
                            for r in 0..n {
                                add_into(&mut dp[r * w..(r + 1) * w], &g[r * m + col..r * m + col + w]);
                            }
                        });
                        col += w;
                    }
                }
                Op::SliceCols(x, start) => {
                    let w = self.value(*x).cols();
                    acc(*x, &mut |dx| {
                        for r in 0..n {
                            add_into(&mut dx[r * w + start..r * w + start + m], &g[r * m..(r + 1) * m]);
                        }
                    });
                }
                Op::ColSum(x) => acc(*x, &mut |dx| {
                    for dr in dx.chunks_exact_mut(m) {
                        add_into(dr, &g);
                    }
                }),
                Op::Sum(x) => acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
                Op::SumSquares(x) => {
                    let xv = self.value(*x).data();
                    acc(*x, &mut |dx| {
                        for (d, v) in dx.iter_mut().zip(xv) {
                            *d += 2.0 * v * g[0];
                        }
                    });
                }
                Op::Mse(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let scale = 2.0 * g[0] / av.len() as f64;
                    acc(*a, &mut |da| {
                        for ((d, x), y) in da.iter_mut().zip(av).zip(bv) {
                            *d += scale * (x - y);
                        }
                    });
                    acc(*b, &mut |db| {
                        for ((d, x), y) in db.iter_mut().zip(av).zip(bv) {
                            *d -= scale * (x - y);
                        }
                    });
                }
                Op::Reshape(x) => acc(*x, &mut |dx| add_into(dx, &g)),
            }
        }
        Ok(())
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
