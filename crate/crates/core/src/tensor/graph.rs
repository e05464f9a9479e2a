//! Reverse-mode tape over [`Tensor`] values.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Nodes
//! are append-only, so the recorded order is already a topological order and
//! the backward sweep visits each node exactly once.

use std::fmt;

use num_complex::Complex64;

use super::fft::{fft_in_place, ifft_unnormalized_in_place};
use super::kernels::gemm;
use super::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Gelu,
    /// Derivative of GeLU; needed when tangents are carried on the tape.
    GeluPrime,
    Exp,
    Sin,
    Cos,
    /// `1 / sqrt(x)`.
    Rsqrt,
    Square,
}

/// First non-finite value produced on a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct NumericFault {
    pub op: &'static str,
    pub node: usize,
}

impl fmt::Display for NumericFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "non-finite output from `{}` at node {}", self.op, self.node)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, n: usize, k: usize },
    BatchMatMul { a: Var, b: Var, ta: bool, tb: bool, batch: usize, m: usize, n: usize, k: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTiled(Var, Var),
    MulTiled(Var, Var),
    SubCol(Var, Var),
    MulCol(Var, Var),
    RowSum(Var),
    RowMean(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, UnaryOp),
    ClampMin(Var, f64),
    /// Masked entries are exact zeros, so the backward rule needs no mask.
    Softmax { a: Var },
    LogSoftmax(Var),
    SelectCols { a: Var, idx: Vec<usize> },
    GatherRows { a: Var, idx: Vec<usize> },
    SliceCols { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    SumAll(Var),
    Detach,
    SpectralConv { u: Var, r_re: Var, r_im: Var, k_max: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddTiled(..) => "add_tiled",
            Op::MulTiled(..) => "mul_tiled",
            Op::SubCol(..) => "sub_col",
            Op::MulCol(..) => "mul_col",
            Op::RowSum(..) => "row_sum",
            Op::RowMean(..) => "row_mean",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Unary(_, UnaryOp::Gelu) => "gelu",
            Op::Unary(_, UnaryOp::GeluPrime) => "gelu_prime",
            Op::Unary(_, UnaryOp::Exp) => "exp",
            Op::Unary(_, UnaryOp::Sin) => "sin",
            Op::Unary(_, UnaryOp::Cos) => "cos",
            Op::Unary(_, UnaryOp::Rsqrt) => "rsqrt",
            Op::Unary(_, UnaryOp::Square) => "square",
            Op::ClampMin(..) => "clamp_min",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::SelectCols { .. } => "select_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Reshape(..) => "reshape",
            Op::SumAll(..) => "sum_all",
            Op::Detach => "detach",
            Op::SpectralConv { .. } => "spectral_conv",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward pass. Single owner; not shared across threads.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<NumericFault>,
}

/// Accumulated adjoints, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or zeros if nothing flowed into it.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(&self.shapes[v.0], g.clone()),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn gelu_prime(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)) + x * normal_pdf(x)
}

fn gelu_second(x: f64) -> f64 {
    normal_pdf(x) * (2.0 - x * x)
}

fn spectral_weight(k: usize, n: usize) -> f64 {
    if k == 0 || (n % 2 == 0 && k == n / 2) {
        1.0
    } else {
        2.0
    }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First non-finite output recorded so far, if any.
    pub fn fault(&self) -> Option<&NumericFault> {
        self.fault.as_ref()
    }

    pub fn check(&self) -> Result<(), NumericFault> {
        match &self.fault {
            Some(f) => Err(f.clone()),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(NumericFault { op: op.name(), node: id });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(id)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::Detach, false)
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    /// `op(a) * op(b)` on 2-D operands.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ar, ac) = self.dims2(a);
        let (br, bc) = self.dims2(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimensions differ: {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(ta, tb, m, n, k, self.data(a), self.data(b), &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[m, n], out), Op::MatMul { a, b, ta, tb, m, n, k }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// Independent products over `batch` contiguous blocks.
    ///
    /// `a` holds `batch` blocks of `op(a_i)` (`m x k`), `b` holds blocks of
    /// `op(b_i)` (`k x n`); the result is `(batch * m, n)`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, batch: usize, ta: bool, tb: bool) -> Var {
        let (ar, ac) = self.dims2(a);
        let (br, bc) = self.dims2(b);
        assert!(ar % batch == 0 && br % batch == 0, "batch_matmul: rows not divisible by batch");
        let (m, k) = if ta { (ac, ar / batch) } else { (ar / batch, ac) };
        let (k2, n) = if tb { (bc, br / batch) } else { (br / batch, bc) };
        assert_eq!(k, k2, "batch_matmul inner dimensions differ: {k} vs {k2}");
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for i in 0..batch {
                gemm(
                    ta,
                    tb,
                    m,
                    n,
                    k,
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(
            Tensor::new(&[batch * m, n], out),
            Op::BatchMatMul { a, b, ta, tb, batch, m, n, k },
            ng,
        )
    }

    fn binary_same(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "{}: shape mismatch", op.name());
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&shape, data), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn tiled(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (r, c) = self.dims2(a);
        let (br, bc) = self.dims2(b);
        let bc = if self.value(b).shape().len() == 1 { br } else { bc };
        let br = if self.value(b).shape().len() == 1 { 1 } else { br };
        assert_eq!(c, bc, "{}: column mismatch {c} vs {bc}", op.name());
        assert!(br > 0 && r % br == 0, "{}: {r} rows cannot tile {br}", op.name());
        let ad = self.data(a);
        let bd = self.data(b);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let brow = &bd[(i % br) * c..(i % br + 1) * c];
            out.extend(ad[i * c..(i + 1) * c].iter().zip(brow).map(|(&x, &y)| f(x, y)));
        }
        let shape = self.value(a).shape().to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&shape, out), op, ng)
    }

    /// `a + b` where the rows of `b` repeat cyclically down `a`. A 1-D `b`
    /// acts as a single row (bias broadcast).
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Var {
        self.tiled(a, b, Op::AddTiled(a, b), |x, y| x + y)
    }

    pub fn mul_tiled(&mut self, a: Var, b: Var) -> Var {
        self.tiled(a, b, Op::MulTiled(a, b), |x, y| x * y)
    }

    fn col_op(&mut self, a: Var, v: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (r, c) = self.dims2(a);
        assert_eq!(self.value(v).numel(), r, "{}: need one value per row", op.name());
        let ad = self.data(a);
        let vd = self.data(v);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(ad[i * c..(i + 1) * c].iter().map(|&x| f(x, vd[i])));
        }
        let shape = self.value(a).shape().to_vec();
        let ng = self.ng(a) || self.ng(v);
        self.push(Tensor::new(&shape, out), op, ng)
    }

    /// Subtract `v[i]` from every entry of row `i`.
    pub fn sub_col(&mut self, a: Var, v: Var) -> Var {
        self.col_op(a, v, Op::SubCol(a, v), |x, y| x - y)
    }

    /// Multiply row `i` by `v[i]`.
    pub fn mul_col(&mut self, a: Var, v: Var) -> Var {
        self.col_op(a, v, Op::MulCol(a, v), |x, y| x * y)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let (r, c) = self.dims2(a);
        let d = self.data(a);
        let out = (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect();
        let ng = self.ng(a);
        self.push(Tensor::new(&[r], out), Op::RowSum(a), ng)
    }

    pub fn row_mean(&mut self, a: Var) -> Var {
        let (r, c) = self.dims2(a);
        let d = self.data(a);
        let out = (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64).collect();
        let ng = self.ng(a);
        self.push(Tensor::new(&[r], out), Op::RowMean(a), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|x| x * s).collect();
        let shape = t.shape().to_vec();
        let ng = self.ng(a);
        self.push(Tensor::new(&shape, out), Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|x| x + s).collect();
        let shape = t.shape().to_vec();
        let ng = self.ng(a);
        self.push(Tensor::new(&shape, out), Op::AddScalar(a), ng)
    }

    pub fn unary(&mut self, a: Var, op: UnaryOp) -> Var {
        let f: fn(f64) -> f64 = match op {
            UnaryOp::Gelu => gelu,
            UnaryOp::GeluPrime => gelu_prime,
            UnaryOp::Exp => f64::exp,
            UnaryOp::Sin => f64::sin,
            UnaryOp::Cos => f64::cos,
            UnaryOp::Rsqrt => |x| 1.0 / x.sqrt(),
            UnaryOp::Square => |x| x * x,
        };
        let t = self.value(a);
        let out = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        let ng = self.ng(a);
        self.push(Tensor::new(&shape, out), Op::Unary(a, op), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, UnaryOp::Gelu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, UnaryOp::Exp)
    }

    /// `max(a, floor)`; entries at the floor receive no gradient.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| x.max(floor)).collect();
        let shape = t.shape().to_vec();
        let ng = self.ng(a);
        self.push(Tensor::new(&shape, out), Op::ClampMin(a, floor), ng)
    }

    /// Row-wise softmax. With `causal = Some(len)`, row `i` is a query at
    /// position `i % len` and columns beyond that position are masked out.
    pub fn softmax(&mut self, a: Var, causal: Option<usize>) -> Var {
        let (r, c) = self.dims2(a);
        let d = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let limit = match causal {
                Some(len) => {
                    assert_eq!(c, len, "causal softmax expects square blocks");
                    i % len + 1
                }
                None => c,
            };
            let row = &d[i * c..i * c + limit];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * c..i * c + limit];
            let mut s = 0.0;
            for (oj, &x) in o.iter_mut().zip(row) {
                *oj = (x - mx).exp();
                s += *oj;
            }
            for oj in o.iter_mut() {
                *oj /= s;
            }
        }
        let shape = self.value(a).shape().to_vec();
        let ng = self.ng(a);
        self.push(Tensor::new(&shape, out), Op::Softmax { a }, ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.dims2(a);
        let d = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            for (o, &x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let shape = self.value(a).shape().to_vec();
        let ng = self.ng(a);
        self.push(Tensor::new(&shape, out), Op::LogSoftmax(a), ng)
    }

    /// `out[i] = a[i, idx[i]]`.
    pub fn select_cols(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let (r, c) = self.dims2(a);
        assert_eq!(idx.len(), r, "select_cols: one index per row");
        let d = self.data(a);
        let out = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < c, "select_cols: column {j} out of range {c}");
                d[i * c + j]
            })
            .collect();
        let ng = self.ng(a);
        self.push(Tensor::new(&[r], out), Op::SelectCols { a, idx }, ng)
    }

    /// Rows of `a` picked by `idx` (repeats allowed). 1-D inputs gather
    /// single entries.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let d = t.data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            assert!(i < r, "gather_rows: row {i} out of range {r}");
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let ng = self.ng(a);
        self.push(Tensor::new(&shape, out), Op::GatherRows { a, idx }, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.dims2(a);
        assert!(start + len <= c, "slice_cols: {start}+{len} exceeds {c}");
        let d = self.data(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(a);
        self.push(Tensor::new(&[r, len], out), Op::SliceCols { a, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let first = self.value(parts[0]).shape().to_vec();
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        let mut ng = false;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), c, "concat_rows: column mismatch");
            assert_eq!(t.shape().len(), first.len(), "concat_rows: rank mismatch");
            rows += t.rows();
            out.extend_from_slice(t.data());
            ng |= self.ng(p);
        }
        let mut shape = first;
        shape[0] = rows;
        self.push(Tensor::new(&shape, out), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshaped(shape);
        let ng = self.ng(a);
        self.push(value, Op::Reshape(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Truncated spectral convolution along the row (time) axis.
    ///
    /// `u` is `(n_t, c_in)`; `r_re`/`r_im` are `(k_max * c_in, c_out)` with
    /// mode-major blocks. Forward: transform each channel, keep the `k_max`
    /// lowest modes, mix channels per mode, and return the real inverse
    /// transform built from the nonnegative-frequency half.
    pub fn spectral_conv(&mut self, u: Var, r_re: Var, r_im: Var, k_max: usize) -> Var {
        let (nt, cin) = self.dims2(u);
        let (rr, cout) = self.dims2(r_re);
        assert_eq!(self.value(r_im).shape(), self.value(r_re).shape(), "spectral kernel re/im shapes differ");
        assert_eq!(rr, k_max * cin, "spectral kernel rows {rr} != k_max*c_in {}", k_max * cin);
        assert!(k_max <= nt / 2 + 1, "k_max {k_max} exceeds available modes {}", nt / 2 + 1);
        let modes = forward_modes(self.data(u), nt, cin, k_max);
        let (re, im) = (self.data(r_re), self.data(r_im));
        let mut out = vec![0.0; nt * cout];
        let mut buf = vec![Complex64::new(0.0, 0.0); nt];
        for o in 0..cout {
            buf.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
            for k in 0..k_max {
                let mut acc = Complex64::new(0.0, 0.0);
                for c in 0..cin {
                    let w = Complex64::new(re[(k * cin + c) * cout + o], im[(k * cin + c) * cout + o]);
                    acc += modes[k * cin + c] * w;
                }
                buf[k] = acc * spectral_weight(k, nt);
            }
            ifft_unnormalized_in_place(&mut buf);
            for t in 0..nt {
                out[t * cout + o] = buf[t].re / nt as f64;
            }
        }
        let ng = self.ng(u) || self.ng(r_re) || self.ng(r_im);
        self.push(Tensor::new(&[nt, cout], out), Op::SpectralConv { u, r_re, r_im, k_max }, ng)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        self.backward_seeded(&[(loss, vec![1.0])])
    }

    /// Reverse sweep from arbitrary cotangents on several outputs.
    pub fn backward_seeded(&self, seeds: &[(Var, Vec<f64>)]) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut top = 0;
        for (v, g) in seeds {
            assert_eq!(g.len(), self.value(*v).numel(), "seed length mismatch");
            accumulate(&mut grads[v.0], g);
            top = top.max(v.0 + 1);
        }
        for id in (0..top).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].needs_grad {
                self.backprop_node(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Gradients { grads, shapes }
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Detach => {}
            &Op::MatMul { a, b, ta, tb, m, n, k } => {
                if self.ng(a) {
                    let ga = slot(grads, a, m * k);
                    if ta {
                        gemm(tb, true, k, m, n, self.data(b), g, ga);
                    } else {
                        gemm(false, !tb, m, k, n, g, self.data(b), ga);
                    }
                }
                if self.ng(b) {
                    let gb = slot(grads, b, k * n);
                    if tb {
                        gemm(true, ta, n, k, m, g, self.data(a), gb);
                    } else {
                        gemm(!ta, false, k, n, m, self.data(a), g, gb);
                    }
                }
            }
            &Op::BatchMatMul { a, b, ta, tb, batch, m, n, k } => {
                if self.ng(a) {
                    let bd = self.data(b);
                    let ga = slot(grads, a, batch * m * k);
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        let gai = &mut ga[i * m * k..(i + 1) * m * k];
                        if ta {
                            gemm(tb, true, k, m, n, bi, gi, gai);
                        } else {
                            gemm(false, !tb, m, k, n, gi, bi, gai);
                        }
                    }
                }
                if self.ng(b) {
                    let ad = self.data(a);
                    let gb = slot(grads, b, batch * k * n);
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                        if tb {
                            gemm(true, ta, n, k, m, gi, ai, gbi);
                        } else {
                            gemm(!ta, false, k, n, m, ai, gi, gbi);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                if self.ng(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
                if self.ng(b) {
                    add_into(slot(grads, b, g.len()), g);
                }
            }
            &Op::Sub(a, b) => {
                if self.ng(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
                if self.ng(b) {
                    let gb = slot(grads, b, g.len());
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.ng(a) {
                    let bd = self.data(b);
                    let ga = slot(grads, a, g.len());
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bd) {
                        *x += gi * bi;
                    }
                }
                if self.ng(b) {
                    let ad = self.data(a);
                    let gb = slot(grads, b, g.len());
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(ad) {
                        *x += gi * ai;
                    }
                }
            }
            &Op::AddTiled(a, b) | &Op::MulTiled(a, b) => {
                let is_mul = matches!(node.op, Op::MulTiled(..));
                let c = self.value(a).cols();
                let r = self.value(a).rows();
                let bn = self.value(b).numel();
                let br = bn / c;
                if self.ng(a) {
                    let ga = slot(grads, a, g.len());
                    if is_mul {
                        let bd = self.data(b);
                        for i in 0..r {
                            let brow = &bd[(i % br) * c..(i % br + 1) * c];
                            for j in 0..c {
                                ga[i * c + j] += g[i * c + j] * brow[j];
                            }
                        }
                    } else {
                        add_into(ga, g);
                    }
                }
                if self.ng(b) {
                    let ad = self.data(a);
                    let gb = slot(grads, b, bn);
                    for i in 0..r {
                        let row = &mut gb[(i % br) * c..(i % br + 1) * c];
                        for j in 0..c {
                            row[j] += if is_mul { g[i * c + j] * ad[i * c + j] } else { g[i * c + j] };
                        }
                    }
                }
            }
            &Op::SubCol(a, v) => {
                let (r, c) = (self.value(a).rows(), self.value(a).cols());
                if self.ng(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
                if self.ng(v) {
                    let gv = slot(grads, v, r);
                    for i in 0..r {
                        gv[i] -= g[i * c..(i + 1) * c].iter().sum::<f64>();
                    }
                }
            }
            &Op::MulCol(a, v) => {
                let (r, c) = (self.value(a).rows(), self.value(a).cols());
                if self.ng(a) {
                    let vd = self.data(v);
                    let ga = slot(grads, a, g.len());
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[i * c + j] * vd[i];
                        }
                    }
                }
                if self.ng(v) {
                    let ad = self.data(a);
                    let gv = slot(grads, v, r);
                    for i in 0..r {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += g[i * c + j] * ad[i * c + j];
                        }
                        gv[i] += s;
                    }
                }
            }
            &Op::RowSum(a) | &Op::RowMean(a) => {
                let (r, c) = (self.value(a).rows(), self.value(a).cols());
                let f = if matches!(node.op, Op::RowMean(_)) { 1.0 / c as f64 } else { 1.0 };
                let ga = slot(grads, a, r * c);
                for i in 0..r {
                    for x in &mut ga[i * c..(i + 1) * c] {
                        *x += g[i] * f;
                    }
                }
            }
            &Op::Scale(a, s) => {
                let ga = slot(grads, a, g.len());
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x += gi * s;
                }
            }
            &Op::AddScalar(a) | &Op::Reshape(a) => {
                add_into(slot(grads, a, g.len()), g);
            }
            &Op::Unary(a, op) => {
                let ad = self.data(a);
                let ga = slot(grads, a, g.len());
                for i in 0..g.len() {
                    let x = ad[i];
                    let d = match op {
                        UnaryOp::Gelu => gelu_prime(x),
                        UnaryOp::GeluPrime => gelu_second(x),
                        UnaryOp::Exp => out[i],
                        UnaryOp::Sin => x.cos(),
                        UnaryOp::Cos => -x.sin(),
                        UnaryOp::Rsqrt => -0.5 * out[i] / x,
                        UnaryOp::Square => 2.0 * x,
                    };
                    ga[i] += g[i] * d;
                }
            }
            &Op::ClampMin(a, floor) => {
                let ad = self.data(a);
                let ga = slot(grads, a, g.len());
                for i in 0..g.len() {
                    if ad[i] > floor {
                        ga[i] += g[i];
                    }
                }
            }
            &Op::Softmax { a, .. } => {
                let (r, c) = (node.value.rows(), node.value.cols());
                let ga = slot(grads, a, r * c);
                for i in 0..r {
                    let s = &out[i * c..(i + 1) * c];
                    let gi = &g[i * c..(i + 1) * c];
                    let dot: f64 = s.iter().zip(gi).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        ga[i * c + j] += s[j] * (gi[j] - dot);
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                let ga = slot(grads, a, r * c);
                for i in 0..r {
                    let gi = &g[i * c..(i + 1) * c];
                    let total: f64 = gi.iter().sum();
                    for j in 0..c {
                        ga[i * c + j] += gi[j] - out[i * c + j].exp() * total;
                    }
                }
            }
            Op::SelectCols { a, idx } => {
                let c = self.value(*a).cols();
                let n = self.value(*a).numel();
                let ga = slot(grads, *a, n);
                for (i, &j) in idx.iter().enumerate() {
                    ga[i * c + j] += g[i];
                }
            }
            Op::GatherRows { a, idx } => {
                let c = self.value(*a).cols();
                let n = self.value(*a).numel();
                let ga = slot(grads, *a, n);
                for (k, &i) in idx.iter().enumerate() {
                    add_into(&mut ga[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                }
            }
            &Op::SliceCols { a, start } => {
                let (r, c) = (self.value(a).rows(), self.value(a).cols());
                let len = node.value.cols();
                let ga = slot(grads, a, r * c);
                for i in 0..r {
                    add_into(&mut ga[i * c + start..i * c + start + len], &g[i * len..(i + 1) * len]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.ng(p) {
                        add_into(slot(grads, p, len), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            &Op::SumAll(a) => {
                let n = self.value(a).numel();
                let ga = slot(grads, a, n);
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
            &Op::SpectralConv { u, r_re, r_im, k_max } => {
                self.backprop_spectral(u, r_re, r_im, k_max, g, grads);
            }
        }
    }

    fn backprop_spectral(&self, u: Var, r_re: Var, r_im: Var, k_max: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (nt, cin) = (self.value(u).rows(), self.value(u).cols());
        let cout = self.value(r_re).cols();
        // Adjoint of the real inverse transform, per output channel.
        let mut gv = vec![Complex64::new(0.0, 0.0); k_max * cout];
        let mut buf = vec![Complex64::new(0.0, 0.0); nt];
        for o in 0..cout {
            for t in 0..nt {
                buf[t] = Complex64::new(g[t * cout + o], 0.0);
            }
            fft_in_place(&mut buf);
            for k in 0..k_max {
                gv[k * cout + o] = buf[k] * (spectral_weight(k, nt) / nt as f64);
            }
        }
        let modes = forward_modes(self.data(u), nt, cin, k_max);
        let (re, im) = (self.data(r_re), self.data(r_im));
        if self.ng(r_re) || self.ng(r_im) {
            let mut g_re = vec![0.0; k_max * cin * cout];
            let mut g_im = vec![0.0; k_max * cin * cout];
            for k in 0..k_max {
                for c in 0..cin {
                    let uc = modes[k * cin + c].conj();
                    for o in 0..cout {
                        let v = uc * gv[k * cout + o];
                        g_re[(k * cin + c) * cout + o] = v.re;
                        g_im[(k * cin + c) * cout + o] = v.im;
                    }
                }
            }
            if self.ng(r_re) {
                add_into(slot(grads, r_re, g_re.len()), &g_re);
            }
            if self.ng(r_im) {
                add_into(slot(grads, r_im, g_im.len()), &g_im);
            }
        }
        if self.ng(u) {
            let ga = slot(grads, u, nt * cin);
            for c in 0..cin {
                buf.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
                for k in 0..k_max {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for o in 0..cout {
                        let w = Complex64::new(re[(k * cin + c) * cout + o], im[(k * cin + c) * cout + o]);
                        acc += gv[k * cout + o] * w.conj();
                    }
                    buf[k] = acc;
                }
                ifft_unnormalized_in_place(&mut buf);
                for t in 0..nt {
                    ga[t * cin + c] += buf[t].re;
                }
            }
        }
    }
}

fn forward_modes(u: &[f64], nt: usize, cin: usize, k_max: usize) -> Vec<Complex64> {
    let mut modes = vec![Complex64::new(0.0, 0.0); k_max * cin];
    let mut buf = vec![Complex64::new(0.0, 0.0); nt];
    for c in 0..cin {
        for t in 0..nt {
            buf[t] = Complex64::new(u[t * cin + c], 0.0);
        }
        fft_in_place(&mut buf);
        for k in 0..k_max {
            modes[k * cin + c] = buf[k];
        }
    }
    modes
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(dst: &mut Option<Vec<f64>>, g: &[f64]) {
    match dst {
        Some(d) => add_into(d, g),
        None => *dst = Some(g.to_vec()),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
