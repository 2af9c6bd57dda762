//! Recording tape for reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep.

use super::{Real, Tensor};
use crate::error::{shape_err, Result, TurboError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag of a node. Also used to target fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Gelu,
    Exp,
    Log,
    Sqrt,
    Softmax,
    LogSoftmax,
    LayerNorm,
    GatherRows,
    Reshape,
    Permute,
    Concat,
    Sum,
    Mean,
    L2Normalize,
    Pick,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Gelu => "gelu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sqrt => "sqrt",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::LayerNorm => "layernorm",
            OpKind::GatherRows => "gather_rows",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Concat => "concat",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::Pick => "pick",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        use OpKind::*;
        [
            Leaf, MatMul, Add, Sub, Mul, Scale, Gelu, Exp, Log, Sqrt, Softmax, LogSoftmax,
            LayerNorm, GatherRows, Reshape, Permute, Concat, Sum, Mean, L2Normalize, Pick,
        ]
        .into_iter()
        .find(|k| k.name() == name)
    }
}

#[derive(Clone, Debug)]
struct MatMulDims {
    m: usize,
    k: usize,
    n: usize,
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    ta: bool,
    tb: bool,
}

impl MatMulDims {
    fn a_strides(&self) -> (isize, isize) {
        if self.ta {
            (1, self.m as isize)
        } else {
            (self.k as isize, 1)
        }
    }

    fn b_strides(&self) -> (isize, isize) {
        if self.tb {
            (1, self.k as isize)
        } else {
            (self.n as isize, 1)
        }
    }
}

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, dims: MatMulDims },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: F },
    Gelu { a: Var, tanh: Vec<F> },
    Exp { a: Var },
    Log { a: Var },
    Sqrt { a: Var },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    LogSoftmax { a: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, rstd: Vec<F> },
    GatherRows { x: Var, rows: Vec<usize>, width: usize },
    Reshape { a: Var },
    Permute { a: Var, permuted: Vec<usize>, inverse: Vec<usize> },
    Concat { parts: Vec<(Var, usize)>, outer: usize, inner: usize },
    Sum { a: Var },
    Mean { a: Var },
    L2Normalize { a: Var, norms: Vec<F> },
    Pick { a: Var, cols: Vec<usize>, width: usize },
}

impl<F> Op<F> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Exp { .. } => OpKind::Exp,
            Op::Log { .. } => OpKind::Log,
            Op::Sqrt { .. } => OpKind::Sqrt,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Concat { .. } => OpKind::Concat,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::Pick { .. } => OpKind::Pick,
        }
    }
}

struct Node<F> {
    op: Op<F>,
    value: Tensor<F>,
    requires_grad: bool,
}

/// A compute graph recorded by running operations eagerly.
///
/// Leaf gradients accumulate across `backward` calls until [`Graph::zero_grad`].
pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    fault: Option<OpKind>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_inner<F: Real>(x: F) -> F {
    F::c(GELU_C) * (x + F::c(GELU_A) * x * x * x)
}

/// `tanh(gelu_inner(x))` for every element, through one `exp` pass.
fn gelu_tanh<F: Real>(x: &[F]) -> Vec<F> {
    let mut e: Vec<F> = x.iter().map(|&v| gelu_inner(v).abs() * F::c(-2.0)).collect();
    F::exp_slice(&mut e);
    x.iter()
        .zip(&e)
        .map(|(&v, &e)| {
            let t = (F::one() - e) / (F::one() + e);
            if gelu_inner(v) < F::zero() {
                -t
            } else {
                t
            }
        })
        .collect()
}

/// Derivative of the GELU given `x` and the saved `tanh` term.
fn gelu_grad<F: Real>(x: F, t: F) -> F {
    let half = F::c(0.5);
    half * (F::one() + t)
        + half * x * (F::one() - t * t) * F::c(GELU_C) * (F::one() + F::c(3.0 * GELU_A) * x * x)
}

/// Splits `shape` around `axis` into (outer, len, inner).
fn axis_split(shape: &[usize], axis: isize) -> Result<(usize, usize, usize, usize)> {
    let nd = shape.len() as isize;
    let ax = if axis < 0 { nd + axis } else { axis };
    if ax < 0 || ax >= nd {
        return Err(shape_err!("axis {} out of range for shape {:?}", axis, shape));
    }
    let ax = ax as usize;
    let outer = shape[..ax].iter().product();
    let inner = shape[ax + 1..].iter().product();
    Ok((ax, outer, shape[ax], inner))
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), fault: None }
    }

    /// Flips the sign of every backward contribution of `kind`.
    /// Exists so the gradient checker can be shown to catch a broken rule.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Input node. Gradients are tracked only when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).unwrap())
    }

    pub fn grad_data(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// True when every node value and populated gradient is finite.
    pub fn finite_check(&self) -> bool {
        self.nodes.iter().all(|n| n.value.finite_check())
            && self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }

    // ---------------------------------------------------------------- matmul

    /// Batched matrix product `[.., M, K] x [.., K, N] -> [.., M, N]`.
    /// Batch extents must match, or one side must be a plain matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product with either operand optionally transposed in its last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err!("matmul needs rank >= 2 operands, got {:?} and {:?}", sa, sb));
        }
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, ka) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
        if ka != kb {
            return Err(shape_err!("matmul inner extents differ: {:?} x {:?}", sa, sb));
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let batch_a: usize = lead_a.iter().product();
        let batch_b: usize = lead_b.iter().product();
        let (a_batched, b_batched) = (!lead_a.is_empty(), !lead_b.is_empty());
        if a_batched && b_batched && lead_a != lead_b {
            return Err(shape_err!("matmul batch extents differ: {:?} x {:?}", sa, sb));
        }
        let lead = if a_batched { lead_a.to_vec() } else { lead_b.to_vec() };
        let batch = batch_a.max(batch_b);
        // A row-major batch against a shared matrix is one tall product.
        let dims = if a_batched && !b_batched && !ta {
            MatMulDims { m: m * batch, k: ka, n, batch: 1, a_batched, b_batched, ta, tb }
        } else {
            MatMulDims { m, k: ka, n, batch, a_batched, b_batched, ta, tb }
        };
        let (m, batch) = (dims.m, dims.batch);
        let mut out = vec![F::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let (rsa, csa) = dims.a_strides();
            let (rsb, csb) = dims.b_strides();
            for i in 0..batch {
                let ao = if a_batched { i * m * ka } else { 0 };
                let bo = if b_batched { i * ka * n } else { 0 };
                F::gemm(
                    m,
                    ka,
                    n,
                    F::one(),
                    &av[ao..ao + m * ka],
                    rsa,
                    csa,
                    &bv[bo..bo + ka * n],
                    rsb,
                    csb,
                    F::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    n as isize,
                    1,
                );
            }
        }
        let mut shape = lead;
        shape.extend([if ta { ca } else { ra }, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul { a, b, dims }, Tensor::new(shape, out)?, rg))
    }

    // ----------------------------------------------------------- elementwise

    fn broadcast_ok(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let nb = self.value(b).numel();
        if sa == sb || nb == 1 || (sb.len() <= sa.len() && sa.ends_with(sb)) {
            Ok(())
        } else {
            Err(shape_err!("operands {:?} and {:?} are not broadcast-compatible", sa, sb))
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        self.broadcast_ok(a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len();
        let mut data = Vec::with_capacity(av.numel());
        for chunk in av.data().chunks(nb) {
            data.extend(chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)));
        }
        Tensor::new(av.shape().to_vec(), data)
    }

    /// `a + b`, where `b` may be a scalar or a trailing-shape suffix of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = if self.value(a).numel() < self.value(b).numel() { (b, a) } else { (a, b) };
        let out = self.binary(a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add { a, b }, out, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Sub { a, b }, out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = if self.value(a).numel() < self.value(b).numel() { (b, a) } else { (a, b) };
        let out = self.binary(a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul { a, b }, out, rg))
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let v = self.value(a);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x * factor).collect())
            .unwrap();
        let rg = self.rg(&[a]);
        self.push(Op::Scale { a, factor }, out, rg)
    }

    fn unary(&mut self, a: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let v = self.value(a);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect()).unwrap();
        let rg = self.rg(&[a]);
        self.push(op, out, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let tanh = gelu_tanh(v.data());
        let half = F::c(0.5);
        let out = v.data().iter().zip(&tanh).map(|(&x, &t)| half * x * (F::one() + t)).collect();
        let out = Tensor::new(v.shape().to_vec(), out).unwrap();
        let rg = self.rg(&[a]);
        self.push(Op::Gelu { a, tanh }, out, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp { a }, |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < F::zero()) {
            return Err(TurboError::Domain("log of negative input".into()));
        }
        Ok(self.unary(a, Op::Log { a }, |x| x.ln()))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < F::zero()) {
            return Err(TurboError::Domain("sqrt of negative input".into()));
        }
        Ok(self.unary(a, Op::Sqrt { a }, |x| x.sqrt()))
    }

    // ------------------------------------------------------------ reductions

    fn softmax_values(&self, a: Var, axis: isize, log: bool) -> Result<(Tensor<F>, usize, usize, usize)> {
        let v = self.value(a);
        let (_, outer, len, inner) = axis_split(v.shape(), axis)?;
        let x = v.data();
        let mut out = vec![F::zero(); x.len()];
        if inner == 1 {
            for (xr, yr) in x.chunks(len).zip(out.chunks_mut(len)) {
                let mx = xr.iter().copied().fold(F::neg_infinity(), F::max);
                yr.iter_mut().zip(xr).for_each(|(y, &v)| *y = v - mx);
                F::exp_slice(yr);
                let s = yr.iter().fold(F::zero(), |a, &b| a + b);
                if log {
                    let ls = s.ln() + mx;
                    yr.iter_mut().zip(xr).for_each(|(y, &v)| *y = v - ls);
                } else {
                    let inv = s.recip();
                    yr.iter_mut().for_each(|y| *y = *y * inv);
                }
            }
            return Ok((Tensor::new(v.shape().to_vec(), out)?, outer, len, inner));
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| x[at(j)]).fold(F::neg_infinity(), F::max);
                let mut s = F::zero();
                for j in 0..len {
                    let e = (x[at(j)] - mx).exp();
                    out[at(j)] = e;
                    s = s + e;
                }
                if log {
                    let ls = s.ln();
                    for j in 0..len {
                        out[at(j)] = x[at(j)] - mx - ls;
                    }
                } else {
                    for j in 0..len {
                        out[at(j)] = out[at(j)] / s;
                    }
                }
            }
        }
        Ok((Tensor::new(v.shape().to_vec(), out)?, outer, len, inner))
    }

    /// Max-shifted softmax along `axis` (negative axes count from the end).
    pub fn softmax(&mut self, a: Var, axis: isize) -> Result<Var> {
        let (out, outer, len, inner) = self.softmax_values(a, axis, false)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Softmax { a, outer, len, inner }, out, rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: isize) -> Result<Var> {
        let (out, outer, len, inner) = self.softmax_values(a, axis, true)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::LogSoftmax { a, outer, len, inner }, out, rg))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias` (both `[D]`).
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| shape_err!("layernorm of a scalar"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err!(
                "layernorm affine params {:?}/{:?} do not match width {}",
                self.shape(gain),
                self.shape(bias),
                d
            ));
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / d.max(1);
        let dn = F::c(d as f64);
        let mut xhat = vec![F::zero(); xv.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let rs = F::one() / (var + F::c(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(Op::LayerNorm { x, gain, bias, xhat, rstd }, Tensor::new(shape, out)?, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Op::Sum { a }, Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.numel().max(1);
        let s = v.sum() / F::c(n as f64);
        let rg = self.rg(&[a]);
        self.push(Op::Mean { a }, Tensor::scalar(s), rg)
    }

    /// Scales each row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let d = *v.shape().last().ok_or_else(|| shape_err!("l2_normalize of a scalar"))?;
        let rows = v.numel() / d.max(1);
        let mut norms = Vec::with_capacity(rows);
        let mut out = v.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let nrm = row.iter().map(|&x| x * x).sum::<F>().sqrt().max(F::c(1e-12));
            row.iter_mut().for_each(|x| *x = *x / nrm);
            norms.push(nrm);
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::L2Normalize { a, norms }, out, rg))
    }

    /// `out[r] = a[r, cols[r]]` for `a` viewed as `[rows, last]`.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let width = *v.shape().last().ok_or_else(|| shape_err!("pick from a scalar"))?;
        let rows = v.numel() / width.max(1);
        if cols.len() != rows {
            return Err(shape_err!("pick needs {} column indices, got {}", rows, cols.len()));
        }
        if let Some(&c) = cols.iter().find(|&&c| c >= width) {
            return Err(TurboError::Index(format!("column {} out of range [0,{})", c, width)));
        }
        let data = cols.iter().enumerate().map(|(r, &c)| v.data()[r * width + c]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Pick { a, cols: cols.to_vec(), width }, Tensor::new(vec![rows], data)?, rg))
    }

    // ---------------------------------------------------------- data movement

    /// Selects rows of `x` (`[N, D]`) in `idx` order.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.gather_rows_batched(x, std::slice::from_ref(&idx.to_vec()))
    }

    /// Row selection on `[.., N, D]`. `idx` holds either one list shared by all
    /// leading batches or one list per batch; all lists have equal length.
    pub fn gather_rows_batched(&mut self, x: Var, idx: &[Vec<usize>]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err!("gather_rows needs rank >= 2, got {:?}", shape));
        }
        let (n, d) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch: usize = shape[..shape.len() - 2].iter().product();
        if idx.is_empty() || (idx.len() != 1 && idx.len() != batch) {
            return Err(shape_err!("gather_rows got {} index lists for {} batches", idx.len(), batch));
        }
        let k = idx[0].len();
        if idx.iter().any(|l| l.len() != k) {
            return Err(shape_err!("gather_rows index lists have unequal lengths"));
        }
        let mut rows = Vec::with_capacity(batch * k);
        for bi in 0..batch {
            let list = &idx[if idx.len() == 1 { 0 } else { bi }];
            for &i in list {
                if i >= n {
                    return Err(TurboError::Index(format!("row {} out of range [0,{})", i, n)));
                }
                rows.push(bi * n + i);
            }
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let mut oshape = shape[..shape.len() - 2].to_vec();
        oshape.extend([k, d]);
        let rg = self.rg(&[x]);
        Ok(self.push(Op::GatherRows { x, rows, width: d }, Tensor::new(oshape, out)?, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Reshape { a }, out, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let out: Vec<usize> = perm.iter().map(|&p| shape.get(p).copied().unwrap_or(0)).collect();
        self.rearrange(a, &shape, perm, &out)
    }

    /// Views `a` as `view`, permutes axes by `perm`, then reshapes to `out`,
    /// with a single copy.
    pub fn rearrange(&mut self, a: Var, view: &[usize], perm: &[usize], out: &[usize]) -> Result<Var> {
        let nd = view.len();
        let numel: usize = view.iter().product();
        if numel != self.value(a).numel() || out.iter().product::<usize>() != numel {
            return Err(shape_err!("cannot view {:?} as {:?} -> {:?}", self.shape(a), view, out));
        }
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("invalid permutation {:?} for shape {:?}", perm, view));
        }
        let mut data = Vec::with_capacity(numel);
        permute_into(self.value(a).data(), view, perm, &mut data);
        let permuted: Vec<usize> = perm.iter().map(|&p| view[p]).collect();
        let mut inverse = vec![0; nd];
        perm.iter().enumerate().for_each(|(i, &p)| inverse[p] = i);
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Permute { a, permuted, inverse }, Tensor::new(out.to_vec(), data)?, rg))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: isize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| shape_err!("concat of nothing"))?).to_vec();
        let (ax, outer, _, inner) = axis_split(&first, axis)?;
        let mut total = 0;
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (x, y))| i != ax && x != y)
            {
                return Err(shape_err!("concat extents differ: {:?} vs {:?}", s, first));
            }
            lens.push((p, s[ax]));
            total += s[ax];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(p, len) in &lens {
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[ax] = total;
        let rg = self.rg(parts);
        Ok(self.push(Op::Concat { parts: lens, outer, inner }, Tensor::new(shape, out)?, rg))
    }

    // -------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients of leaves accumulate across calls; intermediate gradients are
    /// released once propagated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TurboError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.value(loss).finite_check() {
            return Err(TurboError::NonFinite("loss".into()));
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.grads, loss, 1, |g| g[0] = g[0] + F::one());
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(mut gout) = self.grads[i].take() else { continue };
            if self.fault == Some(self.nodes[i].op.kind()) {
                gout.iter_mut().for_each(|v| *v = -*v);
            }
            self.backward_node(i, &gout);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, gout: &[F]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, dims } => {
                let d = dims;
                let (m, k, n) = (d.m, d.k, d.n);
                let (rsa, csa) = d.a_strides();
                let (rsb, csb) = d.b_strides();
                if wants(*a) {
                    let bv = val(*b).data();
                    let alen = val(*a).numel();
                    acc(nodes, grads, *a, alen, |ga| {
                        for bi in 0..d.batch {
                            let go = &gout[bi * m * n..(bi + 1) * m * n];
                            let bo = if d.b_batched { bi * k * n } else { 0 };
                            let bs = &bv[bo..bo + k * n];
                            let ao = if d.a_batched { bi * m * k } else { 0 };
                            let gs = &mut ga[ao..ao + m * k];
                            if d.ta {
                                // stored [K, M]: dA = op(B) . dC^T
                                F::gemm(k, n, m, F::one(), bs, rsb, csb, go, 1, n as isize, F::one(), gs, m as isize, 1);
                            } else {
                                F::gemm(m, n, k, F::one(), go, n as isize, 1, bs, csb, rsb, F::one(), gs, k as isize, 1);
                            }
                        }
                    });
                }
                if wants(*b) {
                    let av = val(*a).data();
                    let blen = val(*b).numel();
                    acc(nodes, grads, *b, blen, |gb| {
                        for bi in 0..d.batch {
                            let go = &gout[bi * m * n..(bi + 1) * m * n];
                            let ao = if d.a_batched { bi * m * k } else { 0 };
                            let as_ = &av[ao..ao + m * k];
                            let bo = if d.b_batched { bi * k * n } else { 0 };
                            let gs = &mut gb[bo..bo + k * n];
                            if d.tb {
                                // stored [N, K]: dB = dC^T . op(A)
                                F::gemm(n, m, k, F::one(), go, 1, n as isize, as_, rsa, csa, F::one(), gs, k as isize, 1);
                            } else {
                                F::gemm(k, m, n, F::one(), as_, csa, rsa, go, n as isize, 1, F::one(), gs, n as isize, 1);
                            }
                        }
                    });
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -F::one() } else { F::one() };
                acc_add(nodes, grads, *a, gout);
                if wants(*b) {
                    let nb = val(*b).numel();
                    acc(nodes, grads, *b, nb, |g| {
                        for chunk in gout.chunks(nb) {
                            g.iter_mut().zip(chunk).for_each(|(x, &y)| *x = *x + sign * y);
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let nb = bv.len();
                if wants(*a) {
                    acc(nodes, grads, *a, av.len(), |g| {
                        for (gc, yc) in g.chunks_mut(nb).zip(gout.chunks(nb)) {
                            for ((x, &y), &w) in gc.iter_mut().zip(yc).zip(bv) {
                                *x = *x + y * w;
                            }
                        }
                    });
                }
                if wants(*b) {
                    acc(nodes, grads, *b, nb, |g| {
                        for (yc, ac) in gout.chunks(nb).zip(av.chunks(nb)) {
                            for ((x, &y), &w) in g.iter_mut().zip(yc).zip(ac) {
                                *x = *x + y * w;
                            }
                        }
                    });
                }
            }
            Op::Scale { a, factor } => {
                acc(nodes, grads, *a, gout.len(), |g| {
                    g.iter_mut().zip(gout).for_each(|(x, &y)| *x = *x + y * *factor)
                });
            }
            Op::Gelu { a, tanh } => {
                let av = val(*a).data();
                acc(nodes, grads, *a, av.len(), |g| {
                    for j in 0..av.len() {
                        g[j] = g[j] + gout[j] * gelu_grad(av[j], tanh[j]);
                    }
                });
            }
            Op::Exp { a } => {
                let y = node.value.data();
                acc(nodes, grads, *a, y.len(), |g| {
                    for j in 0..y.len() {
                        g[j] = g[j] + gout[j] * y[j];
                    }
                });
            }
            Op::Log { a } => {
                let av = val(*a).data();
                acc(nodes, grads, *a, av.len(), |g| {
                    for j in 0..av.len() {
                        g[j] = g[j] + gout[j] / av[j];
                    }
                });
            }
            Op::Sqrt { a } => {
                let y = node.value.data();
                acc(nodes, grads, *a, y.len(), |g| {
                    for j in 0..y.len() {
                        g[j] = g[j] + gout[j] * F::c(0.5) / y[j];
                    }
                });
            }
            Op::Softmax { a, outer, len, inner } => {
                let y = node.value.data();
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(nodes, grads, *a, y.len(), |g| {
                    if inner == 1 {
                        let rows = g.chunks_mut(len).zip(y.chunks(len)).zip(gout.chunks(len));
                        for ((gr, yr), dr) in rows {
                            let dot = yr.iter().zip(dr).fold(F::zero(), |s, (&y, &d)| s + y * d);
                            for ((g, &y), &d) in gr.iter_mut().zip(yr).zip(dr) {
                                *g = *g + y * (d - dot);
                            }
                        }
                        return;
                    }
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: F = (0..len).map(|j| gout[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                g[at(j)] = g[at(j)] + y[at(j)] * (gout[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { a, outer, len, inner } => {
                let y = node.value.data();
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(nodes, grads, *a, y.len(), |g| {
                    if inner == 1 {
                        let mut p = vec![F::zero(); len];
                        let rows = g.chunks_mut(len).zip(y.chunks(len)).zip(gout.chunks(len));
                        for ((gr, yr), dr) in rows {
                            let s = dr.iter().fold(F::zero(), |a, &b| a + b);
                            p.copy_from_slice(yr);
                            F::exp_slice(&mut p);
                            for ((g, &e), &d) in gr.iter_mut().zip(&p).zip(dr) {
                                *g = *g + d - e * s;
                            }
                        }
                        return;
                    }
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let s: F = (0..len).map(|j| gout[at(j)]).sum();
                            for j in 0..len {
                                g[at(j)] = g[at(j)] + gout[at(j)] - y[at(j)].exp() * s;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = val(*gain).data();
                let d = gv.len();
                let rows = rstd.len();
                if wants(*gain) {
                    acc(nodes, grads, *gain, d, |g| {
                        for r in 0..rows {
                            for j in 0..d {
                                g[j] = g[j] + gout[r * d + j] * xhat[r * d + j];
                            }
                        }
                    });
                }
                if wants(*bias) {
                    acc(nodes, grads, *bias, d, |g| {
                        for r in 0..rows {
                            for j in 0..d {
                                g[j] = g[j] + gout[r * d + j];
                            }
                        }
                    });
                }
                if wants(*x) {
                    let dn = F::c(d as f64);
                    acc(nodes, grads, *x, rows * d, |g| {
                        let mut dxh = vec![F::zero(); d];
                        for r in 0..rows {
                            let (mut s1, mut s2) = (F::zero(), F::zero());
                            for j in 0..d {
                                dxh[j] = gout[r * d + j] * gv[j];
                                s1 = s1 + dxh[j];
                                s2 = s2 + dxh[j] * xhat[r * d + j];
                            }
                            let (m1, m2) = (s1 / dn, s2 / dn);
                            for j in 0..d {
                                g[r * d + j] =
                                    g[r * d + j] + rstd[r] * (dxh[j] - m1 - xhat[r * d + j] * m2);
                            }
                        }
                    });
                }
            }
            Op::GatherRows { x, rows, width } => {
                let (nx, w) = (val(*x).numel(), *width);
                acc(nodes, grads, *x, nx, |g| {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..w {
                            g[r * w + j] = g[r * w + j] + gout[k * w + j];
                        }
                    }
                });
            }
            Op::Reshape { a } => acc_add(nodes, grads, *a, gout),
            Op::Permute { a, permuted, inverse } => {
                if wants(*a) {
                    let mut back = Vec::with_capacity(gout.len());
                    permute_into(gout, permuted, inverse, &mut back);
                    acc_owned(grads, *a, back);
                }
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, len) in parts {
                    if wants(p) {
                        acc(nodes, grads, p, outer * len * inner, |g| {
                            for o in 0..*outer {
                                let src = (o * total + offset) * inner;
                                let dst = o * len * inner;
                                for j in 0..len * inner {
                                    g[dst + j] = g[dst + j] + gout[src + j];
                                }
                            }
                        });
                    }
                    offset += len;
                }
            }
            Op::Sum { a } => {
                let n = val(*a).numel();
                acc(nodes, grads, *a, n, |g| g.iter_mut().for_each(|x| *x = *x + gout[0]));
            }
            Op::Mean { a } => {
                let n = val(*a).numel();
                let s = gout[0] / F::c(n.max(1) as f64);
                acc(nodes, grads, *a, n, |g| g.iter_mut().for_each(|x| *x = *x + s));
            }
            Op::L2Normalize { a, norms } => {
                let y = node.value.data();
                let d = y.len() / norms.len().max(1);
                acc(nodes, grads, *a, y.len(), |g| {
                    for (r, &nrm) in norms.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        let dot: F = row.clone().map(|j| y[j] * gout[j]).sum();
                        for j in row {
                            g[j] = g[j] + (gout[j] - y[j] * dot) / nrm;
                        }
                    }
                });
            }
            Op::Pick { a, cols, width } => {
                let n = val(*a).numel();
                acc(nodes, grads, *a, n, |g| {
                    for (r, &c) in cols.iter().enumerate() {
                        g[r * width + c] = g[r * width + c] + gout[r];
                    }
                });
            }
        }
    }
}

fn acc<F: Real>(
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
    v: Var,
    len: usize,
    f: impl FnOnce(&mut [F]),
) {
    if nodes[v.0].requires_grad {
        accumulate(grads, v, len, f)
    }
}

/// Adds a same-shaped contribution, moving a copy in when no buffer exists yet.
fn acc_add<F: Real>(nodes: &[Node<F>], grads: &mut [Option<Vec<F>>], v: Var, gout: &[F]) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(gout).for_each(|(x, &y)| *x = *x + y),
        slot @ None => *slot = Some(gout.to_vec()),
    }
}

/// Adds an owned same-shaped contribution, moving it in when no buffer exists yet.
fn acc_owned<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, part: Vec<F>) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(&part).for_each(|(x, &y)| *x = *x + y),
        slot @ None => *slot = Some(part),
    }
}

/// Appends `src`, viewed as `view`, to `dst` with output axis `i` taken from
/// input axis `perm[i]`.
fn permute_into<F: Copy>(src: &[F], view: &[usize], perm: &[usize], dst: &mut Vec<F>) {
    let nd = view.len();
    if nd == 0 || src.is_empty() {
        dst.extend_from_slice(src);
        return;
    }
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd - 1).rev() {
        in_strides[i] = in_strides[i + 1] * view[i + 1];
    }
    let shape: Vec<usize> = perm.iter().map(|&p| view[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let (last, step) = (shape[nd - 1], strides[nd - 1]);
    let mut counter = vec![0usize; nd - 1];
    let mut offset = 0usize;
    for _ in 0..src.len() / last {
        if step == 1 {
            dst.extend_from_slice(&src[offset..offset + last]);
        } else {
            dst.extend((0..last).map(|j| src[offset + j * step]));
        }
        for ax in (0..nd - 1).rev() {
            counter[ax] += 1;
            offset += strides[ax];
            if counter[ax] < shape[ax] {
                break;
            }
            offset -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, len: usize, f: impl FnOnce(&mut [F])) {
    let g = grads[v.0].get_or_insert_with(|| vec![F::zero(); len]);
    f(g)
}
