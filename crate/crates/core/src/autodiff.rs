//! Tape-based reverse-mode differentiation over dense f64 tensors.
//!
//! A [`Graph`] records every operation of one forward pass together with its
//! value. [`Graph::backward`] walks the tape in reverse, accumulating
//! gradients in a fixed order, and returns one gradient per parameter of the
//! [`ParamStore`] the graph was built against.
//!
//! Matrix products go through `matrixmultiply::dgemm`; convolutions are
//! lowered to products via im2col.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Read, Write};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),
    #[error("invalid optimizer setting: {0}")]
    Hyper(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

fn shape_err(op: &'static str, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::Shape {
        op,
        detail: detail.into(),
    }
}

/// Dense row-major tensor. Rank 0 holds one value.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(shape_err(op, format!("expected a matrix, got {:?}", self.shape))),
        }
    }

    /// (rows, last dim) view used by row-broadcast ops.
    fn rows_last(&self) -> (usize, usize) {
        let last = self.shape.last().copied().unwrap_or(1);
        if last == 0 {
            (0, 0)
        } else {
            (self.data.len() / last, last)
        }
    }
}

/// C = alpha * op(A) * op(B) + beta * C, where op transposes when asked.
/// `a` is stored as (m×k) or, when `ta`, as (k×m); likewise for `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: slice lengths match the dimensions and strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    in_h: usize,
    in_w: usize,
    in_c: usize,
    k_h: usize,
    k_w: usize,
    out_h: usize,
    out_w: usize,
    out_c: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    fn patch(&self) -> usize {
        self.k_h * self.k_w * self.in_c
    }

    /// Visits (column-matrix offset, input offset) for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let patch = self.patch();
        for b in 0..self.batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = (b * self.out_h + oy) * self.out_w + ox;
                    for ky in 0..self.k_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for kx in 0..self.k_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.in_w as isize {
                                continue;
                            }
                            let col = row * patch + (ky * self.k_w + kx) * self.in_c;
                            let src = ((b * self.in_h + iy as usize) * self.in_w + ix as usize) * self.in_c;
                            f(col, src);
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, transpose_b: bool },
    Conv2d { input: Var, kernel: Var, geom: ConvGeom, cols: Vec<f64> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    AddCol { x: Var, col: Var },
    DivCol { x: Var, col: Var },
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    RowNorm(Var),
    SoftmaxXent { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::AddCol { .. } => "add_col",
            Op::DivCol { .. } => "div_col",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::RowNorm(..) => "row_norm",
            Op::SoftmaxXent { .. } => "softmax_xent_rows",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// One forward pass. Values are kept for the backward sweep.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if value.data.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    /// The named parameter; repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = self
            .store
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))?
            .clone();
        let v = self.push(value, Op::Param)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(value, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
        };
        self.push(value, op)
    }

    /// `a · b` for matrices.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for matrices.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (br, bc) = self.value(b).dims2("matmul")?;
        let (kb, n) = if transpose_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}{}", self.shape(a), self.shape(b), if transpose_b { "ᵀ" } else { "" }),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.value(a).data, false, &self.value(b).data, transpose_b, &mut out, 0.0);
        self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul { a, b, transpose_b })
    }

    /// 2D convolution. `input` is `[B, H, W, C]`, `kernel` is `[kh, kw, C, C_out]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (is, ks) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        let (&[batch, in_h, in_w, in_c], &[k_h, k_w, kc, out_c]) = (&is[..], &ks[..]) else {
            return Err(shape_err("conv2d", format!("input {is:?}, kernel {ks:?}")));
        };
        if kc != in_c || stride == 0 || in_h + 2 * pad < k_h || in_w + 2 * pad < k_w {
            return Err(shape_err(
                "conv2d",
                format!("input {is:?}, kernel {ks:?}, stride {stride}, pad {pad}"),
            ));
        }
        let geom = ConvGeom {
            batch,
            in_h,
            in_w,
            in_c,
            k_h,
            k_w,
            out_h: (in_h + 2 * pad - k_h) / stride + 1,
            out_w: (in_w + 2 * pad - k_w) / stride + 1,
            out_c,
            stride,
            pad,
        };
        let mut cols = vec![0.0; geom.rows() * geom.patch()];
        let src = &self.nodes[input.0].value.data;
        geom.for_each_tap(|col, s| cols[col..col + in_c].copy_from_slice(&src[s..s + in_c]));
        let mut out = vec![0.0; geom.rows() * out_c];
        gemm(
            geom.rows(),
            geom.patch(),
            out_c,
            &cols,
            false,
            &self.value(kernel).data,
            false,
            &mut out,
            0.0,
        );
        let shape = vec![batch, geom.out_h, geom.out_w, out_c];
        self.push(Tensor { shape, data: out }, Op::Conv2d { input, kernel, geom, cols })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `[n]` vector to every row of a tensor whose last dimension is `n`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.value(x).rows_last();
        if self.shape(bias) != [n] {
            return Err(shape_err("add_bias", format!("{:?} + {:?}", self.shape(x), self.shape(bias))));
        }
        let b = self.value(bias).data.clone();
        let src = self.value(x);
        let mut data = src.data.clone();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let shape = src.shape.clone();
        self.push(Tensor { shape, data }, Op::AddBias { x, bias })
    }

    fn col_op(&mut self, x: Var, col: Var, div: bool) -> Result<Var> {
        let name = if div { "div_col" } else { "add_col" };
        let (r, c) = self.value(x).dims2(name)?;
        if self.shape(col) != [r, 1] {
            return Err(shape_err(name, format!("{:?} with {:?}", self.shape(x), self.shape(col))));
        }
        let cv = self.value(col).data.clone();
        let mut data = self.value(x).data.clone();
        for (row, &s) in data.chunks_mut(c.max(1)).zip(&cv) {
            for v in row.iter_mut() {
                if div {
                    *v /= s;
                } else {
                    *v += s;
                }
            }
        }
        let op = if div { Op::DivCol { x, col } } else { Op::AddCol { x, col } };
        self.push(Tensor { shape: vec![r, c], data }, op)
    }

    /// Adds a `[r, 1]` column to every column of an `[r, c]` matrix.
    pub fn add_col(&mut self, x: Var, col: Var) -> Result<Var> {
        self.col_op(x, col, false)
    }

    /// Divides every row `i` of an `[r, c]` matrix by `col[i]`.
    pub fn div_col(&mut self, x: Var, col: Var) -> Result<Var> {
        self.col_op(x, col, true)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(shape_err("mean", "empty tensor"));
        }
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Concatenates matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(shape_err("concat", format!("{} parts along axis {axis}", parts.len())));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.value(p).dims2("concat"))
            .collect::<Result<_>>()?;
        let fixed = if axis == 0 { dims[0].1 } else { dims[0].0 };
        if dims.iter().any(|d| if axis == 0 { d.1 } else { d.0 } != fixed) {
            return Err(shape_err("concat", format!("incompatible parts {dims:?} along axis {axis}")));
        }
        let (shape, data) = if axis == 0 {
            let rows = dims.iter().map(|d| d.0).sum();
            let data = parts.iter().flat_map(|&p| self.value(p).data.iter().copied()).collect();
            (vec![rows, fixed], data)
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(fixed * cols);
            for r in 0..fixed {
                for (&p, d) in parts.iter().zip(&dims) {
                    data.extend_from_slice(&self.value(p).data[r * d.1..(r + 1) * d.1]);
                }
            }
            (vec![fixed, cols], data)
        };
        self.push(Tensor { shape, data }, Op::Concat { parts: parts.to_vec(), axis })
    }

    /// `len` rows (axis 0) or columns (axis 1) of a matrix starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2("slice")?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start + len > extent {
            return Err(shape_err("slice", format!("{start}..{} of {:?} axis {axis}", start + len, [r, c])));
        }
        let src = &self.value(x).data;
        let (shape, data) = if axis == 0 {
            (vec![len, c], src[start * c..(start + len) * c].to_vec())
        } else {
            let mut data = Vec::with_capacity(r * len);
            for row in 0..r {
                data.extend_from_slice(&src[row * c + start..row * c + start + len]);
            }
            (vec![r, len], data)
        };
        self.push(Tensor { shape, data }, Op::Slice { x, axis, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let data = self.value(x).data.clone();
        self.push(Tensor { shape: shape.to_vec(), data }, Op::Reshape(x))
    }

    /// Euclidean norm of each row: `[r, c] -> [r, 1]`.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("row_norm")?;
        let src = &self.value(x).data;
        let data = (0..r)
            .map(|i| src[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        self.push(Tensor { shape: vec![r, 1], data }, Op::RowNorm(x))
    }

    /// Mean over rows of `logsumexp(row) - row[target]`.
    pub fn softmax_xent_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.value(logits).dims2("softmax_xent_rows")?;
        if targets.len() != r || r == 0 || targets.iter().any(|&t| t >= c) {
            return Err(shape_err(
                "softmax_xent_rows",
                format!("{} targets for logits {:?}", targets.len(), [r, c]),
            ));
        }
        let src = &self.value(logits).data;
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0;
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            for p in probs[i * c..(i + 1) * c].iter_mut() {
                *p /= z;
            }
            total += max + z.ln() - row[targets[i]];
        }
        let loss = total / r as f64;
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Sign pattern of every relu input; changes when a perturbation crosses a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(&self.nodes[x.0].value.data),
                _ => None,
            })
            .flat_map(|d| d.iter().map(|&v| v > 0.0))
            .collect()
    }

    /// Reverse sweep from a scalar `loss`. Unused parameters get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::Param = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        let mut out = BTreeMap::new();
        for (name, t) in self.store.iter() {
            let g = self
                .params
                .get(name)
                .and_then(|v| grads[v.0].take())
                .unwrap_or_else(|| vec![0.0; t.len()]);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(AutodiffError::NonFiniteGrad(name.clone()));
            }
            out.insert(name.clone(), Tensor { shape: t.shape.clone(), data: g });
        }
        Ok(Gradients(out))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, contrib: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        };
        let out = &node.value.data;
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul { a, b, transpose_b } => {
                let (m, k) = (val(a).shape[0], val(a).shape[1]);
                let n = node.value.shape[1];
                // dA = G · op(B)ᵀ
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g, false, &val(b).data, !transpose_b, &mut da, 0.0);
                // dB = Aᵀ · G, or (Aᵀ · G)ᵀ = Gᵀ · A when B was transposed
                let mut db = vec![0.0; k * n];
                if transpose_b {
                    gemm(n, m, k, g, true, &val(a).data, false, &mut db, 0.0);
                } else {
                    gemm(k, m, n, &val(a).data, true, g, false, &mut db, 0.0);
                }
                acc(a, da);
                acc(b, db);
            }
            Op::Conv2d { input, kernel, geom, cols } => {
                let (rows, patch, oc) = (geom.rows(), geom.patch(), geom.out_c);
                let mut dk = vec![0.0; patch * oc];
                gemm(patch, rows, oc, cols, true, g, false, &mut dk, 0.0);
                let mut dcols = vec![0.0; rows * patch];
                gemm(rows, oc, patch, g, false, &val(*kernel).data, true, &mut dcols, 0.0);
                let mut dx = vec![0.0; val(*input).len()];
                let c = geom.in_c;
                geom.for_each_tap(|col, s| {
                    for (d, v) in dx[s..s + c].iter_mut().zip(&dcols[col..col + c]) {
                        *d += v;
                    }
                });
                acc(*input, dx);
                acc(*kernel, dk);
            }
            &Op::Add(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.iter().map(|v| -v).collect());
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (&val(a).data, &val(b).data);
                acc(a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                acc(b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            &Op::AddBias { x, bias } => {
                let n = val(bias).len();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(x, g.to_vec());
                acc(bias, db);
            }
            &Op::AddCol { x, col } => {
                let c = node.value.shape[1].max(1);
                let dc = g.chunks(c).map(|row| row.iter().sum()).collect();
                acc(x, g.to_vec());
                acc(col, dc);
            }
            &Op::DivCol { x, col } => {
                let c = node.value.shape[1].max(1);
                let cv = &val(col).data;
                let mut dx = Vec::with_capacity(g.len());
                let mut dc = Vec::with_capacity(cv.len());
                for ((grow, orow), &s) in g.chunks(c).zip(out.chunks(c)).zip(cv) {
                    dx.extend(grow.iter().map(|v| v / s));
                    // d(x/s)/ds = -(x/s)/s
                    dc.push(-grow.iter().zip(orow).map(|(g, y)| g * y).sum::<f64>() / s);
                }
                acc(x, dx);
                acc(col, dc);
            }
            &Op::Scale(x, s) => acc(x, g.iter().map(|v| v * s).collect()),
            &Op::AddScalar(x) => acc(x, g.to_vec()),
            &Op::Tanh(x) => acc(x, g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect()),
            &Op::Relu(x) => acc(
                x,
                g.iter()
                    .zip(&val(x).data)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            &Op::Sigmoid(x) => acc(x, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect()),
            &Op::Exp(x) => acc(x, g.iter().zip(out).map(|(g, y)| g * y).collect()),
            &Op::Log(x) => acc(x, g.iter().zip(&val(x).data).map(|(g, v)| g / v).collect()),
            &Op::Sum(x) => acc(x, vec![g[0]; val(x).len()]),
            &Op::Mean(x) => {
                let n = val(x).len();
                acc(x, vec![g[0] / n as f64; n]);
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let n = val(p).len();
                        acc(p, g[offset..offset + n].to_vec());
                        offset += n;
                    }
                } else {
                    let total = node.value.shape[1];
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = (val(p).shape[0], val(p).shape[1]);
                        let mut d = Vec::with_capacity(r * c);
                        for row in 0..r {
                            d.extend_from_slice(&g[row * total + offset..row * total + offset + c]);
                        }
                        acc(p, d);
                        offset += c;
                    }
                }
            }
            &Op::Slice { x, axis, start } => {
                let (r, c) = (val(x).shape[0], val(x).shape[1]);
                let mut d = vec![0.0; r * c];
                if axis == 0 {
                    d[start * c..start * c + g.len()].copy_from_slice(g);
                } else {
                    let len = node.value.shape[1];
                    for row in 0..r {
                        d[row * c + start..row * c + start + len].copy_from_slice(&g[row * len..(row + 1) * len]);
                    }
                }
                acc(x, d);
            }
            &Op::Reshape(x) => acc(x, g.to_vec()),
            &Op::RowNorm(x) => {
                let c = val(x).shape[1];
                let mut d = Vec::with_capacity(val(x).len());
                for ((row, &n), &gi) in val(x).data.chunks(c.max(1)).zip(out).zip(g) {
                    d.extend(row.iter().map(|v| if n > 0.0 { gi * v / n } else { 0.0 }));
                }
                acc(x, d);
            }
            Op::SoftmaxXent { logits, targets, probs } => {
                let r = targets.len();
                let c = probs.len() / r;
                let scale = g[0] / r as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * c + t] -= scale;
                }
                acc(*logits, d);
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Per-parameter gradients, keyed like the [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub BTreeMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.eps > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0;
        if ok {
            Ok(())
        } else {
            Err(AutodiffError::Hyper(format!("{self:?}")))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Moments {
    m: Tensor,
    v: Tensor,
}

impl Default for Tensor {
    fn default() -> Self {
        Tensor::scalar(0.0)
    }
}

/// Named parameters plus Adam moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    moments: BTreeMap<String, Moments>,
    adam_steps: u64,
}

const MOMENT_M: &str = "@adam_m";
const MOMENT_V: &str = "@adam_v";
const ADAM_STEP: &str = "@adam_step";
const MANIFEST_PREFIX: &str = "manifest:";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(AutodiffError::DuplicateParam(name.to_string()));
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    /// Glorot-uniform weights: `±sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_glorot<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn adam_steps(&self) -> u64 {
        self.adam_steps
    }

    /// One bias-corrected Adam update over every parameter.
    pub fn adam_step(&mut self, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
        cfg.validate()?;
        for (name, p) in &self.params {
            let g = grads
                .get(name)
                .ok_or_else(|| AutodiffError::UnknownParam(name.clone()))?;
            if g.shape != p.shape {
                return Err(shape_err("adam_step", format!("{name}: {:?} vs {:?}", g.shape, p.shape)));
            }
            if g.data.iter().any(|v| !v.is_finite()) {
                return Err(AutodiffError::NonFiniteGrad(name.clone()));
            }
        }
        self.adam_steps += 1;
        let t = self.adam_steps as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in self.params.iter_mut() {
            let g = &grads.0[name];
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(&p.shape),
                v: Tensor::zeros(&p.shape),
            });
            for (((w, &gi), m), v) in p
                .data
                .iter_mut()
                .zip(&g.data)
                .zip(mom.m.data.iter_mut())
                .zip(mom.v.data.iter_mut())
            {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
                *w -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Writes the "CDRW" checkpoint format.
    pub fn write_checkpoint<W: Write>(&self, manifest: &[(String, String)], mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for (k, v) in manifest {
            if k.contains('=') {
                return Err(AutodiffError::Checkpoint(format!("manifest key `{k}` contains '='")));
            }
            write_record(&mut out, &format!("{MANIFEST_PREFIX}{k}={v}"), &[0], &[])?;
        }
        for (name, t) in &self.params {
            write_record(&mut out, name, &t.shape, &t.data)?;
        }
        for (name, mom) in &self.moments {
            write_record(&mut out, &format!("{name}{MOMENT_M}"), &mom.m.shape, &mom.m.data)?;
            write_record(&mut out, &format!("{name}{MOMENT_V}"), &mom.v.shape, &mom.v.data)?;
        }
        write_record(&mut out, ADAM_STEP, &[], &[self.adam_steps as f64])?;
        Ok(())
    }

    /// Reads a "CDRW" checkpoint, returning the store and its manifest entries.
    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(ParamStore, Vec<(String, String)>)> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(AutodiffError::Checkpoint(format!(
                "bad magic {:?}, expected \"CDRW\"",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(AutodiffError::Checkpoint(format!("unsupported version {version}")));
        }
        let mut store = ParamStore::new();
        let mut manifest = Vec::new();
        let mut moment_m = BTreeMap::new();
        let mut moment_v = BTreeMap::new();
        while cur.pos < bytes.len() {
            let name_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| AutodiffError::Checkpoint("record name is not UTF-8".into()))?;
            let rank = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let data: Vec<f64> = cur
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor { shape, data };
            if let Some(entry) = name.strip_prefix(MANIFEST_PREFIX) {
                let (k, v) = entry
                    .split_once('=')
                    .ok_or_else(|| AutodiffError::Checkpoint(format!("malformed manifest `{entry}`")))?;
                manifest.push((k.to_string(), v.to_string()));
            } else if name == ADAM_STEP {
                store.adam_steps = tensor.item() as u64;
            } else if let Some(base) = name.strip_suffix(MOMENT_M) {
                moment_m.insert(base.to_string(), tensor);
            } else if let Some(base) = name.strip_suffix(MOMENT_V) {
                moment_v.insert(base.to_string(), tensor);
            } else {
                store.insert(&name, tensor)?;
            }
        }
        for (name, m) in moment_m {
            let v = moment_v
                .remove(&name)
                .ok_or_else(|| AutodiffError::Checkpoint(format!("missing second moment for `{name}`")))?;
            store.moments.insert(name, Moments { m, v });
        }
        Ok((store, manifest))
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CDRW";
pub const CHECKPOINT_VERSION: u16 = 1;

fn write_record<W: Write>(out: &mut W, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    out.write_all(&(name.len() as u32).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(AutodiffError::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Outcome of a central-difference gradient comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a relu kink.
    pub skipped_kinks: usize,
}

/// Denominator floor for relative errors, so vanishing gradients compare absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients of `loss_fn` with central differences.
///
/// At most `max_coords` coordinates are probed (all of them when the store
/// is smaller), sampled with a fixed seed.
pub fn grad_check<F>(store: &ParamStore, loss_fn: F, eps: f64, max_coords: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(AutodiffError::Hyper(format!("grad_check eps {eps}")));
    }
    let (analytic, base_pattern) = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        (g.backward(loss)?, g.relu_pattern())
    };
    let coords: Vec<(String, usize)> = store
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| (name.clone(), i)))
        .collect();
    let chosen: Vec<usize> = if coords.len() <= max_coords {
        (0..coords.len()).collect()
    } else {
        let mut picks = index::sample(&mut ChaCha8Rng::seed_from_u64(0x6772_6164), coords.len(), max_coords).into_vec();
        picks.sort_unstable();
        picks
    };
    let eval = |name: &str, i: usize, delta: f64| -> Result<(f64, Vec<bool>)> {
        let mut s = store.clone();
        s.get_mut(name).unwrap().data[i] += delta;
        let mut g = Graph::new(&s);
        let loss = loss_fn(&mut g)?;
        Ok((g.value(loss).item(), g.relu_pattern()))
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    for idx in chosen {
        let (name, i) = &coords[idx];
        let (plus, pat_plus) = eval(name, *i, eps)?;
        let (minus, pat_minus) = eval(name, *i, -eps)?;
        if pat_plus != base_pattern || pat_minus != base_pattern {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let exact = analytic.0[name].data[*i];
        let denom = exact.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        report.max_rel_error = report.max_rel_error.max((exact - numeric).abs() / denom);
        report.checked += 1;
    }
    Ok(report)
}
