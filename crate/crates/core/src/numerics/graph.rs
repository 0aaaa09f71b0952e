//! Tape-based reverse-mode differentiation over [`Array`] values.
//!
//! Every op appends a node to the tape; the tape order is a valid topological
//! order, so `backward` walks it in reverse once.

use std::sync::OnceLock;

use rand::Rng;

use super::array::Array;
use super::NumericsError;

/// Environment flag enabling non-finite checks after every forward op.
pub const DEBUG_NAN_ENV: &str = "TAT_DEBUG_NAN";

fn nan_checks_from_env() -> bool {
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| {
        std::env::var(DEBUG_NAN_ENV)
            .map(|v| !v.is_empty() && v != "0")
            .unwrap_or(false)
    })
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    MatMul { a: Var, b: Var, shared: bool },
    TransposeLast2(Var),
    Concat(Vec<Var>),
    BroadcastTime(Var),
    Softmax(Var),
    MulConst(Var, Vec<f64>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d { x: Var, kernel: Var, dilation: usize },
    Gather { table: Var, indices: Vec<usize> },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    SelectLast { x: Var, index: usize },
    Pinball { pred: Var, target: Vec<f64>, level: f64 },
    Sum(Var),
}

/// One recorded value on the tape: a differentiable dense array.
#[derive(Debug)]
pub struct Node {
    value: Array,
    grad: Option<Array>,
    requires_grad: bool,
    op: Op,
}

impl Node {
    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn grad(&self) -> Option<&Array> {
        self.grad.as_ref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
    nan_checks: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
    NumericsError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `rhs` broadcasts against `lhs` when its shape is a suffix of `lhs`'s shape.
fn is_suffix(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

/// c[m, n] += a[m, k] · b[k, n]
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// out[k, n] += a[m, k]ᵀ · g[m, n]
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += a_ip * gv;
            }
        }
    }
}

/// out[m, k] += g[m, n] · b[k, n]ᵀ
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (p, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            *o += g_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Moves `src` (with `shape`) into the axis order given by `perm`.
fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let mut out = vec![0.0; src.len()];
    let mut idx = vec![0usize; out_shape.len()];
    for o in out.iter_mut() {
        let off: usize = idx
            .iter()
            .zip(perm)
            .map(|(&i, &p)| i * in_strides[p])
            .sum();
        *o = src[off];
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            nan_checks: nan_checks_from_env(),
        }
    }

    /// Overrides the environment-derived non-finite check setting.
    pub fn with_nan_checks(mut self, enabled: bool) -> Self {
        self.nan_checks = enabled;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Array> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient with respect to `v`, zero-filled when `v` did not influence the loss.
    pub fn grad_or_zeros(&self, v: Var) -> Array {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(self.shape(v)))
    }

    fn push(&mut self, value: Array, op: Op, inputs: &[Var]) -> Result<Var, NumericsError> {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if self.nan_checks
            && !value.is_finite()
            && inputs.iter().all(|v| self.nodes[v.0].value.is_finite())
        {
            return Err(NumericsError::NonFinite {
                op: op_name(&op),
            });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Array) -> Var {
        self.leaf(value, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    fn binary_broadcast(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Array, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if !is_suffix(av.shape(), bv.shape()) {
            return Err(shape_err(op, av.shape(), bv.shape()));
        }
        let bl = bv.len();
        let data = av
            .data()
            .chunks(bl)
            .flat_map(|chunk| chunk.iter().zip(bv.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        Array::new(av.shape().to_vec(), data)
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.binary_broadcast("add", a, b, |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.binary_broadcast("sub", a, b, |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.binary_broadcast("mul", a, b, |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, NumericsError> {
        let v = self.value(x);
        let out = Array::new(v.shape().to_vec(), v.data().iter().map(|&e| e * c).collect())?;
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, NumericsError> {
        let v = self.value(x);
        let out = Array::new(v.shape().to_vec(), v.data().iter().map(|&e| e + c).collect())?;
        self.push(out, Op::AddScalar(x), &[x])
    }

    /// Elementwise max with zero.
    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let v = self.value(x);
        let out = Array::new(v.shape().to_vec(), v.data().iter().map(|&e| e.max(0.0)).collect())?;
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NumericsError> {
        let v = self.value(x);
        let out = Array::new(v.shape().to_vec(), v.data().iter().map(|e| e.tanh()).collect())?;
        self.push(out, Op::Tanh(x), &[x])
    }

    /// `a: [.., m, k]` times `b: [k, n]` (shared) or `b: [.., k, n]` (batched, same leading axes).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ash, bsh) = (av.shape(), bv.shape());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(shape_err("matmul", ash, bsh));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != kb {
            return Err(shape_err("matmul", ash, bsh));
        }
        let lead = &ash[..ash.len() - 2];
        let batch: usize = lead.iter().product();
        let shared = bsh.len() == 2;
        if !shared && bsh[..bsh.len() - 2] != *lead {
            return Err(shape_err("matmul", ash, bsh));
        }
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        if shared {
            gemm(av.data(), bv.data(), &mut out, batch * m, k, n);
        } else {
            for i in 0..batch {
                gemm(
                    &av.data()[i * m * k..(i + 1) * m * k],
                    &bv.data()[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let out = Array::new(out_shape, out)?;
        self.push(out, Op::MatMul { a, b, shared }, &[a, b])
    }

    /// `x · w + bias` along the last axis; `w: [in, out]`, `bias: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var, NumericsError> {
        let y = self.matmul(x, w)?;
        self.add(y, bias)
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var, NumericsError> {
        let v = self.value(x);
        let nd = v.ndim();
        if nd < 2 {
            return Err(shape_err("transpose", v.shape(), &[]));
        }
        let (r, c) = (v.shape()[nd - 2], v.shape()[nd - 1]);
        let batch = v.len() / (r * c).max(1);
        let mut out = vec![0.0; v.len()];
        for bi in 0..batch {
            let src = &v.data()[bi * r * c..(bi + 1) * r * c];
            let dst = &mut out[bi * r * c..(bi + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.swap(nd - 2, nd - 1);
        let out = Array::new(shape, out)?;
        self.push(out, Op::TransposeLast2(x), &[x])
    }

    /// Concatenation along the last axis; all leading axes must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var, NumericsError> {
        let first = xs
            .first()
            .ok_or_else(|| NumericsError::InvalidArgument("concat of zero arrays".into()))?;
        let lead = self.value(*first).shape();
        let lead = lead[..lead.len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.value(x).shape();
            if s.is_empty() || s[..s.len() - 1] != *lead {
                return Err(shape_err("concat", self.value(*first).shape(), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Array::new(shape, out)?;
        self.push(out, Op::Concat(xs.to_vec()), xs)
    }

    /// `[B, d] -> [B, T, d]` with every time step a copy of the input row.
    pub fn broadcast_time(&mut self, x: Var, t: usize) -> Result<Var, NumericsError> {
        if t == 0 {
            return Err(NumericsError::InvalidArgument(
                "broadcast length must be positive".into(),
            ));
        }
        let v = self.value(x);
        if v.ndim() != 2 {
            return Err(shape_err("broadcast_time", v.shape(), &[t]));
        }
        let (b, d) = (v.shape()[0], v.shape()[1]);
        let mut out = Vec::with_capacity(b * t * d);
        for row in v.data().chunks(d.max(1)).take(b) {
            for _ in 0..t {
                out.extend_from_slice(row);
            }
        }
        let out = Array::new(vec![b, t, d], out)?;
        self.push(out, Op::BroadcastTime(x), &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let v = self.value(x);
        let d = v.last_dim();
        if d == 0 || v.ndim() == 0 {
            return Err(NumericsError::InvalidArgument(
                "softmax over an empty axis".into(),
            ));
        }
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                total += *e;
            }
            for e in row.iter_mut() {
                *e /= total;
            }
        }
        let out = Array::new(v.shape().to_vec(), out)?;
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, NumericsError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::InvalidArgument(format!(
                "dropout rate {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let v = self.value(x);
        let out = Array::new(
            v.shape().to_vec(),
            v.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        )?;
        self.push(out, Op::MulConst(x, mask), &[x])
    }

    /// Per last-axis slice: `gain * (x - mean) / sqrt(var + eps) + bias`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, NumericsError> {
        let v = self.value(x);
        let d = v.last_dim();
        if d == 0 || v.ndim() == 0 {
            return Err(NumericsError::InvalidArgument(
                "layer_norm over an empty axis".into(),
            ));
        }
        if eps <= 0.0 {
            return Err(NumericsError::InvalidArgument(
                "layer_norm eps must be positive".into(),
            ));
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(shape_err("layer_norm", v.shape(), gv.shape()));
        }
        let rows = v.len() / d;
        let mut xhat = vec![0.0; v.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let out = Array::new(v.shape().to_vec(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Causal dilated convolution. `x: [B, T, c_in]` (or `[T, c_in]`),
    /// `kernel: [k, c_in, c_out]`; tap `j` reads `x[t - j * dilation]`, zero when out of range.
    pub fn dilated_conv1d(
        &mut self,
        x: Var,
        kernel: Var,
        dilation: usize,
    ) -> Result<Var, NumericsError> {
        if dilation == 0 {
            return Err(NumericsError::InvalidArgument(
                "dilation must be positive".into(),
            ));
        }
        let (xv, kv) = (self.value(x), self.value(kernel));
        let (b, t, cin) = match xv.shape() {
            [t, c] => (1, *t, *c),
            [b, t, c] => (*b, *t, *c),
            s => return Err(shape_err("dilated_conv1d", s, kv.shape())),
        };
        let (k, kc, cout) = match kv.shape() {
            [k, c, o] => (*k, *c, *o),
            s => return Err(shape_err("dilated_conv1d", xv.shape(), s)),
        };
        if k == 0 || kc != cin {
            return Err(shape_err("dilated_conv1d", xv.shape(), kv.shape()));
        }
        let mut out = vec![0.0; b * t * cout];
        for bi in 0..b {
            for ti in 0..t {
                let dst = &mut out[(bi * t + ti) * cout..(bi * t + ti + 1) * cout];
                for j in 0..k {
                    let shift = j * dilation;
                    if shift > ti {
                        break;
                    }
                    let src = &xv.data()[(bi * t + ti - shift) * cin..(bi * t + ti - shift + 1) * cin];
                    let kj = &kv.data()[j * cin * cout..(j + 1) * cin * cout];
                    gemm(src, kj, dst, 1, cin, cout);
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank checked") = cout;
        let out = Array::new(shape, out)?;
        self.push(
            out,
            Op::Conv1d {
                x,
                kernel,
                dilation,
            },
            &[x, kernel],
        )
    }

    /// Row lookup: `table: [V, d]` → `[indices.len(), d]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let tv = self.value(table);
        if tv.ndim() != 2 {
            return Err(shape_err("gather", tv.shape(), &[indices.len()]));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= vocab {
                return Err(NumericsError::IndexOutOfRange { index: i, size: vocab });
            }
            out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let out = Array::new(vec![indices.len(), d], out)?;
        self.push(
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, NumericsError> {
        let v = self.value(x);
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..v.ndim()).collect::<Vec<_>>() {
            return Err(shape_err("permute", v.shape(), perm));
        }
        let (shape, data) = permute_data(v.data(), v.shape(), perm);
        let out = Array::new(shape, data)?;
        self.push(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    /// Picks entry `index` of the last axis, dropping that axis.
    pub fn select_last(&mut self, x: Var, index: usize) -> Result<Var, NumericsError> {
        let v = self.value(x);
        let d = v.last_dim();
        if v.ndim() == 0 || index >= d {
            return Err(NumericsError::IndexOutOfRange { index, size: d });
        }
        let data = v.data().chunks(d).map(|row| row[index]).collect();
        let shape = v.shape()[..v.ndim() - 1].to_vec();
        let out = Array::new(shape, data)?;
        self.push(out, Op::SelectLast { x, index }, &[x])
    }

    /// Elementwise pinball loss at quantile `level` of `pred` against a fixed `target`.
    /// At the kink the subgradient of the over-forecast branch, `1 - level`, is used.
    pub fn pinball(&mut self, pred: Var, target: &Array, level: f64) -> Result<Var, NumericsError> {
        let v = self.value(pred);
        if v.shape() != target.shape() {
            return Err(shape_err("pinball", v.shape(), target.shape()));
        }
        let data = v
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| level * (y - p).max(0.0) + (1.0 - level) * (p - y).max(0.0))
            .collect();
        let out = Array::new(v.shape().to_vec(), data)?;
        self.push(
            out,
            Op::Pinball {
                pred,
                target: target.data().to_vec(),
                level,
            },
            &[pred],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = Array::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// Reverse pass from a scalar `loss`. A graph supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if self.consumed {
            return Err(NumericsError::GraphConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Array::new(shape, g)?);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                let bl = self.value(*b).len();
                acc(*b, &|s| {
                    for chunk in g.chunks(bl) {
                        s.iter_mut().zip(chunk).for_each(|(s, g)| *s += sign * g);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let bl = bv.len();
                acc(*a, &|s| {
                    for (j, (s, g)) in s.iter_mut().zip(g).enumerate() {
                        *s += g * bv[j % bl];
                    }
                });
                acc(*b, &|s| {
                    for (j, (g, a)) in g.iter().zip(av).enumerate() {
                        s[j % bl] += g * a;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g)),
            Op::AddScalar(x) => acc(*x, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|s| {
                    for ((s, g), &e) in s.iter_mut().zip(g).zip(xv) {
                        if e > 0.0 {
                            *s += g;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, &|s| {
                    for ((s, g), &e) in s.iter_mut().zip(g).zip(y) {
                        *s += g * (1.0 - e * e);
                    }
                });
            }
            Op::MatMul { a, b, shared } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ash = av.shape();
                let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
                let n = bv.last_dim();
                let batch = av.len() / (m * k).max(1);
                if *shared {
                    acc(*a, &|s| gemm_nt(g, bv.data(), s, batch * m, n, k));
                    acc(*b, &|s| gemm_tn(av.data(), g, s, batch * m, k, n));
                } else {
                    acc(*a, &|s| {
                        for i in 0..batch {
                            gemm_nt(
                                &g[i * m * n..(i + 1) * m * n],
                                &bv.data()[i * k * n..(i + 1) * k * n],
                                &mut s[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    });
                    acc(*b, &|s| {
                        for i in 0..batch {
                            gemm_tn(
                                &av.data()[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                &mut s[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                }
            }
            Op::TransposeLast2(x) => {
                let sh = node.value.shape();
                let nd = sh.len();
                // output is [.., c, r]; input is [.., r, c]
                let (c, r) = (sh[nd - 2], sh[nd - 1]);
                acc(*x, &|s| {
                    let batch = s.len() / (r * c).max(1);
                    for bi in 0..batch {
                        let gb = &g[bi * r * c..(bi + 1) * r * c];
                        let sb = &mut s[bi * r * c..(bi + 1) * r * c];
                        for i in 0..r {
                            for j in 0..c {
                                sb[i * c + j] += gb[j * r + i];
                            }
                        }
                    }
                });
            }
            Op::Concat(xs) => {
                let total = node.value.last_dim();
                let rows = node.value.len() / total.max(1);
                let mut offset = 0;
                for &x in xs {
                    let w = self.value(x).last_dim();
                    acc(x, &|s| {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            s[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(s, g)| *s += g);
                        }
                    });
                    offset += w;
                }
            }
            Op::BroadcastTime(x) => {
                let sh = node.value.shape();
                let (t, d) = (sh[1], sh[2]);
                acc(*x, &|s| {
                    for (bi, row) in s.chunks_mut(d.max(1)).enumerate() {
                        for ti in 0..t {
                            let src = &g[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                            row.iter_mut().zip(src).for_each(|(s, g)| *s += g);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                acc(*x, &|s| {
                    for ((srow, grow), yrow) in s.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((s, gv), yv) in srow.iter_mut().zip(grow).zip(yrow) {
                            *s += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::MulConst(x, mask) => {
                acc(*x, &|s| {
                    for ((s, g), m) in s.iter_mut().zip(g).zip(mask) {
                        *s += g * m;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gv = self.value(*gain).data();
                acc(*x, &|s| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            s[r * d + j] += rs * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
                acc(*gain, &|s| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((s, gv), h) in s.iter_mut().zip(grow).zip(hrow) {
                            *s += gv * h;
                        }
                    }
                });
                acc(*bias, &|s| {
                    for grow in g.chunks(d) {
                        s.iter_mut().zip(grow).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::Conv1d {
                x,
                kernel,
                dilation,
            } => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let (b, t, cin) = match xv.shape() {
                    [t, c] => (1, *t, *c),
                    [b, t, c] => (*b, *t, *c),
                    _ => unreachable!("validated in forward"),
                };
                let (k, cout) = (kv.shape()[0], kv.shape()[2]);
                let dil = *dilation;
                acc(*x, &|s| {
                    for bi in 0..b {
                        for ti in 0..t {
                            let gr = &g[(bi * t + ti) * cout..(bi * t + ti + 1) * cout];
                            for j in 0..k {
                                let shift = j * dil;
                                if shift > ti {
                                    break;
                                }
                                let row = (bi * t + ti - shift) * cin;
                                let kj = &kv.data()[j * cin * cout..(j + 1) * cin * cout];
                                gemm_nt(gr, kj, &mut s[row..row + cin], 1, cout, cin);
                            }
                        }
                    }
                });
                acc(*kernel, &|s| {
                    for bi in 0..b {
                        for ti in 0..t {
                            let gr = &g[(bi * t + ti) * cout..(bi * t + ti + 1) * cout];
                            for j in 0..k {
                                let shift = j * dil;
                                if shift > ti {
                                    break;
                                }
                                let row = (bi * t + ti - shift) * cin;
                                gemm_tn(
                                    &xv.data()[row..row + cin],
                                    gr,
                                    &mut s[j * cin * cout..(j + 1) * cin * cout],
                                    1,
                                    cin,
                                    cout,
                                );
                            }
                        }
                    }
                });
            }
            Op::Gather { table, indices } => {
                let d = node.value.last_dim();
                acc(*table, &|s| {
                    for (r, &ix) in indices.iter().enumerate() {
                        s[ix * d..(ix + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (_, back) = permute_data(g, node.value.shape(), &inverse);
                acc(*x, &|s| s.iter_mut().zip(&back).for_each(|(s, g)| *s += g));
            }
            Op::SelectLast { x, index } => {
                let d = self.value(*x).last_dim();
                acc(*x, &|s| {
                    for (r, gv) in g.iter().enumerate() {
                        s[r * d + index] += gv;
                    }
                });
            }
            Op::Pinball {
                pred,
                target,
                level,
            } => {
                let pv = self.value(*pred).data();
                acc(*pred, &|s| {
                    for ((s, gv), (&p, &y)) in s.iter_mut().zip(g).zip(pv.iter().zip(target)) {
                        let d = if y > p { -level } else { 1.0 - level };
                        *s += gv * d;
                    }
                });
            }
            Op::Sum(x) => acc(*x, &|s| s.iter_mut().for_each(|s| *s += g[0])),
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Relu(..) => "relu",
        Op::Tanh(..) => "tanh",
        Op::MatMul { .. } => "matmul",
        Op::TransposeLast2(..) => "transpose",
        Op::Concat(..) => "concat",
        Op::BroadcastTime(..) => "broadcast_time",
        Op::Softmax(..) => "softmax",
        Op::MulConst(..) => "dropout",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Conv1d { .. } => "dilated_conv1d",
        Op::Gather { .. } => "gather",
        Op::Reshape(..) => "reshape",
        Op::Permute { .. } => "permute",
        Op::SelectLast { .. } => "select_last",
        Op::Pinball { .. } => "pinball",
        Op::Sum(..) => "sum",
    }
}
