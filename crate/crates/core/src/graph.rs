//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] owns every value produced during a forward pass, in recording
//! order. Inputs of an op always precede it, so a single reverse sweep in
//! [`Graph::backward`] propagates gradients. The graph is immutable during
//! the sweep and backward can be replayed any number of times.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Added to denominators of guarded divisions.
pub const DIV_EPS: f64 = 1e-4;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// How the smaller operand of a binary op is expanded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs has a single channel, repeated across the lhs channels
    RhsChannel(usize),
    LhsChannel(usize),
    RhsScalar,
    LhsScalar,
}

impl Bcast {
    fn resolve(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Self, Vec<usize>)> {
        if a == b {
            return Ok((Bcast::Same, a.to_vec()));
        }
        let na: usize = a.iter().product();
        let nb: usize = b.iter().product();
        if nb == 1 {
            return Ok((Bcast::RhsScalar, a.to_vec()));
        }
        if na == 1 {
            return Ok((Bcast::LhsScalar, b.to_vec()));
        }
        let prefix_eq = a.len() == b.len() && !a.is_empty() && a[..a.len() - 1] == b[..b.len() - 1];
        if prefix_eq && b[b.len() - 1] == 1 {
            return Ok((Bcast::RhsChannel(a[a.len() - 1]), a.to_vec()));
        }
        if prefix_eq && a[a.len() - 1] == 1 {
            return Ok((Bcast::LhsChannel(b[b.len() - 1]), b.to_vec()));
        }
        Err(Error::dim(op, a, b))
    }

    /// Source indices into (lhs, rhs) for output element `i`.
    #[inline]
    fn index(self, i: usize) -> (usize, usize) {
        match self {
            Bcast::Same => (i, i),
            Bcast::RhsChannel(c) => (i, i / c),
            Bcast::LhsChannel(c) => (i / c, i),
            Bcast::RhsScalar => (i, 0),
            Bcast::LhsScalar => (0, i),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Row and column strides of a `rows × cols` view of row-major storage that
/// holds the matrix itself, or its transpose when `trans`.
fn view(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

/// `(product of leading extents, last extent)`.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&c, lead)) => (lead.iter().product(), c),
        None => (1, 1),
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Binary(Binary, Var, Var, Bcast),
    AddConst(Var),
    Scale(Var, T),
    /// `op(a) · op(b)` where `op` optionally transposes a row-major `[rows, cols]` view
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Deconv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    /// input and cached `Φ(x)`
    Gelu(Var, Vec<T>),
    Softplus(Var),
    Concat(Vec<Var>),
    MeanChannels(Var),
    /// argmax channel per position
    MaxChannels(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    L1(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of recorded tensor operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    matmul_flops: u64,
}

/// Gradients of one scalar with respect to every node that requires them.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            matmul_flops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Floating-point operations (`2·M·K·N` per product) recorded by `matmul`.
    pub fn matmul_flops(&self) -> u64 {
        self.matmul_flops
    }

    pub fn reset_flops(&mut self) {
        self.matmul_flops = 0;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient is propagated into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf (parameter or checked input).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (bc, shape) = Bcast::resolve(name, self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| {
                let (ia, ib) = bc.index(i);
                let (x, y) = (av[ia], bv[ib]);
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Binary(kind, a, b, bc), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b, "sub")
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b, "div")
    }

    /// `a / (b + DIV_EPS)`.
    pub fn div_eps(&mut self, a: Var, b: Var) -> Result<Var> {
        let shifted = self.add_const(b, T::lit(DIV_EPS));
        self.div(a, shifted)
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(v, Op::AddConst(a), ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    /// `[M, K] × [K, N]`; records `2·M·K·N` flops.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => {
                let (m, k, n) = (*m, *k, *n);
                self.matmul_impl(a, b, false, false, (m, k, n), vec![m, n])
            }
            _ => Err(Error::dim("matmul", sa, sb)),
        }
    }

    /// `Aᵀ B` where `a: [.., M]` and `b: [.., N]` are viewed as `[T, M]` and
    /// `[T, N]` over their flattened leading axes; output `[M, N]`.
    pub fn gram(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (ta, m) = rows_cols(sa);
        let (tb, n) = rows_cols(sb);
        if sa.len() < 2 || sb.len() < 2 || ta != tb {
            return Err(Error::dim("gram", sa, sb));
        }
        self.matmul_impl(a, b, true, false, (m, ta, n), vec![m, n])
    }

    /// `X Wᵀ` applied along the last axis: `x: [.., K]`, `w: [N, K]`, output `[.., N]`.
    pub fn mix_channels(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let (t, k) = rows_cols(sx);
        let n = match sw {
            [n, k2] if *k2 == k && !sx.is_empty() => *n,
            _ => return Err(Error::dim("mix_channels", sx, sw)),
        };
        let mut shape = sx.to_vec();
        *shape.last_mut().expect("nonempty") = n;
        self.matmul_impl(x, w, false, true, (t, k, n), shape)
    }

    fn matmul_impl(
        &mut self,
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        (m, k, n): (usize, usize, usize),
        shape: Vec<usize>,
    ) -> Result<Var> {
        let (rsa, csa) = view(ta, m, k);
        let (rsb, csb) = view(tb, k, n);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            rsa,
            csa,
            self.value(b).data(),
            rsb,
            csb,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        self.matmul_flops += 2 * (m * k * n) as u64;
        let ng = self.ng(a) || self.ng(b);
        let op = Op::MatMul {
            a,
            b,
            ta,
            tb,
            m,
            k,
            n,
        };
        Ok(self.push(Tensor::new(shape, out)?, op, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = match self.shape(a) {
            [r, c] => (*r, *c),
            s => return Err(Error::dim("transpose", s, &[0, 0])),
        };
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape.to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = self.value(x).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(out[at(j)]));
                let mut total = T::zero();
                for j in 0..len {
                    let e = (out[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            ng,
        ))
    }

    fn image_dims(&self, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape(x) {
            [h, w, c] => Ok((*h, *w, *c)),
            s => Err(Error::dim(op, s, &[0, 0, 0])),
        }
    }

    fn check_bias(&self, b: Option<Var>, c: usize, op: &'static str) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [c] {
                return Err(Error::dim(op, self.shape(b), &[c]));
            }
        }
        Ok(())
    }

    /// 2-D convolution of `x: [H, W, Cin]` with `w: [k, k, Cin, Cout]`,
    /// zero "same" padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (h, wd, cin) = self.image_dims(x, "conv2d")?;
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be >= 1".into()));
        }
        let geom = match self.shape(w) {
            [k, k2, ci, _] if k == k2 && *ci == cin => ConvGeom::same(h, wd, *k, stride),
            s => return Err(Error::dim("conv2d", &[h, wd, cin], s)),
        };
        self.conv_with_geom(x, w, b, geom)
    }

    /// Convolution with explicit symmetric zero padding.
    pub fn conv2d_padded(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (h, wd, cin) = self.image_dims(x, "conv2d")?;
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be >= 1".into()));
        }
        let geom = match self.shape(w) {
            [k, k2, ci, _] if k == k2 && *ci == cin && h + 2 * pad >= *k && wd + 2 * pad >= *k => {
                ConvGeom::padded(h, wd, *k, stride, pad)
            }
            s => return Err(Error::dim("conv2d", &[h, wd, cin], s)),
        };
        self.conv_with_geom(x, w, b, geom)
    }

    fn conv_with_geom(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let cin = self.shape(x)[2];
        let cout = self.shape(w)[3];
        self.check_bias(b, cout, "conv2d")?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            cin,
            self.value(w).data(),
            cout,
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let t = Tensor::new(vec![geom.out_h, geom.out_w, cout], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, ng))
    }

    /// Transposed convolution of `x: [H, W, Cin]` with `w: [k, k, Cout, Cin]`;
    /// output is `[stride·H, stride·W, Cout]`.
    ///
    /// This is the adjoint of `conv2d(·, w, None, stride)` applied to a
    /// `[stride·H, stride·W, Cout]` tensor.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Parameter("deconv2d stride must be >= 1".into()));
        }
        let (h, wd, cin) = self.image_dims(x, "deconv2d")?;
        let (k, cout) = match self.shape(w) {
            [k, k2, co, ci] if k == k2 && *ci == cin => (*k, *co),
            s => return Err(Error::dim("deconv2d", &[h, wd, cin], s)),
        };
        self.check_bias(b, cout, "deconv2d")?;
        let geom = ConvGeom::same(stride * h, stride * wd, k, stride);
        debug_assert_eq!((geom.out_h, geom.out_w), (h, wd));
        let out = kernels::deconv2d_forward(
            self.value(x).data(),
            cin,
            self.value(w).data(),
            cout,
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let t = Tensor::new(vec![stride * h, stride * wd, cout], out)?;
        Ok(self.push(t, Op::Deconv2d { x, w, b, geom }, ng))
    }

    /// Per-channel convolution with `w: [k, k, C]`, stride 1, same padding.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (h, wd, c) = self.image_dims(x, "depthwise_conv2d")?;
        let geom = match self.shape(w) {
            [k, k2, cw] if k == k2 && *cw == c => ConvGeom::same(h, wd, *k, 1),
            s => return Err(Error::dim("depthwise_conv2d", &[h, wd, c], s)),
        };
        self.check_bias(b, c, "depthwise_conv2d")?;
        let out = kernels::depthwise_forward(
            self.value(x).data(),
            c,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let t = Tensor::new(vec![h, wd, c], out)?;
        Ok(self.push(t, Op::Depthwise { x, w, b, geom }, ng))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta` per channel.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = self.value(x).channels();
        if c == 0 || self.value(x).rank() == 0 {
            return Err(Error::dim("layer_norm", self.shape(x), &[1]));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::dim("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let inv_c = T::one() / T::lit(c as f64);
        let xs = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let positions = xs.len() / c;
        let mut xhat = Vec::with_capacity(xs.len());
        let mut rstd = Vec::with_capacity(positions);
        let mut out = Vec::with_capacity(xs.len());
        for px in xs.chunks_exact(c) {
            let mean = px.iter().copied().sum::<T>() * inv_c;
            let var = px.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in px.iter().enumerate() {
                let xh = (v - mean) * r;
                xhat.push(xh);
                out.push(xh * g[j] + bt[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// GELU with the exact Gaussian CDF.
    pub fn gelu(&mut self, x: Var) -> Var {
        let half = T::lit(0.5);
        let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        let xt = self.value(x);
        let cdf: Vec<T> = xt
            .data()
            .iter()
            .map(|&z| half * (T::one() + (z * inv_sqrt2).erf()))
            .collect();
        let out = xt.data().iter().zip(&cdf).map(|(&z, &c)| z * c).collect();
        let v = Tensor::new(xt.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(x);
        self.push(v, Op::Gelu(x, cdf), ng)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self
            .value(x)
            .map(|z| z.max(T::zero()) + (-z.abs()).exp().ln_1p());
        let ng = self.ng(x);
        self.push(v, Op::Softplus(x), ng)
    }

    /// Concatenates along the last axis; all leading extents must agree.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Parameter("concat of zero tensors".into()))?;
        let lead = self.shape(*first);
        let lead = lead[..lead.len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::dim("concat_channels", self.shape(*first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let positions: usize = lead.iter().product();
        let mut out = Vec::with_capacity(positions * total);
        for p in 0..positions {
            for (&v, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[p * c..(p + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), ng))
    }

    /// Mean over the last axis, keeping it with extent 1.
    pub fn mean_channels(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(Error::dim("mean_channels", t.shape(), &[1]));
        }
        let c = t.channels();
        let inv = T::one() / T::lit(c as f64);
        let data: Vec<T> = t
            .data()
            .chunks_exact(c)
            .map(|px| px.iter().copied().sum::<T>() * inv)
            .collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = 1;
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::MeanChannels(x), ng))
    }

    /// Max over the last axis, keeping it with extent 1.
    pub fn max_channels(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(Error::dim("max_channels", t.shape(), &[1]));
        }
        let c = t.channels();
        let mut arg = Vec::with_capacity(t.numel() / c.max(1));
        let mut data = Vec::with_capacity(arg.capacity());
        for px in t.data().chunks_exact(c) {
            let (j, &m) = px
                .iter()
                .enumerate()
                .fold((0, &px[0]), |best, (j, v)| if *v > *best.1 { (j, v) } else { best });
            arg.push(j);
            data.push(m);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = 1;
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::MaxChannels(x, arg), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / T::lit(t.numel() as f64);
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Mean absolute difference between equally shaped tensors.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("l1", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let s: T = av.iter().zip(bv).map(|(&x, &y)| (x - y).abs()).sum();
        let v = s / T::lit(av.len() as f64);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(v), Op::L1(a, b), ng))
    }

    /// Reverse sweep from a single-element `loss`; keeps gradients of leaves only.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut [T]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape().to_vec()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b, bc) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let out = node.value.data();
                if let Some(da) = self.acc(grads, *a) {
                    for (i, &gi) in gd.iter().enumerate() {
                        let (ia, ib) = bc.index(i);
                        da[ia] += match kind {
                            Binary::Add | Binary::Sub => gi,
                            Binary::Mul => gi * bv[ib],
                            Binary::Div => gi / bv[ib],
                        };
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for (i, &gi) in gd.iter().enumerate() {
                        let (ia, ib) = bc.index(i);
                        db[ib] += match kind {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * av[ia],
                            Binary::Div => -gi * out[i] / bv[ib],
                        };
                    }
                }
            }
            Op::AddConst(a) | Op::Reshape(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    for (d, &gi) in da.iter_mut().zip(gd) {
                        *d += gi;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = self.acc(grads, *a) {
                    for (d, &gi) in da.iter_mut().zip(gd) {
                        *d += gi * *c;
                    }
                }
            }
            &Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let (rsa, csa) = view(ta, m, k);
                let (rsb, csb) = view(tb, k, n);
                if let Some(da) = self.acc(grads, a) {
                    // d op(a) [m, k] += g · op(b)ᵀ, written through the same view
                    T::gemm(m, n, k, T::one(), gd, n as isize, 1, bv, csb, rsb, T::one(), da, rsa, csa);
                }
                if let Some(db) = self.acc(grads, b) {
                    // d op(b) [k, n] += op(a)ᵀ · g
                    T::gemm(k, m, n, T::one(), av, csa, rsa, gd, n as isize, 1, T::one(), db, rsb, csb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += gd[j * r + i];
                        }
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                if let Some(dx) = self.acc(grads, *x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: T = (0..*len).map(|j| gd[at(j)] * y[at(j)]).sum();
                            for j in 0..*len {
                                dx[at(j)] += y[at(j)] * (gd[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let cin = self.shape(*x)[2];
                let cout = self.shape(*w)[3];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = self.take_acc(grads, *x);
                let mut dw = self.take_acc(grads, *w);
                let mut db = b.and_then(|b| self.take_acc(grads, b));
                kernels::conv2d_backward(
                    xv,
                    cin,
                    wv,
                    cout,
                    gd,
                    geom,
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                self.store(grads, *x, dx);
                self.store(grads, *w, dw);
                if let Some(b) = b {
                    self.store(grads, *b, db);
                }
            }
            Op::Deconv2d { x, w, b, geom } => {
                let cin = self.shape(*x)[2];
                let cout = self.shape(*w)[2];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = self.take_acc(grads, *x);
                let mut dw = self.take_acc(grads, *w);
                let mut db = b.and_then(|b| self.take_acc(grads, b));
                kernels::deconv2d_backward(
                    xv,
                    cin,
                    wv,
                    cout,
                    gd,
                    geom,
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                self.store(grads, *x, dx);
                self.store(grads, *w, dw);
                if let Some(b) = b {
                    self.store(grads, *b, db);
                }
            }
            Op::Depthwise { x, w, b, geom } => {
                let c = self.shape(*x)[2];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = self.take_acc(grads, *x);
                let mut dw = self.take_acc(grads, *w);
                let mut db = b.and_then(|b| self.take_acc(grads, b));
                kernels::depthwise_backward(
                    xv,
                    c,
                    wv,
                    gd,
                    geom,
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                self.store(grads, *x, dx);
                self.store(grads, *w, dw);
                if let Some(b) = b {
                    self.store(grads, *b, db);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = node.value.channels();
                let gam = self.value(*gamma).data();
                if let Some(dg) = self.acc(grads, *gamma) {
                    for (gp, xp) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            dg[j] += gp[j] * xp[j];
                        }
                    }
                }
                if let Some(dbeta) = self.acc(grads, *beta) {
                    kernels_bias_grad(gd, c, dbeta);
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let inv_c = T::one() / T::lit(c as f64);
                    for (p, ((gp, xp), dxp)) in gd
                        .chunks_exact(c)
                        .zip(xhat.chunks_exact(c))
                        .zip(dx.chunks_exact_mut(c))
                        .enumerate()
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let dxh = gp[j] * gam[j];
                            m1 += dxh;
                            m2 += dxh * xp[j];
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for j in 0..c {
                            dxp[j] += rstd[p] * (gp[j] * gam[j] - m1 - xp[j] * m2);
                        }
                    }
                }
            }
            Op::Gelu(x, cdf) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.acc(grads, *x) {
                    let half = T::lit(0.5);
                    let inv_sqrt_2pi = T::lit(0.398_942_280_401_432_7);
                    for (((d, &gi), &z), &cdf) in dx.iter_mut().zip(gd).zip(xv).zip(cdf) {
                        let pdf = inv_sqrt_2pi * (half * z * z).exp_neg();
                        *d += gi * (cdf + z * pdf);
                    }
                }
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, &gi), &z) in dx.iter_mut().zip(gd).zip(xv) {
                        let sig = if z >= T::zero() {
                            T::one() / (T::one() + (-z).exp())
                        } else {
                            let e = z.exp();
                            e / (T::one() + e)
                        };
                        *d += gi * sig;
                    }
                }
            }
            Op::Concat(parts) => {
                let total = node.value.channels();
                let positions = node.value.numel() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).channels();
                    if let Some(dp) = self.acc(grads, p) {
                        for pos in 0..positions {
                            let src = &gd[pos * total + offset..pos * total + offset + c];
                            for (d, &s) in dp[pos * c..(pos + 1) * c].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::MeanChannels(x) => {
                let c = self.value(*x).channels();
                let inv = T::one() / T::lit(c as f64);
                if let Some(dx) = self.acc(grads, *x) {
                    for (dp, &gi) in dx.chunks_exact_mut(c).zip(gd) {
                        for d in dp {
                            *d += gi * inv;
                        }
                    }
                }
            }
            Op::MaxChannels(x, arg) => {
                let c = self.value(*x).channels();
                if let Some(dx) = self.acc(grads, *x) {
                    for (p, (&j, &gi)) in arg.iter().zip(gd).enumerate() {
                        dx[p * c + j] += gi;
                    }
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                let n = self.value(*x).numel();
                let scale = match node.op {
                    Op::Mean(_) => gd[0] / T::lit(n as f64),
                    _ => gd[0],
                };
                if let Some(dx) = self.acc(grads, *x) {
                    for d in dx {
                        *d += scale;
                    }
                }
            }
            Op::L1(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let scale = gd[0] / T::lit(av.len() as f64);
                let sign = |i: usize| {
                    let d = av[i] - bv[i];
                    if d > T::zero() {
                        scale
                    } else if d < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                };
                if let Some(da) = self.acc(grads, *a) {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += sign(i);
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for (i, d) in db.iter_mut().enumerate() {
                        *d -= sign(i);
                    }
                }
            }
        }
    }

    /// Moves a node's accumulator out so several can be borrowed at once.
    fn take_acc(&self, grads: &mut [Option<Tensor<T>>], v: Var) -> Option<Tensor<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        Some(
            grads[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape().to_vec())),
        )
    }

    fn store(&self, grads: &mut [Option<Tensor<T>>], v: Var, t: Option<Tensor<T>>) {
        let Some(mut t) = t else { return };
        // the same node may feed two operands of one op
        if let Some(prev) = grads[v.0].take() {
            for (a, &b) in t.data_mut().iter_mut().zip(prev.data()) {
                *a += b;
            }
        }
        grads[v.0] = Some(t);
    }
}

fn kernels_bias_grad<T: Scalar>(g: &[T], c: usize, db: &mut [T]) {
    for px in g.chunks_exact(c) {
        for (d, &v) in db.iter_mut().zip(px) {
            *d += v;
        }
    }
}
