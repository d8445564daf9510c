//! Named parameter storage and the layer building blocks that index into it.
//!
//! Network structure (which parameters exist and how they connect) is kept in
//! plain structs of [`ParamId`]s, separate from the values in [`ParamStore`].
//! A forward pass first binds the store onto a graph, then every layer looks
//! its weights up in the resulting [`Bound`] table.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower bound applied to positive scale parameters after each update.
pub const SCALE_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer-relevant role of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// strictly positive learnable scalar, floored at [`SCALE_FLOOR`]
    Scale,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            kinds: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.kinds.push(kind);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_elements(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    /// Replaces a value, keeping the recorded shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::dim("param set", self.values[id.0].shape(), value.shape()));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            kinds: self.kinds.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.values.iter().map(|v| g.variable(v.clone())).collect())
    }

    /// Registers every parameter as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.values.iter().map(|v| g.constant(v.clone())).collect())
    }

    /// Gradient per parameter, zero-filled where none flowed.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.values
            .iter()
            .zip(&bound.0)
            .map(|(v, &var)| {
                grads
                    .get(var)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(v.shape().to_vec()))
            })
            .collect()
    }
}

/// Graph handles for a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Table over explicit handles, in [`ParamId`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Initial values for a new weight tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-b, b)` with `b = sqrt(3 / fan_in)`
    KaimingUniform,
    Zeros,
    Constant(f64),
    /// identity over channels at the kernel centre (square channel maps only)
    Identity,
}

/// Allocates named parameters with seeded initialization.
pub struct ParamBuilder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Runs `f` with `name` appended to the parameter name prefix.
    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        let saved = self.prefix.len();
        if !self.prefix.is_empty() {
            self.prefix.push('.');
        }
        self.prefix.push_str(name);
        let out = f(self);
        self.prefix.truncate(saved);
        out
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Adds a tensor whose first `fan_axes` extents multiply to the fan-in.
    pub fn tensor(&mut self, name: &str, shape: &[usize], fan_in: usize, init: Init, kind: ParamKind) -> ParamId {
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::KaimingUniform => {
                let bound = (3.0 / fan_in.max(1) as f64).sqrt();
                (0..numel)
                    .map(|_| T::lit(self.rng.gen_range(-bound..=bound)))
                    .collect()
            }
            Init::Zeros => vec![T::zero(); numel],
            Init::Constant(c) => vec![T::lit(c); numel],
            Init::Identity => identity_kernel(shape),
        };
        let t = Tensor::new(shape.to_vec(), data).expect("shape matches numel");
        let full = self.full_name(name);
        self.store.add(full, t, kind)
    }
}

fn identity_kernel<T: Scalar>(shape: &[usize]) -> Vec<T> {
    let numel: usize = shape.iter().product();
    let mut data = vec![T::zero(); numel];
    match *shape {
        [k, _, a, b] => {
            assert_eq!(a, b, "identity init needs a square channel map");
            let centre = (k / 2) * k + k / 2;
            for c in 0..a {
                data[(centre * a + c) * b + c] = T::one();
            }
        }
        [k, _, c] => {
            let centre = (k / 2) * k + k / 2;
            for ch in 0..c {
                data[centre * c + ch] = T::one();
            }
        }
        _ => panic!("identity init on unsupported shape {shape:?}"),
    }
    data
}

/// Convolution with weight `[k, k, cin, cout]` and bias `[cout]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub k: usize,
    pub stride: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        Self::with_bias(b, name, cin, cout, k, stride, init, Init::Zeros)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_bias<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
        bias: Init,
    ) -> Self {
        b.scoped(name, |b| Self {
            weight: b.tensor("weight", &[k, k, cin, cout], k * k * cin, init, ParamKind::Weight),
            bias: b.tensor("bias", &[cout], 1, bias, ParamKind::Bias),
            k,
            stride,
            cin,
            cout,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride)
    }
}

/// Transposed convolution with weight `[k, k, cout, cin]`; upsamples by `stride`.
#[derive(Clone, Debug, PartialEq)]
pub struct Deconv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub k: usize,
    pub stride: usize,
    pub cin: usize,
    pub cout: usize,
}

/// Initial values for a transposed convolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DeconvInit {
    KaimingUniform,
    /// nearest-neighbour replication of each input channel (`cin == cout`)
    Replicate,
}

impl Deconv {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        init: DeconvInit,
    ) -> Self {
        let k = stride;
        b.scoped(name, |b| {
            let weight = match init {
                // each input pixel contributes to k·k outputs
                DeconvInit::KaimingUniform => b.tensor(
                    "weight",
                    &[k, k, cout, cin],
                    cin,
                    Init::KaimingUniform,
                    ParamKind::Weight,
                ),
                DeconvInit::Replicate => {
                    assert_eq!(cin, cout, "replicate init needs cin == cout");
                    let id = b.tensor("weight", &[k, k, cout, cin], 1, Init::Zeros, ParamKind::Weight);
                    let w = b.store.get_mut(id).data_mut();
                    for tap in 0..k * k {
                        for c in 0..cin {
                            w[(tap * cout + c) * cin + c] = T::one();
                        }
                    }
                    id
                }
            };
            Self {
                weight,
                bias: b.tensor("bias", &[cout], 1, Init::Zeros, ParamKind::Bias),
                k,
                stride,
                cin,
                cout,
            }
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.deconv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride)
    }
}

/// Depthwise `k × k` convolution, weight `[k, k, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub k: usize,
    pub channels: usize,
}

impl DepthwiseConv {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize, k: usize, init: Init) -> Self {
        b.scoped(name, |b| Self {
            weight: b.tensor("weight", &[k, k, channels], k * k, init, ParamKind::Weight),
            bias: b.tensor("bias", &[channels], 1, Init::Zeros, ParamKind::Bias),
            k,
            channels,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.depthwise_conv2d(x, p.var(self.weight), Some(p.var(self.bias)))
    }
}

/// Per-channel affine layer normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        b.scoped(name, |b| Self {
            gamma: b.tensor("gamma", &[channels], 1, Init::Constant(1.0), ParamKind::Weight),
            beta: b.tensor("beta", &[channels], 1, Init::Zeros, ParamKind::Bias),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}
