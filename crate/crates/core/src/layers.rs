//! Parameter storage, initialisation and the basic parameterised layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;

/// Index of a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal(0, std) rejected outside ±2·std.
    TruncNormal(f64),
    Zeros,
    Ones,
}

/// Deterministic parameter initialisation.
pub fn init_params<T: Scalar>(shape: &[usize], scheme: Init, seed: u64) -> Tensor<T> {
    match scheme {
        Init::Zeros => Tensor::zeros(shape.to_vec()),
        Init::Ones => Tensor::ones(shape.to_vec()),
        Init::TruncNormal(std) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Tensor::from_fn(shape.to_vec(), |_| loop {
                let z: f64 = rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break T::from_f64_lossy(z * std);
                }
            })
        }
    }
}

/// Allocates named parameters with per-tensor seeds derived from a base seed.
#[derive(Debug)]
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    prefix: String,
    seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        ParamBuilder {
            store,
            prefix: String::new(),
            seed,
        }
    }

    /// Builder whose parameter names are prefixed with `name.`.
    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: &mut *self.store,
            prefix,
            seed: self.seed,
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let seed = splitmix64(self.seed ^ splitmix64(self.store.len() as u64));
        self.store.insert(full, init_params(shape, init, seed))
    }
}

/// Binds every stored parameter onto a tape for one forward pass.
#[derive(Debug)]
pub struct Ctx<T: Scalar> {
    pub tape: Tape<T>,
    params: Vec<Var>,
}

impl<T: Scalar> Ctx<T> {
    /// `trainable` makes every parameter a differentiable leaf.
    pub fn new(store: &ParamStore<T>, trainable: bool) -> Self {
        let mut tape = Tape::new();
        let params = store
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Ctx { tape, params }
    }

    /// Treats existing tape variables as the parameters, in store order.
    pub fn bind(tape: Tape<T>, params: Vec<Var>) -> Self {
        Ctx { tape, params }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    /// Gradients of every parameter after `tape.backward`, in store order.
    pub fn param_grads(&self) -> Vec<Option<Tensor<T>>> {
        self.params.iter().map(|&v| self.tape.grad(v)).collect()
    }
}

// ---- layers --------------------------------------------------------------

/// `x·W + b` on token matrices.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        let mut s = pb.scope(name);
        let weight = s.add("weight", &[cin, cout], Init::TruncNormal(0.02))?;
        let bias = if bias {
            Some(s.add("bias", &[cout], Init::Zeros)?)
        } else {
            None
        };
        Ok(Linear { weight, bias, cin, cout })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let shape = cx.tape.shape(x);
        if shape.len() != 2 || shape[1] != self.cin {
            return Err(Error::shape(
                "linear",
                format!("input {:?}, expected [N, {}]", shape, self.cin),
            ));
        }
        let y = cx.tape.matmul(x, cx.p(self.weight))?;
        match self.bias {
            Some(b) => cx.tape.add_row_bias(y, cx.p(b)),
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.cin * self.cout + if self.bias.is_some() { self.cout } else { 0 }
    }
}

/// Layer norm over the last axis with learned affine.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl Norm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("layer norm needs at least one channel".into()));
        }
        let mut s = pb.scope(name);
        let gamma = s.add("weight", &[channels], Init::Ones)?;
        let beta = s.add("bias", &[channels], Init::Zeros)?;
        Ok(Norm { gamma, beta, channels })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (g, b) = (cx.p(self.gamma), cx.p(self.beta));
        cx.tape.layernorm(x, g, b, T::from_f64_lossy(LN_EPS))
    }
}

/// 2-D convolution on `H×W×C` maps.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || !cin.is_multiple_of(groups) || !cout.is_multiple_of(groups) {
            return Err(Error::Config(format!("conv {name}: {cin}->{cout} not divisible into {groups} groups")));
        }
        let mut s = pb.scope(name);
        let weight = s.add("weight", &[kernel, kernel, cin / groups, cout], Init::TruncNormal(0.02))?;
        let bias = Some(s.add("bias", &[cout], Init::Zeros)?);
        Ok(Conv {
            weight,
            bias,
            kernel,
            cin,
            cout,
            stride,
            padding: kernel / 2,
            groups,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (w, b) = (cx.p(self.weight), self.bias.map(|b| cx.p(b)));
        cx.tape.conv2d(x, w, b, self.stride, self.padding, self.groups)
    }
}

/// Multi-head attention with Q/K/V/output projections; K has no bias.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub dim: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

/// Attention output plus the per-head post-softmax weights (`Nq×Nk` each).
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{name}: channels {dim} not divisible by {heads} heads")));
        }
        let mut s = pb.scope(name);
        Ok(MultiHeadAttention {
            heads,
            dim,
            q: Linear::new(&mut s, "q", dim, dim, true)?,
            // A key bias only shifts each logit row by a constant, which
            // softmax ignores, so it would never receive gradient.
            k: Linear::new(&mut s, "k", dim, dim, false)?,
            v: Linear::new(&mut s, "v", dim, dim, true)?,
            out: Linear::new(&mut s, "proj", dim, dim, true)?,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Queries from `q_src[Nq×C]`, keys and values from `kv_src[Nk×C]`.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, q_src: Var, kv_src: Var) -> Result<AttentionOutput> {
        let q = self.q.forward(cx, q_src)?;
        let k = self.k.forward(cx, kv_src)?;
        let v = self.v.forward(cx, kv_src)?;
        let d = self.head_dim();
        let scale = T::from_f64_lossy(1.0 / (d as f64).sqrt());
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let t = &mut cx.tape;
            let qh = t.slice_cols(q, h * d, d)?;
            let kh = t.slice_cols(k, h * d, d)?;
            let vh = t.slice_cols(v, h * d, d)?;
            let kt = t.transpose(kh)?;
            let logits = t.matmul(qh, kt)?;
            let logits = t.scale(logits, scale)?;
            let p = t.softmax(logits)?;
            heads.push(t.matmul(p, vh)?);
            weights.push(p);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            cx.tape.concat_cols(&heads)?
        };
        let output = self.out.forward(cx, merged)?;
        Ok(AttentionOutput { output, weights })
    }

    pub fn self_attention<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<AttentionOutput> {
        self.forward(cx, x, x)
    }
}

/// Head-averaged attention weights as a plain `Nq×Nk` tensor.
pub fn mean_attention<T: Scalar>(tape: &Tape<T>, weights: &[Var]) -> Tensor<T> {
    let first = tape.value(weights[0]);
    let mut acc = vec![T::zero(); first.len()];
    for &w in weights {
        for (a, &v) in acc.iter_mut().zip(tape.value(w).data()) {
            *a = *a + v;
        }
    }
    let inv = T::one() / T::from_usize(weights.len()).expect("heads");
    Tensor::new(first.shape().to_vec(), acc.into_iter().map(|v| v * inv).collect()).expect("same shape")
}
