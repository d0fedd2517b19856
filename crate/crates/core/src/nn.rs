//! Neural building blocks over an execution context: parameter storage,
//! initialization, and the primitive layers the blocks are assembled from.

use crate::error::{Result, SacError};
use crate::ops::Op;
use crate::tape::Ctx;
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::HashMap;

/// Forward-pass mode. Train enables droppath; eval is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Identity of a parameter inside a [`ParamStore`]. Modules that alias the
/// same id share the underlying tensor; that is how encoder/decoder weight
/// sharing is realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors. Insertion order is the
/// canonical parameter order used by the optimizer and checkpoints.
#[derive(Clone)]
pub struct ParamStore<F: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.requires_grad(true));
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// Total number of scalar values across all distinct parameters.
    pub fn value_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Per-forward cache mapping parameters to context values, so a parameter
/// referenced by several modules binds to exactly one tape leaf and its
/// gradient contributions accumulate there.
pub struct Binder<V> {
    slots: Vec<Option<V>>,
}

impl<V: Clone> Binder<V> {
    pub fn new<F: Scalar>(store: &ParamStore<F>) -> Self {
        Binder {
            slots: vec![None; store.len()],
        }
    }

    pub fn bind<F, C>(&mut self, cx: &mut C, store: &ParamStore<F>, id: ParamId) -> V
    where
        F: Scalar,
        C: Ctx<F, V = V>,
    {
        if let Some(v) = &self.slots[id.0] {
            return v.clone();
        }
        let v = cx.leaf(store.get(id).clone());
        self.slots[id.0] = Some(v.clone());
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<&V> {
        self.slots[id.0].as_ref()
    }

    /// Pre-binds a parameter to an existing context value; used to probe a
    /// single parameter as a differentiable leaf.
    pub fn put(&mut self, id: ParamId, v: V) {
        self.slots[id.0] = Some(v);
    }

    pub fn bound_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_some())
            .map(|(i, _)| ParamId(i))
    }
}

// ---------------------------------------------------------------------------
// initialization

/// Truncated normal: normal draws with |v| > 2*std rejected. All draws
/// happen in f64, so f32 and f64 runs consume the RNG identically.
pub fn trunc_normal<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<F> {
    let n = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let v: f64 = StandardNormal.sample(rng);
        let v = v * std;
        if v.abs() <= 2.0 * std {
            data.push(F::from_real(v));
        }
    }
    Tensor::new(shape.to_vec(), data).expect("shape/data size computed together")
}

// ---------------------------------------------------------------------------
// primitive layer wrappers over Ctx

pub fn add<F: Scalar, C: Ctx<F>>(cx: &mut C, a: C::V, b: C::V) -> Result<C::V> {
    cx.apply(Op::Add, &[a, b])
}

pub fn mul<F: Scalar, C: Ctx<F>>(cx: &mut C, a: C::V, b: C::V) -> Result<C::V> {
    cx.apply(Op::Mul, &[a, b])
}

pub fn scale<F: Scalar, C: Ctx<F>>(cx: &mut C, a: C::V, c: F) -> Result<C::V> {
    cx.apply(Op::Scale(c), &[a])
}

pub fn sum_all<F: Scalar, C: Ctx<F>>(cx: &mut C, a: C::V) -> Result<C::V> {
    cx.apply(Op::SumAll, &[a])
}

pub fn reshape<F: Scalar, C: Ctx<F>>(cx: &mut C, a: C::V, shape: &[usize]) -> Result<C::V> {
    cx.apply(Op::Reshape(shape.to_vec()), &[a])
}

pub fn gelu<F: Scalar, C: Ctx<F>>(cx: &mut C, a: C::V) -> Result<C::V> {
    cx.apply(Op::Gelu, &[a])
}

pub fn softmax<F: Scalar, C: Ctx<F>>(cx: &mut C, a: C::V, axis: usize) -> Result<C::V> {
    cx.apply(Op::Softmax { axis }, &[a])
}

pub fn concat_channels<F: Scalar, C: Ctx<F>>(cx: &mut C, a: C::V, b: C::V) -> Result<C::V> {
    cx.apply(Op::ConcatChannels, &[a, b])
}

pub fn mul_channel<F: Scalar, C: Ctx<F>>(cx: &mut C, x: C::V, gamma: C::V) -> Result<C::V> {
    cx.apply(Op::MulChannel, &[x, gamma])
}

pub fn conv2d<F: Scalar, C: Ctx<F>>(
    cx: &mut C,
    x: C::V,
    weight: C::V,
    bias: Option<C::V>,
    stride: usize,
    pad: usize,
) -> Result<C::V> {
    match bias {
        Some(b) => cx.apply(Op::Conv2d { stride, pad }, &[x, weight, b]),
        None => cx.apply(Op::Conv2d { stride, pad }, &[x, weight]),
    }
}

pub fn layernorm<F: Scalar, C: Ctx<F>>(
    cx: &mut C,
    x: C::V,
    gamma: C::V,
    beta: C::V,
    axis: usize,
    eps: F,
) -> Result<C::V> {
    cx.apply(Op::LayerNorm { axis, eps }, &[x, gamma, beta])
}

pub fn bilinear_resize<F: Scalar, C: Ctx<F>>(
    cx: &mut C,
    x: C::V,
    out_h: usize,
    out_w: usize,
) -> Result<C::V> {
    cx.apply(Op::BilinearResize { out_h, out_w }, &[x])
}

pub fn bilinear_sample<F: Scalar, C: Ctx<F>>(cx: &mut C, x: C::V, point: C::V) -> Result<C::V> {
    cx.apply(Op::BilinearSample, &[x, point])
}

// ---------------------------------------------------------------------------
// droppath (stochastic depth)

/// Whole-sample stochastic depth configuration.
#[derive(Debug, Clone, Copy)]
pub struct DropPathConfig {
    pub drop_prob: f64,
    pub mode: Mode,
}

impl DropPathConfig {
    pub fn new(drop_prob: f64, mode: Mode) -> Result<Self> {
        if !(0.0..1.0).contains(&drop_prob) {
            return Err(SacError::InvalidArgument {
                op: "droppath",
                reason: format!("drop_prob {drop_prob} outside [0,1)"),
            });
        }
        Ok(DropPathConfig { drop_prob, mode })
    }
}

/// Eval mode is the identity. Train mode keeps each sample with probability
/// `1-p` and rescales kept samples by `1/(1-p)` so the expectation is
/// preserved. The mask is drawn from the caller's RNG in batch order.
pub fn droppath<F: Scalar, C: Ctx<F>>(
    cx: &mut C,
    x: C::V,
    cfg: DropPathConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<C::V> {
    if cfg.mode == Mode::Eval || cfg.drop_prob == 0.0 {
        return Ok(x);
    }
    let rng = rng.ok_or(SacError::InvalidArgument {
        op: "droppath",
        reason: "train mode requires a caller-supplied RNG".into(),
    })?;
    let batch = cx.shape_of(&x)[0];
    let keep = 1.0 - cfg.drop_prob;
    let factors: Vec<F> = (0..batch)
        .map(|_| {
            let u: f64 = rng.gen();
            if u < keep {
                F::from_real(1.0 / keep)
            } else {
                F::zero()
            }
        })
        .collect();
    cx.apply(Op::ScaleSamples(factors), &[x])
}
