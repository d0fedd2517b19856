//! Differentiable operation kernels.
//!
//! Each [`Op`] knows how to evaluate itself (`eval`) and how to pull a
//! cotangent back through itself (`vjp`). The tape records ops and replays
//! `vjp` in reverse insertion order; immediate-mode execution calls `eval`
//! directly and keeps nothing.
//!
//! Conventions pinned here and relied on by the tests:
//! - `BilinearSample` uses zero padding: locations outside
//!   `[0,H-1] x [0,W-1]` read as zero.
//! - `BilinearResize` uses align-corners-false source coordinates
//!   `(i + 0.5) * scale - 0.5`, clamped to the image, so constants and
//!   corner pixels are preserved.
//! - `Gelu` is the tanh approximation with constants
//!   `sqrt(2/pi) = 0.7978845608028654` and `0.044715`.

use crate::error::{Result, SacError};
use crate::tensor::{numel, Scalar, Tensor};

/// Operation kinds recordable on a tape.
#[derive(Debug, Clone)]
pub enum Op<F: Scalar> {
    /// Elementwise sum of two equally shaped tensors.
    Add,
    Sub,
    Mul,
    /// Multiply by a compile-time constant.
    Scale(F),
    AddScalar(F),
    /// Reduce to a scalar by summation.
    SumAll,
    /// Metadata-only shape change.
    Reshape(Vec<usize>),
    /// Concatenate two `(B,C,H,W)` tensors along the channel axis.
    ConcatChannels,
    /// Per-sample scaling of a `(B,...)` tensor; the factors are constants
    /// (this is the droppath keep/drop mask, already divided by 1-p).
    ScaleSamples(Vec<F>),
    /// `(B,C,H,W) * gamma(C)`, the LayerScale product.
    MulChannel,
    Gelu,
    /// Softmax along one axis of an n-d tensor.
    Softmax { axis: usize },
    /// Layer normalization along one axis; inputs are `x, gamma, beta`.
    LayerNorm { axis: usize, eps: F },
    /// Cross-correlation with zero padding; inputs `x, weight[, bias]`.
    Conv2d { stride: usize, pad: usize },
    /// Bilinear resize of `(B,C,H,W)`.
    BilinearResize { out_h: usize, out_w: usize },
    /// Sample `(C,H,W)` at one fractional `(py,px)` point; inputs `x, point`.
    BilinearSample,
    /// Grouped deformable aggregation; inputs `x, offsets, modulation, proj`.
    DcnCore { groups: usize, points: usize },
    /// Pixel-averaged cross entropy; inputs `probs, onehot`.
    CrossEntropy { eps: F },
    /// Mean over classes of `(1 - phi_kappa(cos))^2`; inputs `probs, onehot`.
    TvmfDice { kappas: Vec<F>, eps: F },
}

impl<F: Scalar> Op<F> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::SumAll => "sum_all",
            Op::Reshape(_) => "reshape",
            Op::ConcatChannels => "concat_channels",
            Op::ScaleSamples(_) => "scale_samples",
            Op::MulChannel => "mul_channel",
            Op::Gelu => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Conv2d { .. } => "conv2d",
            Op::BilinearResize { .. } => "bilinear_resize",
            Op::BilinearSample => "bilinear_sample",
            Op::DcnCore { .. } => "dcnv3_core",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::TvmfDice { .. } => "tvmf_dice",
        }
    }

    fn arity_ok(&self, n: usize) -> bool {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::ConcatChannels | Op::MulChannel => n == 2,
            Op::Scale(_)
            | Op::AddScalar(_)
            | Op::SumAll
            | Op::Reshape(_)
            | Op::ScaleSamples(_)
            | Op::Gelu
            | Op::Softmax { .. }
            | Op::BilinearResize { .. } => n == 1,
            Op::LayerNorm { .. } => n == 3,
            Op::Conv2d { .. } => n == 2 || n == 3,
            Op::BilinearSample => n == 2,
            Op::DcnCore { .. } => n == 4,
            Op::CrossEntropy { .. } | Op::TvmfDice { .. } => n == 2,
        }
    }

    /// Forward evaluation. Pure; shared by tape recording and immediate mode.
    pub fn eval(&self, inputs: &[&Tensor<F>]) -> Result<Tensor<F>> {
        if !self.arity_ok(inputs.len()) {
            return Err(SacError::InvalidArgument {
                op: self.name(),
                reason: format!("wrong number of inputs: {}", inputs.len()),
            });
        }
        match self {
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.shape() != b.shape() {
                    return Err(SacError::ShapeMismatch {
                        op: self.name(),
                        lhs: a.shape().to_vec(),
                        rhs: b.shape().to_vec(),
                    });
                }
                let mut out = vec![F::zero(); a.numel()];
                match self {
                    Op::Add => {
                        for ((o, &x), &y) in out.iter_mut().zip(a.data()).zip(b.data()) {
                            *o = x + y;
                        }
                    }
                    Op::Sub => {
                        for ((o, &x), &y) in out.iter_mut().zip(a.data()).zip(b.data()) {
                            *o = x - y;
                        }
                    }
                    _ => {
                        for ((o, &x), &y) in out.iter_mut().zip(a.data()).zip(b.data()) {
                            *o = x * y;
                        }
                    }
                }
                Tensor::new(a.shape().to_vec(), out)
            }
            Op::Scale(c) => {
                let a = inputs[0];
                Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| x * *c).collect())
            }
            Op::AddScalar(c) => {
                let a = inputs[0];
                Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| x + *c).collect())
            }
            Op::SumAll => {
                let mut acc = F::zero();
                for &x in inputs[0].data() {
                    acc = acc + x;
                }
                Ok(Tensor::scalar(acc))
            }
            Op::Reshape(target) => {
                let a = inputs[0];
                if numel(target) != a.numel() {
                    return Err(SacError::ShapeMismatch {
                        op: self.name(),
                        lhs: a.shape().to_vec(),
                        rhs: target.clone(),
                    });
                }
                Tensor::new(target.clone(), a.data().to_vec())
            }
            Op::ConcatChannels => concat_channels_eval(self.name(), inputs[0], inputs[1]),
            Op::ScaleSamples(scales) => {
                let a = inputs[0];
                let b = *a.shape().first().unwrap_or(&0);
                if a.shape().is_empty() || scales.len() != b {
                    return Err(SacError::InvalidArgument {
                        op: self.name(),
                        reason: format!("{} factors for leading dim {}", scales.len(), b),
                    });
                }
                let per = a.numel() / b;
                let mut out = a.data().to_vec();
                for (i, chunk) in out.chunks_mut(per).enumerate() {
                    let s = scales[i];
                    for v in chunk {
                        *v = *v * s;
                    }
                }
                Tensor::new(a.shape().to_vec(), out)
            }
            Op::MulChannel => {
                let (x, g) = (inputs[0], inputs[1]);
                let [b, c, h, w] = dims4(self.name(), x)?;
                if g.shape() != [c] {
                    return Err(SacError::ShapeMismatch {
                        op: self.name(),
                        lhs: x.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
                let mut out = x.data().to_vec();
                let plane = h * w;
                for bi in 0..b {
                    for ci in 0..c {
                        let s = g.data()[ci];
                        let base = (bi * c + ci) * plane;
                        for v in &mut out[base..base + plane] {
                            *v = *v * s;
                        }
                    }
                }
                Tensor::new(x.shape().to_vec(), out)
            }
            Op::Gelu => {
                let a = inputs[0];
                Tensor::new(
                    a.shape().to_vec(),
                    a.data().iter().map(|&x| gelu_value(x)).collect(),
                )
            }
            Op::Softmax { axis } => softmax_eval(inputs[0], *axis),
            Op::LayerNorm { axis, eps } => layernorm_eval(inputs[0], inputs[1], inputs[2], *axis, *eps),
            Op::Conv2d { stride, pad } => {
                conv2d_eval(inputs[0], inputs[1], inputs.get(2).copied(), *stride, *pad)
            }
            Op::BilinearResize { out_h, out_w } => resize_eval(inputs[0], *out_h, *out_w),
            Op::BilinearSample => sample_eval(inputs[0], inputs[1]),
            Op::DcnCore { groups, points } => {
                dcn_eval(inputs[0], inputs[1], inputs[2], inputs[3], *groups, *points)
            }
            Op::CrossEntropy { eps } => cross_entropy_eval(inputs[0], inputs[1], *eps),
            Op::TvmfDice { kappas, eps } => tvmf_eval(inputs[0], inputs[1], kappas, *eps),
        }
    }

    /// Vector-Jacobian product: cotangents for each input. Entries for
    /// inputs whose `needs` flag is false are `None`.
    pub fn vjp(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        gout: &Tensor<F>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let g = gout.data();
        match self {
            Op::Add => Ok(vec![
                needs[0].then(|| gout.clone()),
                needs[1].then(|| gout.clone()),
            ]),
            Op::Sub => Ok(vec![
                needs[0].then(|| gout.clone()),
                needs[1].then(|| {
                    Tensor::new(gout.shape().to_vec(), g.iter().map(|&v| -v).collect()).unwrap()
                }),
            ]),
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let da = needs[0].then(|| {
                    Tensor::new(
                        a.shape().to_vec(),
                        g.iter().zip(b.data()).map(|(&gv, &bv)| gv * bv).collect(),
                    )
                    .unwrap()
                });
                let db = needs[1].then(|| {
                    Tensor::new(
                        b.shape().to_vec(),
                        g.iter().zip(a.data()).map(|(&gv, &av)| gv * av).collect(),
                    )
                    .unwrap()
                });
                Ok(vec![da, db])
            }
            Op::Scale(c) => Ok(vec![needs[0].then(|| {
                Tensor::new(gout.shape().to_vec(), g.iter().map(|&v| v * *c).collect()).unwrap()
            })]),
            Op::AddScalar(_) => Ok(vec![needs[0].then(|| gout.clone())]),
            Op::SumAll => {
                let a = inputs[0];
                let gv = g[0];
                Ok(vec![needs[0].then(|| Tensor::full(a.shape(), gv))])
            }
            Op::Reshape(_) => {
                let a = inputs[0];
                Ok(vec![needs[0]
                    .then(|| Tensor::new(a.shape().to_vec(), g.to_vec()).unwrap())])
            }
            Op::ConcatChannels => concat_channels_vjp(inputs[0], inputs[1], gout, needs),
            Op::ScaleSamples(scales) => {
                let a = inputs[0];
                Ok(vec![needs[0].then(|| {
                    let per = a.numel() / scales.len();
                    let mut out = g.to_vec();
                    for (i, chunk) in out.chunks_mut(per).enumerate() {
                        let s = scales[i];
                        for v in chunk {
                            *v = *v * s;
                        }
                    }
                    Tensor::new(a.shape().to_vec(), out).unwrap()
                })])
            }
            Op::MulChannel => mul_channel_vjp(inputs[0], inputs[1], gout, needs),
            Op::Gelu => {
                let a = inputs[0];
                Ok(vec![needs[0].then(|| {
                    Tensor::new(
                        a.shape().to_vec(),
                        a.data()
                            .iter()
                            .zip(g)
                            .map(|(&x, &gv)| gv * gelu_grad(x))
                            .collect(),
                    )
                    .unwrap()
                })])
            }
            Op::Softmax { axis } => softmax_vjp(output, gout, *axis, needs),
            Op::LayerNorm { axis, eps } => {
                layernorm_vjp(inputs[0], inputs[1], gout, *axis, *eps, needs)
            }
            Op::Conv2d { stride, pad } => {
                conv2d_vjp(inputs[0], inputs[1], inputs.get(2).copied(), gout, *stride, *pad, needs)
            }
            Op::BilinearResize { out_h, out_w } => {
                resize_vjp(inputs[0], gout, *out_h, *out_w, needs)
            }
            Op::BilinearSample => sample_vjp(inputs[0], inputs[1], gout, needs),
            Op::DcnCore { groups, points } => dcn_vjp(
                inputs[0], inputs[1], inputs[2], inputs[3], gout, *groups, *points, needs,
            ),
            Op::CrossEntropy { eps } => cross_entropy_vjp(inputs[0], inputs[1], gout, *eps, needs),
            Op::TvmfDice { kappas, eps } => tvmf_vjp(inputs[0], inputs[1], gout, kappas, *eps, needs),
        }
    }
}

fn dims4<F: Scalar>(op: &'static str, t: &Tensor<F>) -> Result<[usize; 4]> {
    match t.shape() {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        other => Err(SacError::BadShape {
            op,
            shape: other.to_vec(),
            reason: "expected a 4-d tensor".into(),
        }),
    }
}

// ---------------------------------------------------------------------------
// gelu

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

fn gelu_value<F: Scalar>(x: F) -> F {
    let c0 = F::from_real(GELU_SQRT_2_OVER_PI);
    let c1 = F::from_real(GELU_COEF);
    let half = F::from_real(0.5);
    let u = c0 * (x + c1 * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c0 = F::from_real(GELU_SQRT_2_OVER_PI);
    let c1 = F::from_real(GELU_COEF);
    let half = F::from_real(0.5);
    let three = F::from_real(3.0);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c0 * (F::one() + three * c1 * x * x)
}

// ---------------------------------------------------------------------------
// softmax / layernorm over one axis

/// Splits a shape at `axis` into (outer, len, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn softmax_eval<F: Scalar>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    if axis >= x.shape().len() {
        return Err(SacError::BadShape {
            op: "softmax",
            shape: x.shape().to_vec(),
            reason: format!("axis {axis} out of range"),
        });
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![F::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = F::neg_infinity();
            for l in 0..len {
                mx = mx.max(xd[base + l * inner]);
            }
            let mut sum = F::zero();
            for l in 0..len {
                let e = (xd[base + l * inner] - mx).exp();
                out[base + l * inner] = e;
                sum = sum + e;
            }
            for l in 0..len {
                out[base + l * inner] = out[base + l * inner] / sum;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn softmax_vjp<F: Scalar>(
    y: &Tensor<F>,
    gout: &Tensor<F>,
    axis: usize,
    needs: &[bool],
) -> Result<Vec<Option<Tensor<F>>>> {
    if !needs[0] {
        return Ok(vec![None]);
    }
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let yd = y.data();
    let g = gout.data();
    let mut dx = vec![F::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = F::zero();
            for l in 0..len {
                let k = base + l * inner;
                dot = dot + g[k] * yd[k];
            }
            for l in 0..len {
                let k = base + l * inner;
                dx[k] = yd[k] * (g[k] - dot);
            }
        }
    }
    Ok(vec![Some(Tensor::new(y.shape().to_vec(), dx)?)])
}

fn layernorm_eval<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    axis: usize,
    eps: F,
) -> Result<Tensor<F>> {
    if axis >= x.shape().len() {
        return Err(SacError::BadShape {
            op: "layernorm",
            shape: x.shape().to_vec(),
            reason: format!("axis {axis} out of range"),
        });
    }
    let len = x.shape()[axis];
    if gamma.shape() != [len] || beta.shape() != [len] {
        return Err(SacError::ShapeMismatch {
            op: "layernorm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let (outer, _, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let n = F::from_real(len as f64);
    let mut out = vec![F::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mean = F::zero();
            for l in 0..len {
                mean = mean + xd[base + l * inner];
            }
            mean = mean / n;
            let mut var = F::zero();
            for l in 0..len {
                let d = xd[base + l * inner] - mean;
                var = var + d * d;
            }
            var = var / n;
            let inv_std = F::one() / (var + eps).sqrt();
            for l in 0..len {
                let k = base + l * inner;
                out[k] = gd[l] * ((xd[k] - mean) * inv_std) + bd[l];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn layernorm_vjp<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    gout: &Tensor<F>,
    axis: usize,
    eps: F,
    needs: &[bool],
) -> Result<Vec<Option<Tensor<F>>>> {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let gd = gamma.data();
    let g = gout.data();
    let n = F::from_real(len as f64);
    let mut dx = needs[0].then(|| vec![F::zero(); xd.len()]);
    let mut dgamma = needs[1].then(|| vec![F::zero(); len]);
    let mut dbeta = needs[2].then(|| vec![F::zero(); len]);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mean = F::zero();
            for l in 0..len {
                mean = mean + xd[base + l * inner];
            }
            mean = mean / n;
            let mut var = F::zero();
            for l in 0..len {
                let d = xd[base + l * inner] - mean;
                var = var + d * d;
            }
            var = var / n;
            let inv_std = F::one() / (var + eps).sqrt();

            // dy = gout * gamma; reductions over the normalized axis.
            let mut sum_dy = F::zero();
            let mut sum_dy_y = F::zero();
            for l in 0..len {
                let k = base + l * inner;
                let yv = (xd[k] - mean) * inv_std;
                let dy = g[k] * gd[l];
                sum_dy = sum_dy + dy;
                sum_dy_y = sum_dy_y + dy * yv;
                if let Some(dg) = dgamma.as_mut() {
                    dg[l] = dg[l] + g[k] * yv;
                }
                if let Some(db) = dbeta.as_mut() {
                    db[l] = db[l] + g[k];
                }
            }
            if let Some(dx) = dx.as_mut() {
                for l in 0..len {
                    let k = base + l * inner;
                    let yv = (xd[k] - mean) * inv_std;
                    let dy = g[k] * gd[l];
                    dx[k] = (dy - sum_dy / n - yv * (sum_dy_y / n)) * inv_std;
                }
            }
        }
    }
    Ok(vec![
        dx.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()),
        dgamma.map(|d| Tensor::new(vec![len], d).unwrap()),
        dbeta.map(|d| Tensor::new(vec![len], d).unwrap()),
    ])
}

// ---------------------------------------------------------------------------
// conv2d

fn conv2d_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Valid output range `[lo, hi)` such that `o*stride + k - pad` lies in `[0, limit)`.
fn valid_out_range(limit: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad {
        0
    } else {
        (pad - k + stride - 1) / stride
    };
    // o*stride + k - pad <= limit-1  =>  o <= (limit-1+pad-k)/stride
    let hi = if limit + pad > k {
        ((limit - 1 + pad - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn conv2d_eval<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<F>> {
    let [b, ci, h, wd] = dims4("conv2d", x)?;
    let [co, wci, kh, kw] = dims4("conv2d", w)?;
    if ci != wci {
        return Err(SacError::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    if let Some(bt) = bias {
        if bt.shape() != [co] {
            return Err(SacError::ShapeMismatch {
                op: "conv2d",
                lhs: w.shape().to_vec(),
                rhs: bt.shape().to_vec(),
            });
        }
    }
    if stride == 0 {
        return Err(SacError::InvalidArgument {
            op: "conv2d",
            reason: "stride must be positive".into(),
        });
    }
    let (oh, ow) = match (
        conv2d_out_dim(h, kh, stride, pad),
        conv2d_out_dim(wd, kw, stride, pad),
    ) {
        (Some(a), Some(b)) if a >= 1 && b >= 1 => (a, b),
        _ => {
            return Err(SacError::BadShape {
                op: "conv2d",
                shape: x.shape().to_vec(),
                reason: format!("non-positive output size for kernel {kh}x{kw} stride {stride} pad {pad}"),
            })
        }
    };

    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![F::zero(); b * co * oh * ow];

    if let Some(bt) = bias {
        for bi in 0..b {
            for c in 0..co {
                let base = (bi * co + c) * oh * ow;
                let bv = bt.data()[c];
                for v in &mut out[base..base + oh * ow] {
                    *v = bv;
                }
            }
        }
    }

    // Fast path: 1x1 kernel, stride 1, no padding -> channel mixing matmul.
    if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        let plane = h * wd;
        for bi in 0..b {
            for c in 0..co {
                let obase = (bi * co + c) * plane;
                for cin in 0..ci {
                    let wv = wdat[c * ci + cin];
                    let xbase = (bi * ci + cin) * plane;
                    let (orow, xrow) = (&mut out[obase..obase + plane], &xd[xbase..xbase + plane]);
                    for (o, &xv) in orow.iter_mut().zip(xrow) {
                        *o = *o + wv * xv;
                    }
                }
            }
        }
        return Tensor::new(vec![b, co, oh, ow], out);
    }

    for bi in 0..b {
        for c in 0..co {
            let obase = (bi * co + c) * oh * ow;
            for cin in 0..ci {
                let xbase = (bi * ci + cin) * h * wd;
                for dkh in 0..kh {
                    let (oh_lo, oh_hi) = valid_out_range(h, oh, dkh, stride, pad);
                    for dkw in 0..kw {
                        let wv = wdat[((c * ci + cin) * kh + dkh) * kw + dkw];
                        let (ow_lo, ow_hi) = valid_out_range(wd, ow, dkw, stride, pad);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let len = ow_hi - ow_lo;
                        for ohi in oh_lo..oh_hi {
                            let ih = ohi * stride + dkh - pad;
                            let xrow = xbase + ih * wd;
                            let orow = obase + ohi * ow;
                            let orow_s = &mut out[orow + ow_lo..orow + ow_hi];
                            if stride == 1 {
                                let ix0 = xrow + ow_lo + dkw - pad;
                                let xrow_s = &xd[ix0..ix0 + len];
                                for (o, &xv) in orow_s.iter_mut().zip(xrow_s) {
                                    *o = *o + wv * xv;
                                }
                            } else {
                                let ix0 = xrow + ow_lo * stride + dkw - pad;
                                for (k, o) in orow_s.iter_mut().enumerate() {
                                    *o = *o + wv * xd[ix0 + k * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, co, oh, ow], out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_vjp<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    gout: &Tensor<F>,
    stride: usize,
    pad: usize,
    needs: &[bool],
) -> Result<Vec<Option<Tensor<F>>>> {
    let [b, ci, h, wd] = dims4("conv2d", x)?;
    let [co, _, kh, kw] = dims4("conv2d", w)?;
    let [_, _, oh, ow] = dims4("conv2d", gout)?;
    let xd = x.data();
    let wdat = w.data();
    let g = gout.data();

    let mut dx = needs[0].then(|| vec![F::zero(); xd.len()]);
    let mut dw = needs[1].then(|| vec![F::zero(); wdat.len()]);
    let dbias = if bias.is_some() && needs.get(2).copied().unwrap_or(false) {
        let mut db = vec![F::zero(); co];
        for bi in 0..b {
            for c in 0..co {
                let base = (bi * co + c) * oh * ow;
                let mut acc = F::zero();
                for &gv in &g[base..base + oh * ow] {
                    acc = acc + gv;
                }
                db[c] = db[c] + acc;
            }
        }
        Some(db)
    } else {
        None
    };

    if dx.is_some() || dw.is_some() {
        for bi in 0..b {
            for c in 0..co {
                let obase = (bi * co + c) * oh * ow;
                for cin in 0..ci {
                    let xbase = (bi * ci + cin) * h * wd;
                    for dkh in 0..kh {
                        let (oh_lo, oh_hi) = valid_out_range(h, oh, dkh, stride, pad);
                        for dkw in 0..kw {
                            let widx = ((c * ci + cin) * kh + dkh) * kw + dkw;
                            let wv = wdat[widx];
                            let (ow_lo, ow_hi) = valid_out_range(wd, ow, dkw, stride, pad);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            let len = ow_hi - ow_lo;
                            let mut wacc = F::zero();
                            for ohi in oh_lo..oh_hi {
                                let ih = ohi * stride + dkh - pad;
                                let xrow = xbase + ih * wd;
                                let orow = obase + ohi * ow;
                                let grow = &g[orow + ow_lo..orow + ow_hi];
                                if stride == 1 {
                                    let ix0 = xrow + ow_lo + dkw - pad;
                                    if dw.is_some() {
                                        let xrow_s = &xd[ix0..ix0 + len];
                                        for (&gv, &xv) in grow.iter().zip(xrow_s) {
                                            wacc = wacc + gv * xv;
                                        }
                                    }
                                    if let Some(dx) = dx.as_mut() {
                                        let dxrow = &mut dx[ix0..ix0 + len];
                                        for (d, &gv) in dxrow.iter_mut().zip(grow) {
                                            *d = *d + wv * gv;
                                        }
                                    }
                                } else {
                                    let ix0 = xrow + ow_lo * stride + dkw - pad;
                                    for (k, &gv) in grow.iter().enumerate() {
                                        let iw = ix0 + k * stride;
                                        wacc = wacc + gv * xd[iw];
                                        if let Some(dx) = dx.as_mut() {
                                            dx[iw] = dx[iw] + wv * gv;
                                        }
                                    }
                                }
                            }
                            if let Some(dw) = dw.as_mut() {
                                dw[widx] = dw[widx] + wacc;
                            }
                        }
                    }
                }
            }
        }
    }

    let mut grads = vec![
        dx.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()),
        dw.map(|d| Tensor::new(w.shape().to_vec(), d).unwrap()),
    ];
    if bias.is_some() {
        grads.push(dbias.map(|d| Tensor::new(vec![co], d).unwrap()));
    }
    Ok(grads)
}

// ---------------------------------------------------------------------------
// concat / mul_channel

fn concat_channels_eval<F: Scalar>(
    op: &'static str,
    a: &Tensor<F>,
    b: &Tensor<F>,
) -> Result<Tensor<F>> {
    let [ba, ca, ha, wa] = dims4(op, a)?;
    let [bb, cb, hb, wb] = dims4(op, b)?;
    if ba != bb || ha != hb || wa != wb {
        return Err(SacError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let plane = ha * wa;
    let mut out = vec![F::zero(); ba * (ca + cb) * plane];
    for bi in 0..ba {
        let dst = bi * (ca + cb) * plane;
        out[dst..dst + ca * plane].copy_from_slice(&a.data()[bi * ca * plane..(bi + 1) * ca * plane]);
        out[dst + ca * plane..dst + (ca + cb) * plane]
            .copy_from_slice(&b.data()[bi * cb * plane..(bi + 1) * cb * plane]);
    }
    Tensor::new(vec![ba, ca + cb, ha, wa], out)
}

fn concat_channels_vjp<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    gout: &Tensor<F>,
    needs: &[bool],
) -> Result<Vec<Option<Tensor<F>>>> {
    let [ba, ca, ha, wa] = dims4("concat_channels", a)?;
    let cb = b.shape()[1];
    let plane = ha * wa;
    let g = gout.data();
    let da = needs[0].then(|| {
        let mut d = vec![F::zero(); a.numel()];
        for bi in 0..ba {
            let src = bi * (ca + cb) * plane;
            d[bi * ca * plane..(bi + 1) * ca * plane].copy_from_slice(&g[src..src + ca * plane]);
        }
        Tensor::new(a.shape().to_vec(), d).unwrap()
    });
    let db = needs[1].then(|| {
        let mut d = vec![F::zero(); b.numel()];
        for bi in 0..ba {
            let src = bi * (ca + cb) * plane + ca * plane;
            d[bi * cb * plane..(bi + 1) * cb * plane].copy_from_slice(&g[src..src + cb * plane]);
        }
        Tensor::new(b.shape().to_vec(), d).unwrap()
    });
    Ok(vec![da, db])
}

fn mul_channel_vjp<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    gout: &Tensor<F>,
    needs: &[bool],
) -> Result<Vec<Option<Tensor<F>>>> {
    let [b, c, h, w] = dims4("mul_channel", x)?;
    let plane = h * w;
    let g = gout.data();
    let xd = x.data();
    let dx = needs[0].then(|| {
        let mut d = vec![F::zero(); xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let s = gamma.data()[ci];
                let base = (bi * c + ci) * plane;
                for k in base..base + plane {
                    d[k] = g[k] * s;
                }
            }
        }
        Tensor::new(x.shape().to_vec(), d).unwrap()
    });
    let dgamma = needs[1].then(|| {
        let mut d = vec![F::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let mut acc = F::zero();
                for k in base..base + plane {
                    acc = acc + g[k] * xd[k];
                }
                d[ci] = d[ci] + acc;
            }
        }
        Tensor::new(vec![c], d).unwrap()
    });
    Ok(vec![dx, dgamma])
}

// ---------------------------------------------------------------------------
// bilinear resize (clamped) and point sampling (zero padded)

struct ResizeAxis {
    i0: Vec<usize>,
    i1: Vec<usize>,
    frac: Vec<f64>,
}

fn resize_axis(n_in: usize, n_out: usize) -> ResizeAxis {
    let scale = n_in as f64 / n_out as f64;
    let mut i0 = Vec::with_capacity(n_out);
    let mut i1 = Vec::with_capacity(n_out);
    let mut frac = Vec::with_capacity(n_out);
    for o in 0..n_out {
        let mut s = (o as f64 + 0.5) * scale - 0.5;
        if s < 0.0 {
            s = 0.0;
        }
        let max = (n_in - 1) as f64;
        if s > max {
            s = max;
        }
        let f = s.floor();
        let a = f as usize;
        i0.push(a);
        i1.push((a + 1).min(n_in - 1));
        frac.push(s - f);
    }
    ResizeAxis { i0, i1, frac }
}

fn resize_eval<F: Scalar>(x: &Tensor<F>, out_h: usize, out_w: usize) -> Result<Tensor<F>> {
    let [b, c, h, w] = dims4("bilinear_resize", x)?;
    if out_h == 0 || out_w == 0 {
        return Err(SacError::InvalidArgument {
            op: "bilinear_resize",
            reason: "output size must be positive".into(),
        });
    }
    let ya = resize_axis(h, out_h);
    let xa = resize_axis(w, out_w);
    let xd = x.data();
    let mut out = vec![F::zero(); b * c * out_h * out_w];
    for bc in 0..b * c {
        let ibase = bc * h * w;
        let obase = bc * out_h * out_w;
        for oy in 0..out_h {
            let (y0, y1, fy) = (ya.i0[oy], ya.i1[oy], ya.frac[oy]);
            let wy1 = F::from_real(fy);
            let wy0 = F::from_real(1.0 - fy);
            let r0 = ibase + y0 * w;
            let r1 = ibase + y1 * w;
            let orow = obase + oy * out_w;
            for ox in 0..out_w {
                let (x0, x1, fx) = (xa.i0[ox], xa.i1[ox], xa.frac[ox]);
                let wx1 = F::from_real(fx);
                let wx0 = F::from_real(1.0 - fx);
                out[orow + ox] = wy0 * (wx0 * xd[r0 + x0] + wx1 * xd[r0 + x1])
                    + wy1 * (wx0 * xd[r1 + x0] + wx1 * xd[r1 + x1]);
            }
        }
    }
    Tensor::new(vec![b, c, out_h, out_w], out)
}

fn resize_vjp<F: Scalar>(
    x: &Tensor<F>,
    gout: &Tensor<F>,
    out_h: usize,
    out_w: usize,
    needs: &[bool],
) -> Result<Vec<Option<Tensor<F>>>> {
    if !needs[0] {
        return Ok(vec![None]);
    }
    let [b, c, h, w] = dims4("bilinear_resize", x)?;
    let ya = resize_axis(h, out_h);
    let xa = resize_axis(w, out_w);
    let g = gout.data();
    let mut dx = vec![F::zero(); x.numel()];
    for bc in 0..b * c {
        let ibase = bc * h * w;
        let obase = bc * out_h * out_w;
        for oy in 0..out_h {
            let (y0, y1, fy) = (ya.i0[oy], ya.i1[oy], ya.frac[oy]);
            let wy1 = F::from_real(fy);
            let wy0 = F::from_real(1.0 - fy);
            let r0 = ibase + y0 * w;
            let r1 = ibase + y1 * w;
            let orow = obase + oy * out_w;
            for ox in 0..out_w {
                let (x0, x1, fx) = (xa.i0[ox], xa.i1[ox], xa.frac[ox]);
                let wx1 = F::from_real(fx);
                let wx0 = F::from_real(1.0 - fx);
                let gv = g[orow + ox];
                dx[r0 + x0] = dx[r0 + x0] + gv * wy0 * wx0;
                dx[r0 + x1] = dx[r0 + x1] + gv * wy0 * wx1;
                dx[r1 + x0] = dx[r1 + x0] + gv * wy1 * wx0;
                dx[r1 + x1] = dx[r1 + x1] + gv * wy1 * wx1;
            }
        }
    }
    Ok(vec![Some(Tensor::new(x.shape().to_vec(), dx)?), None])
}

/// Four-corner layout of one fractional sample location.
#[derive(Clone, Copy)]
pub(crate) struct SamplePoint {
    pub y0: isize,
    pub x0: isize,
    pub fy: f64,
    pub fx: f64,
}

impl SamplePoint {
    #[inline]
    pub fn at(py: f64, px: f64) -> Self {
        let fy = py.floor();
        let fx = px.floor();
        SamplePoint {
            y0: fy as isize,
            x0: fx as isize,
            fy: py - fy,
            fx: px - fx,
        }
    }

    /// Reads one channel plane with zero padding.
    #[inline]
    pub fn read<F: Scalar>(&self, plane: &[F], h: usize, w: usize) -> F {
        let get = |y: isize, x: isize| -> F {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                F::zero()
            } else {
                plane[y as usize * w + x as usize]
            }
        };
        let (wy1, wx1) = (F::from_real(self.fy), F::from_real(self.fx));
        let (wy0, wx0) = (F::one() - wy1, F::one() - wx1);
        wy0 * (wx0 * get(self.y0, self.x0) + wx1 * get(self.y0, self.x0 + 1))
            + wy1 * (wx0 * get(self.y0 + 1, self.x0) + wx1 * get(self.y0 + 1, self.x0 + 1))
    }

    /// Value plus partial derivatives w.r.t. (py, px).
    #[inline]
    pub fn read_with_grad<F: Scalar>(&self, plane: &[F], h: usize, w: usize) -> (F, F, F) {
        let get = |y: isize, x: isize| -> F {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                F::zero()
            } else {
                plane[y as usize * w + x as usize]
            }
        };
        let v00 = get(self.y0, self.x0);
        let v01 = get(self.y0, self.x0 + 1);
        let v10 = get(self.y0 + 1, self.x0);
        let v11 = get(self.y0 + 1, self.x0 + 1);
        let (wy1, wx1) = (F::from_real(self.fy), F::from_real(self.fx));
        let (wy0, wx0) = (F::one() - wy1, F::one() - wx1);
        let value = wy0 * (wx0 * v00 + wx1 * v01) + wy1 * (wx0 * v10 + wx1 * v11);
        let dpy = wx0 * (v10 - v00) + wx1 * (v11 - v01);
        let dpx = wy0 * (v01 - v00) + wy1 * (v11 - v10);
        (value, dpy, dpx)
    }

    /// Scatters `g` into the four corner slots of a gradient plane.
    #[inline]
    pub fn scatter<F: Scalar>(&self, dplane: &mut [F], h: usize, w: usize, g: F) {
        let mut put = |y: isize, x: isize, wgt: F| {
            if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
                let k = y as usize * w + x as usize;
                dplane[k] = dplane[k] + g * wgt;
            }
        };
        let (wy1, wx1) = (F::from_real(self.fy), F::from_real(self.fx));
        let (wy0, wx0) = (F::one() - wy1, F::one() - wx1);
        put(self.y0, self.x0, wy0 * wx0);
        put(self.y0, self.x0 + 1, wy0 * wx1);
        put(self.y0 + 1, self.x0, wy1 * wx0);
        put(self.y0 + 1, self.x0 + 1, wy1 * wx1);
    }
}

fn sample_eval<F: Scalar>(x: &Tensor<F>, point: &Tensor<F>) -> Result<Tensor<F>> {
    let (c, h, w) = match x.shape() {
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(SacError::BadShape {
                op: "bilinear_sample",
                shape: other.to_vec(),
                reason: "expected (C,H,W)".into(),
            })
        }
    };
    if point.shape() != [2] {
        return Err(SacError::BadShape {
            op: "bilinear_sample",
            shape: point.shape().to_vec(),
            reason: "expected a (2,) point".into(),
        });
    }
    let sp = SamplePoint::at(point.data()[0].real(), point.data()[1].real());
    let mut out = vec![F::zero(); c];
    for (ci, o) in out.iter_mut().enumerate() {
        *o = sp.read(&x.data()[ci * h * w..(ci + 1) * h * w], h, w);
    }
    Tensor::new(vec![c], out)
}

fn sample_vjp<F: Scalar>(
    x: &Tensor<F>,
    point: &Tensor<F>,
    gout: &Tensor<F>,
    needs: &[bool],
) -> Result<Vec<Option<Tensor<F>>>> {
    let [c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let sp = SamplePoint::at(point.data()[0].real(), point.data()[1].real());
    let g = gout.data();
    let dx = needs[0].then(|| {
        let mut d = vec![F::zero(); x.numel()];
        for ci in 0..c {
            sp.scatter(&mut d[ci * h * w..(ci + 1) * h * w], h, w, g[ci]);
        }
        Tensor::new(x.shape().to_vec(), d).unwrap()
    });
    let dpoint = needs[1].then(|| {
        let mut dy = F::zero();
        let mut dxp = F::zero();
        for ci in 0..c {
            let (_, gy, gx) = sp.read_with_grad(&x.data()[ci * h * w..(ci + 1) * h * w], h, w);
            dy = dy + g[ci] * gy;
            dxp = dxp + g[ci] * gx;
        }
        Tensor::new(vec![2], vec![dy, dxp]).unwrap()
    });
    Ok(vec![dx, dpoint])
}

// ---------------------------------------------------------------------------
// deformable aggregation core (Eq. 1 without the generators)

/// The fixed 3x3 grid for K=9, row-major in (dy,dx); K=1 degenerates to the
/// center tap. Other K values are rejected by the parameter builder.
pub fn dcn_grid(points: usize) -> Result<Vec<(f64, f64)>> {
    let side = match points {
        1 => 1,
        9 => 3,
        25 => 5,
        _ => {
            return Err(SacError::InvalidArgument {
                op: "dcnv3",
                reason: format!("unsupported point count {points}; expected 1, 9 or 25"),
            })
        }
    };
    let r = (side as isize - 1) / 2;
    let mut grid = Vec::with_capacity(points);
    for dy in -r..=r {
        for dx in -r..=r {
            grid.push((dy as f64, dx as f64));
        }
    }
    Ok(grid)
}

struct DcnDims {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    cp: usize,
}

fn dcn_check<F: Scalar>(
    x: &Tensor<F>,
    offsets: &Tensor<F>,
    modulation: &Tensor<F>,
    proj: &Tensor<F>,
    groups: usize,
    points: usize,
) -> Result<DcnDims> {
    let [b, c, h, w] = dims4("dcnv3_core", x)?;
    if groups == 0 || c % groups != 0 {
        return Err(SacError::InvalidArgument {
            op: "dcnv3_core",
            reason: format!("channels {c} not divisible by groups {groups}"),
        });
    }
    let cp = c / groups;
    if offsets.shape() != [b, groups, points, 2, h, w] {
        return Err(SacError::ShapeMismatch {
            op: "dcnv3_core",
            lhs: offsets.shape().to_vec(),
            rhs: vec![b, groups, points, 2, h, w],
        });
    }
    if modulation.shape() != [b, groups, points, h, w] {
        return Err(SacError::ShapeMismatch {
            op: "dcnv3_core",
            lhs: modulation.shape().to_vec(),
            rhs: vec![b, groups, points, h, w],
        });
    }
    if proj.shape() != [groups, c, cp] {
        return Err(SacError::ShapeMismatch {
            op: "dcnv3_core",
            lhs: proj.shape().to_vec(),
            rhs: vec![groups, c, cp],
        });
    }
    Ok(DcnDims { b, c, h, w, cp })
}

/// Precomputed in-bounds corner slots of one fractional sample location:
/// flat plane indices (usize::MAX when outside) and bilinear weights.
struct Corners<F> {
    idx: [usize; 4],
    wgt: [F; 4],
}

impl<F: Scalar> Corners<F> {
    #[inline]
    fn of(sp: &SamplePoint, h: usize, w: usize) -> Self {
        let (wy1, wx1) = (F::from_real(sp.fy), F::from_real(sp.fx));
        let (wy0, wx0) = (F::one() - wy1, F::one() - wx1);
        let mut idx = [usize::MAX; 4];
        let wgt = [wy0 * wx0, wy0 * wx1, wy1 * wx0, wy1 * wx1];
        let coords = [
            (sp.y0, sp.x0),
            (sp.y0, sp.x0 + 1),
            (sp.y0 + 1, sp.x0),
            (sp.y0 + 1, sp.x0 + 1),
        ];
        for (slot, &(y, x)) in idx.iter_mut().zip(&coords) {
            if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
                *slot = y as usize * w + x as usize;
            }
        }
        Corners { idx, wgt }
    }

    #[inline]
    fn read(&self, plane: &[F]) -> F {
        let mut v = F::zero();
        for i in 0..4 {
            if self.idx[i] != usize::MAX {
                v = v + self.wgt[i] * plane[self.idx[i]];
            }
        }
        v
    }

    /// Corner values with zeros outside, for the offset derivative.
    #[inline]
    fn values(&self, plane: &[F]) -> [F; 4] {
        let mut v = [F::zero(); 4];
        for i in 0..4 {
            if self.idx[i] != usize::MAX {
                v[i] = plane[self.idx[i]];
            }
        }
        v
    }

    #[inline]
    fn scatter(&self, dplane: &mut [F], g: F) {
        for i in 0..4 {
            if self.idx[i] != usize::MAX {
                dplane[self.idx[i]] = dplane[self.idx[i]] + g * self.wgt[i];
            }
        }
    }
}

fn dcn_eval<F: Scalar>(
    x: &Tensor<F>,
    offsets: &Tensor<F>,
    modulation: &Tensor<F>,
    proj: &Tensor<F>,
    groups: usize,
    points: usize,
) -> Result<Tensor<F>> {
    let d = dcn_check(x, offsets, modulation, proj, groups, points)?;
    let grid = dcn_grid(points)?;
    let (b, c, h, w, cp) = (d.b, d.c, d.h, d.w, d.cp);
    let plane = h * w;
    let xd = x.data();
    let od = offsets.data();
    let md = modulation.data();
    let pd = proj.data();
    let mut out = vec![F::zero(); b * c * plane];
    let mut sampled = vec![F::zero(); cp];

    for bi in 0..b {
        for g in 0..groups {
            let xg_base = (bi * c + g * cp) * plane;
            let off_base = (bi * groups + g) * points;
            for hy in 0..h {
                for wx in 0..w {
                    let pix = hy * w + wx;
                    for v in sampled.iter_mut() {
                        *v = F::zero();
                    }
                    for (k, &(gy, gx)) in grid.iter().enumerate() {
                        let obase = ((off_base + k) * 2 * h + hy) * w + wx;
                        let dy = od[obase].real();
                        let dx = od[obase + plane].real();
                        let m = md[((off_base + k) * h + hy) * w + wx];
                        let sp = SamplePoint::at(hy as f64 + gy + dy, wx as f64 + gx + dx);
                        let cn = Corners::<F>::of(&sp, h, w);
                        for (cpi, s) in sampled.iter_mut().enumerate() {
                            let plane_x = &xd[xg_base + cpi * plane..xg_base + (cpi + 1) * plane];
                            *s = *s + m * cn.read(plane_x);
                        }
                    }
                    let pbase = g * c * cp;
                    for co in 0..c {
                        let mut acc = F::zero();
                        let wrow = &pd[pbase + co * cp..pbase + (co + 1) * cp];
                        for (cpi, &wv) in wrow.iter().enumerate() {
                            acc = acc + wv * sampled[cpi];
                        }
                        let oi = (bi * c + co) * plane + pix;
                        out[oi] = out[oi] + acc;
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, c, h, w], out)
}

#[allow(clippy::too_many_arguments)]
fn dcn_vjp<F: Scalar>(
    x: &Tensor<F>,
    offsets: &Tensor<F>,
    modulation: &Tensor<F>,
    proj: &Tensor<F>,
    gout: &Tensor<F>,
    groups: usize,
    points: usize,
    needs: &[bool],
) -> Result<Vec<Option<Tensor<F>>>> {
    let d = dcn_check(x, offsets, modulation, proj, groups, points)?;
    let grid = dcn_grid(points)?;
    let (b, c, h, w, cp) = (d.b, d.c, d.h, d.w, d.cp);
    let plane = h * w;
    let xd = x.data();
    let od = offsets.data();
    let md = modulation.data();
    let pd = proj.data();
    let g = gout.data();

    let mut dx = needs[0].then(|| vec![F::zero(); xd.len()]);
    let mut doff = needs[1].then(|| vec![F::zero(); od.len()]);
    let mut dmod = needs[2].then(|| vec![F::zero(); md.len()]);
    let mut dproj = needs[3].then(|| vec![F::zero(); pd.len()]);

    let mut sampled = vec![F::zero(); cp];
    let mut ds = vec![F::zero(); cp];

    for bi in 0..b {
        for gi in 0..groups {
            let xg_base = (bi * c + gi * cp) * plane;
            let pbase = gi * c * cp;
            for hy in 0..h {
                for wx in 0..w {
                    let pix = hy * w + wx;

                    // ds = W^T gout at this position; sampled recomputed if dproj needed.
                    for v in ds.iter_mut() {
                        *v = F::zero();
                    }
                    for co in 0..c {
                        let gv = g[(bi * c + co) * plane + pix];
                        let wrow = &pd[pbase + co * cp..pbase + (co + 1) * cp];
                        for (cpi, &wv) in wrow.iter().enumerate() {
                            ds[cpi] = ds[cpi] + wv * gv;
                        }
                    }

                    let need_sampled = dproj.is_some();
                    if need_sampled {
                        for v in sampled.iter_mut() {
                            *v = F::zero();
                        }
                    }

                    for (k, &(gy, gx)) in grid.iter().enumerate() {
                        let obase = ((((bi * groups + gi) * points + k) * 2) * h + hy) * w + wx;
                        let midx = (((bi * groups + gi) * points + k) * h + hy) * w + wx;
                        let dyv = od[obase].real();
                        let dxv = od[obase + plane].real();
                        let m = md[midx];
                        let sp = SamplePoint::at(hy as f64 + gy + dyv, wx as f64 + gx + dxv);
                        let cn = Corners::<F>::of(&sp, h, w);
                        let (wy1, wx1) = (F::from_real(sp.fy), F::from_real(sp.fx));
                        let (wy0, wx0) = (F::one() - wy1, F::one() - wx1);

                        let mut dm = F::zero();
                        let mut dpy = F::zero();
                        let mut dpx = F::zero();
                        for cpi in 0..cp {
                            let plane_x = &xd[xg_base + cpi * plane..xg_base + (cpi + 1) * plane];
                            let [v00, v01, v10, v11] = cn.values(plane_x);
                            let v = cn.read(plane_x);
                            if need_sampled {
                                sampled[cpi] = sampled[cpi] + m * v;
                            }
                            let dsv = ds[cpi];
                            dm = dm + dsv * v;
                            dpy = dpy + dsv * (wx0 * (v10 - v00) + wx1 * (v11 - v01));
                            dpx = dpx + dsv * (wy0 * (v01 - v00) + wy1 * (v11 - v10));
                            if let Some(dx) = dx.as_mut() {
                                cn.scatter(
                                    &mut dx[xg_base + cpi * plane..xg_base + (cpi + 1) * plane],
                                    dsv * m,
                                );
                            }
                        }
                        if let Some(dmod) = dmod.as_mut() {
                            dmod[midx] = dmod[midx] + dm;
                        }
                        if let Some(doff) = doff.as_mut() {
                            doff[obase] = doff[obase] + m * dpy;
                            doff[obase + plane] = doff[obase + plane] + m * dpx;
                        }
                    }

                    if let Some(dproj) = dproj.as_mut() {
                        for co in 0..c {
                            let gv = g[(bi * c + co) * plane + pix];
                            let drow = &mut dproj[pbase + co * cp..pbase + (co + 1) * cp];
                            for (cpi, dv) in drow.iter_mut().enumerate() {
                                *dv = *dv + gv * sampled[cpi];
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(vec![
        dx.map(|v| Tensor::new(x.shape().to_vec(), v).unwrap()),
        doff.map(|v| Tensor::new(offsets.shape().to_vec(), v).unwrap()),
        dmod.map(|v| Tensor::new(modulation.shape().to_vec(), v).unwrap()),
        dproj.map(|v| Tensor::new(proj.shape().to_vec(), v).unwrap()),
    ])
}

// ---------------------------------------------------------------------------
// losses

fn loss_check<F: Scalar>(op: &'static str, probs: &Tensor<F>, onehot: &Tensor<F>) -> Result<[usize; 4]> {
    let dims = dims4(op, probs)?;
    if probs.shape() != onehot.shape() {
        return Err(SacError::ShapeMismatch {
            op,
            lhs: probs.shape().to_vec(),
            rhs: onehot.shape().to_vec(),
        });
    }
    Ok(dims)
}

fn cross_entropy_eval<F: Scalar>(probs: &Tensor<F>, onehot: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
    let [b, _, h, w] = loss_check("cross_entropy", probs, onehot)?;
    let pixels = F::from_real((b * h * w) as f64);
    let mut acc = F::zero();
    for (&p, &y) in probs.data().iter().zip(onehot.data()) {
        if y != F::zero() {
            acc = acc + y * (p + eps).ln();
        }
    }
    Ok(Tensor::scalar(-acc / pixels))
}

fn cross_entropy_vjp<F: Scalar>(
    probs: &Tensor<F>,
    onehot: &Tensor<F>,
    gout: &Tensor<F>,
    eps: F,
    needs: &[bool],
) -> Result<Vec<Option<Tensor<F>>>> {
    let [b, _, h, w] = loss_check("cross_entropy", probs, onehot)?;
    let pixels = F::from_real((b * h * w) as f64);
    let gv = gout.data()[0];
    let dp = needs[0].then(|| {
        let d: Vec<F> = probs
            .data()
            .iter()
            .zip(onehot.data())
            .map(|(&p, &y)| {
                if y != F::zero() {
                    -gv * y / ((p + eps) * pixels)
                } else {
                    F::zero()
                }
            })
            .collect();
        Tensor::new(probs.shape().to_vec(), d).unwrap()
    });
    Ok(vec![dp, None])
}

/// The reshaped cosine similarity `(1 + cos) / (1 + kappa (1 - cos)) - 1`.
pub fn tvmf_phi_f64(cos_theta: f64, kappa: f64) -> f64 {
    (1.0 + cos_theta) / (1.0 + kappa * (1.0 - cos_theta)) - 1.0
}

struct ClassCosine<F: Scalar> {
    cos: F,
    norm_a: F,
    norm_b: F,
    dot: F,
    both_empty: bool,
}

fn class_cosine_stats<F: Scalar>(probs: &Tensor<F>, onehot: &Tensor<F>, class: usize, eps: F) -> ClassCosine<F> {
    let [b, n, h, w] = [probs.shape()[0], probs.shape()[1], probs.shape()[2], probs.shape()[3]];
    let plane = h * w;
    let pd = probs.data();
    let yd = onehot.data();
    let mut dot = F::zero();
    let mut na = F::zero();
    let mut nb = F::zero();
    for bi in 0..b {
        let base = (bi * n + class) * plane;
        for k in base..base + plane {
            let a = pd[k];
            let y = yd[k];
            dot = dot + a * y;
            na = na + a * a;
            nb = nb + y * y;
        }
    }
    let norm_a = na.sqrt();
    let norm_b = nb.sqrt();
    if norm_a == F::zero() && norm_b == F::zero() {
        return ClassCosine {
            cos: F::one(),
            norm_a,
            norm_b,
            dot,
            both_empty: true,
        };
    }
    ClassCosine {
        cos: dot / (norm_a * norm_b + eps),
        norm_a,
        norm_b,
        dot,
        both_empty: false,
    }
}

fn tvmf_eval<F: Scalar>(probs: &Tensor<F>, onehot: &Tensor<F>, kappas: &[F], eps: F) -> Result<Tensor<F>> {
    let [_, n, _, _] = loss_check("tvmf_dice", probs, onehot)?;
    if kappas.len() != n {
        return Err(SacError::InvalidArgument {
            op: "tvmf_dice",
            reason: format!("{} kappa values for {} classes", kappas.len(), n),
        });
    }
    let mut acc = F::zero();
    for (c, &kappa) in kappas.iter().enumerate() {
        let st = class_cosine_stats(probs, onehot, c, eps);
        let phi = F::from_real(tvmf_phi_f64(st.cos.real(), kappa.real()));
        let r = F::one() - phi;
        acc = acc + r * r;
    }
    Ok(Tensor::scalar(acc / F::from_real(n as f64)))
}

fn tvmf_vjp<F: Scalar>(
    probs: &Tensor<F>,
    onehot: &Tensor<F>,
    gout: &Tensor<F>,
    kappas: &[F],
    eps: F,
    needs: &[bool],
) -> Result<Vec<Option<Tensor<F>>>> {
    let [b, n, h, w] = loss_check("tvmf_dice", probs, onehot)?;
    if !needs[0] {
        return Ok(vec![None, None]);
    }
    let plane = h * w;
    let pd = probs.data();
    let yd = onehot.data();
    let gv = gout.data()[0];
    let mut d = vec![F::zero(); pd.len()];
    for (c, &kappa) in kappas.iter().enumerate() {
        let st = class_cosine_stats(probs, onehot, c, eps);
        if st.both_empty {
            continue; // cos pinned to 1, zero gradient
        }
        let cos = st.cos.real();
        let k = kappa.real();
        let denom = 1.0 + k * (1.0 - cos);
        let phi = tvmf_phi_f64(cos, k);
        // d/dcos of mean_c (1-phi)^2 term
        let dphi_dcos = (1.0 + 2.0 * k) / (denom * denom);
        let dl_dcos = F::from_real(-2.0 * (1.0 - phi) * dphi_dcos / n as f64);
        let big_d = st.norm_a * st.norm_b + eps;
        let scale = gv * dl_dcos;
        for bi in 0..b {
            let base = (bi * n + c) * plane;
            for kidx in base..base + plane {
                let a = pd[kidx];
                let y = yd[kidx];
                // dcos/da = y/D - cos * |B| * a / (|A| D); second term absent when |A| = 0
                let mut dcos = y / big_d;
                if st.norm_a > F::zero() {
                    dcos = dcos - st.cos * st.norm_b * a / (st.norm_a * big_d);
                }
                d[kidx] = d[kidx] + scale * dcos;
            }
        }
        let _ = st.dot;
    }
    Ok(vec![
        Some(Tensor::new(probs.shape().to_vec(), d)?),
        None,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, vals).unwrap()
    }

    #[test]
    fn add_and_shape_mismatch() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[10.0, 20.0, 30.0, 40.0]);
        let out = Op::Add.eval(&[&a, &b]).unwrap();
        assert_eq!(out.data(), &[11.0, 22.0, 33.0, 44.0]);

        let c = t(&[3, 2], &[0.0; 6]);
        let err = Op::Add.eval(&[&a, &c]).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
        assert!(err.contains("[2, 2]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_values() {
        let x = t(&[9], &[3.0; 9]);
        let y = Op::Softmax { axis: 0 }.eval(&[&x]).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 9.0).abs() < 1e-15);
        }

        let x = t(&[3], &[10.0, 0.0, 0.0]);
        let y = Op::Softmax { axis: 0 }.eval(&[&x]).unwrap();
        assert!((y.data()[0] - 0.999909208384341).abs() < 1e-9);
        assert!((y.data()[1] - 4.5395807735907655e-5).abs() < 1e-12);
        let sum: f64 = y.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layernorm_examples() {
        let gamma = t(&[2], &[1.0, 1.0]);
        let beta = t(&[2], &[0.0, 0.0]);
        // constant input -> zeros
        let x = t(&[1, 2, 1, 1], &[5.0, 5.0]);
        let y = Op::LayerNorm { axis: 1, eps: 1e-6 }.eval(&[&x, &gamma, &beta]).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
        // [1,3] -> [-1,1] as eps -> 0
        let x = t(&[1, 2, 1, 1], &[1.0, 3.0]);
        let y = Op::LayerNorm { axis: 1, eps: 1e-15 }.eval(&[&x, &gamma, &beta]).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-6);
        assert!((y.data()[1] - 1.0).abs() < 1e-6);
        // gamma = 0, beta = 5 -> all 5
        let g0 = t(&[2], &[0.0, 0.0]);
        let b5 = t(&[2], &[5.0, 5.0]);
        let y = Op::LayerNorm { axis: 1, eps: 1e-6 }.eval(&[&x, &g0, &b5]).unwrap();
        assert_eq!(y.data(), &[5.0, 5.0]);
    }

    #[test]
    fn conv2d_hand_cases() {
        // all-ones 3x3 input and kernel, pad 1: center sees the full 3x3 sum
        let x = t(&[1, 1, 3, 3], &[1.0; 9]);
        let w = t(&[1, 1, 3, 3], &[1.0; 9]);
        let y = Op::Conv2d { stride: 1, pad: 1 }.eval(&[&x, &w]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0); // corner sees 2x2

        // delta kernel reproduces the input
        let x = t(&[1, 1, 4, 4], &(0..16).map(|v| v as f64).collect::<Vec<_>>());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = t(&[1, 1, 3, 3], &k);
        let y = Op::Conv2d { stride: 1, pad: 1 }.eval(&[&x, &w]).unwrap();
        assert_eq!(y.data(), x.data());

        // shape formula: 8x8, k3, pad 1, stride 2 -> 4x4
        let x = Tensor::<f64>::zeros(&[1, 1, 8, 8]);
        let w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        let y = Op::Conv2d { stride: 2, pad: 1 }.eval(&[&x, &w]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
    }

    #[test]
    fn conv2d_rejects_bad_channels() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f64>::zeros(&[2, 4, 1, 1]);
        assert!(Op::Conv2d { stride: 1, pad: 0 }.eval(&[&x, &w]).is_err());
    }

    #[test]
    fn bilinear_sample_cases() {
        let x = t(&[1, 2, 2], &[0.0, 1.0, 2.0, 3.0]);
        // exact grid point
        let p = t(&[2], &[1.0, 0.0]);
        let y = Op::BilinearSample.eval(&[&x, &p]).unwrap();
        assert_eq!(y.data()[0], 2.0);
        // midpoint between 0 and 1
        let p = t(&[2], &[0.0, 0.5]);
        let y = Op::BilinearSample.eval(&[&x, &p]).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-15);
        // far out of bounds
        let p = t(&[2], &[-10.0, -10.0]);
        let y = Op::BilinearSample.eval(&[&x, &p]).unwrap();
        assert_eq!(y.data()[0], 0.0);
    }

    #[test]
    fn resize_conventions() {
        // identity
        let x = t(&[1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]);
        let y = Op::BilinearResize { out_h: 2, out_w: 2 }.eval(&[&x]).unwrap();
        assert_eq!(y.data(), x.data());
        // constant stays constant
        let c = Tensor::<f64>::full(&[1, 3, 5, 7], 2.5);
        let y = Op::BilinearResize { out_h: 11, out_w: 3 }.eval(&[&c]).unwrap();
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
        // corners preserved when upsampling 2x2 -> 4x4
        let y = Op::BilinearResize { out_h: 4, out_w: 4 }.eval(&[&x]).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[3], 1.0);
        assert_eq!(y.data()[12], 2.0);
        assert_eq!(y.data()[15], 3.0);
    }

    #[test]
    fn tvmf_hand_values() {
        assert_eq!(tvmf_phi_f64(1.0, 7.0), 1.0);
        assert!((tvmf_phi_f64(0.3, 0.0) - 0.3).abs() < 1e-15);
        assert!((tvmf_phi_f64(0.5, 1.0) - 0.0).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_uniform() {
        // uniform prediction over 4 classes -> ln 4
        let probs = Tensor::<f64>::full(&[1, 4, 2, 2], 0.25);
        let mut oh = vec![0.0; 16];
        for pix in 0..4 {
            oh[pix] = 1.0; // class 0 everywhere
        }
        let onehot = t(&[1, 4, 2, 2], &oh);
        let l = Op::CrossEntropy { eps: 1e-12 }.eval(&[&probs, &onehot]).unwrap();
        assert!((l.data()[0] - 4.0f64.ln()).abs() < 1e-9);
    }
}
