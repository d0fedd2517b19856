//! Grouped deformable convolution v3.
//!
//! The operator samples K learned fractional offsets around each output
//! location, weights them with softmax-normalized modulation scalars, and
//! mixes the grouped channel slices back with location-irrelevant projection
//! weights. Offset and modulation generators are 3x3 convolutions over the
//! block input, zero-initialized so training starts as a plain (non-deformed)
//! operator.

use crate::error::Result;
use crate::nn::{self, Binder, ParamId, ParamStore};
use crate::ops::Op;
use crate::tape::Ctx;
use crate::tensor::{Scalar, Tensor};
use rand_chacha::ChaCha8Rng;

pub use crate::ops::dcn_grid;

/// Generator weight ids; aliasing these between encoder and decoder blocks
/// is the weight-sharing mechanism.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorIds {
    pub offset_w: ParamId,
    pub offset_b: ParamId,
    pub modulation_w: ParamId,
    pub modulation_b: ParamId,
}

/// Parameters of one deformable block: grouped projection weights, the
/// offset/modulation generators, and the 1x1 projections bracketing the core.
#[derive(Debug, Clone)]
pub struct Dcnv3Params {
    pub channels: usize,
    pub groups: usize,
    pub points: usize,
    /// `(G, C, C/G)` location-irrelevant projection weights.
    pub proj: ParamId,
    pub gens: GeneratorIds,
    pub input_proj_w: ParamId,
    pub input_proj_b: ParamId,
    pub output_proj_w: ParamId,
    pub output_proj_b: ParamId,
}

impl Dcnv3Params {
    /// Registers all parameters under `prefix`. When `shared_gens` is given
    /// the generators alias existing parameters instead of creating new ones.
    pub fn build<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        channels: usize,
        groups: usize,
        points: usize,
        shared_gens: Option<GeneratorIds>,
    ) -> Result<Self> {
        dcn_grid(points)?;
        if groups == 0 || channels % groups != 0 {
            return Err(crate::error::SacError::Config(format!(
                "{prefix}: channels {channels} not divisible by groups {groups}"
            )));
        }
        let group_dim = channels / groups;
        let proj = store.add(
            format!("{prefix}.proj"),
            nn::trunc_normal(rng, &[groups, channels, group_dim], 0.02),
        );
        let gens = match shared_gens {
            Some(g) => g,
            None => GeneratorIds {
                offset_w: store.add(
                    format!("{prefix}.offset.w"),
                    Tensor::zeros(&[2 * groups * points, channels, 3, 3]),
                ),
                offset_b: store.add(
                    format!("{prefix}.offset.b"),
                    Tensor::zeros(&[2 * groups * points]),
                ),
                modulation_w: store.add(
                    format!("{prefix}.modulation.w"),
                    Tensor::zeros(&[groups * points, channels, 3, 3]),
                ),
                modulation_b: store.add(
                    format!("{prefix}.modulation.b"),
                    Tensor::zeros(&[groups * points]),
                ),
            },
        };
        let input_proj_w = store.add(
            format!("{prefix}.in_proj.w"),
            nn::trunc_normal(rng, &[channels, channels, 1, 1], 0.02),
        );
        let input_proj_b = store.add(format!("{prefix}.in_proj.b"), Tensor::zeros(&[channels]));
        let output_proj_w = store.add(
            format!("{prefix}.out_proj.w"),
            nn::trunc_normal(rng, &[channels, channels, 1, 1], 0.02),
        );
        let output_proj_b = store.add(format!("{prefix}.out_proj.b"), Tensor::zeros(&[channels]));
        Ok(Dcnv3Params {
            channels,
            groups,
            points,
            proj,
            gens,
            input_proj_w,
            input_proj_b,
            output_proj_w,
            output_proj_b,
        })
    }

    pub fn group_dim(&self) -> usize {
        self.channels / self.groups
    }
}

/// Offsets `(B,G,K,2,H,W)` in pixel units and softmax-normalized modulation
/// `(B,G,K,H,W)` that sums to one over K.
pub struct OffsetField<V> {
    pub offsets: V,
    pub modulation: V,
}

/// Runs the generators over `x` and normalizes the modulation logits along K.
pub fn compute_offsets_modulation<F: Scalar, C: Ctx<F>>(
    cx: &mut C,
    binder: &mut Binder<C::V>,
    store: &ParamStore<F>,
    x: C::V,
    p: &Dcnv3Params,
) -> Result<OffsetField<C::V>> {
    let shape = cx.shape_of(&x);
    let (b, h, w) = (shape[0], shape[2], shape[3]);
    let (g, k) = (p.groups, p.points);

    let ow = binder.bind(cx, store, p.gens.offset_w);
    let ob = binder.bind(cx, store, p.gens.offset_b);
    let raw_off = nn::conv2d(cx, x.clone(), ow, Some(ob), 1, 1)?;
    // Channel c = ((g*K + k)*2 + d): a pure reshape regroups it.
    let offsets = nn::reshape(cx, raw_off, &[b, g, k, 2, h, w])?;

    let mw = binder.bind(cx, store, p.gens.modulation_w);
    let mb = binder.bind(cx, store, p.gens.modulation_b);
    let raw_mod = nn::conv2d(cx, x, mw, Some(mb), 1, 1)?;
    let logits = nn::reshape(cx, raw_mod, &[b, g, k, h, w])?;
    let modulation = nn::softmax(cx, logits, 2)?;

    Ok(OffsetField {
        offsets,
        modulation,
    })
}

/// The deformable aggregation of the sampled, modulated group slices,
/// projected by the grouped weights. Spatial size is preserved.
pub fn dcnv3_apply<F: Scalar, C: Ctx<F>>(
    cx: &mut C,
    binder: &mut Binder<C::V>,
    store: &ParamStore<F>,
    x: C::V,
    field: &OffsetField<C::V>,
    p: &Dcnv3Params,
) -> Result<C::V> {
    let proj = binder.bind(cx, store, p.proj);
    cx.apply(
        Op::DcnCore {
            groups: p.groups,
            points: p.points,
        },
        &[x, field.offsets.clone(), field.modulation.clone(), proj],
    )
}

/// Full block: 1x1 input projection, generator-driven deformable core,
/// 1x1 output projection.
pub fn dcnv3_block<F: Scalar, C: Ctx<F>>(
    cx: &mut C,
    binder: &mut Binder<C::V>,
    store: &ParamStore<F>,
    x: C::V,
    p: &Dcnv3Params,
) -> Result<C::V> {
    let iw = binder.bind(cx, store, p.input_proj_w);
    let ib = binder.bind(cx, store, p.input_proj_b);
    let h = nn::conv2d(cx, x, iw, Some(ib), 1, 0)?;
    let field = compute_offsets_modulation(cx, binder, store, h.clone(), p)?;
    let core = dcnv3_apply(cx, binder, store, h, &field, p)?;
    let ow = binder.bind(cx, store, p.output_proj_w);
    let ob = binder.bind(cx, store, p.output_proj_b);
    nn::conv2d(cx, core, ow, Some(ob), 1, 0)
}

/// Sets the grouped projection to the channel-restoring identity: group g
/// maps its C' sampled channels back to their own slots. Used by tests and
/// the degenerate-oracle checks.
pub fn identity_projection<F: Scalar>(channels: usize, groups: usize) -> Tensor<F> {
    let cp = channels / groups;
    let mut t = Tensor::zeros(&[groups, channels, cp]);
    for g in 0..groups {
        for c in 0..cp {
            let out_c = g * cp + c;
            let idx = (g * channels + out_c) * cp + c;
            t.data_mut()[idx] = F::one();
        }
    }
    t
}
