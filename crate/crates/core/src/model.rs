//! Full segmentation network: stem, four ARFM encoder stages with
//! downsampling, a bottleneck, four decoder blocks with upsampling and skip
//! concatenation, and a softmax head resized to the input resolution.
//!
//! The offset/modulation generator weights of every decoder ARFM alias the
//! generators of the equal-width encoder stage (when `share_projection` is
//! on), so the decoder adds width, not generator depth.

use crate::arfm::{arfm_forward, ArfmParams, LN_EPS};
use crate::dcn::GeneratorIds;
use crate::error::{Result, SacError};
use crate::nn::{self, Binder, Mode, ParamId, ParamStore};
use crate::tape::Ctx;
use crate::tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SacNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub embed_dims: Vec<usize>,
    pub depths: Vec<usize>,
    pub groups: usize,
    pub ffn_ratio: usize,
    pub droppath_max: f64,
    pub share_projection: bool,
    pub input_h: usize,
    pub input_w: usize,
}

impl SacNetConfig {
    /// Full-scale configuration: embedding sizes 112/224/448/896 with stage
    /// depths [4,4,21,4] at 224x224.
    pub fn paper(num_classes: usize) -> Self {
        SacNetConfig {
            in_channels: 3,
            num_classes,
            embed_dims: vec![112, 224, 448, 896],
            depths: vec![4, 4, 21, 4],
            groups: 4,
            ffn_ratio: 4,
            droppath_max: 0.1,
            share_projection: true,
            input_h: 224,
            input_w: 224,
        }
    }

    /// Desk-scale preset keeping the same shape (extra depth in stage 3).
    pub fn toy(num_classes: usize) -> Self {
        SacNetConfig {
            in_channels: 3,
            num_classes,
            embed_dims: vec![16, 32, 64, 128],
            depths: vec![1, 1, 2, 1],
            groups: 2,
            ffn_ratio: 4,
            droppath_max: 0.05,
            share_projection: true,
            input_h: 32,
            input_w: 32,
        }
    }

    /// Smallest valid configuration; used for model-level gradient checks.
    pub fn micro(num_classes: usize) -> Self {
        SacNetConfig {
            in_channels: 3,
            num_classes,
            embed_dims: vec![4, 8, 16, 32],
            depths: vec![1, 1, 1, 1],
            groups: 2,
            ffn_ratio: 2,
            droppath_max: 0.0,
            share_projection: true,
            input_h: 32,
            input_w: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SacError::Config(m));
        if self.embed_dims.len() != 4 || self.depths.len() != 4 {
            return fail(format!(
                "expected 4 stages, got {} embed dims and {} depths",
                self.embed_dims.len(),
                self.depths.len()
            ));
        }
        if self.depths.iter().any(|&d| d == 0) {
            return fail("every stage needs at least one block".into());
        }
        for i in 0..3 {
            if self.embed_dims[i + 1] != 2 * self.embed_dims[i] {
                return fail(format!(
                    "embed dims must double per stage: {:?}",
                    self.embed_dims
                ));
            }
        }
        if self.groups == 0 || self.embed_dims.iter().any(|&d| d % self.groups != 0) {
            return fail(format!(
                "groups {} must divide every embed dim {:?}",
                self.groups, self.embed_dims
            ));
        }
        if self.input_h % 32 != 0 || self.input_w % 32 != 0 {
            return fail(format!(
                "input size {}x{} must be divisible by 32",
                self.input_h, self.input_w
            ));
        }
        if self.num_classes < 2 {
            return fail("need at least 2 classes".into());
        }
        if self.in_channels == 0 {
            return fail("need at least one input channel".into());
        }
        if self.ffn_ratio == 0 {
            return fail("ffn_ratio must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.droppath_max) {
            return fail(format!("droppath_max {} outside [0,1)", self.droppath_max));
        }
        Ok(())
    }

    /// Canonical flat text used for the checkpoint digest.
    pub fn canonical_string(&self) -> String {
        let join = |v: &[usize]| {
            v.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "in_channels = {}\nnum_classes = {}\nembed_dims = {}\ndepths = {}\ngroups = {}\nffn_ratio = {}\ndroppath_max = {}\nshare_projection = {}\ninput_size = {},{}\n",
            self.in_channels,
            self.num_classes,
            join(&self.embed_dims),
            join(&self.depths),
            self.groups,
            self.ffn_ratio,
            self.droppath_max,
            self.share_projection,
            self.input_h,
            self.input_w,
        )
    }

    /// Expected encoder feature shapes `(C_i, H/2^{i+1}, W/2^{i+1})`, i = 1..4.
    pub fn feature_shapes(&self) -> Vec<[usize; 3]> {
        (0..4)
            .map(|i| {
                [
                    self.embed_dims[i],
                    self.input_h >> (i + 2),
                    self.input_w >> (i + 2),
                ]
            })
            .collect()
    }
}

/// Which modules reference each parameter; aliased generator weights appear
/// with more than one path.
#[derive(Debug, Default, Clone)]
pub struct SharedParamRegistry {
    refs: BTreeMap<ParamId, Vec<String>>,
}

impl SharedParamRegistry {
    fn record(&mut self, id: ParamId, path: impl Into<String>) {
        self.refs.entry(id).or_default().push(path.into());
    }

    fn record_gens(&mut self, gens: &GeneratorIds, path: &str) {
        self.record(gens.offset_w, format!("{path}.offset.w"));
        self.record(gens.offset_b, format!("{path}.offset.b"));
        self.record(gens.modulation_w, format!("{path}.modulation.w"));
        self.record(gens.modulation_b, format!("{path}.modulation.b"));
    }

    /// Parameters referenced by more than one module.
    pub fn aliased(&self) -> impl Iterator<Item = (ParamId, &[String])> {
        self.refs
            .iter()
            .filter(|(_, paths)| paths.len() > 1)
            .map(|(id, paths)| (*id, paths.as_slice()))
    }

    pub fn reference_count(&self, id: ParamId) -> usize {
        self.refs.get(&id).map_or(1, |p| p.len().max(1))
    }
}

/// Parameter accounting: distinct values, values inside shared parameters,
/// and the hypothetical total if aliases were materialized as copies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub total: usize,
    pub shared: usize,
    pub unshared_equivalent: usize,
}

#[derive(Debug, Clone)]
struct NormIds {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Stem {
    conv1: ConvIds,
    norm1: NormIds,
    conv2: ConvIds,
    norm2: NormIds,
}

#[derive(Debug, Clone)]
struct Downsample {
    conv: ConvIds,
    norm: NormIds,
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    norm_in: NormIds,
    pub arfm: ArfmParams,
    norm_out: NormIds,
    /// 1x1 fusion back to the skip's stage width; the last block has no
    /// skip at its resolution and keeps its width.
    fuse: Option<ConvIds>,
}

/// The assembled network: parameter store plus the module wiring.
pub struct SacNetModel<F: Scalar> {
    pub config: SacNetConfig,
    pub store: ParamStore<F>,
    pub registry: SharedParamRegistry,
    stem: Stem,
    pub stages: Vec<Vec<ArfmParams>>,
    downsamples: Vec<Downsample>,
    pub bottleneck: DecoderBlock,
    pub decoder: Vec<DecoderBlock>,
    head: ConvIds,
}

impl<F: Scalar> SacNetModel<F> {
    pub fn new(config: SacNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut registry = SharedParamRegistry::default();
        let dims = config.embed_dims.clone();

        let norm = |store: &mut ParamStore<F>, name: String, c: usize| NormIds {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[c], F::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
        };
        let conv = |store: &mut ParamStore<F>,
                    rng: &mut ChaCha8Rng,
                    name: String,
                    co: usize,
                    ci: usize,
                    k: usize| ConvIds {
            w: store.add(format!("{name}.w"), nn::trunc_normal(rng, &[co, ci, k, k], 0.02)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[co])),
        };

        // Stem: two stride-2 3x3 convs, each followed by layernorm + GELU.
        let stem_mid = dims[0] / 2;
        let stem = Stem {
            conv1: conv(&mut store, &mut rng, "stem.conv1".into(), stem_mid, config.in_channels, 3),
            norm1: norm(&mut store, "stem.norm1".into(), stem_mid),
            conv2: conv(&mut store, &mut rng, "stem.conv2".into(), dims[0], stem_mid, 3),
            norm2: norm(&mut store, "stem.norm2".into(), dims[0]),
        };

        // Droppath ramps linearly over the whole block chain:
        // encoder blocks, then bottleneck, then decoder blocks.
        let total_blocks: usize = config.depths.iter().sum::<usize>() + 5;
        let mut block_index = 0usize;
        let mut next_rate = |max: f64| {
            let rate = if total_blocks > 1 {
                max * block_index as f64 / (total_blocks - 1) as f64
            } else {
                0.0
            };
            block_index += 1;
            rate
        };

        let mut stages = Vec::with_capacity(4);
        for (s, &dim) in dims.iter().enumerate() {
            let mut blocks = Vec::with_capacity(config.depths[s]);
            for b in 0..config.depths[s] {
                let prefix = format!("encoder.stage{s}.block{b}");
                let p = ArfmParams::build(
                    &mut store,
                    &mut rng,
                    &prefix,
                    dim,
                    config.groups,
                    config.ffn_ratio,
                    next_rate(config.droppath_max),
                    None,
                )?;
                registry.record_gens(&p.dcn.gens, &format!("{prefix}.dcn"));
                blocks.push(p);
            }
            stages.push(blocks);
        }

        let mut downsamples = Vec::with_capacity(3);
        for s in 0..3 {
            downsamples.push(Downsample {
                conv: conv(
                    &mut store,
                    &mut rng,
                    format!("encoder.down{s}.conv"),
                    dims[s + 1],
                    dims[s],
                    3,
                ),
                norm: norm(&mut store, format!("encoder.down{s}.norm"), dims[s + 1]),
            });
        }

        // Decoder ARFMs share the generators of the equal-width encoder
        // stage: the bottleneck uses that stage's first block, the decoder
        // blocks use the last one.
        let shared_for = |stages: &[Vec<ArfmParams>], stage: usize, first: bool| -> GeneratorIds {
            let blocks = &stages[stage];
            let idx = if first { 0 } else { blocks.len() - 1 };
            blocks[idx].dcn.gens
        };

        let build_decoder_block = |store: &mut ParamStore<F>,
                                       rng: &mut ChaCha8Rng,
                                       registry: &mut SharedParamRegistry,
                                       name: String,
                                       width: usize,
                                       fuse_to: Option<usize>,
                                       gens: Option<GeneratorIds>,
                                       rate: f64|
         -> Result<DecoderBlock> {
            let arfm = ArfmParams::build(
                store,
                rng,
                &format!("{name}.arfm"),
                width,
                config.groups,
                config.ffn_ratio,
                rate,
                gens,
            )?;
            registry.record_gens(&arfm.dcn.gens, &format!("{name}.arfm.dcn"));
            let fuse = match fuse_to {
                Some(skip_dim) => Some(conv(
                    store,
                    rng,
                    format!("{name}.fuse"),
                    skip_dim,
                    width + skip_dim,
                    1,
                )),
                None => None,
            };
            Ok(DecoderBlock {
                norm_in: norm(store, format!("{name}.norm_in"), width),
                arfm,
                norm_out: norm(store, format!("{name}.norm_out"), width),
                fuse,
            })
        };

        let share = config.share_projection;
        let rate = next_rate(config.droppath_max);
        let bottleneck = build_decoder_block(
            &mut store,
            &mut rng,
            &mut registry,
            "bottleneck".into(),
            dims[3],
            None,
            share.then(|| shared_for(&stages, 3, true)),
            rate,
        )?;

        // Widths walked by the decoder: D3 -> D2 -> D1 -> D0 -> D0.
        let plan: [(usize, Option<usize>, usize); 4] = [
            (dims[3], Some(dims[2]), 3),
            (dims[2], Some(dims[1]), 2),
            (dims[1], Some(dims[0]), 1),
            (dims[0], None, 0),
        ];
        let mut decoder = Vec::with_capacity(4);
        for (i, &(width, fuse_to, enc_stage)) in plan.iter().enumerate() {
            let rate = next_rate(config.droppath_max);
            decoder.push(build_decoder_block(
                &mut store,
                &mut rng,
                &mut registry,
                format!("decoder.block{i}"),
                width,
                fuse_to,
                share.then(|| shared_for(&stages, enc_stage, false)),
                rate,
            )?);
        }

        let head = conv(
            &mut store,
            &mut rng,
            "head".into(),
            config.num_classes,
            dims[0],
            1,
        );

        Ok(SacNetModel {
            config,
            store,
            registry,
            stem,
            stages,
            downsamples,
            bottleneck,
            decoder,
            head,
        })
    }

    fn norm_layer<C: Ctx<F>>(
        &self,
        cx: &mut C,
        binder: &mut Binder<C::V>,
        x: C::V,
        ids: &NormIds,
    ) -> Result<C::V> {
        let g = binder.bind(cx, &self.store, ids.gamma);
        let b = binder.bind(cx, &self.store, ids.beta);
        nn::layernorm(cx, x, g, b, 1, F::from_real(LN_EPS))
    }

    fn conv_layer<C: Ctx<F>>(
        &self,
        cx: &mut C,
        binder: &mut Binder<C::V>,
        x: C::V,
        ids: &ConvIds,
        stride: usize,
        pad: usize,
    ) -> Result<C::V> {
        let w = binder.bind(cx, &self.store, ids.w);
        let b = binder.bind(cx, &self.store, ids.b);
        nn::conv2d(cx, x, w, Some(b), stride, pad)
    }

    /// Stem and four stages; returns the per-stage skip features X1..X4.
    pub fn encoder_forward<C: Ctx<F>>(
        &self,
        cx: &mut C,
        binder: &mut Binder<C::V>,
        img: C::V,
        mode: Mode,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<C::V>> {
        let shape = cx.shape_of(&img);
        let expect = [self.config.in_channels, self.config.input_h, self.config.input_w];
        if shape.len() != 4 || shape[1..] != expect {
            return Err(SacError::BadShape {
                op: "encoder_forward",
                shape,
                reason: format!("expected (B,{},{},{})", expect[0], expect[1], expect[2]),
            });
        }

        let mut h = self.conv_layer(cx, binder, img, &self.stem.conv1, 2, 1)?;
        h = self.norm_layer(cx, binder, h, &self.stem.norm1)?;
        h = nn::gelu(cx, h)?;
        h = self.conv_layer(cx, binder, h, &self.stem.conv2, 2, 1)?;
        h = self.norm_layer(cx, binder, h, &self.stem.norm2)?;
        h = nn::gelu(cx, h)?;

        let mut skips = Vec::with_capacity(4);
        for (s, blocks) in self.stages.iter().enumerate() {
            for p in blocks {
                h = arfm_forward(cx, binder, &self.store, h, p, mode, rng.as_deref_mut())?;
            }
            skips.push(h.clone());
            if s < 3 {
                let d = &self.downsamples[s];
                h = self.conv_layer(cx, binder, h, &d.conv, 2, 1)?;
                h = self.norm_layer(cx, binder, h, &d.norm)?;
            }
        }
        Ok(skips)
    }

    fn decoder_stage<C: Ctx<F>>(
        &self,
        cx: &mut C,
        binder: &mut Binder<C::V>,
        x: C::V,
        block: &DecoderBlock,
        upsample: bool,
        skip: Option<&C::V>,
        mode: Mode,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<C::V> {
        let mut h = self.norm_layer(cx, binder, x, &block.norm_in)?;
        if upsample {
            let shape = cx.shape_of(&h);
            h = nn::bilinear_resize(cx, h, shape[2] * 2, shape[3] * 2)?;
        }
        h = arfm_forward(cx, binder, &self.store, h, &block.arfm, mode, rng.as_deref_mut())?;
        h = self.norm_layer(cx, binder, h, &block.norm_out)?;
        if let (Some(skip), Some(fuse)) = (skip, &block.fuse) {
            h = nn::concat_channels(cx, h, skip.clone())?;
            h = self.conv_layer(cx, binder, h, fuse, 1, 0)?;
        }
        Ok(h)
    }

    /// Bottleneck, four decoder blocks, and the softmax head at (H,W).
    pub fn decoder_forward<C: Ctx<F>>(
        &self,
        cx: &mut C,
        binder: &mut Binder<C::V>,
        features: &[C::V],
        mode: Mode,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<C::V> {
        if features.len() != 4 {
            return Err(SacError::InvalidArgument {
                op: "decoder_forward",
                reason: format!("expected 4 encoder features, got {}", features.len()),
            });
        }
        let mut h = self.decoder_stage(
            cx,
            binder,
            features[3].clone(),
            &self.bottleneck,
            false,
            None,
            mode,
            rng,
        )?;
        for (i, block) in self.decoder.iter().enumerate() {
            let skip = match i {
                0 => Some(&features[2]),
                1 => Some(&features[1]),
                2 => Some(&features[0]),
                _ => None,
            };
            h = self.decoder_stage(cx, binder, h, block, true, skip, mode, rng)?;
        }
        let logits = self.conv_layer(cx, binder, h, &self.head, 1, 0)?;
        let resized = nn::bilinear_resize(cx, logits, self.config.input_h, self.config.input_w)?;
        nn::softmax(cx, resized, 1)
    }

    pub fn model_forward<C: Ctx<F>>(
        &self,
        cx: &mut C,
        binder: &mut Binder<C::V>,
        img: C::V,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<C::V> {
        let features = self.encoder_forward(cx, binder, img, mode, &mut rng)?;
        self.decoder_forward(cx, binder, &features, mode, &mut rng)
    }

    /// Eval-mode forward without recording; returns class probabilities.
    pub fn predict(&self, img: &Tensor<F>) -> Result<Tensor<F>> {
        let mut imm = crate::tape::Imm::new();
        let mut binder = Binder::new(&self.store);
        let x = Ctx::<F>::leaf(&mut imm, img.clone());
        let probs = self.model_forward(&mut imm, &mut binder, x, Mode::Eval, None)?;
        Ok(probs.as_ref().clone())
    }

    /// Distinct / shared / hypothetical-unshared value counts.
    pub fn count_parameters(&self) -> ParamCounts {
        let total = self.store.value_count();
        let mut shared = 0usize;
        let mut extra = 0usize;
        for (id, paths) in self.registry.aliased() {
            let size = self.store.get(id).numel();
            shared += size;
            extra += size * (paths.len() - 1);
        }
        ParamCounts {
            total,
            shared,
            unshared_equivalent: total + extra,
        }
    }
}
