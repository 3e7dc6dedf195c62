//! The reconstruction network: packed CFA samples in, full RGB out.

use rand_chacha::ChaCha20Rng;

use super::blocks::{BlockGroup, Conv, Downsample, SpatialAttention, Upsample};
use super::NetworkConfig;
use crate::nn::{Builder, Ctx, EvalCtx, ParamSet, Tensor};

struct EncoderScale {
    group: BlockGroup,
    attention: Option<SpatialAttention>,
    down: Downsample,
}

struct DecoderScale {
    up: Upsample,
    skip_attention: Option<SpatialAttention>,
    fuse: Conv,
    group: BlockGroup,
}

pub struct Generator {
    config: NetworkConfig,
    stem: Conv,
    encoder: Vec<EncoderScale>,
    bottom: BlockGroup,
    decoder: Vec<DecoderScale>,
    head: Conv,
}

impl Generator {
    /// Register all parameters into `params` (names under no extra prefix;
    /// callers scope the builder if they nest several networks).
    pub fn build(config: &NetworkConfig, params: &mut ParamSet, rng: &mut ChaCha20Rng) -> Self {
        config.validate().expect("caller validates the config");
        let mut b = Builder::new(params, rng);
        Self::build_scoped(config, &mut b)
    }

    pub fn build_scoped(config: &NetworkConfig, b: &mut Builder) -> Self {
        let d = &config.depths;
        let scales = d.len() - 1;
        let group = |b: &mut Builder, name: &str, width: usize| {
            BlockGroup::build(
                b,
                name,
                width,
                config.blocks_per_group,
                config.expansion,
                config.reduction,
                config.attention,
            )
        };

        let stem = Conv::build(b, "stem", 3, d[0], 3, 1, 1, 1);
        let encoder = (0..scales)
            .map(|i| {
                let mut scope = b.scope(&format!("enc{i}"));
                EncoderScale {
                    group: group(&mut scope, "group", d[i]),
                    attention: config
                        .attention
                        .then(|| SpatialAttention::build(&mut scope, "focus")),
                    down: Downsample::build(&mut scope, "down", d[i], d[i + 1]),
                }
            })
            .collect();
        let bottom = group(b, "bottom", d[scales]);
        let decoder = (0..scales)
            .rev()
            .map(|i| {
                let mut scope = b.scope(&format!("dec{i}"));
                DecoderScale {
                    up: Upsample::build(&mut scope, "up", d[i + 1], d[i]),
                    skip_attention: config
                        .attention
                        .then(|| SpatialAttention::build(&mut scope, "focus")),
                    fuse: Conv::build(&mut scope, "fuse", 2 * d[i], d[i], 1, 1, 0, 1),
                    group: group(&mut scope, "group", d[i]),
                }
            })
            .collect();
        let head = Conv::build(b, "head", d[0], 3, 3, 1, 1, 1);

        Generator {
            config: config.clone(),
            stem,
            encoder,
            bottom,
            decoder,
            head,
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Full forward pass over any execution context. Input is the packed
    /// `[3, H, W]` mosaic with H, W multiples of [`NetworkConfig::alignment`].
    pub fn forward<C: Ctx>(&self, ctx: &mut C, packed: &C::V) -> C::V {
        let mut h = self.stem.apply(ctx, packed);
        let mut skips = Vec::with_capacity(self.encoder.len());
        for scale in &self.encoder {
            let refined = scale.group.apply(ctx, &h);
            let refined = match &scale.attention {
                Some(att) => att.apply(ctx, &refined),
                None => refined,
            };
            skips.push(refined.clone());
            h = scale.down.apply(ctx, &refined);
        }
        h = self.bottom.apply(ctx, &h);
        for stage in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder stage");
            let skip = match &stage.skip_attention {
                Some(att) => att.apply(ctx, &skip),
                None => skip,
            };
            let up = stage.up.apply(ctx, &h);
            let merged = ctx.concat_c(&up, &skip);
            let fused = stage.fuse.apply(ctx, &merged);
            h = stage.group.apply(ctx, &fused);
        }
        let rgb = self.head.apply(ctx, &h);
        ctx.sigmoid(&rgb)
    }

    /// Gradient-free forward on plain tensors.
    pub fn infer(&self, params: &ParamSet, packed: &Tensor) -> Tensor {
        let mut ctx = EvalCtx::new(params);
        self.forward(&mut ctx, packed)
    }

    /// Gradient-free forward that also reports the (min, max) range of every
    /// attention gate evaluated during the pass, in evaluation order. Useful
    /// for verifying that gating stays within the unit interval.
    pub fn infer_with_gate_ranges(
        &self,
        params: &ParamSet,
        packed: &Tensor,
    ) -> (Tensor, Vec<(f64, f64)>) {
        let mut ranges = Vec::new();
        let out = {
            let mut ctx = EvalCtx {
                params,
                gate_log: Some(&mut ranges),
            };
            self.forward(&mut ctx, packed)
        };
        (out, ranges)
    }
}
