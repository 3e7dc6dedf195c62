//! Building blocks shared by the generator. Each block owns parameter ids
//! and describes its forward pass once, over the [`Ctx`] abstraction.

use crate::nn::{Builder, Ctx, ParamId};

pub(crate) const LEAKY_SLOPE: f64 = 0.2;
const PRELU_INIT: f64 = 0.25;

/// A convolution with its hyperparameters baked in.
pub(crate) struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Conv {
        let mut scope = b.scope(name);
        let w = scope.conv_weight("weight", [cout, cin / groups, k, k]);
        let bias = scope.zeros("bias", vec![cout]);
        Conv {
            w,
            b: Some(bias),
            stride,
            padding,
            groups,
        }
    }

    pub fn apply<C: Ctx>(&self, ctx: &mut C, x: &C::V) -> C::V {
        ctx.conv2d(x, self.w, self.b, self.stride, self.padding, self.groups)
    }
}

/// Squeeze-and-gate over channels: GAP -> C/r -> ReLU -> C -> sigmoid,
/// then rescale each channel map by its gate.
pub(crate) struct DepthAttention {
    reduce_w: ParamId,
    reduce_b: ParamId,
    expand_w: ParamId,
    expand_b: ParamId,
}

impl DepthAttention {
    pub fn build(b: &mut Builder, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = channels / reduction;
        let mut scope = b.scope(name);
        DepthAttention {
            reduce_w: scope.linear_weight("reduce.weight", [hidden, channels]),
            reduce_b: scope.zeros("reduce.bias", vec![hidden]),
            expand_w: scope.linear_weight("expand.weight", [channels, hidden]),
            expand_b: scope.zeros("expand.bias", vec![channels]),
        }
    }

    pub fn apply<C: Ctx>(&self, ctx: &mut C, x: &C::V) -> C::V {
        let pooled = ctx.global_avg_pool(x);
        let squeezed = ctx.linear(&pooled, self.reduce_w, self.reduce_b);
        let squeezed = ctx.relu(&squeezed);
        let gates = ctx.linear(&squeezed, self.expand_w, self.expand_b);
        let gates = ctx.sigmoid(&gates);
        ctx.record_gate(&gates);
        ctx.scale_channels(x, &gates)
    }
}

/// Where-to-look gate: per-pixel channel mean and max, fused by a 3x3 conv
/// into a sigmoid mask that rescales every channel.
pub(crate) struct SpatialAttention {
    conv: Conv,
}

impl SpatialAttention {
    pub fn build(b: &mut Builder, name: &str) -> Self {
        SpatialAttention {
            conv: Conv::build(b, name, 2, 1, 3, 1, 1, 1),
        }
    }

    pub fn apply<C: Ctx>(&self, ctx: &mut C, x: &C::V) -> C::V {
        let mean = ctx.channel_mean(x);
        let max = ctx.channel_max(x);
        let stacked = ctx.concat_c(&mean, &max);
        let gate = self.conv.apply(ctx, &stacked);
        let gate = ctx.sigmoid(&gate);
        ctx.record_gate(&gate);
        ctx.scale_spatial(x, &gate)
    }
}

/// Inverted-bottleneck attention block: expand 1x1 -> depthwise 3x3 (both
/// leaky) -> project 1x1 (linear), then the channel gate.
pub(crate) struct AttentionBlock {
    expand: Conv,
    depthwise: Conv,
    project: Conv,
    attention: Option<DepthAttention>,
}

impl AttentionBlock {
    pub fn build(
        b: &mut Builder,
        name: &str,
        channels: usize,
        expansion: usize,
        reduction: usize,
        attention: bool,
    ) -> Self {
        let wide = channels * expansion;
        let mut scope = b.scope(name);
        AttentionBlock {
            expand: Conv::build(&mut scope, "expand", channels, wide, 1, 1, 0, 1),
            depthwise: Conv::build(&mut scope, "depthwise", wide, wide, 3, 1, 1, wide),
            project: Conv::build(&mut scope, "project", wide, channels, 1, 1, 0, 1),
            attention: attention
                .then(|| DepthAttention::build(&mut scope, "gate", channels, reduction)),
        }
    }

    pub fn apply<C: Ctx>(&self, ctx: &mut C, x: &C::V) -> C::V {
        let h = self.expand.apply(ctx, x);
        let h = ctx.leaky_relu(&h, LEAKY_SLOPE);
        let h = self.depthwise.apply(ctx, &h);
        let h = ctx.leaky_relu(&h, LEAKY_SLOPE);
        let h = self.project.apply(ctx, &h);
        match &self.attention {
            Some(att) => att.apply(ctx, &h),
            None => h,
        }
    }
}

/// A group of chained attention blocks plus a learned 1x1 skip over the
/// whole group.
pub(crate) struct BlockGroup {
    skip: Conv,
    blocks: Vec<AttentionBlock>,
}

impl BlockGroup {
    pub fn build(
        b: &mut Builder,
        name: &str,
        channels: usize,
        count: usize,
        expansion: usize,
        reduction: usize,
        attention: bool,
    ) -> Self {
        let mut scope = b.scope(name);
        let skip = Conv::build(&mut scope, "skip", channels, channels, 1, 1, 0, 1);
        let blocks = (0..count)
            .map(|i| {
                AttentionBlock::build(
                    &mut scope,
                    &format!("block{i}"),
                    channels,
                    expansion,
                    reduction,
                    attention,
                )
            })
            .collect();
        BlockGroup { skip, blocks }
    }

    pub fn apply<C: Ctx>(&self, ctx: &mut C, x: &C::V) -> C::V {
        let bypass = self.skip.apply(ctx, x);
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.apply(ctx, &h);
        }
        ctx.add(&bypass, &h)
    }
}

/// Strided 3x3 conv halving the spatial size while changing width.
pub(crate) struct Downsample {
    conv: Conv,
}

impl Downsample {
    pub fn build(b: &mut Builder, name: &str, cin: usize, cout: usize) -> Self {
        Downsample {
            conv: Conv::build(b, name, cin, cout, 3, 2, 1, 1),
        }
    }

    pub fn apply<C: Ctx>(&self, ctx: &mut C, x: &C::V) -> C::V {
        self.conv.apply(ctx, x)
    }
}

/// Sub-pixel upsampling: 3x3 conv to 4x the target width, pixel shuffle x2,
/// PReLU with a learned slope.
pub(crate) struct Upsample {
    conv: Conv,
    alpha: ParamId,
}

impl Upsample {
    pub fn build(b: &mut Builder, name: &str, cin: usize, cout: usize) -> Self {
        let mut scope = b.scope(name);
        let conv = Conv::build(&mut scope, "conv", cin, 4 * cout, 3, 1, 1, 1);
        let alpha = scope.scalar("alpha", PRELU_INIT);
        Upsample { conv, alpha }
    }

    pub fn apply<C: Ctx>(&self, ctx: &mut C, x: &C::V) -> C::V {
        let h = self.conv.apply(ctx, x);
        let h = ctx.pixel_shuffle(&h, 2);
        ctx.prelu(&h, self.alpha)
    }
}
