//! One forward definition, two execution modes.
//!
//! Network blocks describe their forward pass against the [`Ctx`] trait.
//! [`TapeCtx`] records onto an autodiff tape for training; [`EvalCtx`] runs
//! the same kernels directly on tensors for inference. Because both modes
//! share the kernel implementations, a trained network produces bit-equal
//! outputs under either execution.

use super::kernels::{self, sigmoid_scalar};
use super::params::{ParamId, ParamSet};
use super::tape::{Tape, Var};
use super::tensor::Tensor;

pub trait Ctx {
    type V: Clone;

    fn conv2d(
        &mut self,
        x: &Self::V,
        w: ParamId,
        b: Option<ParamId>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Self::V;
    fn linear(&mut self, x: &Self::V, w: ParamId, b: ParamId) -> Self::V;
    fn prelu(&mut self, x: &Self::V, alpha: ParamId) -> Self::V;
    fn leaky_relu(&mut self, x: &Self::V, slope: f64) -> Self::V;
    fn relu(&mut self, x: &Self::V) -> Self::V;
    fn sigmoid(&mut self, x: &Self::V) -> Self::V;
    fn swish(&mut self, x: &Self::V) -> Self::V;
    fn pixel_shuffle(&mut self, x: &Self::V, r: usize) -> Self::V;
    fn maxpool2(&mut self, x: &Self::V) -> Self::V;
    fn global_avg_pool(&mut self, x: &Self::V) -> Self::V;
    fn scale_channels(&mut self, x: &Self::V, gains: &Self::V) -> Self::V;
    fn scale_spatial(&mut self, x: &Self::V, gate: &Self::V) -> Self::V;
    fn channel_mean(&mut self, x: &Self::V) -> Self::V;
    fn channel_max(&mut self, x: &Self::V) -> Self::V;
    fn concat_c(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    /// Announces that `gate` is an attention gate, for diagnostics taps;
    /// a no-op unless the context opts in.
    fn record_gate(&mut self, _gate: &Self::V) {}
}

/// Gradient-recording execution: values are tape nodes, parameters resolve
/// to the tape leaves spawned from a [`ParamSet`].
pub struct TapeCtx<'a> {
    pub tape: &'a mut Tape,
    pub leaves: &'a [Var],
}

impl Ctx for TapeCtx<'_> {
    type V = Var;

    fn conv2d(
        &mut self,
        x: &Var,
        w: ParamId,
        b: Option<ParamId>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Var {
        let wv = self.leaves[w.0];
        let bv = b.map(|b| self.leaves[b.0]);
        self.tape.conv2d(*x, wv, bv, stride, padding, groups)
    }

    fn linear(&mut self, x: &Var, w: ParamId, b: ParamId) -> Var {
        self.tape.linear(*x, self.leaves[w.0], self.leaves[b.0])
    }

    fn prelu(&mut self, x: &Var, alpha: ParamId) -> Var {
        self.tape.prelu(*x, self.leaves[alpha.0])
    }

    fn leaky_relu(&mut self, x: &Var, slope: f64) -> Var {
        self.tape.leaky_relu(*x, slope)
    }

    fn relu(&mut self, x: &Var) -> Var {
        self.tape.relu(*x)
    }

    fn sigmoid(&mut self, x: &Var) -> Var {
        self.tape.sigmoid(*x)
    }

    fn swish(&mut self, x: &Var) -> Var {
        self.tape.swish(*x)
    }

    fn pixel_shuffle(&mut self, x: &Var, r: usize) -> Var {
        self.tape.pixel_shuffle(*x, r)
    }

    fn maxpool2(&mut self, x: &Var) -> Var {
        self.tape.maxpool2(*x)
    }

    fn global_avg_pool(&mut self, x: &Var) -> Var {
        self.tape.global_avg_pool(*x)
    }

    fn scale_channels(&mut self, x: &Var, gains: &Var) -> Var {
        self.tape.scale_channels(*x, *gains)
    }

    fn scale_spatial(&mut self, x: &Var, gate: &Var) -> Var {
        self.tape.scale_spatial(*x, *gate)
    }

    fn channel_mean(&mut self, x: &Var) -> Var {
        self.tape.channel_mean(*x)
    }

    fn channel_max(&mut self, x: &Var) -> Var {
        self.tape.channel_max(*x)
    }

    fn concat_c(&mut self, a: &Var, b: &Var) -> Var {
        self.tape.concat_c(*a, *b)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        self.tape.add(*a, *b)
    }
}

/// Plain tensor execution for inference; no gradients, no tape growth.
pub struct EvalCtx<'a> {
    pub params: &'a ParamSet,
    /// When set, receives the (min, max) of every attention gate evaluated.
    pub gate_log: Option<&'a mut Vec<(f64, f64)>>,
}

impl<'a> EvalCtx<'a> {
    pub fn new(params: &'a ParamSet) -> Self {
        EvalCtx {
            params,
            gate_log: None,
        }
    }
}

impl Ctx for EvalCtx<'_> {
    type V = Tensor;

    fn conv2d(
        &mut self,
        x: &Tensor,
        w: ParamId,
        b: Option<ParamId>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Tensor {
        kernels::conv2d(
            x,
            self.params.tensor(w),
            b.map(|b| self.params.tensor(b)),
            &kernels::ConvSpec {
                stride,
                padding,
                groups,
            },
        )
    }

    fn linear(&mut self, x: &Tensor, w: ParamId, b: ParamId) -> Tensor {
        kernels::linear(x, self.params.tensor(w), self.params.tensor(b))
    }

    fn prelu(&mut self, x: &Tensor, alpha: ParamId) -> Tensor {
        let a = self.params.tensor(alpha).scalar_value();
        kernels::unary(x, |v| if v > 0.0 { v } else { a * v })
    }

    fn leaky_relu(&mut self, x: &Tensor, slope: f64) -> Tensor {
        kernels::unary(x, |v| if v > 0.0 { v } else { slope * v })
    }

    fn relu(&mut self, x: &Tensor) -> Tensor {
        kernels::unary(x, |v| v.max(0.0))
    }

    fn sigmoid(&mut self, x: &Tensor) -> Tensor {
        kernels::unary(x, sigmoid_scalar)
    }

    fn swish(&mut self, x: &Tensor) -> Tensor {
        kernels::unary(x, |v| v * sigmoid_scalar(v))
    }

    fn pixel_shuffle(&mut self, x: &Tensor, r: usize) -> Tensor {
        kernels::pixel_shuffle(x, r)
    }

    fn maxpool2(&mut self, x: &Tensor) -> Tensor {
        kernels::maxpool2(x).0
    }

    fn global_avg_pool(&mut self, x: &Tensor) -> Tensor {
        kernels::global_avg_pool(x)
    }

    fn scale_channels(&mut self, x: &Tensor, gains: &Tensor) -> Tensor {
        kernels::scale_channels(x, gains)
    }

    fn scale_spatial(&mut self, x: &Tensor, gate: &Tensor) -> Tensor {
        kernels::scale_spatial(x, gate)
    }

    fn channel_mean(&mut self, x: &Tensor) -> Tensor {
        kernels::channel_mean(x)
    }

    fn channel_max(&mut self, x: &Tensor) -> Tensor {
        kernels::channel_max(x).0
    }

    fn concat_c(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        kernels::concat_c(a, b)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        kernels::add(a, b)
    }

    fn record_gate(&mut self, gate: &Tensor) {
        if let Some(log) = self.gate_log.as_deref_mut() {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &v in gate.data() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            log.push((lo, hi));
        }
    }
}
