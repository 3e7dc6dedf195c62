//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Forward calls evaluate eagerly and append a node; `backward` walks the
//! tape once in reverse, accumulating gradients in fixed order. There is no
//! graph pruning magic: a node participates in backprop iff any of its
//! inputs does, and constants simply never receive gradients. All values are
//! `f64` and every reduction is sequential, so gradients are bit-stable.

use super::kernels::{self, ConvSpec};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    PixelShuffle {
        x: Var,
        factor: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Swish {
        x: Var,
    },
    Prelu {
        x: Var,
        alpha: Var,
    },
    ScaleChannels {
        x: Var,
        gains: Var,
    },
    ScaleSpatial {
        x: Var,
        gate: Var,
    },
    ChannelMean {
        x: Var,
    },
    ChannelMax {
        x: Var,
        argmax: Vec<usize>,
    },
    ConcatC {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    ClampedLog {
        x: Var,
        eps: f64,
    },
    Mean {
        x: Var,
    },
    MeanAbsDiff {
        a: Var,
        b: Var,
    },
    /// Scalar whose value and input gradient were computed outside the tape
    /// (used for the per-pixel color loss, which differentiates through the
    /// Lab/CIEDE2000 chain with dual numbers).
    Precomputed {
        x: Var,
        grad: Tensor,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

use kernels::sigmoid_scalar as sigmoid;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Insert a gradient-tracked leaf (a parameter or probed input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Insert a constant (no gradient ever flows into it).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Var {
        let spec = ConvSpec {
            stride,
            padding,
            groups,
        };
        let value = kernels::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &spec,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
                groups,
            },
            value,
            rg,
        )
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let value = kernels::linear(self.value(x), self.value(w), self.value(b));
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Op::Linear { x, w, b }, value, rg)
    }

    pub fn pixel_shuffle(&mut self, x: Var, factor: usize) -> Var {
        let value = kernels::pixel_shuffle(self.value(x), factor);
        let rg = self.rg(x);
        self.push(Op::PixelShuffle { x, factor }, value, rg)
    }

    pub fn maxpool2(&mut self, x: Var) -> Var {
        let (value, argmax) = kernels::maxpool2(self.value(x));
        let rg = self.rg(x);
        self.push(Op::MaxPool2 { x, argmax }, value, rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let value = kernels::global_avg_pool(self.value(x));
        let rg = self.rg(x);
        self.push(Op::GlobalAvgPool { x }, value, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = kernels::unary(self.value(x), |v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(Op::LeakyRelu { x, slope }, value, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = kernels::unary(self.value(x), |v| v.max(0.0));
        let rg = self.rg(x);
        self.push(Op::Relu { x }, value, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = kernels::unary(self.value(x), sigmoid);
        let rg = self.rg(x);
        self.push(Op::Sigmoid { x }, value, rg)
    }

    pub fn swish(&mut self, x: Var) -> Var {
        let value = kernels::unary(self.value(x), |v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(Op::Swish { x }, value, rg)
    }

    /// PReLU with a single learnable slope (`alpha` is a `[1]` tensor).
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Var {
        let a = self.value(alpha).scalar_value();
        let value = kernels::unary(self.value(x), |v| if v > 0.0 { v } else { a * v });
        let rg = self.rg(x) || self.rg(alpha);
        self.push(Op::Prelu { x, alpha }, value, rg)
    }

    /// Multiply each channel map by its gain: `x [C,H,W] * gains [C]`.
    pub fn scale_channels(&mut self, x: Var, gains: Var) -> Var {
        let value = kernels::scale_channels(self.value(x), self.value(gains));
        let rg = self.rg(x) || self.rg(gains);
        self.push(Op::ScaleChannels { x, gains }, value, rg)
    }

    /// Multiply every channel by a shared spatial gate: `x [C,H,W] * gate [1,H,W]`.
    pub fn scale_spatial(&mut self, x: Var, gate: Var) -> Var {
        let value = kernels::scale_spatial(self.value(x), self.value(gate));
        let rg = self.rg(x) || self.rg(gate);
        self.push(Op::ScaleSpatial { x, gate }, value, rg)
    }

    /// Mean over channels: `[C,H,W] -> [1,H,W]`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let value = kernels::channel_mean(self.value(x));
        let rg = self.rg(x);
        self.push(Op::ChannelMean { x }, value, rg)
    }

    /// Max over channels: `[C,H,W] -> [1,H,W]` (first channel wins ties).
    pub fn channel_max(&mut self, x: Var) -> Var {
        let (value, argmax) = kernels::channel_max(self.value(x));
        let rg = self.rg(x);
        self.push(Op::ChannelMax { x, argmax }, value, rg)
    }

    /// Concatenate along the channel axis.
    pub fn concat_c(&mut self, a: Var, b: Var) -> Var {
        let value = kernels::concat_c(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::ConcatC { a, b }, value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = kernels::add(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add { a, b }, value, rg)
    }

    /// Elementwise `scale * x + offset`.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        let value = kernels::unary(self.value(x), |v| scale * v + offset);
        let rg = self.rg(x);
        self.push(Op::Affine { x, scale }, value, rg)
    }

    /// `ln(max(x, eps))`; gradient is zero where the clamp is active.
    pub fn clamped_log(&mut self, x: Var, eps: f64) -> Var {
        let value = kernels::unary(self.value(x), |v| v.max(eps).ln());
        let rg = self.rg(x);
        self.push(Op::ClampedLog { x, eps }, value, rg)
    }

    /// Mean of all elements -> `[1]`.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let value = Tensor::scalar(self.value(x).data().iter().sum::<f64>() / n);
        let rg = self.rg(x);
        self.push(Op::Mean { x }, value, rg)
    }

    /// Mean absolute difference of two same-shaped tensors -> `[1]`.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        assert!(
            self.value(a).same_shape(self.value(b)),
            "mean_abs_diff needs equal shapes"
        );
        let n = self.value(a).len() as f64;
        let sum: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MeanAbsDiff { a, b }, Tensor::scalar(sum / n), rg)
    }

    /// Scalar node with an externally supplied value and gradient w.r.t. `x`.
    pub fn precomputed_scalar(&mut self, x: Var, value: f64, grad: Tensor) -> Var {
        assert!(
            grad.same_shape(self.value(x)),
            "precomputed gradient shape must match the input"
        );
        let rg = self.rg(x);
        self.push(Op::Precomputed { x, grad }, Tensor::scalar(value), rg)
    }

    /// Backpropagate from a scalar node; returns gradients for leaves (and
    /// keeps nothing for interior nodes).
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward starts from a scalar");
        assert!(
            self.rg(root),
            "root does not depend on any gradient-tracked leaf"
        );
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            // Leaves keep their accumulated gradient; interior nodes give
            // theirs up (freed after propagation).
            let g = if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            } else {
                grads[id].take().expect("checked above")
            };
            self.propagate(id, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => unreachable!("leaves are terminal"),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
                groups,
            } => {
                let spec = ConvSpec {
                    stride: *stride,
                    padding: *padding,
                    groups: *groups,
                };
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.value(*x), self.value(*w), &spec, g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = kernels::linear_backward(self.value(*x), self.value(*w), g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::PixelShuffle { x, factor } => {
                let dx = kernels::pixel_shuffle_backward(g, *factor, self.value(*x).shape());
                self.accumulate(grads, *x, dx);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape().to_vec());
                for (i, &src) in argmax.iter().enumerate() {
                    dx.data_mut()[src] += g.data()[i];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool { x } => {
                let (c, h, w) = self.value(*x).chw();
                let mut dx = Tensor::zeros(vec![c, h, w]);
                let inv = 1.0 / (h * w) as f64;
                for ci in 0..c {
                    let gv = g.data()[ci] * inv;
                    for v in &mut dx.data_mut()[ci * h * w..(ci + 1) * h * w] {
                        *v = gv;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LeakyRelu { x, slope } => {
                let dx = self.unary_grad(*x, g, |v| if v > 0.0 { 1.0 } else { *slope });
                self.accumulate(grads, *x, dx);
            }
            Op::Relu { x } => {
                let dx = self.unary_grad(*x, g, |v| if v > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                // Use the stored output: d sigma = y (1 - y).
                let y = node.value.data();
                let dx = Tensor::from_vec(
                    node.value.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(y)
                        .map(|(gv, yv)| gv * yv * (1.0 - yv))
                        .collect(),
                );
                self.accumulate(grads, *x, dx);
            }
            Op::Swish { x } => {
                let dx = self.unary_grad(*x, g, |v| {
                    let s = sigmoid(v);
                    s + v * s * (1.0 - s)
                });
                self.accumulate(grads, *x, dx);
            }
            Op::Prelu { x, alpha } => {
                let a = self.value(*alpha).scalar_value();
                let xd = self.value(*x).data();
                let mut da = 0.0;
                let mut dx = Tensor::zeros(self.value(*x).shape().to_vec());
                for i in 0..xd.len() {
                    if xd[i] > 0.0 {
                        dx.data_mut()[i] = g.data()[i];
                    } else {
                        dx.data_mut()[i] = g.data()[i] * a;
                        da += g.data()[i] * xd[i];
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *alpha, Tensor::scalar(da));
            }
            Op::ScaleChannels { x, gains } => {
                let (c, h, w) = self.value(*x).chw();
                let xd = self.value(*x).data();
                let gd = self.value(*gains).data();
                let mut dx = Tensor::zeros(vec![c, h, w]);
                let mut dgain = Tensor::zeros(vec![c]);
                for ci in 0..c {
                    let mut acc = 0.0;
                    for i in 0..h * w {
                        let idx = ci * h * w + i;
                        dx.data_mut()[idx] = g.data()[idx] * gd[ci];
                        acc += g.data()[idx] * xd[idx];
                    }
                    dgain.data_mut()[ci] = acc;
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gains, dgain);
            }
            Op::ScaleSpatial { x, gate } => {
                let (c, h, w) = self.value(*x).chw();
                let xd = self.value(*x).data();
                let md = self.value(*gate).data();
                let mut dx = Tensor::zeros(vec![c, h, w]);
                let mut dgate = Tensor::zeros(vec![1, h, w]);
                for ci in 0..c {
                    for i in 0..h * w {
                        let idx = ci * h * w + i;
                        dx.data_mut()[idx] = g.data()[idx] * md[i];
                        dgate.data_mut()[i] += g.data()[idx] * xd[idx];
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gate, dgate);
            }
            Op::ChannelMean { x } => {
                let (c, h, w) = self.value(*x).chw();
                let inv = 1.0 / c as f64;
                let mut dx = Tensor::zeros(vec![c, h, w]);
                for ci in 0..c {
                    for i in 0..h * w {
                        dx.data_mut()[ci * h * w + i] = g.data()[i] * inv;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ChannelMax { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape().to_vec());
                for (i, &src) in argmax.iter().enumerate() {
                    dx.data_mut()[src] += g.data()[i];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatC { a, b } => {
                let na = self.value(*a).len();
                let da = Tensor::from_vec(self.value(*a).shape().to_vec(), g.data()[..na].to_vec());
                let db = Tensor::from_vec(self.value(*b).shape().to_vec(), g.data()[na..].to_vec());
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Affine { x, scale } => {
                let dx = Tensor::from_vec(
                    g.shape().to_vec(),
                    g.data().iter().map(|v| v * scale).collect(),
                );
                self.accumulate(grads, *x, dx);
            }
            Op::ClampedLog { x, eps } => {
                let xd = self.value(*x).data();
                let dx = Tensor::from_vec(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(xd)
                        .map(|(gv, &v)| if v > *eps { gv / v } else { 0.0 })
                        .collect(),
                );
                self.accumulate(grads, *x, dx);
            }
            Op::Mean { x } => {
                let n = self.value(*x).len();
                let gv = g.scalar_value() / n as f64;
                self.accumulate(
                    grads,
                    *x,
                    Tensor::filled(self.value(*x).shape().to_vec(), gv),
                );
            }
            Op::MeanAbsDiff { a, b } => {
                let n = self.value(*a).len() as f64;
                let gv = g.scalar_value() / n;
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let mut da = Tensor::zeros(self.value(*a).shape().to_vec());
                for i in 0..ad.len() {
                    let d = ad[i] - bd[i];
                    // Subgradient 0 at the kink.
                    da.data_mut()[i] = if d > 0.0 {
                        gv
                    } else if d < 0.0 {
                        -gv
                    } else {
                        0.0
                    };
                }
                let db =
                    Tensor::from_vec(da.shape().to_vec(), da.data().iter().map(|v| -v).collect());
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Precomputed { x, grad } => {
                let gv = g.scalar_value();
                let dx = Tensor::from_vec(
                    grad.shape().to_vec(),
                    grad.data().iter().map(|v| v * gv).collect(),
                );
                self.accumulate(grads, *x, dx);
            }
        }
    }

    fn unary_grad(&self, x: Var, g: &Tensor, df: impl Fn(f64) -> f64) -> Tensor {
        let xd = self.value(x).data();
        Tensor::from_vec(
            g.shape().to_vec(),
            g.data().iter().zip(xd).map(|(gv, &v)| gv * df(v)).collect(),
        )
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, delta: Tensor) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                debug_assert!(existing.same_shape(&delta));
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Central finite differences of `f` at `x0`, elementwise.
    fn numerical_grad(f: &dyn Fn(&Tensor) -> f64, x0: &Tensor) -> Tensor {
        let h = 1e-6;
        let mut out = Tensor::zeros(x0.shape().to_vec());
        for i in 0..x0.len() {
            let mut hi = x0.clone();
            hi.data_mut()[i] += h;
            let mut lo = x0.clone();
            lo.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&hi) - f(&lo)) / (2.0 * h);
        }
        out
    }

    fn assert_close(analytic: &Tensor, numeric: &Tensor, tol: f64, what: &str) {
        assert!(analytic.same_shape(numeric));
        for i in 0..analytic.len() {
            let (a, n) = (analytic.data()[i], numeric.data()[i]);
            assert!(
                (a - n).abs() <= tol * (1.0 + n.abs()),
                "{what}[{i}]: analytic {a} vs numeric {n}"
            );
        }
    }

    /// Gradient-check a graph described by `build` with respect to one leaf.
    /// `build` gets a fresh tape plus the probed leaf and returns the scalar
    /// root.
    fn gradcheck(x0: &Tensor, build: &dyn Fn(&mut Tape, Var) -> Var, what: &str) {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let root = build(&mut tape, x);
        let grads = tape.backward(root);
        let analytic = grads.get(x).expect("leaf must receive a gradient");
        let numeric = numerical_grad(
            &|xt: &Tensor| {
                let mut t = Tape::new();
                let xv = t.leaf(xt.clone());
                let r = build(&mut t, xv);
                t.value(r).scalar_value()
            },
            x0,
        );
        assert_close(analytic, &numeric, 1e-5, what);
    }

    #[test]
    fn conv2d_gradients_input_weight_bias() {
        let mut rng = crate::util::rng_from_seed(11);
        let x0 = rand_tensor(vec![2, 5, 4], &mut rng);
        let w0 = rand_tensor(vec![3, 2, 3, 3], &mut rng);
        let b0 = rand_tensor(vec![3], &mut rng);
        let t0 = rand_tensor(vec![3, 3, 2], &mut rng);

        // d/dx with w, b fixed.
        let (w1, b1, t1) = (w0.clone(), b0.clone(), t0.clone());
        gradcheck(
            &x0,
            &move |tape, x| {
                let w = tape.constant(w1.clone());
                let b = tape.constant(b1.clone());
                let tv = tape.constant(t1.clone());
                let y = tape.conv2d(x, w, Some(b), 1, 0, 1);
                tape.mean_abs_diff(y, tv)
            },
            "conv dx",
        );

        // d/dw and d/db with x fixed.
        let (x1, b1, t1) = (x0.clone(), b0.clone(), t0.clone());
        gradcheck(
            &w0,
            &move |tape, w| {
                let x = tape.constant(x1.clone());
                let b = tape.constant(b1.clone());
                let tv = tape.constant(t1.clone());
                let y = tape.conv2d(x, w, Some(b), 1, 0, 1);
                tape.mean_abs_diff(y, tv)
            },
            "conv dw",
        );
        let (x1, w1, t1) = (x0.clone(), w0.clone(), t0.clone());
        gradcheck(
            &b0,
            &move |tape, b| {
                let x = tape.constant(x1.clone());
                let w = tape.constant(w1.clone());
                let tv = tape.constant(t1.clone());
                let y = tape.conv2d(x, w, Some(b), 1, 0, 1);
                tape.mean_abs_diff(y, tv)
            },
            "conv db",
        );
    }

    #[test]
    fn strided_padded_and_depthwise_conv_gradients() {
        let mut rng = crate::util::rng_from_seed(12);
        let x0 = rand_tensor(vec![2, 6, 6], &mut rng);
        let w0 = rand_tensor(vec![4, 2, 3, 3], &mut rng);
        let t0 = rand_tensor(vec![4, 3, 3], &mut rng);
        let (w1, t1) = (w0.clone(), t0.clone());
        gradcheck(
            &x0,
            &move |tape, x| {
                let w = tape.constant(w1.clone());
                let tv = tape.constant(t1.clone());
                let y = tape.conv2d(x, w, None, 2, 1, 1);
                tape.mean_abs_diff(y, tv)
            },
            "strided conv dx",
        );

        let wd0 = rand_tensor(vec![2, 1, 3, 3], &mut rng);
        let td = rand_tensor(vec![2, 6, 6], &mut rng);
        let (x1, td1) = (x0.clone(), td.clone());
        gradcheck(
            &wd0,
            &move |tape, w| {
                let x = tape.constant(x1.clone());
                let tv = tape.constant(td1.clone());
                let y = tape.conv2d(x, w, None, 1, 1, 2);
                tape.mean_abs_diff(y, tv)
            },
            "depthwise conv dw",
        );
    }

    #[test]
    fn elementwise_activation_gradients() {
        let mut rng = crate::util::rng_from_seed(13);
        // Keep values away from the ReLU-family kinks at 0.
        let mut x0 = rand_tensor(vec![2, 3, 3], &mut rng);
        for v in x0.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        gradcheck(
            &x0,
            &|tape, x| {
                let y = tape.leaky_relu(x, 0.2);
                tape.mean(y)
            },
            "leaky_relu",
        );
        gradcheck(
            &x0,
            &|tape, x| {
                let y = tape.relu(x);
                tape.mean(y)
            },
            "relu",
        );
        gradcheck(
            &x0,
            &|tape, x| {
                let y = tape.sigmoid(x);
                tape.mean(y)
            },
            "sigmoid",
        );
        gradcheck(
            &x0,
            &|tape, x| {
                let y = tape.swish(x);
                tape.mean(y)
            },
            "swish",
        );
        gradcheck(
            &x0,
            &|tape, x| {
                let a = tape.constant(Tensor::scalar(0.25));
                let y = tape.prelu(x, a);
                tape.mean(y)
            },
            "prelu x",
        );
        let x1 = x0.clone();
        gradcheck(
            &Tensor::scalar(0.25),
            &move |tape, a| {
                let x = tape.constant(x1.clone());
                let y = tape.prelu(x, a);
                tape.mean(y)
            },
            "prelu alpha",
        );
    }

    #[test]
    fn attention_op_gradients() {
        let mut rng = crate::util::rng_from_seed(14);
        let x0 = rand_tensor(vec![3, 4, 4], &mut rng);
        let gains0 = rand_tensor(vec![3], &mut rng);
        let gate0 = rand_tensor(vec![1, 4, 4], &mut rng);

        let g1 = gains0.clone();
        gradcheck(
            &x0,
            &move |tape, x| {
                let g = tape.constant(g1.clone());
                let y = tape.scale_channels(x, g);
                tape.mean(y)
            },
            "scale_channels dx",
        );
        let x1 = x0.clone();
        gradcheck(
            &gains0,
            &move |tape, g| {
                let x = tape.constant(x1.clone());
                let y = tape.scale_channels(x, g);
                tape.mean(y)
            },
            "scale_channels dgain",
        );
        let m1 = gate0.clone();
        gradcheck(
            &x0,
            &move |tape, x| {
                let m = tape.constant(m1.clone());
                let y = tape.scale_spatial(x, m);
                tape.mean(y)
            },
            "scale_spatial dx",
        );
        let x1 = x0.clone();
        gradcheck(
            &gate0,
            &move |tape, m| {
                let x = tape.constant(x1.clone());
                let y = tape.scale_spatial(x, m);
                tape.mean(y)
            },
            "scale_spatial dgate",
        );
        gradcheck(
            &x0,
            &|tape, x| {
                let m = tape.channel_mean(x);
                let s = tape.mean(m);
                s
            },
            "channel_mean",
        );
        gradcheck(
            &x0,
            &|tape, x| {
                let m = tape.channel_max(x);
                tape.mean(m)
            },
            "channel_max",
        );
        gradcheck(
            &x0,
            &|tape, x| {
                let y = tape.global_avg_pool(x);
                tape.mean(y)
            },
            "global_avg_pool",
        );
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = crate::util::rng_from_seed(15);
        let x0 = rand_tensor(vec![4, 3, 3], &mut rng);
        let other = rand_tensor(vec![2, 3, 3], &mut rng);
        let o1 = other.clone();
        gradcheck(
            &x0,
            &move |tape, x| {
                let o = tape.constant(o1.clone());
                let y = tape.concat_c(x, o);
                let t = tape.constant(Tensor::zeros(vec![6, 3, 3]));
                tape.mean_abs_diff(y, t)
            },
            "concat_c",
        );
        gradcheck(
            &x0,
            &|tape, x| {
                let y = tape.pixel_shuffle(x, 2);
                let t = tape.constant(Tensor::filled(vec![1, 6, 6], 0.3));
                tape.mean_abs_diff(y, t)
            },
            "pixel_shuffle",
        );
        // Distinct values so the pooling argmax is FD-stable.
        let xp = Tensor::from_vec(
            vec![1, 4, 4],
            (0..16).map(|i| (i * 7 % 16) as f64 * 0.1).collect(),
        );
        gradcheck(
            &xp,
            &|tape, x| {
                let y = tape.maxpool2(x);
                tape.mean(y)
            },
            "maxpool2",
        );
        let x1 = x0.clone();
        gradcheck(
            &x0,
            &move |tape, x| {
                let o = tape.constant(x1.clone());
                let s = tape.add(x, o);
                let a = tape.affine(s, -2.5, 0.75);
                tape.mean(a)
            },
            "add/affine",
        );
    }

    #[test]
    fn linear_and_log_gradients() {
        let mut rng = crate::util::rng_from_seed(16);
        let x0 = rand_tensor(vec![5], &mut rng);
        let w0 = rand_tensor(vec![3, 5], &mut rng);
        let b0 = rand_tensor(vec![3], &mut rng);
        let (w1, b1) = (w0.clone(), b0.clone());
        gradcheck(
            &x0,
            &move |tape, x| {
                let w = tape.constant(w1.clone());
                let b = tape.constant(b1.clone());
                let y = tape.linear(x, w, b);
                let t = tape.constant(Tensor::filled(vec![3], 0.2));
                tape.mean_abs_diff(y, t)
            },
            "linear dx",
        );
        let (x1, b1) = (x0.clone(), b0.clone());
        gradcheck(
            &w0,
            &move |tape, w| {
                let x = tape.constant(x1.clone());
                let b = tape.constant(b1.clone());
                let y = tape.linear(x, w, b);
                let t = tape.constant(Tensor::filled(vec![3], 0.2));
                tape.mean_abs_diff(y, t)
            },
            "linear dw",
        );
        // Probabilities strictly inside (eps, 1) so the clamp is inactive.
        let p0 = Tensor::from_vec(vec![4], vec![0.2, 0.5, 0.9, 0.05]);
        gradcheck(
            &p0,
            &|tape, p| {
                let l = tape.clamped_log(p, 1e-7);
                tape.mean(l)
            },
            "clamped_log",
        );
        // Clamped region: gradient must be exactly zero, not huge.
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::from_vec(vec![2], vec![1e-9, 0.5]));
        let l = tape.clamped_log(p, 1e-7);
        let m = tape.mean(l);
        let grads = tape.backward(m);
        assert_eq!(grads.get(p).unwrap().data()[0], 0.0);
        assert!((grads.get(p).unwrap().data()[1] - 0.5 / 0.5).abs() < 1e-12);
    }

    #[test]
    fn precomputed_scalar_routes_injected_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![0.3, 0.7]));
        let inj = Tensor::from_vec(vec![2], vec![10.0, -20.0]);
        let v = tape.precomputed_scalar(x, 1.5, inj);
        let scaled = tape.affine(v, 2.0, 1.0);
        assert_eq!(tape.value(scaled).scalar_value(), 4.0);
        let grads = tape.backward(scaled);
        assert_eq!(grads.get(x).unwrap().data(), &[20.0, -40.0]);
    }

    #[test]
    fn constants_receive_no_gradient_and_fanout_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]));
        let c = tape.constant(Tensor::from_vec(vec![3], vec![5.0, 5.0, 5.0]));
        let a = tape.add(x, c);
        let b = tape.add(x, a); // x used twice: gradients must sum
        let m = tape.mean(b);
        let grads = tape.backward(m);
        assert!(grads.get(c).is_none());
        // d mean(2x + c)/dx_i = 2/3.
        for v in grads.get(x).unwrap().data() {
            assert!((v - 2.0 / 3.0).abs() < 1e-12);
        }
    }
}
