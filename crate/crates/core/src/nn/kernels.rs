//! Raw numeric kernels behind the tape ops. Everything is a pure function of
//! `f64` tensors with fixed, sequential accumulation order so results are
//! identical run to run. The same kernels serve both the gradient-tracked
//! training path and the plain inference path.

use super::tensor::Tensor;

pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

fn conv_output_side(input: usize, k: usize, stride: usize, padding: usize) -> usize {
    let padded = input + 2 * padding;
    assert!(
        padded >= k && stride > 0,
        "conv geometry unsatisfiable: input {input}, kernel {k}, stride {stride}, padding {padding}"
    );
    (padded - k) / stride + 1
}

/// Copy `[C, H, W]` into `[C, H+2p, W+2p]` with a zero border.
fn zero_pad(x: &Tensor, p: usize) -> Tensor {
    let (c, h, w) = x.chw();
    if p == 0 {
        return x.clone();
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = Tensor::zeros(vec![c, hp, wp]);
    let src = x.data();
    let dst = out.data_mut();
    for ci in 0..c {
        for y in 0..h {
            let s = (ci * h + y) * w;
            let d = (ci * hp + y + p) * wp + p;
            dst[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    out
}

/// Grouped 2D convolution: `x [Cin,H,W]`, `w [Cout, Cin/g, kh, kw]`,
/// optional `bias [Cout]`.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Tensor {
    let (cin, h, wd) = x.chw();
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv weight must be [Cout, Cin/g, kh, kw]");
    let (cout, cpg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(
        cin % spec.groups,
        0,
        "Cin {cin} not divisible by groups {}",
        spec.groups
    );
    assert_eq!(
        cout % spec.groups,
        0,
        "Cout {cout} not divisible by groups {}",
        spec.groups
    );
    assert_eq!(cpg, cin / spec.groups, "weight channel slice mismatch");
    if let Some(b) = bias {
        assert_eq!(b.shape(), [cout], "bias must be [Cout]");
    }

    let ho = conv_output_side(h, kh, spec.stride, spec.padding);
    let wo = conv_output_side(wd, kw, spec.stride, spec.padding);
    let xp = zero_pad(x, spec.padding);
    let (hp, wp) = (h + 2 * spec.padding, wd + 2 * spec.padding);
    let xd = xp.data();
    let wdat = w.data();

    let mut out = Tensor::zeros(vec![cout, ho, wo]);
    let od = out.data_mut();
    if let Some(b) = bias {
        for co in 0..cout {
            od[co * ho * wo..(co + 1) * ho * wo].fill(b.data()[co]);
        }
    }

    let out_per_group = cout / spec.groups;
    for co in 0..cout {
        let g = co / out_per_group;
        for cl in 0..cpg {
            let ci = g * cpg + cl;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wdat[((co * cpg + cl) * kh + ky) * kw + kx];
                    for oy in 0..ho {
                        let iy = oy * spec.stride + ky;
                        let in_row = &xd[(ci * hp + iy) * wp..(ci * hp + iy + 1) * wp];
                        let out_row = &mut od[(co * ho + oy) * wo..(co * ho + oy + 1) * wo];
                        if spec.stride == 1 {
                            let seg = &in_row[kx..kx + wo];
                            for i in 0..wo {
                                out_row[i] += wv * seg[i];
                            }
                        } else {
                            for i in 0..wo {
                                out_row[i] += wv * in_row[kx + i * spec.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d`] w.r.t. input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (cin, h, wd) = x.chw();
    let ws = w.shape();
    let (cout, cpg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (_, ho, wo) = dy.chw();
    let (hp, wp) = (h + 2 * spec.padding, wd + 2 * spec.padding);

    let xp = zero_pad(x, spec.padding);
    let xd = xp.data();
    let wdat = w.data();
    let dyd = dy.data();

    let mut db = Tensor::zeros(vec![cout]);
    for co in 0..cout {
        db.data_mut()[co] = dyd[co * ho * wo..(co + 1) * ho * wo].iter().sum();
    }

    let mut dw = Tensor::zeros(vec![cout, cpg, kh, kw]);
    let mut dxp = Tensor::zeros(vec![cin, hp, wp]);
    let dwd = dw.data_mut();
    let dxd = dxp.data_mut();

    let out_per_group = cout / spec.groups;
    for co in 0..cout {
        let g = co / out_per_group;
        for cl in 0..cpg {
            let ci = g * cpg + cl;
            for ky in 0..kh {
                for kx in 0..kw {
                    let widx = ((co * cpg + cl) * kh + ky) * kw + kx;
                    let wv = wdat[widx];
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let iy = oy * spec.stride + ky;
                        let in_row = &xd[(ci * hp + iy) * wp..(ci * hp + iy + 1) * wp];
                        let dx_row = &mut dxd[(ci * hp + iy) * wp..(ci * hp + iy + 1) * wp];
                        let dy_row = &dyd[(co * ho + oy) * wo..(co * ho + oy + 1) * wo];
                        if spec.stride == 1 {
                            let seg = &in_row[kx..kx + wo];
                            let dseg = &mut dx_row[kx..kx + wo];
                            for i in 0..wo {
                                acc += dy_row[i] * seg[i];
                                dseg[i] += wv * dy_row[i];
                            }
                        } else {
                            for i in 0..wo {
                                let xi = kx + i * spec.stride;
                                acc += dy_row[i] * in_row[xi];
                                dx_row[xi] += wv * dy_row[i];
                            }
                        }
                    }
                    dwd[widx] = acc;
                }
            }
        }
    }

    // Crop the padding border off the input gradient.
    let dx = if spec.padding == 0 {
        dxp
    } else {
        let p = spec.padding;
        let mut dx = Tensor::zeros(vec![cin, h, wd]);
        let dst = dx.data_mut();
        let src = dxp.data();
        for ci in 0..cin {
            for y in 0..h {
                let s = (ci * hp + y + p) * wp + p;
                let d = (ci * h + y) * wd;
                dst[d..d + wd].copy_from_slice(&src[s..s + wd]);
            }
        }
        dx
    };
    (dx, dw, db)
}

/// Depth-to-space: `[C*r^2, H, W]` -> `[C, H*r, W*r]`, block index ordered
/// as `c*r*r + dy*r + dx`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Tensor {
    let (c_in, h, w) = x.chw();
    assert_eq!(c_in % (r * r), 0, "channels {c_in} not divisible by r^2");
    let c = c_in / (r * r);
    let mut out = Tensor::zeros(vec![c, h * r, w * r]);
    let od = out.data_mut();
    let xd = x.data();
    for co in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let ci = co * r * r + dy * r + dx;
                for y in 0..h {
                    for x_ in 0..w {
                        od[(co * h * r + y * r + dy) * w * r + x_ * r + dx] =
                            xd[(ci * h + y) * w + x_];
                    }
                }
            }
        }
    }
    out
}

pub fn pixel_shuffle_backward(dy: &Tensor, r: usize, in_shape: &[usize]) -> Tensor {
    let (c_in, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let c = c_in / (r * r);
    let mut dx = Tensor::zeros(vec![c_in, h, w]);
    let dxd = dx.data_mut();
    let dyd = dy.data();
    for co in 0..c {
        for dy_ in 0..r {
            for dx_ in 0..r {
                let ci = co * r * r + dy_ * r + dx_;
                for y in 0..h {
                    for x_ in 0..w {
                        dxd[(ci * h + y) * w + x_] =
                            dyd[(co * h * r + y * r + dy_) * w * r + x_ * r + dx_];
                    }
                }
            }
        }
    }
    dx
}

/// 2x2 max pooling with stride 2; returns the pooled map and the flat input
/// index of each winner (first hit wins ties, scan order fixed).
pub fn maxpool2(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (c, h, w) = x.chw();
    assert!(
        h % 2 == 0 && w % 2 == 0,
        "maxpool2 needs even sides, got {h}x{w}"
    );
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(vec![c, ho, wo]);
    let mut arg = vec![0usize; c * ho * wo];
    let xd = x.data();
    let od = out.data_mut();
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = (ci * h + 2 * oy) * w + 2 * ox;
                let mut best = xd[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (ci * h + 2 * oy + dy) * w + 2 * ox + dx;
                    if xd[idx] > best {
                        best = xd[idx];
                        best_idx = idx;
                    }
                }
                od[(ci * ho + oy) * wo + ox] = best;
                arg[(ci * ho + oy) * wo + ox] = best_idx;
            }
        }
    }
    (out, arg)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Elementwise map (shared by the tape forward pass and plain inference so
/// both produce bit-identical activations).
pub fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

/// `[C,H,W] -> [C]` mean per channel.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    let xd = x.data();
    let mut out = Tensor::zeros(vec![c]);
    for ci in 0..c {
        out.data_mut()[ci] = xd[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
    }
    out
}

/// `[C,H,W] -> [1,H,W]` mean across channels.
pub fn channel_mean(x: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    let xd = x.data();
    let mut out = Tensor::zeros(vec![1, h, w]);
    let od = out.data_mut();
    for ci in 0..c {
        for i in 0..h * w {
            od[i] += xd[ci * h * w + i];
        }
    }
    for v in od.iter_mut() {
        *v /= c as f64;
    }
    out
}

/// `[C,H,W] -> [1,H,W]` max across channels plus winner indices
/// (first channel wins ties).
pub fn channel_max(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (c, h, w) = x.chw();
    let xd = x.data();
    let mut out = Tensor::zeros(vec![1, h, w]);
    let mut argmax = vec![0usize; h * w];
    let od = out.data_mut();
    for i in 0..h * w {
        let mut best = xd[i];
        let mut best_c = 0usize;
        for ci in 1..c {
            let v = xd[ci * h * w + i];
            if v > best {
                best = v;
                best_c = ci;
            }
        }
        od[i] = best;
        argmax[i] = best_c * h * w + i;
    }
    (out, argmax)
}

/// `x [C,H,W] * gains [C]`, broadcasting the gain over each channel map.
pub fn scale_channels(x: &Tensor, gains: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    assert_eq!(gains.len(), c, "one gain per channel");
    let mut out = x.clone();
    for ci in 0..c {
        let g = gains.data()[ci];
        for v in &mut out.data_mut()[ci * h * w..(ci + 1) * h * w] {
            *v *= g;
        }
    }
    out
}

/// `x [C,H,W] * gate [1,H,W]`, broadcasting the gate over channels.
pub fn scale_spatial(x: &Tensor, gate: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    assert_eq!(gate.shape(), [1, h, w], "gate must be [1,H,W]");
    let mut out = x.clone();
    let gd = gate.data();
    for ci in 0..c {
        for (i, v) in out.data_mut()[ci * h * w..(ci + 1) * h * w]
            .iter_mut()
            .enumerate()
        {
            *v *= gd[i];
        }
    }
    out
}

/// Concatenate two `[C,H,W]` tensors along channels.
pub fn concat_c(a: &Tensor, b: &Tensor) -> Tensor {
    let (ca, h, w) = a.chw();
    let (cb, hb, wb) = b.chw();
    assert_eq!((h, w), (hb, wb), "concat needs equal spatial dims");
    let mut data = Vec::with_capacity((ca + cb) * h * w);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(vec![ca + cb, h, w], data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert!(
        a.same_shape(b),
        "add needs equal shapes: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    Tensor::from_vec(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    )
}

/// Fully connected layer: `x [Cin]`, `w [Cout, Cin]`, `b [Cout]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let cin = x.len();
    let ws = w.shape();
    assert_eq!(ws.len(), 2, "linear weight must be [Cout, Cin]");
    assert_eq!(ws[1], cin, "linear input size mismatch");
    let cout = ws[0];
    assert_eq!(b.len(), cout);
    let mut out = Tensor::zeros(vec![cout]);
    let od = out.data_mut();
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    for o in 0..cout {
        let row = &wd[o * cin..(o + 1) * cin];
        let mut acc = bd[o];
        for i in 0..cin {
            acc += row[i] * xd[i];
        }
        od[o] = acc;
    }
    out
}

pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let cin = x.len();
    let cout = dy.len();
    let mut dx = Tensor::zeros(vec![cin]);
    let mut dw = Tensor::zeros(vec![cout, cin]);
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    {
        let dxd = dx.data_mut();
        for o in 0..cout {
            let row = &wd[o * cin..(o + 1) * cin];
            for i in 0..cin {
                dxd[i] += row[i] * dyd[o];
            }
        }
    }
    {
        let dwd = dw.data_mut();
        for o in 0..cout {
            for i in 0..cin {
                dwd[o * cin + i] = dyd[o] * xd[i];
            }
        }
    }
    (dx, dw, Tensor::from_vec(vec![cout], dyd.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv2d_identity_kernel_preserves_input() {
        // 3x3 kernel with a single centered 1 and padding 1 is the identity.
        let x = Tensor::from_vec(vec![1, 3, 4], (0..12).map(|i| i as f64).collect());
        let mut w = Tensor::zeros(vec![1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let y = conv2d(
            &x,
            &w,
            None,
            &ConvSpec {
                stride: 1,
                padding: 1,
                groups: 1,
            },
        );
        assert_eq!(y, x);
    }

    #[test]
    fn conv2d_matches_hand_computed_example() {
        // 1x2x2 input, 1x1x2x2 kernel, no padding: a single dot product.
        let x = Tensor::from_vec(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::from_vec(vec![1, 1, 2, 2], vec![0.5, -1.0, 2.0, 0.25]);
        let b = Tensor::from_vec(vec![1], vec![10.0]);
        let y = conv2d(
            &x,
            &w,
            Some(&b),
            &ConvSpec {
                stride: 1,
                padding: 0,
                groups: 1,
            },
        );
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data()[0], 10.0 + 0.5 - 2.0 + 6.0 + 1.0);
    }

    #[test]
    fn conv2d_stride_and_padding_geometry() {
        let x = Tensor::zeros(vec![2, 8, 6]);
        let w = Tensor::zeros(vec![4, 2, 3, 3]);
        let y = conv2d(
            &x,
            &w,
            None,
            &ConvSpec {
                stride: 2,
                padding: 1,
                groups: 1,
            },
        );
        assert_eq!(y.shape(), &[4, 4, 3]);
    }

    #[test]
    fn depthwise_conv_keeps_channels_separate() {
        // groups == channels: each output channel sees only its own input.
        let x = Tensor::from_vec(vec![2, 2, 2], vec![1.0, 1.0, 1.0, 1.0, 5.0, 5.0, 5.0, 5.0]);
        let w = Tensor::from_vec(vec![2, 1, 1, 1], vec![2.0, 3.0]);
        let y = conv2d(
            &x,
            &w,
            None,
            &ConvSpec {
                stride: 1,
                padding: 0,
                groups: 2,
            },
        );
        assert_eq!(y.data(), &[2.0, 2.0, 2.0, 2.0, 15.0, 15.0, 15.0, 15.0]);
    }

    #[test]
    fn pixel_shuffle_round_trip() {
        let x = Tensor::from_vec(vec![4, 2, 2], (0..16).map(|i| i as f64).collect());
        let y = pixel_shuffle(&x, 2);
        assert_eq!(y.shape(), &[1, 4, 4]);
        // Block (0,0) of the output interleaves channels 0..4 at (0,0).
        assert_eq!(y.data()[0], x.data()[0]); // (0,0) <- c0
        assert_eq!(y.data()[1], x.data()[4]); // (0,1) <- c1
        assert_eq!(y.data()[4], x.data()[8]); // (1,0) <- c2
        assert_eq!(y.data()[5], x.data()[12]); // (1,1) <- c3
        let back = pixel_shuffle_backward(&y, 2, &[4, 2, 2]);
        assert_eq!(back, x); // the permutation is its own exact inverse here
    }

    #[test]
    fn maxpool_picks_maxima_and_tracks_indices() {
        let x = Tensor::from_vec(
            vec![1, 4, 4],
            vec![
                1.0, 2.0, 5.0, 1.0, //
                3.0, 0.0, 1.0, 1.0, //
                9.0, 9.0, 2.0, 2.0, //
                0.0, 1.0, 2.0, 8.0,
            ],
        );
        let (y, arg) = maxpool2(&x);
        assert_eq!(y.data(), &[3.0, 5.0, 9.0, 8.0]);
        // Tie in the bottom-left window resolves to the first scanned cell.
        assert_eq!(arg[2], 8);
    }

    #[test]
    fn linear_matches_matrix_product() {
        let x = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]);
        let w = Tensor::from_vec(vec![2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]);
        let b = Tensor::from_vec(vec![2], vec![10.0, -10.0]);
        let y = linear(&x, &w, &b);
        assert_eq!(y.data(), &[10.0 - 2.0, -10.0 + 3.0]);
    }
}
