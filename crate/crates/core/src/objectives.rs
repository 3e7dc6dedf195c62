//! The four-term training objective and the discriminator's own loss.
//!
//! Total generator loss: reconstruction (mean absolute error), the feature
//! loss scaled by an adaptive total-variation regulator, the perceptual
//! colour term (mean per-pixel CIEDE2000), and an adversarial term weighted
//! by `lambda_g`. Every term is built on the autodiff tape so one backward
//! pass yields the full gradient; per-term values are read back into a
//! [`LossReport`] for logging.

use serde::{Deserialize, Serialize};

use crate::color::{delta_e_with_grad, image_to_lab};
use crate::extractor::FeatureExtractor;
use crate::nn::{Tape, TapeCtx, Tensor, Var};
use crate::raster::RgbImage;

/// Probabilities are clamped to `[eps, 1]` before any logarithm.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the adversarial term in the total loss.
    pub lambda_g: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_g: 1e-4 }
    }
}

/// Which image feeds the total-variation regulator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TvOperand {
    #[default]
    Output,
    Reference,
}

/// Per-step loss values; `l_t` always satisfies the decomposition
/// `l_t == l_r + l_rfl + l_pcl + lambda_g * l_g` to within 1e-6.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossReport {
    pub l_r: f64,
    pub l_rfl: f64,
    pub l_pcl: f64,
    pub l_g: f64,
    pub lambda_r: f64,
    pub l_t: f64,
}

/// Mean absolute difference between reconstruction and reference.
pub fn reconstruction_loss(tape: &mut Tape, output: Var, reference: Var) -> Var {
    tape.mean_abs_diff(output, reference)
}

/// Adaptive regulator: L1 norm of forward differences (vertical plus
/// horizontal) over the image, normalized by the feature-map element count.
/// Computed outside the tape: it scales the feature term but carries no
/// gradient of its own.
pub fn tv_regulator(image: &Tensor, feature_dims: [usize; 3]) -> f64 {
    let (c, h, w) = image.chw();
    let data = image.data();
    let plane = h * w;
    let mut sum = 0.0;
    for ch in 0..c {
        let base = ch * plane;
        for y in 0..h {
            for x in 0..w {
                let v = data[base + y * w + x];
                if y + 1 < h {
                    sum += (data[base + (y + 1) * w + x] - v).abs();
                }
                if x + 1 < w {
                    sum += (data[base + y * w + x + 1] - v).abs();
                }
            }
        }
    }
    sum / (feature_dims[0] * feature_dims[1] * feature_dims[2]) as f64
}

/// Mean absolute distance between extractor features of the reconstruction
/// and of the reference. Reference features are computed off-tape (they are
/// constants); extractor weights stay frozen.
pub fn feature_loss(
    tape: &mut Tape,
    extractor: &FeatureExtractor,
    extractor_leaves: &[Var],
    output: Var,
    reference: &Tensor,
    stage: usize,
) -> Var {
    let ref_features = extractor.features_eval(reference, stage);
    let out_features = {
        let mut ctx = TapeCtx {
            tape,
            leaves: extractor_leaves,
        };
        extractor.features(&mut ctx, &output, stage)
    };
    let ref_node = tape.constant(ref_features);
    tape.mean_abs_diff(out_features, ref_node)
}

/// Feature loss scaled by the adaptive regulator. Returns the term and the
/// regulator value used; `operand` selects which image the regulator reads.
#[allow(clippy::too_many_arguments)]
pub fn regularized_feature_loss(
    tape: &mut Tape,
    extractor: &FeatureExtractor,
    extractor_leaves: &[Var],
    output: Var,
    reference: &Tensor,
    stage: usize,
    operand: TvOperand,
) -> (Var, f64) {
    let (_, h, w) = reference.chw();
    let dims = extractor.feature_shape(h, w, stage);
    let lambda_r = match operand {
        TvOperand::Output => tv_regulator(tape.value(output), dims),
        TvOperand::Reference => tv_regulator(reference, dims),
    };
    let lv = feature_loss(tape, extractor, extractor_leaves, output, reference, stage);
    (tape.affine(lv, lambda_r, 0.0), lambda_r)
}

/// Mean per-pixel CIEDE2000 between reconstruction and reference. The value
/// and its gradient with respect to the reconstruction come from the
/// differentiable colour pipeline and enter the tape as one node.
pub fn perceptual_colour_loss(tape: &mut Tape, output: Var, reference: &RgbImage) -> Var {
    let out = tape.value(output);
    let (c, h, w) = out.chw();
    assert_eq!(c, 3, "colour loss expects an RGB tensor");
    assert_eq!(
        (reference.width(), reference.height()),
        (w, h),
        "colour loss needs equal sizes"
    );
    let lab_refs = image_to_lab(reference);
    let data = out.data();
    let plane = h * w;
    let n = plane as f64;
    let mut grad = vec![0.0; 3 * plane];
    let mut total = 0.0;
    for idx in 0..plane {
        let rgb = [data[idx], data[plane + idx], data[2 * plane + idx]];
        let (de, d) = delta_e_with_grad(rgb, lab_refs[idx]);
        total += de;
        for ch in 0..3 {
            grad[ch * plane + idx] = d[ch] / n;
        }
    }
    tape.precomputed_scalar(output, total / n, Tensor::from_vec(vec![3, h, w], grad))
}

/// Mean of scalar nodes (used to average per-sample terms over a batch).
pub fn mean_vars(tape: &mut Tape, vars: &[Var]) -> Var {
    assert!(!vars.is_empty(), "cannot average zero terms");
    let mut acc = vars[0];
    for v in &vars[1..] {
        acc = tape.add(acc, *v);
    }
    tape.affine(acc, 1.0 / vars.len() as f64, 0.0)
}

/// Generator's adversarial term: −mean log D(fake pair).
pub fn generator_adversarial_loss(tape: &mut Tape, d_fake: &[Var]) -> Var {
    let logs: Vec<Var> = d_fake
        .iter()
        .map(|d| tape.clamped_log(*d, LOG_EPS))
        .collect();
    let m = mean_vars(tape, &logs);
    tape.affine(m, -1.0, 0.0)
}

/// Discriminator loss: −mean[log D(real pair) + log(1 − D(fake pair))].
pub fn discriminator_loss(tape: &mut Tape, d_real: &[Var], d_fake: &[Var]) -> Var {
    assert_eq!(d_real.len(), d_fake.len(), "real/fake batches must pair up");
    let terms: Vec<Var> = d_real
        .iter()
        .zip(d_fake)
        .map(|(r, f)| {
            let log_r = tape.clamped_log(*r, LOG_EPS);
            let one_minus_f = tape.affine(*f, -1.0, 1.0);
            let log_not_f = tape.clamped_log(one_minus_f, LOG_EPS);
            tape.add(log_r, log_not_f)
        })
        .collect();
    let m = mean_vars(tape, &terms);
    tape.affine(m, -1.0, 0.0)
}

/// Batch-averaged term nodes ready for composition. Disabled terms are
/// `None` and report as zero.
pub struct TermVars {
    pub l_r: Var,
    pub l_rfl: Option<Var>,
    pub l_pcl: Option<Var>,
    pub l_g: Option<Var>,
    pub lambda_r: f64,
}

/// Sums the enabled terms into the total loss and reads every term's value
/// back off the tape.
pub fn compose_total(
    tape: &mut Tape,
    terms: &TermVars,
    weights: &LossWeights,
) -> (Var, LossReport) {
    let scalar = |tape: &Tape, v: Var| tape.value(v).scalar_value();
    let mut total = terms.l_r;
    if let Some(rfl) = terms.l_rfl {
        total = tape.add(total, rfl);
    }
    if let Some(pcl) = terms.l_pcl {
        total = tape.add(total, pcl);
    }
    if let Some(g) = terms.l_g {
        let weighted = tape.affine(g, weights.lambda_g, 0.0);
        total = tape.add(total, weighted);
    }
    let report = LossReport {
        l_r: scalar(tape, terms.l_r),
        l_rfl: terms.l_rfl.map_or(0.0, |v| scalar(tape, v)),
        l_pcl: terms.l_pcl.map_or(0.0, |v| scalar(tape, v)),
        l_g: terms.l_g.map_or(0.0, |v| scalar(tape, v)),
        lambda_r: terms.lambda_r,
        l_t: scalar(tape, total),
    };
    (total, report)
}
