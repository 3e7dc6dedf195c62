//! Image quality metrics: PSNR, single-scale SSIM, and mean CIEDE2000.
//!
//! All metrics run on floating-point RGB in [0,1]. PSNR of identical images
//! is `+inf`, serialized as the string `"inf"` so reports stay valid JSON.
//! SSIM uses the canonical 11×11 Gaussian window (σ=1.5, K1=0.01, K2=0.03,
//! L=1), is computed per channel over valid window positions only (no
//! padding), and the channel means are averaged.

use serde::{Deserialize, Serialize};

use crate::color::mean_delta_e;
use crate::error::{Error, Result};
use crate::raster::RgbImage;
use crate::util::sha256_hex;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same_size(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::ShapeMismatch(format!(
            "metric needs equal sizes, got {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over all RGB samples; `+inf` when the
/// images are identical.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_same_size(a, b)?;
    let mse = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.as_slice().len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable Gaussian filter over valid positions: output is
/// `(h-win+1) x (w-win+1)`.
fn blur_valid(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let win = SSIM_WINDOW;
    let kernel = gaussian_window();
    let wv = w - win + 1;
    let hv = h - win + 1;
    // Horizontal pass over full height, then vertical pass.
    let mut horiz = vec![0.0; h * wv];
    for y in 0..h {
        for x in 0..wv {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * plane[y * w + x + k];
            }
            horiz[y * wv + x] = acc;
        }
    }
    let mut out = vec![0.0; hv * wv];
    for y in 0..hv {
        for x in 0..wv {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * horiz[(y + k) * wv + x];
            }
            out[y * wv + x] = acc;
        }
    }
    out
}

/// Structural similarity, averaged over channels and valid windows.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_same_size(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = h * w;
    let mut channel_means = [0.0; 3];
    for (ch, mean_slot) in channel_means.iter_mut().enumerate() {
        let x = &a.as_slice()[ch * n..(ch + 1) * n];
        let y = &b.as_slice()[ch * n..(ch + 1) * n];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(u, v)| u * v).collect();

        let mu_x = blur_valid(x, h, w);
        let mu_y = blur_valid(y, h, w);
        let m_xx = blur_valid(&xx, h, w);
        let m_yy = blur_valid(&yy, h, w);
        let m_xy = blur_valid(&xy, h, w);

        let mut total = 0.0;
        for i in 0..mu_x.len() {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let var_x = m_xx[i] - mx * mx;
            let var_y = m_yy[i] - my * my;
            let cov = m_xy[i] - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
        }
        *mean_slot = total / mu_x.len() as f64;
    }
    Ok((channel_means[0] + channel_means[1] + channel_means[2]) / 3.0)
}

/// Serialize PSNR values so `+inf` survives the trip through JSON.
pub mod psnr_serde {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str("inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = f64;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a number or \"inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<f64, E> {
                Ok(v)
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<f64, E> {
                Ok(v as f64)
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<f64, E> {
                Ok(v as f64)
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<f64, E> {
                match v {
                    "inf" => Ok(f64::INFINITY),
                    other => Err(E::custom(format!("unexpected psnr string {other:?}"))),
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// Metrics for one output/reference pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairMetrics {
    pub name: String,
    #[serde(with = "psnr_serde")]
    pub psnr: f64,
    pub ssim: f64,
    pub delta_e: f64,
}

/// Dataset evaluation: per-image metrics, their arithmetic means, and any
/// pairing warnings.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<PairMetrics>,
    #[serde(with = "psnr_serde")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_delta_e: f64,
    pub warnings: Vec<String>,
}

/// Runs all three metrics on one pair.
pub fn evaluate_pair(output: &RgbImage, reference: &RgbImage) -> Result<(f64, f64, f64)> {
    Ok((
        psnr(output, reference)?,
        ssim(output, reference)?,
        mean_delta_e(output, reference)?,
    ))
}

/// Evaluates name-paired outputs against references. Both lists are matched
/// in sorted-name order; a checksum over each side's name list catches
/// shuffled or mismatched pairings, which are reported as warnings rather
/// than errors.
pub fn evaluate_dataset(
    outputs: &[(String, RgbImage)],
    references: &[(String, RgbImage)],
    quantize_8bit: bool,
) -> Result<MetricReport> {
    if outputs.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "dataset sizes differ: {} outputs vs {} references",
            outputs.len(),
            references.len()
        )));
    }
    if outputs.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }

    let sorted = |side: &[(String, RgbImage)]| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..side.len()).collect();
        idx.sort_by(|&i, &j| side[i].0.cmp(&side[j].0));
        idx
    };
    let out_idx = sorted(outputs);
    let ref_idx = sorted(references);

    let mut warnings = Vec::new();
    let checksum = |side: &[(String, RgbImage)], idx: &[usize]| {
        let joined: String = idx
            .iter()
            .map(|&i| side[i].0.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        sha256_hex(joined.as_bytes())
    };
    if checksum(outputs, &out_idx) != checksum(references, &ref_idx) {
        warnings.push("output and reference name lists differ; pairing by sort order".into());
        for (&oi, &ri) in out_idx.iter().zip(&ref_idx) {
            if outputs[oi].0 != references[ri].0 {
                warnings.push(format!(
                    "paired {:?} with {:?}",
                    outputs[oi].0, references[ri].0
                ));
            }
        }
    }

    let mut per_image = Vec::with_capacity(outputs.len());
    let (mut sum_p, mut sum_s, mut sum_d) = (0.0, 0.0, 0.0);
    for (&oi, &ri) in out_idx.iter().zip(&ref_idx) {
        let (out, reference) = if quantize_8bit {
            (
                outputs[oi].1.quantized_8bit(),
                references[ri].1.quantized_8bit(),
            )
        } else {
            (outputs[oi].1.clone(), references[ri].1.clone())
        };
        let (p, s, d) = evaluate_pair(&out, &reference)?;
        sum_p += p;
        sum_s += s;
        sum_d += d;
        per_image.push(PairMetrics {
            name: outputs[oi].0.clone(),
            psnr: p,
            ssim: s,
            delta_e: d,
        });
    }
    let n = per_image.len() as f64;
    Ok(MetricReport {
        per_image,
        mean_psnr: sum_p / n,
        mean_ssim: sum_s / n,
        mean_delta_e: sum_d / n,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_from_seed;
    use rand::Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut rng = rng_from_seed(seed);
        RgbImage::from_fn(w, h, |_, _| {
            [
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
            ]
        })
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let img = random_image(8, 8, 1);
        assert_eq!(psnr(&img, &img).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_uniform_error_closed_form() {
        let a = RgbImage::from_fn(16, 16, |_, _| [0.4, 0.4, 0.4]);
        let b = RgbImage::from_fn(16, 16, |_, _| [0.5, 0.5, 0.5]);
        // MSE = 0.01 exactly, so PSNR = 10*log10(100) = 20 dB.
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_matches_loop_oracle() {
        let a = random_image(9, 7, 2);
        let b = random_image(9, 7, 3);
        let mut se = 0.0;
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            se += (x - y) * (x - y);
        }
        let oracle = 10.0 * (se / (9.0 * 7.0 * 3.0)).recip().log10();
        assert!((psnr(&a, &b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let base = random_image(16, 16, 4);
        let noisy = |amp: f64| {
            let mut rng = rng_from_seed(5);
            let mut img = base.clone();
            for v in img.as_mut_slice() {
                *v = (*v + amp * (rng.random_range(0.0..1.0) - 0.5)).clamp(0.0, 1.0);
            }
            img
        };
        let p1 = psnr(&noisy(0.01), &base).unwrap();
        let p2 = psnr(&noisy(0.05), &base).unwrap();
        let p3 = psnr(&noisy(0.1), &base).unwrap();
        assert!(p1 > p2 && p2 > p3, "{p1} {p2} {p3}");
    }

    #[test]
    fn psnr_rejects_size_mismatch() {
        let a = random_image(8, 8, 6);
        let b = random_image(8, 9, 6);
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn ssim_identical_is_one() {
        let img = random_image(16, 12, 7);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = random_image(16, 16, 8);
        let b = random_image(16, 16, 9);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn ssim_constant_shift_closed_form() {
        // Constant images: variances and covariance vanish in every window,
        // leaving only the luminance comparison.
        let a = RgbImage::from_fn(16, 16, |_, _| [0.25; 3]);
        let b = RgbImage::from_fn(16, 16, |_, _| [0.75; 3]);
        let c1 = SSIM_K1 * SSIM_K1;
        let expect = (2.0 * 0.25 * 0.75 + c1) / (0.25 * 0.25 + 0.75 * 0.75 + c1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn ssim_rejects_images_smaller_than_window() {
        let a = random_image(10, 16, 10);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn ssim_matches_direct_window_oracle() {
        // Independent oracle: direct 2-D weighted statistics per window, no
        // separable filtering, covariance accumulated against the means.
        let a = random_image(32, 32, 11);
        let b = random_image(32, 32, 12);

        let kernel = gaussian_window();
        let mut weights = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
        for ky in 0..SSIM_WINDOW {
            for kx in 0..SSIM_WINDOW {
                weights[ky][kx] = kernel[ky] * kernel[kx];
            }
        }
        let c1 = SSIM_K1 * SSIM_K1;
        let c2 = SSIM_K2 * SSIM_K2;
        let mut oracle = 0.0;
        for ch in 0..3 {
            let mut total = 0.0;
            let mut count = 0usize;
            for y0 in 0..=(32 - SSIM_WINDOW) {
                for x0 in 0..=(32 - SSIM_WINDOW) {
                    let (mut mx, mut my) = (0.0, 0.0);
                    for ky in 0..SSIM_WINDOW {
                        for kx in 0..SSIM_WINDOW {
                            mx += weights[ky][kx] * a.get(ch, y0 + ky, x0 + kx);
                            my += weights[ky][kx] * b.get(ch, y0 + ky, x0 + kx);
                        }
                    }
                    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                    for ky in 0..SSIM_WINDOW {
                        for kx in 0..SSIM_WINDOW {
                            let dx = a.get(ch, y0 + ky, x0 + kx) - mx;
                            let dy = b.get(ch, y0 + ky, x0 + kx) - my;
                            vx += weights[ky][kx] * dx * dx;
                            vy += weights[ky][kx] * dy * dy;
                            cov += weights[ky][kx] * dx * dy;
                        }
                    }
                    total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
            oracle += total / count as f64;
        }
        oracle /= 3.0;
        assert!((ssim(&a, &b).unwrap() - oracle).abs() < 1e-6);
    }

    #[test]
    fn dataset_report_means_and_identity() {
        let a = random_image(16, 16, 13);
        let b = random_image(16, 16, 14);
        let outputs = vec![
            ("x.png".to_string(), a.clone()),
            ("y.png".to_string(), b.clone()),
        ];
        let references = vec![
            ("x.png".to_string(), a.clone()),
            ("y.png".to_string(), a.clone()),
        ];
        let report = evaluate_dataset(&outputs, &references, false).unwrap();
        assert!(report.warnings.is_empty());
        assert_eq!(report.per_image.len(), 2);

        // First pair is identical.
        assert_eq!(report.per_image[0].psnr, f64::INFINITY);
        assert!((report.per_image[0].ssim - 1.0).abs() < 1e-12);
        assert_eq!(report.per_image[0].delta_e, 0.0);

        // Means are the arithmetic means of the per-image values.
        assert_eq!(report.mean_psnr, f64::INFINITY);
        let mean_ssim = (report.per_image[0].ssim + report.per_image[1].ssim) / 2.0;
        assert!((report.mean_ssim - mean_ssim).abs() < 1e-9);
        let mean_de = (report.per_image[0].delta_e + report.per_image[1].delta_e) / 2.0;
        assert!((report.mean_delta_e - mean_de).abs() < 1e-9);
    }

    #[test]
    fn dataset_checksum_flags_name_mismatch() {
        let a = random_image(16, 16, 15);
        let outputs = vec![
            ("a.png".to_string(), a.clone()),
            ("b.png".to_string(), a.clone()),
        ];
        let references = vec![
            ("a.png".to_string(), a.clone()),
            ("c.png".to_string(), a.clone()),
        ];
        let report = evaluate_dataset(&outputs, &references, false).unwrap();
        assert!(!report.warnings.is_empty());
        assert!(report.warnings.iter().any(|w| w.contains("b.png")));
    }

    #[test]
    fn dataset_rejects_count_mismatch() {
        let a = random_image(16, 16, 16);
        let outputs = vec![("a.png".to_string(), a.clone())];
        assert!(evaluate_dataset(&outputs, &[], false).is_err());
    }

    #[test]
    fn quantize_flag_changes_values_boundedly() {
        let a = random_image(16, 16, 17);
        let b = random_image(16, 16, 18);
        let outputs = vec![("a.png".to_string(), a.clone())];
        let references = vec![("a.png".to_string(), b.clone())];
        let float_report = evaluate_dataset(&outputs, &references, false).unwrap();
        let quant_report = evaluate_dataset(&outputs, &references, true).unwrap();
        // Quantization moves each sample by at most 1/510, so PSNR moves a
        // little but stays in the same regime.
        assert!((float_report.mean_psnr - quant_report.mean_psnr).abs() < 1.0);
        assert_ne!(float_report.mean_psnr, quant_report.mean_psnr);
    }

    #[test]
    fn psnr_serialization_round_trips_infinity() {
        let report = PairMetrics {
            name: "p".into(),
            psnr: f64::INFINITY,
            ssim: 1.0,
            delta_e: 0.0,
        };
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"inf\""));
        let back: PairMetrics = serde_json::from_str(&json).unwrap();
        assert_eq!(back.psnr, f64::INFINITY);

        let finite = PairMetrics {
            name: "q".into(),
            psnr: 31.25,
            ssim: 0.9,
            delta_e: 2.0,
        };
        let json = serde_json::to_string(&finite).unwrap();
        let back: PairMetrics = serde_json::from_str(&json).unwrap();
        assert_eq!(back.psnr, 31.25);
    }
}
