//! Color science: sRGB to CIELAB conversion and the CIEDE2000 color
//! difference, written once over a generic scalar so the plain metric path
//! and the derivative-carrying loss path execute the exact same arithmetic.
//!
//! Conventions:
//! - sRGB inputs are in [0, 1], D65 viewing, 2-degree observer.
//! - The XYZ white point is the row sum of the conversion matrix, which makes
//!   the chain self-consistent: (1,1,1) maps to exactly L*=100, a*=b*=0.
//! - Tiny epsilons inside the chroma square roots keep CIEDE2000 defined (and
//!   differentiable) at neutral colors; they perturb results by far less than
//!   the 1e-4 tolerance of the published verification data.

use crate::dual::{Dual3, Real};
use crate::error::{Error, Result};
use crate::raster::{PlaneImage, RgbImage};

/// Linear sRGB -> XYZ (D65), the standard IEC 61966-2-1 primaries.
pub const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

/// Reference white: exactly where the matrix sends (1, 1, 1).
pub const WHITE_POINT: [f64; 3] = [
    SRGB_TO_XYZ[0][0] + SRGB_TO_XYZ[0][1] + SRGB_TO_XYZ[0][2],
    SRGB_TO_XYZ[1][0] + SRGB_TO_XYZ[1][1] + SRGB_TO_XYZ[1][2],
    SRGB_TO_XYZ[2][0] + SRGB_TO_XYZ[2][1] + SRGB_TO_XYZ[2][2],
];

const LAB_DELTA3: f64 = 216.0 / 24389.0; // (6/29)^3
const LAB_SLOPE: f64 = 841.0 / 108.0; // 1 / (3 (6/29)^2)
const LAB_OFFSET: f64 = 4.0 / 29.0;

const POW25_7: f64 = 6103515625.0; // 25^7
const CHROMA_EPS: f64 = 1e-12;
const DEG: f64 = std::f64::consts::PI / 180.0;

fn linearize<T: Real>(c: T) -> T {
    if c.value() <= 0.04045 {
        c / T::constant(12.92)
    } else {
        ((c + T::constant(0.055)) / T::constant(1.055)).powf_const(2.4)
    }
}

fn lab_f<T: Real>(t: T) -> T {
    if t.value() > LAB_DELTA3 {
        t.cbrt()
    } else {
        t * T::constant(LAB_SLOPE) + T::constant(LAB_OFFSET)
    }
}

/// Gamma-encoded sRGB pixel to CIELAB `[L*, a*, b*]`.
pub fn srgb_to_lab_kernel<T: Real>(rgb: [T; 3]) -> [T; 3] {
    let lin = [linearize(rgb[0]), linearize(rgb[1]), linearize(rgb[2])];
    let mut fxyz = [T::constant(0.0); 3];
    for i in 0..3 {
        let coord = lin[0] * T::constant(SRGB_TO_XYZ[i][0])
            + lin[1] * T::constant(SRGB_TO_XYZ[i][1])
            + lin[2] * T::constant(SRGB_TO_XYZ[i][2]);
        fxyz[i] = lab_f(coord / T::constant(WHITE_POINT[i]));
    }
    [
        fxyz[1] * T::constant(116.0) - T::constant(16.0),
        (fxyz[0] - fxyz[1]) * T::constant(500.0),
        (fxyz[1] - fxyz[2]) * T::constant(200.0),
    ]
}

fn pow7<T: Real>(v: T) -> T {
    let v2 = v * v;
    let v3 = v2 * v;
    v3 * v3 * v
}

fn sin_deg<T: Real>(x: T) -> T {
    (x * T::constant(DEG)).sin()
}

fn cos_deg<T: Real>(x: T) -> T {
    (x * T::constant(DEG)).cos()
}

/// Hue angle in degrees in [0, 360).
fn hue_deg<T: Real>(b: T, a: T) -> T {
    let h = b.atan2(a) * T::constant(1.0 / DEG);
    if h.value() < 0.0 {
        h + T::constant(360.0)
    } else {
        h
    }
}

/// CIEDE2000 color difference (kL = kC = kH = 1).
///
/// Identical inputs give exactly 0 and the result is symmetric in its
/// arguments; both properties are exercised by tests.
pub fn ciede2000_kernel<T: Real>(lab1: [T; 3], lab2: [T; 3]) -> T {
    let c = T::constant;
    let (l1, a1, b1) = (lab1[0], lab1[1], lab1[2]);
    let (l2, a2, b2) = (lab2[0], lab2[1], lab2[2]);

    let c1 = (a1 * a1 + b1 * b1 + c(CHROMA_EPS)).sqrt();
    let c2 = (a2 * a2 + b2 * b2 + c(CHROMA_EPS)).sqrt();
    let cbar = (c1 + c2) * c(0.5);
    let cbar7 = pow7(cbar);
    // d/dC of sqrt(C^7/(C^7+25^7)) vanishes as C -> 0, so no guard needed.
    let g = (c(1.0) - (cbar7 / (cbar7 + c(POW25_7))).sqrt()) * c(0.5);

    let a1p = (c(1.0) + g) * a1;
    let a2p = (c(1.0) + g) * a2;
    let c1p = (a1p * a1p + b1 * b1 + c(CHROMA_EPS)).sqrt();
    let c2p = (a2p * a2p + b2 * b2 + c(CHROMA_EPS)).sqrt();
    let h1p = hue_deg(b1, a1p);
    let h2p = hue_deg(b2, a2p);

    let dl = l2 - l1;
    let dc = c2p - c1p;
    let hdiff = h2p.value() - h1p.value();
    let dh = if hdiff.abs() <= 180.0 {
        h2p - h1p
    } else if hdiff > 180.0 {
        h2p - h1p - c(360.0)
    } else {
        h2p - h1p + c(360.0)
    };
    let dhh = (c1p * c2p).sqrt() * sin_deg(dh * c(0.5)) * c(2.0);

    let lbar = (l1 + l2) * c(0.5);
    let cbarp = (c1p + c2p) * c(0.5);
    let hsum = h1p + h2p;
    let hbar = if hdiff.abs() <= 180.0 {
        hsum * c(0.5)
    } else if hsum.value() < 360.0 {
        (hsum + c(360.0)) * c(0.5)
    } else {
        (hsum - c(360.0)) * c(0.5)
    };

    let t = c(1.0) - cos_deg(hbar - c(30.0)) * c(0.17)
        + cos_deg(hbar * c(2.0)) * c(0.24)
        + cos_deg(hbar * c(3.0) + c(6.0)) * c(0.32)
        - cos_deg(hbar * c(4.0) - c(63.0)) * c(0.20);

    let hb = (hbar - c(275.0)) / c(25.0);
    let dtheta = (-(hb * hb)).exp() * c(30.0);
    let cbarp7 = pow7(cbarp);
    let rc = (cbarp7 / (cbarp7 + c(POW25_7))).sqrt() * c(2.0);
    let rt = -sin_deg(dtheta * c(2.0)) * rc;

    let lm = lbar - c(50.0);
    let sl = c(1.0) + lm * lm * c(0.015) / (lm * lm + c(20.0)).sqrt();
    let sc = c(1.0) + cbarp * c(0.045);
    let sh = c(1.0) + cbarp * t * c(0.015);

    let x = dl / sl;
    let y = dc / sc;
    let z = dhh / sh;
    (x * x + y * y + z * z + rt * y * z).sqrt_or_zero()
}

pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    srgb_to_lab_kernel::<f64>(rgb)
}

pub fn ciede2000(lab1: [f64; 3], lab2: [f64; 3]) -> f64 {
    ciede2000_kernel::<f64>(lab1, lab2)
}

/// CIEDE2000 between two gamma-encoded sRGB pixels.
pub fn delta_e_rgb(rgb1: [f64; 3], rgb2: [f64; 3]) -> f64 {
    ciede2000(srgb_to_lab(rgb1), srgb_to_lab(rgb2))
}

/// CIEDE2000 of an sRGB pixel against a fixed Lab reference, plus its
/// gradient with respect to the three sRGB components. Used by the color
/// loss; the value path is bit-identical to [`delta_e_rgb`].
pub fn delta_e_with_grad(rgb: [f64; 3], lab_ref: [f64; 3]) -> (f64, [f64; 3]) {
    let lab = srgb_to_lab_kernel([
        Dual3::var(rgb[0], 0),
        Dual3::var(rgb[1], 1),
        Dual3::var(rgb[2], 2),
    ]);
    let reference = [
        Dual3::constant(lab_ref[0]),
        Dual3::constant(lab_ref[1]),
        Dual3::constant(lab_ref[2]),
    ];
    let de = ciede2000_kernel(lab, reference);
    (de.v, de.d)
}

/// Per-pixel Lab triples in row-major order.
pub fn image_to_lab(img: &RgbImage) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(img.width() * img.height());
    for y in 0..img.height() {
        for x in 0..img.width() {
            out.push(srgb_to_lab(img.pixel(y, x)));
        }
    }
    out
}

/// Per-pixel CIEDE2000 between two same-sized images.
pub fn delta_e_map(a: &RgbImage, b: &RgbImage) -> Result<PlaneImage> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::ShapeMismatch(format!(
            "delta-E map needs equal sizes, got {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let mut map = PlaneImage::zeros(a.width(), a.height());
    for y in 0..a.height() {
        for x in 0..a.width() {
            let d = ciede2000(srgb_to_lab(a.pixel(y, x)), srgb_to_lab(b.pixel(y, x)));
            map.set(y, x, d);
        }
    }
    Ok(map)
}

/// Mean of the per-pixel CIEDE2000 map (fixed summation order).
pub fn mean_delta_e(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    let map = delta_e_map(a, b)?;
    let n = (a.width() * a.height()) as f64;
    Ok(map.as_slice().iter().sum::<f64>() / n)
}

/// Published CIEDE2000 verification pairs: (Lab1, Lab2, expected dE00).
/// Every row has been cross-checked against an independent
/// implementation to below 1e-4 before being frozen here.
pub const CIEDE2000_CASES: [([f64; 3], [f64; 3], f64); 34] = [
    ([50.0, 2.6772, -79.7751], [50.0, 0.0, -82.7485], 2.0425),
    ([50.0, 3.1571, -77.2803], [50.0, 0.0, -82.7485], 2.8615),
    ([50.0, 2.8361, -74.0200], [50.0, 0.0, -82.7485], 3.4412),
    ([50.0, -1.3802, -84.2814], [50.0, 0.0, -82.7485], 1.0000),
    ([50.0, -1.1848, -84.8006], [50.0, 0.0, -82.7485], 1.0000),
    ([50.0, -0.9009, -85.5211], [50.0, 0.0, -82.7485], 1.0000),
    ([50.0, 0.0, 0.0], [50.0, -1.0, 2.0], 2.3669),
    ([50.0, -1.0, 2.0], [50.0, 0.0, 0.0], 2.3669),
    ([50.0, 2.49, -0.001], [50.0, -2.49, 0.0009], 7.1792),
    ([50.0, 2.49, -0.001], [50.0, -2.49, 0.0010], 7.1792),
    ([50.0, 2.49, -0.001], [50.0, -2.49, 0.0011], 7.2195),
    ([50.0, 2.49, -0.001], [50.0, -2.49, 0.0012], 7.2195),
    ([50.0, -0.001, 2.49], [50.0, 0.0009, -2.49], 4.8045),
    ([50.0, -0.001, 2.49], [50.0, 0.0010, -2.49], 4.8045),
    ([50.0, -0.001, 2.49], [50.0, 0.0011, -2.49], 4.7461),
    ([50.0, 2.5, 0.0], [50.0, 0.0, -2.5], 4.3065),
    ([50.0, 2.5, 0.0], [73.0, 25.0, -18.0], 27.1492),
    ([50.0, 2.5, 0.0], [61.0, -5.0, 29.0], 22.8977),
    ([50.0, 2.5, 0.0], [56.0, -27.0, -3.0], 31.9030),
    ([50.0, 2.5, 0.0], [58.0, 24.0, 15.0], 19.4535),
    ([50.0, 2.5, 0.0], [50.0, 3.1736, 0.5854], 1.0000),
    ([50.0, 2.5, 0.0], [50.0, 3.2972, 0.0], 1.0000),
    ([50.0, 2.5, 0.0], [50.0, 1.8634, 0.5757], 1.0000),
    ([50.0, 2.5, 0.0], [50.0, 3.2592, 0.3350], 1.0000),
    (
        [60.2574, -34.0099, 36.2677],
        [60.4626, -34.1751, 39.4387],
        1.2644,
    ),
    (
        [63.0109, -31.0961, -5.8663],
        [62.8187, -29.7946, -4.0864],
        1.2630,
    ),
    (
        [61.2901, 3.7196, -5.3901],
        [61.4292, 2.2480, -4.9620],
        1.8731,
    ),
    (
        [35.0831, -44.1164, 3.7933],
        [35.0232, -40.0716, 1.5901],
        1.8645,
    ),
    (
        [22.7233, 20.0904, -46.6940],
        [23.0331, 14.9730, -42.5619],
        2.0373,
    ),
    (
        [36.4612, 47.8580, 18.3852],
        [36.2715, 50.5065, 21.2231],
        1.4146,
    ),
    (
        [90.8027, -2.0831, 1.4410],
        [91.1528, -1.6435, 0.0447],
        1.4441,
    ),
    (
        [90.9257, -0.5406, -0.9208],
        [88.6381, -0.8985, -0.7239],
        1.5381,
    ),
    (
        [6.7747, -0.2908, -2.4247],
        [5.8714, -0.0985, -2.2286],
        0.6377,
    ),
    (
        [2.0776, 0.0795, -1.1350],
        [0.9033, -0.0636, -0.5514],
        0.9082,
    ),
];
