//! Procedural synthetic faces: a small, fully deterministic stand-in corpus.
//!
//! An identity seed fixes the identity-bearing geometry and colors; a
//! variation seed only moves the face, changes the exposure, and blurs it
//! slightly. Images of one identity are therefore much closer to each other
//! than to images of other identities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::ImageTensor;
use crate::error::{Error, Result};

pub const MIN_SYNTH_SIZE: usize = 16;

/// Identity-bearing parameters, in units of the image side length.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceParams {
    pub background: [f64; 3],
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub iris: [f64; 3],
    pub lips: [f64; 3],
    pub center: (f64, f64),
    pub radii: (f64, f64),
    /// Fraction of the face height, from the top, covered by hair.
    pub hairline: f64,
    pub eye_height: f64,
    pub eye_spacing: f64,
    pub eye_radius: f64,
    pub brow_thickness: f64,
    pub nose_length: f64,
    pub nose_width: f64,
    pub mouth_height: f64,
    pub mouth_half_width: f64,
    pub mouth_curve: f64,
    pub mouth_thickness: f64,
}

/// Pose-like perturbations that leave identity untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationParams {
    /// Translation in units of the side length, each within +-0.05.
    pub shift: (f64, f64),
    /// Multiplicative exposure within [0.9, 1.1].
    pub brightness: f64,
    /// Gaussian smoothing sigma in pixels.
    pub blur_sigma: f64,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [uniform(rng, lo, hi), uniform(rng, lo, hi), uniform(rng, lo, hi)]
}

/// Deterministic identity parameters for `identity_seed`.
pub fn face_params(identity_seed: u64) -> FaceParams {
    let mut rng = ChaCha8Rng::seed_from_u64(identity_seed ^ 0x5EED_F00D_u64);
    let tone = uniform(&mut rng, 0.45, 0.95);
    let skin = [
        tone,
        tone * uniform(&mut rng, 0.6, 0.85),
        tone * uniform(&mut rng, 0.4, 0.7),
    ];
    let hair_level = uniform(&mut rng, 0.05, 0.7);
    let hair = [
        hair_level * uniform(&mut rng, 0.8, 1.2),
        hair_level * uniform(&mut rng, 0.6, 1.0),
        hair_level * uniform(&mut rng, 0.4, 0.9),
    ];
    let ry = uniform(&mut rng, 0.33, 0.42);
    FaceParams {
        background: color(&mut rng, 0.1, 0.9),
        skin,
        hair: hair.map(|v| v.min(1.0)),
        iris: color(&mut rng, 0.05, 0.6),
        lips: [
            uniform(&mut rng, 0.5, 0.9),
            uniform(&mut rng, 0.1, 0.35),
            uniform(&mut rng, 0.1, 0.35),
        ],
        center: (0.5 + uniform(&mut rng, -0.03, 0.03), 0.52 + uniform(&mut rng, -0.03, 0.03)),
        radii: (uniform(&mut rng, 0.26, 0.34), ry),
        hairline: uniform(&mut rng, 0.25, 0.45),
        eye_height: uniform(&mut rng, 0.05, 0.25),
        eye_spacing: uniform(&mut rng, 0.3, 0.5),
        eye_radius: uniform(&mut rng, 0.03, 0.06),
        brow_thickness: uniform(&mut rng, 0.01, 0.025),
        nose_length: uniform(&mut rng, 0.1, 0.2),
        nose_width: uniform(&mut rng, 0.015, 0.035),
        mouth_height: uniform(&mut rng, 0.35, 0.55),
        mouth_half_width: uniform(&mut rng, 0.07, 0.14),
        mouth_curve: uniform(&mut rng, -0.04, 0.04),
        mouth_thickness: uniform(&mut rng, 0.012, 0.03),
    }
}

/// Deterministic pose parameters for `variation_seed`.
pub fn variation_params(variation_seed: u64) -> VariationParams {
    let mut rng = ChaCha8Rng::seed_from_u64(variation_seed ^ 0xA11CE_u64);
    VariationParams {
        shift: (uniform(&mut rng, -0.05, 0.05), uniform(&mut rng, -0.05, 0.05)),
        brightness: uniform(&mut rng, 0.9, 1.1),
        blur_sigma: uniform(&mut rng, 0.0, 0.8),
    }
}

/// Anti-aliased coverage of a region with signed distance `d` (negative inside).
fn coverage(d: f64, pixel: f64) -> f64 {
    let t = (0.5 - d / pixel).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn ellipse_sd(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let q = ((x - cx) / rx).hypot((y - cy) / ry);
    (q - 1.0) * rx.min(ry)
}

fn blend(dst: &mut [f64; 3], src: [f64; 3], alpha: f64) {
    for c in 0..3 {
        dst[c] += (src[c] - dst[c]) * alpha;
    }
}

fn shade(c: [f64; 3], k: f64) -> [f64; 3] {
    c.map(|v| v * k)
}

fn render_pixel(p: &FaceParams, x: f64, y: f64, px: f64) -> [f64; 3] {
    let (cx, cy) = p.center;
    let (rx, ry) = p.radii;
    let mut out = p.background;

    // hair mass behind the face
    let hair_back = ellipse_sd(x, y, cx, cy - 0.04, rx * 1.12, ry * 1.1);
    let top = cy - ry + 2.0 * ry * p.hairline;
    blend(&mut out, p.hair, coverage(hair_back.max(y - top), px));

    blend(&mut out, p.skin, coverage(ellipse_sd(x, y, cx, cy, rx, ry), px));

    // fringe over the forehead
    let fringe = ellipse_sd(x, y, cx, cy, rx * 1.02, ry * 1.02).max(y - (top - 0.05 * ry));
    blend(&mut out, p.hair, coverage(fringe, px));

    let ey = cy - ry * p.eye_height;
    for side in [-1.0, 1.0] {
        let ex = cx + side * rx * p.eye_spacing;
        let er = p.eye_radius;
        // brow: a thin horizontal bar above the eye
        let bdx = (x - ex).abs() - er * 1.3;
        let bdy = (y - (ey - er * 1.8)).abs() - p.brow_thickness;
        blend(&mut out, p.hair, coverage(bdx.max(bdy), px));
        blend(&mut out, [0.95, 0.95, 0.95], coverage(ellipse_sd(x, y, ex, ey, er * 1.4, er), px));
        blend(&mut out, p.iris, coverage(((x - ex).hypot(y - ey)) - er * 0.7, px));
        blend(&mut out, [0.02, 0.02, 0.02], coverage(((x - ex).hypot(y - ey)) - er * 0.3, px));
    }

    // nose: tapered vertical wedge with a darker tip
    let ny0 = ey + 0.02;
    let ny1 = ny0 + ry * p.nose_length * 2.0;
    if y > ny0 - px && y < ny1 + px {
        let t = ((y - ny0) / (ny1 - ny0)).clamp(0.0, 1.0);
        let half = p.nose_width * (0.4 + 0.6 * t);
        let d = ((x - cx).abs() - half).max(ny0 - y).max(y - ny1);
        blend(&mut out, shade(p.skin, 0.8), coverage(d, px));
    }

    // mouth: curved band
    let my = cy + ry * p.mouth_height;
    let u = (x - cx) / p.mouth_half_width;
    let curve = my + p.mouth_curve * (u * u - 1.0);
    let d = ((y - curve).abs() - p.mouth_thickness).max((x - cx).abs() - p.mouth_half_width);
    blend(&mut out, p.lips, coverage(d, px));
    out
}

fn gaussian_blur(plane: &mut [f64], size: usize, sigma: f64) {
    if sigma < 0.05 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let tap = |src: &[f64], idx: &dyn Fn(isize) -> usize| -> f64 {
        kernel
            .iter()
            .enumerate()
            .map(|(k, w)| w * src[idx(k as isize - radius)])
            .sum::<f64>()
            / norm
    };
    let clampi = |v: isize| v.clamp(0, size as isize - 1) as usize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = tap(plane, &|o| y * size + clampi(x as isize + o));
        }
    }
    for y in 0..size {
        for x in 0..size {
            plane[y * size + x] = tap(&tmp, &|o| clampi(y as isize + o) * size + x);
        }
    }
}

/// Renders a face at `size x size` pixels into `[0, 1]`.
pub fn render_face(face: &FaceParams, var: &VariationParams, size: usize) -> Result<ImageTensor> {
    if size < MIN_SYNTH_SIZE {
        return Err(Error::Size(format!(
            "synthetic faces need size >= {MIN_SYNTH_SIZE}, got {size}"
        )));
    }
    let px = 1.0 / size as f64;
    let mut planes = vec![0.0f64; 3 * size * size];
    for yi in 0..size {
        for xi in 0..size {
            let x = (xi as f64 + 0.5) * px - var.shift.0;
            let y = (yi as f64 + 0.5) * px - var.shift.1;
            let rgb = render_pixel(face, x, y, px);
            for c in 0..3 {
                planes[(c * size + yi) * size + xi] = (rgb[c] * var.brightness).clamp(0.0, 1.0);
            }
        }
    }
    for c in 0..3 {
        gaussian_blur(&mut planes[c * size * size..(c + 1) * size * size], size, var.blur_sigma);
    }
    ImageTensor::from_unit_f64(size, size, &planes)
}

/// Deterministic synthetic face for an (identity, variation) seed pair.
pub fn synth_face(identity_seed: u64, variation_seed: u64, size: usize) -> Result<ImageTensor> {
    render_face(
        &face_params(identity_seed),
        &variation_params(variation_seed),
        size,
    )
}

/// SplitMix64 finalizer; derives well-mixed sub-seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(b)
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l2(a: &ImageTensor, b: &ImageTensor) -> f64 {
        a.tensor()
            .data()
            .iter()
            .zip(b.tensor().data())
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn deterministic() {
        assert_eq!(synth_face(3, 4, 32).unwrap(), synth_face(3, 4, 32).unwrap());
    }

    #[test]
    fn variation_changes_pixels_not_identity() {
        let a = synth_face(3, 4, 32).unwrap();
        let b = synth_face(3, 5, 32).unwrap();
        assert!(a.mean_abs_diff(&b) > 0.0);
        assert_eq!(face_params(3), face_params(3));
        assert_ne!(face_params(3), face_params(4));
    }

    #[test]
    fn too_small_is_rejected() {
        assert!(matches!(synth_face(1, 1, 15), Err(Error::Size(_))));
    }

    #[test]
    fn within_identity_closer_than_between() {
        let (ids, vars) = (32u64, 8u64);
        let faces: Vec<Vec<ImageTensor>> = (0..ids)
            .map(|i| {
                (0..vars)
                    .map(|v| synth_face(mix_seed(7, i), mix_seed(mix_seed(7, i), v + 1), 32).unwrap())
                    .collect()
            })
            .collect();
        let (mut within, mut nw, mut between, mut nb) = (0.0, 0, 0.0, 0);
        for i in 0..ids as usize {
            for a in 0..vars as usize {
                for j in 0..ids as usize {
                    for b in 0..vars as usize {
                        if (i, a) >= (j, b) {
                            continue;
                        }
                        let d = l2(&faces[i][a], &faces[j][b]);
                        if i == j {
                            within += d;
                            nw += 1;
                        } else {
                            between += d;
                            nb += 1;
                        }
                    }
                }
            }
        }
        let (within, between) = (within / nw as f64, between / nb as f64);
        assert!(within < between, "within {within} between {between}");
    }
}
