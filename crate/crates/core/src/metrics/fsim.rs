//! Feature similarity index: phase congruency from log-Gabor filters plus
//! gradient-magnitude similarity, pooled by the larger phase congruency.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::quality::luminance;
use crate::data::{ImageTensor, ValueRange};
use crate::error::{Error, Result};

/// Phase-congruency and pooling constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FsimParams {
    pub nscale: usize,
    pub norient: usize,
    pub min_wavelength: f64,
    pub mult: f64,
    pub sigma_on_f: f64,
    pub d_theta_on_sigma: f64,
    /// Noise threshold in standard deviations above the mean noise energy.
    pub k: f64,
    pub epsilon: f64,
    pub t1: f64,
    pub t2: f64,
}

impl Default for FsimParams {
    fn default() -> Self {
        Self {
            nscale: 4,
            norient: 4,
            min_wavelength: 6.0,
            mult: 2.0,
            sigma_on_f: 0.55,
            d_theta_on_sigma: 1.2,
            k: 2.0,
            epsilon: 1e-4,
            t1: 0.85,
            t2: 160.0,
        }
    }
}

/// Guard for the final ratio when neither image has any phase congruency.
const POOL_EPS: f64 = 1e-12;

struct Fft2 {
    rows: usize,
    cols: usize,
    row_fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    col_fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    row_inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
    col_inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl Fft2 {
    fn new(rows: usize, cols: usize) -> Self {
        let mut p = FftPlanner::new();
        Self {
            rows,
            cols,
            row_fwd: p.plan_fft_forward(cols),
            col_fwd: p.plan_fft_forward(rows),
            row_inv: p.plan_fft_inverse(cols),
            col_inv: p.plan_fft_inverse(rows),
        }
    }

    fn run(&self, data: &mut [Complex64], inverse: bool) {
        let (r, c) = (self.rows, self.cols);
        let (rf, cf) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        for row in data.chunks_mut(c) {
            rf.process(row);
        }
        let mut col = vec![Complex64::new(0.0, 0.0); r];
        for x in 0..c {
            for y in 0..r {
                col[y] = data[y * c + x];
            }
            cf.process(&mut col);
            for y in 0..r {
                data[y * c + x] = col[y];
            }
        }
        if inverse {
            let s = 1.0 / (r * c) as f64;
            for v in data.iter_mut() {
                *v *= s;
            }
        }
    }
}

/// Normalized frequency coordinates along one axis, in unshifted (FFT) order.
fn freq_axis(n: usize) -> Vec<f64> {
    let centered: Vec<f64> = if n % 2 == 1 {
        let d = (n as f64 - 1.0).max(1.0);
        (0..n).map(|i| (i as f64 - (n as f64 - 1.0) / 2.0) / d).collect()
    } else {
        (0..n).map(|i| (i as f64 - (n / 2) as f64) / n as f64).collect()
    };
    // ifftshift: element k of the result is centered[(k + floor(n/2)) % n]
    (0..n).map(|k| centered[(k + n / 2) % n]).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Phase congruency map of a luma plane.
pub fn phase_congruency(im: &[f64], rows: usize, cols: usize, p: &FsimParams) -> Vec<f64> {
    let n = rows * cols;
    let fft = Fft2::new(rows, cols);
    let mut image_fft: Vec<Complex64> = im.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft.run(&mut image_fft, false);

    let xs = freq_axis(cols);
    let ys = freq_axis(rows);
    let mut radius = vec![0.0; n];
    let mut sin_t = vec![0.0; n];
    let mut cos_t = vec![0.0; n];
    let mut lowpass = vec![0.0; n];
    for y in 0..rows {
        for x in 0..cols {
            let i = y * cols + x;
            let r = xs[x].hypot(ys[y]);
            let theta = (-ys[y]).atan2(xs[x]);
            lowpass[i] = 1.0 / (1.0 + (r / 0.45).powi(30));
            radius[i] = r;
            sin_t[i] = theta.sin();
            cos_t[i] = theta.cos();
        }
    }
    radius[0] = 1.0;

    let log_sigma2 = 2.0 * p.sigma_on_f.ln().powi(2);
    let log_gabor: Vec<Vec<f64>> = (0..p.nscale)
        .map(|s| {
            let fo = 1.0 / (p.min_wavelength * p.mult.powi(s as i32));
            let mut g: Vec<f64> = (0..n)
                .map(|i| (-(radius[i] / fo).ln().powi(2) / log_sigma2).exp() * lowpass[i])
                .collect();
            g[0] = 0.0;
            g
        })
        .collect();

    let theta_sigma = PI / p.norient as f64 / p.d_theta_on_sigma;
    let mut energy_all = vec![0.0; n];
    let mut an_all = vec![0.0; n];
    for o in 0..p.norient {
        let angle = o as f64 * PI / p.norient as f64;
        let (sa, ca) = angle.sin_cos();
        let spread: Vec<f64> = (0..n)
            .map(|i| {
                let ds = sin_t[i] * ca - cos_t[i] * sa;
                let dc = cos_t[i] * ca + sin_t[i] * sa;
                let dt = ds.atan2(dc).abs();
                (-dt * dt / (2.0 * theta_sigma * theta_sigma)).exp()
            })
            .collect();
        let mut sum_e = vec![0.0; n];
        let mut sum_o = vec![0.0; n];
        let mut sum_an = vec![0.0; n];
        let mut eo_all: Vec<Vec<Complex64>> = Vec::with_capacity(p.nscale);
        let mut ifft_filters: Vec<Vec<f64>> = Vec::with_capacity(p.nscale);
        let mut em_n = 0.0;
        for (s, lg) in log_gabor.iter().enumerate() {
            let filter: Vec<f64> = lg.iter().zip(&spread).map(|(a, b)| a * b).collect();
            let mut f_spatial: Vec<Complex64> = filter.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft.run(&mut f_spatial, true);
            let sq = (n as f64).sqrt();
            ifft_filters.push(f_spatial.iter().map(|c| c.re * sq).collect());
            let mut eo: Vec<Complex64> = image_fft.iter().zip(&filter).map(|(c, &f)| c * f).collect();
            fft.run(&mut eo, true);
            for i in 0..n {
                sum_an[i] += eo[i].norm();
                sum_e[i] += eo[i].re;
                sum_o[i] += eo[i].im;
            }
            if s == 0 {
                em_n = filter.iter().map(|v| v * v).sum();
            }
            eo_all.push(eo);
        }
        let mut energy = vec![0.0; n];
        for i in 0..n {
            let xe = sum_e[i].hypot(sum_o[i]) + p.epsilon;
            let (me, mo) = (sum_e[i] / xe, sum_o[i] / xe);
            for eo in &eo_all {
                let (e, od) = (eo[i].re, eo[i].im);
                energy[i] += e * me + od * mo - (e * mo - od * me).abs();
            }
        }
        let median_e2n = median(eo_all[0].iter().map(|c| c.norm_sqr()).collect());
        let mean_e2n = -median_e2n / 0.5f64.ln();
        let noise_power = if em_n > 0.0 { mean_e2n / em_n } else { 0.0 };
        let sum_an2: f64 = ifft_filters.iter().flat_map(|f| f.iter().map(|v| v * v)).sum();
        let mut sum_aiaj = 0.0;
        for si in 0..p.nscale {
            for sj in si + 1..p.nscale {
                sum_aiaj += ifft_filters[si].iter().zip(&ifft_filters[sj]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let est_noise_energy2 = 2.0 * noise_power * sum_an2 + 4.0 * noise_power * sum_aiaj;
        let tau = (est_noise_energy2 / 2.0).sqrt();
        let est_noise = tau * (PI / 2.0).sqrt();
        let est_sigma = ((2.0 - PI / 2.0) * tau * tau).sqrt();
        let t = (est_noise + p.k * est_sigma) / 1.7;
        for i in 0..n {
            energy_all[i] += (energy[i] - t).max(0.0);
            an_all[i] += sum_an[i];
        }
    }
    energy_all
        .iter()
        .zip(&an_all)
        .map(|(&e, &a)| if a > 0.0 { e / a } else { 0.0 })
        .collect()
}

/// Scharr-type gradient magnitude with zero padding ("same" size).
fn gradient_magnitude(im: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= rows as isize || x >= cols as isize {
            0.0
        } else {
            im[y as usize * cols + x as usize]
        }
    };
    let mut out = vec![0.0; rows * cols];
    for y in 0..rows as isize {
        for x in 0..cols as isize {
            let gx = (3.0 * (at(y - 1, x + 1) - at(y - 1, x - 1))
                + 10.0 * (at(y, x + 1) - at(y, x - 1))
                + 3.0 * (at(y + 1, x + 1) - at(y + 1, x - 1)))
                / 16.0;
            let gy = (3.0 * (at(y + 1, x - 1) - at(y - 1, x - 1))
                + 10.0 * (at(y + 1, x) - at(y - 1, x))
                + 3.0 * (at(y + 1, x + 1) - at(y - 1, x + 1)))
                / 16.0;
            out[y as usize * cols + x as usize] = gx.hypot(gy);
        }
    }
    out
}

/// Box-average then decimate by `f` (top-left sample of each step), zero padding.
fn downsample_plane(im: &[f64], rows: usize, cols: usize, f: usize) -> (Vec<f64>, usize, usize) {
    if f == 1 {
        return (im.to_vec(), rows, cols);
    }
    // a centered f x f averaging window, as a "same" convolution
    let off = (f as isize - 1) / 2;
    let inv = 1.0 / (f * f) as f64;
    let (nr, nc) = ((rows + f - 1) / f, (cols + f - 1) / f);
    let mut out = Vec::with_capacity(nr * nc);
    for y in (0..rows).step_by(f) {
        for x in (0..cols).step_by(f) {
            let mut s = 0.0;
            for dy in 0..f as isize {
                for dx in 0..f as isize {
                    let (yy, xx) = (y as isize + dy - off, x as isize + dx - off);
                    if yy >= 0 && xx >= 0 && (yy as usize) < rows && (xx as usize) < cols {
                        s += im[yy as usize * cols + xx as usize];
                    }
                }
            }
            out.push(s * inv);
        }
    }
    (out, nr, nc)
}

fn fsim_plane(a: &[f64], b: &[f64], rows: usize, cols: usize, p: &FsimParams) -> f64 {
    let f = ((rows.min(cols) as f64 / 256.0).round() as usize).max(1);
    let (a, r, c) = downsample_plane(a, rows, cols, f);
    let (b, _, _) = downsample_plane(b, rows, cols, f);
    let pc1 = phase_congruency(&a, r, c, p);
    let pc2 = phase_congruency(&b, r, c, p);
    let g1 = gradient_magnitude(&a, r, c);
    let g2 = gradient_magnitude(&b, r, c);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..r * c {
        let pc_sim = (2.0 * pc1[i] * pc2[i] + p.t1) / (pc1[i] * pc1[i] + pc2[i] * pc2[i] + p.t1);
        let g_sim = (2.0 * g1[i] * g2[i] + p.t2) / (g1[i] * g1[i] + g2[i] * g2[i] + p.t2);
        let pcm = pc1[i].max(pc2[i]);
        num += g_sim * pc_sim * pcm;
        den += pcm;
    }
    (num + POOL_EPS) / (den + POOL_EPS)
}

/// FSIM on 8-bit-scaled luma; 1.0 for bit-equal inputs. Batches average per image.
pub fn fsim_with(a: &ImageTensor, b: &ImageTensor, params: &FsimParams) -> Result<f64> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::shape("fsim inputs differ in shape"));
    }
    if a.range() != ValueRange::Unit || b.range() != ValueRange::Unit {
        return Err(Error::Input("metrics take [0, 1] images".into()));
    }
    let (rows, cols) = (a.height(), a.width());
    let scale = |planes: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        planes.into_iter().map(|p| p.into_iter().map(|v| v * 255.0).collect()).collect()
    };
    let la = scale(luminance(a));
    let lb = scale(luminance(b));
    let mut total = 0.0;
    for (i, (x, y)) in la.iter().zip(&lb).enumerate() {
        total += if a.item(i).tensor().data() == b.item(i).tensor().data() {
            1.0
        } else {
            fsim_plane(x, y, rows, cols, params)
        };
    }
    Ok(total / la.len() as f64)
}

pub fn fsim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    fsim_with(a, b, &FsimParams::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_axis_matches_shifted_grid() {
        // even: [-2,-1,0,1]/4 shifted -> [0,1,-2,-1]/4
        assert_eq!(freq_axis(4), vec![0.0, 0.25, -0.5, -0.25]);
        // odd: [-1,0,1]/2 shifted -> [0,1,-1]/2
        assert_eq!(freq_axis(3), vec![0.0, 0.5, -0.5]);
    }

    #[test]
    fn median_even_averages() {
        assert_eq!(median(vec![4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
    }

    #[test]
    fn constant_plane_has_no_congruency() {
        let pc = phase_congruency(&vec![7.0; 64], 8, 8, &FsimParams::default());
        assert!(pc.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_edge_has_congruency() {
        let mut im = vec![0.0; 32 * 32];
        for y in 0..32 {
            for x in 16..32 {
                im[y * 32 + x] = 255.0;
            }
        }
        let pc = phase_congruency(&im, 32, 32, &FsimParams::default());
        let edge = pc[10 * 32 + 16].max(pc[10 * 32 + 15]);
        assert!(edge > 0.3, "edge {edge}");
        assert!(pc.iter().all(|v| (0.0..=1.0 + 1e-9).contains(v)));
    }

    #[test]
    fn gradient_of_ramp() {
        let im: Vec<f64> = (0..25).map(|i| (i % 5) as f64).collect();
        let g = gradient_magnitude(&im, 5, 5);
        // interior: (3 + 10 + 3) * 2 / 16 = 2
        assert!((g[2 * 5 + 2] - 2.0).abs() < 1e-12);
    }
}
