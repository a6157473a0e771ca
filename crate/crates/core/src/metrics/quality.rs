use crate::data::{ImageTensor, ValueRange};
use crate::error::{Error, Result};

/// PSNR returned for identical images.
pub const PSNR_CAP: f64 = 99.0;

fn check_pair(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::shape(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            a.tensor().shape(),
            b.tensor().shape()
        )));
    }
    if a.range() != ValueRange::Unit || b.range() != ValueRange::Unit {
        return Err(Error::Input("metrics take [0, 1] images".into()));
    }
    Ok(())
}

/// Mean squared error over every channel and pixel, in f64.
pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_pair(a, b)?;
    let (x, y) = (a.tensor().data(), b.tensor().data());
    let s: f64 = x.iter().zip(y).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum();
    Ok(s / x.len() as f64)
}

/// `10 log10(1 / MSE)` for unit-range images, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Rec. 601 luma planes, one per batch item, in the image's own scale.
pub(crate) fn luminance(image: &ImageTensor) -> Vec<Vec<f64>> {
    let (h, w) = (image.height(), image.width());
    let hw = h * w;
    image
        .tensor()
        .data()
        .chunks(3 * hw)
        .map(|item| {
            (0..hw)
                .map(|i| {
                    0.299 * item[i] as f64 + 0.587 * item[hw + i] as f64 + 0.114 * item[2 * hw + i] as f64
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window_size: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window_size: 11, sigma: 1.5, k1: 0.01, k2: 0.03 }
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, p: &SsimParams) -> f64 {
    let win = gaussian_window(p.window_size, p.sigma);
    let c1 = p.k1 * p.k1;
    let c2 = p.k2 * p.k2;
    let mu_a = filter_valid(a, h, w, &win);
    let mu_b = filter_valid(b, h, w, &win);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let e_aa = filter_valid(&prod(a, a), h, w, &win);
    let e_bb = filter_valid(&prod(b, b), h, w, &win);
    let e_ab = filter_valid(&prod(a, b), h, w, &win);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

/// Mean Gaussian-window SSIM on luma with dynamic range 1; batches average per image.
pub fn ssim_with(a: &ImageTensor, b: &ImageTensor, params: &SsimParams) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < params.window_size || w < params.window_size {
        return Err(Error::Size(format!(
            "{h}x{w} image is smaller than the {0}x{0} SSIM window",
            params.window_size
        )));
    }
    let (la, lb) = (luminance(a), luminance(b));
    let s: f64 = la.iter().zip(&lb).map(|(x, y)| ssim_plane(x, y, h, w, params)).sum();
    Ok(s / la.len() as f64)
}

pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    ssim_with(a, b, &SsimParams::default())
}
