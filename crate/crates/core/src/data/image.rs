//! RGB image batches and the resampling kernels shared by the pipeline and metrics.

use std::path::Path;

use halluc_tensor::Tensor;
use image::{ImageReader, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Declared value range of an [`ImageTensor`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueRange {
    /// `[0, 1]`: storage and metrics.
    Unit,
    /// `[-1, 1]`: network input and output.
    Signed,
}

impl ValueRange {
    pub fn bounds(self) -> (f32, f32) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Signed => (-1.0, 1.0),
        }
    }
}

/// Batch of RGB images, `(batch, 3, height, width)`, with every value inside its range.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    tensor: Tensor<f32>,
    range: ValueRange,
}

impl ImageTensor {
    /// Validates layout and range; out-of-range or non-finite values are an error.
    pub fn new(tensor: Tensor<f32>, range: ValueRange) -> Result<Self> {
        let (n, c, h, w) = tensor.dims4()?;
        if c != 3 || n == 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "image tensors must be (n>=1, 3, h>=1, w>=1), got {:?}",
                tensor.shape()
            )));
        }
        let (lo, hi) = range.bounds();
        if let Some(v) = tensor.data().iter().find(|v| !(**v >= lo && **v <= hi)) {
            return Err(Error::Input(format!(
                "value {v} outside declared range [{lo}, {hi}]"
            )));
        }
        Ok(Self { tensor, range })
    }

    /// Clamps into `range` (NaN becomes the lower bound) and wraps.
    pub fn clamped(tensor: Tensor<f32>, range: ValueRange) -> Result<Self> {
        let (lo, hi) = range.bounds();
        let t = tensor.map(|v| if v.is_nan() { lo } else { v.clamp(lo, hi) });
        Self::new(t, range)
    }

    /// Single image from `(3, h, w)`-ordered f64 values, clamped to `[0, 1]`.
    pub fn from_unit_f64(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        let t = Tensor::new(
            &[1, 3, height, width],
            values.iter().map(|&v| v as f32).collect(),
        )?;
        Self::clamped(t, ValueRange::Unit)
    }

    pub fn constant(height: usize, width: usize, value: f32, range: ValueRange) -> Result<Self> {
        Self::new(Tensor::full(&[1, 3, height, width], value), range)
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.tensor
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn batch(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[3]
    }

    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> f32 {
        let (h, w) = (self.height(), self.width());
        self.tensor.data()[((b * 3 + c) * h + y) * w + x]
    }

    /// Maps into `range` by the affine map between `[0,1]` and `[-1,1]`.
    pub fn to_range(&self, range: ValueRange) -> ImageTensor {
        let t = match (self.range, range) {
            (a, b) if a == b => self.tensor.clone(),
            (ValueRange::Unit, ValueRange::Signed) => self.tensor.map(|v| (v * 2.0 - 1.0).clamp(-1.0, 1.0)),
            _ => self.tensor.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)),
        };
        ImageTensor { tensor: t, range }
    }

    pub fn item(&self, index: usize) -> ImageTensor {
        ImageTensor {
            tensor: self.tensor.select_batch(&[index]).expect("index in range"),
            range: self.range,
        }
    }

    pub fn items(&self) -> Vec<ImageTensor> {
        (0..self.batch()).map(|i| self.item(i)).collect()
    }

    /// Stacks images of equal size and range along the batch axis.
    pub fn stack(images: &[ImageTensor]) -> Result<ImageTensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Input("cannot stack zero images".into()))?;
        if images.iter().any(|i| i.range != first.range) {
            return Err(Error::Input("cannot stack images with different ranges".into()));
        }
        let parts: Vec<&Tensor<f32>> = images.iter().map(|i| &i.tensor).collect();
        Ok(ImageTensor {
            tensor: Tensor::concat_batch(&parts)?,
            range: first.range,
        })
    }

    /// Mean absolute difference over all elements.
    pub fn mean_abs_diff(&self, other: &ImageTensor) -> f64 {
        let a = self.tensor.data();
        let b = other.tensor.data();
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x as f64 - y as f64).abs())
            .sum::<f64>()
            / a.len() as f64
    }

    fn planes_f64(&self) -> Vec<f64> {
        self.tensor.to_f64_vec()
    }

    fn rebuild(&self, h: usize, w: usize, values: Vec<f64>) -> Result<ImageTensor> {
        let t = Tensor::new(
            &[self.batch(), 3, h, w],
            values.into_iter().map(|v| v as f32).collect(),
        )?;
        ImageTensor::clamped(t, self.range)
    }
}

/// Centered `size x size` crop; the offset rounds down when the margin is odd.
pub fn center_crop(image: &ImageTensor, size: usize) -> Result<ImageTensor> {
    let (h, w) = (image.height(), image.width());
    if h < size || w < size {
        return Err(Error::Size(format!(
            "source {h}x{w} is smaller than crop {size}x{size}"
        )));
    }
    let (oy, ox) = ((h - size) / 2, (w - size) / 2);
    let src = image.tensor.data();
    let mut out = Vec::with_capacity(image.batch() * 3 * size * size);
    for plane in 0..image.batch() * 3 {
        for y in 0..size {
            let row = (plane * h + oy + y) * w + ox;
            out.extend_from_slice(&src[row..row + size]);
        }
    }
    ImageTensor::new(Tensor::new(&[image.batch(), 3, size, size], out)?, image.range)
}

/// Area downsample by an integer factor: each output pixel is the f64 mean of
/// its `factor x factor` input block, rounded once to f32.
pub fn downsample_area(image: &ImageTensor, factor: usize) -> Result<ImageTensor> {
    let (h, w) = (image.height(), image.width());
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Size(format!(
            "{h}x{w} is not divisible by downsample factor {factor}"
        )));
    }
    if factor == 1 {
        return Ok(image.clone());
    }
    let (oh, ow) = (h / factor, w / factor);
    let src = image.tensor.data();
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = Vec::with_capacity(image.batch() * 3 * oh * ow);
    for plane in 0..image.batch() * 3 {
        let base = plane * h * w;
        for u in 0..oh {
            for v in 0..ow {
                let mut acc = 0.0f64;
                for dy in 0..factor {
                    let row = base + (u * factor + dy) * w + v * factor;
                    for &p in &src[row..row + factor] {
                        acc += p as f64;
                    }
                }
                out.push((acc * inv) as f32);
            }
        }
    }
    ImageTensor::new(Tensor::new(&[image.batch(), 3, oh, ow], out)?, image.range)
}

/// Source coordinate of output index `i` under half-pixel-center alignment.
fn source_coord(i: usize, factor: usize) -> f64 {
    (i as f64 + 0.5) / factor as f64 - 0.5
}

/// Bilinear upsample by an integer factor (half-pixel centers, edge clamp).
pub fn upsample_bilinear(image: &ImageTensor, factor: usize) -> Result<ImageTensor> {
    resample_separable(image, factor, 1, |t| {
        let t = t.abs();
        if t < 1.0 {
            1.0 - t
        } else {
            0.0
        }
    })
}

/// Bicubic upsample by an integer factor (Keys kernel, a = -0.5, edge clamp),
/// clamped back into the value range.
pub fn upsample_bicubic(image: &ImageTensor, factor: usize) -> Result<ImageTensor> {
    const A: f64 = -0.5;
    resample_separable(image, factor, 2, |t| {
        let t = t.abs();
        if t <= 1.0 {
            ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
        } else if t < 2.0 {
            ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
        } else {
            0.0
        }
    })
}

fn resample_separable(
    image: &ImageTensor,
    factor: usize,
    support: isize,
    kernel: impl Fn(f64) -> f64,
) -> Result<ImageTensor> {
    if factor == 0 {
        return Err(Error::Size("upsample factor must be positive".into()));
    }
    let (h, w) = (image.height(), image.width());
    let (oh, ow) = (h * factor, w * factor);
    let taps = |n_in: usize, n_out: usize| -> Vec<Vec<(usize, f64)>> {
        (0..n_out)
            .map(|i| {
                let x = source_coord(i, factor);
                let base = x.floor() as isize;
                let mut t: Vec<(usize, f64)> = ((base - support + 1)..=(base + support))
                    .map(|j| {
                        let wgt = kernel(x - j as f64);
                        (j.clamp(0, n_in as isize - 1) as usize, wgt)
                    })
                    .filter(|(_, wgt)| *wgt != 0.0)
                    .collect();
                let s: f64 = t.iter().map(|(_, wgt)| wgt).sum();
                for (_, wgt) in &mut t {
                    *wgt /= s;
                }
                t
            })
            .collect()
    };
    let row_taps = taps(h, oh);
    let col_taps = taps(w, ow);
    let src = image.planes_f64();
    let mut out = Vec::with_capacity(image.batch() * 3 * oh * ow);
    for plane in 0..image.batch() * 3 {
        let p = &src[plane * h * w..(plane + 1) * h * w];
        // horizontal pass
        let mut tmp = vec![0.0; h * ow];
        for y in 0..h {
            for (x, t) in col_taps.iter().enumerate() {
                tmp[y * ow + x] = t.iter().map(|&(j, wgt)| p[y * w + j] * wgt).sum();
            }
        }
        for t in &row_taps {
            for x in 0..ow {
                out.push(t.iter().map(|&(j, wgt)| tmp[j * ow + x] * wgt).sum());
            }
        }
    }
    image.rebuild(oh, ow, out)
}

/// Decodes an 8-bit RGB file into a single `[0, 1]` image (`value / 255`).
pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader
        .decode()
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    ImageTensor::new(Tensor::new(&[1, 3, h, w], data)?, ValueRange::Unit)
}

/// Writes batch item `index` as 8-bit lossless PNG (`round(value * 255)`).
pub fn write_image(image: &ImageTensor, index: usize, path: &Path) -> Result<()> {
    let img = image.item(index).to_range(ValueRange::Unit);
    let (h, w) = (img.height(), img.width());
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| (img.get(0, c, y, x) * 255.0).round().clamp(0.0, 255.0) as u8);
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    out.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Decode {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
}
