//! In-memory images.
//!
//! [`ImageTensor`] is an `H×W×C` row-major buffer of `f32` intensities on a
//! nominal `[0, 1]` scale, with `C ∈ {1, 3}` (grayscale or RGB). Linear
//! operators such as the bicubic resampler may overshoot the nominal range
//! slightly; the type only enforces finiteness.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{invalid_arg, shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid_arg!(
                "image dimensions must be >= 1, got {height}x{width}"
            ));
        }
        if channels != 1 && channels != 3 {
            return Err(invalid_arg!(
                "image must have 1 or 3 channels, got {channels}"
            ));
        }
        if data.len() != height * width * channels {
            return Err(shape_err!(
                "buffer of {} values does not match {height}x{width}x{channels}",
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid_arg!("non-finite pixel value at flat index {pos}"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    /// Builds an image from a per-sample function of `(y, x, c)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.dims() == other.dims()
    }

    pub fn ensure_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(shape_err!("{:?} vs {:?}", self.dims(), other.dims()))
        }
    }

    /// Copies out a `h×w` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<ImageTensor> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(invalid_arg!(
                "crop {h}x{w}@({top},{left}) outside {}x{} image",
                self.height,
                self.width
            ));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(h * w * c);
        for y in top..top + h {
            let start = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Ok(ImageTensor {
            height: h,
            width: w,
            channels: c,
            data,
        })
    }

    /// Applies `f` to every sample.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<ImageTensor> {
        Self::new(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Elementwise `alpha·self + beta·other`.
    pub fn axpby(&self, alpha: f32, other: &ImageTensor, beta: f32) -> Result<ImageTensor> {
        self.ensure_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| alpha * a + beta * b)
            .collect();
        Self::new(self.height, self.width, self.channels, data)
    }

    pub fn clamp_unit(&self) -> ImageTensor {
        ImageTensor {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    /// Extracts one channel as a single-channel image.
    pub fn channel(&self, c: usize) -> Result<ImageTensor> {
        if c >= self.channels {
            return Err(invalid_arg!(
                "channel {c} out of range for {} channels",
                self.channels
            ));
        }
        let data = self
            .data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect();
        Self::new(self.height, self.width, 1, data)
    }

    /// Stacks the channels of `parts` in order.
    pub fn concat_channels(parts: &[&ImageTensor]) -> Result<Vec<f32>> {
        let first = parts
            .first()
            .ok_or_else(|| invalid_arg!("nothing to concatenate"))?;
        let (h, w) = (first.height, first.width);
        if parts.iter().any(|p| p.height != h || p.width != w) {
            return Err(shape_err!("spatial sizes differ in channel concatenation"));
        }
        let total: usize = parts.iter().map(|p| p.channels).sum();
        let mut out = Vec::with_capacity(h * w * total);
        for i in 0..h * w {
            for p in parts {
                out.extend_from_slice(&p.data[i * p.channels..(i + 1) * p.channels]);
            }
        }
        Ok(out)
    }

    /// BT.601 luma on the 0–255 scale, one value per pixel.
    pub fn luma_255(&self) -> Vec<f64> {
        match self.channels {
            1 => self.data.iter().map(|&v| v as f64 * 255.0).collect(),
            _ => self
                .data
                .chunks_exact(3)
                .map(|p| 255.0 * (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64))
                .collect(),
        }
    }

    /// The Y channel of ITU-R BT.601 YCbCr (studio swing, `[16, 235]/255`),
    /// as used by the usual super-resolution benchmark scripts.
    pub fn y_channel(&self) -> ImageTensor {
        let data = match self.channels {
            1 => self.data.clone(),
            _ => self
                .data
                .chunks_exact(3)
                .map(|p| {
                    ((16.0 + 65.481 * p[0] as f64 + 128.553 * p[1] as f64 + 24.966 * p[2] as f64)
                        / 255.0) as f32
                })
                .collect(),
        };
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Separable Gaussian blur with symmetric border extension.
    pub fn gaussian_blur(&self, sigma: f64) -> Result<ImageTensor> {
        if !(sigma > 0.0) {
            return Err(invalid_arg!("gaussian sigma must be positive, got {sigma}"));
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let norm: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= norm);

        let (h, w, c) = self.dims();
        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let period = 2 * n;
            let mut m = i.rem_euclid(period);
            if m >= n {
                m = period - 1 - m;
            }
            m as usize
        };
        let mut tmp = vec![0f64; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (k, &kw) in kernel.iter().enumerate() {
                        let xx = reflect(x as isize + k as isize - radius, w);
                        acc += kw * self.get(y, xx, ch) as f64;
                    }
                    tmp[(y * w + x) * c + ch] = acc;
                }
            }
        }
        let mut out = vec![0f32; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (k, &kw) in kernel.iter().enumerate() {
                        let yy = reflect(y as isize + k as isize - radius, h);
                        acc += kw * tmp[(yy * w + x) * c + ch];
                    }
                    out[(y * w + x) * c + ch] = acc as f32;
                }
            }
        }
        ImageTensor::new(h, w, c, out)
    }

    /// Reads an 8-bit PNG. Grayscale stays single-channel, anything else is
    /// converted to RGB.
    pub fn load_png(path: impl AsRef<Path>) -> Result<ImageTensor> {
        let path = path.as_ref();
        let reader = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?;
        let img = reader.decode()?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img.color() {
            image::ColorType::L8 | image::ColorType::L16 => {
                let buf = img.to_luma8();
                let data = buf.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
                ImageTensor::new(h, w, 1, data)
            }
            _ => {
                let buf = img.to_rgb8();
                let data = buf.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
                ImageTensor::new(h, w, 3, data)
            }
        }
    }

    /// Writes an 8-bit PNG, clamping to `[0, 1]` and rounding.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer(
            path.as_ref(),
            &bytes,
            self.width as u32,
            self.height as u32,
            color,
        )?;
        Ok(())
    }

    /// Packs images of identical shape into an `N×C×H×W` tensor.
    pub fn batch_to_tensor(
        images: &[&ImageTensor],
        dtype: DType,
        device: &Device,
    ) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| invalid_arg!("empty image batch"))?;
        let (h, w, c) = first.dims();
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if img.dims() != (h, w, c) {
                return Err(shape_err!(
                    "batch mixes {:?} and {:?}",
                    (h, w, c),
                    img.dims()
                ));
            }
            for ch in 0..c {
                data.extend(img.data.iter().skip(ch).step_by(c).map(|&v| v as f64));
            }
        }
        Ok(Tensor::from_vec(data, (images.len(), c, h, w), device)?.to_dtype(dtype)?)
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Self::batch_to_tensor(&[self], dtype, device)
    }

    /// Unpacks an `N×C×H×W` tensor into images.
    pub fn batch_from_tensor(t: &Tensor) -> Result<Vec<ImageTensor>> {
        let (n, c, h, w) = t.dims4()?;
        let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let plane = h * w;
        (0..n)
            .map(|i| {
                let base = i * c * plane;
                let mut data = vec![0f32; plane * c];
                for ch in 0..c {
                    for p in 0..plane {
                        data[p * c + ch] = flat[base + ch * plane + p];
                    }
                }
                ImageTensor::new(h, w, c, data)
            })
            .collect()
    }
}
