//! MATLAB-compatible bicubic resampling.
//!
//! Reproduces `imresize(img, scale, 'bicubic')`: Keys cubic kernel with
//! `a = -0.5`, half-pixel aligned sample positions, symmetric border
//! extension, and (when downscaling with antialiasing) a kernel stretched by
//! `1/scale`. The operator is separable and linear, so it is materialised as
//! one weight matrix per axis and can be applied either to an
//! [`ImageTensor`] or, differentiably, to an `N×C×H×W` tensor.

use candle_core::Tensor;

use crate::error::{invalid_arg, shape_err, Result};
use crate::image::ImageTensor;

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    let ax2 = ax * ax;
    let ax3 = ax2 * ax;
    if ax <= 1.0 {
        1.5 * ax3 - 2.5 * ax2 + 1.0
    } else if ax <= 2.0 {
        -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

const KERNEL_WIDTH: f64 = 4.0;

/// Output length for resizing `len` by `scale`.
pub fn output_len(len: usize, scale: f64) -> usize {
    (len as f64 * scale).round() as usize
}

/// Resampling weights along one axis, stored sparsely per output sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisWeights {
    in_len: usize,
    taps: Vec<Vec<(usize, f64)>>,
}

impl AxisWeights {
    pub fn new(in_len: usize, out_len: usize, scale: f64, antialias: bool) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(invalid_arg!(
                "resize scale must be positive and finite, got {scale}"
            ));
        }
        if in_len == 0 || out_len == 0 {
            return Err(invalid_arg!(
                "resize lengths must be >= 1 ({in_len} -> {out_len})"
            ));
        }
        let shrink = scale < 1.0 && antialias;
        let width = if shrink {
            KERNEL_WIDTH / scale
        } else {
            KERNEL_WIDTH
        };
        let kernel = |x: f64| {
            if shrink {
                scale * cubic(scale * x)
            } else {
                cubic(x)
            }
        };
        let span = width.ceil() as i64 + 2;
        let period = 2 * in_len as i64;

        let taps = (1..=out_len)
            .map(|i| {
                // 1-based sample position in input coordinates.
                let u = i as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
                let left = (u - width / 2.0).floor() as i64;
                let raw: Vec<(i64, f64)> = (0..span)
                    .map(|k| (left + k, kernel(u - (left + k) as f64)))
                    .collect();
                let total: f64 = raw.iter().map(|(_, w)| w).sum();
                let mut merged: Vec<(usize, f64)> = Vec::with_capacity(raw.len());
                for (idx, w) in raw {
                    if w == 0.0 {
                        continue;
                    }
                    // symmetric extension: 1..n, n..1, repeating
                    let m = (idx - 1).rem_euclid(period);
                    let src = if m < in_len as i64 { m } else { period - 1 - m } as usize;
                    match merged.iter_mut().find(|(s, _)| *s == src) {
                        Some(slot) => slot.1 += w / total,
                        None => merged.push((src, w / total)),
                    }
                }
                merged.sort_by_key(|(s, _)| *s);
                merged
            })
            .collect();
        Ok(Self { in_len, taps })
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.taps.len()
    }

    pub fn taps(&self, out_index: usize) -> &[(usize, f64)] {
        &self.taps[out_index]
    }

    /// Row-major dense `out_len × in_len` matrix.
    pub fn dense(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.out_len() * self.in_len];
        for (i, row) in self.taps.iter().enumerate() {
            for &(j, w) in row {
                m[i * self.in_len + j] += w;
            }
        }
        m
    }
}

/// Separable bicubic resampler for a fixed input size and scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ResizeOperator {
    rows: AxisWeights,
    cols: AxisWeights,
}

impl ResizeOperator {
    pub fn new(in_height: usize, in_width: usize, scale: f64, antialias: bool) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(invalid_arg!(
                "resize scale must be positive and finite, got {scale}"
            ));
        }
        let (oh, ow) = (output_len(in_height, scale), output_len(in_width, scale));
        if oh < 1 || ow < 1 {
            return Err(invalid_arg!(
                "resizing {in_height}x{in_width} by {scale} gives an empty {oh}x{ow} image"
            ));
        }
        Ok(Self {
            rows: AxisWeights::new(in_height, oh, scale, antialias)?,
            cols: AxisWeights::new(in_width, ow, scale, antialias)?,
        })
    }

    pub fn input_dims(&self) -> (usize, usize) {
        (self.rows.in_len(), self.cols.in_len())
    }

    pub fn output_dims(&self) -> (usize, usize) {
        (self.rows.out_len(), self.cols.out_len())
    }

    pub fn row_weights(&self) -> &AxisWeights {
        &self.rows
    }

    pub fn col_weights(&self) -> &AxisWeights {
        &self.cols
    }

    pub fn apply(&self, img: &ImageTensor) -> Result<ImageTensor> {
        let (h, w, c) = img.dims();
        if (h, w) != self.input_dims() {
            return Err(shape_err!(
                "resize operator built for {:?}, got {h}x{w}",
                self.input_dims()
            ));
        }
        let (oh, ow) = self.output_dims();
        let src = img.data();
        // rows first, then columns; accumulate in f64
        let mut tmp = vec![0f64; oh * w * c];
        for i in 0..oh {
            for &(p, wt) in self.rows.taps(i) {
                let src_row = &src[p * w * c..(p + 1) * w * c];
                let dst_row = &mut tmp[i * w * c..(i + 1) * w * c];
                for (d, &s) in dst_row.iter_mut().zip(src_row) {
                    *d += wt * s as f64;
                }
            }
        }
        let mut out = vec![0f32; oh * ow * c];
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let acc: f64 = self
                        .cols
                        .taps(j)
                        .iter()
                        .map(|&(q, wt)| wt * tmp[(i * w + q) * c + ch])
                        .sum();
                    out[(i * ow + j) * c + ch] = acc as f32;
                }
            }
        }
        ImageTensor::new(oh, ow, c, out)
    }

    /// Applies the operator to the two trailing dimensions of an
    /// `N×C×H×W` tensor. Differentiable.
    pub fn apply_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if (h, w) != self.input_dims() {
            return Err(shape_err!(
                "resize operator built for {:?}, got {h}x{w}",
                self.input_dims()
            ));
        }
        let (oh, ow) = self.output_dims();
        let dtype = x.dtype();
        let dev = x.device();
        let rows = Tensor::from_vec(self.rows.dense(), (oh, h), dev)?.to_dtype(dtype)?;
        let cols_t = Tensor::from_vec(self.cols.dense(), (ow, w), dev)?
            .t()?
            .contiguous()?
            .to_dtype(dtype)?;
        let y = x.broadcast_matmul(&cols_t)?;
        Ok(rows.broadcast_matmul(&y)?)
    }
}

/// Resizes `img` by `scale` with MATLAB `imresize` bicubic semantics.
pub fn bicubic_resize(img: &ImageTensor, scale: f64, antialias: bool) -> Result<ImageTensor> {
    if scale == 1.0 {
        return Ok(img.clone());
    }
    ResizeOperator::new(img.height(), img.width(), scale, antialias)?.apply(img)
}

/// Differentiable bicubic resize of an `N×C×H×W` tensor.
pub fn bicubic_resize_tensor(x: &Tensor, scale: f64, antialias: bool) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    ResizeOperator::new(h, w, scale, antialias)?.apply_tensor(x)
}
