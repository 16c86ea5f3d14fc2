//! PSNR and SSIM on `[0, 1]` images.

use crate::error::{invalid_arg, Result};
use crate::image::ImageTensor;

/// `10·log10(1 / MSE)`; identical inputs give `+∞`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filtering of a single-channel plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean local SSIM (11×11 Gaussian window, σ = 1.5, data range 1),
/// averaged over channels. Only windows fully inside the image count.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (h, w, c) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid_arg!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        ));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = (0..h * w).map(|i| a.data()[i * c + ch] as f64).collect();
        let y: Vec<f64> = (0..h * w).map(|i| b.data()[i * c + ch] as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let (mx, oh, ow) = filter_valid(&x, h, w, &taps);
        let (my, ..) = filter_valid(&y, h, w, &taps);
        let (exx, ..) = filter_valid(&prod(&x, &x), h, w, &taps);
        let (eyy, ..) = filter_valid(&prod(&y, &y), h, w, &taps);
        let (exy, ..) = filter_valid(&prod(&x, &y), h, w, &taps);
        let mut sum = 0.0;
        for i in 0..oh * ow {
            let sxx = exx[i] - mx[i] * mx[i];
            let syy = eyy[i] - my[i] * my[i];
            let sxy = exy[i] - mx[i] * my[i];
            let num = (2.0 * mx[i] * my[i] + c1) * (2.0 * sxy + c2);
            let den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (sxx + syy + c2);
            sum += num / den;
        }
        total += sum / (oh * ow) as f64;
    }
    Ok(total / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(h: usize, w: usize, k: u32) -> ImageTensor {
        ImageTensor::from_fn(h, w, 3, |y, x, c| {
            ((y as u32 * 7 + x as u32 * 3 + c as u32 + k) % 13) as f32 / 12.0
        })
        .unwrap()
    }

    #[test]
    fn psnr_values() {
        let a = pattern(8, 8, 0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let z = ImageTensor::filled(4, 4, 1, 0.0).unwrap();
        let o = ImageTensor::filled(4, 4, 1, 1.0 / 255.0).unwrap();
        let expect = 20.0 * 255f64.log10();
        assert!((psnr(&z, &o).unwrap() - expect).abs() < 1e-4);
        let b = pattern(8, 8, 5);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn ssim_fixed_point_and_symmetry() {
        let a = pattern(16, 20, 0);
        let b = pattern(16, 20, 4);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let s = ssim(&a, &b).unwrap();
        assert!(s < 1.0);
        assert_eq!(s, ssim(&b, &a).unwrap());
        assert!(ssim(&pattern(10, 30, 0), &pattern(10, 30, 0)).is_err());
    }

    #[test]
    fn ssim_constant_images() {
        // only the luminance term survives: (2μν + C1) / (μ² + ν² + C1)
        let a = ImageTensor::filled(12, 12, 1, 0.5).unwrap();
        let b = ImageTensor::filled(12, 12, 1, 0.6).unwrap();
        let (m, n) = (0.5f32 as f64, 0.6f32 as f64);
        let c1 = 1e-4;
        let expect = (2.0 * m * n + c1) / (m * m + n * n + c1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn taps_normalized() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(t[0], t[10]);
    }
}
