//! LPIPS-style perceptual distance.
//!
//! Features from several layers are unit-normalized along channels, their
//! squared differences weighted per channel, averaged over space and summed
//! over layers. The pretrained backend uses VGG-16 with learned linear
//! weights; the proxy backend uses a seeded random stack with uniform weights
//! and needs no downloads.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{lpips_random_stack, lpips_vgg16_stack, pretrained_file, FeatureStack};
use crate::image::ImageTensor;

const NORM_EPS: f64 = 1e-10;
const SHIFT: [f64; 3] = [-0.030, -0.088, -0.188];
const SCALE: [f64; 3] = [0.458, 0.448, 0.450];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpipsBackend {
    /// VGG-16 with the published linear heads; needs weight files.
    Pretrained,
    /// Seeded random features, uniform weights. Stable across runs but not
    /// calibrated to human judgements.
    Proxy,
}

impl std::str::FromStr for LpipsBackend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrained" => Ok(Self::Pretrained),
            "proxy" => Ok(Self::Proxy),
            other => Err(Error::Config(format!(
                "unknown LPIPS backend {other:?} (pretrained or proxy)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Lpips {
    backend: LpipsBackend,
    stack: FeatureStack,
    /// One `1×C×1×1` weight tensor per tapped layer.
    weights: Vec<Tensor>,
}

impl Lpips {
    pub fn proxy(seed: u64) -> Result<Self> {
        let stack = lpips_random_stack(seed)?;
        let probe = Tensor::zeros((1, 3, 16, 16), DType::F64, &Device::Cpu)?;
        let weights = stack
            .forward_taps(&probe)?
            .iter()
            .map(|f| {
                let c = f.dims()[1];
                Ok(Tensor::full(1.0 / c as f64, (1, c, 1, 1), &Device::Cpu)?)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            backend: LpipsBackend::Proxy,
            stack,
            weights,
        })
    }

    /// Loads `vgg16.safetensors` and `lpips_vgg_lin.safetensors` from the
    /// weights directory.
    pub fn pretrained() -> Result<Self> {
        let stack = lpips_vgg16_stack()?;
        let lin_path = pretrained_file("lpips_vgg_lin.safetensors")?;
        let map = candle_core::safetensors::load(&lin_path, &Device::Cpu)?;
        let weights = (0..5)
            .map(|l| {
                let key = format!("lin{l}.model.1.weight");
                map.get(&key)
                    .ok_or_else(|| {
                        Error::BackendUnavailable(format!("{} lacks {key}", lin_path.display()))
                    })
                    .and_then(|t| Ok(t.to_dtype(DType::F32)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            backend: LpipsBackend::Pretrained,
            stack,
            weights,
        })
    }

    pub fn new(backend: LpipsBackend, seed: u64) -> Result<Self> {
        match backend {
            LpipsBackend::Pretrained => Self::pretrained(),
            LpipsBackend::Proxy => Self::proxy(seed),
        }
    }

    pub fn backend(&self) -> LpipsBackend {
        self.backend
    }

    fn prepare(&self, img: &ImageTensor) -> Result<Tensor> {
        if img.channels() != 3 {
            return Err(Error::Shape(format!(
                "LPIPS needs RGB input, got {} channels",
                img.channels()
            )));
        }
        let dtype = self.stack.params().dtype();
        let x = img.to_tensor(dtype, &Device::Cpu)?;
        match self.backend {
            LpipsBackend::Proxy => Ok(x),
            LpipsBackend::Pretrained => {
                let shift = Tensor::new(&SHIFT, &Device::Cpu)?
                    .to_dtype(dtype)?
                    .reshape((1, 3, 1, 1))?;
                let scale = Tensor::new(&SCALE, &Device::Cpu)?
                    .to_dtype(dtype)?
                    .reshape((1, 3, 1, 1))?;
                Ok(x.affine(2.0, -1.0)?
                    .broadcast_sub(&shift)?
                    .broadcast_div(&scale)?)
            }
        }
    }

    fn normalize(f: &Tensor) -> Result<Tensor> {
        let norm = f.sqr()?.sum_keepdim(1)?.sqrt()?;
        Ok(f.broadcast_div(&(norm + NORM_EPS)?)?)
    }

    pub fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
        a.ensure_same_shape(b)?;
        let fa = self.stack.forward_taps(&self.prepare(a)?)?;
        let fb = self.stack.forward_taps(&self.prepare(b)?)?;
        let mut total = 0.0;
        for ((x, y), w) in fa.iter().zip(&fb).zip(&self.weights) {
            let d = (Self::normalize(x)? - Self::normalize(y)?)?.sqr()?;
            let per_pixel = d.broadcast_mul(w)?.sum_keepdim(1)?;
            let v = per_pixel.mean(D::Minus1)?.mean(D::Minus1)?.sum_all()?;
            total += v.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
        Ok(total.max(0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(k: u32) -> ImageTensor {
        ImageTensor::from_fn(32, 32, 3, |y, x, c| {
            ((y as u32 * 5 + x as u32 * 11 + c as u32 * 3 + k) % 17) as f32 / 16.0
        })
        .unwrap()
    }

    #[test]
    fn proxy_basics() {
        let l = Lpips::proxy(0).unwrap();
        let a = img(0);
        assert_eq!(l.distance(&a, &a).unwrap(), 0.0);
        let d = l.distance(&a, &img(3)).unwrap();
        assert!(d > 0.0);
        assert_eq!(d, Lpips::proxy(0).unwrap().distance(&a, &img(3)).unwrap());
    }

    #[test]
    fn pretrained_missing_is_error() {
        if crate::features::weights_dir().is_some() {
            return;
        }
        assert!(matches!(
            Lpips::pretrained(),
            Err(Error::BackendUnavailable(_))
        ));
    }
}
