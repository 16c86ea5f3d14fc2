//! Training objectives: content (strict L1 or cycle-consistency), perceptual,
//! relativistic-average adversarial, and their weighted combination.
//!
//! Tensor functions return scalar tensors so gradients flow; the
//! `ImageTensor` wrappers evaluate in `f64` and return plain numbers.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::ResizeOperator;
use crate::error::{shape_err, Error, Result};
use crate::features::FeatureExtractor;
use crate::image::ImageTensor;
use crate::nn::ensure_finite;

/// How the content term compares the output with the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentMode {
    /// L1 against the ground-truth HR patch.
    StrictL1,
    /// L1 between the downsampled output and the LR input.
    Cycle,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptualMode {
    PretrainedFeatures,
    FixedRandomFeatures,
    Off,
}

/// Per-term coefficients: `total = w_content·content + lambda_gan·gan + w_percep·percep`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub content_mode: ContentMode,
    pub perceptual_mode: PerceptualMode,
    pub w_content: f64,
    pub lambda_gan: f64,
    pub w_percep: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::eq3(5e-3, 10.0)
    }
}

impl LossWeights {
    /// `L_percep + λ·L_GAN + η·L1` against the HR patch.
    pub fn eq1(lambda_gan: f64, eta: f64) -> Self {
        Self {
            content_mode: ContentMode::StrictL1,
            perceptual_mode: PerceptualMode::PretrainedFeatures,
            w_content: eta,
            lambda_gan,
            w_percep: 1.0,
        }
    }

    /// `L_cyc + λ·L_GAN + η·L_percep`.
    pub fn eq3(lambda_gan: f64, eta: f64) -> Self {
        Self {
            content_mode: ContentMode::Cycle,
            perceptual_mode: PerceptualMode::PretrainedFeatures,
            w_content: 1.0,
            lambda_gan,
            w_percep: eta,
        }
    }

    /// Strict-L1 objective with η = 10.
    pub fn eq1_pirm() -> Self {
        Self::eq1(5e-3, 10.0)
    }

    /// Strict-L1 objective with an L1 weight of 1e-2.
    pub fn eq1_released() -> Self {
        Self::eq1(5e-3, 1e-2)
    }

    pub fn eq3_default() -> Self {
        Self::eq3(5e-3, 10.0)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "eq1_pirm" => Ok(Self::eq1_pirm()),
            "eq1_released" => Ok(Self::eq1_released()),
            "eq3" => Ok(Self::eq3_default()),
            other => Err(Error::Config(format!(
                "unknown loss preset {other:?} (expected eq1_pirm, eq1_released or eq3)"
            ))),
        }
    }

    pub fn with_perceptual(mut self, mode: PerceptualMode) -> Self {
        self.perceptual_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w_content", self.w_content),
            ("lambda_gan", self.lambda_gan),
            ("w_percep", self.w_percep),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Coefficient actually applied to the content term (zero when disabled).
    pub fn effective_content(&self) -> f64 {
        if self.content_mode == ContentMode::None {
            0.0
        } else {
            self.w_content
        }
    }

    pub fn effective_percep(&self) -> f64 {
        if self.perceptual_mode == PerceptualMode::Off {
            0.0
        } else {
            self.w_percep
        }
    }
}

/// Unweighted loss terms of one generator step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub content: f64,
    pub gan: f64,
    pub percep: f64,
}

pub fn total_generator_loss(weights: &LossWeights, c: &LossComponents) -> Result<f64> {
    weights.validate()?;
    Ok(weights.effective_content() * c.content
        + weights.lambda_gan * c.gan
        + weights.effective_percep() * c.percep)
}

/// Tensor form of [`total_generator_loss`]; absent terms count as zero.
pub fn total_generator_loss_tensor(
    weights: &LossWeights,
    content: Option<&Tensor>,
    gan: Option<&Tensor>,
    percep: Option<&Tensor>,
) -> Result<Tensor> {
    weights.validate()?;
    let mut total: Option<Tensor> = None;
    for (t, w) in [
        (content, weights.effective_content()),
        (gan, weights.lambda_gan),
        (percep, weights.effective_percep()),
    ] {
        if let Some(t) = t {
            if w == 0.0 {
                continue;
            }
            let term = t.affine(w, 0.0)?;
            total = Some(match total {
                Some(acc) => (acc + term)?,
                None => term,
            });
        }
    }
    match total {
        Some(t) => Ok(t),
        None => {
            let like = content.or(gan).or(percep);
            let (dtype, dev) = like
                .map(|t| (t.dtype(), t.device().clone()))
                .unwrap_or((DType::F32, Device::Cpu));
            Ok(Tensor::zeros((), dtype, &dev)?)
        }
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("{what}: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_loss_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same(a, b, "l1 loss")?;
    Ok((a - b)?.abs()?.mean_all()?)
}

/// The fixed bicubic downsampler `f` for an `h×w` HR image at integer `scale`.
pub fn downsampler(h: usize, w: usize, scale: usize) -> Result<ResizeOperator> {
    ResizeOperator::new(h, w, 1.0 / scale as f64, true)
}

/// `mean |f(sr) − lr|`, differentiable through `f`.
pub fn cycle_loss_tensor(sr: &Tensor, lr: &Tensor, f: &ResizeOperator) -> Result<Tensor> {
    let down = f.apply_tensor(sr)?;
    check_same(&down, lr, "cycle loss after downsampling")?;
    Ok((down - lr.to_dtype(sr.dtype())?)?.abs()?.mean_all()?)
}

/// `mean |fx(sr) − fx(hr)|`; the target features are detached.
pub fn perceptual_loss_tensor(sr: &Tensor, hr: &Tensor, fx: &FeatureExtractor) -> Result<Tensor> {
    check_same(sr, hr, "perceptual loss")?;
    let a = fx.features(sr)?;
    let b = fx.features(&hr.detach())?.detach();
    Ok((a - b)?.abs()?.mean_all()?)
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

fn relativistic(real: &Tensor, fake: &Tensor) -> Result<(Tensor, Tensor)> {
    if real.elem_count() == 0 || fake.elem_count() == 0 {
        return Err(Error::InvalidArgument("empty logit vector".into()));
    }
    ensure_finite(real, "real logits")?;
    ensure_finite(fake, "fake logits")?;
    let real = real.flatten_all()?;
    let fake = fake.flatten_all()?;
    let r = real.broadcast_sub(&fake.mean_all()?)?;
    let f = fake.broadcast_sub(&real.mean_all()?)?;
    Ok((r, f))
}

/// Discriminator loss: `E[softplus(−(r − E f))] + E[softplus(f − E r)]`.
pub fn ragan_d_loss_tensor(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let (r, f) = relativistic(real, fake)?;
    Ok((softplus(&r.neg()?)?.mean_all()? + softplus(&f)?.mean_all()?)?)
}

/// Generator loss with the labels reversed.
pub fn ragan_g_loss_tensor(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let (r, f) = relativistic(real, fake)?;
    Ok((softplus(&r)?.mean_all()? + softplus(&f.neg()?)?.mean_all()?)?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn logits(v: &[f64]) -> Result<Tensor> {
    Ok(Tensor::from_slice(v, v.len(), &Device::Cpu)?)
}

pub fn ragan_d_loss(real: &[f64], fake: &[f64]) -> Result<f64> {
    scalar(&ragan_d_loss_tensor(&logits(real)?, &logits(fake)?)?)
}

pub fn ragan_g_loss(real: &[f64], fake: &[f64]) -> Result<f64> {
    scalar(&ragan_g_loss_tensor(&logits(real)?, &logits(fake)?)?)
}

fn f64_tensor(img: &ImageTensor) -> Result<Tensor> {
    img.to_tensor(DType::F64, &Device::Cpu)
}

pub fn l1_loss(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum();
    Ok(sum / a.data().len() as f64)
}

pub fn cycle_loss(sr: &ImageTensor, lr: &ImageTensor, f: &ResizeOperator) -> Result<f64> {
    scalar(&cycle_loss_tensor(&f64_tensor(sr)?, &f64_tensor(lr)?, f)?)
}

pub fn perceptual_loss(sr: &ImageTensor, hr: &ImageTensor, fx: &FeatureExtractor) -> Result<f64> {
    sr.ensure_same_shape(hr)?;
    let dtype = fx.stack().params().dtype();
    let a = sr.to_tensor(dtype, &Device::Cpu)?;
    let b = hr.to_tensor(dtype, &Device::Cpu)?;
    scalar(&perceptual_loss_tensor(&a, &b, fx)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(seed: u32, h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, 3, |y, x, c| {
            let v = (y as u32 * 31 + x as u32 * 17 + c as u32 * 7 + seed * 13) % 97;
            v as f32 / 96.0
        })
        .unwrap()
    }

    #[test]
    fn l1_fixed_points() {
        let a = img(1, 6, 5);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        let b = ImageTensor::filled(4, 4, 3, 0.25).unwrap();
        let c = ImageTensor::filled(4, 4, 3, 0.75).unwrap();
        assert_eq!(l1_loss(&b, &c).unwrap(), 0.5);
        assert!(l1_loss(&a, &b).is_err());
    }

    #[test]
    fn cycle_constant_fixed_point() {
        let sr = ImageTensor::filled(16, 16, 3, 0.3).unwrap();
        let lr = ImageTensor::filled(4, 4, 3, 0.3).unwrap();
        let f = downsampler(16, 16, 4).unwrap();
        assert!(cycle_loss(&sr, &lr, &f).unwrap() < 1e-7);
        let sr = img(2, 16, 16);
        let lr = f.apply(&sr).unwrap();
        assert!(cycle_loss(&sr, &lr, &f).unwrap() < 1e-7);
        assert!(cycle_loss(&sr, &ImageTensor::filled(5, 5, 3, 0.0).unwrap(), &f).is_err());
    }

    #[test]
    fn ragan_symmetry_and_shift() {
        let v = ragan_d_loss(&[0.7; 3], &[0.7; 3]).unwrap();
        assert!((v - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let g = ragan_g_loss(&[0.7; 3], &[0.7; 3]).unwrap();
        assert!((g - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let r = [0.3, -1.2, 2.0, 0.1];
        let f = [1.5, 0.2, -0.7, 0.9];
        let shift = |xs: &[f64]| xs.iter().map(|x| x + 3.25).collect::<Vec<_>>();
        let d0 = ragan_d_loss(&r, &f).unwrap();
        let d1 = ragan_d_loss(&shift(&r), &shift(&f)).unwrap();
        assert!((d0 - d1).abs() < 1e-12);
        assert!(ragan_d_loss(&[f64::NAN], &[0.0]).is_err());
        assert!(ragan_d_loss(&[], &[0.0]).is_err());
        // far-separated logits saturate without overflow
        let d = ragan_d_loss(&[1e4], &[-1e4]).unwrap();
        assert!(d.is_finite() && d < 1e-12);
    }

    #[test]
    fn weighted_totals() {
        let c = LossComponents {
            content: 1.0,
            gan: 2.0,
            percep: 3.0,
        };
        let t = total_generator_loss(&LossWeights::eq3(5e-3, 10.0), &c).unwrap();
        assert!((t - 31.01).abs() < 1e-12);
        assert_eq!(
            total_generator_loss(&LossWeights::eq3(0.0, 0.0), &c).unwrap(),
            1.0
        );
        let g = LossWeights {
            content_mode: ContentMode::None,
            perceptual_mode: PerceptualMode::Off,
            ..LossWeights::eq3_default()
        };
        assert!((total_generator_loss(&g, &c).unwrap() - 0.01).abs() < 1e-15);
        let bad = LossWeights {
            lambda_gan: -1.0,
            ..LossWeights::eq3_default()
        };
        assert!(total_generator_loss(&bad, &c).is_err());
        assert_eq!(LossWeights::preset("eq1_released").unwrap().w_content, 1e-2);
        assert_eq!(LossWeights::preset("eq1_pirm").unwrap().w_content, 10.0);
        assert!(LossWeights::preset("eq2").is_err());
    }

    #[test]
    fn tensor_total_matches_scalar() {
        let dev = Device::Cpu;
        let s = |v: f64| Tensor::new(v, &dev).unwrap();
        let w = LossWeights::eq1_pirm();
        let t =
            total_generator_loss_tensor(&w, Some(&s(1.0)), Some(&s(2.0)), Some(&s(3.0))).unwrap();
        let expect = total_generator_loss(
            &w,
            &LossComponents {
                content: 1.0,
                gan: 2.0,
                percep: 3.0,
            },
        )
        .unwrap();
        assert!((t.to_scalar::<f64>().unwrap() - expect).abs() < 1e-12);
        let none = total_generator_loss_tensor(&w, None, None, None).unwrap();
        assert_eq!(none.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn perceptual_zero_cases() {
        let fx = FeatureExtractor::random(0, DType::F64).unwrap();
        let a = img(3, 16, 16);
        let b = img(4, 16, 16);
        assert_eq!(perceptual_loss(&a, &a, &fx).unwrap(), 0.0);
        assert!(perceptual_loss(&a, &b, &fx).unwrap() > 0.0);
        fx.zero_weights().unwrap();
        assert_eq!(perceptual_loss(&a, &b, &fx).unwrap(), 0.0);
    }
}
