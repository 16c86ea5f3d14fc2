//! VGG-style relativistic discriminator, optionally conditioned on the LR
//! input.
//!
//! When conditioned, the discriminator sees a 6-channel tensor: channels
//! 0–2 hold the candidate HR image and channels 3–5 the LR image upsampled
//! to HR size with the same bicubic operator used for data synthesis.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::resize::{bicubic_resize, bicubic_resize_tensor};
use crate::error::{shape_err, Error, Result};
use crate::image::ImageTensor;
use crate::nn::{ensure_finite, leaky_relu, BatchNorm2d, Conv2d, Linear, Mode, ParamStore};
use crate::rng::{stream_rng, Stream};

const LRELU_SLOPE: f64 = 0.2;
const HIDDEN_UNITS: usize = 100;
const MAX_STAGES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    /// HR patch edge length.
    pub input_size: usize,
    /// Concatenate the upsampled LR image as channels 3–5.
    pub conditioned: bool,
    pub batch_norm: bool,
}

impl DiscriminatorConfig {
    pub fn paper(input_size: usize) -> Self {
        Self {
            base_channels: 64,
            input_size,
            conditioned: true,
            batch_norm: true,
        }
    }

    pub fn desk(input_size: usize) -> Self {
        Self {
            base_channels: 32,
            ..Self::paper(input_size)
        }
    }

    pub fn input_channels(&self) -> usize {
        if self.conditioned {
            6
        } else {
            3
        }
    }

    /// Number of stride-2 stages: shrink to 4×4, at most five times.
    pub fn stages(&self) -> usize {
        let mut k = 0;
        while k < MAX_STAGES && self.input_size >> (k + 1) >= 4 {
            k += 1;
        }
        k
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.stages();
        if k == 0 || !self.input_size.is_multiple_of(1 << k) {
            return Err(Error::Config(format!(
                "discriminator input size {} must be >= 8 and divisible by {}",
                self.input_size,
                1usize << k.max(1)
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config(
                "discriminator needs >= 1 base channel".into(),
            ));
        }
        Ok(())
    }
}

/// A candidate HR image stacked with its upsampled LR reference:
/// `H×W×6`, channels 0–2 candidate, 3–5 reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedInput {
    candidate: ImageTensor,
    reference: ImageTensor,
}

impl ConditionedInput {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.candidate.height(), self.candidate.width(), 6)
    }

    pub fn candidate(&self) -> &ImageTensor {
        &self.candidate
    }

    pub fn reference(&self) -> &ImageTensor {
        &self.reference
    }

    /// Interleaved `H×W×6` samples.
    pub fn to_interleaved(&self) -> Result<Vec<f32>> {
        ImageTensor::concat_channels(&[&self.candidate, &self.reference])
    }

    /// `1×6×H×W` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
        let a = self.candidate.to_tensor(dtype, device)?;
        let b = self.reference.to_tensor(dtype, device)?;
        Ok(Tensor::cat(&[&a, &b], 1)?)
    }
}

/// Stacks `candidate` (HR, RGB) with `lr` bicubic-upsampled to HR size.
pub fn assemble_input(candidate: &ImageTensor, lr: &ImageTensor) -> Result<ConditionedInput> {
    if candidate.channels() != 3 || lr.channels() != 3 {
        return Err(shape_err!("assemble_input expects RGB candidate and LR"));
    }
    let scale = hr_scale(
        (candidate.height(), candidate.width()),
        (lr.height(), lr.width()),
    )?;
    let reference = bicubic_resize(lr, scale as f64, true)?;
    Ok(ConditionedInput {
        candidate: candidate.clone(),
        reference,
    })
}

/// Integer factor between HR and LR sizes.
fn hr_scale(hr: (usize, usize), lr: (usize, usize)) -> Result<usize> {
    if lr.0 == 0 || lr.1 == 0 || !hr.0.is_multiple_of(lr.0) || !hr.1.is_multiple_of(lr.1) || hr.0 / lr.0 != hr.1 / lr.1
    {
        return Err(shape_err!(
            "candidate {:?} is not an integer multiple of LR {:?}",
            hr,
            lr
        ));
    }
    Ok(hr.0 / lr.0)
}

/// Tensor form of [`assemble_input`]: `N×3×H×W` candidate and `N×3×h×w` LR
/// to `N×6×H×W`.
pub fn assemble_input_tensor(candidate: &Tensor, lr: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = candidate.dims4()?;
    let (ln, lc, lh, lw) = lr.dims4()?;
    if n != ln || c != 3 || lc != 3 {
        return Err(shape_err!(
            "assemble_input: candidate {:?} and LR {:?}",
            candidate.dims(),
            lr.dims()
        ));
    }
    let scale = hr_scale((h, w), (lh, lw))?;
    let reference = bicubic_resize_tensor(&lr.to_dtype(candidate.dtype())?, scale as f64, true)?;
    Ok(Tensor::cat(&[candidate, &reference], 1)?)
}

#[derive(Debug)]
struct Stage {
    conv: Conv2d,
    norm: Option<BatchNorm2d>,
}

impl Stage {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        let y = match &self.norm {
            Some(bn) => bn.forward(&y, mode)?,
            None => y,
        };
        leaky_relu(&y, LRELU_SLOPE)
    }
}

#[derive(Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    store: ParamStore,
    stages: Vec<Stage>,
    fc1: Linear,
    fc2: Linear,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype);
        // distinct stream from the generator's init
        let mut rng = stream_rng(seed, Stream::Init, 1);
        let nf = config.base_channels;
        let width = |k: usize| nf * (1usize << k).min(8);
        let mut stages = Vec::new();
        let mut in_ch = config.input_channels();
        for k in 0..config.stages() {
            let ch = width(k);
            // first conv of the stack has a bias and no normalization
            let first = k == 0;
            let norm_a = config.batch_norm && !first;
            let conv_a = Conv2d::new(
                &mut store,
                &format!("conv{k}_0"),
                in_ch,
                ch,
                3,
                1,
                1,
                !norm_a,
                1.0,
                &mut rng,
            )?;
            let bn_a = if norm_a {
                Some(BatchNorm2d::new(&mut store, &format!("bn{k}_0"), ch)?)
            } else {
                None
            };
            stages.push(Stage {
                conv: conv_a,
                norm: bn_a,
            });
            let conv_b = Conv2d::new(
                &mut store,
                &format!("conv{k}_1"),
                ch,
                ch,
                4,
                2,
                1,
                !config.batch_norm,
                1.0,
                &mut rng,
            )?;
            let bn_b = if config.batch_norm {
                Some(BatchNorm2d::new(&mut store, &format!("bn{k}_1"), ch)?)
            } else {
                None
            };
            stages.push(Stage {
                conv: conv_b,
                norm: bn_b,
            });
            in_ch = ch;
        }
        let spatial = config.input_size >> config.stages();
        let fc1 = Linear::new(
            &mut store,
            "linear1",
            in_ch * spatial * spatial,
            HIDDEN_UNITS,
            &mut rng,
        )?;
        let fc2 = Linear::new(&mut store, "linear2", HIDDEN_UNITS, 1, &mut rng)?;
        Ok(Self {
            config,
            store,
            stages,
            fc1,
            fc2,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Zeroes the scoring head so every input scores 0.
    pub fn zero_head(&self) -> Result<()> {
        self.fc2.weight().set(&self.fc2.weight().zeros_like()?)?;
        self.fc2.bias().set(&self.fc2.bias().zeros_like()?)?;
        Ok(())
    }

    /// Logits for an `N×C×S×S` batch, one per input.
    pub fn discriminate(&self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, c, h, w) = input.dims4()?;
        let s = self.config.input_size;
        if c != self.config.input_channels() || h != s || w != s {
            return Err(shape_err!(
                "discriminator expects N×{}×{s}×{s}, got {:?}",
                self.config.input_channels(),
                input.dims()
            ));
        }
        let mut x = input.to_dtype(self.dtype())?;
        for stage in &self.stages {
            x = stage.forward(&x, mode)?;
        }
        let x = x.reshape((n, ()))?;
        let x = leaky_relu(&self.fc1.forward(&x)?, LRELU_SLOPE)?;
        let logits = self.fc2.forward(&x)?.reshape(n)?;
        ensure_finite(&logits, "discriminator logits")?;
        Ok(logits)
    }

    /// Scores HR-sized `candidate`s against their `lr` inputs, building the
    /// 6-channel input when conditioned. Unconditioned, `lr` is ignored.
    pub fn score(&self, candidate: &Tensor, lr: &Tensor, mode: Mode) -> Result<Tensor> {
        if self.config.conditioned {
            self.discriminate(&assemble_input_tensor(candidate, lr)?, mode)
        } else {
            self.discriminate(candidate, mode)
        }
    }

    /// Parameters plus batch-norm running statistics.
    pub fn state_tensors(&self) -> std::collections::HashMap<String, Tensor> {
        let mut map = self.store.tensors();
        for st in &self.stages {
            if let Some(bn) = &st.norm {
                map.extend(bn.buffers());
            }
        }
        map
    }

    pub fn load_state(&self, map: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        self.store.load(map)?;
        for st in &self.stages {
            if let Some(bn) = &st.norm {
                bn.load_buffers(map)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn rgb(h: usize, w: usize, k: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, 3, |y, x, c| {
            ((y * k + x * 7 + c * 3) % 13) as f32 / 12.0
        })
        .unwrap()
    }

    fn tiny(conditioned: bool) -> DiscriminatorConfig {
        DiscriminatorConfig {
            base_channels: 4,
            input_size: 16,
            conditioned,
            batch_norm: true,
        }
    }

    #[test]
    fn stage_count() {
        assert_eq!(DiscriminatorConfig::paper(128).stages(), 5);
        assert_eq!(DiscriminatorConfig::paper(96).stages(), 4);
        assert_eq!(DiscriminatorConfig::paper(64).stages(), 4);
        assert_eq!(DiscriminatorConfig::paper(8).stages(), 1);
        assert!(DiscriminatorConfig::paper(4).validate().is_err());
        assert!(DiscriminatorConfig::paper(9).validate().is_err());
        assert!(DiscriminatorConfig::paper(96).validate().is_ok());
    }

    #[test]
    fn assemble_shapes_and_layout() {
        let cand = rgb(128, 128, 5);
        let lr = rgb(32, 32, 3);
        let inp = assemble_input(&cand, &lr).unwrap();
        assert_eq!(inp.dims(), (128, 128, 6));
        assert_eq!(inp.candidate(), &cand);
        let inter = inp.to_interleaved().unwrap();
        assert_eq!(inter.len(), 128 * 128 * 6);
        assert_eq!(inter[6 * 130 + 1], cand.get(1, 2, 1));
        assert_eq!(inter[6 * 130 + 4], inp.reference().get(1, 2, 1));
        assert!(assemble_input(&rgb(100, 128, 1), &lr).is_err());
    }

    #[test]
    fn assemble_self_reference_and_constants() {
        let lr = rgb(8, 8, 2);
        let up = bicubic_resize(&lr, 4.0, true).unwrap();
        let inp = assemble_input(&up, &lr).unwrap();
        assert_eq!(inp.candidate(), inp.reference());

        let c = ImageTensor::filled(8, 8, 3, 0.3).unwrap();
        let inp = assemble_input(&rgb(32, 32, 1), &c).unwrap();
        assert!(inp
            .reference()
            .data()
            .iter()
            .all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn tensor_assembly_matches_image_assembly() {
        let (cand, lr) = (rgb(16, 16, 3), rgb(4, 4, 5));
        let dev = Device::Cpu;
        let t = assemble_input_tensor(
            &cand.to_tensor(DType::F64, &dev).unwrap(),
            &lr.to_tensor(DType::F64, &dev).unwrap(),
        )
        .unwrap();
        let i = assemble_input(&cand, &lr)
            .unwrap()
            .to_tensor(DType::F64, &dev)
            .unwrap();
        let diff = (t - i)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(diff < 1e-6);
    }

    #[test]
    fn logits_per_input_and_zero_head() {
        let d = Discriminator::new(tiny(true), DType::F64, 0).unwrap();
        let x = Tensor::rand(0f64, 1.0, (5, 6, 16, 16), &Device::Cpu).unwrap();
        let l = d.discriminate(&x, Mode::Train).unwrap();
        assert_eq!(l.dims(), &[5]);
        d.zero_head().unwrap();
        let l: Vec<f64> = d.discriminate(&x, Mode::Eval).unwrap().to_vec1().unwrap();
        assert_eq!(l, vec![0.0; 5]);
        let bad = Tensor::zeros((1, 3, 16, 16), DType::F64, &Device::Cpu).unwrap();
        assert!(d.discriminate(&bad, Mode::Eval).is_err());
    }

    #[test]
    fn unconditioned_ignores_lr() {
        let d = Discriminator::new(tiny(false), DType::F64, 4).unwrap();
        let dev = Device::Cpu;
        let cand = rgb(16, 16, 3).to_tensor(DType::F64, &dev).unwrap();
        let a = d
            .score(
                &cand,
                &rgb(4, 4, 1).to_tensor(DType::F64, &dev).unwrap(),
                Mode::Eval,
            )
            .unwrap();
        let b = d
            .score(
                &cand,
                &rgb(4, 4, 9).to_tensor(DType::F64, &dev).unwrap(),
                Mode::Eval,
            )
            .unwrap();
        assert_eq!(a.to_vec1::<f64>().unwrap(), b.to_vec1::<f64>().unwrap());
    }

    #[test]
    fn conditioning_is_live() {
        let d = Discriminator::new(tiny(true), DType::F64, 4).unwrap();
        let dev = Device::Cpu;
        let cand = rgb(16, 16, 3).to_tensor(DType::F64, &dev).unwrap();
        let a = d
            .score(
                &cand,
                &rgb(4, 4, 1).to_tensor(DType::F64, &dev).unwrap(),
                Mode::Eval,
            )
            .unwrap();
        let b = d
            .score(
                &cand,
                &rgb(4, 4, 9).to_tensor(DType::F64, &dev).unwrap(),
                Mode::Eval,
            )
            .unwrap();
        assert_ne!(a.to_vec1::<f64>().unwrap(), b.to_vec1::<f64>().unwrap());
    }
}
