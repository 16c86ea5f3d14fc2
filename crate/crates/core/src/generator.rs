//! RRDB super-resolution generator with learned, per-channel noise injection.
//!
//! The trunk is a stack of residual-in-residual dense blocks. After each
//! block's residual addition the feature map becomes `x + s_i ⊙ ε`, where
//! `ε` is fresh pixel-wise standard normal noise and `s_i` is a learned
//! vector with one entry per trunk channel, broadcast over space. Scales
//! start at zero, so an untrained generator is exactly the deterministic
//! baseline. Noise is only injected in [`Mode::Train`].

use std::fmt::Write as _;

use candle_core::{DType, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, shape_err, Error, Result};
use crate::image::ImageTensor;
use crate::nn::{ensure_finite, leaky_relu, Conv2d, Mode, ParamStore};
use crate::rng::{stream_rng, Stream};

const LRELU_SLOPE: f64 = 0.2;
const RESIDUAL_SCALE: f64 = 0.2;
const INTERIOR_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_rrdb: usize,
    pub trunk_channels: usize,
    pub growth_channels: usize,
    pub scale: usize,
    pub noise_enabled: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl GeneratorConfig {
    /// 23 RRDB blocks, 64 trunk channels, ×4.
    pub fn paper() -> Self {
        Self {
            num_rrdb: 23,
            trunk_channels: 64,
            growth_channels: 32,
            scale: 4,
            noise_enabled: true,
        }
    }

    /// Three blocks, 32 channels: trainable on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            num_rrdb: 3,
            trunk_channels: 32,
            growth_channels: 16,
            scale: 4,
            noise_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_rrdb == 0 {
            return Err(Error::Config(
                "generator needs at least one RRDB block".into(),
            ));
        }
        if self.trunk_channels == 0 || self.growth_channels == 0 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        if self.scale < 2 || !self.scale.is_power_of_two() {
            return Err(Error::Config(format!(
                "generator scale must be a power of two >= 2, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DenseBlock {
    convs: Vec<Conv2d>,
}

impl DenseBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        nf: usize,
        gc: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Self> {
        let convs = (0..5)
            .map(|k| {
                let out = if k == 4 { nf } else { gc };
                Conv2d::new(
                    store,
                    &format!("{name}.conv{}", k + 1),
                    nf + k * gc,
                    out,
                    3,
                    1,
                    1,
                    true,
                    INTERIOR_INIT_SCALE,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { convs })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut feats = vec![x.clone()];
        for conv in &self.convs[..4] {
            let inp = Tensor::cat(&feats, 1)?;
            feats.push(leaky_relu(&conv.forward(&inp)?, LRELU_SLOPE)?);
        }
        let x5 = self.convs[4].forward(&Tensor::cat(&feats, 1)?)?;
        Ok((x5.affine(RESIDUAL_SCALE, 0.0)? + x)?)
    }
}

#[derive(Debug, Clone)]
struct Rrdb {
    blocks: [DenseBlock; 3],
}

impl Rrdb {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = x.clone();
        for b in &self.blocks {
            out = b.forward(&out)?;
        }
        Ok((out.affine(RESIDUAL_SCALE, 0.0)? + x)?)
    }
}

/// `out[h,w,c] = features[h,w,c] + scales[c] · noise[h,w,c]` on `N×C×H×W`
/// tensors; `scales` has one entry per channel.
pub fn inject_noise(features: &Tensor, scales: &Tensor, noise: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = features.dims4()?;
    if scales.dims() != [c] {
        return Err(shape_err!(
            "noise scales {:?} do not match {c} feature channels",
            scales.dims()
        ));
    }
    if noise.dims() != features.dims() {
        return Err(shape_err!(
            "noise {:?} does not match features {:?}",
            noise.dims(),
            features.dims()
        ));
    }
    let scaled = noise.broadcast_mul(&scales.reshape((1, c, 1, 1))?)?;
    Ok((features + scaled)?)
}

/// Five-number summary of `|scale|` for one block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseScaleSummary {
    pub block_index: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub const NOISE_STATS_CSV_HEADER: &str = "block_index,min,q1,median,q3,max";

pub fn noise_stats_csv(stats: &[NoiseScaleSummary]) -> String {
    let mut out = String::from(NOISE_STATS_CSV_HEADER);
    out.push('\n');
    for s in stats {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.block_index, s.min, s.q1, s.median, s.q3, s.max
        );
    }
    out
}

#[derive(Debug)]
pub struct Generator {
    config: GeneratorConfig,
    store: ParamStore,
    conv_first: Conv2d,
    trunk: Vec<Rrdb>,
    trunk_conv: Conv2d,
    upconvs: Vec<Conv2d>,
    hr_conv: Conv2d,
    conv_last: Conv2d,
    noise_scales: Vec<Var>,
}

impl Generator {
    pub fn new(config: GeneratorConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let (nf, gc) = (config.trunk_channels, config.growth_channels);
        let conv = |store: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut _| {
            Conv2d::new(store, name, i, o, 3, 1, 1, true, 1.0, rng)
        };
        let conv_first = conv(&mut store, "conv_first", 3, nf, &mut rng)?;
        let trunk = (0..config.num_rrdb)
            .map(|i| {
                let mk = |j: usize, store: &mut ParamStore, rng: &mut _| {
                    DenseBlock::new(store, &format!("trunk.{i}.rdb{j}"), nf, gc, rng)
                };
                Ok(Rrdb {
                    blocks: [
                        mk(1, &mut store, &mut rng)?,
                        mk(2, &mut store, &mut rng)?,
                        mk(3, &mut store, &mut rng)?,
                    ],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let trunk_conv = conv(&mut store, "trunk_conv", nf, nf, &mut rng)?;
        let upconvs = (0..config.scale.trailing_zeros())
            .map(|k| conv(&mut store, &format!("upconv{}", k + 1), nf, nf, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let hr_conv = conv(&mut store, "hr_conv", nf, nf, &mut rng)?;
        let conv_last = conv(&mut store, "conv_last", nf, 3, &mut rng)?;
        let noise_scales = (0..config.num_rrdb)
            .map(|i| store.insert(format!("noise_scales.{i}"), store.zeros(&[nf])?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            store,
            conv_first,
            trunk,
            trunk_conv,
            upconvs,
            hr_conv,
            conv_last,
            noise_scales,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn noise_scale_vars(&self) -> &[Var] {
        &self.noise_scales
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Overwrites the scales of one block.
    pub fn set_noise_scales(&self, block: usize, values: &[f64]) -> Result<()> {
        let var = self
            .noise_scales
            .get(block)
            .ok_or_else(|| invalid_arg!("block {block} out of range"))?;
        if values.len() != self.config.trunk_channels {
            return Err(shape_err!(
                "{} scales given for {} channels",
                values.len(),
                self.config.trunk_channels
            ));
        }
        let t = Tensor::from_slice(values, values.len(), self.store.device())?
            .to_dtype(self.dtype())?;
        var.set(&t)?;
        Ok(())
    }

    /// Standard normal noise for block `block` of the pass keyed by `seed`.
    pub fn block_noise(&self, dims: &[usize], seed: u64, block: usize) -> Result<Tensor> {
        let mut rng = stream_rng(seed, Stream::Noise, block as u64);
        let n: usize = dims.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Tensor::from_vec(data, dims, self.store.device())?.to_dtype(self.dtype())?)
    }

    /// Super-resolves an `N×3×H×W` batch to `N×3×sH×sW`.
    ///
    /// In train mode with noise enabled, block `i` draws its noise from the
    /// stream keyed by `(rng_seed, i)`. Eval mode ignores `rng_seed`.
    pub fn forward(&self, lr: &Tensor, mode: Mode, rng_seed: u64) -> Result<Tensor> {
        let (_, c, _, _) = lr.dims4()?;
        if c != 3 {
            return Err(shape_err!("generator expects 3 input channels, got {c}"));
        }
        let lr = lr.to_dtype(self.dtype())?;
        let fea = self.conv_first.forward(&lr)?;
        let inject = mode == Mode::Train && self.config.noise_enabled;
        let mut x = fea.clone();
        for (i, block) in self.trunk.iter().enumerate() {
            x = block.forward(&x)?;
            if inject {
                let noise = self.block_noise(x.dims(), rng_seed, i)?;
                x = inject_noise(&x, self.noise_scales[i].as_tensor(), &noise)?;
            }
        }
        let mut x = (fea + self.trunk_conv.forward(&x)?)?;
        for up in &self.upconvs {
            let (_, _, h, w) = x.dims4()?;
            x = leaky_relu(
                &up.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)?,
                LRELU_SLOPE,
            )?;
        }
        let out = self
            .conv_last
            .forward(&leaky_relu(&self.hr_conv.forward(&x)?, LRELU_SLOPE)?)?;
        ensure_finite(&out, "generator output")?;
        Ok(out)
    }

    /// Convenience wrapper for a single image.
    pub fn upscale(&self, lr: &ImageTensor, mode: Mode, rng_seed: u64) -> Result<ImageTensor> {
        if lr.channels() != 3 {
            return Err(shape_err!(
                "generator expects an RGB image, got {} channels",
                lr.channels()
            ));
        }
        let t = lr.to_tensor(self.dtype(), self.store.device())?;
        let out = self.forward(&t, mode, rng_seed)?;
        Ok(ImageTensor::batch_from_tensor(&out)?.remove(0))
    }

    pub fn noise_scale_stats(&self) -> Result<Vec<NoiseScaleSummary>> {
        self.noise_scales
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let mut a: Vec<f64> = v
                    .as_tensor()
                    .to_dtype(DType::F64)?
                    .to_vec1::<f64>()?
                    .into_iter()
                    .map(f64::abs)
                    .collect();
                a.sort_by(|x, y| x.total_cmp(y));
                Ok(NoiseScaleSummary {
                    block_index: i,
                    min: a[0],
                    q1: quantile(&a, 0.25),
                    median: quantile(&a, 0.5),
                    q3: quantile(&a, 0.75),
                    max: a[a.len() - 1],
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            num_rrdb: 2,
            trunk_channels: 4,
            growth_channels: 2,
            scale: 2,
            noise_enabled: true,
        }
    }

    fn input(h: usize, w: usize) -> Tensor {
        let img = ImageTensor::from_fn(h, w, 3, |y, x, c| ((y * 3 + x * 5 + c) % 11) as f32 / 10.0)
            .unwrap();
        img.to_tensor(DType::F64, &Device::Cpu).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(GeneratorConfig {
            num_rrdb: 0,
            ..tiny()
        }
        .validate()
        .is_err());
        assert!(GeneratorConfig { scale: 3, ..tiny() }.validate().is_err());
        assert!(GeneratorConfig { scale: 8, ..tiny() }.validate().is_ok());
    }

    #[test]
    fn output_shape() {
        let g = Generator::new(GeneratorConfig { scale: 4, ..tiny() }, DType::F64, 0).unwrap();
        let out = g.forward(&input(8, 6), Mode::Eval, 0).unwrap();
        assert_eq!(out.dims(), &[1, 3, 32, 24]);
    }

    #[test]
    fn rejects_grayscale() {
        let g = Generator::new(tiny(), DType::F64, 0).unwrap();
        let x = Tensor::zeros((1, 1, 8, 8), DType::F64, &Device::Cpu).unwrap();
        assert!(g.forward(&x, Mode::Eval, 0).is_err());
    }

    #[test]
    fn zero_scales_make_train_equal_eval() {
        let g = Generator::new(tiny(), DType::F64, 1).unwrap();
        let x = input(8, 8);
        let e = g
            .forward(&x, Mode::Eval, 3)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let t = g
            .forward(&x, Mode::Train, 4)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert_eq!(e, t);
    }

    #[test]
    fn nonzero_scales_depend_on_seed() {
        let g = Generator::new(tiny(), DType::F64, 1).unwrap();
        g.set_noise_scales(0, &[0.5, 0.1, 0.0, 1.0]).unwrap();
        let x = input(8, 8);
        let a = g
            .forward(&x, Mode::Train, 1)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let b = g
            .forward(&x, Mode::Train, 2)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let a2 = g
            .forward(&x, Mode::Train, 1)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert_ne!(a, b);
        assert_eq!(a, a2);
    }

    #[test]
    fn inject_noise_elementwise() {
        let dev = Device::Cpu;
        // 1x2x2x2 features, scales (0.5, 2.0)
        let f = Tensor::new(&[1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &dev)
            .unwrap()
            .reshape((1, 2, 2, 2))
            .unwrap();
        let n = Tensor::new(&[0.1f64, -0.2, 0.3, -0.4, 1.0, -1.0, 0.5, 0.25], &dev)
            .unwrap()
            .reshape((1, 2, 2, 2))
            .unwrap();
        let s = Tensor::new(&[0.5f64, 2.0], &dev).unwrap();
        let out = inject_noise(&f, &s, &n)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let fv = f.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let nv = n.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for i in 0..8 {
            let scale = if i < 4 { 0.5 } else { 2.0 };
            assert_eq!(out[i], fv[i] + scale * nv[i]);
        }
        assert_eq!(out[..2], [1.05, 1.9]);

        let zero = Tensor::zeros(2, DType::F64, &dev).unwrap();
        assert_eq!(
            inject_noise(&f, &zero, &n)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap(),
            fv
        );
        let ones = Tensor::ones(2, DType::F64, &dev).unwrap();
        let zf = f.zeros_like().unwrap();
        assert_eq!(
            inject_noise(&zf, &ones, &n)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap(),
            nv
        );
        assert!(inject_noise(&f, &Tensor::zeros(3, DType::F64, &dev).unwrap(), &n).is_err());
    }

    #[test]
    fn noise_stats() {
        let g = Generator::new(tiny(), DType::F32, 0).unwrap();
        let fresh = g.noise_scale_stats().unwrap();
        assert_eq!(fresh.len(), 2);
        assert!(fresh
            .iter()
            .all(|s| s.min == 0.0 && s.max == 0.0 && s.median == 0.0));
        g.set_noise_scales(0, &[-1.0, 2.0, -1.0, 2.0]).unwrap();
        let s = g.noise_scale_stats().unwrap()[0];
        assert_eq!((s.min, s.max), (1.0, 2.0));
        assert_eq!(s.median, 1.5);
        let csv = noise_stats_csv(&g.noise_scale_stats().unwrap());
        assert!(csv.starts_with("block_index,min,q1,median,q3,max\n0,1,"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = Generator::new(tiny(), DType::F32, 5).unwrap();
        let b = Generator::new(tiny(), DType::F32, 5).unwrap();
        for ((na, va), (nb, vb)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(na, nb);
            let x: Vec<f32> = va.flatten_all().unwrap().to_vec1().unwrap();
            let y: Vec<f32> = vb.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(x, y);
        }
    }
}
