//! Frozen convolutional feature stacks for perceptual losses and metrics.
//!
//! Two sources are supported: pretrained VGG weights loaded from a
//! safetensors file (torchvision `features.N.weight` naming), and a seeded
//! random stack that needs no download and is used for hermetic runs.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{max_pool2x2, Conv2d, ParamStore};
use crate::rng::{stream_rng, Stream};

/// Environment variable naming the directory that holds optional pretrained
/// weights (`vgg19.safetensors`, `vgg16.safetensors`, `lpips_vgg_lin.safetensors`).
pub const WEIGHTS_DIR_ENV: &str = "MANYSR_WEIGHTS_DIR";

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Directory named by [`WEIGHTS_DIR_ENV`], if set.
pub fn weights_dir() -> Option<PathBuf> {
    std::env::var_os(WEIGHTS_DIR_ENV).map(PathBuf::from)
}

/// Looks up `file` in the weights directory.
pub fn pretrained_file(file: &str) -> Result<PathBuf> {
    let dir = weights_dir().ok_or_else(|| {
        Error::BackendUnavailable(format!(
            "{WEIGHTS_DIR_ENV} is not set; cannot locate {file}"
        ))
    })?;
    let path = dir.join(file);
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::BackendUnavailable(format!(
            "{} not found",
            path.display()
        )))
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Conv(Conv2d),
    Relu,
    MaxPool,
}

/// A plain conv/relu/maxpool stack with tap points.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    store: ParamStore,
    layers: Vec<Layer>,
    taps: Vec<usize>,
    imagenet_norm: bool,
}

/// Stack layout: `Some(c)` is a 3×3 conv to `c` channels, `None` a 2×2 max-pool.
/// Every conv except possibly the last is followed by a ReLU.
fn build(
    store: &mut ParamStore,
    plan: &[Option<usize>],
    relu_after_last: bool,
    naming: impl Fn(usize) -> String,
    seed: Option<u64>,
) -> Result<Vec<Layer>> {
    let mut rng = stream_rng(seed.unwrap_or(0), Stream::Features, 0);
    let mut layers = Vec::new();
    let mut in_ch = 3;
    let last_conv = plan.iter().rposition(Option::is_some);
    for (i, step) in plan.iter().enumerate() {
        match step {
            Some(c) => {
                let name = naming(layers.len());
                layers.push(Layer::Conv(Conv2d::new(
                    store, &name, in_ch, *c, 3, 1, 1, true, 1.0, &mut rng,
                )?));
                in_ch = *c;
                if Some(i) != last_conv || relu_after_last {
                    layers.push(Layer::Relu);
                }
            }
            None => layers.push(Layer::MaxPool),
        }
    }
    Ok(layers)
}

impl FeatureStack {
    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Outputs of the tapped layers, in order.
    pub fn forward_taps(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = x.to_dtype(self.store.dtype())?;
        if self.imagenet_norm {
            let dev = x.device().clone();
            let mean = Tensor::new(&IMAGENET_MEAN, &dev)?
                .to_dtype(x.dtype())?
                .reshape((1, 3, 1, 1))?;
            let std = Tensor::new(&IMAGENET_STD, &dev)?
                .to_dtype(x.dtype())?
                .reshape((1, 3, 1, 1))?;
            x = x.broadcast_sub(&mean)?.broadcast_div(&std)?;
        }
        let mut out = Vec::with_capacity(self.taps.len());
        for (i, layer) in self.layers.iter().enumerate() {
            x = match layer {
                Layer::Conv(c) => c.forward(&x)?,
                Layer::Relu => x.relu()?,
                Layer::MaxPool => max_pool2x2(&x)?,
            };
            if self.taps.contains(&i) {
                out.push(x.clone());
            }
            if Some(&i) == self.taps.last() {
                break;
            }
        }
        Ok(out)
    }

    fn zero(&self) -> Result<()> {
        for (_, v) in self.store.iter() {
            v.set(&v.zeros_like()?)?;
        }
        Ok(())
    }

    fn load_torchvision(&self, path: &Path) -> Result<()> {
        let map = candle_core::safetensors::load(path, self.store.device())?;
        self.store.load(&map)
    }
}

/// Where a [`FeatureExtractor`]'s weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// VGG-19 `conv5_4`, before its activation.
    PretrainedVgg19,
    /// Seeded random five-conv stack.
    RandomFeatures,
}

/// Frozen feature network used by the perceptual loss.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    source: FeatureSource,
    stack: FeatureStack,
}

const VGG19_CONV5_4: [Option<usize>; 20] = [
    Some(64),
    Some(64),
    None,
    Some(128),
    Some(128),
    None,
    Some(256),
    Some(256),
    Some(256),
    Some(256),
    None,
    Some(512),
    Some(512),
    Some(512),
    Some(512),
    None,
    Some(512),
    Some(512),
    Some(512),
    Some(512),
];

const RANDOM_PLAN: [Option<usize>; 7] =
    [Some(16), Some(16), None, Some(32), Some(32), None, Some(32)];

impl FeatureExtractor {
    /// Seeded random stack; the tap is the last conv before activation.
    pub fn random(seed: u64, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(dtype);
        let layers = build(
            &mut store,
            &RANDOM_PLAN,
            false,
            |i| format!("features.{i}"),
            Some(seed),
        )?;
        let taps = vec![layers.len() - 1];
        Ok(Self {
            source: FeatureSource::RandomFeatures,
            stack: FeatureStack {
                store,
                layers,
                taps,
                imagenet_norm: false,
            },
        })
    }

    /// VGG-19 truncated at `conv5_4` (pre-activation), weights from
    /// `vgg19.safetensors` in the weights directory.
    pub fn vgg19(dtype: DType) -> Result<Self> {
        let path = pretrained_file("vgg19.safetensors")?;
        let mut store = ParamStore::new(dtype);
        let layers = build(
            &mut store,
            &VGG19_CONV5_4,
            false,
            |i| format!("features.{i}"),
            None,
        )?;
        let taps = vec![layers.len() - 1];
        let stack = FeatureStack {
            store,
            layers,
            taps,
            imagenet_norm: true,
        };
        stack.load_torchvision(&path)?;
        Ok(Self {
            source: FeatureSource::PretrainedVgg19,
            stack,
        })
    }

    pub fn from_source(source: FeatureSource, seed: u64, dtype: DType) -> Result<Self> {
        match source {
            FeatureSource::PretrainedVgg19 => Self::vgg19(dtype),
            FeatureSource::RandomFeatures => Self::random(seed, dtype),
        }
    }

    pub fn source(&self) -> FeatureSource {
        self.source
    }

    pub fn stack(&self) -> &FeatureStack {
        &self.stack
    }

    /// Feature map of an `N×3×H×W` batch.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.stack.forward_taps(x)?.remove(0))
    }

    /// Sets every weight to zero (a degenerate extractor).
    pub fn zero_weights(&self) -> Result<()> {
        self.stack.zero()
    }
}

/// Multi-layer stacks used by the LPIPS metric.
pub(crate) fn lpips_random_stack(seed: u64) -> Result<FeatureStack> {
    let mut store = ParamStore::new(DType::F64);
    let layers = build(
        &mut store,
        &RANDOM_PLAN,
        true,
        |i| format!("features.{i}"),
        Some(seed),
    )?;
    // post-activation outputs of convs 2, 4 and 5
    let relu_idx: Vec<usize> = layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::Relu))
        .map(|(i, _)| i)
        .collect();
    let taps = vec![relu_idx[1], relu_idx[3], relu_idx[4]];
    Ok(FeatureStack {
        store,
        layers,
        taps,
        imagenet_norm: false,
    })
}

const VGG16: [Option<usize>; 17] = [
    Some(64),
    Some(64),
    None,
    Some(128),
    Some(128),
    None,
    Some(256),
    Some(256),
    Some(256),
    None,
    Some(512),
    Some(512),
    Some(512),
    None,
    Some(512),
    Some(512),
    Some(512),
];

/// VGG-16 tapped at relu1_2, relu2_2, relu3_3, relu4_3, relu5_3.
pub(crate) fn lpips_vgg16_stack() -> Result<FeatureStack> {
    let path = pretrained_file("vgg16.safetensors")?;
    let mut store = ParamStore::new(DType::F32);
    let layers = build(&mut store, &VGG16, true, |i| format!("features.{i}"), None)?;
    let taps = vec![3, 8, 15, 22, 29];
    let stack = FeatureStack {
        store,
        layers,
        taps,
        imagenet_norm: false,
    };
    stack.load_torchvision(&path)?;
    Ok(stack)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn random_extractor_is_seeded() {
        let x = Tensor::rand(0f64, 1.0, (2, 3, 16, 16), &Device::Cpu).unwrap();
        let a = FeatureExtractor::random(3, DType::F64)
            .unwrap()
            .features(&x)
            .unwrap();
        let b = FeatureExtractor::random(3, DType::F64)
            .unwrap()
            .features(&x)
            .unwrap();
        let c = FeatureExtractor::random(4, DType::F64)
            .unwrap()
            .features(&x)
            .unwrap();
        assert_eq!(a.dims(), &[2, 32, 4, 4]);
        let (a, b, c): (Vec<f64>, Vec<f64>, Vec<f64>) = (
            a.flatten_all().unwrap().to_vec1().unwrap(),
            b.flatten_all().unwrap().to_vec1().unwrap(),
            c.flatten_all().unwrap().to_vec1().unwrap(),
        );
        assert_eq!(a, b);
        assert_ne!(a, c);
        // pre-activation tap: negative responses survive
        assert!(a.iter().any(|&v| v < 0.0));
    }

    #[test]
    fn torchvision_layer_names() {
        let mut store = ParamStore::new(DType::F32);
        build(
            &mut store,
            &VGG19_CONV5_4,
            false,
            |i| format!("features.{i}"),
            None,
        )
        .unwrap();
        assert!(store.get("features.0.weight").is_some());
        assert!(store.get("features.34.weight").is_some());
        assert_eq!(
            store.get("features.34.weight").unwrap().dims(),
            &[512, 512, 3, 3]
        );
        assert_eq!(store.len(), 32);
        let mut store = ParamStore::new(DType::F32);
        let layers = build(&mut store, &VGG16, true, |i| format!("features.{i}"), None).unwrap();
        assert!(store.get("features.28.weight").is_some());
        assert!(matches!(layers[29], Layer::Relu));
        assert!(matches!(layers[22], Layer::Relu));
    }

    #[test]
    fn missing_pretrained_weights_is_explicit() {
        if weights_dir().is_some() {
            return;
        }
        assert!(matches!(
            FeatureExtractor::vgg19(DType::F32),
            Err(Error::BackendUnavailable(_))
        ));
    }
}
