//! Minimal layer toolkit on top of `candle-core`: a named parameter store,
//! convolution, linear and batch-norm layers.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};

/// Forward-pass mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Named trainable parameters, iterated in name order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<Var> {
        let name = name.into();
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        if self.vars.insert(name.clone(), var.clone()).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter {name}"
            )));
        }
        Ok(var)
    }

    /// Gaussian tensor with the given standard deviation, drawn from `rng`.
    pub fn normal(&self, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    pub fn zeros(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::zeros(shape, self.dtype, &self.device)?)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Snapshot of every parameter, keyed by name.
    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_detached_tensor()))
            .collect()
    }

    /// Overwrites parameters from `map`. Every parameter must be present with
    /// a matching shape; extra entries are ignored.
    pub fn load(&self, map: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = map
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: stored shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// True if every value in every parameter is finite.
    pub fn all_finite(&self) -> Result<bool> {
        for v in self.vars.values() {
            let s = v
                .as_tensor()
                .abs()?
                .sum_all()?
                .to_dtype(DType::F64)?
                .to_scalar::<f64>()?;
            if !s.is_finite() {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Fails with [`Error::NonFinite`] if `t` holds a NaN or infinity.
pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t
        .abs()?
        .sum_all()?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// 2×2 max-pool, stride 2, odd trailing rows/columns dropped.
///
/// Built from reshape + max reductions rather than `Tensor::max_pool2d`,
/// whose backward pass in candle 0.11 scales gradients by the window
/// average instead of dividing by it.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    let x = x.narrow(2, 0, 2 * oh)?.narrow(3, 0, 2 * ow)?.contiguous()?;
    Ok(x.reshape((n, c, oh, 2, ow, 2))?.max(5)?.max(3)?)
}

/// LeakyReLU with the given negative slope.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(slope, 0.0)?)?)
}

/// Stride-1 convolution as explicit patch unfolding plus a matrix product.
/// Same result as `conv2d`, but the backward pass is two matmuls.
fn conv_unfolded(x: &Tensor, weight: &Tensor, padding: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, _, kh, kw) = weight.dims4()?;
    let xp = if padding > 0 {
        x.pad_with_zeros(2, padding, padding)?
            .pad_with_zeros(3, padding, padding)?
    } else {
        x.clone()
    };
    let (oh, ow) = (h + 2 * padding - kh + 1, w + 2 * padding - kw + 1);
    let mut taps = Vec::with_capacity(kh * kw);
    for dy in 0..kh {
        for dx in 0..kw {
            taps.push(xp.narrow(2, dy, oh)?.narrow(3, dx, ow)?);
        }
    }
    let cols = Tensor::stack(&taps, 2)?.reshape((n, c * kh * kw, oh * ow))?;
    let wm = weight.reshape((o, c * kh * kw))?;
    Ok(wm.broadcast_matmul(&cols)?.reshape((n, o, oh, ow))?)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// Kaiming-normal (fan-in) weights multiplied by `gain_scale`, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        gain_scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt() * gain_scale;
        let w = store.normal(&[out_ch, in_ch, kernel, kernel], std, rng)?;
        let weight = store.insert(format!("{name}.weight"), w)?;
        let bias = if bias {
            Some(store.insert(format!("{name}.bias"), store.zeros(&[out_ch])?)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Var> {
        self.bias.as_ref()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.weight.dims()[1] {
            return Err(shape_err!(
                "conv expects {} input channels, got {c}",
                self.weight.dims()[1]
            ));
        }
        let y = if self.stride == 1 {
            conv_unfolded(x, &self.weight, self.padding)?
        } else {
            x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?
        };
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dims()[0], 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let std = (1.0 / in_dim as f64).sqrt();
        let weight = store.insert(
            format!("{name}.weight"),
            store.normal(&[out_dim, in_dim], std, rng)?,
        )?;
        let bias = store.insert(format!("{name}.bias"), store.zeros(&[out_dim])?)?;
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Batch normalization over `N×H×W` per channel, with running statistics
/// for evaluation.
#[derive(Debug)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running: Mutex<(Tensor, Tensor)>,
    name: String,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let ones = Tensor::ones(channels, store.dtype(), store.device())?;
        let gamma = store.insert(format!("{name}.weight"), ones.clone())?;
        let beta = store.insert(format!("{name}.bias"), store.zeros(&[channels])?)?;
        Ok(Self {
            gamma,
            beta,
            running: Mutex::new((store.zeros(&[channels])?, ones)),
            name: name.to_string(),
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (mean, var) = match mode {
            Mode::Train => {
                let flat = x.transpose(0, 1)?.reshape((c, n * h * w))?;
                let mean = flat.mean_keepdim(D::Minus1)?;
                let centered = flat.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
                {
                    let count = (n * h * w) as f64;
                    let unbiased = if count > 1.0 {
                        count / (count - 1.0)
                    } else {
                        1.0
                    };
                    let mut run = self.running.lock().unwrap_or_else(|p| p.into_inner());
                    let m = mean.detach().flatten_all()?;
                    let v = var.detach().flatten_all()?.affine(unbiased, 0.0)?;
                    run.0 = (run.0.affine(1.0 - self.momentum, 0.0)?
                        + m.affine(self.momentum, 0.0)?)?;
                    run.1 = (run.1.affine(1.0 - self.momentum, 0.0)?
                        + v.affine(self.momentum, 0.0)?)?;
                }
                (mean.flatten_all()?, var.flatten_all()?)
            }
            Mode::Eval => {
                let run = self.running.lock().unwrap_or_else(|p| p.into_inner());
                (run.0.clone(), run.1.clone())
            }
        };
        let shape = (1, c, 1, 1);
        let inv = (var + self.eps)?.sqrt()?.recip()?;
        let scale = (inv * self.gamma.as_tensor())?.reshape(shape)?;
        let y = x
            .broadcast_sub(&mean.reshape(shape)?)?
            .broadcast_mul(&scale)?;
        Ok(y.broadcast_add(&self.beta.reshape(shape)?)?)
    }

    /// Running statistics as named buffers, for checkpoints.
    pub fn buffers(&self) -> Vec<(String, Tensor)> {
        let run = self.running.lock().unwrap_or_else(|p| p.into_inner());
        vec![
            (format!("{}.running_mean", self.name), run.0.clone()),
            (format!("{}.running_var", self.name), run.1.clone()),
        ]
    }

    pub fn load_buffers(&self, map: &HashMap<String, Tensor>) -> Result<()> {
        let mut run = self.running.lock().unwrap_or_else(|p| p.into_inner());
        let get = |suffix: &str| -> Result<Tensor> {
            let key = format!("{}.{suffix}", self.name);
            map.get(&key)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing buffer {key}")))
        };
        let dtype = run.0.dtype();
        run.0 = get("running_mean")?.to_dtype(dtype)?;
        run.1 = get("running_var")?.to_dtype(dtype)?;
        Ok(())
    }
}
