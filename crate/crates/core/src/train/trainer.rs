//! The training loop shared by both stages.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::Serialize;

use crate::data::ResizeOperator;
use crate::data::{ImageSource, PatchBuffer, PatchOptions, PatchStream};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, FeatureSource};
use crate::generator::Generator;
use crate::image::ImageTensor;
use crate::losses::{
    cycle_loss_tensor, downsampler, l1_loss_tensor, perceptual_loss_tensor, ragan_d_loss_tensor,
    ragan_g_loss_tensor, total_generator_loss_tensor, ContentMode, LossWeights, PerceptualMode,
};
use crate::nn::Mode;
use crate::rng::{derive_seed, Stream};
use crate::train::adam::Adam;
use crate::train::checkpoint::{
    checkpoint_dir, load_tensors, read_manifest, save_tensors, write_manifest, Manifest,
    DISCRIMINATOR_FILE, GENERATOR_FILE, MANIFEST_VERSION, OPTIM_D_FILE, OPTIM_G_FILE,
};
use crate::train::config::{RunConfig, Stage};
use crate::train::schedule::lr_at;

pub const LOSS_CSV_HEADER: &str = "iteration,content,gan_g,gan_d,percep,total,lr_g,lr_d";
pub const LOSS_CSV_FILE: &str = "loss.csv";

/// Consecutive near-zero discriminator losses before a collapse warning.
pub const COLLAPSE_WINDOW: u64 = 500;
pub const COLLAPSE_THRESHOLD: f64 = 1e-4;

const DTYPE: DType = DType::F32;

/// Loss components of one step. Disabled terms are zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRow {
    pub iteration: u64,
    pub content: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub percep: f64,
    pub total: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    /// L2 norm of the gradient reaching the noise scales.
    pub noise_grad_norm: f64,
}

impl LossRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iteration,
            self.content,
            self.gan_g,
            self.gan_d,
            self.percep,
            self.total,
            self.lr_g,
            self.lr_d
        )
    }

    fn all_finite(&self) -> bool {
        [
            self.content,
            self.gan_g,
            self.gan_d,
            self.percep,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Generator, optional discriminator, optimizers and the data stream.
pub struct Trainer {
    config: RunConfig,
    generator: Generator,
    discriminator: Option<Discriminator>,
    features: Option<FeatureExtractor>,
    cycle_op: Option<ResizeOperator>,
    opt_g: Adam,
    opt_d: Adam,
    stream: PatchStream,
    iteration: u64,
    collapse_run: u64,
    rows: Vec<LossRow>,
    out_dir: Option<PathBuf>,
    verbose: bool,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("name", &self.config.name)
            .field("stage", &self.config.stage)
            .field("iteration", &self.iteration)
            .finish()
    }
}

impl Trainer {
    /// Fresh trainer. A GAN-stage config with `init_checkpoint` starts from
    /// that checkpoint's generator weights.
    pub fn new(mut config: RunConfig, source: ImageSource) -> Result<Self> {
        if config.stage == Stage::Pretrain {
            let forced = LossWeights {
                content_mode: ContentMode::StrictL1,
                perceptual_mode: PerceptualMode::Off,
                w_content: 1.0,
                lambda_gan: 0.0,
                w_percep: 0.0,
            };
            if config.loss != forced {
                log::warn!("pretraining uses plain L1; ignoring configured loss weights");
                config.loss = forced;
            }
        }
        config.validate()?;
        let generator = Generator::new(config.generator_config(), DTYPE, config.seed)?;
        if config.stage == Stage::Gan {
            if let Some(init) = &config.init_checkpoint {
                let m = read_manifest(init)?;
                if m.config.generator_config().num_rrdb != config.arch.num_rrdb
                    || m.config.arch.trunk_channels != config.arch.trunk_channels
                    || m.config.scale != config.scale
                {
                    return Err(Error::Checkpoint(format!(
                        "initial checkpoint {} has a different generator architecture",
                        init.display()
                    )));
                }
                generator
                    .params()
                    .load(&load_tensors(&init.join(GENERATOR_FILE))?)?;
            }
        }
        let discriminator = if config.uses_discriminator() {
            Some(Discriminator::new(
                config.discriminator_config(),
                DTYPE,
                config.seed,
            )?)
        } else {
            None
        };
        let features = match config.loss.perceptual_mode {
            _ if config.loss.effective_percep() == 0.0 => None,
            PerceptualMode::Off => None,
            PerceptualMode::PretrainedFeatures => Some(FeatureExtractor::from_source(
                FeatureSource::PretrainedVgg19,
                config.feature_seed,
                DTYPE,
            )?),
            PerceptualMode::FixedRandomFeatures => {
                Some(FeatureExtractor::random(config.feature_seed, DTYPE)?)
            }
        };
        let cycle_op =
            if config.loss.content_mode == ContentMode::Cycle && config.loss.w_content > 0.0 {
                Some(downsampler(
                    config.patch_size,
                    config.patch_size,
                    config.scale,
                )?)
            } else {
                None
            };
        let options = PatchOptions {
            patch_size: config.patch_size,
            scale: config.scale,
            filter_blur: config.blur_filter,
            blur_threshold: config.blur_threshold,
        };
        let buffer = PatchBuffer::new(config.buffer_capacity, config.per_image_yield);
        let stream = PatchStream::new(source, options, buffer, config.batch_size, config.seed)?;
        Ok(Self {
            config,
            generator,
            discriminator,
            features,
            cycle_op,
            opt_g: Adam::default(),
            opt_d: Adam::default(),
            stream,
            iteration: 0,
            collapse_run: 0,
            rows: Vec::new(),
            out_dir: None,
            verbose: false,
        })
    }

    /// Restores full training state from a checkpoint directory. If
    /// `expected` is given, its architecture must match the stored one.
    pub fn resume(dir: &Path, source: ImageSource, expected: Option<&RunConfig>) -> Result<Self> {
        let m = read_manifest(dir)?;
        if let Some(e) = expected {
            if e.generator_config() != m.config.generator_config()
                || (m.config.uses_discriminator()
                    && e.discriminator_config() != m.config.discriminator_config())
            {
                return Err(Error::Checkpoint(format!(
                    "checkpoint {} was written for a different architecture",
                    dir.display()
                )));
            }
        }
        let mut config = m.config.clone();
        // weights come from the checkpoint itself
        config.init_checkpoint = None;
        let mut t = Self::new(config, source)?;
        t.config.init_checkpoint = m.config.init_checkpoint.clone();
        t.generator
            .params()
            .load(&load_tensors(&dir.join(GENERATOR_FILE))?)?;
        t.opt_g.load_state(
            &load_tensors(&dir.join(OPTIM_G_FILE))?,
            t.generator.params(),
        )?;
        if let Some(d) = &t.discriminator {
            d.load_state(&load_tensors(&dir.join(DISCRIMINATOR_FILE))?)?;
            t.opt_d
                .load_state(&load_tensors(&dir.join(OPTIM_D_FILE))?, d.params())?;
        }
        t.stream.restore(&m.stream)?;
        t.iteration = m.iteration;
        t.collapse_run = m.collapse_run;
        Ok(t)
    }

    /// Directory for the loss CSV and checkpoints. An existing CSV is cut
    /// back to the rows before the current iteration and appended to.
    pub fn set_output_dir(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(LOSS_CSV_FILE);
        let mut text = String::from(LOSS_CSV_HEADER);
        text.push('\n');
        if self.iteration > 0 {
            if let Ok(old) = std::fs::read_to_string(&csv) {
                for line in old.lines().skip(1) {
                    let it: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
                    if matches!(it, Some(i) if i < self.iteration) {
                        text.push_str(line);
                        text.push('\n');
                    }
                }
            }
        }
        std::fs::write(&csv, text).map_err(|e| Error::io(&csv, e))?;
        self.out_dir = Some(dir.to_path_buf());
        Ok(())
    }

    /// Print a progress line every `log_every` steps.
    pub fn set_verbose(&mut self, on: bool) {
        self.verbose = on;
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> Option<&Discriminator> {
        self.discriminator.as_ref()
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Rows logged by this trainer instance.
    pub fn rows(&self) -> &[LossRow] {
        &self.rows
    }

    fn batch_tensors(&mut self) -> Result<(Tensor, Tensor)> {
        let batch = self.stream.next_batch(self.iteration)?;
        let hr: Vec<&ImageTensor> = batch.iter().map(|r| &r.hr_patch).collect();
        let lr: Vec<&ImageTensor> = batch.iter().map(|r| &r.lr_patch).collect();
        Ok((
            ImageTensor::batch_to_tensor(&hr, DTYPE, &Device::Cpu)?,
            ImageTensor::batch_to_tensor(&lr, DTYPE, &Device::Cpu)?,
        ))
    }

    /// One generator step followed by one discriminator step.
    pub fn step(&mut self) -> Result<LossRow> {
        let it = self.iteration;
        let (hr, lr) = self.batch_tensors()?;
        let lr_g = lr_at(&self.config.lr_g, it);
        let lr_d = if self.discriminator.is_some() && self.config.train_discriminator {
            lr_at(&self.config.lr_d, it)
        } else {
            0.0
        };
        let w = self.config.loss;
        let d_mode = if self.config.train_discriminator {
            Mode::Train
        } else {
            Mode::Eval
        };

        // noise stays off while pretraining
        let g_mode = if self.config.stage == Stage::Gan {
            Mode::Train
        } else {
            Mode::Eval
        };
        let sr = self.generator.forward(
            &lr,
            g_mode,
            derive_seed(self.config.seed, Stream::Noise, it),
        );
        let sr = match sr {
            Ok(t) => t,
            Err(Error::NonFinite(msg)) => return Err(self.diverged(it, &msg)),
            Err(e) => return Err(e),
        };

        let content = match w.content_mode {
            _ if w.w_content == 0.0 => None,
            ContentMode::StrictL1 => Some(l1_loss_tensor(&sr, &hr)?),
            ContentMode::Cycle => Some(cycle_loss_tensor(
                &sr,
                &lr,
                self.cycle_op.as_ref().expect("built with cycle mode"),
            )?),
            ContentMode::None => None,
        };
        let percep = match &self.features {
            Some(fx) => Some(perceptual_loss_tensor(&sr, &hr, fx)?),
            None => None,
        };
        let gan = match &self.discriminator {
            Some(d) if w.lambda_gan > 0.0 => {
                let real = d.score(&hr, &lr, d_mode)?.detach();
                let fake = d.score(&sr, &lr, d_mode)?;
                Some(ragan_g_loss_tensor(&real, &fake)?)
            }
            _ => None,
        };
        let total =
            total_generator_loss_tensor(&w, content.as_ref(), gan.as_ref(), percep.as_ref())?;
        let mut row = LossRow {
            iteration: it,
            content: content.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
            gan_g: gan.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
            gan_d: 0.0,
            percep: percep.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
            total: scalar(&total)?,
            lr_g,
            lr_d,
            noise_grad_norm: 0.0,
        };
        if !row.all_finite() {
            return Err(self.dump_divergence(&row, "generator loss is not finite"));
        }
        let grads = total.backward()?;
        let mut sq = 0.0;
        for v in self.generator.noise_scale_vars() {
            if let Some(g) = grads.get(v.as_tensor()) {
                sq += scalar(&g.sqr()?.sum_all()?)?;
            }
        }
        row.noise_grad_norm = sq.sqrt();
        self.opt_g
            .step(self.generator.params(), &grads, lr_g, self.config.grad_clip)?;
        drop(grads);

        if let (Some(d), true) = (&self.discriminator, self.config.train_discriminator) {
            let fake = sr.detach();
            let real_logits = d.score(&hr, &lr, Mode::Train)?;
            let fake_logits = d.score(&fake, &lr, Mode::Train)?;
            let d_loss = match ragan_d_loss_tensor(&real_logits, &fake_logits) {
                Ok(l) => l,
                Err(Error::NonFinite(msg)) => return Err(self.dump_divergence(&row, &msg)),
                Err(e) => return Err(e),
            };
            row.gan_d = scalar(&d_loss)?;
            if !row.gan_d.is_finite() {
                return Err(self.dump_divergence(&row, "discriminator loss is not finite"));
            }
            let grads = d_loss.backward()?;
            self.opt_d
                .step(d.params(), &grads, lr_d, self.config.grad_clip)?;
            if row.gan_d < COLLAPSE_THRESHOLD {
                self.collapse_run += 1;
                if self.collapse_run == COLLAPSE_WINDOW {
                    log::warn!(
                        "discriminator loss below {COLLAPSE_THRESHOLD} for {COLLAPSE_WINDOW} consecutive iterations (at {it})"
                    );
                }
            } else {
                self.collapse_run = 0;
            }
        }

        self.iteration += 1;
        if let Some(dir) = &self.out_dir {
            let path = dir.join(LOSS_CSV_FILE);
            let mut f = std::fs::OpenOptions::new()
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{}", row.csv_line()).map_err(|e| Error::io(&path, e))?;
        }
        if self.verbose && self.iteration.is_multiple_of(self.config.log_every) {
            println!(
                "[{}] iter {:>7} total {:.5} content {:.5} gan_g {:.5} gan_d {:.5} percep {:.5} lr_g {:.3e}",
                self.config.name, self.iteration, row.total, row.content, row.gan_g, row.gan_d, row.percep, lr_g
            );
        }
        self.rows.push(row);
        Ok(row)
    }

    fn diverged(&self, iteration: u64, message: &str) -> Error {
        let row = LossRow {
            iteration,
            content: f64::NAN,
            gan_g: f64::NAN,
            gan_d: f64::NAN,
            percep: f64::NAN,
            total: f64::NAN,
            lr_g: lr_at(&self.config.lr_g, iteration),
            lr_d: lr_at(&self.config.lr_d, iteration),
            noise_grad_norm: f64::NAN,
        };
        self.dump_divergence(&row, message)
    }

    /// Writes a diagnostic JSON next to the loss log and builds the error.
    fn dump_divergence(&self, row: &LossRow, message: &str) -> Error {
        if let Some(dir) = &self.out_dir {
            let dump = serde_json::json!({
                "iteration": row.iteration,
                "message": message,
                "losses": {
                    "content": fmt_num(row.content),
                    "gan_g": fmt_num(row.gan_g),
                    "gan_d": fmt_num(row.gan_d),
                    "percep": fmt_num(row.percep),
                    "total": fmt_num(row.total),
                },
                "lr_g": row.lr_g,
                "lr_d": row.lr_d,
                "generator_params_finite": self.generator.params().all_finite().ok(),
                "optimizer_moments_finite": self.opt_g.moments_finite().ok(),
                "stream": self.stream.state().cursor,
                "config": &self.config,
            });
            let path = dir.join(format!("divergence_iter_{:08}.json", row.iteration));
            if let Ok(text) = serde_json::to_string_pretty(&dump) {
                let _ = std::fs::write(path, text);
            }
        }
        Error::Divergence {
            iteration: row.iteration,
            message: message.to_string(),
        }
    }

    fn manifest(&self) -> Manifest {
        Manifest {
            version: MANIFEST_VERSION,
            stage: self.config.stage,
            iteration: self.iteration,
            rng_seed: self.config.seed,
            loss_weights: self.config.loss,
            config: self.config.clone(),
            stream: self.stream.state(),
            collapse_run: self.collapse_run,
        }
    }

    /// Writes the full training state to `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_tensors(
            &dir.join(GENERATOR_FILE),
            &self.generator.params().tensors(),
        )?;
        save_tensors(&dir.join(OPTIM_G_FILE), &self.opt_g.state_tensors()?)?;
        if let Some(d) = &self.discriminator {
            save_tensors(&dir.join(DISCRIMINATOR_FILE), &d.state_tensors())?;
            save_tensors(&dir.join(OPTIM_D_FILE), &self.opt_d.state_tensors()?)?;
        }
        write_manifest(dir, &self.manifest())
    }

    /// Runs until `target` completed iterations, checkpointing on the
    /// configured cadence when an output directory is set. Returns the last
    /// checkpoint written, if any.
    pub fn run_until(&mut self, target: u64) -> Result<Option<PathBuf>> {
        let mut last = None;
        while self.iteration < target {
            self.step()?;
            if let Some(dir) = self.out_dir.clone() {
                if self.iteration.is_multiple_of(self.config.checkpoint_every) || self.iteration == target {
                    let ck = checkpoint_dir(&dir, self.iteration);
                    self.save_checkpoint(&ck)?;
                    last = Some(ck);
                }
            }
        }
        Ok(last)
    }

    /// Runs to `total_iterations` and returns the final checkpoint directory.
    pub fn run(&mut self) -> Result<PathBuf> {
        let dir = self
            .out_dir
            .clone()
            .ok_or_else(|| Error::Config("no output directory set".into()))?;
        let target = self.config.total_iterations;
        self.run_until(target)?;
        let ck = checkpoint_dir(&dir, self.iteration);
        if !ck.join(crate::train::checkpoint::MANIFEST_FILE).is_file() {
            self.save_checkpoint(&ck)?;
        }
        Ok(ck)
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

/// PSNR-oriented L1 pretraining; returns the final checkpoint.
pub fn pretrain(config: RunConfig, source: ImageSource, out_dir: &Path) -> Result<PathBuf> {
    if config.stage != Stage::Pretrain {
        return Err(Error::Config(
            "pretrain needs a pretrain-stage config".into(),
        ));
    }
    let mut t = Trainer::new(config, source)?;
    t.set_output_dir(out_dir)?;
    t.run()
}

/// Adversarial stage initialized from `init`.
pub fn train_gan(
    mut config: RunConfig,
    init: Option<&Path>,
    source: ImageSource,
    out_dir: &Path,
) -> Result<PathBuf> {
    if config.stage != Stage::Gan {
        return Err(Error::Config("train_gan needs a gan-stage config".into()));
    }
    if let Some(p) = init {
        config.init_checkpoint = Some(p.to_path_buf());
    }
    let mut t = Trainer::new(config, source)?;
    t.set_output_dir(out_dir)?;
    t.run()
}
