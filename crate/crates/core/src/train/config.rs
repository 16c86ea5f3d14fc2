//! Declarative run configuration with named presets and dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::{ContentMode, LossWeights, PerceptualMode};
use crate::train::schedule::ScheduleSpec;

pub const CONFIG_VERSION: u32 = 1;

pub const PRESETS: [&str; 10] = [
    "table1_a", "table1_b", "table1_c", "table1_d", "table1_e", "table1_f", "table1_g", "table2_c",
    "table2_d", "table2_e",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Gan,
}

/// Full-size networks and iteration counts, or a shrunken variant that runs
/// on one CPU core in minutes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Paper,
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!(
                "unknown profile {other:?} (paper or desk)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub num_rrdb: usize,
    pub trunk_channels: usize,
    pub growth_channels: usize,
    pub disc_channels: usize,
    pub disc_batch_norm: bool,
}

impl ArchConfig {
    pub fn paper() -> Self {
        Self {
            num_rrdb: 23,
            trunk_channels: 64,
            growth_channels: 32,
            disc_channels: 64,
            disc_batch_norm: true,
        }
    }

    pub fn desk() -> Self {
        Self {
            num_rrdb: 3,
            trunk_channels: 32,
            growth_channels: 16,
            disc_channels: 32,
            disc_batch_norm: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub name: String,
    pub stage: Stage,
    pub seed: u64,
    pub batch_size: usize,
    pub total_iterations: u64,
    /// HR patch edge in pixels.
    pub patch_size: usize,
    pub scale: usize,
    pub blur_filter: bool,
    pub blur_threshold: f64,
    pub noise_enabled: bool,
    pub condition_discriminator: bool,
    pub train_discriminator: bool,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub buffer_capacity: usize,
    pub per_image_yield: usize,
    /// Seed of the random perceptual feature stack.
    pub feature_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_dir: Option<PathBuf>,
    /// Checkpoint whose generator initializes the GAN stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
    pub arch: ArchConfig,
    pub loss: LossWeights,
    pub lr_g: ScheduleSpec,
    pub lr_d: ScheduleSpec,
}

fn pretrain_loss() -> LossWeights {
    LossWeights {
        content_mode: ContentMode::StrictL1,
        perceptual_mode: PerceptualMode::Off,
        w_content: 1.0,
        lambda_gan: 0.0,
        w_percep: 0.0,
    }
}

impl RunConfig {
    fn base(name: &str, stage: Stage) -> Self {
        Self {
            version: CONFIG_VERSION,
            name: name.to_string(),
            stage,
            seed: 0,
            batch_size: 16,
            total_iterations: 500_000,
            patch_size: 128,
            scale: 4,
            blur_filter: false,
            blur_threshold: crate::data::DEFAULT_BLUR_THRESHOLD,
            noise_enabled: false,
            condition_discriminator: false,
            train_discriminator: stage == Stage::Gan,
            checkpoint_every: 5_000,
            log_every: 100,
            buffer_capacity: crate::data::buffer::DEFAULT_CAPACITY,
            per_image_yield: crate::data::buffer::DEFAULT_PER_IMAGE_YIELD,
            feature_seed: 0,
            grad_clip: None,
            train_dir: None,
            init_checkpoint: None,
            arch: ArchConfig::paper(),
            loss: match stage {
                Stage::Pretrain => pretrain_loss(),
                Stage::Gan => LossWeights::eq1_pirm(),
            },
            lr_g: match stage {
                Stage::Pretrain => ScheduleSpec::pretrain(),
                Stage::Gan => ScheduleSpec::gan(),
            },
            lr_d: ScheduleSpec::gan(),
        }
    }

    /// Named ablation presets. Table 2 presets run ×16 with an RRDB-only
    /// trunk; the receptive-field blocks of that setup are not implemented.
    pub fn preset(name: &str, profile: Profile) -> Result<Self> {
        let mut c = match name {
            "table1_a" => Self::base(name, Stage::Pretrain),
            "table1_b" => Self {
                blur_filter: true,
                ..Self::base(name, Stage::Pretrain)
            },
            "table1_c" | "table2_c" => Self {
                blur_filter: true,
                ..Self::base(name, Stage::Gan)
            },
            "table1_d" => Self {
                condition_discriminator: true,
                ..Self::preset("table1_c", Profile::Paper)?
            },
            "table1_e" | "table2_d" => Self {
                noise_enabled: true,
                condition_discriminator: true,
                ..Self::preset("table1_c", Profile::Paper)?
            },
            "table1_f" | "table2_e" => Self {
                loss: LossWeights::eq3_default(),
                ..Self::preset("table1_e", Profile::Paper)?
            },
            "table1_g" => {
                let mut c = Self::preset("table1_f", Profile::Paper)?;
                c.loss.content_mode = ContentMode::None;
                c.loss.perceptual_mode = PerceptualMode::Off;
                c
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        c.name = name.to_string();
        if name.starts_with("table2") {
            log::warn!("{name}: x16 preset uses an RRDB-only trunk; receptive-field blocks are not implemented");
            c.scale = 16;
            c.batch_size = 4;
            c.total_iterations = 200_000;
            c.patch_size = 256;
            c.lr_g = ScheduleSpec::with_milestones(2e-5, vec![50_000, 100_000]);
            c.lr_d = c.lr_g.clone();
        }
        if profile == Profile::Desk {
            c.shrink_to_desk();
        }
        Ok(c)
    }

    /// Tiny networks, batch 4, 64-pixel patches and a few hundred steps.
    /// Learning rates shrink with the batch: linearly for pretraining and by
    /// 5× for the adversarial stage.
    pub fn shrink_to_desk(&mut self) {
        let factor = 4.0 / self.batch_size as f64;
        self.batch_size = 4;
        self.patch_size = 64;
        self.scale = self.scale.min(4);
        self.arch = ArchConfig::desk();
        self.checkpoint_every = 50;
        self.buffer_capacity = 256;
        self.per_image_yield = 32;
        if self.loss.perceptual_mode == PerceptualMode::PretrainedFeatures {
            self.loss.perceptual_mode = PerceptualMode::FixedRandomFeatures;
        }
        match self.stage {
            Stage::Pretrain => {
                self.total_iterations = 200;
                self.lr_g = self.lr_g.scaled(factor);
            }
            Stage::Gan => {
                self.total_iterations = 100;
                if factor < 1.0 {
                    self.lr_g = self.lr_g.scaled(0.2);
                    self.lr_d = self.lr_d.scaled(0.2);
                }
            }
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            num_rrdb: self.arch.num_rrdb,
            trunk_channels: self.arch.trunk_channels,
            growth_channels: self.arch.growth_channels,
            scale: self.scale,
            noise_enabled: self.noise_enabled,
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            base_channels: self.arch.disc_channels,
            input_size: self.patch_size,
            conditioned: self.condition_discriminator,
            batch_norm: self.arch.disc_batch_norm,
        }
    }

    /// The run needs a discriminator at all.
    pub fn uses_discriminator(&self) -> bool {
        self.stage == Stage::Gan && (self.loss.lambda_gan > 0.0 || self.train_discriminator)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        for (name, v) in [
            ("batch_size", self.batch_size as u64),
            ("patch_size", self.patch_size as u64),
            ("checkpoint_every", self.checkpoint_every),
            ("log_every", self.log_every),
            ("buffer_capacity", self.buffer_capacity as u64),
            ("per_image_yield", self.per_image_yield as u64),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.patch_size.is_multiple_of(self.scale) {
            return Err(Error::Config(format!(
                "patch_size {} is not divisible by scale {}",
                self.patch_size, self.scale
            )));
        }
        if self.batch_size > self.buffer_capacity {
            return Err(Error::Config("batch_size exceeds buffer_capacity".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be > 0, got {c}")));
            }
        }
        self.generator_config().validate()?;
        if self.uses_discriminator() {
            self.discriminator_config().validate()?;
        }
        self.loss.validate()?;
        self.lr_g.validate()?;
        self.lr_d.validate()?;
        Ok(())
    }

    /// Builds a config from TOML text. A top-level `preset` (and optional
    /// `profile`) key selects the base that the remaining keys overlay.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        let profile = match table.remove("profile") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(_) => return Err(Error::Config("profile must be a string".into())),
            None => Profile::Paper,
        };
        let mut merged = match table.remove("preset") {
            Some(toml::Value::String(p)) => Self::preset(&p, profile)?.to_table()?,
            Some(_) => return Err(Error::Config("preset must be a string".into())),
            None => toml::Table::new(),
        };
        merge(&mut merged, table);
        Self::from_table(merged)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let c: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("{e}")))?;
        c.validate()?;
        Ok(c)
    }

    fn to_table(&self) -> Result<toml::Table> {
        toml::Table::try_from(self).map_err(|e| Error::Config(format!("{e}")))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("{e}")))
    }

    /// Applies `key.path=value` overrides. Values parse as TOML literals and
    /// fall back to bare strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table = self.to_table()?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = parse_value(raw.trim());
            let path: Vec<&str> = key.trim().split('.').collect();
            set_path(&mut table, &path, value)?;
        }
        Self::from_table(table)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, path: &[&str], value: toml::Value) -> Result<()> {
    match path {
        [] => Err(Error::Config("empty override key".into())),
        [leaf] => {
            table.insert(leaf.to_string(), value);
            Ok(())
        }
        [head, rest @ ..] => match table.get_mut(*head) {
            Some(toml::Value::Table(t)) => set_path(t, rest, value),
            _ => Err(Error::Config(format!("unknown config section {head:?}"))),
        },
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for p in PRESETS {
            for profile in [Profile::Paper, Profile::Desk] {
                let c = RunConfig::preset(p, profile).unwrap();
                c.validate()
                    .unwrap_or_else(|e| panic!("{p} {profile:?}: {e}"));
            }
        }
        assert!(RunConfig::preset("table1_h", Profile::Paper).is_err());
    }

    #[test]
    fn ablation_flags() {
        let f = RunConfig::preset("table1_f", Profile::Paper).unwrap();
        assert!(f.blur_filter && f.noise_enabled && f.condition_discriminator);
        assert_eq!(f.loss.content_mode, ContentMode::Cycle);
        assert_eq!(f.loss.w_percep, 10.0);
        let c = RunConfig::preset("table1_c", Profile::Paper).unwrap();
        assert!(!c.noise_enabled && !c.condition_discriminator);
        assert_eq!(c.loss.content_mode, ContentMode::StrictL1);
        let g = RunConfig::preset("table1_g", Profile::Paper).unwrap();
        assert_eq!(g.loss.content_mode, ContentMode::None);
        assert_eq!(g.loss.perceptual_mode, PerceptualMode::Off);
        let a = RunConfig::preset("table1_a", Profile::Paper).unwrap();
        assert_eq!(
            (a.stage, a.blur_filter, a.batch_size),
            (Stage::Pretrain, false, 16)
        );
        let d = RunConfig::preset("table1_f", Profile::Desk).unwrap();
        assert_eq!(d.arch.num_rrdb, 3);
        assert_eq!(d.loss.perceptual_mode, PerceptualMode::FixedRandomFeatures);
        assert_eq!(d.lr_g.initial_lr, 2e-5);
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let c = RunConfig::preset("table1_e", Profile::Desk).unwrap();
        let text = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);

        let o = c
            .with_overrides(&[
                "seed=7",
                "loss.lambda_gan=0.01",
                "grad_clip=1.5",
                "name=run x",
            ])
            .unwrap();
        assert_eq!(
            (o.seed, o.loss.lambda_gan, o.grad_clip),
            (7, 0.01, Some(1.5))
        );
        assert_eq!(o.name, "run x");
        assert!(c.with_overrides(&["sed=7"]).is_err());
        assert!(c.with_overrides(&["loss.eta=1"]).is_err());
        assert!(c.with_overrides(&["nope.x=1"]).is_err());
        assert!(c.with_overrides(&["batch_size=0"]).is_err());
    }

    #[test]
    fn preset_files_overlay() {
        let c = RunConfig::from_toml_str(
            "preset = \"table1_f\"\nprofile = \"desk\"\nseed = 3\n[arch]\nnum_rrdb = 2\n",
        )
        .unwrap();
        assert_eq!((c.seed, c.arch.num_rrdb, c.arch.trunk_channels), (3, 2, 32));
        assert!(RunConfig::from_toml_str("preset = \"table1_f\"\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml_str("version = 1\n").is_err());
    }
}
