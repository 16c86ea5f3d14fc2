//! Two-stage training: L1 pretraining, then the adversarial stage.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod schedule;
pub mod trainer;

pub use adam::Adam;
pub use checkpoint::{list_checkpoints, load_generator, read_manifest, Manifest};
pub use config::{ArchConfig, Profile, RunConfig, Stage, PRESETS};
pub use schedule::{lr_at, ScheduleSpec};
pub use trainer::{loss_csv, pretrain, train_gan, LossRow, Trainer, LOSS_CSV_HEADER};
