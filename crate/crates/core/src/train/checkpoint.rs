//! Checkpoint directories: weight archives plus a JSON manifest.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::StreamState;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::losses::LossWeights;
use crate::train::config::{RunConfig, Stage};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const GENERATOR_FILE: &str = "generator.safetensors";
pub const DISCRIMINATOR_FILE: &str = "discriminator.safetensors";
pub const OPTIM_G_FILE: &str = "optim_g.safetensors";
pub const OPTIM_D_FILE: &str = "optim_d.safetensors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub stage: Stage,
    /// Completed optimizer steps.
    pub iteration: u64,
    pub rng_seed: u64,
    pub loss_weights: LossWeights,
    pub config: RunConfig,
    pub stream: StreamState,
    /// Consecutive steps with a near-zero discriminator loss.
    #[serde(default)]
    pub collapse_run: u64,
}

/// `<root>/checkpoints/iter_00001234`.
pub fn checkpoint_dir(root: &Path, iteration: u64) -> PathBuf {
    root.join("checkpoints")
        .join(format!("iter_{iteration:08}"))
}

/// Checkpoint directories below `root`, oldest first.
pub fn list_checkpoints(root: &Path) -> Result<Vec<PathBuf>> {
    let dir = root.join("checkpoints");
    let rd = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    out.sort();
    Ok(out)
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Checkpoint(format!(
            "manifest version {} is not supported (expected {MANIFEST_VERSION})",
            m.version
        )));
    }
    Ok(m)
}

pub fn save_tensors(path: &Path, tensors: &HashMap<String, Tensor>) -> Result<()> {
    candle_core::safetensors::save(tensors, path)
        .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))
}

pub fn load_tensors(path: &Path) -> Result<HashMap<String, Tensor>> {
    if !path.is_file() {
        return Err(Error::Checkpoint(format!("{} is missing", path.display())));
    }
    candle_core::safetensors::load(path, &Device::Cpu)
        .map_err(|e| Error::Checkpoint(format!("reading {}: {e}", path.display())))
}

/// Rebuilds the generator stored in a checkpoint directory.
pub fn load_generator(dir: &Path, dtype: DType) -> Result<Generator> {
    let m = read_manifest(dir)?;
    let g = Generator::new(m.config.generator_config(), dtype, m.config.seed)?;
    g.params().load(&load_tensors(&dir.join(GENERATOR_FILE))?)?;
    Ok(g)
}
