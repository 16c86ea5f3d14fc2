//! Command-line front end.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::blur::{list_images, scan_dataset};
use crate::data::{ImageSource, DEFAULT_BLUR_THRESHOLD};
use crate::error::{Error, Result};
use crate::generator::{noise_stats_csv, NoiseScaleSummary};
use crate::image::ImageTensor;
use crate::metrics::{evaluate, DatasetSpec, EvalProtocol, Lpips, LpipsBackend};
use crate::nn::Mode;
use crate::rng::{derive_seed, Stream};
use crate::train::checkpoint::{list_checkpoints, load_generator};
use crate::train::{Profile, RunConfig, Stage, Trainer};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;
pub const EXIT_BACKEND: i32 = 5;

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Shape(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Io { .. } | Error::Image(_) => EXIT_DATA,
        Error::Divergence { .. } | Error::NonFinite(_) => EXIT_DIVERGENCE,
        Error::BackendUnavailable(_) => EXIT_BACKEND,
        _ => EXIT_FAILURE,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "manysr",
    version,
    about = "One-to-many perceptual super-resolution"
)]
pub struct Cli {
    /// Base seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Validate inputs and print the plan without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Serialize)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named preset (table1_a ... table1_g, table2_c ... table2_e).
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// Preset profile: paper or desk.
    #[arg(long, default_value = "paper")]
    pub profile: String,
    /// Dotted-key override, e.g. `--set loss.lambda_gan=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the fraction of blurry patches in a folder of PNGs.
    BlurScan {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BLUR_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = 96)]
        patch: usize,
        #[arg(long, default_value_t = 16_000)]
        samples: usize,
        /// Report path (JSON); printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a training folder and write a dataset manifest.
    Prepare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Minimum usable edge length (the HR patch size).
        #[arg(long, default_value_t = 128)]
        patch: usize,
    },
    /// L1 pretraining.
    TrainPsnr {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Adversarial training.
    TrainGan {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Pretrained checkpoint providing the initial generator.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Score checkpoints on HR datasets (LR inputs are bicubic downscales).
    Eval {
        /// Checkpoint directories, or `lastN` together with `--run`.
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<String>,
        /// Training output directory used to resolve `lastN`.
        #[arg(long)]
        run: Option<PathBuf>,
        /// `NAME=DIR`, repeatable.
        #[arg(long = "dataset", required = true)]
        datasets: Vec<String>,
        #[arg(long, default_value = "proxy")]
        lpips: String,
        /// Score RGB instead of luma.
        #[arg(long)]
        rgb: bool,
        /// Border crop in pixels (defaults to the scale factor).
        #[arg(long)]
        crop_border: Option<usize>,
        #[arg(long, default_value = "model")]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Super-resolve images, optionally drawing several samples each.
    Sr {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PNG file or folder of PNGs.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        samples: usize,
    },
    /// Per-block summary of the learned noise scales (CSV and SVG box plot).
    NoiseStats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve_config(cfg: &ConfigArgs, seed: Option<u64>) -> Result<RunConfig> {
    let base = match (&cfg.config, &cfg.preset) {
        (Some(path), _) => RunConfig::from_file(path)?,
        (None, Some(p)) => RunConfig::preset(p, cfg.profile.parse::<Profile>()?)?,
        (None, None) => return Err(Error::Config("give --config or --preset".into())),
    };
    let mut overrides = cfg.overrides.clone();
    if let Some(s) = seed {
        overrides.push(format!("seed={s}"));
    }
    base.with_overrides(&overrides)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn snapshot<T: Serialize>(dir: &Path, spec: &T) -> Result<()> {
    write_file(
        &dir.join("command.json"),
        &serde_json::to_string_pretty(spec)?,
    )
}

#[derive(Serialize)]
struct PrepareEntry {
    file: String,
    width: u32,
    height: u32,
    usable: bool,
}

fn train(
    cfg: &ConfigArgs,
    seed: Option<u64>,
    dry_run: bool,
    stage: Stage,
    data: Option<&Path>,
    out: &Path,
    init: Option<&Path>,
    resume: Option<&Path>,
    quiet: bool,
) -> Result<()> {
    let mut config = resolve_config(cfg, seed)?;
    if config.stage != stage {
        return Err(Error::Config(format!(
            "config {:?} is a {:?}-stage config",
            config.name, config.stage
        )));
    }
    if let Some(d) = data {
        config.train_dir = Some(d.to_path_buf());
    }
    if let Some(i) = init {
        config.init_checkpoint = Some(i.to_path_buf());
    }
    let dir = config
        .train_dir
        .clone()
        .ok_or_else(|| Error::Config("no training data: pass --data or set train_dir".into()))?;
    let source = ImageSource::from_dir(&dir)?;
    if dry_run {
        println!(
            "plan: {:?} stage, {} iterations, batch {}, patch {}, x{}",
            config.stage,
            config.total_iterations,
            config.batch_size,
            config.patch_size,
            config.scale
        );
        println!("data: {} images in {}", source.len(), dir.display());
        println!("output: {}", out.display());
        print!("{}", config.to_toml_string()?);
        return Ok(());
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut trainer = match resume {
        Some(r) => Trainer::resume(r, source, Some(&config))?,
        None => Trainer::new(config, source)?,
    };
    write_file(
        &out.join("effective_config.toml"),
        &trainer.config().to_toml_string()?,
    )?;
    trainer.set_verbose(!quiet);
    trainer.set_output_dir(out)?;
    let ck = trainer.run()?;
    println!("final checkpoint: {}", ck.display());
    Ok(())
}

fn resolve_checkpoints(specs: &[String], run: Option<&Path>) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for s in specs {
        if let Some(n) = s.strip_prefix("last").and_then(|n| n.parse::<usize>().ok()) {
            let run = run.ok_or_else(|| Error::Config(format!("{s} needs --run")))?;
            let all = list_checkpoints(run)?;
            if all.is_empty() {
                return Err(Error::Data(format!(
                    "no checkpoints under {}",
                    run.display()
                )));
            }
            out.extend(all[all.len().saturating_sub(n)..].iter().cloned());
        } else {
            out.push(PathBuf::from(s));
        }
    }
    Ok(out)
}

/// Box plot of per-block noise scales.
pub fn noise_stats_svg(stats: &[NoiseScaleSummary]) -> String {
    let (w, h, pad) = (60.0 + 24.0 * stats.len() as f64, 320.0, 40.0);
    let top = stats
        .iter()
        .map(|s| s.max)
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let y = |v: f64| h - pad - (v / top) * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        h - pad,
        w - 10.0,
        h - pad
    );
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#,
        h - pad
    );
    let _ = writeln!(s, r#"<text x="4" y="{}">{top:.3}</text>"#, pad + 4.0);
    let _ = writeln!(s, r#"<text x="4" y="{}">0</text>"#, h - pad);
    for (i, st) in stats.iter().enumerate() {
        let cx = pad + 16.0 + 24.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{cx}" y1="{}" x2="{cx}" y2="{}" stroke="black"/>"#,
            y(st.min),
            y(st.max)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="16" height="{}" fill="lightsteelblue" stroke="black"/>"#,
            cx - 8.0,
            y(st.q3),
            (y(st.q1) - y(st.q3)).max(0.5)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black" stroke-width="2"/>"#,
            cx - 8.0,
            y(st.median),
            cx + 8.0,
            y(st.median)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{}</text>"#,
            cx - 3.0,
            h - pad + 14.0,
            st.block_index
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}">block</text>"#,
        w / 2.0 - 12.0,
        h - 8.0
    );
    s.push_str("</svg>\n");
    s
}

fn load_inputs(input: &Path) -> Result<Vec<(String, ImageTensor)>> {
    let files = if input.is_dir() {
        list_images(input)?
    } else {
        vec![input.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::Data(format!("no PNG images in {}", input.display())));
    }
    files
        .iter()
        .map(|p| {
            let img = ImageTensor::load_png(p)?;
            let img = if img.channels() == 1 {
                ImageTensor::new(
                    img.height(),
                    img.width(),
                    3,
                    img.data().iter().flat_map(|&v| [v, v, v]).collect(),
                )?
            } else {
                img
            };
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".into());
            Ok((stem, img))
        })
        .collect()
}

#[derive(Serialize)]
struct Spec<'a, T: Serialize> {
    command: &'a str,
    seed: Option<u64>,
    args: T,
}

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    let dry = cli.dry_run;
    match &cli.command {
        Command::BlurScan {
            data,
            threshold,
            patch,
            samples,
            out,
        } => {
            if dry {
                let n = list_images(data)?.len();
                println!("plan: scan {samples} patches of {patch}px from {n} images in {}, threshold {threshold}", data.display());
                return Ok(());
            }
            let report = scan_dataset(data, *patch, *samples, *threshold, seed.unwrap_or(0))?;
            let json = serde_json::to_string_pretty(&report.to_json())?;
            match out {
                Some(p) => {
                    write_file(p, &json)?;
                    let dir = p.parent().unwrap_or(Path::new("."));
                    snapshot(
                        dir,
                        &Spec {
                            command: "blur-scan",
                            seed,
                            args: serde_json::json!({"data": data, "threshold": threshold, "patch": patch, "samples": samples}),
                        },
                    )?;
                }
                None => println!("{json}"),
            }
            println!(
                "{} of {} patches blurry ({:.1}%)",
                report.blurry_patches,
                report.total_patches,
                100.0 * report.fraction()
            );
            Ok(())
        }
        Command::Prepare { data, out, patch } => {
            let files = list_images(data)?;
            if files.is_empty() {
                return Err(Error::Data(format!("no PNG images in {}", data.display())));
            }
            let mut entries = Vec::new();
            for f in &files {
                let (w, h) = image::image_dimensions(f)
                    .map_err(|e| Error::Data(format!("{}: {e}", f.display())))?;
                entries.push(PrepareEntry {
                    file: f
                        .file_name()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default(),
                    width: w,
                    height: h,
                    usable: w as usize >= *patch && h as usize >= *patch,
                });
            }
            let usable = entries.iter().filter(|e| e.usable).count();
            if usable == 0 {
                return Err(Error::Data(format!(
                    "no image in {} is at least {patch}px",
                    data.display()
                )));
            }
            if dry {
                println!(
                    "plan: {usable} of {} images usable; manifest would go to {}",
                    entries.len(),
                    out.display()
                );
                return Ok(());
            }
            let manifest = serde_json::json!({"root": data, "patch": patch, "usable": usable, "images": entries});
            write_file(
                &out.join("dataset.json"),
                &serde_json::to_string_pretty(&manifest)?,
            )?;
            snapshot(
                out,
                &Spec {
                    command: "prepare",
                    seed,
                    args: serde_json::json!({"data": data, "patch": patch}),
                },
            )?;
            println!("{usable} of {} images usable", entries.len());
            Ok(())
        }
        Command::TrainPsnr {
            cfg,
            data,
            out,
            resume,
            quiet,
        } => train(
            cfg,
            seed,
            dry,
            Stage::Pretrain,
            data.as_deref(),
            out,
            None,
            resume.as_deref(),
            *quiet,
        ),
        Command::TrainGan {
            cfg,
            data,
            out,
            init,
            resume,
            quiet,
        } => train(
            cfg,
            seed,
            dry,
            Stage::Gan,
            data.as_deref(),
            out,
            init.as_deref(),
            resume.as_deref(),
            *quiet,
        ),
        Command::Eval {
            checkpoints,
            run,
            datasets,
            lpips,
            rgb,
            crop_border,
            name,
            out,
        } => {
            let checkpoints = resolve_checkpoints(checkpoints, run.as_deref())?;
            let datasets = datasets
                .iter()
                .map(|d| {
                    let (n, p) = d
                        .split_once('=')
                        .ok_or_else(|| Error::Config(format!("dataset {d:?} is not NAME=DIR")))?;
                    Ok(DatasetSpec {
                        name: n.to_string(),
                        hr_dir: PathBuf::from(p),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let backend: LpipsBackend = lpips.parse()?;
            let first = crate::train::read_manifest(&checkpoints[0])?;
            let protocol = EvalProtocol {
                checkpoints,
                datasets,
                crop_border: crop_border.unwrap_or(first.config.scale),
                luma_only: !rgb,
            };
            let lp = Lpips::new(backend, seed.unwrap_or(0))?;
            if dry {
                println!(
                    "plan: {} checkpoint(s) on {} dataset(s); {}",
                    protocol.checkpoints.len(),
                    protocol.datasets.len(),
                    serde_json::to_string(&protocol)?
                );
                return Ok(());
            }
            let report = evaluate(&protocol, &lp, name)?;
            write_file(&out.join("report.md"), &report.to_markdown())?;
            write_file(&out.join("report.json"), &report.to_json()?)?;
            snapshot(
                out,
                &Spec {
                    command: "eval",
                    seed,
                    args: &protocol,
                },
            )?;
            print!("{}", report.to_markdown());
            Ok(())
        }
        Command::Sr {
            checkpoint,
            input,
            out,
            samples,
        } => {
            if *samples == 0 {
                return Err(Error::Config("--samples must be >= 1".into()));
            }
            let g = load_generator(checkpoint, DType::F32)?;
            let inputs = load_inputs(input)?;
            if dry {
                println!(
                    "plan: {} image(s) x {samples} sample(s) -> {}",
                    inputs.len(),
                    out.display()
                );
                return Ok(());
            }
            if *samples > 1 && !g.config().noise_enabled {
                log::warn!("noise is disabled in this checkpoint; all samples will be identical");
            }
            let base = seed.unwrap_or(0);
            for (stem, img) in &inputs {
                for k in 0..*samples {
                    let sr = if g.config().noise_enabled {
                        g.upscale(img, Mode::Train, derive_seed(base, Stream::Noise, k as u64))?
                    } else {
                        g.upscale(img, Mode::Eval, 0)?
                    };
                    let name = if *samples == 1 {
                        format!("{stem}_sr.png")
                    } else {
                        format!("{stem}_sample{k}.png")
                    };
                    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
                    sr.clamp_unit().save_png(out.join(name))?;
                }
            }
            snapshot(
                out,
                &Spec {
                    command: "sr",
                    seed,
                    args: serde_json::json!({"checkpoint": checkpoint, "input": input, "samples": samples}),
                },
            )?;
            Ok(())
        }
        Command::NoiseStats { checkpoint, out } => {
            let g = load_generator(checkpoint, DType::F32)?;
            let stats = g.noise_scale_stats()?;
            if dry {
                println!("plan: {} blocks -> {}", stats.len(), out.display());
                return Ok(());
            }
            write_file(&out.join("noise_stats.csv"), &noise_stats_csv(&stats))?;
            write_file(&out.join("noise_stats.svg"), &noise_stats_svg(&stats))?;
            snapshot(
                out,
                &Spec {
                    command: "noise-stats",
                    seed,
                    args: serde_json::json!({"checkpoint": checkpoint}),
                },
            )?;
            Ok(())
        }
    }
}
