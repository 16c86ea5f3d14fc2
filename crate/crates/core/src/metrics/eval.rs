//! Dataset evaluation over checkpoint sets, reports, and sample diversity.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::data::bicubic_resize;
use crate::data::blur::list_images;
use crate::error::{invalid_arg, Error, Result};
use crate::generator::Generator;
use crate::image::ImageTensor;
use crate::losses::l1_loss;
use crate::metrics::fidelity::{psnr, ssim};
use crate::metrics::lpips::Lpips;
use crate::nn::Mode;
use crate::train::checkpoint::load_generator;

/// Scores in the usual "LPIPS / PSNR / SSIM" order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub lpips: f64,
    /// dB; `+∞` when the images are identical.
    #[serde(serialize_with = "ser_psnr", deserialize_with = "de_psnr")]
    pub psnr: f64,
    pub ssim: f64,
}

fn ser_psnr<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_psnr<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum P {
        N(f64),
        S(String),
    }
    match P::deserialize(d)? {
        P::N(v) => Ok(v),
        P::S(s) if s == "inf" => Ok(f64::INFINITY),
        P::S(s) => Err(serde::de::Error::custom(format!("bad PSNR value {s:?}"))),
    }
}

impl std::fmt::Display for ScoreTriple {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let psnr = if self.psnr.is_infinite() {
            "inf".to_string()
        } else {
            format!("{:.4}", self.psnr)
        };
        write!(f, "{:.4} / {} / {:.4}", self.lpips, psnr, self.ssim)
    }
}

/// Arithmetic mean per metric. Infinite PSNR values are left out of the
/// PSNR mean (with a warning); if every value is infinite the mean is too.
pub fn average_scores(scores: &[ScoreTriple]) -> Result<ScoreTriple> {
    if scores.is_empty() {
        return Err(invalid_arg!("no scores to average"));
    }
    let n = scores.len() as f64;
    let finite: Vec<f64> = scores
        .iter()
        .map(|s| s.psnr)
        .filter(|p| p.is_finite())
        .collect();
    if finite.len() < scores.len() {
        log::warn!(
            "{} of {} PSNR values are infinite (identical images); excluded from the mean",
            scores.len() - finite.len(),
            scores.len()
        );
    }
    let psnr = if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    Ok(ScoreTriple {
        lpips: scores.iter().map(|s| s.lpips).sum::<f64>() / n,
        psnr,
        ssim: scores.iter().map(|s| s.ssim).sum::<f64>() / n,
    })
}

/// Anything that maps an LR image to an SR image deterministically.
pub trait Upscaler {
    fn upscale(&self, lr: &ImageTensor) -> Result<ImageTensor>;
}

/// Generators always evaluate with noise off.
impl Upscaler for Generator {
    fn upscale(&self, lr: &ImageTensor) -> Result<ImageTensor> {
        Generator::upscale(self, lr, Mode::Eval, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub hr_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub checkpoints: Vec<PathBuf>,
    pub datasets: Vec<DatasetSpec>,
    /// Pixels removed from every border before PSNR/SSIM.
    pub crop_border: usize,
    /// Compare the BT.601 Y channel instead of RGB for PSNR/SSIM.
    pub luma_only: bool,
}

/// HR/LR pair with the HR cropped to a multiple of `scale`.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub name: String,
    pub hr: ImageTensor,
    pub lr: ImageTensor,
}

pub fn load_pairs(hr_dir: &Path, scale: usize) -> Result<Vec<EvalPair>> {
    let files = list_images(hr_dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no PNG images in {}",
            hr_dir.display()
        )));
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
            let (h, w) = (img.height() / scale * scale, img.width() / scale * scale);
            if h == 0 || w == 0 {
                return Err(Error::Data(format!(
                    "{} is smaller than the scale factor",
                    p.display()
                )));
            }
            let hr = img.crop(0, 0, h, w)?;
            let lr = bicubic_resize(&hr, 1.0 / scale as f64, true)?.clamp_unit();
            Ok(EvalPair {
                name: p
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                hr,
                lr,
            })
        })
        .collect()
}

fn fidelity_view(img: &ImageTensor, protocol: &EvalProtocol) -> Result<ImageTensor> {
    let img = if protocol.luma_only {
        img.y_channel()
    } else {
        img.clone()
    };
    let b = protocol.crop_border;
    if img.height() <= 2 * b || img.width() <= 2 * b {
        return Err(invalid_arg!(
            "border crop {b} leaves nothing of a {}x{} image",
            img.height(),
            img.width()
        ));
    }
    img.crop(b, b, img.height() - 2 * b, img.width() - 2 * b)
}

/// Scores of one SR/HR pair under the protocol.
pub fn score_pair(
    sr: &ImageTensor,
    hr: &ImageTensor,
    protocol: &EvalProtocol,
    lpips: &Lpips,
) -> Result<ScoreTriple> {
    let sr = sr.clamp_unit();
    let (a, b) = (fidelity_view(&sr, protocol)?, fidelity_view(hr, protocol)?);
    Ok(ScoreTriple {
        lpips: lpips.distance(&sr, hr)?,
        psnr: psnr(&a, &b)?,
        ssim: ssim(&a, &b)?,
    })
}

/// Mean scores of one model over a dataset.
pub fn score_model(
    model: &dyn Upscaler,
    pairs: &[EvalPair],
    protocol: &EvalProtocol,
    lpips: &Lpips,
) -> Result<ScoreTriple> {
    if pairs.is_empty() {
        return Err(Error::Data("empty evaluation dataset".into()));
    }
    let scores = pairs
        .iter()
        .map(|p| score_pair(&model.upscale(&p.lr)?, &p.hr, protocol, lpips))
        .collect::<Result<Vec<_>>>()?;
    average_scores(&scores)
}

/// Scores every model, then averages the per-model results.
pub fn evaluate_models(
    models: &[&dyn Upscaler],
    pairs: &[EvalPair],
    protocol: &EvalProtocol,
    lpips: &Lpips,
) -> Result<ScoreTriple> {
    if models.is_empty() {
        return Err(invalid_arg!("empty checkpoint set"));
    }
    let per = models
        .iter()
        .map(|m| score_model(*m, pairs, protocol, lpips))
        .collect::<Result<Vec<_>>>()?;
    average_scores(&per)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub dataset: String,
    pub images: usize,
    pub scores: ScoreTriple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub checkpoints: Vec<PathBuf>,
    pub crop_border: usize,
    pub luma_only: bool,
    pub lpips_backend: crate::metrics::lpips::LpipsBackend,
    pub results: Vec<DatasetScore>,
}

impl EvalReport {
    /// One-row table, one column per dataset, cells "LPIPS / PSNR / SSIM".
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "| Model |");
        for r in &self.results {
            let _ = write!(s, " {} |", r.dataset);
        }
        s.push('\n');
        s.push_str("|---|");
        for _ in &self.results {
            s.push_str("---|");
        }
        s.push('\n');
        let _ = write!(s, "| {} |", self.model);
        for r in &self.results {
            let _ = write!(s, " {} |", r.scores);
        }
        s.push('\n');
        let _ = writeln!(
            s,
            "\nScores are LPIPS / PSNR / SSIM averaged over {} checkpoint(s); PSNR/SSIM on {} with a {}-pixel border crop; LPIPS backend: {:?}.",
            self.checkpoints.len(),
            if self.luma_only { "luma" } else { "RGB" },
            self.crop_border,
            self.lpips_backend
        );
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Loads every checkpoint and scores it on every dataset.
pub fn evaluate(protocol: &EvalProtocol, lpips: &Lpips, model_name: &str) -> Result<EvalReport> {
    if protocol.checkpoints.is_empty() {
        return Err(invalid_arg!("empty checkpoint set"));
    }
    let generators = protocol
        .checkpoints
        .iter()
        .map(|c| load_generator(c, DType::F32))
        .collect::<Result<Vec<_>>>()?;
    let scale = generators[0].config().scale;
    if generators
        .iter()
        .any(|g| g.config() != generators[0].config())
    {
        return Err(Error::Checkpoint(
            "checkpoints do not share one architecture".into(),
        ));
    }
    let models: Vec<&dyn Upscaler> = generators.iter().map(|g| g as &dyn Upscaler).collect();
    let mut results = Vec::new();
    for ds in &protocol.datasets {
        let pairs = load_pairs(&ds.hr_dir, scale)?;
        let scores = evaluate_models(&models, &pairs, protocol, lpips)?;
        results.push(DatasetScore {
            dataset: ds.name.clone(),
            images: pairs.len(),
            scores,
        });
    }
    Ok(EvalReport {
        model: model_name.to_string(),
        checkpoints: protocol.checkpoints.clone(),
        crop_border: protocol.crop_border,
        luma_only: protocol.luma_only,
        lpips_backend: lpips.backend(),
        results,
    })
}

/// Mean pairwise L1 distance between SR samples drawn with `seeds`.
/// A generator without noise returns 0.
pub fn diversity(
    generator: &Generator,
    lr: &ImageTensor,
    n_samples: usize,
    seeds: &[u64],
) -> Result<f64> {
    if n_samples < 2 {
        return Err(invalid_arg!(
            "diversity needs at least two samples, got {n_samples}"
        ));
    }
    if seeds.len() != n_samples {
        return Err(invalid_arg!(
            "{} seeds given for {n_samples} samples",
            seeds.len()
        ));
    }
    if !generator.config().noise_enabled {
        return Ok(0.0);
    }
    let samples = seeds
        .iter()
        .map(|&s| generator.upscale(lr, Mode::Train, s))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            sum += l1_loss(&samples[i], &samples[j])?;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(ImageTensor);

    impl Upscaler for Fixed {
        fn upscale(&self, _lr: &ImageTensor) -> Result<ImageTensor> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn average_excludes_infinite_psnr() {
        let s = |l, p, q| ScoreTriple {
            lpips: l,
            psnr: p,
            ssim: q,
        };
        let avg = average_scores(&[
            s(0.1, 30.0, 0.8),
            s(0.3, f64::INFINITY, 1.0),
            s(0.2, 20.0, 0.6),
        ])
        .unwrap();
        assert!((avg.lpips - 0.2).abs() < 1e-15);
        assert_eq!(avg.psnr, 25.0);
        assert!((avg.ssim - 0.8).abs() < 1e-15);
        assert!(average_scores(&[]).is_err());
        assert_eq!(
            format!("{}", s(0.05, 28.25, 0.8)),
            "0.0500 / 28.2500 / 0.8000"
        );
    }

    #[test]
    fn single_model_average_is_identity() {
        let hr =
            ImageTensor::from_fn(24, 24, 3, |y, x, c| ((y * 3 + x + c) % 10) as f32 / 9.0).unwrap();
        let lr = bicubic_resize(&hr, 0.25, true).unwrap();
        let pairs = vec![EvalPair {
            name: "a".into(),
            hr: hr.clone(),
            lr,
        }];
        let protocol = EvalProtocol {
            checkpoints: vec![],
            datasets: vec![],
            crop_border: 4,
            luma_only: true,
        };
        let lp = Lpips::proxy(0).unwrap();
        let noisy = hr.map(|v| v * 0.9 + 0.05).unwrap();
        let m = Fixed(noisy);
        let one = score_model(&m, &pairs, &protocol, &lp).unwrap();
        let avg = evaluate_models(&[&m], &pairs, &protocol, &lp).unwrap();
        assert_eq!(one, avg);
        let exact = Fixed(hr);
        let perfect = evaluate_models(&[&exact], &pairs, &protocol, &lp).unwrap();
        assert_eq!(
            (perfect.lpips, perfect.psnr, perfect.ssim),
            (0.0, f64::INFINITY, 1.0)
        );
    }

    #[test]
    fn report_rendering() {
        let r = EvalReport {
            model: "table1_f".into(),
            checkpoints: vec![PathBuf::from("a")],
            crop_border: 4,
            luma_only: true,
            lpips_backend: crate::metrics::lpips::LpipsBackend::Proxy,
            results: vec![DatasetScore {
                dataset: "Set5".into(),
                images: 5,
                scores: ScoreTriple {
                    lpips: 0.1,
                    psnr: f64::INFINITY,
                    ssim: 0.9,
                },
            }],
        };
        let md = r.to_markdown();
        assert!(md.starts_with("| Model | Set5 |\n|---|---|\n| table1_f | 0.1000 / inf / 0.9000 |"));
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
