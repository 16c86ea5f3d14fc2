//! Laplacian-variance blur detection.
//!
//! A patch is converted to BT.601 luma on the 0–255 scale, filtered with the
//! 4-neighbour Laplacian over the valid region only, and the population
//! variance of the response is compared with a threshold (default 100).

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::image::ImageTensor;
use crate::rng::{stream_rng, Stream};

pub const DEFAULT_BLUR_THRESHOLD: f64 = 100.0;

/// Variance of the 3×3 Laplacian response of `patch`, on the 0–255 scale.
pub fn laplacian_variance(patch: &ImageTensor) -> Result<f64> {
    let (h, w, _) = patch.dims();
    if h < 3 || w < 3 {
        return Err(invalid_arg!(
            "laplacian needs at least a 3x3 patch, got {h}x{w}"
        ));
    }
    let luma = patch.luma_255();
    let at = |y: usize, x: usize| luma[y * w + x];
    let n = ((h - 2) * (w - 2)) as f64;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let r = at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x);
            sum += r;
            sum_sq += r * r;
        }
    }
    let mean = sum / n;
    Ok((sum_sq / n - mean * mean).max(0.0))
}

pub fn is_blurry(patch: &ImageTensor, threshold: f64) -> Result<bool> {
    Ok(laplacian_variance(patch)? < threshold)
}

/// Outcome of scanning a set of patches for blur.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurReport {
    pub total_patches: usize,
    pub blurry_patches: usize,
    pub threshold: f64,
    pub per_patch_variances: Vec<f64>,
    /// Index into `sources` for each patch.
    pub per_patch_source: Vec<usize>,
    pub sources: Vec<String>,
    /// Files that could not be decoded or were smaller than the patch.
    pub unreadable: Vec<String>,
}

/// Histogram bin edges used in serialized reports. The last bin is open.
pub const HISTOGRAM_EDGES: [f64; 12] = [
    0.0, 10.0, 25.0, 50.0, 100.0, 200.0, 400.0, 800.0, 1600.0, 3200.0, 6400.0, 12800.0,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    /// `None` for the open-ended last bin.
    pub hi: Option<f64>,
    pub count: usize,
}

/// Serialized form of a [`BlurReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlurReportJson {
    pub total: usize,
    pub blurry: usize,
    pub threshold: f64,
    pub fraction: f64,
    pub variance_histogram: Vec<HistogramBin>,
    pub unreadable: Vec<String>,
}

impl BlurReport {
    pub fn from_variances(variances: Vec<f64>, threshold: f64) -> Self {
        let blurry = variances.iter().filter(|&&v| v < threshold).count();
        Self {
            total_patches: variances.len(),
            blurry_patches: blurry,
            threshold,
            per_patch_source: vec![0; variances.len()],
            per_patch_variances: variances,
            sources: Vec::new(),
            unreadable: Vec::new(),
        }
    }

    pub fn fraction(&self) -> f64 {
        if self.total_patches == 0 {
            0.0
        } else {
            self.blurry_patches as f64 / self.total_patches as f64
        }
    }

    pub fn histogram(&self) -> Vec<HistogramBin> {
        let mut bins: Vec<HistogramBin> = HISTOGRAM_EDGES
            .iter()
            .enumerate()
            .map(|(i, &lo)| HistogramBin {
                lo,
                hi: HISTOGRAM_EDGES.get(i + 1).copied(),
                count: 0,
            })
            .collect();
        for &v in &self.per_patch_variances {
            let idx = HISTOGRAM_EDGES.iter().rposition(|&e| v >= e).unwrap_or(0);
            bins[idx].count += 1;
        }
        bins
    }

    pub fn to_json(&self) -> BlurReportJson {
        BlurReportJson {
            total: self.total_patches,
            blurry: self.blurry_patches,
            threshold: self.threshold,
            fraction: self.fraction(),
            variance_histogram: self.histogram(),
            unreadable: self.unreadable.clone(),
        }
    }
}

/// PNG files in `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Samples `sample_count` random `patch_size` crops across the images of
/// `dir` and classifies each one.
///
/// Each sample first picks an image uniformly, then a crop position
/// uniformly; images are decoded one at a time.
pub fn scan_dataset(
    dir: &Path,
    patch_size: usize,
    sample_count: usize,
    threshold: f64,
    rng_seed: u64,
) -> Result<BlurReport> {
    if patch_size < 3 {
        return Err(invalid_arg!("patch size must be >= 3, got {patch_size}"));
    }
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no PNG images in {}", dir.display())));
    }
    // Probe dimensions without keeping pixels around.
    let mut usable = Vec::new();
    let mut unreadable = Vec::new();
    for f in &files {
        match image::image_dimensions(f) {
            Ok((w, h)) if (w as usize) >= patch_size && (h as usize) >= patch_size => {
                usable.push(f.clone())
            }
            Ok(_) => unreadable.push(format!("{} (smaller than patch)", f.display())),
            Err(e) => unreadable.push(format!("{} ({e})", f.display())),
        }
    }
    if usable.is_empty() {
        return Err(Error::Data(format!(
            "no readable images of at least {patch_size}x{patch_size} in {}",
            dir.display()
        )));
    }

    let mut pick = stream_rng(rng_seed, Stream::Scan, u64::MAX);
    let mut per_image = vec![0usize; usable.len()];
    for _ in 0..sample_count {
        per_image[pick.random_range(0..usable.len())] += 1;
    }

    let mut variances = Vec::with_capacity(sample_count);
    let mut per_patch_source = Vec::with_capacity(sample_count);
    let mut sources = Vec::new();
    for (idx, (path, &n)) in usable.iter().zip(&per_image).enumerate() {
        if n == 0 {
            continue;
        }
        let img = match ImageTensor::load_png(path) {
            Ok(img) => img,
            Err(e) => {
                unreadable.push(format!("{} ({e})", path.display()));
                continue;
            }
        };
        let source = sources.len();
        sources.push(path.display().to_string());
        let mut rng = stream_rng(rng_seed, Stream::Scan, idx as u64);
        for _ in 0..n {
            let top = rng.random_range(0..=img.height() - patch_size);
            let left = rng.random_range(0..=img.width() - patch_size);
            let patch = img.crop(top, left, patch_size, patch_size)?;
            variances.push(laplacian_variance(&patch)?);
            per_patch_source.push(source);
        }
    }

    let mut report = BlurReport::from_variances(variances, threshold);
    report.per_patch_source = per_patch_source;
    report.sources = sources;
    report.unreadable = unreadable;
    Ok(report)
}
