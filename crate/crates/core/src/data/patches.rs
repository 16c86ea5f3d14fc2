//! Training patch extraction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::blur::{laplacian_variance, DEFAULT_BLUR_THRESHOLD};
use crate::data::resize::ResizeOperator;
use crate::error::{invalid_arg, Result};
use crate::image::ImageTensor;
use crate::rng::{stream_rng, Stream};

/// Candidate crops drawn per requested record when blur filtering is on.
pub const BLUR_RETRY_FACTOR: usize = 8;

/// An HR crop together with its synthesized LR counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub hr_patch: ImageTensor,
    pub lr_patch: ImageTensor,
    pub source_id: String,
    pub top: usize,
    pub left: usize,
    pub blur_variance: f64,
}

/// Where a patch came from; enough to re-extract it bit-exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchDescriptor {
    pub source_id: String,
    pub top: usize,
    pub left: usize,
}

impl PatchRecord {
    pub fn descriptor(&self) -> PatchDescriptor {
        PatchDescriptor {
            source_id: self.source_id.clone(),
            top: self.top,
            left: self.left,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchOptions {
    /// HR patch edge length in pixels.
    pub patch_size: usize,
    /// Integer downscale factor for the LR patch.
    pub scale: usize,
    pub filter_blur: bool,
    pub blur_threshold: f64,
}

impl PatchOptions {
    pub fn new(patch_size: usize, scale: usize) -> Self {
        Self {
            patch_size,
            scale,
            filter_blur: false,
            blur_threshold: DEFAULT_BLUR_THRESHOLD,
        }
    }

    pub fn with_blur_filter(mut self, on: bool) -> Self {
        self.filter_blur = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 || self.patch_size == 0 {
            return Err(invalid_arg!("patch size and scale must be >= 1"));
        }
        if !self.patch_size.is_multiple_of(self.scale) {
            return Err(invalid_arg!(
                "patch size {} is not divisible by scale {}",
                self.patch_size,
                self.scale
            ));
        }
        if self.patch_size < 3 {
            return Err(invalid_arg!("patch size must be >= 3"));
        }
        Ok(())
    }

    fn downsampler(&self) -> Result<ResizeOperator> {
        ResizeOperator::new(
            self.patch_size,
            self.patch_size,
            1.0 / self.scale as f64,
            true,
        )
    }
}

/// Builds the record for the crop at `(top, left)`.
pub fn patch_at(
    img: &ImageTensor,
    source_id: &str,
    top: usize,
    left: usize,
    opts: &PatchOptions,
) -> Result<PatchRecord> {
    opts.validate()?;
    let op = opts.downsampler()?;
    make_record(img, source_id, top, left, opts, &op)
}

fn make_record(
    img: &ImageTensor,
    source_id: &str,
    top: usize,
    left: usize,
    opts: &PatchOptions,
    op: &ResizeOperator,
) -> Result<PatchRecord> {
    let hr = img.crop(top, left, opts.patch_size, opts.patch_size)?;
    let blur_variance = laplacian_variance(&hr)?;
    let lr = op.apply(&hr)?;
    Ok(PatchRecord {
        hr_patch: hr,
        lr_patch: lr,
        source_id: source_id.to_string(),
        top,
        left,
        blur_variance,
    })
}

/// Draws up to `count` random crops from `img`.
///
/// With blur filtering on, at most `BLUR_RETRY_FACTOR × count` candidates are
/// tried, so a mostly blurry image yields fewer records instead of looping.
pub fn extract_patches(
    img: &ImageTensor,
    source_id: &str,
    count: usize,
    opts: &PatchOptions,
    rng_seed: u64,
) -> Result<Vec<PatchRecord>> {
    opts.validate()?;
    let p = opts.patch_size;
    if img.height() < p || img.width() < p {
        return Err(invalid_arg!(
            "image {}x{} is smaller than patch size {p}",
            img.height(),
            img.width()
        ));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let op = opts.downsampler()?;
    let mut rng = stream_rng(rng_seed, Stream::Crop, 0);
    let budget = if opts.filter_blur {
        BLUR_RETRY_FACTOR * count
    } else {
        count
    };
    let mut out = Vec::with_capacity(count);
    for _ in 0..budget {
        if out.len() == count {
            break;
        }
        let top = rng.random_range(0..=img.height() - p);
        let left = rng.random_range(0..=img.width() - p);
        if opts.filter_blur {
            let hr = img.crop(top, left, p, p)?;
            if laplacian_variance(&hr)? < opts.blur_threshold {
                continue;
            }
        }
        out.push(make_record(img, source_id, top, left, opts, &op)?);
    }
    Ok(out)
}
