//! Image sources and the buffered patch stream that feeds training.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::blur::list_images;
use crate::data::buffer::PatchBuffer;
use crate::data::patches::{extract_patches, patch_at, PatchDescriptor, PatchOptions, PatchRecord};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::{derive_seed, stream_rng, Stream};

/// A fixed, ordered collection of HR images.
#[derive(Debug, Clone)]
pub enum ImageSource {
    Memory(Vec<(String, ImageTensor)>),
    Directory(Vec<PathBuf>),
}

impl ImageSource {
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let files = list_images(dir)?;
        if files.is_empty() {
            return Err(Error::Data(format!("no PNG images in {}", dir.display())));
        }
        Ok(ImageSource::Directory(files))
    }

    pub fn len(&self) -> usize {
        match self {
            ImageSource::Memory(v) => v.len(),
            ImageSource::Directory(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn id(&self, index: usize) -> String {
        match self {
            ImageSource::Memory(v) => v[index].0.clone(),
            ImageSource::Directory(v) => v[index]
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| v[index].display().to_string()),
        }
    }

    pub fn load(&self, index: usize) -> Result<ImageTensor> {
        match self {
            ImageSource::Memory(v) => Ok(v[index].1.clone()),
            ImageSource::Directory(v) => {
                let img = ImageTensor::load_png(&v[index])?;
                // grayscale inputs are broadcast to RGB for the network
                if img.channels() == 1 {
                    ImageTensor::from_fn(img.height(), img.width(), 3, |y, x, _| img.get(y, x, 0))
                } else {
                    Ok(img)
                }
            }
        }
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        (0..self.len()).find(|&i| self.id(i) == id)
    }
}

/// Serializable position of a [`PatchStream`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamState {
    /// Number of images loaded so far.
    pub cursor: u64,
    pub buffered: Vec<PatchDescriptor>,
}

/// Buffered, seeded patch stream.
///
/// Images are visited in a fresh seeded permutation each epoch. Whenever
/// fewer than two batches remain buffered, the next image is loaded and
/// its patches pushed.
#[derive(Debug)]
pub struct PatchStream {
    source: ImageSource,
    options: PatchOptions,
    buffer: PatchBuffer,
    batch: usize,
    seed: u64,
    cursor: u64,
    epoch_order: Option<(u64, Vec<usize>)>,
}

impl PatchStream {
    pub fn new(
        source: ImageSource,
        options: PatchOptions,
        buffer: PatchBuffer,
        batch: usize,
        seed: u64,
    ) -> Result<Self> {
        options.validate()?;
        if source.is_empty() {
            return Err(Error::Data("image source is empty".into()));
        }
        if batch == 0 || batch > buffer.capacity() {
            return Err(Error::Config(format!(
                "batch {batch} must be in 1..={}",
                buffer.capacity()
            )));
        }
        Ok(Self {
            source,
            options,
            buffer,
            batch,
            seed,
            cursor: 0,
            epoch_order: None,
        })
    }

    pub fn buffer(&self) -> &PatchBuffer {
        &self.buffer
    }

    pub fn options(&self) -> &PatchOptions {
        &self.options
    }

    pub fn source(&self) -> &ImageSource {
        &self.source
    }

    fn image_for_cursor(&mut self, cursor: u64) -> usize {
        let n = self.source.len() as u64;
        let epoch = cursor / n;
        if self.epoch_order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.source.len()).collect();
            order.shuffle(&mut stream_rng(self.seed, Stream::Shuffle, epoch));
            self.epoch_order = Some((epoch, order));
        }
        self.epoch_order.as_ref().expect("set above").1[(cursor % n) as usize]
    }

    fn refill(&mut self) -> Result<()> {
        let mut barren = 0usize;
        while self.buffer.needs_refill(self.batch) {
            let idx = self.image_for_cursor(self.cursor);
            let img = self.source.load(idx)?;
            let id = self.source.id(idx);
            let recs = extract_patches(
                &img,
                &id,
                self.buffer.per_image_yield(),
                &self.options,
                derive_seed(self.seed, Stream::Crop, self.cursor),
            )?;
            self.cursor += 1;
            if recs.is_empty() {
                barren += 1;
                if barren >= self.source.len() {
                    return Err(Error::Data(
                        "a full pass over the images produced no usable patches".into(),
                    ));
                }
            } else {
                barren = 0;
            }
            self.buffer.push(recs);
        }
        Ok(())
    }

    /// Patches for one training iteration.
    pub fn next_batch(&mut self, iteration: u64) -> Result<Vec<PatchRecord>> {
        self.refill()?;
        self.buffer.sample(
            self.batch,
            derive_seed(self.seed, Stream::Sample, iteration),
        )
    }

    pub fn state(&self) -> StreamState {
        StreamState {
            cursor: self.cursor,
            buffered: self.buffer.descriptors(),
        }
    }

    /// Rebuilds the buffer from descriptors by re-cropping the source images.
    pub fn restore(&mut self, state: &StreamState) -> Result<()> {
        let mut by_source: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, d) in state.buffered.iter().enumerate() {
            by_source.entry(d.source_id.as_str()).or_default().push(i);
        }
        let mut slots: Vec<Option<PatchRecord>> = vec![None; state.buffered.len()];
        for (id, idxs) in by_source {
            let pos = self.source.position(id).ok_or_else(|| {
                Error::Checkpoint(format!("buffered patch refers to unknown image {id}"))
            })?;
            let img = self.source.load(pos)?;
            for i in idxs {
                let d = &state.buffered[i];
                slots[i] = Some(patch_at(&img, id, d.top, d.left, &self.options)?);
            }
        }
        self.buffer.clear();
        self.buffer.push(slots.into_iter().flatten());
        self.cursor = state.cursor;
        self.epoch_order = None;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn source(n: usize) -> ImageSource {
        ImageSource::Memory(
            (0..n)
                .map(|i| {
                    let img = ImageTensor::from_fn(32, 32, 3, |y, x, c| {
                        (((y * (i + 1) + x * 3 + c) % 7) as f32) / 6.0
                    })
                    .unwrap();
                    (format!("img{i}"), img)
                })
                .collect(),
        )
    }

    fn stream(seed: u64) -> PatchStream {
        PatchStream::new(
            source(3),
            PatchOptions::new(8, 2),
            PatchBuffer::new(64, 16),
            4,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn batches_are_reproducible() {
        let (mut a, mut b) = (stream(5), stream(5));
        for it in 0..30 {
            assert_eq!(a.next_batch(it).unwrap(), b.next_batch(it).unwrap());
        }
    }

    #[test]
    fn restore_resumes_identically() {
        let mut a = stream(9);
        for it in 0..7 {
            a.next_batch(it).unwrap();
        }
        let st = a.state();
        let mut b = stream(9);
        b.restore(&st).unwrap();
        assert_eq!(b.state(), st);
        for it in 7..40 {
            assert_eq!(a.next_batch(it).unwrap(), b.next_batch(it).unwrap());
        }
    }

    #[test]
    fn all_blurry_source_errors() {
        let flat = ImageSource::Memory(vec![(
            "f".into(),
            ImageTensor::filled(16, 16, 3, 0.5).unwrap(),
        )]);
        let mut s = PatchStream::new(
            flat,
            PatchOptions::new(8, 2).with_blur_filter(true),
            PatchBuffer::new(32, 8),
            2,
            0,
        )
        .unwrap();
        assert!(matches!(s.next_batch(0), Err(Error::Data(_))));
    }
}
