//! Bounded patch pool sampled without replacement.
//!
//! Loading one HR image and cropping many patches from it amortises decode
//! cost. Records are drawn uniformly and removed, so none is seen twice.

use std::sync::{Arc, Mutex, MutexGuard};

use rand::seq::index;

use crate::data::patches::{PatchDescriptor, PatchRecord};
use crate::error::{invalid_arg, Result};
use crate::rng::{stream_rng, Stream};

pub const DEFAULT_CAPACITY: usize = 1024;
pub const DEFAULT_PER_IMAGE_YIELD: usize = 128;

#[derive(Debug, Clone)]
pub struct PatchBuffer {
    capacity: usize,
    per_image_yield: usize,
    contents: Vec<PatchRecord>,
}

impl Default for PatchBuffer {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY, DEFAULT_PER_IMAGE_YIELD)
    }
}

impl PatchBuffer {
    pub fn new(capacity: usize, per_image_yield: usize) -> Self {
        Self {
            capacity,
            per_image_yield,
            contents: Vec::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn per_image_yield(&self) -> usize {
        self.per_image_yield
    }

    pub fn len(&self) -> usize {
        self.contents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contents.is_empty()
    }

    pub fn contents(&self) -> &[PatchRecord] {
        &self.contents
    }

    /// True when the refill policy asks for another image: fewer than two
    /// batches' worth of patches left.
    pub fn needs_refill(&self, batch: usize) -> bool {
        self.contents.len() < 2 * batch
    }

    /// Appends records until the buffer is full; the excess is dropped.
    /// Returns the number accepted.
    pub fn push(&mut self, records: impl IntoIterator<Item = PatchRecord>) -> usize {
        let room = self.capacity - self.contents.len();
        let before = self.contents.len();
        self.contents.extend(records.into_iter().take(room));
        self.contents.len() - before
    }

    /// Removes and returns `batch` records chosen uniformly without
    /// replacement.
    pub fn sample(&mut self, batch: usize, rng_seed: u64) -> Result<Vec<PatchRecord>> {
        if batch > self.contents.len() {
            return Err(invalid_arg!(
                "cannot sample {batch} patches from a buffer holding {}",
                self.contents.len()
            ));
        }
        let mut rng = stream_rng(rng_seed, Stream::Sample, 0);
        let picks = index::sample(&mut rng, self.contents.len(), batch).into_vec();
        // Take in descending index order so swap_remove never moves a
        // record that is still to be taken.
        let mut order: Vec<(usize, usize)> = picks.iter().copied().enumerate().collect();
        order.sort_by(|a, b| b.1.cmp(&a.1));
        let mut out: Vec<Option<PatchRecord>> = vec![None; batch];
        for (slot, idx) in order {
            out[slot] = Some(self.contents.swap_remove(idx));
        }
        Ok(out
            .into_iter()
            .map(|r| r.expect("every slot filled"))
            .collect())
    }

    pub fn descriptors(&self) -> Vec<PatchDescriptor> {
        self.contents.iter().map(PatchRecord::descriptor).collect()
    }

    pub fn clear(&mut self) {
        self.contents.clear();
    }
}

/// A [`PatchBuffer`] shared between one filler thread and one consumer.
/// Each push and sample holds the lock for its whole duration.
#[derive(Debug, Clone, Default)]
pub struct SharedPatchBuffer {
    inner: Arc<Mutex<PatchBuffer>>,
}

impl SharedPatchBuffer {
    pub fn new(buffer: PatchBuffer) -> Self {
        Self {
            inner: Arc::new(Mutex::new(buffer)),
        }
    }

    fn lock(&self) -> MutexGuard<'_, PatchBuffer> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn push(&self, records: Vec<PatchRecord>) -> usize {
        self.lock().push(records)
    }

    pub fn sample(&self, batch: usize, rng_seed: u64) -> Result<Vec<PatchRecord>> {
        self.lock().sample(batch, rng_seed)
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.lock().is_empty()
    }
}
