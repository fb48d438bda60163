//! Instrumented image access layer.
//!
//! Every pixel read goes through the store, which caches decoded images at
//! the working resolution and counts accesses by label. The train-purity
//! check asserts that the anomalous counter stays at zero across a whole
//! training run.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::Result;
use crate::imagesynth::Image;
use crate::noisegen::BinaryMask;

use super::{Item, LABEL_ANOMALOUS};

pub struct ImageStore {
    resolution: usize,
    cache: Mutex<HashMap<std::path::PathBuf, Arc<Image>>>,
    normal_reads: AtomicU64,
    anomalous_reads: AtomicU64,
}

impl ImageStore {
    /// Store that resizes every image to `resolution` x `resolution`.
    pub fn new(resolution: usize) -> Self {
        Self {
            resolution,
            cache: Mutex::new(HashMap::new()),
            normal_reads: AtomicU64::new(0),
            anomalous_reads: AtomicU64::new(0),
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Load an item's image (plus foreground mask when present), resized to
    /// the working resolution. Each call counts as one access of the item's
    /// label, cached or not.
    pub fn load(&self, item: &Item) -> Result<Arc<Image>> {
        if item.label == LABEL_ANOMALOUS {
            self.anomalous_reads.fetch_add(1, Ordering::Relaxed);
        } else {
            self.normal_reads.fetch_add(1, Ordering::Relaxed);
        }
        if let Some(found) = self.cache.lock().unwrap().get(&item.path) {
            return Ok(found.clone());
        }
        let mut image = Image::load_png(&item.path)?;
        if let Some(mask_path) = &item.mask_path {
            image.foreground = Some(load_mask(mask_path)?);
        }
        let image = Arc::new(image.resized(self.resolution, self.resolution));
        self.cache.lock().unwrap().insert(item.path.clone(), image.clone());
        Ok(image)
    }

    pub fn normal_reads(&self) -> u64 {
        self.normal_reads.load(Ordering::Relaxed)
    }

    pub fn anomalous_reads(&self) -> u64 {
        self.anomalous_reads.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.normal_reads.store(0, Ordering::Relaxed);
        self.anomalous_reads.store(0, Ordering::Relaxed);
    }
}

/// Single-channel PNG, nonzero = foreground.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let dynamic = image::open(path).map_err(|e| crate::error::CoreError::DataSource {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let gray = dynamic.to_luma8();
    Ok(BinaryMask {
        width: gray.width() as usize,
        height: gray.height() as usize,
        bits: gray.pixels().map(|p| u8::from(p.0[0] != 0)).collect(),
    })
}
