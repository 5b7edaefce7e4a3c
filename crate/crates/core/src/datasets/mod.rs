//! Annotation ingestion, label spaces and batching.
//!
//! Labels travel as category-name strings, never as one-hot ids, so datasets
//! with unrelated label spaces can be mixed freely. Each training batch gets
//! its own vocabulary: the names present in that batch.

mod coco;
pub mod synthetic;

pub use coco::{load_annotations, write_coco, AnnotationFormat, AnnotationSet};

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{fold_name, BoxPrompt};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    #[serde(rename = "box")]
    pub bbox: BoxPrompt,
    pub category: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub image_path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub regions: Vec<Region>,
}

/// Ordered category names with instance counts. Names are unique under
/// [`fold_name`]; the first spelling seen is kept.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    names: Vec<String>,
    counts: Vec<u64>,
}

impl LabelSpace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `count` instances of `name`, registering it if unseen.
    pub fn add(&mut self, name: &str, count: u64) -> usize {
        let key = fold_name(name);
        match self.names.iter().position(|n| fold_name(n) == key) {
            Some(i) => {
                self.counts[i] += count;
                i
            }
            None => {
                self.names.push(name.trim().to_string());
                self.counts.push(count);
                self.names.len() - 1
            }
        }
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Self {
        let mut space = LabelSpace::new();
        for n in names {
            space.add(n.as_ref(), 0);
        }
        space
    }

    pub fn from_records(records: &[AnnotationRecord]) -> Self {
        let mut space = LabelSpace::new();
        for r in records {
            for region in &r.regions {
                space.add(&region.category, 1);
            }
        }
        space
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        let key = fold_name(name);
        self.names.iter().position(|n| fold_name(n) == key)
    }

    pub fn count_of(&self, name: &str) -> Option<u64> {
        self.index_of(name).map(|i| self.counts[i])
    }
}

/// Union by case-folded name in first-seen order, with summed frequencies.
pub fn merge_label_spaces(spaces: &[LabelSpace]) -> LabelSpace {
    let mut merged = LabelSpace::new();
    for space in spaces {
        for (name, &count) in space.names.iter().zip(&space.counts) {
            merged.add(name, count);
        }
    }
    merged
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    /// Index into the record list the batch was drawn from.
    pub record: usize,
    pub boxes: Vec<BoxPrompt>,
    /// Per-region index into [`Batch::vocabulary`].
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
    /// Category names present in this batch, first-appearance order.
    pub vocabulary: Vec<String>,
    /// Records dropped from the batch because they had no regions.
    pub skipped_empty: usize,
}

impl Batch {
    pub fn num_regions(&self) -> usize {
        self.items.iter().map(|i| i.boxes.len()).sum()
    }
}

/// Permutation of `0..len` for one epoch: a backward Fisher-Yates pass
/// (`j = rng.random_range(0..=i)` as `u64`, for `i = len-1 .. 1`) driven by
/// `ChaCha8Rng::seed_from_u64(seed)` on stream `epoch`.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        let j = rng.random_range(0..=i as u64) as usize;
        order.swap(i, j);
    }
    order
}

/// Consecutive `batch_size` chunks of the epoch permutation; the last chunk
/// may be short.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let size = batch_size.max(1);
    epoch_order(len, seed, epoch).chunks(size).map(|c| c.to_vec()).collect()
}

pub fn assemble_batch(records: &[AnnotationRecord], indices: &[usize]) -> Batch {
    let mut vocab: Vec<String> = Vec::new();
    let mut lookup: HashMap<String, usize> = HashMap::new();
    let mut items = Vec::with_capacity(indices.len());
    let mut skipped_empty = 0;
    for &idx in indices {
        let record = &records[idx];
        if record.regions.is_empty() {
            skipped_empty += 1;
            continue;
        }
        let targets = record
            .regions
            .iter()
            .map(|r| {
                *lookup.entry(fold_name(&r.category)).or_insert_with(|| {
                    vocab.push(r.category.trim().to_string());
                    vocab.len() - 1
                })
            })
            .collect();
        items.push(BatchItem {
            record: idx,
            boxes: record.regions.iter().map(|r| r.bbox).collect(),
            targets,
        });
    }
    Batch {
        items,
        vocabulary: vocab,
        skipped_empty,
    }
}

/// The batch sequence of one epoch.
pub fn sample_batch(records: &[AnnotationRecord], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if records.is_empty() {
        return Err(Error::InvalidInput("cannot batch an empty record list".into()));
    }
    Ok(epoch_batches(records.len(), batch_size, seed, epoch)
        .iter()
        .map(|idx| assemble_batch(records, idx))
        .collect())
}

/// Reads a vocabulary: a JSON array of strings, or one name per line
/// (blank lines and `#` comments ignored).
pub fn load_vocabulary(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let names: Vec<String> = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: crate::container::line_col_to_offset(text.as_bytes(), e.line(), e.column()),
            message: e.to_string(),
        })?
    } else {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect()
    };
    Ok(names)
}
