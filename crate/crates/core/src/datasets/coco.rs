use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AnnotationRecord, LabelSpace, Region};
use crate::container::line_col_to_offset;
use crate::encoders::BoxPrompt;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationFormat {
    #[default]
    CocoJson,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
enum CocoId {
    Int(i64),
    Str(String),
}

impl std::fmt::Display for CocoId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CocoId::Int(i) => write!(f, "{i}"),
            CocoId::Str(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: CocoId,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    image_id: CocoId,
    bbox: [f64; 4],
    category_id: CocoId,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: CocoId,
    name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

/// Parsed annotation file.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    /// One record per image, in file order.
    pub records: Vec<AnnotationRecord>,
    /// Categories declared by the file, in file order, with instance counts.
    pub categories: LabelSpace,
    /// Boxes dropped because they had zero area after clipping.
    pub dropped_boxes: usize,
}

impl AnnotationSet {
    pub fn num_regions(&self) -> usize {
        self.records.iter().map(|r| r.regions.len()).sum()
    }
}

/// Loads a COCO-style file. Pixel `[x, y, w, h]` boxes become normalized
/// corners; relative `file_name`s resolve against the file's directory.
pub fn load_annotations(path: &Path, format: AnnotationFormat) -> Result<AnnotationSet> {
    let AnnotationFormat::CocoJson = format;
    let text = std::fs::read(path).map_err(Error::io(path))?;
    let file: CocoFile = serde_json::from_slice(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: line_col_to_offset(&text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));

    let mut categories = LabelSpace::new();
    let mut category_names = std::collections::HashMap::new();
    for c in &file.categories {
        if c.name.trim().is_empty() {
            return Err(Error::InvalidInput(format!("category {} has an empty name", c.id)));
        }
        categories.add(&c.name, 0);
        category_names.insert(c.id.clone(), c.name.trim().to_string());
    }

    let mut records: Vec<AnnotationRecord> = Vec::with_capacity(file.images.len());
    let mut by_id = std::collections::HashMap::new();
    for img in &file.images {
        if img.width == 0 || img.height == 0 {
            return Err(Error::InvalidInput(format!("image {} has zero size", img.id)));
        }
        let file_path = PathBuf::from(&img.file_name);
        by_id.insert(img.id.clone(), records.len());
        records.push(AnnotationRecord {
            image_id: img.id.to_string(),
            image_path: if file_path.is_absolute() {
                file_path
            } else {
                base.join(file_path)
            },
            width: img.width,
            height: img.height,
            regions: Vec::new(),
        });
    }

    let mut dropped_boxes = 0;
    for (i, ann) in file.annotations.iter().enumerate() {
        let name = category_names.get(&ann.category_id).ok_or_else(|| Error::Referential {
            annotation: i,
            what: "category",
            id: ann.category_id.to_string(),
        })?;
        let &rec_idx = by_id.get(&ann.image_id).ok_or_else(|| Error::Referential {
            annotation: i,
            what: "image",
            id: ann.image_id.to_string(),
        })?;
        let record = &mut records[rec_idx];
        let bbox = BoxPrompt::from_xywh_pixels(ann.bbox, record.width as f64, record.height as f64);
        if bbox.validate(i).is_err() {
            dropped_boxes += 1;
            continue;
        }
        categories.add(name, 1);
        record.regions.push(Region {
            bbox,
            category: name.clone(),
        });
    }
    Ok(AnnotationSet {
        records,
        categories,
        dropped_boxes,
    })
}

/// Writes records as a COCO-style file. Image ids that parse as integers are
/// written as integers; boxes are converted back to pixel `[x, y, w, h]`.
pub fn write_coco(path: &Path, records: &[AnnotationRecord], categories: &[String]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let cat_id = |name: &str| {
        let key = crate::encoders::fold_name(name);
        categories
            .iter()
            .position(|c| crate::encoders::fold_name(c) == key)
            .map(|i| i as i64 + 1)
    };
    let as_id = |s: &str| {
        s.parse::<i64>()
            .map(CocoId::Int)
            .unwrap_or_else(|_| CocoId::Str(s.to_string()))
    };
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    for r in records {
        let file_name = r
            .image_path
            .strip_prefix(base)
            .unwrap_or(&r.image_path)
            .to_string_lossy()
            .into_owned();
        images.push(CocoImage {
            id: as_id(&r.image_id),
            file_name,
            width: r.width,
            height: r.height,
        });
        for region in &r.regions {
            let id = cat_id(&region.category).ok_or_else(|| {
                Error::InvalidInput(format!("category {:?} missing from category list", region.category))
            })?;
            annotations.push(CocoAnnotation {
                image_id: as_id(&r.image_id),
                bbox: region.bbox.to_xywh_pixels(r.width as f64, r.height as f64),
                category_id: CocoId::Int(id),
            });
        }
    }
    let file = CocoFile {
        images,
        annotations,
        categories: categories
            .iter()
            .enumerate()
            .map(|(i, n)| CocoCategory {
                id: CocoId::Int(i as i64 + 1),
                name: n.clone(),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, text).map_err(Error::io(path))
}
