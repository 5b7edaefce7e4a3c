//! Desk-scale synthetic detection data: colored rectangles on noise.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_coco, AnnotationRecord, Region};
use crate::encoders::BoxPrompt;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCategory {
    pub name: String,
    pub color: [f32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub images: usize,
    pub regions_per_image: usize,
    pub image_size: u32,
    pub min_box: u32,
    pub max_box: u32,
    pub noise: f32,
    pub seed: u64,
    pub categories: Vec<SyntheticCategory>,
}

impl Default for SyntheticSpec {
    /// 4 images, 3 categories, 12 regions.
    fn default() -> Self {
        let cat = |name: &str, color| SyntheticCategory {
            name: name.to_string(),
            color,
        };
        SyntheticSpec {
            images: 4,
            regions_per_image: 3,
            image_size: 64,
            min_box: 14,
            max_box: 24,
            noise: 0.08,
            seed: 0,
            categories: vec![
                cat("apple", [0.85, 0.15, 0.15]),
                cat("lake", [0.15, 0.30, 0.85]),
                cat("grass", [0.20, 0.75, 0.20]),
            ],
        }
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `img_XXX.png` files and `annotations.json` into `dir` and returns
/// the annotation path. Region `j` of image `i` gets category
/// `(i + j) mod K`, so every image mixes categories.
pub fn generate(dir: &Path, spec: &SyntheticSpec) -> Result<PathBuf> {
    if spec.categories.is_empty() || spec.min_box == 0 || spec.min_box > spec.max_box || spec.max_box >= spec.image_size
    {
        return Err(Error::InvalidInput("inconsistent synthetic spec".into()));
    }
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.image_size;
    let mut records = Vec::with_capacity(spec.images);
    for i in 0..spec.images {
        let mut img = RgbImage::from_fn(size, size, |_, _| {
            let base = 0.35 + 0.3 * rng.random::<f32>();
            Rgb([to_u8(base), to_u8(base), to_u8(base)])
        });
        let mut placed: Vec<(u32, u32, u32, u32)> = Vec::new();
        let mut regions = Vec::new();
        for j in 0..spec.regions_per_image {
            let category = &spec.categories[(i + j) % spec.categories.len()];
            let mut attempt = 0;
            let rect = loop {
                let w = rng.random_range(spec.min_box..=spec.max_box);
                let h = rng.random_range(spec.min_box..=spec.max_box);
                let x = rng.random_range(0..=size - w);
                let y = rng.random_range(0..=size - h);
                let overlaps = placed
                    .iter()
                    .any(|&(px, py, pw, ph)| x < px + pw && px < x + w && y < py + ph && py < y + h);
                attempt += 1;
                if !overlaps || attempt > 200 {
                    break (x, y, w, h);
                }
            };
            placed.push(rect);
            let (x, y, w, h) = rect;
            for yy in y..y + h {
                for xx in x..x + w {
                    let px = category
                        .color
                        .map(|c| to_u8(c + spec.noise * (2.0 * rng.random::<f32>() - 1.0)));
                    img.put_pixel(xx, yy, Rgb(px));
                }
            }
            regions.push(Region {
                bbox: BoxPrompt::from_xywh_pixels([x as f64, y as f64, w as f64, h as f64], size as f64, size as f64),
                category: category.name.clone(),
            });
        }
        let path = dir.join(format!("img_{i:03}.png"));
        img.save(&path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
        records.push(AnnotationRecord {
            image_id: i.to_string(),
            image_path: path,
            width: size,
            height: size,
            regions,
        });
    }
    let names: Vec<String> = spec.categories.iter().map(|c| c.name.clone()).collect();
    let ann = dir.join("annotations.json");
    write_coco(&ann, &records, &names)?;
    Ok(ann)
}
