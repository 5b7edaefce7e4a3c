//! Frozen backbone contracts.
//!
//! Three encoders feed the trainable head: a promptable localization encoder
//! that turns boxes into position-aware tokens, a vision-language image
//! encoder that produces a patch-grid feature map plus a class token, and the
//! matching text encoder. None of them exposes a way to mutate its weights;
//! [`Backbones::backbone_parameters`] snapshots them so callers can verify
//! that training leaves them untouched.
//!
//! The [`toy`] implementations are seeded random maps with the right shapes.
//! Real checkpoints plug in by implementing the traits below.

pub mod toy;

use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::params::ParameterSnapshot;
use crate::{Error, Result};

pub const DEFAULT_TEMPLATE: &str = "a photo of {} in the scene";

/// An RGB image with values in `[0, 1]`, stored `(height, width, 3)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageInput {
    id: String,
    pixels: Array3<f32>,
}

impl ImageInput {
    pub fn new(id: impl Into<String>, pixels: Array3<f32>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::InvalidInput(format!("empty image {h}x{w}")));
        }
        if c != 3 {
            return Err(Error::InvalidInput(format!("expected 3 channels, got {c}")));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidInput(format!(
                "pixel value {v} is not a finite number in [0, 1]"
            )));
        }
        Ok(ImageInput {
            id: id.into(),
            pixels: pixels.as_standard_layout().into_owned(),
        })
    }

    pub fn constant(id: impl Into<String>, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(id, Array3::from_elem((height, width, 3), value))
    }

    pub fn load(path: &Path, id: impl Into<String>) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb32f();
        let (w, h) = rgb.dimensions();
        let pixels = Array3::from_shape_vec((h as usize, w as usize, 3), rgb.into_raw())
            .expect("rgb buffer matches dimensions")
            .mapv(|v| v.clamp(0.0, 1.0));
        Self::new(id, pixels)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }
}

/// Axis-aligned box in normalized `(x1, y1, x2, y2)` coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BoxPrompt {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxPrompt {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BoxPrompt { x1, y1, x2, y2 };
        b.validate(0)?;
        Ok(b)
    }

    pub fn full() -> Self {
        BoxPrompt {
            x1: 0.0,
            y1: 0.0,
            x2: 1.0,
            y2: 1.0,
        }
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        let coords = [self.x1, self.y1, self.x2, self.y2];
        let reason = if coords.iter().any(|c| !c.is_finite()) {
            Some("non-finite coordinate".to_string())
        } else if coords.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            Some(format!("coordinates {coords:?} outside [0, 1]"))
        } else if self.x1 >= self.x2 || self.y1 >= self.y2 {
            Some(format!("degenerate box {coords:?} (need x1 < x2, y1 < y2)"))
        } else {
            None
        };
        match reason {
            Some(reason) => Err(Error::InvalidBox { index, reason }),
            None => Ok(()),
        }
    }

    /// Converts a pixel-space `[x, y, w, h]` box to normalized corners,
    /// clipping to the image.
    pub fn from_xywh_pixels(xywh: [f64; 4], width: f64, height: f64) -> Self {
        let [x, y, w, h] = xywh;
        BoxPrompt {
            x1: (x / width).clamp(0.0, 1.0),
            y1: (y / height).clamp(0.0, 1.0),
            x2: ((x + w) / width).clamp(0.0, 1.0),
            y2: ((y + h) / height).clamp(0.0, 1.0),
        }
    }

    pub fn to_xywh_pixels(&self, width: f64, height: f64) -> [f64; 4] {
        [
            self.x1 * width,
            self.y1 * height,
            (self.x2 - self.x1) * width,
            (self.y2 - self.y1) * height,
        ]
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn iou(&self, other: &BoxPrompt) -> f64 {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

impl From<BoxPrompt> for [f64; 4] {
    fn from(b: BoxPrompt) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl TryFrom<[f64; 4]> for BoxPrompt {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BoxPrompt::new(c[0], c[1], c[2], c[3])
    }
}

/// Where in the localization model the per-region token is read out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenTap {
    PromptEncoder,
    #[default]
    TransformerDecoder,
    Mlp,
}

impl TokenTap {
    pub const ALL: [TokenTap; 3] = [TokenTap::PromptEncoder, TokenTap::TransformerDecoder, TokenTap::Mlp];
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositionAwareTokenSet {
    /// `(N, d_loc)`, one row per input box in input order.
    pub tokens: Array2<f32>,
    pub source_tap: TokenTap,
}

impl PositionAwareTokenSet {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticFeatureMap {
    /// `(M, d_vil)`, patch tokens in row-major grid order.
    pub grid_tokens: Array2<f32>,
    pub class_token: Array1<f32>,
    pub grid_hw: (usize, usize),
}

impl SemanticFeatureMap {
    pub fn new(grid_tokens: Array2<f32>, class_token: Array1<f32>, grid_hw: (usize, usize)) -> Result<Self> {
        let (m, d) = grid_tokens.dim();
        if m == 0 {
            return Err(Error::InvalidInput("feature map has no grid tokens".into()));
        }
        if grid_hw.0 * grid_hw.1 != m {
            return Err(Error::shape("feature map grid", m, format!("{:?}", grid_hw)));
        }
        if class_token.len() != d {
            return Err(Error::shape("class token", d, class_token.len()));
        }
        if !grid_tokens.iter().chain(class_token.iter()).all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite feature map".into()));
        }
        Ok(SemanticFeatureMap {
            grid_tokens,
            class_token,
            grid_hw,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_tokens.nrows()
    }

    pub fn dim(&self) -> usize {
        self.grid_tokens.ncols()
    }

    /// Key/value rows for cross-attention: the grid, plus the class token as
    /// one extra trailing row when requested.
    pub fn memory(&self, use_class_token: bool) -> Array2<f32> {
        if use_class_token {
            let mut m = Array2::zeros((self.num_tokens() + 1, self.dim()));
            m.slice_mut(ndarray::s![..self.num_tokens(), ..])
                .assign(&self.grid_tokens);
            m.row_mut(self.num_tokens()).assign(&self.class_token);
            m
        } else {
            self.grid_tokens.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddingTable {
    /// `(K, d_vil)`, unit-norm rows.
    pub embeddings: Array2<f32>,
    pub category_names: Vec<String>,
    pub template: String,
}

impl TextEmbeddingTable {
    pub fn len(&self) -> usize {
        self.category_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.category_names.is_empty()
    }
}

/// Dimensions and identity of a backbone trio.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub name: String,
    pub d_loc: usize,
    pub d_vil: usize,
    pub patch_size: usize,
    pub input_resolution: usize,
    pub frozen: bool,
    pub seed: u64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            name: "toy".into(),
            d_loc: 64,
            d_vil: 128,
            patch_size: 32,
            input_resolution: 224,
            frozen: true,
            seed: 0,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_loc == 0 || !self.d_loc.is_multiple_of(4) {
            return Err(Error::config("encoder.d_loc", "must be a positive multiple of 4"));
        }
        if self.d_vil == 0 {
            return Err(Error::config("encoder.d_vil", "must be positive"));
        }
        if self.patch_size == 0 || self.input_resolution == 0 {
            return Err(Error::config(
                "encoder.patch_size",
                "patch_size and input_resolution must be positive",
            ));
        }
        if !self.input_resolution.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "encoder.input_resolution",
                format!(
                    "{} is not divisible by patch_size {}",
                    self.input_resolution, self.patch_size
                ),
            ));
        }
        if !self.frozen {
            return Err(Error::config("encoder.frozen", "backbone encoders are always frozen"));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.input_resolution / self.patch_size
    }

    pub fn num_grid_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }
}

pub trait LocalizationEncoder: Send + Sync {
    fn token_dim(&self) -> usize;

    fn encode_localization(
        &self,
        image: &ImageInput,
        boxes: &[BoxPrompt],
        tap: TokenTap,
    ) -> Result<PositionAwareTokenSet>;

    fn parameters(&self) -> ParameterSnapshot;
}

pub trait ImageEncoder: Send + Sync {
    fn feature_dim(&self) -> usize;

    fn grid_hw(&self) -> (usize, usize);

    fn encode_vil_image(&self, image: &ImageInput) -> Result<SemanticFeatureMap>;

    fn parameters(&self) -> ParameterSnapshot;
}

pub trait TextEncoder: Send + Sync {
    fn embedding_dim(&self) -> usize;

    /// Raw (unnormalized) embedding of one fully rendered prompt.
    fn embed_prompt(&self, prompt: &str) -> Array1<f32>;

    fn parameters(&self) -> ParameterSnapshot;
}

/// Case-folded, trimmed key used wherever category names are compared.
pub fn fold_name(name: &str) -> String {
    name.trim().to_lowercase()
}

pub fn validate_template(template: &str) -> Result<()> {
    let placeholders = template.matches("{}").count();
    let stray = template.replace("{}", "");
    if placeholders != 1 || stray.contains('{') || stray.contains('}') {
        return Err(Error::Template(template.to_string()));
    }
    Ok(())
}

pub fn render_prompt(template: &str, category: &str) -> Result<String> {
    validate_template(template)?;
    Ok(template.replacen("{}", category, 1))
}

/// Builds the unit-normalized text table for a vocabulary.
pub fn encode_text(encoder: &dyn TextEncoder, categories: &[String], template: &str) -> Result<TextEmbeddingTable> {
    validate_template(template)?;
    let mut seen = std::collections::HashSet::new();
    for name in categories {
        if name.trim().is_empty() {
            return Err(Error::InvalidInput("empty category name".into()));
        }
        if !seen.insert(fold_name(name)) {
            return Err(Error::DuplicateCategory(name.clone()));
        }
    }
    let dim = encoder.embedding_dim();
    let mut embeddings = Array2::zeros((categories.len(), dim));
    for (k, name) in categories.iter().enumerate() {
        let raw = encoder.embed_prompt(&render_prompt(template, name)?);
        let norm = raw.dot(&raw).sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Numerical(format!("text embedding of {name:?} has zero norm")));
        }
        embeddings.row_mut(k).assign(&(raw / norm));
    }
    Ok(TextEmbeddingTable {
        embeddings,
        category_names: categories.to_vec(),
        template: template.to_string(),
    })
}

/// The frozen encoder trio.
pub struct Backbones {
    pub spec: EncoderSpec,
    pub localization: Box<dyn LocalizationEncoder>,
    pub image: Box<dyn ImageEncoder>,
    pub text: Box<dyn TextEncoder>,
}

impl Backbones {
    pub fn toy(spec: &EncoderSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Backbones {
            spec: spec.clone(),
            localization: Box::new(toy::ToyLocalizationEncoder::new(spec)),
            image: Box::new(toy::ToyImageEncoder::new(spec)),
            text: Box::new(toy::ToyTextEncoder::new(spec)),
        })
    }

    pub fn backbone_parameters(&self) -> ParameterSnapshot {
        ParameterSnapshot::merged([
            ("localization".to_string(), self.localization.parameters()),
            ("image".to_string(), self.image.parameters()),
            ("text".to_string(), self.text.parameters()),
        ])
    }

    pub fn encode_text(&self, categories: &[String], template: &str) -> Result<TextEmbeddingTable> {
        encode_text(self.text.as_ref(), categories, template)
    }
}

impl std::fmt::Debug for Backbones {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backbones")
            .field("spec", &self.spec)
            .finish_non_exhaustive()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_template_renders_prompt() {
        assert_eq!(
            render_prompt(DEFAULT_TEMPLATE, "person").unwrap(),
            "a photo of person in the scene"
        );
    }

    #[test]
    fn malformed_templates_are_rejected() {
        for t in ["no placeholder", "{} and {}", "{x} {}", "{}}"] {
            assert!(matches!(validate_template(t), Err(Error::Template(_))), "{t}");
        }
    }

    #[test]
    fn box_validation_reports_index() {
        let bad = BoxPrompt {
            x1: 0.5,
            y1: 0.1,
            x2: 0.4,
            y2: 0.3,
        };
        match bad.validate(7) {
            Err(Error::InvalidBox { index, .. }) => assert_eq!(index, 7),
            other => panic!("unexpected {other:?}"),
        }
        assert!(BoxPrompt::new(0.0, 0.0, 1.1, 0.5).is_err());
        assert!(BoxPrompt::new(0.0, f64::NAN, 1.0, 0.5).is_err());
    }

    #[test]
    fn pixel_box_conversion() {
        let b = BoxPrompt::from_xywh_pixels([10.0, 20.0, 30.0, 40.0], 100.0, 200.0);
        assert!((b.x1 - 0.1).abs() < 1e-12);
        assert!((b.y1 - 0.1).abs() < 1e-12);
        assert!((b.x2 - 0.4).abs() < 1e-12);
        assert!((b.y2 - 0.3).abs() < 1e-12);
    }

    #[test]
    fn image_input_rejects_bad_pixels() {
        assert!(ImageInput::new("a", Array3::zeros((0, 4, 3))).is_err());
        let mut px = Array3::zeros((2, 2, 3));
        px[[0, 1, 2]] = f32::NAN;
        assert!(matches!(ImageInput::new("a", px), Err(Error::InvalidInput(_))));
        assert!(ImageInput::new("a", Array3::from_elem((2, 2, 3), 1.5)).is_err());
    }

    #[test]
    fn encoder_spec_validation() {
        let mut spec = EncoderSpec::default();
        spec.validate().unwrap();
        spec.frozen = false;
        assert!(spec.validate().is_err());
        let spec = EncoderSpec {
            input_resolution: 225,
            ..EncoderSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn encoder_spec_json_field_names() {
        let json = serde_json::to_value(EncoderSpec::default()).unwrap();
        let mut keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "d_loc",
                "d_vil",
                "frozen",
                "input_resolution",
                "name",
                "patch_size",
                "seed"
            ]
        );
    }
}
