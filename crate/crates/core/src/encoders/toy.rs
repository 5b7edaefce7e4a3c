//! Seeded stand-ins for the frozen backbones.
//!
//! Every weight is drawn from a `ChaCha8Rng` seeded with `EncoderSpec::seed`,
//! one stream per encoder (localization = 1, image = 2, text = 3). Each weight
//! matrix is filled row-major with `(2u - 1) * bound`, `u = rng.random::<f32>()`,
//! in the order the fields are declared below.

use std::f32::consts::PI;

use image::imageops::{self, FilterType};
use image::Rgb32FImage;
use ndarray::{s, Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    BoxPrompt, EncoderSpec, ImageEncoder, ImageInput, LocalizationEncoder, PositionAwareTokenSet, SemanticFeatureMap,
    TextEncoder, TokenTap,
};
use crate::params::ParameterSnapshot;
use crate::Result;

pub const LOCALIZATION_STREAM: u64 = 1;
pub const IMAGE_STREAM: u64 = 2;
pub const TEXT_STREAM: u64 = 3;

/// Mean RGB over the box plus mean RGB of each of its four quadrants.
pub const APPEARANCE_DIM: usize = 15;
pub const TEXT_HASH_BUCKETS: usize = 1024;
pub const POSITION_EMBED_BOUND: f32 = 0.1;
pub const DECODER_BIAS_BOUND: f32 = 0.1;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f32) -> Array2<f32> {
    let data = (0..rows * cols)
        .map(|_| (rng.random::<f32>() * 2.0 - 1.0) * bound)
        .collect();
    Array2::from_shape_vec((rows, cols), data).expect("shape matches data length")
}

fn fan_in_bound(fan_in: usize) -> f32 {
    (3.0 / fan_in as f32).sqrt()
}

fn snapshot(items: &[(&str, &Array2<f32>)]) -> ParameterSnapshot {
    ParameterSnapshot::new(
        items
            .iter()
            .map(|(n, a)| (n.to_string(), (*a).clone().into_dyn()))
            .collect(),
    )
}

/// Box-prompted encoder. The prompt-encoder tap is a random Fourier encoding
/// of the two box corners; the decoder tap mixes that with pooled pixel
/// statistics through a fixed `tanh` layer; the MLP tap squeezes the decoder
/// token through a rank-`d_loc/4` bottleneck.
#[derive(Clone, Debug)]
pub struct ToyLocalizationEncoder {
    d_loc: usize,
    /// `(2, d_loc / 4)` corner frequencies.
    fourier: Array2<f32>,
    /// `(d_loc + APPEARANCE_DIM, d_loc)`.
    decoder_weight: Array2<f32>,
    /// `(1, d_loc)`.
    decoder_bias: Array2<f32>,
    /// `(d_loc, d_loc / 4)`.
    mlp_down: Array2<f32>,
    /// `(d_loc / 4, d_loc)`.
    mlp_up: Array2<f32>,
}

impl ToyLocalizationEncoder {
    pub fn new(spec: &EncoderSpec) -> Self {
        let d = spec.d_loc;
        let q = d / 4;
        let mut rng = stream_rng(spec.seed, LOCALIZATION_STREAM);
        let fourier = uniform_matrix(&mut rng, 2, q, 1.0);
        let decoder_weight = uniform_matrix(&mut rng, d + APPEARANCE_DIM, d, fan_in_bound(d + APPEARANCE_DIM));
        let decoder_bias = uniform_matrix(&mut rng, 1, d, DECODER_BIAS_BOUND);
        let mlp_down = uniform_matrix(&mut rng, d, q, fan_in_bound(d));
        let mlp_up = uniform_matrix(&mut rng, q, d, fan_in_bound(q));
        ToyLocalizationEncoder {
            d_loc: d,
            fourier,
            decoder_weight,
            decoder_bias,
            mlp_down,
            mlp_up,
        }
    }

    fn corner_encoding(&self, x: f64, y: f64, out: &mut [f32]) {
        let q = self.fourier.ncols();
        let cx = 2.0 * x as f32 - 1.0;
        let cy = 2.0 * y as f32 - 1.0;
        for j in 0..q {
            let proj = 2.0 * PI * (cx * self.fourier[[0, j]] + cy * self.fourier[[1, j]]);
            out[j] = proj.sin();
            out[q + j] = proj.cos();
        }
    }

    fn prompt_token(&self, b: &BoxPrompt) -> Array1<f32> {
        let half = self.d_loc / 2;
        let mut pe = vec![0.0; self.d_loc];
        self.corner_encoding(b.x1, b.y1, &mut pe[..half]);
        self.corner_encoding(b.x2, b.y2, &mut pe[half..]);
        Array1::from(pe)
    }

    fn decoder_token(&self, prompt: ArrayView1<f32>, appearance: &[f32; APPEARANCE_DIM]) -> Array1<f32> {
        let mut input = Array1::zeros(self.d_loc + APPEARANCE_DIM);
        input.slice_mut(s![..self.d_loc]).assign(&prompt);
        for (i, &a) in appearance.iter().enumerate() {
            input[self.d_loc + i] = a;
        }
        (input.dot(&self.decoder_weight) + self.decoder_bias.row(0)).mapv(f32::tanh)
    }

    fn mlp_token(&self, decoder: ArrayView1<f32>) -> Array1<f32> {
        decoder.dot(&self.mlp_down).mapv(f32::tanh).dot(&self.mlp_up)
    }
}

/// Half-open pixel range covered by `[lo, hi]` on an axis of `n` pixels;
/// always at least one pixel wide.
pub fn pixel_span(lo: f64, hi: f64, n: usize) -> (usize, usize) {
    let start = ((lo * n as f64).floor() as usize).min(n - 1);
    let end = ((hi * n as f64).ceil() as usize).clamp(start + 1, n);
    (start, end)
}

fn halves(start: usize, end: usize) -> [(usize, usize); 2] {
    if end - start >= 2 {
        let mid = start + (end - start) / 2;
        [(start, mid), (mid, end)]
    } else {
        [(start, end), (start, end)]
    }
}

fn mean_rgb(image: &ImageInput, rows: (usize, usize), cols: (usize, usize)) -> [f32; 3] {
    let px = image.pixels();
    let mut acc = [0.0f32; 3];
    for r in rows.0..rows.1 {
        for c in cols.0..cols.1 {
            for (ch, a) in acc.iter_mut().enumerate() {
                *a += px[[r, c, ch]];
            }
        }
    }
    let n = ((rows.1 - rows.0) * (cols.1 - cols.0)) as f32;
    acc.map(|a| a / n)
}

/// Pooled box appearance, each statistic mapped from `[0, 1]` to `[-1, 1]`.
pub fn box_appearance(image: &ImageInput, b: &BoxPrompt) -> [f32; APPEARANCE_DIM] {
    let rows = pixel_span(b.y1, b.y2, image.height());
    let cols = pixel_span(b.x1, b.x2, image.width());
    let mut out = [0.0; APPEARANCE_DIM];
    out[..3].copy_from_slice(&mean_rgb(image, rows, cols));
    let mut k = 3;
    for rh in halves(rows.0, rows.1) {
        for ch in halves(cols.0, cols.1) {
            out[k..k + 3].copy_from_slice(&mean_rgb(image, rh, ch));
            k += 3;
        }
    }
    out.map(|v| 2.0 * v - 1.0)
}

impl LocalizationEncoder for ToyLocalizationEncoder {
    fn token_dim(&self) -> usize {
        self.d_loc
    }

    fn encode_localization(
        &self,
        image: &ImageInput,
        boxes: &[BoxPrompt],
        tap: TokenTap,
    ) -> Result<PositionAwareTokenSet> {
        for (i, b) in boxes.iter().enumerate() {
            b.validate(i)?;
        }
        let mut tokens = Array2::zeros((boxes.len(), self.d_loc));
        for (i, b) in boxes.iter().enumerate() {
            let prompt = self.prompt_token(b);
            let token = match tap {
                TokenTap::PromptEncoder => prompt,
                TokenTap::TransformerDecoder | TokenTap::Mlp => {
                    let decoder = self.decoder_token(prompt.view(), &box_appearance(image, b));
                    if tap == TokenTap::Mlp {
                        self.mlp_token(decoder.view())
                    } else {
                        decoder
                    }
                }
            };
            tokens.row_mut(i).assign(&token);
        }
        Ok(PositionAwareTokenSet {
            tokens,
            source_tap: tap,
        })
    }

    fn parameters(&self) -> ParameterSnapshot {
        snapshot(&[
            ("fourier", &self.fourier),
            ("decoder_weight", &self.decoder_weight),
            ("decoder_bias", &self.decoder_bias),
            ("mlp_down", &self.mlp_down),
            ("mlp_up", &self.mlp_up),
        ])
    }
}

/// Patch-embedding image encoder. The input is resized (bilinear, no crop) to
/// `input_resolution`, each `patch_size` patch is centered at 0.5, flattened
/// `(row, col, channel)` and projected; a fixed position embedding is added.
/// The class token is `tanh(mean(grid) W_cls)`.
#[derive(Clone, Debug)]
pub struct ToyImageEncoder {
    resolution: usize,
    patch: usize,
    /// `(3 * patch^2, d_vil)`.
    patch_weight: Array2<f32>,
    /// `(M, d_vil)`.
    position: Array2<f32>,
    /// `(d_vil, d_vil)`.
    class_weight: Array2<f32>,
}

impl ToyImageEncoder {
    pub fn new(spec: &EncoderSpec) -> Self {
        let patch_dim = 3 * spec.patch_size * spec.patch_size;
        let mut rng = stream_rng(spec.seed, IMAGE_STREAM);
        let patch_weight = uniform_matrix(&mut rng, patch_dim, spec.d_vil, fan_in_bound(patch_dim));
        let position = uniform_matrix(&mut rng, spec.num_grid_tokens(), spec.d_vil, POSITION_EMBED_BOUND);
        let class_weight = uniform_matrix(&mut rng, spec.d_vil, spec.d_vil, fan_in_bound(spec.d_vil));
        ToyImageEncoder {
            resolution: spec.input_resolution,
            patch: spec.patch_size,
            patch_weight,
            position,
            class_weight,
        }
    }

    fn resized(&self, image: &ImageInput) -> Array2<f32> {
        let r = self.resolution;
        let flat: Vec<f32> = if image.height() == r && image.width() == r {
            image.pixels().iter().copied().collect()
        } else {
            let buf = Rgb32FImage::from_raw(
                image.width() as u32,
                image.height() as u32,
                image.pixels().iter().copied().collect(),
            )
            .expect("pixel buffer matches dimensions");
            imageops::resize(&buf, r as u32, r as u32, FilterType::Triangle).into_raw()
        };
        Array2::from_shape_vec((r, r * 3), flat).expect("resized buffer is r x r x 3")
    }
}

impl ImageEncoder for ToyImageEncoder {
    fn feature_dim(&self) -> usize {
        self.patch_weight.ncols()
    }

    fn grid_hw(&self) -> (usize, usize) {
        let side = self.resolution / self.patch;
        (side, side)
    }

    fn encode_vil_image(&self, image: &ImageInput) -> Result<SemanticFeatureMap> {
        let pixels = self.resized(image);
        let (rows, cols) = self.grid_hw();
        let p = self.patch;
        let mut patches = Array2::zeros((rows * cols, 3 * p * p));
        for gy in 0..rows {
            for gx in 0..cols {
                let mut row = patches.row_mut(gy * cols + gx);
                let mut k = 0;
                for dy in 0..p {
                    let line = pixels.row(gy * p + dy);
                    for v in line.slice(s![gx * p * 3..(gx + 1) * p * 3]) {
                        row[k] = v - 0.5;
                        k += 1;
                    }
                }
            }
        }
        let grid = patches.dot(&self.patch_weight) + &self.position;
        let mean = grid.mean_axis(ndarray::Axis(0)).expect("non-empty grid");
        let class_token = mean.dot(&self.class_weight).mapv(f32::tanh);
        SemanticFeatureMap::new(grid, class_token, (rows, cols))
    }

    fn parameters(&self) -> ParameterSnapshot {
        snapshot(&[
            ("patch_weight", &self.patch_weight),
            ("position", &self.position),
            ("class_weight", &self.class_weight),
        ])
    }
}

/// Hashed bag of character trigrams and words through a fixed random matrix.
#[derive(Clone, Debug)]
pub struct ToyTextEncoder {
    /// `(TEXT_HASH_BUCKETS, d_vil)`.
    weight: Array2<f32>,
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Signed hashed feature counts of a prompt: trigrams of the lowercased,
/// space-padded prompt and `w:`-prefixed whitespace words.
pub fn text_features(prompt: &str) -> Array1<f32> {
    let mut counts = Array1::zeros(TEXT_HASH_BUCKETS);
    let mut add = |key: &[u8]| {
        let h = fnv1a(key);
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        counts[(h % TEXT_HASH_BUCKETS as u64) as usize] += sign;
    };
    let lowered = prompt.to_lowercase();
    let padded: Vec<char> = format!(" {lowered} ").chars().collect();
    for w in padded.windows(3) {
        add(w.iter().collect::<String>().as_bytes());
    }
    for word in lowered.split_whitespace() {
        add(format!("w:{word}").as_bytes());
    }
    counts
}

impl ToyTextEncoder {
    pub fn new(spec: &EncoderSpec) -> Self {
        let mut rng = stream_rng(spec.seed, TEXT_STREAM);
        ToyTextEncoder {
            weight: uniform_matrix(&mut rng, TEXT_HASH_BUCKETS, spec.d_vil, 1.0),
        }
    }
}

impl TextEncoder for ToyTextEncoder {
    fn embedding_dim(&self) -> usize {
        self.weight.ncols()
    }

    fn embed_prompt(&self, prompt: &str) -> Array1<f32> {
        text_features(prompt).dot(&self.weight)
    }

    fn parameters(&self) -> ParameterSnapshot {
        snapshot(&[("weight", &self.weight)])
    }
}
