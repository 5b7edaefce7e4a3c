//! Independent re-computations of the toy encoders from their documented
//! recipe: ChaCha8 streams per encoder, row-major `(2u - 1) * bound` fills.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regionspot::encoders::{Backbones, BoxPrompt, EncoderSpec, ImageInput, TokenTap, DEFAULT_TEMPLATE};

fn draws(seed: u64, stream: u64, shapes: &[(usize, usize, f64)]) -> Vec<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    shapes
        .iter()
        .map(|&(r, c, bound)| {
            (0..r)
                .map(|_| {
                    (0..c)
                        .map(|_| {
                            let u: f32 = rng.random();
                            // the fill happens in f32; replicate that rounding
                            ((u * 2.0 - 1.0) * bound as f32) as f64
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn spec(d_loc: usize, d_vil: usize, patch: usize, res: usize) -> EncoderSpec {
    EncoderSpec {
        name: "oracle".into(),
        d_loc,
        d_vil,
        patch_size: patch,
        input_resolution: res,
        frozen: true,
        seed: 0,
    }
}

fn bound(fan_in: usize) -> f64 {
    (3.0f32 / fan_in as f32).sqrt() as f64
}

#[test]
fn localization_token_of_full_image_box_matches_reimplementation() {
    let d = 16;
    let q = d / 4;
    let s = spec(d, 32, 16, 32);
    let m = draws(
        0,
        1,
        &[
            (2, q, 1.0),
            (d + 15, d, bound(d + 15)),
            (1, d, 0.1f32 as f64),
            (d, q, bound(d)),
            (q, d, bound(q)),
        ],
    );
    let (fourier, w_dec, b_dec, w_down, w_up) = (&m[0], &m[1], &m[2], &m[3], &m[4]);

    // 30x40 image, constant 0.3 gray with a brighter top-left quadrant
    let mut px = Array3::from_elem((30, 40, 3), 0.3f32);
    for r in 0..15 {
        for c in 0..20 {
            for ch in 0..3 {
                px[[r, c, ch]] = 0.9;
            }
        }
    }
    let image = ImageInput::new("x", px).unwrap();
    let full = BoxPrompt::full();

    // corners (0,0) and (1,1) map to (-1,-1) and (1,1)
    let mut pe = vec![0.0f64; d];
    for (half, corner) in [(0usize, -1.0f64), (1, 1.0)] {
        for j in 0..q {
            let proj = 2.0 * std::f64::consts::PI * (corner * fourier[0][j] + corner * fourier[1][j]);
            pe[half * d / 2 + j] = proj.sin();
            pe[half * d / 2 + q + j] = proj.cos();
        }
    }
    // whole-box mean, then quadrants TL, TR, BL, BR; each mapped to [-1, 1]
    let whole = (0.9 * 300.0 + 0.3 * 900.0) / 1200.0;
    let quads = [0.9, 0.3, 0.3, 0.3];
    let mut appearance = vec![2.0 * whole - 1.0; 3];
    for v in quads {
        appearance.extend([2.0 * v - 1.0; 3]);
    }
    let input: Vec<f64> = pe.iter().copied().chain(appearance).collect();
    let decoder: Vec<f64> = (0..d)
        .map(|j| {
            let z: f64 = input.iter().enumerate().map(|(i, x)| x * w_dec[i][j]).sum::<f64>() + b_dec[0][j];
            z.tanh()
        })
        .collect();
    let hidden: Vec<f64> = (0..q)
        .map(|j| (0..d).map(|i| decoder[i] * w_down[i][j]).sum::<f64>().tanh())
        .collect();
    let mlp: Vec<f64> = (0..d).map(|j| (0..q).map(|i| hidden[i] * w_up[i][j]).sum()).collect();

    let bb = Backbones::toy(&s).unwrap();
    for (tap, expected) in [
        (TokenTap::PromptEncoder, &pe),
        (TokenTap::TransformerDecoder, &decoder),
        (TokenTap::Mlp, &mlp),
    ] {
        let got = bb.localization.encode_localization(&image, &[full], tap).unwrap();
        assert_eq!(got.tokens.dim(), (1, d));
        assert_eq!(got.source_tap, tap);
        for (g, e) in got.tokens.row(0).iter().zip(expected.iter()) {
            assert!((*g as f64 - e).abs() < 1e-5, "{tap:?}: {g} vs {e}");
        }
    }
}

#[test]
fn grid_tokens_of_zero_image_match_reimplementation() {
    let (d, p, res) = (8, 8, 32);
    let s = spec(16, d, p, res);
    let patch_dim = 3 * p * p;
    let m_tokens = (res / p) * (res / p);
    let m = draws(
        0,
        2,
        &[
            (patch_dim, d, bound(patch_dim)),
            (m_tokens, d, 0.1f32 as f64),
            (d, d, bound(d)),
        ],
    );
    // every centered patch entry is -0.5, so each grid row is
    // -0.5 * column sums of the patch matrix plus its position row
    let col_sum: Vec<f64> = (0..d).map(|j| (0..patch_dim).map(|i| m[0][i][j]).sum()).collect();
    let grid: Vec<Vec<f64>> = (0..m_tokens)
        .map(|t| (0..d).map(|j| -0.5 * col_sum[j] + m[1][t][j]).collect())
        .collect();
    let mean: Vec<f64> = (0..d)
        .map(|j| grid.iter().map(|r| r[j]).sum::<f64>() / m_tokens as f64)
        .collect();
    let class: Vec<f64> = (0..d)
        .map(|j| (0..d).map(|i| mean[i] * m[2][i][j]).sum::<f64>().tanh())
        .collect();

    let bb = Backbones::toy(&s).unwrap();
    let image = ImageInput::constant("zero", res, res, 0.0).unwrap();
    let map = bb.image.encode_vil_image(&image).unwrap();
    assert_eq!(map.grid_hw, (4, 4));
    for t in 0..m_tokens {
        for j in 0..d {
            assert!((map.grid_tokens[[t, j]] as f64 - grid[t][j]).abs() < 1e-5);
        }
    }
    for j in 0..d {
        assert!((map.class_token[j] as f64 - class[j]).abs() < 1e-5);
    }
}

#[test]
fn grid_size_follows_resolution_and_patch() {
    for (res, patch, m) in [(224, 32, 49), (336, 14, 576)] {
        let s = spec(16, 8, patch, res);
        let bb = Backbones::toy(&s).unwrap();
        let image = ImageInput::constant("c", 20, 30, 0.5).unwrap();
        let map = bb.image.encode_vil_image(&image).unwrap();
        assert_eq!(map.num_tokens(), m);
        assert_eq!(map.grid_hw.0 * map.grid_hw.1, m);
    }
}

#[test]
fn encoders_are_deterministic_and_handle_empty_input() {
    let s = spec(16, 8, 8, 32);
    let bb = Backbones::toy(&s).unwrap();
    let image = ImageInput::new(
        "g",
        Array3::from_shape_fn((12, 9, 3), |(r, c, ch)| ((r * 7 + c * 3 + ch) % 10) as f32 / 10.0),
    )
    .unwrap();
    let boxes = [
        BoxPrompt::new(0.1, 0.2, 0.6, 0.9).unwrap(),
        BoxPrompt::new(0.5, 0.0, 1.0, 0.5).unwrap(),
    ];
    let a = bb
        .localization
        .encode_localization(&image, &boxes, TokenTap::TransformerDecoder)
        .unwrap();
    let b = bb
        .localization
        .encode_localization(&image, &boxes, TokenTap::TransformerDecoder)
        .unwrap();
    assert_eq!(a, b);
    assert_eq!(a.tokens.nrows(), 2);
    let empty = bb.localization.encode_localization(&image, &[], TokenTap::Mlp).unwrap();
    assert_eq!(empty.tokens.dim(), (0, 16));
    assert_eq!(
        bb.image.encode_vil_image(&image).unwrap(),
        bb.image.encode_vil_image(&image).unwrap()
    );
    assert_eq!(bb.backbone_parameters(), bb.backbone_parameters());
}

#[test]
fn invalid_box_reports_its_index() {
    let bb = Backbones::toy(&spec(16, 8, 8, 32)).unwrap();
    let image = ImageInput::constant("c", 8, 8, 0.5).unwrap();
    let bad = BoxPrompt {
        x1: 0.5,
        y1: 0.1,
        x2: 0.4,
        y2: 0.9,
    };
    let err = bb
        .localization
        .encode_localization(&image, &[BoxPrompt::full(), bad], TokenTap::PromptEncoder)
        .unwrap_err();
    assert!(matches!(err, regionspot::Error::InvalidBox { index: 1, .. }), "{err}");
}

#[test]
fn text_rows_are_unit_norm_and_prompts_templated() {
    let bb = Backbones::toy(&spec(16, 32, 8, 32)).unwrap();
    let names: Vec<String> = ["person", "traffic light", "Zebra"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let table = bb.encode_text(&names, DEFAULT_TEMPLATE).unwrap();
    assert_eq!(table.embeddings.nrows(), 3);
    for row in table.embeddings.outer_iter() {
        assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
    }
    assert_eq!(
        regionspot::encoders::render_prompt(DEFAULT_TEMPLATE, "person").unwrap(),
        "a photo of person in the scene"
    );
    // embedding is a function of the rendered prompt alone
    let single = bb.encode_text(&names[1..2], DEFAULT_TEMPLATE).unwrap();
    assert_eq!(single.embeddings.row(0), table.embeddings.row(1));
    let empty = bb.encode_text(&[], DEFAULT_TEMPLATE).unwrap();
    assert_eq!(empty.embeddings.dim(), (0, 32));
    let dup: Vec<String> = vec!["Cat".into(), "cat ".into()];
    assert!(matches!(
        bb.encode_text(&dup, DEFAULT_TEMPLATE),
        Err(regionspot::Error::DuplicateCategory(_))
    ));
    assert!(matches!(
        bb.encode_text(&names, "{} and {}"),
        Err(regionspot::Error::Template(_))
    ));
}

#[test]
fn text_embedding_matches_hashed_feature_reimplementation() {
    let d = 8;
    let bb = Backbones::toy(&spec(16, d, 8, 32)).unwrap();
    let w = &draws(0, 3, &[(1024, d, 1.0)])[0];
    let prompt = "a photo of cat in the scene";
    // FNV-1a over character trigrams of " prompt " and "w:" words; the top
    // hash bit picks the sign
    let fnv = |s: &str| {
        s.bytes()
            .fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
    };
    let mut counts = vec![0.0f64; 1024];
    let padded: Vec<char> = format!(" {prompt} ").chars().collect();
    let mut keys: Vec<String> = padded.windows(3).map(|w| w.iter().collect()).collect();
    keys.extend(prompt.split(' ').map(|w| format!("w:{w}")));
    for k in keys {
        let h = fnv(&k);
        counts[(h % 1024) as usize] += if h >> 63 == 1 { -1.0 } else { 1.0 };
    }
    let raw: Vec<f64> = (0..d).map(|j| (0..1024).map(|i| counts[i] * w[i][j]).sum()).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let table = bb.encode_text(&["cat".to_string()], DEFAULT_TEMPLATE).unwrap();
    for j in 0..d {
        assert!((table.embeddings[[0, j]] as f64 - raw[j] / norm).abs() < 1e-5);
    }
}

#[test]
fn nonsquare_inputs_are_resized_not_cropped() {
    // a 10x50 half-black/half-white image, squeezed to 32x32, must look like
    // the native 32x32 split image away from the blurred seam; a crop would
    // see only one color
    let s = spec(16, 8, 8, 32);
    let bb = Backbones::toy(&s).unwrap();
    let split = |h: usize, w: usize| {
        ImageInput::new(
            "s",
            Array3::from_shape_fn((h, w, 3), |(_, c, _)| if c < w / 2 { 0.0 } else { 1.0 }),
        )
        .unwrap()
    };
    let squeezed = bb.image.encode_vil_image(&split(10, 50)).unwrap();
    let native = bb.image.encode_vil_image(&split(32, 32)).unwrap();
    let cols = native.grid_hw.1;
    for r in 0..native.grid_hw.0 {
        for c in [0, cols - 1] {
            let t = r * cols + c;
            let diff = (&squeezed.grid_tokens.row(t) - &native.grid_tokens.row(t)).mapv(f32::abs);
            assert!(diff.iter().all(|&d| d < 1e-4), "grid cell ({r}, {c})");
        }
    }
}
