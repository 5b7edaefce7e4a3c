use std::path::PathBuf;

use ndarray::Array2;
use proptest::prelude::*;
use regionspot::alignment::AlignmentConfig;
use regionspot::alignment::ScoredLabel;
use regionspot::checkpoint::Checkpoint;
use regionspot::config::{PromptConfig, RunConfig, StageConfig};
use regionspot::datasets::synthetic::{generate, SyntheticSpec};
use regionspot::datasets::{AnnotationRecord, LabelSpace, Region};
use regionspot::encoders::{BoxPrompt, EncoderSpec, ImageInput};
use regionspot::evaluator::{
    attention_heatmaps, evaluate_recognition, interpolated_ap, Bucket, EvalMode, EvalOptions, Proposal, ProposalSet,
    Recognizer, RegionPrediction,
};
use regionspot::fusion::FusionConfig;
use regionspot::trainer::{run_training, NoopObserver};
use regionspot::Error;

fn bx(i: usize) -> BoxPrompt {
    // disjoint vertical strips
    let x = i as f64 * 0.05;
    BoxPrompt::new(x, 0.0, x + 0.04, 1.0).unwrap()
}

fn record(id: &str, labels: &[&str]) -> AnnotationRecord {
    AnnotationRecord {
        image_id: id.into(),
        image_path: PathBuf::from(format!("{id}.png")),
        width: 100,
        height: 100,
        regions: labels
            .iter()
            .enumerate()
            .map(|(i, l)| Region {
                bbox: bx(i),
                category: l.to_string(),
            })
            .collect(),
    }
}

fn pred(id: &str, region: usize, labels: &[(&str, f64)]) -> RegionPrediction {
    RegionPrediction {
        image_id: id.into(),
        bbox: bx(region),
        top: labels
            .iter()
            .map(|&(c, s)| ScoredLabel {
                category: c.into(),
                score: s,
                index: 0,
            })
            .collect(),
    }
}

/// AP of category "a" for a ranked hit pattern, through the full evaluator:
/// one image with `num_gt` regions of "a" followed by one "b" per miss.
fn scenario_ap(hits: &[bool], num_gt: usize) -> f64 {
    let misses = hits.iter().filter(|h| !**h).count();
    let mut labels = vec!["a"; num_gt];
    labels.extend(std::iter::repeat_n("b", misses));
    let gt = vec![record("img", &labels)];
    let (mut next_hit, mut next_miss) = (0, num_gt);
    let preds: Vec<RegionPrediction> = hits
        .iter()
        .enumerate()
        .map(|(rank, &h)| {
            let region = if h {
                next_hit += 1;
                next_hit - 1
            } else {
                next_miss += 1;
                next_miss - 1
            };
            pred("img", region, &[("a", 0.99 - rank as f64 * 0.01)])
        })
        .collect();
    let report = evaluate_recognition(&preds, &gt, &EvalOptions::default()).unwrap();
    report.per_category.iter().find(|c| c.category == "a").unwrap().ap
}

/// Worked by hand: precision envelope sampled at recall 0, 0.01, ..., 1.
const HAND_SCENARIOS: &[(&[bool], usize, f64)] = &[
    (&[true], 1, 1.0),
    (&[false], 1, 0.0),
    (&[true, false], 1, 1.0),
    // precision 1/2 reached at recall 1
    (&[false, true], 1, 0.5),
    // 51 levels at 1, 50 at 2/3
    (&[true, false, true], 2, (51.0 + 50.0 * 2.0 / 3.0) / 101.0),
    // recall stops at 1/2
    (&[true, true], 4, 51.0 / 101.0),
    (&[false, false, true], 1, 1.0 / 3.0),
    (&[true, false, false, true], 2, (51.0 + 25.0) / 101.0),
    // recall 2/3 at most; 67 levels at 1/2
    (&[false, true, false, true], 3, 33.5 / 101.0),
    (&[true, true, true], 3, 1.0),
];

#[test]
fn hand_worked_precision_recall_cases() {
    for &(hits, num_gt, expected) in HAND_SCENARIOS {
        let ap = interpolated_ap(hits, num_gt);
        assert!((ap - expected).abs() < 5e-5, "{hits:?}/{num_gt}: {ap} vs {expected}");
        assert!((scenario_ap(hits, num_gt) - expected).abs() < 5e-5);
    }
    assert_eq!(interpolated_ap(&[], 3), 0.0);
    assert_eq!(interpolated_ap(&[true], 0), 0.0);
}

#[test]
fn perfect_and_hopeless_predictions() {
    let gt = vec![record("x", &["a", "b", "c"]), record("y", &["b", "a"])];
    let perfect: Vec<RegionPrediction> = gt
        .iter()
        .flat_map(|r| {
            r.regions
                .iter()
                .enumerate()
                .map(|(i, g)| pred(&r.image_id, i, &[(g.category.as_str(), 0.9)]))
                .collect::<Vec<_>>()
        })
        .collect();
    let report = evaluate_recognition(&perfect, &gt, &EvalOptions::default()).unwrap();
    assert_eq!(report.map, 1.0);
    assert_eq!(report.num_predictions, 5);

    let wrong: Vec<RegionPrediction> = perfect
        .iter()
        .map(|p| {
            let other = if p.top[0].category == "a" { "b" } else { "a" };
            RegionPrediction {
                top: vec![ScoredLabel {
                    category: other.into(),
                    score: 0.9,
                    index: 0,
                }],
                ..p.clone()
            }
        })
        .collect();
    let report = evaluate_recognition(&wrong, &gt, &EvalOptions::default()).unwrap();
    assert_eq!(report.map, 0.0);
}

#[test]
fn mis_ranked_six_region_case() {
    // image p: a a b, image q: b a b; one bad top-1 per image
    let gt = vec![record("p", &["a", "a", "b"]), record("q", &["b", "a", "b"])];
    let preds = vec![
        pred("p", 0, &[("a", 0.9), ("b", 0.1)]),
        pred("p", 1, &[("b", 0.6), ("a", 0.4)]),
        pred("p", 2, &[("b", 0.8), ("a", 0.2)]),
        pred("q", 0, &[("b", 0.7), ("a", 0.3)]),
        pred("q", 1, &[("a", 0.5), ("b", 0.5)]),
        pred("q", 2, &[("a", 0.35), ("b", 0.3)]),
    ];
    let report = evaluate_recognition(&preds, &gt, &EvalOptions::default()).unwrap();
    // "a" ranked: .9 T, .5 T, .4 T, .35 F, .3 F, .2 F -> AP 1
    // "b" ranked: .8 T, .7 T, .6 F, .5 F, .3 T, .1 F -> precisions 1,1,.67,.5,.6
    //   levels 0..66 at 1, 67..100 at .6
    let a = &report.per_category[0];
    let b = &report.per_category[1];
    assert_eq!((a.category.as_str(), b.category.as_str()), ("a", "b"));
    assert!((a.ap - 1.0).abs() < 1e-12);
    let expected_b = (67.0 + 34.0 * 0.6) / 101.0;
    assert!((b.ap - expected_b).abs() < 1e-12, "{}", b.ap);
    assert!((report.map - (1.0 + expected_b) / 2.0).abs() < 1e-12);
}

#[test]
fn buckets_partition_categories_and_missing_ones_are_flagged() {
    let gt = vec![record("x", &["rare", "mid", "big", "gone"])];
    let preds = vec![
        pred("x", 0, &[("rare", 0.9)]),
        pred("x", 1, &[("mid", 0.9)]),
        pred("x", 2, &[("big", 0.9)]),
    ];
    let mut freq = LabelSpace::new();
    freq.add("rare", 3);
    freq.add("mid", 50);
    freq.add("big", 500);
    let options = EvalOptions {
        frequencies: Some(freq),
        vocabulary: Some(vec!["rare".into(), "mid".into(), "big".into()]),
        ..EvalOptions::default()
    };
    let report = evaluate_recognition(&preds, &gt, &options).unwrap();
    let buckets: Vec<(String, Bucket)> = report
        .per_category
        .iter()
        .map(|c| (c.category.clone(), c.bucket))
        .collect();
    assert_eq!(
        buckets,
        [
            ("rare".into(), Bucket::Rare),
            ("mid".into(), Bucket::Common),
            ("big".into(), Bucket::Frequent),
            ("gone".into(), Bucket::Rare)
        ]
    );
    assert_eq!(report.missing_categories, ["gone"]);
    assert_eq!(report.ap_r, Some(0.5));
    assert_eq!(report.ap_c, Some(1.0));
    assert_eq!(report.ap_f, Some(1.0));
    assert_eq!(report.map, 0.75);

    // no frequent categories: that bucket is empty, not zero
    let report = evaluate_recognition(&preds[..1], &gt[..1], &EvalOptions::default()).unwrap();
    assert_eq!(report.ap_f, None);
    assert_eq!(report.ap_c, None);
    assert!(report.ap_r.is_some());
}

#[test]
fn predictions_must_land_on_annotated_boxes() {
    let gt = vec![record("x", &["a"])];
    let off = RegionPrediction {
        bbox: BoxPrompt::new(0.5, 0.5, 0.9, 0.9).unwrap(),
        ..pred("x", 0, &[("a", 0.9)])
    };
    assert!(matches!(
        evaluate_recognition(&[off], &gt, &EvalOptions::default()),
        Err(Error::UnmatchedPrediction { index: 0, .. })
    ));
    assert!(matches!(
        evaluate_recognition(&[pred("nope", 0, &[("a", 0.9)])], &gt, &EvalOptions::default()),
        Err(Error::UnmatchedPrediction { .. })
    ));
    // the same box twice has nothing left to match the second time
    assert!(evaluate_recognition(
        &[pred("x", 0, &[("a", 0.9)]), pred("x", 0, &[("a", 0.8)])],
        &gt,
        &EvalOptions::default()
    )
    .is_err());
}

#[test]
fn detection_mode_matches_greedily_at_the_threshold() {
    let gt = vec![AnnotationRecord {
        regions: vec![Region {
            bbox: BoxPrompt::new(0.0, 0.0, 0.4, 0.4).unwrap(),
            category: "a".into(),
        }],
        ..record("x", &[])
    }];
    // IoU of the shifted box with the truth is 0.3 * 0.4 / (2 * 0.16 - 0.12) = 0.6
    let shifted = BoxPrompt::new(0.1, 0.0, 0.5, 0.4).unwrap();
    let det = |bbox, score| RegionPrediction {
        image_id: "x".into(),
        bbox,
        top: vec![ScoredLabel {
            category: "a".into(),
            score,
            index: 0,
        }],
    };
    let run = |preds: &[RegionPrediction], iou| {
        let options = EvalOptions {
            mode: EvalMode::Detection,
            iou_threshold: iou,
            ..EvalOptions::default()
        };
        evaluate_recognition(preds, &gt, &options).unwrap().map
    };
    assert_eq!(run(&[det(shifted, 0.9)], 0.5), 1.0);
    assert_eq!(run(&[det(shifted, 0.9)], 0.7), 0.0);
    // a duplicate above the true hit costs precision
    let dup = [
        det(BoxPrompt::new(0.6, 0.6, 1.0, 1.0).unwrap(), 0.95),
        det(shifted, 0.9),
    ];
    assert!((run(&dup, 0.5) - 0.5).abs() < 1e-12);
}

fn random_case() -> impl Strategy<Value = (Vec<AnnotationRecord>, Vec<RegionPrediction>)> {
    let cats = ["a", "b", "c"];
    prop::collection::vec(
        prop::collection::vec(
            (0usize..3, prop::collection::vec((0usize..3, 0.001f64..0.999), 1..4)),
            1..5,
        ),
        1..5,
    )
    .prop_map(move |images| {
        let mut gt = Vec::new();
        let mut preds = Vec::new();
        for (i, regions) in images.iter().enumerate() {
            let id = format!("im{i}");
            let labels: Vec<&str> = regions.iter().map(|(c, _)| cats[*c]).collect();
            gt.push(record(&id, &labels));
            for (j, (_, top)) in regions.iter().enumerate() {
                let mut seen = std::collections::BTreeSet::new();
                let top: Vec<(&str, f64)> = top
                    .iter()
                    .filter(|(c, _)| seen.insert(*c))
                    .map(|&(c, s)| (cats[c], s))
                    .collect();
                preds.push(pred(&id, j, &top));
            }
        }
        (gt, preds)
    })
}

/// Definition-level AP: for each recall level, the best precision at any rank
/// reaching it.
fn oracle_ap(gt: &[AnnotationRecord], preds: &[RegionPrediction], cat: &str) -> f64 {
    let mut dets: Vec<(f64, bool)> = Vec::new();
    for p in preds {
        let r = gt.iter().find(|r| r.image_id == p.image_id).unwrap();
        let region = (0..r.regions.len()).find(|&j| bx(j) == p.bbox).unwrap();
        for l in &p.top {
            if l.category == cat {
                dets.push((l.score, r.regions[region].category == cat));
            }
        }
    }
    dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let g = gt.iter().flat_map(|r| &r.regions).filter(|x| x.category == cat).count();
    let mut points = Vec::new();
    let mut tp = 0;
    for (i, (_, hit)) in dets.iter().enumerate() {
        tp += usize::from(*hit);
        points.push((tp as f64 / g as f64, tp as f64 / (i + 1) as f64));
    }
    (0..=100)
        .map(|l| {
            points
                .iter()
                .filter(|(r, _)| *r >= l as f64 / 100.0 - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

proptest! {
    #[test]
    fn ap_matches_definition_and_is_invariant((gt, preds) in random_case()) {
        let report = evaluate_recognition(&preds, &gt, &EvalOptions::default()).unwrap();
        for c in &report.per_category {
            let o = oracle_ap(&gt, &preds, &c.category);
            prop_assert!((c.ap - o).abs() < 1e-9, "{}: {} vs {}", c.category, c.ap, o);
        }

        // strictly increasing score transform
        let squashed: Vec<RegionPrediction> = preds.iter().map(|p| RegionPrediction {
            top: p.top.iter().map(|l| ScoredLabel { score: l.score.powi(3) * 0.5 + 0.1, ..l.clone() }).collect(),
            ..p.clone()
        }).collect();
        let again = evaluate_recognition(&squashed, &gt, &EvalOptions::default()).unwrap();
        prop_assert_eq!(&again.per_category, &report.per_category);

        // every image and prediction twice
        let mut gt2 = gt.clone();
        gt2.extend(gt.iter().map(|r| AnnotationRecord { image_id: format!("{}'", r.image_id), ..r.clone() }));
        let mut preds2 = preds.clone();
        preds2.extend(preds.iter().map(|p| RegionPrediction { image_id: format!("{}'", p.image_id), ..p.clone() }));
        let doubled = evaluate_recognition(&preds2, &gt2, &EvalOptions::default()).unwrap();
        for (a, b) in report.per_category.iter().zip(&doubled.per_category) {
            prop_assert!((a.ap - b.ap).abs() < 1e-9);
        }
    }
}

fn small_checkpoint(depth: usize) -> Checkpoint {
    let encoder = EncoderSpec {
        d_loc: 16,
        d_vil: 32,
        ..EncoderSpec::default()
    };
    let fusion = FusionConfig {
        depth,
        c_dim: 32,
        num_heads: 2,
        ..FusionConfig::default()
    };
    Checkpoint::initial(
        &encoder,
        &fusion,
        &AlignmentConfig::default(),
        &PromptConfig::default(),
        None,
        0,
    )
    .unwrap()
}

#[test]
fn proposals_and_objectness() {
    let rec = Recognizer::new(small_checkpoint(1)).unwrap();
    let image = ImageInput::constant("img", 40, 60, 0.3).unwrap();
    let table = rec.vocabulary(&["cat".into(), "dog".into(), "eel".into()]).unwrap();
    assert!(rec.infer_regions(&image, &[], &table, 5).unwrap().is_empty());
    assert!(rec.vocabulary(&[]).is_err());

    let boxes = [BoxPrompt::new(0.1, 0.1, 0.5, 0.6).unwrap(), BoxPrompt::full()];
    let gt = AnnotationRecord {
        regions: boxes
            .iter()
            .map(|&b| Region {
                bbox: b,
                category: "cat".into(),
            })
            .collect(),
        ..record("img", &[])
    };
    let proposals = ProposalSet::from_ground_truth(&[gt]);
    let props = proposals.get("img");
    assert!(props.iter().all(|p| p.score == 1.0));
    let preds = rec.infer_regions(&image, props, &table, 5).unwrap();
    let (scores, _, _) = rec.score_boxes(&image, &boxes, &table).unwrap();
    for (p, row) in preds.iter().zip(scores.logits.outer_iter()) {
        assert_eq!(p.top.len(), 3);
        for l in &p.top {
            let k = table.category_names.iter().position(|n| *n == l.category).unwrap();
            let prob = 1.0 / (1.0 + (-(row[k] as f64)).exp());
            assert!((l.score - prob).abs() < 1e-6);
        }
    }
    // objectness scales the score
    let half: Vec<Proposal> = props
        .iter()
        .map(|p| Proposal {
            score: 0.5,
            ..p.clone()
        })
        .collect();
    let halved = rec.infer_regions(&image, &half, &table, 1).unwrap();
    assert!((halved[0].top[0].score - 0.5 * preds[0].top[0].score).abs() < 1e-12);
    assert_eq!(halved[0].top.len(), 1);
}

#[test]
fn attention_export_shapes_and_layers() {
    let rec = Recognizer::new(small_checkpoint(2)).unwrap();
    let image = ImageInput::constant("img", 50, 50, 0.6).unwrap();
    let boxes = [
        BoxPrompt::new(0.0, 0.0, 0.5, 0.5).unwrap(),
        BoxPrompt::new(0.4, 0.2, 0.9, 1.0).unwrap(),
    ];
    let export = rec.export_attention(&image, &boxes, 1).unwrap();
    assert_eq!(export.grid_hw, (7, 7));
    assert_eq!(export.heatmaps.len(), 2);
    for h in &export.heatmaps {
        assert_eq!(h.dim(), (7, 7));
        assert!((h.sum() - 1.0).abs() < 1e-5);
        assert!(h.iter().all(|&v| v >= 0.0));
    }
    assert!(matches!(
        rec.export_attention(&image, &boxes, 2),
        Err(Error::Range { index: 2, limit: 2, .. })
    ));

    // a zero query attends uniformly at initialization
    let map = rec.backbones.image.encode_vil_image(&image).unwrap();
    let zero = Array2::<f32>::zeros((1, 16));
    let flat = attention_heatmaps(rec.params(), rec.fusion_config(), zero.view(), &map, 0).unwrap();
    for &v in flat[0].iter() {
        assert!((v - 1.0 / 49.0).abs() < 1e-6);
    }

    let dir = tempfile::tempdir().unwrap();
    let files = export.write(dir.path(), "img").unwrap();
    assert_eq!(files.len(), 3);
    let png = image::open(&files[0]).unwrap();
    assert_eq!((png.width(), png.height()), (7, 7));
}

#[test]
fn two_image_overfit_reaches_top1() {
    let dir = tempfile::tempdir().unwrap();
    let ann = generate(
        &dir.path().join("d"),
        &SyntheticSpec {
            images: 2,
            ..SyntheticSpec::default()
        },
    )
    .unwrap();
    let mut cfg = RunConfig::default();
    cfg.encoder.d_loc = 16;
    cfg.encoder.d_vil = 32;
    cfg.fusion = FusionConfig {
        depth: 1,
        c_dim: 32,
        num_heads: 2,
        ..FusionConfig::default()
    };
    cfg.datasets.insert("train".into(), ann);
    cfg.train.stages = vec![StageConfig {
        datasets: vec!["train".into()],
        iterations: 150,
    }];
    cfg.train.lr_decay_points = vec![];
    cfg.train.batch_size = 2;
    cfg.train.eval_every = 150;
    let out = run_training(&cfg, &mut NoopObserver).unwrap();
    let last = out.evals.last().unwrap();
    assert!(last.top1 >= 0.95, "top-1 {}", last.top1);
}
