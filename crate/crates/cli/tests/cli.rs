use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use regionspot::checkpoint::{load_checkpoint, Checkpoint};
use regionspot::evaluator::load_predictions;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_regionspot"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).env("RUST_LOG", "warn").output().unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic data plus a small config next to it.
fn setup(dir: &Path, iterations: u64) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    assert!(run(&["synth", "--out", s(&data)]).status.success());
    let config = dir.join("config.json");
    let text = serde_json::json!({
        "encoder": {"d_loc": 16, "d_vil": 32},
        "fusion": {"c_dim": 32, "depth": 1, "num_heads": 2},
        "train": {
            "stages": [{"datasets": ["train"], "iterations": iterations}],
            "lr_decay_points": [],
            "batch_size": 2,
            "base_lr": 3e-3
        },
        "datasets": {"train": "data/annotations.json"}
    });
    std::fs::write(&config, text.to_string()).unwrap();
    (config, data.join("annotations.json"))
}

#[test]
fn exit_codes_separate_bad_input_from_success() {
    let dir = tempfile::tempdir().unwrap();
    let (config, _) = setup(dir.path(), 3);
    let out = dir.path().join("run");
    assert_eq!(
        run(&["train", "--config", s(&config), "--out", s(&out)]).status.code(),
        Some(0)
    );
    for f in [
        "checkpoint.rsc",
        "config.json",
        "train_log.jsonl",
        "checkpoints/stage_0.rsc",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    // unknown key
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"fusion": {"dept": 2}}"#).unwrap();
    let nowhere = dir.path().join("nowhere");
    assert_eq!(
        run(&["train", "--config", s(&bad), "--out", s(&nowhere)]).status.code(),
        Some(2)
    );
    assert!(!nowhere.exists());
    // missing files and unparsable arguments
    assert_eq!(
        run(&[
            "train",
            "--config",
            s(&dir.path().join("none.json")),
            "--out",
            s(&nowhere)
        ])
        .status
        .code(),
        Some(2)
    );
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(
        run(&[
            "attn",
            "--checkpoint",
            "x",
            "--image",
            "y",
            "--box",
            "0.5,0,0.1,1",
            "--out",
            "z"
        ])
        .status
        .code(),
        Some(2)
    );
    // a layer past the depth is a range error
    let ck = out.join("checkpoint.rsc");
    let ann = dir.path().join("data/annotations.json");
    assert_eq!(
        run(&[
            "attn",
            "--checkpoint",
            s(&ck),
            "--annotations",
            s(&ann),
            "--layer",
            "1",
            "--out",
            s(&nowhere)
        ])
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn zero_iterations_write_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let (config, _) = setup(dir.path(), 0);
    let out = dir.path().join("run");
    assert!(run(&["train", "--config", s(&config), "--out", s(&out)])
        .status
        .success());
    let ck = load_checkpoint(&out.join("checkpoint.rsc")).unwrap();
    let init = Checkpoint::initial(&ck.encoder, &ck.fusion, &ck.alignment, &ck.prompt, None, 0).unwrap();
    assert_eq!(ck.params, init.params);
    assert_eq!(ck.iteration, 0);
}

#[test]
fn inference_is_deterministic_and_respects_the_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let (config, ann) = setup(dir.path(), 20);
    let run_dir = dir.path().join("run");
    assert!(run(&["train", "--config", s(&config), "--out", s(&run_dir)])
        .status
        .success());
    let ck = run_dir.join("checkpoint.rsc");
    let (p1, p2, p3) = (dir.path().join("p1"), dir.path().join("p2"), dir.path().join("p3"));
    for p in [&p1, &p2] {
        assert!(
            run(&["infer", "--checkpoint", s(&ck), "--annotations", s(&ann), "--out", s(p)])
                .status
                .success()
        );
    }
    let a = std::fs::read(p1.join("predictions.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(p2.join("predictions.jsonl")).unwrap());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 12);

    let vocab = dir.path().join("vocab.txt");
    std::fs::write(&vocab, "lake\n").unwrap();
    assert!(run(&[
        "infer",
        "--checkpoint",
        s(&ck),
        "--annotations",
        s(&ann),
        "--vocab",
        s(&vocab),
        "--top-k",
        "3",
        "--out",
        s(&p3)
    ])
    .status
    .success());
    let preds = load_predictions(&p3.join("predictions.jsonl")).unwrap();
    assert_eq!(preds.len(), 12);
    assert!(preds.iter().all(|p| p.top.len() == 1 && p.top[0].category == "lake"));
}

#[test]
fn attention_maps_are_written_per_box() {
    let dir = tempfile::tempdir().unwrap();
    let (config, _) = setup(dir.path(), 0);
    let run_dir = dir.path().join("run");
    assert!(run(&["train", "--config", s(&config), "--out", s(&run_dir)])
        .status
        .success());
    let img = dir.path().join("data/img_000.png");
    let out = dir.path().join("attn");
    let status = run(&[
        "attn",
        "--checkpoint",
        s(&run_dir.join("checkpoint.rsc")),
        "--image",
        s(&img),
        "--box",
        "0.1,0.1,0.5,0.5",
        "--box",
        "0,0,1,1",
        "--out",
        s(&out),
    ])
    .status;
    assert!(status.success());
    for f in ["img_000_box0.png", "img_000_box1.png", "img_000_attention.rsa"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

/// Six regions over two 100x100 images, two categories, with one bad top-1
/// per image. Worked by hand: AP(a) = 1, AP(b) = (67 + 34 * 0.6) / 101.
#[test]
fn eval_reproduces_the_hand_worked_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("gt.json");
    let boxes = [[0, 0, 20, 100], [30, 0, 20, 100], [60, 0, 20, 100]];
    let labels = [[1, 1, 2], [2, 1, 2]];
    let mut annotations = Vec::new();
    for (img, row) in labels.iter().enumerate() {
        for (j, cat) in row.iter().enumerate() {
            annotations.push(serde_json::json!({"image_id": img, "bbox": boxes[j], "category_id": cat}));
        }
    }
    let doc = serde_json::json!({
        "images": [
            {"id": 0, "file_name": "p.png", "width": 100, "height": 100},
            {"id": 1, "file_name": "q.png", "width": 100, "height": 100}
        ],
        "annotations": annotations,
        "categories": [{"id": 1, "name": "a"}, {"id": 2, "name": "b"}]
    });
    std::fs::write(&ann, doc.to_string()).unwrap();
    let scores = [
        [
            [("a", 0.9), ("b", 0.1)],
            [("b", 0.6), ("a", 0.4)],
            [("b", 0.8), ("a", 0.2)],
        ],
        [
            [("b", 0.7), ("a", 0.3)],
            [("a", 0.5), ("b", 0.5)],
            [("a", 0.35), ("b", 0.3)],
        ],
    ];
    let mut lines = String::new();
    for (img, row) in scores.iter().enumerate() {
        for (j, top) in row.iter().enumerate() {
            let x = boxes[j][0] as f64 / 100.0;
            let line = serde_json::json!({
                "image_id": img.to_string(),
                "box": [x, 0.0, x + 0.2, 1.0],
                "top": top.iter().map(|(c, s)| serde_json::json!({"category": c, "score": s})).collect::<Vec<_>>()
            });
            lines.push_str(&format!("{line}\n"));
        }
    }
    let preds = dir.path().join("preds.jsonl");
    std::fs::write(&preds, lines).unwrap();
    let out = dir.path().join("eval");
    let res = run(&[
        "eval",
        "--predictions",
        s(&preds),
        "--annotations",
        s(&ann),
        "--out",
        s(&out),
    ]);
    assert!(res.status.success());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    let ap_b = (67.0 + 34.0 * 0.6) / 101.0;
    assert!((report["map"].as_f64().unwrap() - (1.0 + ap_b) / 2.0).abs() < 1e-12);
    assert!((report["per_category"][1]["ap"].as_f64().unwrap() - ap_b).abs() < 1e-12);
    assert!(out.join("report.txt").is_file());
    assert!(String::from_utf8_lossy(&res.stdout).contains("mAP"));

    // a prediction off every annotated box is a validation failure
    std::fs::write(
        &preds,
        "{\"image_id\": \"0\", \"box\": [0.5, 0.5, 0.9, 0.9], \"top\": []}\n",
    )
    .unwrap();
    let res = run(&[
        "eval",
        "--predictions",
        s(&preds),
        "--annotations",
        s(&ann),
        "--out",
        s(&out),
    ]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn perfect_predictions_score_one_hundred() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ann) = setup(dir.path(), 0);
    let set = regionspot::datasets::load_annotations(&ann, regionspot::datasets::AnnotationFormat::CocoJson).unwrap();
    let mut lines = String::new();
    for r in &set.records {
        for g in &r.regions {
            let line = serde_json::json!({
                "image_id": r.image_id, "box": g.bbox, "top": [{"category": g.category, "score": 0.9}]
            });
            lines.push_str(&format!("{line}\n"));
        }
    }
    let preds = dir.path().join("preds.jsonl");
    std::fs::write(&preds, lines).unwrap();
    let out = dir.path().join("eval");
    assert!(run(&[
        "eval",
        "--predictions",
        s(&preds),
        "--annotations",
        s(&ann),
        "--out",
        s(&out)
    ])
    .status
    .success());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["map"].as_f64().unwrap() * 100.0, 100.0);
}
