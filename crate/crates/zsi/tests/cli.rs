//! End-to-end tests of the command-line surface through `cli::run`.

use clap::Parser;

use zsi::annotations::parse_dataset;
use zsi::cli::{run, Cli, EXIT_IO, EXIT_OK, EXIT_VALIDATION};

const SIX: &[u8] = include_bytes!("fixtures/split_six.json");

fn run_args(args: &[&str]) -> (i32, String) {
    let cli = Cli::try_parse_from(args).expect("arguments parse");
    let mut buf = Vec::new();
    let code = run(cli, &mut buf);
    (code, String::from_utf8_lossy(&buf).into_owned())
}

#[test]
fn split_writes_expected_partition() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.json");
    std::fs::write(&gt, SIX).unwrap();
    let out = dir.path().join("out");
    let (code, text) = run_args(&[
        "zsi", "split", "--annotations", gt.to_str().unwrap(), "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK, "{text}");
    assert!(text.contains("train: 2 images, 3 instances"), "{text}");
    assert!(text.contains("test: 3 images, 5 instances"), "{text}");

    let train = parse_dataset(&std::fs::read(out.join("train.json")).unwrap()).unwrap();
    let test = parse_dataset(&std::fs::read(out.join("test.json")).unwrap()).unwrap();
    assert_eq!(train.images.iter().map(|i| i.id).collect::<Vec<_>>(), vec![1, 5]);
    assert_eq!(test.images.iter().map(|i| i.id).collect::<Vec<_>>(), vec![2, 3, 6]);

    // Determinism: a second run produces byte-identical files.
    let first = std::fs::read(out.join("train.json")).unwrap();
    let (code, _) = run_args(&[
        "zsi", "split", "--annotations", gt.to_str().unwrap(), "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(std::fs::read(out.join("train.json")).unwrap(), first);
}

#[test]
fn eval_perfect_predictions_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let gt_path = dir.path().join("gt.json");
    std::fs::write(&gt_path, SIX).unwrap();

    // Every ground-truth instance echoed back as a confident prediction.
    let ds = parse_dataset(SIX).unwrap();
    let preds: Vec<serde_json::Value> = ds
        .annotations
        .iter()
        .filter(|a| a.iscrowd == 0)
        .map(|a| {
            serde_json::json!({
                "image_id": a.image_id,
                "category_id": a.category_id,
                "score": 0.9,
                "bbox": a.bbox,
            })
        })
        .collect();
    let pred_path = dir.path().join("preds.json");
    std::fs::write(&pred_path, serde_json::to_vec(&preds).unwrap()).unwrap();
    let report_path = dir.path().join("report.json");

    let (code, text) = run_args(&[
        "zsi",
        "eval",
        "--annotations",
        gt_path.to_str().unwrap(),
        "--predictions",
        pred_path.to_str().unwrap(),
        "--setting",
        "gzsd",
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK, "{text}");
    assert!(text.contains("R@0.5=100.0000"), "{text}");
    assert!(text.contains("mAP50=100.0000"), "{text}");

    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&report_path).unwrap()).unwrap();
    assert_eq!(report["setting"], "gzsd");
    assert_eq!(report["overall"]["map50"], 1.0);
    assert_eq!(report["harmonic_mean"]["map50"], 1.0);
}

#[test]
fn eval_zsi_without_masks_is_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let gt_path = dir.path().join("gt.json");
    std::fs::write(&gt_path, SIX).unwrap();
    let pred_path = dir.path().join("preds.json");
    std::fs::write(
        &pred_path,
        serde_json::to_vec(&serde_json::json!([
            {"image_id": 2, "category_id": 3, "score": 0.8, "bbox": [40, 40, 30, 30]}
        ]))
        .unwrap(),
    )
    .unwrap();
    let (code, text) = run_args(&[
        "zsi",
        "eval",
        "--annotations",
        gt_path.to_str().unwrap(),
        "--predictions",
        pred_path.to_str().unwrap(),
        "--setting",
        "zsi",
    ]);
    assert_eq!(code, EXIT_VALIDATION, "{text}");
}

#[test]
fn eval_missing_prediction_file_is_io_failure() {
    let dir = tempfile::tempdir().unwrap();
    let gt_path = dir.path().join("gt.json");
    std::fs::write(&gt_path, SIX).unwrap();
    let (code, _) = run_args(&[
        "zsi",
        "eval",
        "--annotations",
        gt_path.to_str().unwrap(),
        "--predictions",
        dir.path().join("absent.json").to_str().unwrap(),
        "--setting",
        "zsd",
    ]);
    assert_eq!(code, EXIT_IO);
}

#[test]
fn gradcheck_repeated_seed_is_identical() {
    let (c1, t1) = run_args(&["zsi", "gradcheck", "--seed", "42"]);
    let (c2, t2) = run_args(&["zsi", "gradcheck", "--seed", "42"]);
    assert_eq!(c1, EXIT_OK);
    assert_eq!(c2, EXIT_OK);
    assert_eq!(t1, t2);
}

#[test]
fn toytrain_zero_steps_reports_initialization() {
    let (code, text) = run_args(&["zsi", "toytrain", "--steps", "0"]);
    assert_eq!(code, EXIT_OK, "{text}");
    assert!(text.contains("unseen top-1"), "{text}");
    // No threshold verdict when training is skipped.
    assert!(!text.contains("thresholds"), "{text}");
}

#[test]
fn toytrain_external_embeddings_load() {
    // Word-vector file for a miniature scenario; orthogonal unit tokens.
    let dir = tempfile::tempdir().unwrap();
    let scenario = serde_json::json!({
        "seed": 3,
        "visual_dim": 8,
        "embed_dim": 4,
        "mask_channels": 3,
        "mask_size": 2,
        "n_seen": 2,
        "n_unseen": 1,
        "samples_per_class": 3,
        "noise_sigma": 0.0,
        "embedding_kind": "structured"
    });
    let scen_path = dir.path().join("scenario.json");
    std::fs::write(&scen_path, serde_json::to_vec(&scenario).unwrap()).unwrap();
    let emb_path = dir.path().join("vectors.txt");
    std::fs::write(
        &emb_path,
        "4 4\nbackground 1 0 0 0\nseen0 0 1 0 0\nseen1 0 0 1 0\nunseen0 0 0 0 1\n",
    )
    .unwrap();
    let (code, text) = run_args(&[
        "zsi",
        "toytrain",
        "--scenario",
        scen_path.to_str().unwrap(),
        "--embeddings",
        emb_path.to_str().unwrap(),
        "--steps",
        "0",
    ]);
    assert_eq!(code, EXIT_OK, "{text}");
}
