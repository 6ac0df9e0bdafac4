//! End-to-end checks of the dpit binary: generate -> train -> predict ->
//! eval, plus the documented exit codes.

use dpit::checkpoint::{load_checkpoint, save_checkpoint, TrainMeta};
use dpit::data::coco::{write_results, CocoResult, Dataset};
use dpit::metrics::MetricsReport;
use std::path::Path;
use std::process::{Command, Output};

fn dpit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpit"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn generate_is_deterministic_and_count_zero_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_exit(&dpit(&["gen-data", "--out", "a", "--count", "3", "--seed", "9"], root), 0);
    assert_exit(&dpit(&["gen-data", "--out", "b", "--count", "3", "--seed", "9"], root), 0);
    let ann_a = std::fs::read(root.join("a/annotations.json")).unwrap();
    let ann_b = std::fs::read(root.join("b/annotations.json")).unwrap();
    assert_eq!(ann_a, ann_b);
    let img_a = std::fs::read(root.join("a/images/scene_00001.png")).unwrap();
    let img_b = std::fs::read(root.join("b/images/scene_00001.png")).unwrap();
    assert_eq!(img_a, img_b);

    assert_exit(&dpit(&["gen-data", "--out", "empty", "--count", "0"], root), 0);
    let ds = Dataset::load(&root.join("empty")).unwrap();
    assert!(ds.coco.images.is_empty());
    assert!(ds.coco.annotations.is_empty());
}

#[test]
fn the_full_pipeline_runs_and_scores_exact_predictions_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_exit(&dpit(&["gen-data", "--out", "data", "--count", "3", "--seed", "2"], root), 0);

    // Zero epochs: exits 0 and leaves an initial checkpoint to predict with.
    let out = dpit(
        &["train", "--preset", "dpit-tiny", "--data", "data", "--out", "run", "--epochs", "0"],
        root,
    );
    assert_exit(&out, 0);
    assert!(root.join("run/last.ckpt").exists());
    assert_eq!(std::fs::read_to_string(root.join("run/loss.jsonl")).unwrap(), "");

    let out = dpit(
        &[
            "predict",
            "--preset",
            "dpit-tiny",
            "--checkpoint",
            "run/last.ckpt",
            "--images",
            "data",
            "--out",
            "preds.json",
        ],
        root,
    );
    assert_exit(&out, 0);

    // An untrained net still yields one result per annotation.
    let ds = Dataset::load(&root.join("data")).unwrap();
    let preds = dpit::data::coco::read_results(&root.join("preds.json"), 17).unwrap();
    assert_eq!(preds.len(), ds.coco.annotations.len());

    // Predictions copied from the ground truth must score perfectly.
    let exact: Vec<CocoResult> = ds
        .coco
        .annotations
        .iter()
        .map(|a| {
            let inst = dpit::data::coco::CocoDataset::annotation_to_instance(a);
            CocoResult {
                image_id: a.image_id,
                category_id: 1,
                keypoints: inst.keypoints.iter().flat_map(|&(x, y, _)| [x, y, 1.0]).collect(),
                score: 1.0,
            }
        })
        .collect();
    write_results(&root.join("exact.json"), &exact).unwrap();

    let out = dpit(
        &["eval", "--gt", "data", "--pred", "exact.json", "--metric", "coco", "--out", "coco.json"],
        root,
    );
    assert_exit(&out, 0);
    let report = MetricsReport::load(&root.join("coco.json")).unwrap();
    let coco = report.coco.unwrap();
    assert_eq!(coco.ap, 1.0);
    assert_eq!(coco.ar, 1.0);

    let out = dpit(
        &["eval", "--gt", "data", "--pred", "exact.json", "--metric", "pckh", "--out", "pckh.json"],
        root,
    );
    assert_exit(&out, 0);
    let report = MetricsReport::load(&root.join("pckh.json")).unwrap();
    assert_eq!(report.pckh.unwrap().mean, 100.0);
}

#[test]
fn predicting_an_empty_dataset_writes_an_empty_results_array() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_exit(&dpit(&["gen-data", "--out", "data", "--count", "1", "--seed", "4"], root), 0);
    assert_exit(&dpit(&["gen-data", "--out", "none", "--count", "0"], root), 0);
    assert_exit(
        &dpit(
            &["train", "--preset", "dpit-tiny", "--data", "data", "--out", "run", "--epochs", "0"],
            root,
        ),
        0,
    );
    let out = dpit(
        &[
            "predict",
            "--preset",
            "dpit-tiny",
            "--checkpoint",
            "run/last.ckpt",
            "--images",
            "none",
            "--out",
            "preds.json",
        ],
        root,
    );
    assert_exit(&out, 0);
    let preds = dpit::data::coco::read_results(&root.join("preds.json"), 17).unwrap();
    assert!(preds.is_empty());
}

#[test]
fn the_exit_code_taxonomy_holds() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_exit(&dpit(&["gen-data", "--out", "data", "--count", "2", "--seed", "6"], root), 0);

    // Unknown preset: config problem, code 2.
    let out = dpit(&["train", "--preset", "nope", "--data", "data", "--out", "r"], root);
    assert_exit(&out, 2);

    // Predictions naming unknown image ids: code 2, ids listed.
    assert_exit(
        &dpit(
            &["train", "--preset", "dpit-tiny", "--data", "data", "--out", "run", "--epochs", "0"],
            root,
        ),
        0,
    );
    let bogus =
        vec![CocoResult { image_id: 777, category_id: 1, keypoints: vec![0.0; 51], score: 0.5 }];
    write_results(&root.join("bogus.json"), &bogus).unwrap();
    let out = dpit(&["eval", "--gt", "data", "--pred", "bogus.json", "--metric", "coco"], root);
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("777"));

    // A checkpoint poisoned with NaN aborts training: numeric failure, code 3.
    let mut loaded = load_checkpoint::<f32>(&root.join("run/last.ckpt")).unwrap();
    let id = loaded.params.find("head.w").unwrap();
    loaded.params.get_mut(id).data_mut()[0] = f32::NAN;
    save_checkpoint(&root.join("bad.ckpt"), &loaded.params, None, &TrainMeta::default()).unwrap();
    let out = dpit(
        &[
            "train",
            "--preset",
            "dpit-tiny",
            "--data",
            "data",
            "--out",
            "run2",
            "--epochs",
            "1",
            "--resume",
            "bad.ckpt",
        ],
        root,
    );
    assert_exit(&out, 3);
}
