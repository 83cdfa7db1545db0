use std::path::Path;
use std::process::{Command, Output};

fn keypose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_keypose")).args(args).output().expect("spawn keypose")
}

fn ok(args: &[&str]) -> String {
    let out = keypose(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn noiseless_file_pipeline_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes.jsonl");
    let gt = dir.path().join("gt.jsonl");
    ok(&["simulate", "--profile", "book", "--count", "3", "--seed", "7", "--out", p(&scenes), "--gt", p(&gt)]);

    let mut preds = String::new();
    for i in 0..3 {
        let stem = dir.path().join(format!("maps{i}"));
        ok(&["encode", "--scenes", p(&scenes), "--index", &i.to_string(), "--out", p(&stem)]);
        assert!(stem.with_extension("json").exists());
        assert!(stem.with_extension("bin").exists());
        preds += &ok(&["decode", "--maps", p(&stem), "--strategy", "combined"]);
    }
    assert_eq!(preds.lines().count(), 3);
    let pred_path = dir.path().join("pred.jsonl");
    std::fs::write(&pred_path, preds).unwrap();

    let report = dir.path().join("report.json");
    let table = ok(&["evaluate", "--pred", p(&pred_path), "--gt", p(&gt), "--out", p(&report)]);
    assert!(table.contains("all"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["summary"]["ap_iou"].as_f64(), Some(1.0));
    assert_eq!(v["records"].as_array().unwrap().len(), 3);
}

#[test]
fn simulate_is_seeded() {
    let a = ok(&["simulate", "--profile", "cup", "--count", "2", "--seed", "3"]);
    let b = ok(&["simulate", "--profile", "cup", "--count", "2", "--seed", "3"]);
    let c = ok(&["simulate", "--profile", "cup", "--count", "2", "--seed", "4"]);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn small_ablations_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("dims.json");
    let text = ok(&[
        "ablate-dims",
        "--profiles",
        "cereal_box",
        "--scenes-per-profile",
        "3",
        "--num-seeds",
        "1",
        "--out",
        p(&out),
    ]);
    for label in ["lifting", "lm_estimated_dims", "lm_gt_dims"] {
        assert!(text.contains(label), "{text}");
    }
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 3);

    let text = ok(&[
        "noise-sweep",
        "--profiles",
        "cup",
        "--scenes-per-profile",
        "2",
        "--num-seeds",
        "1",
        "--jitters",
        "0,2",
        "--strategies",
        "heatmap",
    ]);
    assert!(text.lines().count() >= 3, "{text}");

    let text = ok(&[
        "ablate-decode",
        "--profiles",
        "bottle",
        "--scenes-per-profile",
        "2",
        "--num-seeds",
        "1",
        "--strategies",
        "displacement,combined",
    ]);
    assert!(text.contains("displacement") && text.contains("combined"), "{text}");
}

#[test]
fn bad_arguments_fail_cleanly() {
    let out = keypose(&["simulate", "--profile", "teapot"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("teapot"));

    let out = keypose(&["ablate-dims", "--num-seeds", "0"]);
    assert!(!out.status.success());

    let out = keypose(&["decode", "--maps", "/nonexistent/maps"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn decode_rejects_gt_dims_solver() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("s.jsonl");
    let stem = dir.path().join("m");
    ok(&["simulate", "--count", "1", "--out", p(&scenes)]);
    ok(&["encode", "--scenes", p(&scenes), "--out", p(&stem), "--noise-preset", "calibrated", "--seed", "2"]);
    let out = keypose(&["decode", "--maps", p(&stem), "--solver", "lm_gt_dims"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lm_gt_dims"));
}
