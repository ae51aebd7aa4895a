use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_lvseg");

fn lvseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) {
    let out = lvseg(args, cwd);
    assert!(
        out.status.success(),
        "lvseg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Relative path -> bytes for every file under `root`.
fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

const SMALL: &str = r#"{"synth": {"count": 5, "phantom": {"frameCount": 8}}, "fcn": {"inputSize": 32, "frameStride": 2, "train": {"epochs": 2, "batch": 4}}}"#;

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), SMALL).unwrap();
    ok(
        &["synth", "--config", "cfg.json", "--seed", "7", "--out", "a"],
        dir.path(),
    );
    ok(
        &["synth", "--config", "cfg.json", "--seed", "7", "--out", "b"],
        dir.path(),
    );
    ok(
        &["synth", "--config", "cfg.json", "--seed", "8", "--out", "c"],
        dir.path(),
    );
    let a = snapshot(&dir.path().join("a"));
    assert_eq!(a.len(), 1 + 5 * 8 * 2);
    assert_eq!(a, snapshot(&dir.path().join("b")));
    assert_ne!(a, snapshot(&dir.path().join("c")));
}

#[test]
fn eval_of_ground_truth_scores_100() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), SMALL).unwrap();
    ok(&["synth", "--config", "cfg.json", "--out", "corpus"], dir.path());
    ok(
        &[
            "eval",
            "--config",
            "cfg.json",
            "--dataset",
            "corpus",
            "--runs",
            "truth=corpus",
            "--out",
            "run",
        ],
        dir.path(),
    );
    let csv = fs::read_to_string(dir.path().join("run/report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "config,frames,accuracy,dice,sensitivity");
    assert_eq!(lines[1], "truth,40,100.00,100.00,100.00");
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/report.json")).unwrap()).unwrap();
    assert_eq!(json["averaging"], "micro");
    assert_eq!(json["rows"][0]["perFrame"]["dice"].as_array().unwrap().len(), 40);
}

#[test]
fn stages_by_hand_match_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("cfg.json"), SMALL).unwrap();
    ok(&["synth", "--config", "cfg.json", "--out", "corpus"], d);
    ok(
        &[
            "pipeline",
            "--config",
            "cfg.json",
            "--dataset",
            "corpus",
            "--out",
            "piped",
        ],
        d,
    );
    let c = ["--config", "cfg.json", "--out", "manual"];
    ok(&[&["preprocess", "--dataset", "corpus"], &c[..]].concat(), d);
    for stage in ["roi", "train", "infer", "postprocess", "eval"] {
        ok(&[&[stage][..], &c[..]].concat(), d);
    }
    let mut piped = snapshot(&d.join("piped"));
    // only `pipeline` records its resolved configuration
    assert!(piped.remove("config.json").is_some());
    let manual = snapshot(&d.join("manual"));
    assert_eq!(piped.keys().collect::<Vec<_>>(), manual.keys().collect::<Vec<_>>());
    assert!(piped == manual, "pipeline and manual stages differ");
    for name in ["report.csv", "model.fcnw", "roi.json", "split.json"] {
        assert!(piped.contains_key(name), "{name} missing");
    }
    assert!(piped
        .keys()
        .any(|k| k.starts_with("overlays/") && k.ends_with("frame_000_roi.ppm")));
}

#[test]
fn failures_are_one_line_and_stage_qualified() {
    let dir = tempfile::tempdir().unwrap();
    let out = lvseg(&["train", "--out", "nothing-here"], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().last().unwrap();
    assert!(line.starts_with("lvseg: error: stage=train: "), "{err}");

    fs::write(dir.path().join("bad.json"), r#"{"roi": {"gridSise": 3}}"#).unwrap();
    let out = lvseg(&["roi", "--config", "bad.json"], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage=roi") && err.contains("gridSise"), "{err}");

    let out = lvseg(&["preprocess"], dir.path());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--dataset is required"));
}
