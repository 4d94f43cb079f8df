use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "train": {"epochs": 1, "batch_size": 4},
  "model": {"image_size": 32, "patch_size": 4, "embed_dim": 4, "fusion_heads": 2,
            "dim": 8, "window": 4, "blocks": [2, 2, 2], "stage_heads": [2, 2, 4]},
  "synth": {"image_size": 32, "extent_min": 3, "extent_max": 7}
}"#;

fn ccdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccdet"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Writes the tiny config and a 10-image dataset; returns their paths.
fn setup(root: &Path) -> (String, String) {
    let config = root.join("tiny.json");
    fs::write(&config, TINY).unwrap();
    let data = root.join("data");
    let (c, d) = (
        config.to_str().unwrap().to_string(),
        data.to_str().unwrap().to_string(),
    );
    let o = ccdet(&[
        "gen-data", "--out", &d, "--n", "10", "--seed", "3", "--config", &c,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    (c, d)
}

#[test]
fn gen_data_with_zero_samples_is_a_valid_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    let o = ccdet(&["gen-data", "--out", out.to_str().unwrap(), "--n", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("images").is_dir() && out.join("labels").is_dir());
    assert_eq!(fs::read_dir(out.join("labels")).unwrap().count(), 0);
    assert_eq!(json(&out.join("manifest.json"))["command"], "gen-data");
}

#[test]
fn usage_errors_exit_two_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"epochz": 3}}"#).unwrap();
    let invalid = dir.path().join("invalid.json");
    fs::write(&invalid, r#"{"train": {"momentum": 1.5}}"#).unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    let cases: [&[&str]; 5] = [
        &["train", "--bogus"],
        &["train", "--data", "/nonexistent/ccdet", "--out", out],
        &[
            "gen-data",
            "--out",
            out,
            "--n",
            "1",
            "--config",
            "/nonexistent/c.json",
        ],
        &[
            "gen-data",
            "--out",
            out,
            "--n",
            "1",
            "--config",
            bad.to_str().unwrap(),
        ],
        &[
            "train",
            "--data",
            out,
            "--out",
            out,
            "--config",
            invalid.to_str().unwrap(),
        ],
    ];
    for args in cases {
        let o = ccdet(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        let err = stderr(&o);
        let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error:")).collect();
        assert_eq!(lines.len(), 1, "{err}");
        assert!(lines[0].starts_with("error: kind="), "{err}");
    }
    assert_eq!(ccdet(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_then_eval_writes_reports_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let (c, d) = setup(dir.path());
    let run = dir.path().join("run");
    let r = run.to_str().unwrap();
    let o = ccdet(&[
        "train",
        "--data",
        &d,
        "--out",
        r,
        "--config",
        &c,
        "--epochs",
        "2",
        "--variant",
        "concat",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let m = json(&run.join("manifest.json"));
    assert_eq!(m["config"]["train"]["epochs"], 2);
    assert_eq!(m["config"]["train"]["fusion_variant"], "concat");
    assert!(m["artifacts"]["final.ckpt"]
        .as_str()
        .unwrap()
        .starts_with("sha256:"));

    let ckpt = run.join("final.ckpt");
    let o = ccdet(&["eval", "--data", &d, "--ckpt", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = json(&run.join("eval.json"));
    assert_eq!(report["num_images"], 10);
    assert!(fs::read_to_string(run.join("eval.csv"))
        .unwrap()
        .contains(",all,"));
}

#[test]
fn ablate_fusion_tabulates_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let (c, d) = setup(dir.path());
    let out = dir.path().join("ab");
    let o = ccdet(&[
        "ablate-fusion",
        "--data",
        &d,
        "--out",
        out.to_str().unwrap(),
        "--config",
        &c,
        "--seeds",
        "0,1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("ablate_fusion.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 7, "{csv}");
    assert!(lines[0].starts_with("variant,description,params,mAP50,std,seed0,seed1"));
    let table = json(&out.join("ablate_fusion.json"));
    assert_eq!(table["rows"].as_array().unwrap().len(), 6);
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["config"]["n_train"], 8);
    assert_eq!(m["config"]["n_eval"], 2);
    assert_eq!(m["run_seconds"].as_object().unwrap().len(), 12);
}

#[test]
fn ablate_convffn_tabulates_three_stage_sets() {
    let dir = tempfile::tempdir().unwrap();
    let (c, d) = setup(dir.path());
    let out = dir.path().join("ab");
    let o = ccdet(&[
        "ablate-convffn",
        "--data",
        &d,
        "--out",
        out.to_str().unwrap(),
        "--config",
        &c,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = json(&out.join("ablate_convffn.json"));
    let labels: Vec<&str> = table["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["label"].as_str().unwrap())
        .collect();
    assert_eq!(labels, ["none", "stages_1", "stages_1_2"]);
    assert!(fs::read_to_string(out.join("ablate_convffn.md"))
        .unwrap()
        .contains("stages_1_2"));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = ccdet(&[
        "gradcheck",
        "--seeds",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(
        stdout.contains("swin_block") && stdout.contains("cc_fusion"),
        "{stdout}"
    );
}
