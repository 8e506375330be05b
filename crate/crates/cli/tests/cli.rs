use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn config(name: &str) -> PathBuf {
    configs().join(name)
}

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cednet-lab")).args(args).output().expect("binary runs")
}

fn lab_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cednet-lab")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn expect_ok(o: &Output) {
    assert_eq!(code(o), 0, "stderr: {}", stderr(o));
}

#[test]
fn analyze_reports_model_size() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let o = lab(&["--out", s(&out), "analyze", s(&config("cednet_t.json")), "--input-size", "224x224"]);
    expect_ok(&o);
    let report = read_json(&out.join("report.json"));
    let params = report["total_params"].as_f64().unwrap();
    let flops = report["flops"].as_f64().unwrap();
    assert!((params / 34e6 - 1.0).abs() <= 0.10, "{params}");
    assert!((flops / 5.7e9 - 1.0).abs() <= 0.10, "{flops}");
    assert!(String::from_utf8_lossy(&o.stdout).contains("fusion time"));

    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    let modules: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(modules, ["stem", "stage1", "stage2", "stage3", "head"]);

    let m = read_json(&out.join("manifest.json"));
    assert_eq!(m["tool"], "cednet-lab");
    assert_eq!(m["version"], env!("CARGO_PKG_VERSION"));
    assert!(m["seed"].is_u64());
    assert_eq!(m["job"]["subcommand"], "analyze");
    assert_eq!(m["job"]["model"]["C"], serde_json::json!([96, 192, 352, 512]));
}

#[test]
fn analyze_formats() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let o = lab(&["--out", s(&out), "analyze", s(&config("convnext_s_fpn.json")), "--format", "json"]);
    expect_ok(&o);
    let printed: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed, read_json(&out.join("report.json")));
    let ratio = printed["fusion_time_ratio"].as_f64().unwrap();
    assert!((ratio - 0.917).abs() <= 0.02, "{ratio}");

    let o = lab(&["--out", s(&out), "analyze", s(&config("tiny.json")), "--input-size", "64", "--format", "csv"]);
    expect_ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("module,"));
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let o = lab(&["--out", s(&out), "analyze", s(&config("broken.json"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("B must have 4 entries"), "{}", stderr(&o));

    let typo = write(tmp.path(), "typo.json", r#"{"schema_version": 1, "C": [4, 8, 12, 16], "B": [1, 1, 1, 1], "m": 2, "stile": "fpn"}"#);
    let o = lab(&["--out", s(&out), "analyze", s(&typo)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("stile"), "{}", stderr(&o));

    let o = lab(&["--out", s(&out), "analyze", s(&config("tiny.json")), "--input-size", "100x100"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let bad_train = write(tmp.path(), "train.json", r#"{"steps": 5, "lr": "fast"}"#);
    let o = lab(&["--out", s(&out), "train", s(&config("tiny.json")), "--train", s(&bad_train)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("lr"), "{}", stderr(&o));

    let zero = write(tmp.path(), "zero.json", r#"{"steps": 0}"#);
    let o = lab(&["--out", s(&out), "train", s(&config("tiny.json")), "--train", s(&zero)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("steps"), "{}", stderr(&o));
}

#[test]
fn unknown_flags_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let o = lab(&["--out", s(tmp.path()), "analyze", s(&config("tiny.json")), "--bogus"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--bogus"));
    assert!(!tmp.path().join("manifest.json").exists());
    let o = lab(&["sweep", "--axis", "width"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn io_errors_exit_4() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let o = lab(&["--out", s(&out), "analyze", s(&tmp.path().join("missing.json"))]);
    assert_eq!(code(&o), 4);
    let junk = write(tmp.path(), "junk.ckpt", "not a checkpoint at all");
    let o = lab(&["--out", s(&out), "eval", s(&junk)]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let blocker = write(tmp.path(), "file", "");
    let o = lab(&["--out", s(&blocker.join("sub")), "analyze", s(&config("tiny.json"))]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn analyze_writes_only_into_its_output_directory() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "model.json", &fs::read_to_string(config("tiny.json")).unwrap());
    let before = fs::read(&cfg).unwrap();
    let o = lab_in(tmp.path(), &["--out", "run", "analyze", "model.json", "--input-size", "64x64"]);
    expect_ok(&o);
    let mut names: Vec<String> =
        fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["model.json", "run"]);
    assert_eq!(fs::read(&cfg).unwrap(), before);
    let mut outputs: Vec<String> =
        fs::read_dir(tmp.path().join("run")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    outputs.sort();
    assert_eq!(outputs, ["manifest.json", "report.csv", "report.json"]);
}

#[test]
fn gradcheck_tiny_passes() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let o = lab(&["--out", s(&out), "gradcheck", s(&config("tiny.json"))]);
    expect_ok(&o);
    let r = read_json(&out.join("gradcheck.json"));
    assert!(r["max_error"].as_f64().unwrap() < 1e-4, "{r}");
    assert_eq!(r["passed"], true);
    assert_eq!(read_json(&out.join("manifest.json"))["job"]["gradcheck"]["tolerance"], 1e-4);
}

#[test]
fn gradcheck_failure_exits_3() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let cfg = write(
        tmp.path(),
        "one.json",
        r#"{"schema_version": 1, "C": [4, 4, 4, 4], "B": [1, 1, 1, 1], "m": 1, "num_classes": 4}"#,
    );
    let o = lab(&["--out", s(&out), "gradcheck", s(&cfg), "--tolerance", "1e-30", "--seed", "5"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert_eq!(read_json(&out.join("gradcheck.json"))["passed"], false);
    assert_eq!(read_json(&out.join("manifest.json"))["seed"], 5);
}

fn tiny_training(dir: &Path, lr: f64) -> (PathBuf, PathBuf) {
    let data = write(dir, "data.json", r#"{"train_scenes": 8, "val_scenes": 2}"#);
    let train = write(
        dir,
        "train.json",
        &format!(r#"{{"lr": {lr}, "steps": 6, "batch_size": 2, "eval_interval": 3, "head_width": 8}}"#),
    );
    (data, train)
}

#[test]
fn train_eval_saliency_export_pipeline() {
    let tmp = TempDir::new().unwrap();
    let (data, train) = tiny_training(tmp.path(), 1e-3);
    let run = tmp.path().join("train");
    let o = lab(&["--out", s(&run), "--seed", "7", "train", s(&config("tiny.json")), "--data", s(&data), "--train", s(&train)]);
    expect_ok(&o);
    let ckpt = run.join("checkpoint.ckpt");
    let summary = read_json(&run.join("run.json"));
    assert_eq!(summary["run"]["losses"].as_array().unwrap().len(), 6);
    assert!(summary["final_val"]["miou"].as_f64().is_some());
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert_eq!(read_json(&run.join("manifest.json"))["seed"], 7);

    let ev = tmp.path().join("eval");
    expect_ok(&lab(&["--out", s(&ev), "eval", s(&ckpt), "--data", s(&data)]));
    let e = read_json(&ev.join("eval.json"));
    assert_eq!(e["scenes"], 2);
    assert_eq!(e["metrics"], summary["final_val"]);

    let sal = tmp.path().join("sal");
    expect_ok(&lab(&["--out", s(&sal), "saliency", s(&ckpt), "--scene-seed", "11", "--thresholds", "0,1e-9,1e-6,1"]));
    let areas = fs::read_to_string(sal.join("areas.csv")).unwrap();
    let values: Vec<f64> = areas.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(values.len(), 4);
    assert!(values.windows(2).all(|w| w[1] <= w[0]));
    let map = cednet_tensor_dump(&sal.join("saliency.tensor"));
    assert_eq!(map, vec![64, 64]);
    let o = lab(&["--out", s(&sal), "saliency", s(&ckpt), "--thresholds", "0.5,0.1"]);
    assert_eq!(code(&o), 2);

    let exp = tmp.path().join("export");
    expect_ok(&lab(&["--out", s(&exp), "export", "--checkpoint", s(&ckpt)]));
    let index = read_json(&exp.join("params/index.json"));
    let entries = index.as_array().unwrap();
    assert!(entries.iter().any(|e| e["name"] == "seg_head.classifier.weight"));
    for e in entries {
        assert!(exp.join("params").join(e["file"].as_str().unwrap()).exists());
    }
    assert_eq!(read_json(&exp.join("config.json"))["style"], "hourglass");
    assert!(read_json(&exp.join("graph.json"))["nodes"].is_array());

    // Tampering with the checkpoint after recording is caught on rerun.
    let bytes = fs::read(&ckpt).unwrap();
    let mut bad = bytes.clone();
    *bad.last_mut().unwrap() ^= 1;
    fs::write(&ckpt, &bad).unwrap();
    let o = lab(&["--out", s(&tmp.path().join("again")), "rerun", s(&ev.join("manifest.json"))]);
    assert_eq!(code(&o), 4);
    fs::write(&ckpt, &bytes).unwrap();
    let again = tmp.path().join("again");
    expect_ok(&lab(&["--out", s(&again), "rerun", s(&ev.join("manifest.json"))]));
    assert_eq!(read_json(&again.join("eval.json")), e);
}

/// Shape recorded in a tensor dump header.
fn cednet_tensor_dump(path: &Path) -> Vec<usize> {
    let bytes = fs::read(path).unwrap();
    let (t, _) = cednet_tensor::dump::decode::<f32>(&bytes).unwrap();
    t.shape().to_vec()
}

#[test]
fn runs_are_reproducible_from_the_manifest_alone() {
    let tmp = TempDir::new().unwrap();
    let (data, train) = tiny_training(tmp.path(), 1e-3);
    let first = tmp.path().join("first");
    expect_ok(&lab(&["--out", s(&first), "train", s(&config("tiny.json")), "--data", s(&data), "--train", s(&train)]));
    // The settings files are gone; the manifest must carry everything.
    fs::remove_file(&data).unwrap();
    fs::remove_file(&train).unwrap();
    let second = tmp.path().join("second");
    expect_ok(&lab(&["--out", s(&second), "rerun", s(&first.join("manifest.json"))]));
    for f in ["checkpoint.ckpt", "metrics.csv", "run.json", "manifest.json"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }

    let a = tmp.path().join("a");
    expect_ok(&lab(&["--out", s(&a), "analyze", s(&config("cednet_s.json"))]));
    let b = tmp.path().join("b");
    expect_ok(&lab(&["--out", s(&b), "rerun", s(&a.join("manifest.json"))]));
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());

    let o = lab(&["--out", s(&b), "--seed", "3", "rerun", s(&a.join("manifest.json"))]);
    assert_eq!(code(&o), 2);
    let o = lab(&["--out", s(&b), "rerun", s(&config("tiny.json"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn divergent_training_exits_3() {
    let tmp = TempDir::new().unwrap();
    let (data, train) = tiny_training(tmp.path(), 10.0);
    let out = tmp.path().join("out");
    let o = lab(&["--out", s(&out), "train", s(&config("tiny.json")), "--data", s(&data), "--train", s(&train)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
    assert!(out.join("manifest.json").exists());
    assert!(!out.join("checkpoint.ckpt").exists());
}

fn sweep_rows(out: &Path) -> Vec<Vec<String>> {
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("index,label,params,flops,fusion_time_ratio,toy_miou,error"));
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn sweep_stages_rows_have_decreasing_fusion_time() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    expect_ok(&lab(&["--out", s(&out), "sweep", "--axis", "stages"]));
    let rows = sweep_rows(&out);
    assert_eq!(rows.len(), 4);
    let ratios: Vec<f64> = rows.iter().map(|r| r[4].parse().unwrap()).collect();
    assert!(ratios.windows(2).all(|w| w[1] < w[0]), "{ratios:?}");
    assert_eq!(rows.iter().map(|r| r[1].as_str()).collect::<Vec<_>>(), ["m=1", "m=2", "m=3", "m=4"]);
}

#[test]
fn sweep_allocation_has_six_rows_in_time_order() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    expect_ok(&lab(&["--out", s(&out), "sweep", "--axis", "allocation"]));
    let rows = sweep_rows(&out);
    assert_eq!(rows.len(), 6);
    let ratios: Vec<f64> = rows.iter().map(|r| r[4].parse().unwrap()).collect();
    assert!(ratios.windows(2).all(|w| w[1] < w[0]), "{ratios:?}");
}

#[test]
fn sweep_with_training_fills_miou_and_honours_thread_cap() {
    let tmp = TempDir::new().unwrap();
    let data = write(tmp.path(), "data.json", r#"{"train_scenes": 2, "val_scenes": 1}"#);
    let train = write(tmp.path(), "train.json", r#"{"batch_size": 1, "head_width": 4}"#);
    let out = tmp.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_cednet-lab"))
        .env("CEDNET_LAB_THREADS", "2")
        .args(["--out", s(&out), "sweep", "--axis", "lr-block", "--train-steps", "2", "--data", s(&data), "--train", s(&train)])
        .output()
        .unwrap();
    expect_ok(&o);
    let rows = sweep_rows(&out);
    assert_eq!(rows.len(), 2);
    for r in &rows {
        let miou: f64 = r[5].parse().unwrap();
        assert!((0.0..=1.0).contains(&miou));
    }
    assert_eq!(read_json(&out.join("manifest.json"))["job"]["training"]["train"]["steps"], 2);

    let o = Command::new(env!("CARGO_BIN_EXE_cednet-lab"))
        .env("CEDNET_LAB_THREADS", "zero")
        .args(["--out", s(&out), "sweep", "--axis", "stages"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("CEDNET_LAB_THREADS"));
}

#[test]
fn export_config_writes_graph() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    expect_ok(&lab(&["--out", s(&out), "export", "--config", s(&config("cednet_t_dense.json"))]));
    let g = read_json(&out.join("graph.json"));
    let names: Vec<&str> = g["nodes"].as_array().unwrap().iter().map(|n| n["name"].as_str().unwrap()).collect();
    assert!(names.contains(&"stage3.dec.merge8"));
    assert_eq!(read_json(&out.join("config.json"))["mode"], "dense");
    assert_eq!(code(&lab(&["--out", s(&out), "export"])), 2);
}
