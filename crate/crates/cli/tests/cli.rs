use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tancount_core::dataio::save_image;
use tancount_core::Tensor;

fn tancount(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tancount"))
        .args(args)
        .arg("--no-timestamp")
        .output()
        .expect("spawn tancount")
}

fn ok(args: &[&str]) -> Output {
    let out = tancount(args);
    assert!(out.status.success(), "tancount {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

/// Hand-authored heads for a two-frame 64x48 sequence, some near the border.
fn toy_points() -> Vec<Vec<[f64; 2]>> {
    vec![
        vec![[10.5, 12.0], [30.0, 30.0], [31.0, 33.5], [60.0, 2.0], [0.5, 47.5]],
        vec![[20.0, 20.0], [40.25, 10.75], [5.0, 40.0]],
    ]
}

fn toy_dataset(root: &Path) -> PathBuf {
    let seq = root.join("toy");
    fs::create_dir_all(seq.join("frames")).unwrap();
    let mut ann = String::new();
    for (i, pts) in toy_points().iter().enumerate() {
        let name = format!("{i:06}.png");
        save_image(&Tensor::full(&[48, 64, 3], 0.25), &seq.join("frames").join(&name)).unwrap();
        ann += &serde_json::json!({ "frame": name, "points": pts }).to_string();
        ann.push('\n');
    }
    fs::write(seq.join("annotations.jsonl"), ann).unwrap();
    root.to_path_buf()
}

fn brute_sigma(pts: &[[f64; 2]], i: usize, k: usize, beta: f64) -> f64 {
    let mut d: Vec<f64> = (0..pts.len())
        .filter(|&j| j != i)
        .map(|j| ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt())
        .collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (beta * d[..k].iter().sum::<f64>() / k as f64).max(0.5)
}

#[test]
fn params_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["params", "--out", s(dir.path())]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("lcn 32641  tan 14943  combined 47584"));
    let v = read_json(&dir.path().join("params.json"));
    assert_eq!((v["lcn"].as_u64(), v["tan"].as_u64(), v["combined"].as_u64()), (Some(32_641), Some(14_943), Some(47_584)));
    assert!(v.get("timestamp").is_none());
}

#[test]
fn fixed_sigma_density_conserves_authored_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(&dir.path().join("data"));
    let out = dir.path().join("gt");
    ok(&["gen-density", "--data", s(&data), "--out", s(&out), "--sigma", "fixed:15", "--heatmaps"]);
    for (i, pts) in toy_points().iter().enumerate() {
        let map = Tensor::<f64>::load(out.join("toy").join(format!("{i:06}.tan"))).unwrap();
        assert_eq!(map.shape(), &[48, 64]);
        let integral: f64 = map.data().iter().sum();
        assert!((integral - pts.len() as f64).abs() < 1e-3, "frame {i}: {integral} vs {}", pts.len());
        assert!(out.join("toy").join("heatmaps").join(format!("{i:06}.png")).is_file());
    }
}

#[test]
fn adaptive_sigmas_match_knn_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(&dir.path().join("data"));
    let out = dir.path().join("gt");
    ok(&["gen-density", "--data", s(&data), "--out", s(&out), "--sigma", "adaptive", "--beta", "0.3", "--knn", "3"]);
    let lines = fs::read_to_string(out.join("toy").join("frames.jsonl")).unwrap();
    let records: Vec<Value> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 2);
    for (rec, pts) in records.iter().zip(toy_points()) {
        let sigmas: Vec<f64> = rec["sigmas"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert_eq!(sigmas.len(), pts.len());
        for (i, got) in sigmas.iter().enumerate() {
            let want = if pts.len() > 3 { brute_sigma(&pts, i, 3, 0.3) } else { 15.0 };
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }
}

#[test]
fn missing_annotations_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(&dir.path().join("data"));
    let ann = data.join("toy").join("annotations.jsonl");
    fs::remove_file(&ann).unwrap();
    let out = tancount(&["gen-density", "--data", s(&data), "--out", s(&dir.path().join("gt"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&ann)));
}

fn synth(root: &Path, extra: &[&str]) -> PathBuf {
    synth_sized(root, "64", "48", extra)
}

fn synth_sized(root: &Path, width: &str, height: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec!["synth", "--out", s(root), "--frames", "6", "--width", width, "--height", height, "--walkers", "5"];
    args.extend_from_slice(extra);
    ok(&args);
    root.to_path_buf()
}

fn tensor_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "tan"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn zero_iterations_writes_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(&dir.path().join("data"), &[]);
    let out = dir.path().join("run");
    ok(&["train-lcn", "--data", s(&data), "--out", s(&out), "--iters", "0"]);
    let m = read_json(&out.join("model").join("manifest.json"));
    assert_eq!(m["iteration"], 0);
    assert_eq!(m["kind"], "lcn");
    assert_eq!(m["resolution"], serde_json::json!([64, 48]));
    assert_eq!(tensor_files(&out.join("model")).len(), 18);
    assert_eq!(fs::read_to_string(out.join("loss.jsonl")).unwrap(), "");
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(&dir.path().join("data"), &[]);
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        ok(&["train-lcn", "--data", s(&data), "--out", s(&out), "--iters", "4", "--lr", "1e-4", "--init", "he", "--seed", seed]);
        (tensor_files(&out.join("model")), fs::read_to_string(out.join("loss.jsonl")).unwrap())
    };
    let a = run("a", "7");
    assert_eq!(a, run("b", "7"));
    assert_ne!(a.0, run("c", "8").0);
    assert_eq!(a.1.lines().count(), 4);
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(&dir.path().join("data"), &[]);
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"iters": 3, "lr": 0.5, "k": 1, "init": {"scheme": "he"}}"#).unwrap();
    let out = dir.path().join("run");
    ok(&["train-lcn", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--lr", "1e-5"]);
    let report = read_json(&out.join("train_report.json"));
    assert_eq!(report["config"]["iters"], 3);
    assert_eq!(report["config"]["lr"], 1e-5);
    assert_eq!(report["config"]["init"]["scheme"], "he");
    assert_eq!(report["config"]["batch"], 1);
    assert!(report["config"].get("k").is_none());
    assert_eq!(fs::read_to_string(out.join("loss.jsonl")).unwrap().lines().count(), 3);
}

#[test]
fn divergence_keeps_the_last_good_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(&dir.path().join("data"), &[]);
    let out = dir.path().join("run");
    let res = tancount(&["train-lcn", "--data", s(&data), "--out", s(&out), "--iters", "50", "--lr", "1e30", "--init", "he"]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("diverged"));
    let m = read_json(&out.join("model").join("manifest.json"));
    let last_logged = fs::read_to_string(out.join("loss.jsonl")).unwrap().lines().count();
    assert_eq!(m["iteration"].as_u64().unwrap() as usize, last_logged);
    assert_eq!(tensor_files(&out.join("model")).len(), 18);
}

/// Untrained but non-degenerate LCN and TAN checkpoints.
fn models(dir: &Path, data: &Path) -> (PathBuf, PathBuf) {
    let lcn = dir.join("lcn");
    ok(&["train-lcn", "--data", s(data), "--out", s(&lcn), "--iters", "0", "--init", "he", "--seed", "3"]);
    let tan = dir.join("tan");
    ok(&["train-tan", "--data", s(data), "--lcn", s(&lcn.join("model")), "--out", s(&tan), "--iters", "0", "--init-std", "0.3"]);
    (lcn.join("model"), tan.join("model"))
}

fn counts(out: &Path) -> Vec<f64> {
    fs::read_to_string(out.join("counts.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["count"].as_f64().unwrap())
        .collect()
}

#[test]
fn single_frame_and_fusion_agree_on_a_static_video() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(&dir.path().join("data"), &[]);
    let (lcn, tan) = models(dir.path(), &data);
    let video = dir.path().join("static");
    fs::create_dir_all(&video).unwrap();
    let first = data.join("seq0").join("frames").join("000000.png");
    for i in 0..7 {
        fs::copy(&first, video.join(format!("{i:04}.png"))).unwrap();
    }
    let (a, b) = (dir.path().join("single"), dir.path().join("fused"));
    ok(&["infer", "--input", s(&video), "--lcn", s(&lcn), "--single-frame", "--out", s(&a)]);
    ok(&["infer", "--input", s(&video), "--lcn", s(&lcn), "--tan", s(&tan), "--out", s(&b)]);
    let (ca, cb) = (counts(&a), counts(&b));
    assert_eq!(ca.len(), 7);
    assert!(ca[0].abs() > 1e-3);
    for (x, y) in ca.iter().zip(&cb) {
        assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0), "{x} vs {y}");
    }
    let line = fs::read_to_string(b.join("counts.jsonl")).unwrap();
    let w = serde_json::from_str::<Value>(line.lines().next().unwrap()).unwrap()["weights"].as_array().unwrap().len();
    assert_eq!(w, 5);
}

#[test]
fn empty_video_gives_empty_output() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(&dir.path().join("data"), &[]);
    let (lcn, tan) = models(dir.path(), &data);
    let video = dir.path().join("empty");
    fs::create_dir_all(&video).unwrap();
    let out = dir.path().join("out");
    ok(&["infer", "--input", s(&video), "--lcn", s(&lcn), "--tan", s(&tan), "--out", s(&out)]);
    assert_eq!(fs::read_to_string(out.join("counts.jsonl")).unwrap(), "");
    assert_eq!(fs::read_to_string(out.join("counts.csv")).unwrap().trim(), "sequence,frame,count");
    assert_eq!(read_json(&out.join("infer_report.json"))["frames"], 0);
}

#[test]
fn resolution_mismatch_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(&dir.path().join("data"), &[]);
    let (lcn, tan) = models(dir.path(), &data);
    let other = synth_sized(&dir.path().join("other"), "32", "32", &[]);
    let out = tancount(&["infer", "--input", s(&other.join("seq0")), "--lcn", s(&lcn), "--tan", s(&tan), "--out", s(&dir.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("expects 64x48"));
}

#[test]
fn oracle_counts_score_zero_and_reports_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(&dir.path().join("data"), &["--sequences", "2"]);
    let mut csv = String::from("sequence,frame,count\n");
    for seq in ["seq0", "seq1"] {
        for line in fs::read_to_string(data.join(seq).join("annotations.jsonl")).unwrap().lines() {
            let rec: Value = serde_json::from_str(line).unwrap();
            csv += &format!("{seq},{},{}\n", rec["frame"].as_str().unwrap(), rec["points"].as_array().unwrap().len());
        }
    }
    let counts = dir.path().join("counts.csv");
    fs::write(&counts, csv).unwrap();
    let out = dir.path().join("eval");
    let args = ["eval", "--data", s(&data), "--counts-file", s(&counts), "--out", s(&out)];
    ok(&args);
    let first = fs::read(out.join("eval_report.json")).unwrap();
    let v: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!((v["mae"].as_f64(), v["mse"].as_f64()), (Some(0.0), Some(0.0)));
    assert_eq!(v["frames"].as_array().unwrap().len(), 12);
    ok(&args);
    assert_eq!(fs::read(out.join("eval_report.json")).unwrap(), first);
}

#[test]
fn infer_output_feeds_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(&dir.path().join("data"), &[]);
    let (lcn, tan) = models(dir.path(), &data);
    let inf = dir.path().join("inf");
    ok(&["infer", "--input", s(&data.join("seq0")), "--lcn", s(&lcn), "--tan", s(&tan), "--out", s(&inf)]);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["eval", "--data", s(&data), "--counts-file", s(&inf.join("counts.csv")), "--out", s(&a)]);
    ok(&["eval", "--data", s(&data), "--lcn", s(&lcn), "--tan", s(&tan), "--out", s(&b)]);
    let (ra, rb) = (read_json(&a.join("eval_report.json")), read_json(&b.join("eval_report.json")));
    assert!((ra["mae"].as_f64().unwrap() - rb["mae"].as_f64().unwrap()).abs() < 1e-9);
}

#[test]
fn bench_report_schema() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["bench", "--resolution", "320x240", "--frames", "200", "--out", s(dir.path())]);
    let v = read_json(&dir.path().join("bench_report.json"));
    assert!(v["fps"].as_f64().unwrap() > 0.0);
    assert!(v["cores"].as_u64().unwrap() >= 1);
    assert_eq!(v["frames"], 200);
    assert_eq!(v["resolution"], serde_json::json!([320, 240]));
    assert_eq!(v["precision"], "f32");
}

#[test]
fn clamped_counter_never_reports_negative_density() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(&dir.path().join("data"), &[]);
    let out = dir.path().join("run");
    ok(&["train-lcn", "--data", s(&data), "--out", s(&out), "--iters", "0", "--init", "0.5", "--clamp-output"]);
    let model = out.join("model");
    assert_eq!(read_json(&model.join("manifest.json"))["clamp_output"], true);
    let inf = dir.path().join("inf");
    ok(&["infer", "--input", s(&data.join("seq0")), "--lcn", s(&model), "--single-frame", "--out", s(&inf), "--heatmaps"]);
    assert!(counts(&inf).iter().all(|&c| c >= 0.0));
}

#[test]
fn joint_training_writes_both_models() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(&dir.path().join("data"), &[]);
    let (lcn, _) = models(dir.path(), &data);
    let out = dir.path().join("joint");
    ok(&["train-tan", "--data", s(&data), "--lcn", s(&lcn), "--out", s(&out), "--joint", "--lcn-lr", "1e-3", "--iters", "2", "--k", "1", "--init-std", "0.1"]);
    assert_eq!(read_json(&out.join("model").join("manifest.json"))["kind"], "tan");
    let tuned = out.join("lcn_model");
    assert_eq!(read_json(&tuned.join("manifest.json"))["iteration"], 2);
    assert_ne!(tensor_files(&tuned), tensor_files(&lcn));
    assert_eq!(fs::read_to_string(out.join("loss.jsonl")).unwrap().lines().count(), 2);
    assert_eq!(read_json(&out.join("train_report.json"))["model"], "joint");
    let inf = dir.path().join("inf");
    ok(&["infer", "--input", s(&data.join("seq0")), "--lcn", s(&tuned), "--tan", s(&out.join("model")), "--out", s(&inf)]);
    assert_eq!(counts(&inf).len(), 6);
}
