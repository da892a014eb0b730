use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hvq_core::data::load_checkpoint;

const FAST_TRAIN: &str = r#"{"train": {"epochs": 3, "lambda_rec": 0.002,
    "tcn": {"stages": 1, "layers_per_stage": 4, "hidden_channels": 16, "latent_dim": 8}}}"#;

fn hvq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hvq"))
        .args(args)
        .env_remove("HVQ_SEED")
        .output()
        .expect("hvq runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\nstdout: {}\nstderr: {}", out.status.code(), stdout(out), stderr(out));
}

fn write(path: &Path, text: &str) -> PathBuf {
    std::fs::write(path, text).unwrap();
    path.to_path_buf()
}

/// Small synthetic dataset under `root/data`.
fn small_data(root: &Path, spec: &str) -> PathBuf {
    let spec = write(&root.join("spec.json"), spec);
    let data = root.join("data");
    assert_ok(&hvq(&["synth", "--spec", p(&spec), "--out", p(&data)]));
    data
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn field(line: &str, key: &str) -> f64 {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing in {line}"))
        .parse()
        .unwrap()
}

fn labels(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

fn segments(labels: &[String]) -> usize {
    1 + labels.windows(2).filter(|w| w[0] != w[1]).count()
}

#[test]
fn synth_writes_layout_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_ok(&hvq(&["synth", "--out", p(&a)]));
    assert_ok(&hvq(&["synth", "--out", p(&b)]));
    let act = a.join("synthetic");
    for sub in ["features", "labels", "labels_sub"] {
        assert!(act.join(sub).is_dir(), "{sub}");
    }
    assert!(act.join("meta.json").is_file());
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn synth_infeasible_spec_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(&dir.path().join("s.json"), r#"{"actions": 12, "feature_dim": 2}"#);
    let out = dir.path().join("out");
    let res = hvq(&["synth", "--spec", p(&spec), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(2), "{}", stderr(&res));
    assert!(!out.exists());
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), r#"{"videos": 3}"#);
    let cfg = write(&dir.path().join("c.json"), r#"{"train": {"epochz": 3}}"#);
    let ck = dir.path().join("m.hvqc");
    let res = hvq(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&ck)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!ck.exists());
}

#[test]
fn train_segment_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), r#"{"videos": 6}"#);
    let cfg = write(&dir.path().join("c.json"), FAST_TRAIN);
    let ck = dir.path().join("model.hvqc");
    let res = hvq(&["train", "--data", p(&data), "--activity", "synthetic", "--config", p(&cfg), "--out", p(&ck)]);
    assert_ok(&res);
    let line = stdout(&res);
    assert!(field(&line, "final_loss") < field(&line, "initial_loss"), "{line}");
    assert_eq!(stderr(&res).lines().filter(|l| l.starts_with("epoch=")).count(), 3);

    let ckpt = load_checkpoint(&ck).unwrap();
    assert_eq!(ckpt.config.lambda_rec, 0.002);
    assert_eq!(ckpt.activity, "synthetic");
    assert_eq!(ckpt.epochs_completed, 3);

    let gt = data.join("synthetic/labels");
    for decoder in ["dp", "fifa", "argmax"] {
        let pred = dir.path().join(format!("pred_{decoder}"));
        let res = hvq(&["segment", "--checkpoint", p(&ck), "--data", p(&data), "--decoder", decoder, "--out", p(&pred)]);
        assert_ok(&res);
        let side: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(pred.join("decoding.json")).unwrap()).unwrap();
        assert_eq!(side["decoder"], decoder);
        let order: Vec<String> = side["order"].as_array().unwrap().iter().map(|v| v.to_string()).collect();
        for video in 0..6 {
            let name = format!("video{video:03}.txt");
            let got = labels(&pred.join(&name));
            assert_eq!(got.len(), labels(&gt.join(&name)).len());
            if decoder == "dp" {
                let mut runs = got.clone();
                runs.dedup();
                assert_eq!(runs, order, "dp visits the order once");
            }
        }
    }

    let metrics = dir.path().join("m.json");
    let res = hvq(&["eval", "--pred", p(&dir.path().join("pred_fifa")), "--gt", p(&gt), "--out", p(&metrics)]);
    assert_ok(&res);
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    for key in ["mof", "precision", "recall", "f1", "jsd"] {
        assert!(doc["aggregate"][key].is_number(), "{key} in {doc}");
    }
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), r#"{"videos": 3}"#);
    let gt = data.join("synthetic/labels");
    let metrics = dir.path().join("m.json");
    let hist = dir.path().join("hist");
    assert_ok(&hvq(&["eval", "--pred", p(&gt), "--gt", p(&gt), "--out", p(&metrics), "--hist-out", p(&hist)]));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    let avg = &doc["aggregate"];
    assert_eq!(avg["mof"], 100.0);
    assert_eq!(avg["f1"], 100.0);
    assert_eq!(avg["jsd"], 0.0);
    let csv = std::fs::read_to_string(hist.join("labels/video000.csv")).unwrap();
    let starts: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(&starts[..2], ["0", "20"]);
    if starts.len() > 2 {
        assert_eq!(starts[2], "40");
    }
}

#[test]
fn eval_with_background_omits_jsd() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt");
    let pred = dir.path().join("pred");
    std::fs::create_dir_all(&gt).unwrap();
    std::fs::create_dir_all(&pred).unwrap();
    write(&gt.join("v1.txt"), "SIL\na\na\nb\nb\nSIL\n");
    write(&pred.join("v1.txt"), "0\n0\n0\n1\n1\n1\n");
    let metrics = dir.path().join("m.json");
    let res = hvq(&["eval", "--pred", p(&pred), "--gt", p(&gt), "--background-label", "SIL", "--out", p(&metrics)]);
    assert_ok(&res);
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert!(doc["aggregate"].get("jsd").is_none(), "{doc}");
    assert_eq!(doc["aggregate"]["mof"], 100.0);
}

#[test]
fn eval_misaligned_sets_name_the_video() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt");
    let pred = dir.path().join("pred");
    std::fs::create_dir_all(&gt).unwrap();
    std::fs::create_dir_all(&pred).unwrap();
    write(&gt.join("v1.txt"), "a\nb\n");
    write(&pred.join("v1.txt"), "0\n1\n");
    write(&gt.join("v2.txt"), "a\nb\n");
    let metrics = dir.path().join("m.json");
    let res = hvq(&["eval", "--pred", p(&pred), "--gt", p(&gt), "--out", p(&metrics)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("v2"), "{}", stderr(&res));
    assert!(!metrics.exists());

    write(&pred.join("v2.txt"), "0\n1\n1\n");
    let res = hvq(&["eval", "--pred", p(&pred), "--gt", p(&gt), "--out", p(&metrics)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("v2"));
}

#[test]
fn missing_activity_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), r#"{"videos": 3}"#);
    let ck = dir.path().join("m.hvqc");
    let res = hvq(&["train", "--data", p(&data), "--activity", "nope", "--out", p(&ck)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("nope"));
    assert!(!ck.exists());
}

#[test]
fn three_level_config_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), r#"{"videos": 3}"#);
    let cfg = write(
        &dir.path().join("c.json"),
        r#"{"train": {"epochs": 1, "hvq": {"levels": 3, "level_alphas": [2, 2]},
            "tcn": {"stages": 1, "layers_per_stage": 3, "hidden_channels": 8, "latent_dim": 8}}}"#,
    );
    let ck = dir.path().join("m.hvqc");
    assert_ok(&hvq(&["train", "--data", p(&data), "--config", p(&cfg), "--activity", "synthetic", "--out", p(&ck)]));
    assert_eq!(load_checkpoint(&ck).unwrap().state.books.len(), 3);
}

#[test]
fn segment_rejects_mismatched_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), r#"{"videos": 3}"#);
    let cfg = write(&dir.path().join("c.json"), FAST_TRAIN);
    let ck = dir.path().join("m.hvqc");
    assert_ok(&hvq(&["train", "--data", p(&data), "--config", p(&cfg), "--activity", "synthetic", "--out", p(&ck)]));
    let other = dir.path().join("other");
    let spec = write(&dir.path().join("s8.json"), r#"{"videos": 3, "feature_dim": 8}"#);
    assert_ok(&hvq(&["synth", "--spec", p(&spec), "--out", p(&other)]));
    let pred = dir.path().join("pred");
    let res = hvq(&["segment", "--checkpoint", p(&ck), "--data", p(&other), "--out", p(&pred)]);
    assert_eq!(res.status.code(), Some(2), "{}", stderr(&res));
    assert!(!pred.exists());
}

#[test]
fn seed_comes_from_flag_then_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), r#"{"videos": 3}"#);
    let cfg = write(
        &dir.path().join("c.json"),
        r#"{"train": {"epochs": 1, "tcn": {"stages": 1, "layers_per_stage": 2, "hidden_channels": 8, "latent_dim": 8}}}"#,
    );
    let ck = dir.path().join("env.hvqc");
    let res = Command::new(env!("CARGO_BIN_EXE_hvq"))
        .args(["train", "--data", p(&data), "--config", p(&cfg), "--activity", "synthetic", "--out", p(&ck)])
        .env("HVQ_SEED", "7")
        .output()
        .unwrap();
    assert_ok(&res);
    assert_eq!(load_checkpoint(&ck).unwrap().config.seed, 7);

    let ck2 = dir.path().join("flag.hvqc");
    let res = Command::new(env!("CARGO_BIN_EXE_hvq"))
        .args(["train", "--data", p(&data), "--config", p(&cfg), "--activity", "synthetic", "--out", p(&ck2)])
        .args(["--seed", "3"])
        .env("HVQ_SEED", "7")
        .output()
        .unwrap();
    assert_ok(&res);
    assert_eq!(load_checkpoint(&ck2).unwrap().config.seed, 3);
}

#[test]
fn train_all_in_parallel_processes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    for name in ["tea", "milk"] {
        let spec = write(&dir.path().join(format!("{name}.json")), &format!(r#"{{"videos": 3, "activity": "{name}"}}"#));
        assert_ok(&hvq(&["synth", "--spec", p(&spec), "--out", p(&data)]));
    }
    let cfg = write(
        &dir.path().join("c.json"),
        r#"{"train": {"epochs": 1, "tcn": {"stages": 1, "layers_per_stage": 2, "hidden_channels": 8, "latent_dim": 8}}}"#,
    );
    let serial = dir.path().join("serial");
    let parallel = dir.path().join("parallel");
    assert_ok(&hvq(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&serial)]));
    assert_ok(&hvq(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&parallel), "--jobs", "2"]));
    let a = tree(&serial);
    assert_eq!(a.keys().map(|k| k.to_str().unwrap()).collect::<Vec<_>>(), ["milk.hvqc", "tea.hvqc"]);
    assert_eq!(a, tree(&parallel));
}

#[test]
fn ablate_unknown_axis_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a.csv");
    let res = hvq(&["ablate", "--data", p(dir.path()), "--axis", "gamma", "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn ablate_lambda_rec_grid_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), r#"{"videos": 3}"#);
    let cfg = write(
        &dir.path().join("c.json"),
        r#"{"train": {"epochs": 1, "tcn": {"stages": 1, "layers_per_stage": 2, "hidden_channels": 8, "latent_dim": 8}}}"#,
    );
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    assert_ok(&hvq(&["ablate", "--data", p(&data), "--axis", "lambda_rec", "--config", p(&cfg), "--out", p(&a)]));
    assert_ok(&hvq(&["ablate", "--data", p(&data), "--axis", "lambda_rec", "--config", p(&cfg), "--out", p(&b)]));
    let text = std::fs::read_to_string(&a).unwrap();
    let settings: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(settings, ["0.0005", "0.001", "0.002", "0.005", "0.01"]);
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
}

#[test]
fn ablate_levels_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), r#"{"videos": 3}"#);
    let cfg = write(
        &dir.path().join("c.json"),
        r#"{"train": {"epochs": 1, "tcn": {"stages": 1, "layers_per_stage": 2, "hidden_channels": 8, "latent_dim": 8}}}"#,
    );
    let out = dir.path().join("levels.csv");
    assert_ok(&hvq(&["ablate", "--data", p(&data), "--axis", "levels", "--config", p(&cfg), "--out", p(&out)]));
    let text = std::fs::read_to_string(&out).unwrap();
    let settings: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(settings, ["Single", "Double", "Triple"]);
}

#[test]
fn fifa_never_has_more_segments_than_argmax() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), r#"{"videos": 4}"#);
    for seed in 0..5 {
        let cfg = write(&dir.path().join("c.json"), FAST_TRAIN);
        let ck = dir.path().join(format!("m{seed}.hvqc"));
        let seed_arg = seed.to_string();
        assert_ok(&hvq(&[
            "train", "--data", p(&data), "--config", p(&cfg), "--activity", "synthetic", "--out", p(&ck), "--seed",
            &seed_arg,
        ]));
        let mut counts = Vec::new();
        for decoder in ["fifa", "argmax"] {
            let pred = dir.path().join(format!("p{seed}_{decoder}"));
            assert_ok(&hvq(&["segment", "--checkpoint", p(&ck), "--data", p(&data), "--decoder", decoder, "--out", p(&pred)]));
            let c: Vec<usize> = (0..4).map(|v| segments(&labels(&pred.join(format!("video{v:03}.txt"))))).collect();
            counts.push(c);
        }
        for (f, a) in counts[0].iter().zip(&counts[1]) {
            assert!(f <= a, "seed {seed}: fifa {f} segments, argmax {a}");
        }
    }
}
