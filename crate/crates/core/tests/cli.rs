use std::path::Path;
use std::process::{Command, Output};

use cyclewalk::synth_data::read_dataset;

fn cyclewalk(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cyclewalk"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("CYCLEWALK_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["synth", "--frames", "8", "--sprites", "2", "--seed", "7", "--count", "2"];
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(cyclewalk(&args, &a).status.success());
    assert!(cyclewalk(&args, &b).status.success());
    for f in ["seq_0000.cwvd", "seq_0001.cwvd"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let (seq, gt) = read_dataset(&a.join("seq_0000.cwvd")).unwrap();
    assert_eq!(seq.len(), 8);
    assert_eq!(gt.classes(), 3);
    let meta = json(&a.join("synth.json"));
    assert_eq!(meta["config"]["seed"], 7);
    assert!(meta["version"].as_str().is_some_and(|v| !v.is_empty()));
}

#[test]
fn gradcheck_passes_and_reports_its_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = cyclewalk(&["gradcheck", "--seed", "1"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max relative error"));
    let r = json(&dir.path().join("gradcheck.json"));
    assert_eq!(r["passed"], true);
    assert!(r["max_rel_error"].as_f64().unwrap() < 1e-4);
    assert_eq!(r["instances"].as_array().unwrap().len(), 20);
}

#[test]
fn lemma_run_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = cyclewalk(&["lemma", "--draws", "500"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(json(&dir.path().join("lemma.json"))["passed"], true);
}

#[test]
fn unknown_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cyclewalk(&["synth", "--frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(cyclewalk(&["no-such-command"], dir.path()).status.code(), Some(2));
    assert_eq!(cyclewalk(&["sweep", "--axis", "sideways"], dir.path()).status.code(), Some(2));
}

#[test]
fn missing_files_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    let o = cyclewalk(&["synth", "--config", missing.to_str().unwrap()], dir.path());
    assert_ne!(o.status.code(), Some(0));
    let err: serde_json::Value = serde_json::from_str(stderr(&o).trim()).unwrap();
    assert_eq!(err["error"]["kind"], "io");
    assert!(err["error"]["message"].as_str().unwrap().contains("absent.json"));

    let ck = dir.path().join("gone.cwck");
    let o = cyclewalk(&["eval-walk", "--checkpoint", ck.to_str().unwrap()], dir.path());
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("gone.cwck"));
}

#[test]
fn bad_configs_and_thread_counts_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"seed": 1, "colour": "blue"}"#).unwrap();
    let o = cyclewalk(&["synth", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("colour"));

    let o = Command::new(env!("CARGO_BIN_EXE_cyclewalk"))
        .args(["synth", "--out"])
        .arg(dir.path())
        .env("CYCLEWALK_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"seed": 5, "data": {"frames": 6, "sprites": 1}}"#).unwrap();
    let out = dir.path().join("o");
    let o = cyclewalk(&["synth", "--config", cfg.to_str().unwrap(), "--seed", "9", "--sprites", "2"], &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let echo = &json(&out.join("synth.json"))["config"];
    assert_eq!(echo["seed"], 9);
    assert_eq!(echo["data"]["frames"], 6);
    assert_eq!(echo["data"]["sprites"], 2);
    assert_eq!(read_dataset(&out.join("seq_0000.cwvd")).unwrap().0.len(), 6);
}

#[test]
fn short_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = cyclewalk(&["train", "--steps", "4", "--checkpoint-every", "2", "--train-sequences", "2"], &run);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["history.jsonl", "step_000002.cwck", "step_000004.cwck", "final.cwck", "train.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let ck = run.join("final.cwck");
    let ck = ck.to_str().unwrap();

    let ev = dir.path().join("eval");
    let o = cyclewalk(&["eval-walk", "--checkpoint", ck, "--heldout-sequences", "2", "--hops", "1,3"], &ev);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&ev.join("eval_walk.json"));
    assert_eq!(r["hops"].as_array().unwrap().len(), 2);
    assert!(r["config"].is_object());

    let pr = dir.path().join("prop");
    let o = cyclewalk(&["propagate", "--checkpoint", ck, "--heldout-sequences", "2", "--context", "4"], &pr);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&pr.join("propagation.json"));
    let iou = r["mean_iou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&iou));
    assert_eq!(r["sequences"].as_array().unwrap().len(), 2);
    assert_eq!(r["config"]["propagation"]["context"], 4);

    let ad = dir.path().join("adapt");
    let o = cyclewalk(&["adapt", "--checkpoint", ck, "--heldout-sequences", "1", "--updates", "2", "--every", "5"], &ad);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&ad.join("adapt.json"));
    let frames: Vec<u64> = r["sequences"][0]["adaptations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["frame"].as_u64().unwrap())
        .collect();
    assert_eq!(frames, vec![1, 6, 11]);

    let sw = dir.path().join("sweep");
    let o = cyclewalk(
        &["sweep", "--axis", "context-length", "--values", "1,2", "--checkpoint", ck, "--heldout-sequences", "2"],
        &sw,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(sw.join("sweep_context-length.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 3);
    let table = json(&sw.join("sweep_context-length.json"));
    assert!(table["cells"].as_array().unwrap().iter().all(|c| c["error"].is_null()));
}
