use std::path::Path;
use std::process::{Command, Output};

fn vprg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vprg"))
        .args(args)
        .env_remove("VPRG_EPOCHS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn generate(dir: &Path, videos: &str) {
    let o = vprg(&[
        "generate",
        "--videos",
        videos,
        "--segments",
        "8",
        "--sentences",
        "2",
        "--dim",
        "8",
        "--slots",
        "3",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

const TINY: &str = "epochs = 1\ndecay_every = 1\nbatch_size = 2\nk = 8\nd = 8\nheads = 2\ndepth = 1\n";

#[test]
fn generate_writes_a_loadable_corpus() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "3");
    for f in ["vocab.txt", "videos.jsonl", "annotations.jsonl"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    assert_eq!(std::fs::read_dir(dir.path().join("features")).unwrap().count(), 3);
}

#[test]
fn one_epoch_on_two_videos_then_eval_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let run = dir.path().join("run");
    generate(&corpus, "2");
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();

    let o = vprg(&["train", "--config", cfg.to_str().unwrap(), "--corpus", corpus.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.starts_with("epoch    1 lr 1.000e-4 total "), "{out}");
    let ckpts: Vec<_> = std::fs::read_dir(&run)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "ckpt"))
        .collect();
    assert_eq!(ckpts.len(), 1);
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);

    let ckpt = run.join("epoch-0001.ckpt");
    let report = dir.path().join("report");
    let o = vprg(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--k",
        "1,2",
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("retrieval rank-1 accuracy"));
    assert!(out.contains("| R@1 |") && out.contains("| R@2 |"), "{out}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(json["values"].as_array().unwrap().len(), 6);
    assert!(report.join("metrics.md").is_file());

    let heat = dir.path().join("heat");
    let o = vprg(&[
        "inspect",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--paragraph",
        "para000",
        "--out",
        heat.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_dir(&heat).unwrap().count(), 6);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    generate(&corpus, "2");

    assert_eq!(vprg(&["--help"]).status.code(), Some(0));
    assert_eq!(vprg(&["--version"]).status.code(), Some(0));
    // usage errors
    assert_eq!(vprg(&["eval", "--corpus", corpus.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(vprg(&["frobnicate"]).status.code(), Some(1));
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "epochs = 1\nwarp_speed = 9\n").unwrap();
    let o = vprg(&["config", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    // data errors
    let missing = dir.path().join("nowhere");
    let o = vprg(&["eval", "--checkpoint", missing.to_str().unwrap(), "--corpus", corpus.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = vprg(&["train", "--corpus", missing.to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_applies_environment_overrides() {
    let o = Command::new(env!("CARGO_BIN_EXE_vprg"))
        .args(["config"])
        .env("VPRG_BASE_LR", "0.003")
        .env("VPRG_TIME_LOSS", "off")
        .output()
        .unwrap();
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("base_lr = 0.003\n"), "{out}");
    assert!(out.contains("time_loss = false\n"), "{out}");

    let o = Command::new(env!("CARGO_BIN_EXE_vprg"))
        .args(["config"])
        .env("VPRG_DECAY_EVERY", "5000")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}
