use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
raw_dim = 8
dim = 8
frames = 4
seen_classes = 4
twin_pairs = 1
unseen_classes = 3
train_per_class = 6
eval_per_class = 4

[model]
hidden = 8
layers = 1
experts = 2
heads = 2

[train]
batch_size = 8
epochs = 1

[eval]
few_shot = []
"#;

fn mote(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mote")).args(args).output().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("config.toml");
    std::fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p.to_str().unwrap().to_string()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn train_writes_all_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let o = mote(&["train", "--config", &cfg, "--seed-init", "7", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["checkpoint.json", "deployed.json", "report.json", "timing.json", "config.toml"] {
        assert!(out_a.join(f).exists(), "missing {f}");
    }
    for f in ["checkpoint.json", "deployed.json", "report.json"] {
        assert_eq!(std::fs::read(out_a.join(f)).unwrap(), std::fs::read(out_b.join(f)).unwrap(), "{f} differs");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out_a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seeds"]["init"], 7);

    let ck = out_a.join("checkpoint.json");
    let o = mote(&["eval", "--checkpoint", ck.to_str().unwrap(), "--split", "close", "--split", "mixed", "--tfm", "off"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(metrics["close"]["top1"].is_number());
    assert!(metrics["mixed"]["top1"].is_number());

    let dep = out_a.join("deployed.json");
    let o = mote(&["eval", "--checkpoint", dep.to_str().unwrap(), "--split", "fewshot:2"]);
    assert_eq!(code(&o), 1);
    let o = mote(&["eval", "--checkpoint", dep.to_str().unwrap(), "--split", "sideways"]);
    assert_eq!(code(&o), 2);

    let o = mote(&["report", out_a.join("report.json").to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("trade-off"));
}

#[test]
fn gen_data_then_train_on_the_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let data = dir.path().join("data");
    let o = mote(&["gen-data", "--config", &cfg, "--seed-data", "5", "--out", data.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("train.jsonl").exists());
    let run = dir.path().join("run");
    let o = mote(&["train", "--config", &cfg, "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seeds"]["data"], 5);

    // Same data regenerated from the seed gives the same run.
    let again = dir.path().join("again");
    let o = mote(&["train", "--config", &cfg, "--seed-data", "5", "--out", again.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(run.join("report.json")).unwrap(), std::fs::read(again.join("report.json")).unwrap());
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nexperts = 0\n").unwrap();
    let o = mote(&["train", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    std::fs::write(&bad, "[model]\ncolour = 3\n").unwrap();
    let o = mote(&["train", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = mote(&["train", "--tfm", "maybe", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn divergence_exits_with_3_and_leaves_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "\n[optim]\nlr = 1e200\n");
    let out = dir.path().join("o");
    let o = mote(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("divergence.json").exists());
}

#[test]
fn ablate_writes_json_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let grid = dir.path().join("grid.toml");
    std::fs::write(&grid, "[axes]\nrouting = [\"fixed\", \"random\"]\n").unwrap();
    let out = dir.path().join("abl");
    let o = mote(&["ablate", "--config", &cfg, "--grid", grid.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("table.txt")).unwrap();
    assert!(table.contains("routing=fixed") && table.contains("routing=random"));
    let o = mote(&["report", out.join("ablation.json").to_str().unwrap()]);
    assert_eq!(code(&o), 0);

    std::fs::write(&grid, "[axes]\nrouting = [\"top-k\"]\n").unwrap();
    let o = mote(&["ablate", "--config", &cfg, "--grid", grid.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}
