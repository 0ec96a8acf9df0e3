use std::path::Path;
use std::process::{Command, Output};

use hialign_core::train::RunConfig;
use serde_json::Value;

fn hialign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hialign"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> String {
    let mut cfg = RunConfig::default();
    cfg.encoder.input_dim = 6;
    cfg.encoder.hidden = 8;
    cfg.encoder.heads = 2;
    cfg.encoder.ffn = 16;
    cfg.encoder.proto_dim = 8;
    cfg.encoder.lora_rank = 2;
    cfg.train.warmup_epochs = 1;
    cfg.train.pretrain_epochs = 2;
    cfg.train.stage1_epochs = 1;
    cfg.train.stage2_epochs = 1;
    cfg.train.batch_size = 4;
    cfg.train.max_decode_len = 10;
    cfg.corpus.glosses = 8;
    cfg.corpus.input_dim = 6;
    cfg.corpus.embedding_dim = 8;
    cfg.corpus.train = 8;
    cfg.corpus.dev = 3;
    cfg.corpus.test = 3;
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path.to_str().unwrap().to_string()
}

fn ok(out: &Output) {
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    let cfg = write_config(dir.path());

    ok(&hialign(&["gen-data", "--config", &cfg, "--out", &d("data")]));
    assert!(dir.path().join("data/sentences.txt").exists());

    ok(&hialign(&["pretrain", "--config", &cfg, "--data", &d("data"), "--out", &d("pre"), "--lambda", "0.5"]));
    let log = std::fs::read_to_string(dir.path().join("pre/pretrain.log.jsonl")).unwrap();
    assert!(log.lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));
    assert!(dir.path().join("pre/best.ckpt").exists());

    ok(&hialign(&[
        "finetune", "--config", &cfg, "--data", &d("data"), "--init", &d("pre/best.ckpt"), "--out", &d("ft"),
    ]));
    ok(&hialign(&["finetune", "--config", &cfg, "--data", &d("data"), "--random-init", "--out", &d("rand")]));

    let out = hialign(&[
        "evaluate", "--ckpt", &d("ft/best.ckpt"), "--data", &d("data"), "--split", "test", "--out", &d("eval/report.json"),
    ]);
    ok(&out);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(d("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["count"], 3);
    assert_eq!(serde_json::from_slice::<Value>(&out.stdout).unwrap(), report);
    let hyps = std::fs::read_to_string(d("eval/report.hyp.txt")).unwrap();
    assert_eq!(hyps.lines().count(), 3);

    let feats = std::fs::read_dir(d("data/features"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with("test_"))
        .min()
        .unwrap();
    let out = hialign(&["translate", "--ckpt", &d("ft/best.ckpt"), "--features", feats.to_str().unwrap()]);
    ok(&out);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 1);
}

#[test]
fn gradcheck_command_passes() {
    let out = hialign(&["gradcheck"]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.lines().all(|l| l.ends_with("PASS")));
}

#[test]
fn exit_codes_separate_io_from_other_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let missing = dir.path().join("nope").to_str().unwrap().to_string();

    let out = hialign(&["gen-data", "--config", &missing, "--out", &missing]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = hialign(&["pretrain", "--config", &cfg, "--data", &missing, "--out", &missing]);
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"bogus": 1}}"#).unwrap();
    let out = hialign(&["gen-data", "--config", bad.to_str().unwrap(), "--out", &missing]);
    assert_eq!(out.status.code(), Some(1));

    let data = dir.path().join("data").to_str().unwrap().to_string();
    ok(&hialign(&["gen-data", "--config", &cfg, "--out", &data]));
    let out = hialign(&["pretrain", "--config", &cfg, "--data", &data, "--out", &missing, "--lambda=-1"]);
    assert_eq!(out.status.code(), Some(1));

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let out = hialign(&["translate", "--ckpt", junk.to_str().unwrap(), "--features", &missing]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn finetune_requires_exactly_one_start() {
    let out = hialign(&["finetune", "--config", "c", "--data", "d", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    let out = hialign(&["finetune", "--config", "c", "--data", "d", "--out", "o", "--init", "x", "--random-init"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn shipped_config_is_valid() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.json");
    let cfg = RunConfig::load(Path::new(path)).unwrap();
    assert_eq!(cfg.encoder.hidden, 32);
    assert_eq!(cfg.corpus.input_dim, cfg.encoder.input_dim);
}
