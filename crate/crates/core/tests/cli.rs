use std::path::Path;
use std::process::{Command, Output};

use cytopair::config::ExperimentConfig;
use cytopair::data::read_manifest;
use cytopair::encoders::EncoderConfig;

fn cytopair(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cytopair"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// A config small enough to train in seconds.
fn small_config(dir: &Path, loss: &str) -> std::path::PathBuf {
    let mut cfg = ExperimentConfig::default();
    cfg.synthetic.per_class = 20;
    cfg.train.max_epochs = 2;
    cfg.train.warmup_epochs = 1;
    cfg.train.batch_size = 16;
    cfg.train.loss = loss.parse().unwrap();
    cfg.train.encoder = EncoderConfig::default().scaled(8);
    let path = dir.join(format!("{loss}.toml"));
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        cytopair(&["no-such-command"], dir.path()).status.code(),
        Some(1)
    );
    assert_eq!(
        cytopair(&["train", "--lr", "abc"], dir.path())
            .status
            .code(),
        Some(1)
    );
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nnot_a_field = 1\n").unwrap();
    let o = cytopair(&["generate", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = cytopair(&["evaluate", "--checkpoint", "missing.ckpt"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn default_config_parses() {
    let o = Command::new(env!("CARGO_BIN_EXE_cytopair"))
        .arg("default-config")
        .output()
        .unwrap();
    assert!(o.status.success());
    let cfg = ExperimentConfig::from_toml(&stdout(&o)).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}

#[test]
fn generate_counts_and_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["generate", "--classes", "2", "--per-class", "10"];
    let o = cytopair(&args, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("samples\t20"));
    let manifest = dir.path().join("data/manifest.tsv");
    let first = std::fs::read(&manifest).unwrap();
    assert_eq!(read_manifest(&manifest).unwrap().entries.len(), 20);
    let splits: usize = ["train", "val", "test"]
        .iter()
        .map(|s| {
            read_manifest(&dir.path().join(format!("data/{s}.tsv")))
                .unwrap()
                .entries
                .len()
        })
        .sum();
    assert_eq!(splits, 20);
    assert!(cytopair(&args, dir.path()).status.success());
    assert_eq!(std::fs::read(&manifest).unwrap(), first);
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = small_config(out, "infonce");
    let cfg = cfg.to_str().unwrap();
    assert!(cytopair(&["generate", "--config", cfg], out)
        .status
        .success());

    let o = cytopair(&["train", "--config", cfg], out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("lr\t0.005"));
    for f in [
        "checkpoint.ckpt",
        "train_report.tsv",
        "loss_curve.svg",
        "config.toml",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }

    let o = cytopair(
        &[
            "evaluate",
            "--config",
            cfg,
            "--resamples",
            "1",
            "--gallery-sizes",
            "1,2,4,8,16",
        ],
        out,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("eval_table.txt")).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert_eq!(table.matches("±0.00").count(), 9);
    let sweep = std::fs::read_to_string(out.join("sweep_table.tsv")).unwrap();
    assert_eq!(sweep.lines().count(), 6);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("eval_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["k"], 3);

    let o = cytopair(
        &["build-gallery", "--config", cfg, "--n-per-class", "4"],
        out,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("entries\t32"));

    let train = read_manifest(&out.join("data/train.tsv")).unwrap();
    let e = &train.entries[0];
    let data = out.join("data");
    let image = data.join(&e.image_path);
    let profile = data.join(&e.profile_path);
    let gallery = out.join("gallery.bin");
    let classify = |extra: &[&str]| {
        let mut args = vec![
            "classify",
            "--config",
            cfg,
            "--gallery",
            gallery.to_str().unwrap(),
            "--image",
            image.to_str().unwrap(),
            "--profile",
            profile.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        let o = cytopair(&args, out);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        serde_json::from_str::<serde_json::Value>(&stdout(&o)).unwrap()
    };
    let both = classify(&["--modalities", "I+P", "--k", "3"]);
    assert_eq!(both["neighbors"].as_array().unwrap().len(), 6);
    assert!(both["label"].is_string());
    let tally: u64 = both["tally"]
        .as_object()
        .unwrap()
        .values()
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(tally, 6);
    let one = classify(&["--modalities", "P", "--k", "3"]);
    assert_eq!(one["neighbors"].as_array().unwrap().len(), 3);

    let o = cytopair(
        &[
            "classify",
            "--config",
            cfg,
            "--gallery",
            gallery.to_str().unwrap(),
            "--modalities",
            "I",
        ],
        out,
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sigmoid_uses_its_own_learning_rate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = small_config(out, "sigmoid");
    let cfg = cfg.to_str().unwrap();
    assert!(cytopair(&["generate", "--config", cfg], out)
        .status
        .success());
    let o = cytopair(&["train", "--config", cfg, "--epochs", "1"], out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("lr\t0.002"));
    let report = std::fs::read_to_string(out.join("train_report.tsv")).unwrap();
    assert!(report.starts_with("# loss=sigmoid lr=0.002"));
}

#[test]
fn every_profile_encoder_name_is_accepted() {
    for name in ["conv1d", "bilstm", "transformer1d"] {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let cfg = small_config(out, "infonce");
        let cfg = cfg.to_str().unwrap();
        assert!(cytopair(&["generate", "--config", cfg], out)
            .status
            .success());
        let o = cytopair(
            &[
                "train",
                "--config",
                cfg,
                "--epochs",
                "1",
                "--profile-encoder",
                name,
            ],
            out,
        );
        assert!(
            o.status.success(),
            "{name}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}
