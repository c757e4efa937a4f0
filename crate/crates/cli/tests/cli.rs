use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn emovq(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emovq"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) {
    let out = emovq(args, cwd);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

const SMALL: &str = r#"{"classifier": {"channels": 16, "ffn_dim": 16}}"#;

/// Corpus plus a one-epoch classifier and generator.
fn models(dir: &Path) {
    fs::write(dir.join("small.json"), SMALL).unwrap();
    ok(&["synth", "--out", "corpus", "--n", "10"], dir);
    ok(
        &[
            "--config",
            "small.json",
            "train-classifier",
            "--corpus",
            "corpus",
            "--epochs",
            "1",
            "--out",
            "m/cls.aeck",
        ],
        dir,
    );
    ok(
        &[
            "--config",
            "small.json",
            "train-generator",
            "--corpus",
            "corpus",
            "--classifier",
            "m/cls.aeck",
            "--epochs",
            "1",
            "--out",
            "m/gen.aeck",
        ],
        dir,
    );
}

#[test]
fn invalid_arguments_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for args in [
        &["synth", "--out", "c", "--n", "0"][..],
        &["synth", "--out", "c", "--languages", "3"],
        &[
            "train-classifier",
            "--corpus",
            "c",
            "--out",
            "x.aeck",
            "--epochs",
            "0",
        ],
        &[
            "evaluate",
            "--corpus",
            "c",
            "--classifier",
            "a",
            "--generator",
            "b",
            "--out",
            "o",
            "--mode",
            "bogus",
        ],
        &["frobnicate"],
    ] {
        assert_eq!(emovq(args, d).status.code(), Some(2), "{args:?}");
    }
    fs::write(d.join("bad.json"), r#"{"clasifier": {}}"#).unwrap();
    let out = emovq(&["--config", "bad.json", "synth", "--out", "c"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("clasifier"));
    fs::write(d.join("bad.json"), r#"{"ablation": {"trials": 0}}"#).unwrap();
    assert_eq!(
        emovq(&["--config", "bad.json", "synth", "--out", "c"], d)
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn runtime_failures_exit_with_1_and_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = emovq(
        &["train-classifier", "--corpus", "missing", "--out", "x.aeck"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
    fs::write(dir.path().join("junk.aeck"), b"not a checkpoint").unwrap();
    let out = emovq(
        &[
            "embed",
            "--corpus",
            ".",
            "--classifier",
            "junk.aeck",
            "--out",
            "e.csv",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_is_deterministic_and_echoes_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--out", "a", "--n", "2", "--seed", "5"], d);
    ok(&["synth", "--out", "b", "--n", "2", "--seed", "5"], d);
    for f in [
        "index.jsonl",
        "config.json",
        "clips/spk00/parallel/A-angry-0000.wav",
    ] {
        assert_eq!(
            fs::read(d.join("a").join(f)).unwrap(),
            fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    ok(&["--config", "a/config.json", "synth", "--out", "c"], d);
    assert_eq!(
        fs::read(d.join("a/index.jsonl")).unwrap(),
        fs::read(d.join("c/index.jsonl")).unwrap()
    );
    ok(&["synth", "--out", "e", "--n", "2", "--seed", "6"], d);
    assert_ne!(
        fs::read(d.join("a/clips/spk00/parallel/A-angry-0000.wav")).unwrap(),
        fs::read(d.join("e/clips/spk00/parallel/A-angry-0000.wav")).unwrap()
    );
}

#[test]
fn convert_and_embed_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    models(d);
    for f in [
        "m/cls.config.json",
        "m/cls.history.csv",
        "m/gen.config.json",
        "m/gen.history.csv",
    ] {
        assert!(d.join(f).exists(), "{f}");
    }
    let args = [
        "convert",
        "--input",
        "corpus/clips/spk00/parallel/A-happy-0000.wav",
        "--reference",
        "corpus/clips/spk01/Sad/A-sad-0001.wav",
        "--classifier",
        "m/cls.aeck",
        "--generator",
        "m/gen.aeck",
        "--out",
        "o/x.wav",
        "--emit-mel",
        "o/x.csv",
    ];
    ok(&args, d);
    let mel = fs::read_to_string(d.join("o/x.csv")).unwrap();
    let rows: Vec<&str> = mel.lines().collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.split(',').count() == 80));
    let diag: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("o/x.json")).unwrap()).unwrap();
    assert_eq!(diag["frames"].as_u64(), Some(rows.len() as u64));
    assert!(diag["reference_code"].as_u64().unwrap() < 25);
    assert!(d.join("o/x.config.json").exists());

    let short = hound::WavSpec {
        channels: 1,
        sample_rate: 24_000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(d.join("short.wav"), short).unwrap();
    for _ in 0..500 {
        w.write_sample(0i16).unwrap();
    }
    w.finalize().unwrap();
    let mut bad = args;
    bad[4] = "short.wav";
    let out = emovq(&bad, d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("one analysis window"));

    ok(
        &[
            "embed",
            "--corpus",
            "corpus",
            "--classifier",
            "m/cls.aeck",
            "--out",
            "e/emb.csv",
        ],
        d,
    );
    let text = fs::read_to_string(d.join("e/emb.csv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(
        &header[..6],
        [
            "id",
            "split",
            "emotion",
            "code",
            "code_emotion",
            "block_code"
        ]
    );
    assert_eq!(header.len(), 6 + 64 + 3);
    assert!(d.join("e/emb_utilization.csv").exists());
}
