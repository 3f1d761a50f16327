use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use spikerate::TrainConfig;

const TINY: &str = r#"
seed = 4
passes = 1
checkpoint_every = 1
probe = false

[arch]
input = 72
hidden = [6]
classes = 2
k = 2
tau_us = 30000

[learn]
eps_layers = 2e-3
eps_heads = 1e-3
horizon = 2

[data]
kind = "synthetic"
classes = [0, 1]
train_per_class = 3
test_per_class = 2
length = 8
noise_rate = 0.01
gap = 3
crop = { origin = [10, 10], size = [6, 6] }
"#;

fn spikerate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spikerate"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn metric(csv: &Path, name: &str) -> f64 {
    fs::read_to_string(csv)
        .unwrap()
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{name},")).map(|v| v.parse().unwrap()))
        .unwrap_or_else(|| panic!("{name} missing from {}", csv.display()))
}

#[test]
fn convert_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("rec.csv");
    fs::write(&csv, "x,y,t_us,polarity\n3,4,10,1\n3,5,10,0\n127,0,99999,1\n").unwrap();

    let bin_out = dir.path().join("bin");
    let o = spikerate(&["convert", arg(&csv), "--from", "csv", "--to", "binary", "--out", arg(&bin_out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(bin_out.join("report.csv")).unwrap().ends_with(",3\n"));

    let csv_out = dir.path().join("csv");
    let bin = bin_out.join("rec.bin");
    let o = spikerate(&["convert", arg(&bin), "--from", "binary", "--to", "csv", "--out", arg(&csv_out)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(csv_out.join("rec.csv")).unwrap(), fs::read(&csv).unwrap());
    assert!(o.stdout.is_empty());
}

#[test]
fn convert_empty_and_bad_format() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let out = dir.path().join("o");
    let o = spikerate(&["convert", arg(&empty), "--out", arg(&out)]);
    assert_eq!(code(&o), 0);
    assert!(fs::read_to_string(out.join("report.csv")).unwrap().ends_with(",0\n"));
    assert_eq!(fs::read(out.join("empty.bin")).unwrap().len(), 4 + 2 + 8);

    let o = spikerate(&["convert", arg(&empty), "--from", "xml", "--out", arg(&out)]);
    assert_eq!(code(&o), 2);

    let broken = dir.path().join("broken.csv");
    fs::write(&broken, "x,y,t_us,polarity\n1,2,oops,1\n").unwrap();
    let o = spikerate(&["convert", arg(&broken), "--out", arg(&out)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn synth_counts_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = spikerate(&["synth", "--classes", "0,1", "--count", "10", "--length", "12", "--seed", "3", "--out", arg(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let files: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".bin"))
        .collect();
    assert_eq!(files.len(), 20);
    assert_eq!(fs::read_to_string(a.join("manifest.csv")).unwrap().lines().count(), 20);
    for f in files.iter().chain(["manifest.csv".to_string(), "manifest.toml".to_string()].iter()) {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let empty = dir.path().join("none");
    let o = spikerate(&["synth", "--count", "0", "--out", arg(&empty)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(empty.join("manifest.csv")).unwrap().lines().count(), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no recordings"));
}

#[test]
fn train_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = spikerate(&["train", "--set", "passes=0", "--out", arg(&out)]);
    assert_eq!(code(&o), 2);
    let o = spikerate(&["train", "--set", "learn.momentum=0.9", "--out", arg(&out)]);
    assert_eq!(code(&o), 2);
    let o = spikerate(&["train", "--config", "/nonexistent.toml", "--out", arg(&out)]);
    assert_eq!(code(&o), 2);
    let o = spikerate(&["frobnicate"]);
    assert_eq!(code(&o), 2);
    let o = spikerate(&["fields", "--seed", "3", "--out", arg(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_eval_fields_and_manifest_replay() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    let o = spikerate(&["train", "--config", arg(&cfg), "--out", arg(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["manifest.toml", "final.spk", "metrics.csv", "eval.csv", "checkpoints/pass0_layer1.spk"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(fs::read_to_string(run.join("metrics.csv")).unwrap().starts_with("timestep,pass,layer,metric,value"));

    let replay = dir.path().join("replay");
    let o = spikerate(&["train", "--config", arg(&run.join("manifest.toml")), "--out", arg(&replay)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(run.join("final.spk")).unwrap(), fs::read(replay.join("final.spk")).unwrap());

    let other = dir.path().join("other");
    let o = spikerate(&["train", "--config", arg(&cfg), "--seed", "5", "--out", arg(&other)]);
    assert_eq!(code(&o), 0);
    assert_ne!(fs::read(run.join("final.spk")).unwrap(), fs::read(other.join("final.spk")).unwrap());

    let ev = dir.path().join("eval");
    let o = spikerate(&["eval", arg(&run.join("final.spk")), "--out", arg(&ev)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(metric(&ev.join("eval.csv"), "recordings"), 4.0);
    assert!(fs::read_to_string(ev.join("manifest.toml")).unwrap().contains("retention"));

    let fields = dir.path().join("fields");
    let o = spikerate(&[
        "fields",
        arg(&run.join("final.spk")),
        "--set",
        "crop={origin=[10,10],size=[6,6]}",
        "--out",
        arg(&fields),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_dir(fields.join("fields")).unwrap().count(), 12);
    let o = spikerate(&[
        "fields",
        arg(&run.join("final.spk")),
        "--kind",
        "predictive",
        "--layer",
        "1",
        "--set",
        "crop={origin=[10,10],size=[6,6]}",
        "--out",
        arg(&fields),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn eval_untrained_checkpoint_is_chance() {
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig::from_toml_str(TINY, &[]).unwrap();
    let ck = dir.path().join("untrained.spk");
    spikerate::Trainer::new(config).unwrap().checkpoint().unwrap().save(&ck).unwrap();
    let out = dir.path().join("o");
    let o = spikerate(&["eval", arg(&ck), "--out", arg(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(metric(&out.join("eval.csv"), "recording_accuracy"), 0.5);
}

#[test]
fn eval_against_synth_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = spikerate(&[
        "synth",
        "--count",
        "2",
        "--length",
        "8",
        "--set",
        "crop={origin=[10,10],size=[6,6]}",
        "--out",
        arg(&data),
    ]);
    assert_eq!(code(&o), 0);
    let config = TrainConfig::from_toml_str(TINY, &[]).unwrap();
    let ck = dir.path().join("n.spk");
    spikerate::Trainer::new(config).unwrap().checkpoint().unwrap().save(&ck).unwrap();
    let out = dir.path().join("o");
    let o = spikerate(&[
        "eval",
        arg(&ck),
        "--dataset",
        arg(&data),
        "--set",
        "crop={origin=[10,10],size=[6,6]}",
        "--out",
        arg(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(metric(&out.join("eval.csv"), "recordings"), 4.0);
}

#[test]
fn verify_single_rate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v");
    let o = spikerate(&["verify", "--p", "0.25", "--out", arg(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    let row: Vec<&str> = report.lines().nth(1).unwrap().split(',').collect();
    assert!(row[0].starts_with("bernoulli p=0.25"));
    assert!(row[3].parse::<f64>().unwrap() <= 0.05);

    let replay = dir.path().join("r");
    let o = spikerate(&["verify", "--config", arg(&out.join("manifest.toml")), "--out", arg(&replay)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(out.join("report.csv")).unwrap(), fs::read(replay.join("report.csv")).unwrap());

    let o = spikerate(&["verify", "--config", arg(&out.join("manifest.toml")), "--set", "bernoulli=[{p=0.25,steps=20,tolerance=0.0}]", "--out", arg(&replay)]);
    assert_eq!(code(&o), 1);
}
