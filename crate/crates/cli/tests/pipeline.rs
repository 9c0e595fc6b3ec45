use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bagsplit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bagsplit"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

const MANIFEST: &str = r#"
output_dir = "runs/a"
seeds = [0, 1]
stages = ["synth", "train", "pslab", "retrain", "eval"]

[synth]
n_bags = 80
test_bags = 30
d = 6
noise = 0.1
prior_quality = 0.8

[train]
epochs = 3
hidden = [8, 4]
weights = { bag = 0.5, cosine = 0.5, correlation = 0.0 }

[eval]
cosine_baseline = true
"#;

fn files_under(root: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::write(d.join("exp.toml"), MANIFEST).unwrap();
    let first = bagsplit(d, &["pipeline", "--manifest", "exp.toml"]);
    assert_eq!(
        first.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let second = bagsplit(d, &["pipeline", "--manifest", "exp.toml", "--out", "runs/b"]);
    assert_eq!(second.status.code(), Some(0));

    let a = d.join("runs/a");
    let b = d.join("runs/b");
    let files = files_under(&a);
    assert_eq!(files, files_under(&b));
    for f in &files {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    for f in [
        "manifest.json",
        "summary.tsv",
        "seed-0/model.ckpt",
        "seed-0/retrained.ckpt",
        "seed-0/audit.jsonl",
        "seed-1/report-retrained.json",
        "seed-1/report-cosine.json",
    ] {
        assert!(files.iter().any(|x| Path::new(x) == Path::new(f)), "missing {f}");
    }
    assert!(!d.join("runs/a.partial").exists());

    let summary = fs::read_to_string(a.join("summary.tsv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2 * 3);
}

#[test]
fn pipeline_refuses_to_overwrite_without_force() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::write(d.join("exp.toml"), MANIFEST).unwrap();
    assert_eq!(
        bagsplit(d, &["pipeline", "--manifest", "exp.toml"]).status.code(),
        Some(0)
    );
    let again = bagsplit(d, &["pipeline", "--manifest", "exp.toml"]);
    assert_eq!(again.status.code(), Some(1));
    let forced = bagsplit(d, &["pipeline", "--manifest", "exp.toml", "--force"]);
    assert_eq!(forced.status.code(), Some(0));
}

#[test]
fn pipeline_checks_manifest_before_running() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let cases = [
        ("seeds = [0]\nstages = [\"train\", \"eval\"]\ntrain_data = \"missing.jsonl\"\ntest_data = \"missing.jsonl\"\n", "does not exist"),
        ("seeds = [0]\nstages = [\"eval\", \"train\"]\n", "pipeline order"),
        ("seeds = [0]\nstages = [\"synth\", \"retrain\"]\n[synth]\n", "requires"),
        ("seeds = []\nstages = [\"synth\"]\n[synth]\n", "seed"),
    ];
    for (i, (text, needle)) in cases.iter().enumerate() {
        let name = format!("m{i}.toml");
        fs::write(d.join(&name), text).unwrap();
        let out = bagsplit(d, &["pipeline", "--manifest", &name, "--out", "o"]);
        assert_eq!(out.status.code(), Some(1), "case {i}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(needle), "case {i}: {err}");
        assert!(!d.join("o").exists());
    }
}

#[test]
fn pipeline_on_avg_bags_stops_at_pslab_with_exit_three() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let manifest = MANIFEST.replace("prior_quality = 0.8", "prior_quality = 0.8\nagg = \"avg\"");
    fs::write(d.join("exp.toml"), manifest).unwrap();
    let out = bagsplit(d, &["pipeline", "--manifest", "exp.toml"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!d.join("runs/a").exists());
}

#[test]
fn pipeline_uses_existing_files_and_config_path() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let synth = bagsplit(
        d,
        &[
            "synth",
            "--bags",
            "60",
            "--test-bags",
            "20",
            "--dim",
            "5",
            "--out",
            "data",
        ],
    );
    assert_eq!(synth.status.code(), Some(0));
    fs::write(
        d.join("train.toml"),
        "mode = \"response_level\"\nepochs = 2\nhidden = [4, 4]\n",
    )
    .unwrap();
    fs::write(
        d.join("exp.toml"),
        "seeds = [5]\nstages = [\"train\", \"eval\"]\ntrain_data = \"data/train.jsonl\"\ntest_data = \"data/test.jsonl\"\nconfig = \"train.toml\"\n",
    )
    .unwrap();
    let out = bagsplit(d, &["pipeline", "--manifest", "exp.toml", "--out", "r"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(d.join("r/seed-5/report-trained.json").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("r/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["train"]["mode"], "response_level");
}
