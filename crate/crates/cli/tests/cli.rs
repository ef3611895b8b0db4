use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gmdgm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmdgm"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn text(out: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    )
}

const TINY: &str = r#"
[data]
source = "synthetic"
synthetic_windows = 240
synthetic_classes = 4
synthetic_imbalance = 4.0
synthetic_features = 10
synthetic_seed = 3
validation_size = 40
test_size = 40
standardize = true

[split]
semi_supervised = [0, 1]
unsupervised = [2, 3]
labels_per_class = 5
extra_classes = 1

[train]
model = "gmdgm"
hidden = [8]
z_dim = 2
likelihood = "gaussian"
epochs = 3
batch_size_labelled = 10
batch_size_unlabelled = 20
lr = 1e-3
seed = 11
checkpoint_every = 1

[output]
dir = "out"
repeats = 1
"#;

#[test]
fn selftest_passes_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = gmdgm(&["selftest"], dir.path());
    let t = text(&out);
    assert!(out.status.success(), "{t}");
    assert_eq!(t.lines().filter(|l| l.starts_with("PASS")).count(), 6, "{t}");
    assert!(!t.contains("FAIL"));
}

#[test]
fn unknown_config_key_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TINY.replace("z_dim = 2", "z_dim = 2\nlatent_size = 4");
    fs::write(dir.path().join("bad.toml"), cfg).unwrap();
    let out = gmdgm(&["train", "--config", "bad.toml"], dir.path());
    assert!(!out.status.success());
    assert!(text(&out).contains("latent_size"), "{}", text(&out));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn missing_mnist_directory_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[data]\nsource = \"mnist\"\nmnist_dir = \"nowhere\"\n";
    fs::write(dir.path().join("m.toml"), cfg).unwrap();
    let out = gmdgm(&["train", "--config", "m.toml", "--out", "o"], dir.path());
    assert!(!out.status.success());
    let t = text(&out);
    assert!(t.contains("nowhere"), "{t}");
    assert!(!t.contains("panicked"), "{t}");
}

#[test]
fn train_then_eval_writes_the_report_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("tiny.toml"), TINY).unwrap();
    let out = gmdgm(&["train", "--config", "tiny.toml", "--repeats", "2"], p);
    assert!(out.status.success(), "{}", text(&out));
    let run = p.join("out/run_00");
    for r in ["run_00", "run_01"] {
        for f in [
            "config.toml",
            "history.csv",
            "best/manifest.txt",
            "checkpoint/params.bin",
        ] {
            assert!(p.join("out").join(r).join(f).exists(), "missing {r}/{f}");
        }
    }
    let seeds: Vec<String> = ["run_00", "run_01"]
        .iter()
        .map(|r| fs::read_to_string(p.join("out").join(r).join("config.toml")).unwrap())
        .collect();
    assert!(seeds[0].contains("seed = 11") && seeds[1].contains("seed = 12"));
    assert_eq!(
        fs::read_to_string(p.join("out/summary.csv")).unwrap().lines().count(),
        3
    );
    let marker = fs::read_to_string(p.join("out/best_run.txt")).unwrap();
    assert!(marker.contains("selected_by = validation_elbo"), "{marker}");

    let out = gmdgm(
        &[
            "eval",
            "--config",
            "tiny.toml",
            "--checkpoint",
            "out/run_00/best",
            "--out",
            "report",
        ],
        p,
    );
    assert!(out.status.success(), "{}", text(&out));
    let mut files: Vec<String> = fs::read_dir(p.join("report"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    assert_eq!(files, ["confusion.csv", "latents.csv", "metrics.txt"]);
    let latents = fs::read_to_string(p.join("report/latents.csv")).unwrap();
    assert_eq!(latents.lines().next().unwrap(), "z0,z1,predicted,true");
    assert_eq!(latents.lines().count(), 41);

    let out = gmdgm(
        &[
            "eval",
            "--config",
            "tiny.toml",
            "--model",
            "m2",
            "--checkpoint",
            "out/run_00/best",
            "--out",
            "r2",
        ],
        p,
    );
    assert!(!out.status.success());
    assert!(text(&out).contains("m2"), "{}", text(&out));

    let out = gmdgm(&["train", "--config", "out/run_00/config.toml", "--out", "again"], p);
    assert!(out.status.success(), "{}", text(&out));
    let a = fs::read(run.join("history.csv")).unwrap();
    let b = fs::read(p.join("again/run_00/history.csv")).unwrap();
    assert_eq!(a, b);
}
