use std::path::Path;
use std::process::Command;

fn ewa(args: &[&str]) -> (bool, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ewa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    (
        out.status.success(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--dataset",
    "synthetic:n=64,classes=3,size=8,channels=1",
    "--set",
    "epochs=2",
    "--set",
    "batch_size=16",
    "--set",
    "model.image_size=8",
    "--set",
    "model.patch_size=4",
    "--set",
    "model.channels=1",
    "--set",
    "model.d_model=8",
    "--set",
    "model.n_heads=2",
    "--set",
    "model.depth=2",
    "--set",
    "model.n_classes=3",
];

#[test]
fn train_eval_convert_finetune() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut args = vec!["train", "--out", s(&run), "--seed", "1"];
    args.extend_from_slice(TINY);
    let (ok, _, err) = ewa(&args);
    assert!(ok, "{err}");
    for f in ["config.toml", "model.ewac", "converted.ewac", "steps.csv", "epochs.csv", "train.log"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let steps = std::fs::read_to_string(run.join("steps.csv")).unwrap();
    assert!(steps.starts_with("step,epoch,loss"));
    assert_eq!(steps.lines().count(), 1 + 2 * 4);

    let (ok, out, err) = ewa(&["eval", s(&run.join("model.ewac"))]);
    assert!(ok, "{err}");
    assert!(out.contains("accuracy") && out.contains("converted form"), "{out}");

    let conv = dir.path().join("conv");
    let (ok, out, err) = ewa(&["convert", s(&run.join("model.ewac")), "--out", s(&conv)]);
    assert!(ok, "{err}");
    assert!(out.contains("parameters"));
    assert_eq!(
        std::fs::read(conv.join("converted.ewac")).unwrap(),
        std::fs::read(run.join("converted.ewac")).unwrap()
    );

    // fine-tuning needs a dense source
    let ft = dir.path().join("ft");
    let mut args = vec!["finetune", "--out", s(&ft), "--from"];
    let src = run.join("model.ewac");
    args.push(s(&src));
    args.extend_from_slice(TINY);
    let (ok, _, err) = ewa(&args);
    assert!(!ok && err.contains("dense"), "{err}");
    let src = run.join("converted.ewac");
    args[4] = s(&src);
    let (ok, _, err) = ewa(&args);
    assert!(ok, "{err}");
    assert!(ft.join("model.ewac").exists());
}

#[test]
fn verify_theory_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (ok, out, err) = ewa(&["verify-theory", "--out", s(dir.path()), "--cases", "2:3", "--betas", "0.2"]);
    assert!(ok, "{err}");
    assert!(out.contains("worst unrolled error"));
    let csv = std::fs::read_to_string(dir.path().join("theory_errors.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
}

#[test]
fn bad_input_is_reported() {
    let (ok, _, err) = ewa(&["train", "--set", "moe.placement=every-3", "--out", "/tmp/ewa-cli-bad"]);
    assert!(!ok && err.contains("placement"), "{err}");
    let (ok, _, err) = ewa(&["eval", "/nonexistent.ewac"]);
    assert!(!ok && err.contains("nonexistent"), "{err}");
}
