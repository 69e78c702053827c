use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use conceptshift::pipeline::toy::toy_pair;
use conceptshift::pipeline::RunDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_conceptshift"));
    c.env("RUST_LOG", "info");
    c
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/toy_backbone.cs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn pair(dir: &Path) -> (String, String) {
    let (s, r) = toy_pair();
    let (src, reference) = (dir.join("source.png"), dir.join("reference.png"));
    s.render(32, 32).unwrap().save_png(&src).unwrap();
    r.render(32, 32).unwrap().save_png(&reference).unwrap();
    (src.to_string_lossy().into(), reference.to_string_lossy().into())
}

const FAST: &[&str] = &["--steps", "4", "--pti-total-steps", "8", "--mci-steps", "2", "--mci-batch", "2"];

#[test]
fn eval_scores_an_image_against_itself() {
    let tmp = tempfile::tempdir().unwrap();
    let (src, reference) = pair(tmp.path());
    let rd = tmp.path().join("eval");
    let out = run(&["--run-dir", rd.to_str().unwrap(), "eval", "--output", &src, "--source", &src, "--reference", &reference]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(rd.join("eval.json")).unwrap()).unwrap();
    assert_eq!(m["structure_iou"], 1.0);
    assert!(RunDir::create(&rd).unwrap().verify_manifest().unwrap().is_empty());
}

#[test]
fn strict_translate_requires_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (src, reference) = pair(tmp.path());
    let ck = fixture();
    let rd = tmp.path().join("run");
    let out = run(&[
        "--strict", "--run-dir", rd.to_str().unwrap(), "translate", "--checkpoint", ck.to_str().unwrap(),
        "--source", &src, "--reference", &reference,
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
}

#[test]
fn invalid_settings_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let (src, _) = pair(tmp.path());
    let ck = fixture();
    let rd = tmp.path().join("run");
    let out = run(&[
        "--run-dir", rd.to_str().unwrap(), "reconstruct", "--checkpoint", ck.to_str().unwrap(), "--source", &src,
        "--w", "0.5",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let missing = run(&["--run-dir", rd.to_str().unwrap(), "reconstruct", "--checkpoint", "/nonexistent.cs", "--source", &src]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, reference) = pair(tmp.path());
    let ck = fixture();
    let rd = tmp.path().join("run");
    // A step size this large sends the embedding to infinity on the first update.
    let out = run(&[
        "--run-dir", rd.to_str().unwrap(), "invert-concept", "--checkpoint", ck.to_str().unwrap(),
        "--reference", &reference, "--mci-steps", "3", "--mci-batch", "1", "--mci-lr", "1e300",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn translate_writes_artifacts_caches_inversions_and_replays() {
    let tmp = tempfile::tempdir().unwrap();
    let (src, reference) = pair(tmp.path());
    let ck = fixture();
    let cache = tmp.path().join("cache");
    let go = |rd: &Path, extra: &[&str]| {
        let mut args = vec![
            "--strict", "--run-dir", rd.to_str().unwrap(), "translate", "--checkpoint", ck.to_str().unwrap(),
            "--source", &src, "--reference", &reference, "--seed", "3", "--cache", cache.to_str().unwrap(),
        ];
        args.extend_from_slice(FAST);
        args.extend_from_slice(extra);
        let out = run(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8_lossy(&out.stderr).into_owned()
    };

    let first = tmp.path().join("first");
    let log = go(&first, &[]);
    assert!(log.contains("concept inversion computed") && log.contains("content inversion computed"));
    for f in ["target.png", "reconstruction.png", "concept.cs", "content.cs", "diagnostics.json", "metrics.json", "config.toml"] {
        assert!(first.join(f).exists(), "missing {f}");
    }
    assert!(RunDir::create(&first).unwrap().verify_manifest().unwrap().is_empty());

    let second = tmp.path().join("second");
    let log = go(&second, &[]);
    assert!(log.contains("concept inversion cached") && log.contains("content inversion cached"));
    let target = |d: &Path| std::fs::read(d.join("target.png")).unwrap();
    assert_eq!(target(&first), target(&second));

    let third = tmp.path().join("third");
    let concept = first.join("concept.cs");
    let content = first.join("content.cs");
    go(&third, &["--concept", concept.to_str().unwrap(), "--content", content.to_str().unwrap()]);
    assert_eq!(target(&first), target(&third));

    // The saved config alone reproduces the run.
    let fourth = tmp.path().join("fourth");
    let cfg = first.join("config.toml");
    let out = run(&[
        "--strict", "--config", cfg.to_str().unwrap(), "--run-dir", fourth.to_str().unwrap(), "translate",
        "--checkpoint", ck.to_str().unwrap(), "--source", &src, "--reference", &reference,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(target(&first), target(&fourth));
}

#[test]
fn train_backbone_writes_a_loadable_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let rd = tmp.path().join("train");
    let out = run(&[
        "--strict", "--run-dir", rd.to_str().unwrap(), "train-backbone", "--steps", "2", "--samples", "4",
        "--batch-size", "2", "--seed", "9",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ck = conceptshift::pipeline::store::load_checkpoint(&rd.join("backbone.cs")).unwrap();
    assert_eq!(ck.extra["recipe"]["train"]["steps"], 2);
    let losses: Vec<f64> = serde_json::from_slice(&std::fs::read(rd.join("train_losses.json")).unwrap()).unwrap();
    assert_eq!(losses.len(), 2);

    let unseeded = run(&["--strict", "--run-dir", rd.to_str().unwrap(), "train-backbone", "--steps", "1"]);
    assert_eq!(unseeded.status.code(), Some(2));
}
