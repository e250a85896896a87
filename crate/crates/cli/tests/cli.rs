use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 10] = [
    "--set",
    "dataset.train_scenes=2",
    "--set",
    "dataset.test_scenes=2",
    "--set",
    "train.stage1.epochs=2",
    "--set",
    "train.stage2.epochs=1",
    "--set",
    "train.stage3.epochs=1",
];

fn relifusion(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relifusion"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str], out: &Path) -> String {
    let o = relifusion(args, out);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn with_small<'a>(cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd];
    v.extend_from_slice(&SMALL);
    v.extend_from_slice(extra);
    v
}

#[test]
fn empty_dataset_writes_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(
        &[
            "synth",
            "--set",
            "dataset.train_scenes=0",
            "--set",
            "dataset.test_scenes=0",
        ],
        dir.path(),
    );
    let manifest = std::fs::read_to_string(dir.path().join("data/manifest.toml")).unwrap();
    assert!(manifest.contains("train = []"), "{manifest}");
    assert!(manifest.contains("test = []"), "{manifest}");
}

#[test]
fn synth_is_byte_stable_and_counts_scenes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        run_ok(&with_small("synth", &[]), d.path());
    }
    let manifest = std::fs::read_to_string(a.path().join("data/manifest.toml")).unwrap();
    assert_eq!(manifest.matches("train/scene_").count(), 2);
    for rel in [
        "data/manifest.toml",
        "data/train/scene_0001/frame_2.rfpc",
        "data/test/scene_0000/frame_0.rfvw",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(rel)).unwrap(),
            std::fs::read(b.path().join(rel)).unwrap(),
            "{rel}"
        );
    }
}

#[test]
fn stage_one_alone_then_the_rest() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&with_small("synth", &[]), dir.path());
    run_ok(&with_small("train", &["--stage", "1"]), dir.path());
    assert!(dir.path().join("checkpoints/stage1.rfck").exists());
    assert!(!dir.path().join("checkpoints/stage2.rfck").exists());
    let curves = std::fs::read_to_string(dir.path().join("curves_stage1.csv")).unwrap();
    // weights line, column header, one row per epoch
    assert_eq!(curves.lines().count(), 2 + 2);

    run_ok(&with_small("train", &["--stage", "2"]), dir.path());
    run_ok(&with_small("train", &["--stage", "3"]), dir.path());
    let curves = std::fs::read_to_string(dir.path().join("curves_stage3.csv")).unwrap();
    assert!(curves.starts_with("# weights detection=1 contrastive=0.1 temporal=0.2 confidence=0.05\n"));

    let text = run_ok(&with_small("sweep", &["--scenarios", "standard"]), dir.path());
    let rows: Vec<&str> = text
        .lines()
        .skip(1)
        .take(8)
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    assert_eq!(
        rows,
        [
            "clean",
            "fov_pi_2",
            "fov_pi_3",
            "fov_0",
            "drop_50",
            "missing_front",
            "preserve_front",
            "occlusion_50"
        ]
    );
    let csv = std::fs::read_to_string(dir.path().join("robustness.csv")).unwrap();
    assert!(csv.starts_with("scenario,class,AP,mAP,mATE\nclean,car,"));

    run_ok(&with_small("eval", &[]), dir.path());
    assert!(dir.path().join("eval.csv").exists());
    assert!(dir.path().join("detections/scene_0000.txt").exists());
}

#[test]
fn custom_scenario_file_keeps_its_order() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&with_small("synth", &[]), dir.path());
    run_ok(&with_small("train", &["--stage", "1"]), dir.path());
    let table = dir.path().join("table.toml");
    std::fs::write(
        &table,
        "[[scenario]]\nname = \"zeta\"\nkind = \"object_drop\"\nrate = 0.25\nseed = 4\n\n\
         [[scenario]]\nname = \"alpha\"\nkind = \"none\"\nseed = 0\n",
    )
    .unwrap();
    let text = run_ok(
        &with_small("sweep", &["--scenarios", table.to_str().unwrap()]),
        dir.path(),
    );
    let names: Vec<&str> = text
        .lines()
        .skip(1)
        .take(2)
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    assert_eq!(names, ["zeta", "alpha"]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| relifusion(args, dir.path()).status.code();
    assert_eq!(code(&["synth", "--set", "model.no_such_key=1"]), Some(1));
    assert_eq!(code(&["synth", "--set", "eval.iou=3"]), Some(1));
    assert_eq!(code(&["synth", "--config", "/nonexistent/cfg.toml"]), Some(1));
    assert_eq!(code(&["train"]), Some(1), "no dataset yet");
    assert_eq!(code(&["frobnicate"]), Some(1));
    run_ok(&with_small("synth", &[]), dir.path());
    run_ok(&with_small("train", &["--stage", "1"]), dir.path());
    assert_eq!(code(&["sweep", "--scenarios", "/nonexistent/table.toml"]), Some(1));
    assert_eq!(code(&["sweep", "--ablation", "everything"]), Some(1));
    assert_eq!(code(&["train", "--stage", "4"]), Some(1));
}

#[test]
fn config_file_and_overrides_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, "seed = 3\n[dataset]\ntrain_scenes = 1\ntest_scenes = 0\n").unwrap();
    run_ok(
        &[
            "synth",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "dataset.test_scenes=1",
        ],
        dir.path(),
    );
    let manifest = std::fs::read_to_string(dir.path().join("data/manifest.toml")).unwrap();
    assert!(manifest.contains("seed = 3"), "{manifest}");
    assert_eq!(manifest.matches("test/scene_").count(), 1);
    let resolved = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert!(resolved.contains("test_scenes = 1"));
}

#[test]
fn selftest_passes_and_reports_modules() {
    let o = Command::new(env!("CARGO_BIN_EXE_relifusion"))
        .arg("selftest")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("max relative error per module:"));
    for m in [
        "autodiff",
        "attention",
        "bev",
        "stfa",
        "reliability",
        "fusion",
        "head",
        "pipeline",
    ] {
        assert!(text.contains(&format!("  {m}")), "{m} missing from\n{text}");
    }
    assert!(text.contains(" 0 failed"));
}
