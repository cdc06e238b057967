use std::path::{Path, PathBuf};

use tempfile::TempDir;

fn stylekit(args: &[&str]) -> anyhow::Result<()> {
    stylekit_cli::run(std::iter::once("stylekit").chain(args.iter().copied()))
}

fn err_text(args: &[&str]) -> String {
    match stylekit(args) {
        Ok(()) => panic!("`stylekit {}` should fail", args.join(" ")),
        Err(e) => format!("{e:#}"),
    }
}

struct Workspace {
    _dir: TempDir,
    fixtures: PathBuf,
    run: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let fixtures = dir.path().join("fixtures");
        let run = dir.path().join("run");
        stylekit(&["synth-fixtures", "--out", s(&fixtures), "--per-style", "3", "--size", "32"]).unwrap();
        Self { _dir: dir, fixtures, run }
    }

    fn verb(&self, args: &[&str]) -> anyhow::Result<()> {
        let mut all = vec!["--run-dir", s(&self.run)];
        all.extend_from_slice(args);
        stylekit(&all)
    }

    fn build(&self, extra: &[&str]) {
        let mut args = vec!["build-dataset", "--images", s(&self.fixtures)];
        args.extend_from_slice(extra);
        self.verb(&args).unwrap();
    }

    fn reference(&self) -> PathBuf {
        self.fixtures.join("hue").join("hue_00.png")
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn manifest_is_deterministic() {
    let ws = Workspace::new();
    let manifest = ws.run.join("build-dataset/outputs/manifest.ndjson");
    ws.build(&[]);
    let first = std::fs::read(&manifest).unwrap();
    std::fs::remove_dir_all(&ws.run).unwrap();
    ws.build(&[]);
    assert_eq!(first, std::fs::read(&manifest).unwrap());
    let text = String::from_utf8(first).unwrap();
    assert_eq!(text.lines().count(), 9);
    assert!(text.lines().all(|l| l.contains("in the style of [*].")));
    assert!(ws.run.join("build-dataset/config.toml").is_file());
}

#[test]
fn stages_refuse_to_run_without_prerequisites() {
    let ws = Workspace::new();
    let msg = err_text(&["--run-dir", s(&ws.run), "invert"]);
    assert!(msg.contains("build-dataset"), "{msg}");

    ws.build(&[]);
    let msg = ws.verb(&["finetune"]).unwrap_err().to_string();
    assert!(msg.contains("pretrain-encoder"), "{msg}");

    ws.verb(&["pretrain-encoder", "--epochs", "1"]).unwrap();
    let msg = ws.verb(&["pretrain-projection"]).unwrap_err().to_string();
    assert!(msg.contains("invert"), "{msg}");
    let msg = ws.verb(&["finetune"]).unwrap_err().to_string();
    assert!(msg.contains("pretrain-projection"), "{msg}");
    assert!(!ws.run.join("finetune/checkpoints/encoder.safetensors").exists());
}

#[test]
fn generate_and_evaluate_report_missing_checkpoints() {
    let ws = Workspace::new();
    ws.build(&[]);
    let r = ws.reference();
    let msg = format!("{:#}", ws.verb(&["generate", "--reference", s(&r), "--prompt", "a cat"]).unwrap_err());
    assert!(msg.contains("missing style encoder"), "{msg}");

    let msg = format!("{:#}", ws.verb(&["evaluate"]).unwrap_err());
    assert!(msg.contains("referee"), "{msg}");

    ws.verb(&["pretrain-encoder", "--epochs", "1"]).unwrap();
    ws.verb(&["finetune-ablation", "--epochs", "1"]).unwrap();
    let msg = format!("{:#}", ws.verb(&["evaluate", "--source", "ablation", "--checkpoint", "epoch-7"]).unwrap_err());
    assert!(msg.contains("epoch-007"), "{msg}");
    let msg = format!("{:#}", ws.verb(&["evaluate", "--checkpoint", "latest"]).unwrap_err());
    assert!(msg.contains("checkpoint selection"), "{msg}");
}

#[test]
fn split_refuses_a_test_set_missing_a_tag() {
    let ws = Workspace::new();
    let msg =
        format!("{:#}", ws.verb(&["build-dataset", "--images", s(&ws.fixtures), "--test-size", "0"]).unwrap_err());
    assert!(msg.contains("distinct tags"), "{msg}");
}

#[test]
fn evaluate_rejects_empty_test_split() {
    let ws = Workspace::new();
    ws.build(&[]);
    let built = std::fs::read_to_string(ws.run.join("build-dataset/outputs/manifest.ndjson")).unwrap();
    let external = ws.run.with_file_name("all-train.ndjson");
    std::fs::write(&external, built.replace("\"split\":\"test\"", "\"split\":\"train\"")).unwrap();
    let cfg = ws.run.with_file_name("external.toml");
    std::fs::write(&cfg, "[data]\nmanifest = \"all-train.ndjson\"\n").unwrap();
    let msg = format!("{:#}", stylekit(&["--config", s(&cfg), "--run-dir", s(&ws.run), "evaluate"]).unwrap_err());
    assert!(msg.contains("empty test split"), "{msg}");
}

#[test]
fn full_mode_without_credentials_fails_before_work() {
    let ws = Workspace::new();
    let cfg = ws.run.with_file_name("full.toml");
    std::fs::write(&cfg, "mode = \"full\"\n[captioner]\nkey_env = \"STYLEKIT_TEST_UNSET_KEY\"\n").unwrap();
    let msg = format!(
        "{:#}",
        stylekit(&["--config", s(&cfg), "--run-dir", s(&ws.run), "build-dataset", "--images", s(&ws.fixtures)])
            .unwrap_err()
    );
    assert!(msg.contains("STYLEKIT_TEST_UNSET_KEY"), "{msg}");
    assert!(!ws.run.exists(), "no stage directory should be created");

    let msg = format!("{:#}", stylekit(&["--mode", "full", "--run-dir", s(&ws.run), "pretrain-encoder"]).unwrap_err());
    assert!(msg.contains("full mode") || msg.contains("manifest"), "{msg}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "sede = 3\n").unwrap();
    let msg = format!("{:#}", stylekit(&["--config", s(&cfg), "synth-fixtures", "--out", "x"]).unwrap_err());
    assert!(msg.contains("sede"), "{msg}");
}

#[test]
fn generation_is_reproducible_and_replayable() {
    let ws = Workspace::new();
    ws.build(&[]);
    ws.verb(&["pretrain-encoder", "--epochs", "2"]).unwrap();
    ws.verb(&["finetune-ablation", "--epochs", "1"]).unwrap();
    let r = ws.reference();
    let out = |name: &str| ws.run.with_file_name(name);
    for (name, seed) in [("a.png", "5"), ("b.png", "5"), ("c.png", "6")] {
        ws.verb(&[
            "--seed",
            seed,
            "generate",
            "--reference",
            s(&r),
            "--prompt",
            "a cat",
            "--source",
            "ablation",
            "--steps",
            "10",
            "--out",
            s(&out(name)),
        ])
        .unwrap();
    }
    let a = std::fs::read(out("a.png")).unwrap();
    assert_eq!(a, std::fs::read(out("b.png")).unwrap());
    assert_ne!(a, std::fs::read(out("c.png")).unwrap());

    let sidecar = out("a.json");
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&sidecar).unwrap()).unwrap();
    assert_eq!(side["request"]["prompt"], "a cat in the style of [*].");
    assert_eq!(side["request"]["seed"], 5);
    ws.verb(&["generate", "--replay", s(&sidecar)]).unwrap();

    // A replay against a different backbone is refused.
    let msg = format!(
        "{:#}",
        stylekit(&[
            "--run-dir",
            s(&ws.run),
            "--config",
            s(&toy_seed_config(&ws, 9)),
            "generate",
            "--replay",
            s(&sidecar)
        ])
        .unwrap_err()
    );
    assert!(msg.contains("does not match"), "{msg}");
}

fn toy_seed_config(ws: &Workspace, seed: u64) -> PathBuf {
    let path = ws.run.with_file_name("other-backbone.toml");
    std::fs::write(&path, format!("[backbone]\ntoy_seed = {seed}\n")).unwrap();
    path
}
