use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cascade_core::checkpoint;

const TINY: &str = r#"{
  "unet": {"base_channels": 8, "levels": 2, "blocks_per_level": 1, "time_embed_dim": 16, "groupnorm_groups": 4, "num_classes": 5},
  "cascade": {"base": {"h": 16, "w": 16}, "target": {"h": 32, "w": 32}},
  "pretrain": {"steps": 3, "batch": 4},
  "train": {"steps": 3, "batch": 4, "eval_every": 3, "log_every": 1},
  "data": {"n_train": 16, "n_eval": 8},
  "eval": {"n_samples": 4, "ddim_steps": 4, "batch": 4}
}"#;

fn cascade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cascade"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).display().to_string()
    }

    fn run(&self, args: &[&str]) -> Output {
        let out = cascade(args);
        assert_eq!(code(&out), 0, "{args:?} failed: {}", stderr(&out));
        out
    }

    fn train(&self, arm: &str, init: Option<&str>, out: &str, extra: &[&str]) {
        let (cfg, out) = (self.s("tiny.json"), self.s(out));
        let mut args = vec!["train", "--config", &cfg, "--arm", arm, "--out", &out];
        let init = init.map(|p| self.s(p));
        if let Some(p) = &init {
            args.extend(["--checkpoint", p]);
        }
        args.extend(extra);
        self.run(&args);
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn usage_errors_exit_with_one() {
    let ws = Workspace::new();
    assert_eq!(code(&cascade(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&cascade(&["bogus"])), 1);

    let cfg = ws.s("tiny.json");
    let out = cascade(&["plan", "--config", &cfg, "--override", "schedule.K=5000"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("schedule.K"), "{}", stderr(&out));

    let out = cascade(&["plan", "--config", &cfg, "--override", "unet.nonexistent=3"]);
    assert_eq!(code(&out), 1);

    let out = cascade(&["train", "--config", &cfg, "--arm", "ours_t", "--out", &ws.s("runs")]);
    assert_eq!(code(&out), 1, "non-base arm without a checkpoint: {}", stderr(&out));

    let out = cascade(&["sample", "--config", &cfg, "--checkpoint", &ws.s("missing.ckpt")]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("missing.ckpt"));
}

#[test]
fn coupled_overrides_validate_after_the_last_one() {
    let ws = Workspace::new();
    let cfg = ws.s("tiny.json");
    let out = ws.run(&[
        "plan",
        "--config",
        &cfg,
        "--override",
        "cascade.target.h=64",
        "--override",
        "cascade.target.w=64",
    ]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("-> 64x64 (R = 2)"), "{text}");
}

#[test]
fn zero_steps_emit_the_initial_checkpoint() {
    let ws = Workspace::new();
    ws.train("base", None, "runs", &["--override", "pretrain.steps=0"]);
    let bytes = read(&ws.path("runs/base.ckpt"));
    let (manifest, _) = checkpoint::parse(&bytes).unwrap();
    assert_eq!(manifest.step, 0);
    assert_eq!(manifest.groups(), vec!["base".to_string()]);
    assert!(ws.path("runs/base.json").exists());
}

#[test]
fn training_and_sampling_are_deterministic() {
    let ws = Workspace::new();
    for run in ["a", "b"] {
        ws.train("base", None, run, &[]);
        ws.train("ours_t", Some(&format!("{run}/base.ckpt")), run, &[]);
        let cfg = ws.s("tiny.json");
        let ckpt = ws.s(&format!("{run}/ours_t.ckpt"));
        let out = ws.s(&format!("{run}/samples"));
        ws.run(&[
            "sample",
            "--config",
            &cfg,
            "--arm",
            "ours_t",
            "--checkpoint",
            &ckpt,
            "--n",
            "2",
            "--seed",
            "7",
            "--out",
            &out,
        ]);
    }
    for file in ["base.ckpt", "base_metrics.csv", "ours_t.ckpt", "ours_t_metrics.csv"] {
        assert_eq!(
            read(&ws.path(&format!("a/{file}"))),
            read(&ws.path(&format!("b/{file}"))),
            "{file} differs"
        );
    }
    let provenance = |run: &str| {
        let mut v: serde_json::Value = serde_json::from_slice(&read(&ws.path(&format!("{run}/samples/provenance.json")))).unwrap();
        v.as_object_mut().unwrap().remove("checkpoint");
        v
    };
    assert_eq!(provenance("a"), provenance("b"));
    let pngs: Vec<_> = fs::read_dir(ws.path("a/samples"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".png"))
        .collect();
    assert_eq!(pngs.len(), 4, "two samples, pivot and final each: {pngs:?}");
    assert!(pngs.iter().any(|n| n.contains("_stage0") && n.contains("_seed")));
    for name in &pngs {
        assert_eq!(
            read(&ws.path(&format!("a/samples/{name}"))),
            read(&ws.path(&format!("b/samples/{name}"))),
            "{name}"
        );
    }

    let csv = String::from_utf8(read(&ws.path("a/ours_t_metrics.csv"))).unwrap();
    assert!(csv.starts_with("# config_hash=") && csv.contains("code_version="));
    assert!(csv.contains(",proxy_fid_r,"));
}

#[test]
fn tuning_leaves_the_base_group_untouched() {
    let ws = Workspace::new();
    ws.train("base", None, "runs", &[]);
    ws.train("ours_t", Some("runs/base.ckpt"), "runs", &[]);
    let cfg = cascade_core::config::RunConfig::load(&ws.path("tiny.json")).unwrap();
    let (before, _) = checkpoint::load(&cfg, &ws.path("runs/base.ckpt")).unwrap();
    let (after, manifest) = checkpoint::load(&cfg, &ws.path("runs/ours_t.ckpt")).unwrap();
    assert_eq!(checkpoint::base_bytes(&before), checkpoint::base_bytes(&after));
    assert_eq!(manifest.stages(), vec![1]);
}

#[test]
fn tuning_free_needs_no_upsampler_group() {
    let ws = Workspace::new();
    ws.train("base", None, "runs", &[]);
    let cfg = ws.s("tiny.json");
    let out = ws.s("tf");
    ws.run(&[
        "sample",
        "--config",
        &cfg,
        "--arm",
        "ours_tf",
        "--checkpoint",
        &ws.s("runs/base.ckpt"),
        "--n",
        "1",
        "--out",
        &out,
    ]);
    let prov: serde_json::Value = serde_json::from_slice(&read(&ws.path("tf/provenance.json"))).unwrap();
    assert_eq!(prov["files"].as_array().unwrap().len(), 2);
    assert_eq!(prov["pivot_correlation"].as_array().unwrap().len(), 1);
}

#[test]
fn compare_single_arm_and_missing_checkpoint() {
    let ws = Workspace::new();
    ws.train("base", None, "runs", &[]);
    ws.train("ours_t", Some("runs/base.ckpt"), "runs", &[]);
    fs::write(
        ws.path("one.json"),
        r#"{"config": "tiny.json", "arms": [{"arm": "ours_t", "checkpoint": "runs/ours_t.ckpt"}]}"#,
    )
    .unwrap();
    let out = ws.s("cmp");
    ws.run(&["compare", &ws.s("one.json"), "--out", &out]);
    let csv = String::from_utf8(read(&ws.path("cmp/compare.csv"))).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    let implemented: Vec<&&str> = rows.iter().filter(|r| !r.contains("not implemented")).collect();
    assert_eq!(implemented.len(), 1, "{csv}");
    let record: serde_json::Value = serde_json::from_slice(&read(&ws.path("runs/ours_t.json"))).unwrap();
    let params = record["trainable_params"].as_u64().unwrap();
    assert!(implemented[0].starts_with(&format!("Ours-T,{params},")), "{csv}");
    assert!(csv.contains("Attn-SF") && csv.contains("n/a (not implemented)"));

    fs::write(
        ws.path("two.json"),
        r#"{"config": "tiny.json", "arms": [{"arm": "ours_t", "checkpoint": "runs/ours_t.ckpt"},
            {"arm": "full_ft", "checkpoint": "runs/full_ft.ckpt"}]}"#,
    )
    .unwrap();
    let out = cascade(&["compare", &ws.s("two.json"), "--out", &ws.s("cmp2")]);
    assert_ne!(code(&out), 0);
    assert!(stderr(&out).contains("full_ft"), "{}", stderr(&out));
}

#[test]
fn incompatible_checkpoint_names_the_tensor() {
    let ws = Workspace::new();
    ws.train("base", None, "runs", &["--override", "pretrain.steps=0"]);
    let cfg = ws.s("tiny.json");
    let out = cascade(&[
        "sample",
        "--config",
        &cfg,
        "--override",
        "unet.base_channels=12",
        "--arm",
        "ours_tf",
        "--checkpoint",
        &ws.s("runs/base.ckpt"),
        "--out",
        &ws.s("s"),
    ]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("tensor ") && err.contains("expects"), "{err}");
}

#[test]
fn eval_reports_are_reproducible() {
    let ws = Workspace::new();
    ws.train("base", None, "runs", &[]);
    let cfg = ws.s("tiny.json");
    for dir in ["e1", "e2"] {
        let out = ws.s(dir);
        ws.run(&[
            "eval",
            "--config",
            &cfg,
            "--arm",
            "ours_tf",
            "--checkpoint",
            &ws.s("runs/base.ckpt"),
            "--out",
            &out,
        ]);
    }
    assert_eq!(read(&ws.path("e1/metrics.csv")), read(&ws.path("e2/metrics.csv")));
}
