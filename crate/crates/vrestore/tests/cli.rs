//! End-to-end CLI smoke test: prepare-data -> train-stage1 -> train-stage2
//! -> infer -> evaluate -> report, all at a tiny budget, plus clobber and
//! missing-prerequisite behavior.

use std::path::Path;
use std::process::Command;

fn vrestore() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vrestore"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn vrestore");
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(
        out.status.success(),
        "command failed\nstdout: {stdout}\nstderr: {stderr}"
    );
    stdout
}

fn run_fail(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn vrestore");
    assert!(!out.status.success(), "command unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).to_string()
}

fn write_config(root: &Path) -> std::path::PathBuf {
    use vrestore::config::{RunConfig, SynthSpec};
    use vrestore::train::{LossKind, Phase, PhasePlan};

    // Tiny everything: 4 sequences of 8 frames at 24x24, two 6-iteration
    // training phases, minimal Stage II.
    let mut cfg = RunConfig::toy_default(root);
    cfg.dataset.synth = Some(SynthSpec {
        sequences: 4,
        height: 24,
        width: 24,
        frames: 8,
    });
    cfg.dataset.val_sequences = 1;
    cfg.stage1.channels = 8;
    cfg.stage1.extract_blocks = 1;
    cfg.stage1.rec_group_sizes = vec![1, 1, 1, 1, 1, 1];
    cfg.stage1.active_groups = 1;
    cfg.stage1.flow.pyramid_levels = 2;
    cfg.stage1.flow.channels = 8;
    cfg.stage2.embed_dim = 8;
    cfg.stage2.window_size = 4;
    cfg.stage2.depths = vec![1];
    cfg.stage2.heads = vec![2];
    let phase = |k| Phase {
        k,
        iterations: 6,
        loss: LossKind::Charbonnier,
        lr0: 1e-3,
        warmup_fraction: 0.1,
        period: 6,
    };
    cfg.plan = Some(PhasePlan {
        phases: vec![phase(1), phase(2)],
    });
    cfg.train.batch_size = 1;
    cfg.train.patch_size = 16;
    cfg.train.t_len = 3;
    cfg.train.log_interval = 5;
    cfg.stage2_train.solo_iterations = 4;
    cfg.stage2_train.joint_iterations = 2;
    cfg.stage2_train.frame_stride = 8;
    cfg.stage2_train.patch_size = 16;
    cfg.stage2_train.val_interval = 2;
    let path = root.join("run.json");
    cfg.save(&path).unwrap();
    path
}

#[test]
fn full_pipeline_via_cli() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = write_config(root);
    let cfg_arg = cfg.to_str().unwrap();

    // Training before data preparation is a missing-prerequisite error.
    let err = run_fail(vrestore().args(["--config", cfg_arg, "train-stage1"]));
    assert!(err.contains("prepare-data"), "unexpected error: {err}");

    let out = run_ok(vrestore().args(["--config", cfg_arg, "prepare-data"]));
    assert!(out.contains("3 train / 1 val"), "{out}");
    assert!(root.join("data/manifest.json").exists());
    assert!(root.join("data/gt").join("seq000").join("frame_00001.png").exists());

    // Re-running without --overwrite refuses to clobber.
    let err = run_fail(vrestore().args(["--config", cfg_arg, "prepare-data"]));
    assert!(err.contains("overwrite"), "unexpected error: {err}");
    run_ok(vrestore().args(["--config", cfg_arg, "--overwrite", "prepare-data"]));

    let out = run_ok(vrestore().args(["--config", cfg_arg, "train-stage1"]));
    assert!(out.contains("phase 1"), "{out}");
    assert!(out.contains("phase 2"), "{out}");
    assert!(root.join("out/stage1/metrics.csv").exists());

    let out = run_ok(vrestore().args([
        "--config",
        cfg_arg,
        "train-stage2",
        "--pretrain-budget",
        "2",
    ]));
    assert!(out.contains("stage2"), "{out}");
    assert!(root.join("out/stage2/stage2.ckpt").exists());
    assert!(root.join("out/stage2/denoiser.ckpt").exists());

    run_ok(vrestore().args(["--config", cfg_arg, "infer", "--tta", "none"]));
    assert!(root.join("out/pred/seq003/frame_00001.png").exists());

    let out = run_ok(vrestore().args(["--config", cfg_arg, "evaluate", "--mode", "all"]));
    assert!(out.contains("aggregate:"), "{out}");
    let summary = root.join("out/eval/summary.csv");
    assert!(summary.exists());
    assert!(root.join("out/eval/per_frame.csv").exists());

    let out = run_ok(vrestore().args(["report", summary.to_str().unwrap()]));
    assert!(out.contains("Avg."), "{out}");

    // Config overrides via --set reach the parsed config.
    let err = run_fail(vrestore().args([
        "--config",
        cfg_arg,
        "--set",
        "profile.gop_period=1",
        "prepare-data",
    ]));
    assert!(err.contains("gop_period"), "unexpected error: {err}");
}

#[test]
fn infer_with_tta_and_explicit_model() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = write_config(root);
    let cfg_arg = cfg.to_str().unwrap();
    run_ok(vrestore().args(["--config", cfg_arg, "prepare-data"]));
    run_ok(vrestore().args(["--config", cfg_arg, "train-stage1"]));
    // Self-ensemble in both stages, explicit checkpoint path.
    let ckpt = std::fs::read_dir(root.join("out/stage1"))
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "ckpt").unwrap_or(false))
        .max()
        .unwrap();
    run_ok(vrestore().args([
        "--config",
        cfg_arg,
        "infer",
        "--models",
        ckpt.to_str().unwrap(),
        "--tta",
        "both",
    ]));
    assert!(root.join("out/pred/seq003/frame_00008.png").exists());
}
