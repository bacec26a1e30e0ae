//! End-to-end tests of the `mvpt` binary: exit codes, strict config parsing,
//! output collision handling, and the gen -> pretrain -> finetune -> eval
//! pipeline.

use std::path::Path;
use std::process::{Command, Output};

fn mvpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvpt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, data_dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        r#"
seed = 5

[gen]
count = 6

[gen.config]
seed = 5
num_modalities = 2
noise_sigma = 0.02

[gen.config.dims]
d = 16
h = 16
w = 16

[gen.config.blobs]
radius_range = [3.0, 6.0]
center_jitter = 1.5

[gen.config.lesion]
radius_range = [2.0, 3.5]

[pretrain]
dataset = "{data}"

[pretrain.config]
epochs = 1
batch_size = 2
seed = 5

[pretrain.config.net]
stage_channels = [4, 8]
strides = [2, 2]
embed_dim = 8

[finetune]
dataset = "{data}"
init = "scratch"

[finetune.config]
epochs = 4
seed = 5

[finetune.config.net]
stage_channels = [4, 8]
strides = [2, 2]
embed_dim = 8

[eval]
checkpoint = "{ft}/model_final.mvpc"
dataset = "{data}"
split = "test"

[label_efficiency]
dataset = "{data}"
seeds = [1]

[label_efficiency.config]
epochs = 1
label_fractions = [1.0]

[label_efficiency.config.net]
stage_channels = [4, 8]
strides = [2, 2]
embed_dim = 8
"#,
        data = data_dir.display(),
        ft = data_dir.parent().unwrap().join("ft").display(),
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn full_pipeline_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cfg = write_config(tmp.path(), &data);
    let cfg_s = cfg.to_str().unwrap();

    // gen
    let out = mvpt(&["gen", "--config", cfg_s, "--out", data.to_str().unwrap()]);
    assert!(out.status.success(), "gen failed: {}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("manifest.json").exists());

    // pretrain writes a run manifest, checkpoint, templates and log.
    let pre = tmp.path().join("pre");
    let out = mvpt(&["pretrain", "--config", cfg_s, "--out", pre.to_str().unwrap()]);
    assert!(out.status.success(), "pretrain failed: {}", String::from_utf8_lossy(&out.stderr));
    for file in [
        "run_manifest.json",
        "model_final.mvpc",
        "runlog.tsv",
        "runlog_summary.json",
        "manifest.tsv",
    ] {
        assert!(pre.join(file).exists(), "missing {file}");
    }
    assert!(pre.join("templates_final").join("t1.mvpv").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(pre.join("run_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "pretrain");
    assert!(manifest["finished_at_unix"].is_u64());

    // export-templates copies the trajectory.
    let exp = tmp.path().join("exported");
    let out = mvpt(&[
        "export-templates",
        "--from",
        pre.to_str().unwrap(),
        "--out",
        exp.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "export failed: {}", String::from_utf8_lossy(&out.stderr));
    assert!(exp.join("manifest.tsv").exists());
    assert!(exp.join("templates/t1/0.mvpv").exists());

    // finetune from the pretrain directory.
    let ft = tmp.path().join("ft");
    let patched = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("init = \"scratch\"", &format!("init = \"{}\"", pre.display()));
    std::fs::write(&cfg, patched).unwrap();
    let out = mvpt(&["finetune", "--config", cfg_s, "--out", ft.to_str().unwrap()]);
    assert!(out.status.success(), "finetune failed: {}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ft.join("metrics.json")).unwrap()).unwrap();
    let dice = metrics["dice_mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&dice));

    // eval reproduces a report from the saved checkpoint.
    let out = mvpt(&["eval", "--config", cfg_s]);
    assert!(out.status.success(), "eval failed: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("segmentation"), "unexpected eval output: {stdout}");

    // label-efficiency writes the curve.
    let le = tmp.path().join("le");
    let out = mvpt(&[
        "label-efficiency",
        "--config",
        cfg_s,
        "--out",
        le.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "label-efficiency failed: {}", String::from_utf8_lossy(&out.stderr));
    let curve = std::fs::read_to_string(le.join("curve.tsv")).unwrap();
    assert!(curve.starts_with("init\tfraction"));
    assert!(curve.contains("scratch"));
}

#[test]
fn pretrain_is_deterministic_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cfg = write_config(tmp.path(), &data);
    let cfg_s = cfg.to_str().unwrap();
    assert!(mvpt(&["gen", "--config", cfg_s, "--out", data.to_str().unwrap()])
        .status
        .success());

    let sha_of = |dir: &Path| -> String {
        let summary: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.join("runlog_summary.json")).unwrap(),
        )
        .unwrap();
        summary["checkpoint_sha256"].as_str().unwrap().to_string()
    };
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let out = mvpt(&[
            "pretrain",
            "--config",
            cfg_s,
            "--out",
            dir.to_str().unwrap(),
            "--workers",
            "1",
        ]);
        assert!(out.status.success());
    }
    assert_eq!(sha_of(&a), sha_of(&b), "checkpoint hashes differ");
    // Bit-identical run logs as well.
    assert_eq!(
        std::fs::read(a.join("runlog.tsv")).unwrap(),
        std::fs::read(b.join("runlog.tsv")).unwrap()
    );
}

#[test]
fn unknown_config_keys_are_rejected_with_usage_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[gen]\ncount = 4\nbogus_key = 1\n").unwrap();
    let out = mvpt(&[
        "gen",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bogus_key") || err.contains("unknown field"), "stderr: {err}");
}

#[test]
fn missing_inputs_and_sections_report_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    // No [pretrain] section.
    let cfg = tmp.path().join("gen_only.toml");
    std::fs::write(&cfg, "[gen]\ncount = 2\n").unwrap();
    let out = mvpt(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));

    // Missing dataset path is reported with the path.
    let cfg2 = tmp.path().join("missing_data.toml");
    std::fs::write(
        &cfg2,
        "[pretrain]\ndataset = \"/nonexistent/data\"\n",
    )
    .unwrap();
    let out = mvpt(&[
        "pretrain",
        "--config",
        cfg2.to_str().unwrap(),
        "--out",
        tmp.path().join("o2").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/data"));

    // Unknown subcommand and bad flags are usage errors too.
    let out = mvpt(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn out_collision_requires_force() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cfg = write_config(tmp.path(), &data);
    let cfg_s = cfg.to_str().unwrap();
    assert!(mvpt(&["gen", "--config", cfg_s, "--out", data.to_str().unwrap()])
        .status
        .success());
    // Second run into the same directory refuses without --force.
    let out = mvpt(&["gen", "--config", cfg_s, "--out", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    // And succeeds with it, reproducing identical bytes.
    let before = std::fs::read(data.join("manifest.json")).unwrap();
    let out = mvpt(&[
        "gen", "--config", cfg_s, "--out", data.to_str().unwrap(), "--force",
    ]);
    assert!(out.status.success());
    assert_eq!(before, std::fs::read(data.join("manifest.json")).unwrap());
}

#[test]
fn gen_workers_do_not_change_the_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let data1 = tmp.path().join("w1");
    let data2 = tmp.path().join("w2");
    let cfg = write_config(tmp.path(), &data1);
    let cfg_s = cfg.to_str().unwrap();
    assert!(mvpt(&["gen", "--config", cfg_s, "--out", data1.to_str().unwrap()])
        .status
        .success());
    assert!(mvpt(&[
        "gen", "--config", cfg_s, "--out", data2.to_str().unwrap(), "--workers", "2",
    ])
    .status
    .success());
    let v1 = std::fs::read(data1.join("studies/s0003/t1.mvpv")).unwrap();
    let v2 = std::fs::read(data2.join("studies/s0003/t1.mvpv")).unwrap();
    assert_eq!(v1, v2);
}

#[test]
fn eval_on_perfect_oracle_predictions_reports_dice_one() {
    // Lesion-free targets: fine-tuning quickly learns to predict the empty
    // mask, and dice(empty, empty) is defined as 1.0.
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cfg_path = write_config(tmp.path(), &data);
    let patched = std::fs::read_to_string(&cfg_path)
        .unwrap()
        .replace(
            "radius_range = [2.0, 3.5]",
            "radius_range = [2.0, 3.5]\npresence_prob = 0.0",
        )
        .replace("epochs = 4", "epochs = 8");
    std::fs::write(&cfg_path, patched).unwrap();
    let cfg_s = cfg_path.to_str().unwrap();
    assert!(mvpt(&["gen", "--config", cfg_s, "--out", data.to_str().unwrap()])
        .status
        .success());
    let ft = tmp.path().join("ft");
    let out = mvpt(&["finetune", "--config", cfg_s, "--out", ft.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = mvpt(&["eval", "--config", cfg_s]);
    assert!(out.status.success());
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ft.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["dice_mean"].as_f64().unwrap(), 1.0);
}
