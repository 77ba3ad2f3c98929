use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use volrope::align::MaskVolume;

const FINDINGS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures/train_7_a_1.json");
const GOLDENS: &str = concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../core/tests/fixtures/compose_goldens.json"
);

fn volrope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volrope"))
        .args(args)
        .env_remove("VOLROPE_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = volrope(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Short synthetic studies so training and evaluation stay fast.
fn dataset(dir: &Path, count: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("ds_{count}_{seed}"));
    ok(&[
        "synth",
        "--out",
        s(&out),
        "--count",
        &count.to_string(),
        "--seed",
        &seed.to_string(),
        "--set",
        "synth.slices_min=32",
        "--set",
        "synth.slices_max=40",
    ]);
    out
}

fn files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

fn loss_rows(path: &Path) -> Vec<(usize, f64, f64)> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,loss,lr,wall_ms"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect()
}

fn train(dataset: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--dataset", s(dataset), "--out", s(out), "--batch-size", "4"];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn synth_reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let a = dataset(tmp.path(), 4, 7);
    let b = tmp.path().join("again");
    ok(&[
        "synth",
        "--out",
        s(&b),
        "--count",
        "4",
        "--seed",
        "7",
        "--set",
        "synth.slices_min=32",
        "--set",
        "synth.slices_max=40",
    ]);
    assert_eq!(files(&a), files(&b));
    assert_eq!(files(&a).len(), 4 * 3 + 2);
    for f in files(&a).iter().filter(|f| *f != "run_config.toml") {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn synth_manifest_counts_studies() {
    let tmp = TempDir::new().unwrap();
    for n in [0usize, 3] {
        let dir = dataset(tmp.path(), n, 1);
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["studies"].as_array().unwrap().len(), n);
        assert!(dir.join("run_config.toml").exists());
    }
}

#[test]
fn resolved_config_is_persisted_and_reloadable() {
    let tmp = TempDir::new().unwrap();
    let dir = dataset(tmp.path(), 1, 5);
    let text = std::fs::read_to_string(dir.join("run_config.toml")).unwrap();
    let doc: toml::Table = text.parse().unwrap();
    assert_eq!(doc["data"]["studies"].as_integer(), Some(1));
    assert_eq!(doc["data"]["seed"].as_integer(), Some(5));
    assert_eq!(doc["synth"]["slices_max"].as_integer(), Some(40));
    assert_eq!(doc["output_dir"].as_str(), Some(s(&dir)));
    // the persisted file is itself a valid configuration
    let again = tmp.path().join("again");
    ok(&["synth", "--config", s(&dir.join("run_config.toml")), "--out", s(&again)]);
    assert_eq!(
        std::fs::read(dir.join("manifest.json")).unwrap(),
        std::fs::read(again.join("manifest.json")).unwrap()
    );
}

#[test]
fn json_config_is_accepted() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{"data": {"studies": 2, "seed": 4}, "synth": {"slices_min": 32, "slices_max": 36}}"#,
    )
    .unwrap();
    let out = tmp.path().join("ds");
    ok(&["synth", "--config", s(&cfg), "--out", s(&out)]);
    assert!(out.join("synth_0001.vol").exists());
    assert!(!out.join("synth_0002.vol").exists());
}

#[test]
fn output_dir_precedence_is_flag_then_env_then_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.toml");
    let from_cfg = tmp.path().join("from_cfg");
    let from_env = tmp.path().join("from_env");
    let from_flag = tmp.path().join("from_flag");
    std::fs::write(&cfg, format!("output_dir = {:?}\n[data]\nstudies = 1\n", s(&from_cfg))).unwrap();
    let run = |env: bool, flag: bool| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_volrope"));
        c.args(["synth", "--config", s(&cfg)]).env_remove("VOLROPE_OUT_DIR");
        if env {
            c.env("VOLROPE_OUT_DIR", &from_env);
        }
        if flag {
            c.args(["--out", s(&from_flag)]);
        }
        assert!(c.status().unwrap().success());
    };
    run(false, false);
    assert!(from_cfg.join("manifest.json").exists());
    run(true, false);
    assert!(from_env.join("manifest.json").exists());
    run(true, true);
    assert!(from_flag.join("manifest.json").exists());
}

#[test]
fn unknown_config_keys_exit_with_validation_code() {
    let tmp = TempDir::new().unwrap();
    let out = volrope(&["synth", "--out", s(tmp.path()), "--set", "data.studys=2"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("studys"), "{}", stderr(&out));

    let cfg = tmp.path().join("typo.toml");
    std::fs::write(&cfg, "[model]\nchanels = 16\n").unwrap();
    let out = volrope(&["synth", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("chanels"), "{}", stderr(&out));
}

#[test]
fn io_failures_exit_with_io_code() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("missing");
    let out = volrope(&["train", "--dataset", s(&missing), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("missing"), "{}", stderr(&out));

    // output directory path is occupied by a file
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let out = volrope(&["synth", "--out", s(&blocker.join("sub")), "--count", "1"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn bad_arguments_exit_with_validation_code() {
    assert_eq!(code(&volrope(&["train"])), 1);
    assert_eq!(code(&volrope(&["frobnicate"])), 1);
    assert_eq!(code(&volrope(&["--help"])), 0);
}

#[test]
fn training_is_deterministic_per_seed() {
    let tmp = TempDir::new().unwrap();
    let ds = dataset(tmp.path(), 4, 2);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train(&ds, &a, &["--steps", "5"]);
    train(&ds, &b, &["--steps", "5"]);
    let rows = loss_rows(&a.join("loss.csv"));
    assert_eq!(rows.len(), 5);
    assert_eq!(rows, loss_rows(&b.join("loss.csv")));
    assert_eq!(
        std::fs::read(a.join("checkpoint.ckpt")).unwrap(),
        std::fs::read(b.join("checkpoint.ckpt")).unwrap()
    );
    let c = tmp.path().join("c");
    train(&ds, &c, &["--steps", "5", "--seed", "9"]);
    assert_ne!(rows, loss_rows(&c.join("loss.csv")));
}

#[test]
fn zero_steps_saves_only_the_initial_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let ds = dataset(tmp.path(), 2, 0);
    let run = tmp.path().join("run");
    train(&ds, &run, &["--steps", "0", "--set", "checkpoint_every=1"]);
    assert_eq!(files(&run), ["checkpoint.ckpt", "loss.csv", "run_config.toml"]);
    assert!(loss_rows(&run.join("loss.csv")).is_empty());
    let (model, step) = volrope::encoder::checkpoint::load(&run.join("checkpoint.ckpt")).unwrap();
    assert_eq!(step, 0);
    let fresh = volrope::encoder::DualEncoder::new(model.config().clone(), 0).unwrap();
    let mut fresh = fresh;
    volrope::encoder::checkpoint::quantize_to_f32(&mut fresh);
    assert_eq!(model.params(), fresh.params());
}

#[test]
fn periodic_checkpoints_follow_the_interval() {
    let tmp = TempDir::new().unwrap();
    let ds = dataset(tmp.path(), 2, 0);
    let run = tmp.path().join("run");
    train(&ds, &run, &["--steps", "5", "--set", "checkpoint_every=2"]);
    assert_eq!(
        files(&run),
        [
            "checkpoint.ckpt",
            "checkpoint_step2.ckpt",
            "checkpoint_step4.ckpt",
            "loss.csv",
            "run_config.toml"
        ]
    );
    let (_, step) = volrope::encoder::checkpoint::load(&run.join("checkpoint_step4.ckpt")).unwrap();
    assert_eq!(step, 4);
}

#[test]
fn optimizer_comparison_writes_both_logs() {
    let tmp = TempDir::new().unwrap();
    let ds = dataset(tmp.path(), 4, 1);
    let run = tmp.path().join("run");
    train(&ds, &run, &["--steps", "3", "--compare-optimizers"]);
    let muon = loss_rows(&run.join("loss_muon-hybrid.csv"));
    let adam = loss_rows(&run.join("loss_adamw-only.csv"));
    assert_eq!((muon.len(), adam.len()), (3, 3));
    // same start and same first batch, so the first recorded loss agrees
    assert_eq!(muon[0].1, adam[0].1);
    assert_ne!(muon, adam);
}

#[test]
fn non_finite_loss_aborts_with_the_step() {
    let tmp = TempDir::new().unwrap();
    let ds = dataset(tmp.path(), 4, 1);
    let run = tmp.path().join("run");
    let out = volrope(&[
        "train",
        "--dataset",
        s(&ds),
        "--out",
        s(&run),
        "--steps",
        "50",
        "--batch-size",
        "4",
        "--lr",
        "1e200",
    ]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    let err = stderr(&out);
    assert!(err.contains("training aborted at step"), "{err}");
    assert!(err.contains("non-finite"), "{err}");
    let step: usize = err
        .split("training aborted at step ")
        .nth(1)
        .and_then(|r| r.split(':').next())
        .and_then(|n| n.trim().parse().ok())
        .unwrap();
    assert!(step >= 1, "the first step runs on finite initial weights");
    assert_eq!(loss_rows(&run.join("loss.csv")).len(), step);
}

#[test]
fn training_then_eval_memorizes_a_toy_set() {
    let tmp = TempDir::new().unwrap();
    let ds = dataset(tmp.path(), 4, 3);
    let run = tmp.path().join("run");
    train(&ds, &run, &["--steps", "200", "--lr", "0.01"]);
    let rows = loss_rows(&run.join("loss.csv"));
    assert_eq!(rows.len(), 200);
    assert!(rows[199].1 < rows[0].1, "loss {} -> {}", rows[0].1, rows[199].1);

    let ev = tmp.path().join("eval");
    ok(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint.ckpt")),
        "--dataset",
        s(&ds),
        "--out",
        s(&ev),
        "--slices",
        "32",
        "--set",
        "eval.iterations=1",
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("retrieval_32.json")).unwrap()).unwrap();
    assert_eq!(report["R@1"]["mean"].as_f64(), Some(1.0));
    assert_eq!(report["_meta"]["subset_size"].as_u64(), Some(4));
}

#[test]
fn eval_writes_every_requested_report() {
    let tmp = TempDir::new().unwrap();
    let ds = dataset(tmp.path(), 6, 4);
    let run = tmp.path().join("run");
    train(&ds, &run, &["--steps", "2"]);
    let ev = tmp.path().join("eval");
    ok(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint.ckpt")),
        "--dataset",
        s(&ds),
        "--out",
        s(&ev),
        "--slices",
        "8,16,32",
        "--multipliers",
        "0.5,1,2",
        "--set",
        "eval.iterations=3",
    ]);
    for len in [8, 16, 32] {
        for f in [
            "retrieval_{}.json",
            "retrieval_{}.csv",
            "heatmap_{}.csv",
            "rope_sweep_{}.csv",
            "probe_{}.json",
        ] {
            assert!(ev.join(f.replace("{}", &len.to_string())).exists(), "{f} for {len}");
        }
        let heat = std::fs::read_to_string(ev.join(format!("heatmap_{len}.csv"))).unwrap();
        assert_eq!(heat.lines().count(), 6);
        assert!(heat.lines().all(|l| l.split(',').count() == 6));

        let read = |name: String| -> serde_json::Value {
            serde_json::from_str(&std::fs::read_to_string(ev.join(name)).unwrap()).unwrap()
        };
        let retrieval = read(format!("retrieval_{len}.json"));
        let sweep = read(format!("rope_sweep_{len}.json"));
        let rows = sweep.as_array().unwrap();
        assert_eq!(rows.len(), 3);
        let unit = rows.iter().find(|r| r["multiplier"].as_f64() == Some(1.0)).unwrap();
        assert_eq!(unit["training_base"].as_bool(), Some(true));
        assert_eq!(unit["report"], retrieval);
        let half = rows.iter().find(|r| r["multiplier"].as_f64() == Some(0.5)).unwrap();
        assert_eq!(half["training_base"].as_bool(), Some(false));
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("eval_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["results"].as_array().unwrap().len(), 3);
    assert!(ev.join("run_config.toml").exists());
}

#[test]
fn eval_rejects_a_mismatched_model_config() {
    let tmp = TempDir::new().unwrap();
    let ds = dataset(tmp.path(), 2, 4);
    let run = tmp.path().join("run");
    train(&ds, &run, &["--steps", "0"]);
    let cfg = tmp.path().join("other.toml");
    std::fs::write(&cfg, "[model]\nlayers = 1\n").unwrap();
    let out = volrope(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint.ckpt")),
        "--dataset",
        s(&ds),
        "--out",
        s(&tmp.path().join("eval")),
        "--config",
        s(&cfg),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("schema"), "{}", stderr(&out));
}

/// Mask over `organs` with slice 0 empty and slices 1..T covering every organ.
fn golden_mask(dir: &Path, organs: &[String], slices: usize) -> PathBuf {
    let n = organs.len();
    let presence = (0..slices).flat_map(|t| vec![t > 0; n]).collect();
    let mask = MaskVolume::from_presence([slices, 2, 2], organs.to_vec(), presence).unwrap();
    let path = dir.join("golden.mask");
    mask.save(&path).unwrap();
    path
}

#[test]
fn compose_prints_goldens_and_the_sentinel() {
    let goldens: Vec<serde_json::Value> = serde_json::from_str(&std::fs::read_to_string(GOLDENS).unwrap()).unwrap();
    let tmp = TempDir::new().unwrap();
    for g in goldens.iter().filter(|g| !g["organs"].as_array().unwrap().is_empty()) {
        let organs: Vec<String> = g["organs"]
            .as_array()
            .unwrap()
            .iter()
            .map(|o| o.as_str().unwrap().to_string())
            .collect();
        let expected = g["expected"].as_str().unwrap();
        let mask = golden_mask(tmp.path(), &organs, 4);
        let full = ok(&[
            "compose",
            "--findings",
            FINDINGS,
            "--mask",
            s(&mask),
            "--start",
            "0",
            "--len",
            "4",
        ]);
        assert_eq!(stdout(&full), format!("{expected}\n"));
        let listed = ok(&["compose", "--findings", FINDINGS, "--organs", &organs.join(",")]);
        assert_eq!(stdout(&listed), format!("{expected}\n"));
        let empty = ok(&[
            "compose",
            "--findings",
            FINDINGS,
            "--mask",
            s(&mask),
            "--start",
            "0",
            "--len",
            "1",
        ]);
        assert_eq!(stdout(&empty), "No target structures were detected in this CT block.\n");
    }
}

#[test]
fn compose_rejects_windows_past_the_volume() {
    let tmp = TempDir::new().unwrap();
    let mask = golden_mask(tmp.path(), &["Lung".to_string()], 4);
    let out = volrope(&[
        "compose",
        "--findings",
        FINDINGS,
        "--mask",
        s(&mask),
        "--start",
        "2",
        "--len",
        "3",
    ]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).is_empty());
    assert!(stderr(&out).contains("outside 0..4"), "{}", stderr(&out));
    let out = volrope(&["compose", "--findings", FINDINGS, "--organs", "Spleen,Gizzard"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("Gizzard"));
}

#[test]
fn verify_quick_passes() {
    let out = ok(&["verify", "--quick"]);
    let text = stdout(&out);
    for suite in ["gradient", "rope", "metrics", "composer"] {
        assert!(
            text.lines().any(|l| l.starts_with(suite) && l.contains("[PASS]")),
            "{text}"
        );
    }
}

#[test]
fn verify_fails_on_a_perturbed_backward_rule() {
    let out = volrope(&["verify", "--quick", "--inject-fault", "layer_norm"]);
    assert_eq!(code(&out), 1);
    let text = stdout(&out);
    assert!(
        text.lines().any(|l| l.starts_with("gradient") && l.contains("[FAIL]")),
        "{text}"
    );
    assert!(
        text.lines().any(|l| l.starts_with("rope") && l.contains("[PASS]")),
        "{text}"
    );

    let out = volrope(&["verify", "--quick", "--inject-fault", "no_such_op"]);
    assert_eq!(code(&out), 1);
}
