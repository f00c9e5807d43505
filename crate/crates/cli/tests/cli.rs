use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use layerforge::{load_checkpoint, MatrixFamily};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_layerforge"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn layerforge")
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn corpus(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    fs::create_dir_all(&data).unwrap();
    fs::write(data.join("a.txt"), layerforge::trainpipe::synthetic_corpus(3, 60_000)).unwrap();
    data
}

const TINY: [&str; 20] = [
    "--d-model", "16", "--heads", "2", "--d-ff", "24", "--max-seq-len", "32", "--steps", "8",
    "--batch-size", "2", "--grad-accum", "1", "--cutoff", "32", "--eval-count", "10", "--lr", "3e-3",
];

fn toy(dir: &Path, layers: usize, seed: u64) -> PathBuf {
    let data = corpus(dir);
    let out = dir.join(format!("base_{layers}_{seed}.lfck"));
    let layers = layers.to_string();
    let seed = seed.to_string();
    let mut args = vec!["train-toy", "--data", s(&data), "--out", s(&out), "--layers", &layers, "--seed", &seed];
    args.extend(TINY);
    ok(&args);
    out
}

fn error_line(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr)
        .lines()
        .find(|l| l.starts_with("ERROR "))
        .unwrap_or_default()
        .to_string()
}

#[test]
fn unknown_subcommand_exits_2() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("ERROR 2: "), "{}", error_line(&o));
    assert_eq!(run(&[]).status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let o = run(&["eval-ppl", "--ckpt", s(&dir.path().join("none.lfck")), "--data", s(&data)]);
    assert_eq!(o.status.code(), Some(4));
    let line = error_line(&o);
    assert!(line.starts_with("ERROR 4: ") && line.contains("none.lfck"), "{line}");
}

#[test]
fn bad_arguments_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let base = toy(dir.path(), 4, 0);
    let out = dir.path().join("x.lfck");
    for args in [
        vec!["expand", "--ckpt", s(&base), "--strategy", "lesa", "--interval", "3", "--out", s(&out)],
        vec!["expand", "--ckpt", s(&base), "--strategy", "lesa", "--interval", "4:2", "--out", s(&out)],
        vec!["expand", "--ckpt", s(&base), "--strategy", "nope", "--out", s(&out)],
        vec!["expand", "--ckpt", s(&base), "--out", s(&out)],
        vec!["analyze", "--ckpt", s(&base), "--family", "w_proj", "--out", s(&out)],
    ] {
        let o = run(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert_eq!(String::from_utf8_lossy(&o.stderr).lines().filter(|l| l.starts_with("ERROR")).count(), 1);
    }
    assert!(!out.exists());
}

#[test]
fn invalid_thread_count_rejected() {
    let o = bin().env("LAYERFORGE_THREADS", "zero").args(["eval-ppl"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn identity_pro_preserves_perplexity() {
    let dir = tempfile::tempdir().unwrap();
    let base = toy(dir.path(), 4, 1);
    let data = dir.path().join("data");
    let pro = dir.path().join("pro.lfck");
    ok(&["expand", "--ckpt", s(&base), "--strategy", "pro", "--identity-init", "--n-copies", "2", "--out", s(&pro)]);
    assert_eq!(load_checkpoint(&pro).unwrap().n_layers(), 6);
    let ppl = |p: &Path| -> f64 {
        ok(&["eval-ppl", "--ckpt", s(p), "--data", s(&data), "--eval-count", "10"]).trim().parse().unwrap()
    };
    let (a, b) = (ppl(&base), ppl(&pro));
    assert!(((a - b) / a).abs() <= 1e-3, "{a} vs {b}");
}

#[test]
fn interval_15_31_grows_32_layers_to_48() {
    let dir = tempfile::tempdir().unwrap();
    let base = toy(dir.path(), 32, 0);
    let pred = dir.path().join("pred");
    ok(&["train-predictor", "--ckpt", s(&base), "--out", s(&pred), "--epochs", "1", "--hidden", "8"]);
    let out = dir.path().join("big.lfck");
    ok(&["expand", "--ckpt", s(&base), "--strategy", "lesa", "--interval", "15:31", "--predictors", s(&pred), "--out", s(&out)]);
    assert_eq!(load_checkpoint(&out).unwrap().n_layers(), 48);
    let prov: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("big.lfck.provenance.json")).unwrap()).unwrap();
    let layers = prov["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 48);
    assert_eq!(layers.iter().filter(|l| l["kind"] == "synth").count(), 16);
    let norms = fs::read_to_string(dir.path().join("big.lfck.norms.csv")).unwrap();
    assert_eq!(norms.lines().count(), 1 + MatrixFamily::ALL.len());
}

#[test]
fn predictors_must_match_svd_mode() {
    let dir = tempfile::tempdir().unwrap();
    let base = toy(dir.path(), 4, 0);
    let pred = dir.path().join("pred");
    ok(&["train-predictor", "--ckpt", s(&base), "--out", s(&pred), "--epochs", "1", "--hidden", "8", "--no-svd"]);
    let out = dir.path().join("x.lfck");
    let o = run(&["expand", "--ckpt", s(&base), "--strategy", "lesa", "--predictors", s(&pred), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    ok(&["expand", "--ckpt", s(&base), "--strategy", "lesa_raw", "--predictors", s(&pred), "--out", s(&out)]);
}

#[test]
fn pooled_predictors_report_heldout_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let a = toy(dir.path(), 6, 0);
    let b = toy(dir.path(), 6, 1);
    let pred = dir.path().join("pred");
    ok(&[
        "train-predictor", "--ckpt", s(&a), "--extra-ckpts", s(&b), "--out", s(&pred), "--epochs", "2",
        "--hidden", "8", "--holdout-frac", "0.25", "--family", "q_proj",
    ]);
    let metrics = fs::read_to_string(pred.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().collect();
    assert_eq!(rows.len(), 2);
    let cols: Vec<&str> = rows[1].split(',').collect();
    assert_eq!(cols[0], "q_proj");
    assert_eq!(cols[1].parse::<usize>().unwrap() + cols[2].parse::<usize>().unwrap(), 8);
    assert!(cols[7].parse::<f64>().unwrap().is_finite());
    assert!(pred.join("q_proj.pred").exists() && !pred.join("k_proj.pred").exists());
}

#[test]
fn pretrain_new_layers_only_keeps_originals_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let base = toy(dir.path(), 4, 2);
    let data = dir.path().join("data");
    let grown = dir.path().join("grown.lfck");
    ok(&["expand", "--ckpt", s(&base), "--strategy", "interpolation", "--out", s(&grown)]);
    let out = dir.path().join("pt");
    ok(&[
        "pretrain", "--ckpt", s(&grown), "--data", s(&data), "--freeze", "new", "--steps", "3", "--batch-size", "2",
        "--grad-accum", "1", "--cutoff", "16", "--eval-count", "10", "--lr", "1e-2", "--out", s(&out),
    ]);
    let before = load_checkpoint(&grown).unwrap();
    let after = load_checkpoint(&out.join("model.lfck")).unwrap();
    let prov: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("model.lfck.provenance.json")).unwrap()).unwrap();
    let mut changed = 0;
    for (i, l) in prov["layers"].as_array().unwrap().iter().enumerate() {
        if l["kind"] == "original" {
            assert!(before.layers[i].bit_eq(&after.layers[i]), "layer {i} moved");
        } else if !before.layers[i].bit_eq(&after.layers[i]) {
            changed += 1;
        }
    }
    assert!(changed > 0);
    assert!(before.embed.bit_eq(&after.embed) && before.lm_head.bit_eq(&after.lm_head));
    let curve = fs::read_to_string(out.join("loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("step,raw_loss,smoothed_loss,lr"));
    assert_eq!(curve.lines().count(), 4);
}

#[test]
fn freezing_without_provenance_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let base = toy(dir.path(), 4, 0);
    let data = dir.path().join("data");
    let o = run(&[
        "pretrain", "--ckpt", s(&base), "--data", s(&data), "--freeze", "new_layers_only", "--steps", "1",
        "--out", s(&dir.path().join("pt")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

fn manifest(p: &Path) -> String {
    fs::read_to_string(p).unwrap()
}

#[test]
fn runs_are_hash_stable() {
    // Each step runs twice into the same paths: run_config.json records
    // them, so distinct directories would differ there alone.
    let d = tempfile::tempdir().unwrap();
    let a = toy(d.path(), 7, 5);
    let first = manifest(&d.path().join("base_7_5.lfck.sha256"));
    toy(d.path(), 7, 5);
    assert_eq!(first, manifest(&d.path().join("base_7_5.lfck.sha256")));

    let out = d.path().join("an");
    let an = |threads: &str| {
        let o = bin()
            .env("LAYERFORGE_THREADS", threads)
            .args(["analyze", "--ckpt", s(&a), "--out", s(&out), "--iterations", "100"])
            .output()
            .unwrap();
        assert!(o.status.success());
        manifest(&out.join("outputs.sha256"))
    };
    let m1 = an("1");
    assert_eq!(m1, an("2"));
    assert!(m1.contains("q_proj/tsne.csv") && m1.contains("gate_proj/pca.svg") && m1.contains("run_config.json"));

    let c = d.path().join("cmp");
    let cmp = || {
        ok(&[
            "compare", "--base", s(&a), "--data", s(&d.path().join("data")), "--strategies", "lesa,solar,stack",
            "--seeds", "0,1", "--steps", "3", "--batch-size", "2", "--grad-accum", "1", "--cutoff", "16",
            "--epochs", "1", "--hidden", "8", "--eval-count", "10", "--out", s(&c),
        ]);
        manifest(&c.join("outputs.sha256"))
    };
    let m1 = cmp();
    assert!(!m1.contains("report.csv") && m1.contains("summary.json"));
    assert_eq!(m1, cmp());
    let report = fs::read_to_string(c.join("report.csv")).unwrap();
    assert_eq!(report.lines().next(), Some("strategy,seed,init_ppl,final_ppl,steps_to_threshold,wall_clock_s"));
    assert_eq!(report.lines().count(), 1 + 3 * 2);
    assert!(fs::read_to_string(c.join("report.md")).unwrap().contains("lesa < solar"));
    assert!(c.join("curves").join("stack_seed1.csv").exists());
}

#[test]
fn config_file_defaults_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"model": {"n_layers": 3, "d_model": 8, "n_heads": 2, "d_ff": 8, "max_seq_len": 16},
            "train": {"total_steps": 5, "batch_size": 2, "grad_accum_steps": 1, "cutoff_len": 16},
            "eval_count": 4, "seed": 9}"#,
    )
    .unwrap();
    let out = dir.path().join("m.lfck");
    ok(&["train-toy", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--steps", "2"]);
    let rc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("m.lfck.run_config.json")).unwrap()).unwrap();
    assert_eq!(rc["train"]["total_steps"], 2);
    assert_eq!(rc["train"]["batch_size"], 2);
    assert_eq!(rc["seed"], 9);
    assert_eq!(rc["model"]["n_layers"], 3);
    assert_eq!(rc["train"]["lr"], layerforge::trainpipe::SCRATCH_LR);
    assert_eq!(rc["predictor"]["epochs"], 5);
    assert_eq!(load_checkpoint(&out).unwrap().n_layers(), 3);
    assert_eq!(fs::read_to_string(dir.path().join("m.lfck.loss.csv")).unwrap().lines().count(), 3);

    // The materialised config reproduces the run on its own.
    let again = dir.path().join("again.lfck");
    ok(&["train-toy", "--config", s(&dir.path().join("m.lfck.run_config.json")), "--out", s(&again)]);
    assert_eq!(fs::read(&out).unwrap(), fs::read(&again).unwrap());

    fs::write(&cfg, r#"{"train": {"total_step": 5}}"#).unwrap();
    let o = run(&["train-toy", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).contains("total_step"));
}
