use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn grpattn(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_grpattn"));
    cmd.args(args).env_remove("GA_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = grpattn(args, &[]);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn gen(dir: &Path, kind: &str, samples: &str) {
    ok(&["gen-synthetic", "--out", s(dir), "--kind", kind, "--samples", samples, "--t", "32"]);
}

#[test]
fn unknown_command_is_usage_error() {
    let out = grpattn(&["frobnicate"], &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_data_path_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = grpattn(&["pretrain", "--data", s(&missing), "--out", s(&dir.path().join("o"))], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn config_violations_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    gen(&dir.path().join("d"), "imputation", "3");
    let data = dir.path().join("d");
    let out_dir = dir.path().join("o");
    for (args, field) in [
        (vec!["--epochs", "many"], "epochs"),
        (vec!["--epsilon", "0.5"], "epsilon"),
        (vec!["--mode", "sparse"], "mode"),
        (vec!["--mask-rate", "1.5"], "mask_rate"),
    ] {
        let mut full = vec!["pretrain", "--data", s(&data), "--out", s(&out_dir)];
        full.extend(args);
        let out = grpattn(&full, &[]);
        assert_eq!(out.status.code(), Some(1), "{full:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(&format!("`{field}`")), "{err}");
    }
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "epochs = 1\nlearning_rate = 3\n").unwrap();
    let out = grpattn(&["pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&out_dir)], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn pretrain_smoke_writes_loss_curve() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    gen(&data, "imputation", "10");
    let out_dir = dir.path().join("o");
    let start = Instant::now();
    ok(&["run", "pretrain", "--epochs", "1", "--data", s(&data), "--out", s(&out_dir)]);
    assert!(start.elapsed().as_secs() < 30);
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,loss");
    assert_eq!(lines.len(), 2);
    for f in ["manifest.json", "summary.json", "checkpoint.json", "trace.csv"] {
        assert!(out_dir.join(f).is_file(), "{f}");
    }
    assert_eq!(json(&out_dir.join("manifest.json"))["config"]["epochs"], "1");
}

#[test]
fn precedence_is_file_then_env_then_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# settings\nseed = 1\nt = 32\nsamples = 2\n").unwrap();
    let seed_of = |name: &str, envs: &[(&str, &str)], extra: &[&str]| {
        let out_dir = dir.path().join(name);
        let mut args = vec!["gen-synthetic", "--config", s(&cfg), "--out", s(&out_dir)];
        args.extend(extra);
        let out = grpattn(&args, envs);
        assert!(out.status.success());
        json(&out_dir.join("manifest.json"))["config"]["seed"].as_str().unwrap().to_string()
    };
    assert_eq!(seed_of("a", &[], &[]), "1");
    assert_eq!(seed_of("b", &[("GA_SEED", "7")], &[]), "7");
    assert_eq!(seed_of("c", &[("GA_SEED", "7")], &["--seed", "9"]), "9");
}

#[test]
fn identical_config_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    gen(&data, "classification", "3");
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        ok(&["finetune", "--epochs", "2", "--data", s(&data), "--out", s(&out_dir), "--seed", "4"]);
        files.push(
            ["metrics.csv", "summary.json", "manifest.json", "checkpoint.json"]
                .map(|f| std::fs::read(out_dir.join(f)).unwrap()),
        );
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn pretrain_then_impute_and_forecast() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    gen(&data, "imputation", "4");
    let pre = dir.path().join("pre");
    ok(&["pretrain", "--epochs", "2", "--window", "4", "--data", s(&data), "--out", s(&pre)]);
    let ck = pre.join("checkpoint.json");

    let imp = dir.path().join("imp");
    ok(&["impute", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&imp)]);
    let metrics = std::fs::read_to_string(imp.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("sample,masked,mse,baseline_mse\n"));
    assert_eq!(metrics.lines().count(), 5);
    assert!(imp.join("imputed/sample_00003.csv").is_file());

    let fc = dir.path().join("fc");
    ok(&["forecast", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&fc)]);
    assert_eq!(json(&fc.join("summary.json"))["horizon"], 4);
    let rows = std::fs::read_to_string(fc.join("forecasts/sample_00000.csv")).unwrap();
    assert_eq!(rows.lines().count(), 5);

    let out = grpattn(&["impute", "--data", s(&data), "--out", s(&imp)], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`checkpoint`"));
}

#[test]
fn finetune_from_pretrained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    gen(&data, "classification", "4");
    let pre = dir.path().join("pre");
    ok(&["pretrain", "--epochs", "1", "--data", s(&data), "--out", s(&pre)]);
    let ft = dir.path().join("ft");
    ok(&[
        "finetune",
        "--checkpoint",
        s(&pre.join("checkpoint.json")),
        "--freeze",
        "true",
        "--epochs",
        "1",
        "--data",
        s(&data),
        "--out",
        s(&ft),
    ]);
    let summary = json(&ft.join("summary.json"));
    assert_eq!(summary["classes"], 3);
    assert_eq!(summary["train"].as_u64().unwrap() + summary["test"].as_u64().unwrap(), 12);
    let acc = summary["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn plan_batch_writes_tiling_partition() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("plan");
    ok(&["run", "plan-batch", "--lmax", "64", "--out", s(&out_dir)]);
    let plan = json(&out_dir.join("plan.json"));
    assert_eq!(plan["l_max"], 64);
    let pieces = plan["partition"].as_array().unwrap();
    assert!(!pieces.is_empty());
    let covers = |p: &serde_json::Value, l: u64, n: u64| {
        let f = |k: &str| p[k].as_u64().unwrap();
        (f("l_lo")..=f("l_hi")).contains(&l) && (f("n_lo")..=f("n_hi")).contains(&n)
    };
    for l in 1..=64 {
        for n in 1..=l {
            assert_eq!(pieces.iter().filter(|p| covers(p, l, n)).count(), 1, "({l},{n})");
        }
    }
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), pieces.len() + 1);
}

#[test]
fn bench_single_length_has_no_exponent() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("bench");
    ok(&[
        "bench", "--lengths", "32", "--groups", "4", "--trials", "1", "--layers", "1", "--out", s(&out_dir),
    ]);
    let summary = json(&out_dir.join("summary.json"));
    assert!(summary["exponent_vanilla"].is_null());
    assert!(summary["speedup_at_max"].as_f64().unwrap() > 0.0);
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("length,t_vanilla,t_group,speedup\n32,"));
}

#[test]
fn flags_for_other_commands_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = grpattn(&["plan-batch", "--epochs", "3", "--out", s(dir.path())], &[]);
    assert_eq!(out.status.code(), Some(2));
}
