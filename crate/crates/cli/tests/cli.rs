use std::path::Path;
use std::process::{Command, Output};

fn metricopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metricopt"))
        .args(args)
        .output()
        .expect("binary runs")
}

const SMALL: [&str; 12] = [
    "--set",
    "data.synthetic.n=800",
    "--set",
    "pretrain.steps=50",
    "--set",
    "meta.iterations=3",
    "--set",
    "meta.holdout_tasks=1",
    "--set",
    "seeds=[1,2]",
    "--set",
    "lambda_grid=[1.0]",
];

fn run_ok(args: &[&str]) -> String {
    let out = metricopt(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn print_config_round_trips_overrides() {
    let text = run_ok(&[
        "meta-train",
        "--print-config",
        "--set",
        "meta.iterations=17",
        "--set",
        "finetune.metric=f_measure",
    ]);
    let cfg: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(cfg["meta"]["iterations"], 17);
    assert_eq!(cfg["finetune"]["metric"], "f_measure");
}

#[test]
fn bad_override_fails_with_field_name() {
    let out = metricopt(&["meta-train", "--set", "meta.iters=3"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("meta.iters"));
    let out = metricopt(&["meta-train", "--set", "finetune.horizon=0", "--print-config"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("finetune.horizon"));
}

#[test]
fn pipeline_writes_results_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let with_out = |cmd: &[&str]| -> Vec<String> {
        let mut v: Vec<String> = cmd.iter().map(|s| s.to_string()).collect();
        v.extend(SMALL.iter().map(|s| s.to_string()));
        v.extend(["--output".to_string(), out.to_string()]);
        v
    };
    let args = with_out(&["meta-train"]);
    let text = run_ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(text.contains("held-out"));
    let args = with_out(&["finetune", "--method", "loss-only,metricopt-sgd"]);
    let text = run_ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(text.contains("4 rows appended"));
    let report = run_ok(&["report", out]);
    assert!(report.contains("metricopt-sgd") && ["0/2", "1/2", "2/2"].iter().any(|w| report.contains(w)));
    assert!(Path::new(out).join("summary.csv").exists());

    let replayed = dir.path().join("replayed");
    let manifest = dir.path().join("finetune-manifest.json");
    let text = run_ok(&[
        "replay",
        manifest.to_str().unwrap(),
        "--output",
        replayed.to_str().unwrap(),
    ]);
    assert!(text.contains("4 rows"));
    let strip = |p: &Path| -> Vec<String> {
        std::fs::read_to_string(p.join("results.csv"))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
            .collect()
    };
    assert_eq!(strip(Path::new(out)), strip(&replayed));
}

#[test]
fn finetune_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "finetune",
        "--method",
        "metricopt-sgd",
        "--output",
        dir.path().to_str().unwrap(),
    ];
    args.extend(SMALL);
    let out = metricopt(&args);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing checkpoint"));
}

#[test]
fn report_on_empty_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!metricopt(&["report", dir.path().to_str().unwrap()]).status.success());
}

#[test]
fn gp_check_emits_csv() {
    let mut args = vec!["gp-check", "--trajectory-seed", "3"];
    args.extend(SMALL);
    let text = run_ok(&args);
    assert!(text.lines().nth(1).unwrap().starts_with("t,observed,gp_mean"));
}
