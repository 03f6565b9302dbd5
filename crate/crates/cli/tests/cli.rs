use std::fs;
use std::process::{Command, Output};

use deltagossip::topology::{load_topology, validate};

fn deltagossip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deltagossip"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn generated_topology_reloads_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let out = deltagossip(&[
        "gen-topology",
        "-n",
        "10",
        "--seed",
        "3",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("diameter="));
    let (graph, descriptor) = load_topology(&dir.path().join("10nodes.json")).unwrap();
    assert_eq!(graph.node_count(), 10);
    assert!(validate(&graph, &descriptor.constraints)
        .unwrap()
        .passes(&descriptor.constraints));
}

#[test]
fn two_nodes_give_a_single_edge() {
    let dir = tempfile::tempdir().unwrap();
    let out = deltagossip(&[
        "gen-topology",
        "-n",
        "2",
        "--target-avg-degree",
        "1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let edges = fs::read_to_string(dir.path().join("2nodes.edges")).unwrap();
    assert_eq!(edges.lines().filter(|l| !l.starts_with('#')).count(), 1);
}

#[test]
fn unsatisfiable_target_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = deltagossip(&[
        "gen-topology",
        "-n",
        "10",
        "--target-avg-degree",
        "0.5",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unsatisfiable"));
}

#[test]
fn missing_dataset_is_a_clear_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.json");
    fs::write(
        &config,
        r#"{
            "seed": 1,
            "model": {"hidden_dim": 0, "learning_rate": 0.1},
            "dataset": {"idx": {"images": "missing-images.idx", "labels": "missing-labels.idx"}},
            "topologies": [{"generated": {"nodes": 4, "target_avg_degree": 2.0}}]
        }"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = deltagossip(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("dataset") && err.contains("missing-images.idx"),
        "{err}"
    );
    assert!(!out_dir.join("summary.json").exists());
}

#[test]
fn run_writes_requested_strategies_and_honours_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.json");
    fs::write(
        &config,
        r#"{
            "seed": 1,
            "schedule": {"train_epochs": 4, "integrate_every": 2, "convergence_until_round": 5, "batch_size": 8},
            "model": {"hidden_dim": 4, "learning_rate": 0.1},
            "dataset": {"synthetic": {"classes": 3, "dim": 4, "per_class": 30, "sigma": 0.05}},
            "topologies": [
                {"generated": {"nodes": 4, "target_avg_degree": 2.0}},
                {"generated": {"nodes": 6, "target_avg_degree": 2.0}}
            ]
        }"#,
    )
    .unwrap();
    let run = |out: &str, extra: &[&str]| {
        let out_dir = dir.path().join(out);
        let mut args = vec![
            "run",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        let result = deltagossip(&args);
        assert!(
            result.status.success(),
            "{}",
            String::from_utf8_lossy(&result.stderr)
        );
        out_dir
    };

    let a = run(
        "a",
        &[
            "--strategy",
            "standard_averaging",
            "--strategy",
            "delta_sum",
        ],
    );
    let mut names: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "4nodes_delta_sum.csv",
            "4nodes_standard_averaging.csv",
            "6nodes_delta_sum.csv",
            "6nodes_standard_averaging.csv",
            "summary.json"
        ]
    );
    let csv = fs::read_to_string(a.join("6nodes_delta_sum.csv")).unwrap();
    assert_eq!(
        csv.lines().next(),
        Some("index,test_acc_min,test_acc_median,test_acc_max")
    );
    assert_eq!(csv.lines().count(), 6);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert!(summary["accuracy_drop_ratio"].is_object());

    let b = run("b", &["--strategy", "delta_sum", "--seed", "2"]);
    assert_ne!(
        fs::read(a.join("6nodes_delta_sum.csv")).unwrap(),
        fs::read(b.join("6nodes_delta_sum.csv")).unwrap()
    );
    let c = run("c", &["--strategy", "delta_sum", "--percentiles"]);
    let wide = fs::read_to_string(c.join("4nodes_delta_sum.csv")).unwrap();
    assert!(wide.starts_with(
        "index,test_acc_min,test_acc_median,test_acc_max,test_acc_p05,test_acc_p95\n"
    ));

    let bad = deltagossip(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        "x",
        "--strategy",
        "nope",
    ]);
    assert!(!bad.status.success());
}

#[test]
fn netmodel_tables() {
    let out = deltagossip(&["netmodel"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("1.71700") && text.contains("2.25357"));

    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("t.csv");
    let out = deltagossip(&[
        "netmodel",
        "--nodes",
        "40",
        "--conn",
        "3.3",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let table = fs::read_to_string(&csv).unwrap();
    assert_eq!(table.lines().count(), 2);
    assert!(table.lines().nth(1).unwrap().ends_with(",0.210000"));

    let out = deltagossip(&["netmodel", "--nodes", "10,25", "--conn", "3.3,3.2,4.2"]);
    assert!(!out.status.success());
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let config = deltagossip::experiment::ExperimentConfig::load(&path).unwrap();
        config.validate().unwrap();
        count += 1;
    }
    assert!(count >= 3);
}
