use std::path::Path;
use std::process::{Command, Output};

use treeres::genie::GenieError;
use treeres::sim::SimError;
use treeres_cli::commands::exit_code;
use treeres_cli::config::ExperimentConfig;

fn treeres(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_treeres")).current_dir(dir).args(args).output().expect("binary runs")
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

#[test]
fn via_exports_closed_form_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = treeres(dir.path(), &["via", "--n-max", "2", "--out", "g.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let g: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("g.json")).unwrap()).unwrap();
    let values: Vec<(Vec<u64>, f64)> = g["entries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| (e["state"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect(), e["value"].as_f64().unwrap()))
        .collect();
    assert_eq!(values.len(), 3);
    assert_eq!(values[0], (vec![1], 1.0));
    assert_eq!(values[1], (vec![1, 1], 2.0));
    assert_eq!(values[2].0, vec![2]);
    assert!((values[2].1 - 3.0).abs() < 1e-5);

    let out = treeres(dir.path(), &["via", "--out", "g5.json"]);
    assert!(out.status.success());
    let g: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("g5.json")).unwrap()).unwrap();
    assert_eq!(g["entries"].as_array().unwrap().len(), 18);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(treeres(dir.path(), &["via", "--n-max", "0"]).status.code(), Some(2));
    assert_eq!(treeres(dir.path(), &["via", "--max-sweeps", "1"]).status.code(), Some(3));
    assert_eq!(treeres(dir.path(), &["simulate", "--lambda", "0.5"]).status.code(), Some(2));
    assert_eq!(treeres(dir.path(), &["sweep", "--frame", "fixed:0"]).status.code(), Some(2));
    std::fs::write(dir.path().join("bad.toml"), "[model]\nbogus = 1\n").unwrap();
    assert_eq!(treeres(dir.path(), &["via", "--config", "bad.toml"]).status.code(), Some(2));

    let inconsistent = anyhow::Error::from(SimError::Inconsistent { slot: 7, detail: "x".into() });
    assert_eq!(exit_code(&inconsistent), 4);
    let stalled = anyhow::Error::from(SimError::Genie(GenieError::NonConvergence { sweeps: 1, delta: 1.0 }));
    assert_eq!(exit_code(&stalled), 3);
    assert_eq!(exit_code(&anyhow::anyhow!("other")), 1);
}

#[test]
fn zero_trials_is_a_noop() {
    let dir = tempfile::tempdir().unwrap();
    let out = treeres(dir.path(), &["train", "--trials", "0"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn training_curves_and_pretraining() {
    let dir = tempfile::tempdir().unwrap();
    let mean_first = |init: &str| -> f64 {
        let curve = format!("{init}.csv");
        let out = treeres(
            dir.path(),
            &["train", "--trials", "120", "--init", init, "--seed", "5", "--curve-out", &curve, "--table-out", &format!("{init}.json")],
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let (header, rows) = read_csv(&dir.path().join(curve));
        assert_eq!(header, ["config_hash", "seed", "trial_index", "slots_used", "moving_avg_40", "table_size"]);
        assert_eq!(rows.len(), 120);
        assert!(rows.iter().all(|r| r[0].len() == 64 && r[1] == "5"));
        let slots = column(&header, "slots_used");
        rows[..40].iter().map(|r| r[slots].parse::<f64>().unwrap()).sum::<f64>() / 40.0
    };
    let genie = mean_first("genie");
    let zero = mean_first("zero");
    assert!(genie < zero, "pre-trained {genie} vs zero {zero}");

    // the trained table loads back into a simulation
    let out = treeres(dir.path(), &["simulate", "--lambda", "0.2", "--table", "genie.json", "--freeze", "--out", "sim.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // a table quantized differently is refused
    let out = treeres(dir.path(), &["train", "--trials", "5", "--q", "20", "--table-out", "q20.json", "--curve-out", "q20.csv"]);
    assert!(out.status.success());
    assert_eq!(treeres(dir.path(), &["simulate", "--lambda", "0.2", "--table", "q20.json"]).status.code(), Some(2));
}

#[test]
fn quantization_levels_report_table_size() {
    let dir = tempfile::tempdir().unwrap();
    for q in ["1", "10", "20"] {
        let curve = format!("curve_q{q}.csv");
        let out = treeres(dir.path(), &["train", "--trials", "30", "--q", q, "--curve-out", &curve, "--table-out", "t.json"]);
        assert!(out.status.success());
        let (header, rows) = read_csv(&dir.path().join(curve));
        let size = column(&header, "table_size");
        assert!(rows.iter().all(|r| r[size].parse::<usize>().unwrap() > 0));
    }
}

#[test]
fn simulate_writes_an_audited_row() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "[traffic]\nspan_slots = 2000\n").unwrap();
    let out = treeres(
        dir.path(),
        &["simulate", "--config", "c.toml", "--lambda", "0.15", "--frame", "fixed:50", "--seed", "4", "--events", "ev.csv", "--out", "m.csv"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = read_csv(&dir.path().join("m.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][column(&header, "seed")], "4");
    assert_eq!(rows[0][column(&header, "frame")], "fixed:50");
    assert_eq!(rows[0][column(&header, "config_hash")].len(), 64);
    let events = std::fs::read_to_string(dir.path().join("ev.csv")).unwrap();
    assert!(events.starts_with("slot,event_type,frame_id,terminal_id"));

    // unstable load only with the override
    let out = treeres(dir.path(), &["simulate", "--config", "c.toml", "--lambda", "0.4", "--allow-unstable", "--out", "u.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn sweep_grid_is_complete_and_ordered() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "[traffic]\nspan_slots = 600\n").unwrap();
    let run = |workers: &str, out: &str| {
        let o = treeres(dir.path(), &["sweep", "--config", "c.toml", "--workers", workers, "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(dir.path().join(out)).unwrap()
    };
    let one = run("1", "a.csv");
    let many = run("3", "b.csv");
    assert_eq!(one, many);
    let (header, rows) = read_csv(&dir.path().join("a.csv"));
    assert_eq!(rows.len(), 4 * 13 * 5);
    let hashes: std::collections::BTreeSet<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(hashes.len(), 1);
    let protocol = column(&header, "protocol");
    assert_eq!(rows[0][protocol], "proposed");
    assert_eq!(rows[rows.len() - 1][protocol], "csma_ca");

    let o = treeres(dir.path(), &["bench", "--config", "c.toml", "--lambda", "0.1", "--out", "bench.csv"]);
    assert!(o.status.success());
    let (_, rows) = read_csv(&dir.path().join("bench.csv"));
    assert_eq!(rows.len(), 3 * 5);
    assert!(rows.iter().all(|r| r[protocol] != "proposed" && r[column(&header, "frame")] == "-"));
}

#[test]
fn config_file_round_trip() {
    let text = "[model]\nn_max = 4\nsupport_limit = 0\n\n[traffic]\nlambdas = [0.1, 0.2]\nframes = [\"fixed:20\", \"dynamic\"]\n\n[accounting]\nrho = [2, 6]\nfinish_mode = \"dedicated\"\n";
    let c = ExperimentConfig::from_toml(text).unwrap();
    assert_eq!(c.model.n_max, 4);
    assert_eq!(c.support_limit(), None);
    let rendered = c.render();
    let again = ExperimentConfig::from_toml(&rendered).unwrap();
    assert_eq!(again, c);
    assert_eq!(again.render(), rendered);
    assert_ne!(c.hash(), ExperimentConfig::default().hash());
}
