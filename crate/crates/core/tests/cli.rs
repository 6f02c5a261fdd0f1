use std::path::Path;
use std::process::{Command, Output};

use recall_core::harness::{ResultTable, RunConfig};

const BIN: &str = env!("CARGO_BIN_EXE_recall-lab");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("RECALL_WORKERS").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn error_line(o: &Output) -> serde_json::Value {
    assert!(!o.status.success());
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str(line).expect("error line is JSON")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.json");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const SMALL: &str = r#"{"schema": 1, "master_seed": 3,
  "protocol": {"v_grid": [16, 24, 32], "d_grid": [4, 8, 16], "seeds_per_cell": 1, "n_eval": 200}}"#;

#[test]
fn show_config_echoes_the_shipped_default() {
    let shipped = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.json");
    let o = run(&["show-config", "--config", shipped]);
    assert!(o.status.success());
    let echoed = RunConfig::from_json(&stdout(&o)).unwrap();
    assert_eq!(echoed, RunConfig::default());
    assert_eq!(stdout(&o).trim(), std::fs::read_to_string(shipped).unwrap().trim());
}

#[test]
fn dry_run_lists_cells_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = run(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--dry-run"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| !l.starts_with('#') && !l.starts_with('V')).count(), 9);
    assert!(text.contains("total cost"));
    assert!(!out.exists());
}

#[test]
fn sweep_writes_all_outputs_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run(&["sweep", "--config", &cfg, "--out", a.to_str().unwrap()]).status.success());
    assert!(run(&["--workers", "2", "sweep", "--config", &cfg, "--out", b.to_str().unwrap()]).status.success());
    for f in ["results.csv", "manifest.json", "heatmap.dat", "config.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(a.join("results.csv")).unwrap();
    assert_eq!(csv, std::fs::read_to_string(b.join("results.csv")).unwrap());
    assert_eq!(ResultTable::from_csv(&csv).unwrap().rows.len(), 9);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["runs"].as_array().unwrap().len(), 9);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn eval_reproduces_a_sweep_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("o");
    assert!(run(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    let table = ResultTable::from_csv(&std::fs::read_to_string(out.join("results.csv")).unwrap()).unwrap();
    let o = run(&["eval", "--config", &cfg, "-V", "24", "-d", "8"]);
    assert!(o.status.success());
    let row = &ResultTable::from_csv(&stdout(&o)).unwrap().rows[0];
    let expected = table.rows.iter().find(|r| r.v == 24 && r.d == 8).unwrap();
    assert_eq!(row, expected);
}

#[test]
fn train_writes_a_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let trace = dir.path().join("trace.json");
    let o = run(&["train", "--config", &cfg, "-V", "16", "-d", "8", "--trace", trace.to_str().unwrap(), "--debug-matrices"]);
    assert!(o.status.success());
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["steps"].as_array().unwrap().len(), 3);
    let t: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(trace).unwrap()).unwrap();
    assert!(t.get("V2").is_some() && t.get("W1").is_some());
}

#[test]
fn fit_recovers_synthetic_square_root_law() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("V,L,N,d,m,seed,trainer,epoch,accuracy,stderr,wallclock_s,eta,gamma\n");
    for v in [16usize, 64, 256, 1024] {
        let dmin = 2 * (v as f64).sqrt() as usize;
        for (d, acc) in [(dmin / 2, 0.01), (dmin, 0.5)] {
            csv += &format!("{v},4,100,{d},0,1,three_step,,{acc},0.01,0.0,1.0,1.0\n");
        }
    }
    let table = dir.path().join("t.csv");
    std::fs::write(&table, csv).unwrap();
    let plots = dir.path().join("plots");
    let o = run(&["fit", "--table", table.to_str().unwrap(), "--plot-dir", plots.to_str().unwrap()]);
    assert!(o.status.success());
    let fit: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    // d_min = 2 V^0.5, so the slope of d_min² is 1
    assert!((fit["slope"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(plots.join("fit_line.dat").exists() && plots.join("heatmap.dat").exists());
}

#[test]
fn diagnose_emits_scaling_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = run(&["diagnose", "--config", &cfg, "--term", "signal", "-d", "8", "--seeds", "2", "--n-fresh", "2"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("term,x_name,x,y_median,y_q25,y_q75,n_seeds\n"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn errors_are_one_line_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"schema": 1, "protocol": {"vgrid": [16]}}"#);
    let e = error_line(&run(&["show-config", "--config", &cfg]));
    assert_eq!(e["error"], "unknown_key");
    assert!(e["message"].as_str().unwrap().contains("vgrid"));

    let cfg = write_config(dir.path(), r#"{"schema": 99}"#);
    let e = error_line(&run(&["sweep", "--config", &cfg, "--dry-run"]));
    assert_eq!(e["error"], "schema_mismatch");
    let msg = e["message"].as_str().unwrap();
    assert!(msg.contains("99") && msg.contains('1'));

    let cfg = write_config(dir.path(), r#"{"schema": 1, "options": {"budget": 10}, "protocol": {"v_grid": [16]}}"#);
    let e = error_line(&run(&["sweep", "--config", &cfg, "--out", dir.path().join("x").to_str().unwrap()]));
    assert_eq!(e["error"], "resource_cap");

    let e = error_line(&run(&["show-config", "--config", "/nonexistent/run.json"]));
    assert_eq!(e["error"], "io");
}
