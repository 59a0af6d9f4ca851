use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pnmsim_cli::commands::{heatmap_from_csv, AblateRow, DSE_TITLE};
use pnmsim_core::mapper::StrategyKind;

const BIN: &str = env!("CARGO_BIN_EXE_pnmsim");

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn pnmsim(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("PNMSIM_OUT_DIR")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn run_in(dir: &Path, cmd: &str, config: &Path, extra: &[&str]) -> Output {
    let out = dir.join("out");
    let mut args = vec![
        cmd,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    pnmsim(&args)
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

const MINIMAL: &str = "model = \"qwen3-235b-like\"\n[workload]\nbatch = 1\nseq_len = 4096\n";

#[test]
fn minimal_simulate_writes_two_files() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), MINIMAL);
    let o = run_in(t.path(), "simulate", &cfg, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(files(&t.path().join("out")), ["report.json", "stages.csv"]);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(t.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(report["config"]["model"]["d_model"], 4096);
}

#[test]
fn invalid_strategy_is_a_config_error() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), &format!("strategy = \"ring\"\n{MINIMAL}"));
    let o = run_in(t.path(), "simulate", &cfg, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`strategy`"));
}

#[test]
fn unknown_key_is_a_config_error() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), &format!("{MINIMAL}colour = 3\n"));
    assert_eq!(run_in(t.path(), "simulate", &cfg, &[]).status.code(), Some(2));
}

#[test]
fn simulate_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let cfg = configs().join("simulate.toml");
    let mut reports = Vec::new();
    for i in 0..2 {
        let out = t.path().join(format!("run{i}"));
        let o = pnmsim(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "9",
        ]);
        assert_eq!(o.status.code(), Some(0));
        reports.push(std::fs::read(out.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn stage_breakdown_matches_golden() {
    let t = tempfile::tempdir().unwrap();
    let o = run_in(
        t.path(),
        "simulate",
        &configs().join("simulate.toml"),
        &["--format", "csv"],
    );
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(files(&t.path().join("out")), ["stages.csv"]);
    let got = std::fs::read_to_string(t.path().join("out/stages.csv")).unwrap();
    let want = include_str!("golden/simulate_stages.csv");
    assert_eq!(got, want);
}

#[test]
fn out_dir_from_environment() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), MINIMAL);
    let out = t.path().join("from-env");
    let o = Command::new(BIN)
        .args(["simulate", "--config", cfg.to_str().unwrap(), "--format", "json"])
        .env("PNMSIM_OUT_DIR", &out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(files(&out), ["report.json"]);
}

#[test]
fn verify_default_passes_and_zero_threshold_fails() {
    let t = tempfile::tempdir().unwrap();
    let o = run_in(t.path(), "verify", &configs().join("verify.toml"), &["--threads", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let cfg = write_config(
        t.path(),
        "model = \"desk-gqa\"\n[verify]\nseeds = 2\nthreshold = 0.0\nseq_len = 64\n",
    );
    let o = run_in(t.path(), "verify", &cfg, &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
}

#[test]
fn single_shard_verify_passes() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(
        t.path(),
        "[model]\nname = \"one-shard\"\nd_model = 64\nq_heads = 32\nkv_heads = 16\nhead_dim = 16\ngroup_size = 2\nlayers = 1\nattn_kind = \"gqa\"\n[verify]\nseeds = 3\nseq_len = 50\n",
    );
    let o = run_in(t.path(), "verify", &cfg, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(t.path().join("out/verify.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(csv.as_bytes());
    let shards = rdr.headers().unwrap().iter().position(|h| h == "shards").unwrap();
    assert!(rdr.records().all(|r| &r.unwrap()[shards] == "1"));
}

#[test]
fn dse_grid_shape_and_svg_round_trip() {
    let t = tempfile::tempdir().unwrap();
    let o = run_in(t.path(), "sweep", &configs().join("dse.toml"), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(t.path().join("out/dse.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8 * 5);
    let svg = std::fs::read_to_string(t.path().join("out/dse.svg")).unwrap();
    assert!(!svg.contains("href") && !svg.contains("<image"));
    let again = heatmap_from_csv(&csv, DSE_TITLE, "per-cube TFLOPS", "D2D TB/s")
        .unwrap()
        .render();
    assert_eq!(again, svg);
}

#[test]
fn single_cell_dse() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(
        t.path(),
        &format!("{MINIMAL}[sweep]\nkind = \"dse\"\ncube_tflops = [96]\nd2d_tbps = [1.5]\nx_label = \"TF\"\n"),
    );
    assert_eq!(run_in(t.path(), "sweep", &cfg, &[]).status.code(), Some(0));
    let svg = std::fs::read_to_string(t.path().join("out/dse.svg")).unwrap();
    assert_eq!(svg.matches("<rect").count(), 1);
    assert!(svg.contains(">TF<"));
}

#[test]
fn empty_sweep_axis_is_rejected() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(
        t.path(),
        &format!("{MINIMAL}[sweep]\nkind = \"dse\"\ncube_tflops = []\nd2d_tbps = [1.5]\n"),
    );
    assert_eq!(run_in(t.path(), "sweep", &cfg, &[]).status.code(), Some(2));
}

#[test]
fn batch_sweep_outputs() {
    let t = tempfile::tempdir().unwrap();
    let o = run_in(t.path(), "sweep", &configs().join("batch.toml"), &[]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(files(&t.path().join("out")), ["batch.csv", "batch.svg", "sweep.json"]);
}

#[test]
fn ablation_table() {
    let t = tempfile::tempdir().unwrap();
    let o = run_in(t.path(), "ablate", &configs().join("ablate.toml"), &[]);
    assert_eq!(o.status.code(), Some(0));
    let mut rdr = csv::Reader::from_path(t.path().join("out/ablate.csv")).unwrap();
    let rows: Vec<AblateRow> = rdr.deserialize().collect::<Result<_, _>>().unwrap();
    assert_eq!(rows.len(), 9);
    let tp16: Vec<&AblateRow> = rows.iter().filter(|r| r.strategy == StrategyKind::Tp16).collect();
    assert_eq!(tp16.len(), 3);
    for r in tp16 {
        assert_eq!(r.speedup, 1.0);
        assert_eq!(r.comm_speedup, 1.0);
    }
    let comm: Vec<f64> = rows
        .iter()
        .filter(|r| r.strategy == StrategyKind::HpRo)
        .map(|r| r.comm_speedup)
        .collect();
    assert_eq!(comm.len(), 3);
    assert!(comm.windows(2).all(|w| w[1] > w[0]), "{comm:?}");
}

#[test]
fn roofline_outputs() {
    let t = tempfile::tempdir().unwrap();
    let o = run_in(t.path(), "roofline", &configs().join("roofline.toml"), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(t.path().join("out/roofline.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 3);
}
