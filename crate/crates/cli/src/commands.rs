use std::path::{Path, PathBuf};

use log::info;
use pnmsim_core::engine::{self, energy_power, evaluate, HardwareProfile, RunResult, PROFILES};
use pnmsim_core::mapper::{Phase, StrategyKind};
use pnmsim_core::numerics::verify_flow;
use pnmsim_core::par::{self, Exec};
use pnmsim_core::sa_model::Resource;
use pnmsim_core::workload::{ridge_point, WorkloadPoint};
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, RunConfig, SweepKind};
use crate::svg::{BarChart, Heatmap};

pub const SCHEMA_VERSION: u32 = 1;
pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
    Verification(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Config(_) => 2,
            Failure::Verification(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) | Failure::Verification(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<pnmsim_core::error::Error> for Failure {
    fn from(e: pnmsim_core::error::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn io(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Json,
    Svg,
    All,
}

impl Format {
    fn csv(self) -> bool {
        matches!(self, Format::Csv | Format::All)
    }
    fn json(self) -> bool {
        matches!(self, Format::Json | Format::All)
    }
    fn svg(self) -> bool {
        matches!(self, Format::Svg | Format::All)
    }
}

pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub format: Format,
    pub exec: Exec,
}

impl Context {
    fn write(&self, name: &str, content: &str) -> Result<PathBuf, Failure> {
        std::fs::create_dir_all(&self.out).map_err(|e| io(&self.out, e))?;
        let path = self.out.join(name);
        std::fs::write(&path, content).map_err(|e| io(&path, e))?;
        info!("wrote {}", path.display());
        Ok(path)
    }

    fn report<T: Serialize>(&self, name: &str, command: &str, result: &T) -> Result<(), Failure> {
        if !self.format.json() {
            return Ok(());
        }
        let r = Report {
            schema_version: SCHEMA_VERSION,
            csv_schema_version: CSV_SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION"),
            command,
            config_hash: self.config.hash(),
            seed: self.config.seed,
            config: &self.config,
            result,
        };
        let mut text = serde_json::to_string_pretty(&r).map_err(|e| Failure::Runtime(e.to_string()))?;
        text.push('\n');
        self.write(name, &text).map(|_| ())
    }

    fn csv<R: Serialize>(&self, name: &str, rows: &[R]) -> Result<(), Failure> {
        if self.format.csv() {
            self.write(name, &to_csv(rows)?)?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct Report<'a, T> {
    schema_version: u32,
    csv_schema_version: u32,
    tool_version: &'a str,
    command: &'a str,
    config_hash: String,
    seed: u64,
    config: &'a RunConfig,
    result: &'a T,
}

pub fn to_csv<R: Serialize>(rows: &[R]) -> Result<String, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::Runtime(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Failure::Runtime(e.to_string()))
}

fn us(s: f64) -> f64 {
    s * 1e6
}

#[derive(Serialize)]
struct StageRow {
    phase: &'static str,
    compute_us: f64,
    comm_us: f64,
    binding: Resource,
    flops: f64,
    hbm_bytes: f64,
    wire_bytes: f64,
}

fn stage_rows(r: &RunResult) -> Vec<StageRow> {
    r.stages
        .iter()
        .map(|s| StageRow {
            phase: s.phase.name(),
            compute_us: us(s.compute_time),
            comm_us: us(s.comm_time),
            binding: s.binding,
            flops: s.flops,
            hbm_bytes: s.hbm_bytes,
            wire_bytes: s.wire_bytes,
        })
        .collect()
}

#[derive(Serialize)]
struct SimulateResult<'a> {
    run: &'a RunResult,
    energy: engine::EnergyReport,
}

pub fn simulate(ctx: &Context) -> Result<(), Failure> {
    let c = &ctx.config;
    let point = c.point()?;
    let run = evaluate(&c.model, &point, c.strategy, &c.hardware)?;
    info!(
        "{} {} B={} S={}: {:.3} us",
        c.hardware.name,
        c.strategy.name(),
        point.batch,
        point.seq_len,
        us(run.latency)
    );
    let energy = energy_power(&run, &c.hardware, c.model.layers);
    ctx.report("report.json", "simulate", &SimulateResult { run: &run, energy })?;
    ctx.csv("stages.csv", &stage_rows(&run))
}

#[derive(Debug, Clone, Serialize)]
struct VerifyRow {
    strategy: StrategyKind,
    seed: u64,
    batch: usize,
    seq_len: usize,
    shards: usize,
    max_abs_err: f64,
    max_rel_err: f64,
    pass: bool,
}

pub fn verify(ctx: &Context) -> Result<(), Failure> {
    let c = &ctx.config;
    let v = &c.verify;
    let point = WorkloadPoint::new(v.batch, v.seq_len);
    let cases: Vec<(StrategyKind, u64)> = c
        .verify_strategies()
        .into_iter()
        .flat_map(|s| (0..v.seeds as u64).map(move |i| (s, i)))
        .map(|(s, i)| (s, c.seed.wrapping_add(i)))
        .collect();
    let results = par::map(&cases, ctx.exec, |&(s, seed)| verify_flow(s, &c.model, &point, seed));
    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        let r = r?;
        rows.push(VerifyRow {
            strategy: r.strategy,
            seed: r.seed,
            batch: r.batch,
            seq_len: r.seq_len,
            shards: r.shards,
            max_abs_err: r.max_abs_err,
            max_rel_err: r.max_rel_err,
            pass: r.max_rel_err <= v.threshold,
        });
    }
    ctx.report("verify.json", "verify", &rows)?;
    ctx.csv("verify.csv", &rows)?;
    let failing: Vec<String> = rows
        .iter()
        .filter(|r| !r.pass)
        .map(|r| format!("{} seed {}: rel err {:.3e}", r.strategy.name(), r.seed, r.max_rel_err))
        .collect();
    info!("{} cases, {} failing", rows.len(), failing.len());
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "{} of {} cases exceed relative error {:e}:\n  {}",
            failing.len(),
            rows.len(),
            v.threshold,
            failing.join("\n  ")
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DseRow {
    pub cube_tflops: f64,
    pub d2d_tbps: f64,
    pub latency_us: f64,
}

/// Rebuilds the heatmap from the grid CSV; axes follow first appearance.
pub fn heatmap_from_csv(text: &str, title: &str, x_label: &str, y_label: &str) -> Result<Heatmap, Failure> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<DseRow> = rdr
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::Runtime(format!("grid CSV: {e}")))?;
    let mut x: Vec<f64> = Vec::new();
    let mut y: Vec<f64> = Vec::new();
    for r in &rows {
        if !x.contains(&r.cube_tflops) {
            x.push(r.cube_tflops);
        }
        if !y.contains(&r.d2d_tbps) {
            y.push(r.d2d_tbps);
        }
    }
    let mut values = vec![vec![f64::NAN; x.len()]; y.len()];
    for r in &rows {
        let i = y.iter().position(|v| *v == r.d2d_tbps).expect("axis built above");
        let j = x.iter().position(|v| *v == r.cube_tflops).expect("axis built above");
        values[i][j] = r.latency_us;
    }
    Ok(Heatmap {
        title: title.into(),
        x_label: x_label.into(),
        y_label: y_label.into(),
        x,
        y,
        values,
    })
}

#[derive(Serialize)]
struct DseSummary<'a> {
    grid: &'a engine::DseGrid,
    compute_plateau_tflops: Option<f64>,
    compute_elasticity: f64,
    link_elasticity: f64,
}

#[derive(Serialize)]
struct BatchRow {
    batch: usize,
    latency_us: f64,
    throughput_tok_per_us: f64,
    tokens_per_joule: f64,
}

pub const DSE_TITLE: &str = "Latency (us)";

pub fn sweep(ctx: &Context) -> Result<(), Failure> {
    let c = &ctx.config;
    let s = c
        .sweep
        .as_ref()
        .ok_or_else(|| Failure::Config("field `sweep`: the sweep command needs a [sweep] table".into()))?;
    match s.kind {
        SweepKind::Dse => {
            if s.cube_tflops.is_empty() || s.d2d_tbps.is_empty() {
                return Err(Failure::Config(
                    "field `sweep`: cube_tflops and d2d_tbps must be non-empty".into(),
                ));
            }
            if s.cube_tflops
                .iter()
                .chain(&s.d2d_tbps)
                .any(|v| !(*v > 0.0) || !v.is_finite())
            {
                return Err(Failure::Config("field `sweep`: axis values must be positive".into()));
            }
            let point = c.point()?;
            let flops: Vec<f64> = s.cube_tflops.iter().map(|t| t * 1e12).collect();
            let links: Vec<f64> = s.d2d_tbps.iter().map(|t| t * 1e12).collect();
            let grid = engine::sweep_dse(&c.model, &point, c.strategy, &c.hardware, &flops, &links, ctx.exec)?;
            let mut rows = Vec::new();
            for (i, f) in grid.cube_flops.iter().enumerate() {
                for (j, l) in grid.link_bw.iter().enumerate() {
                    rows.push(DseRow {
                        cube_tflops: f / 1e12,
                        d2d_tbps: l / 1e12,
                        latency_us: us(grid.latency[i][j]),
                    });
                }
            }
            let text = to_csv(&rows)?;
            if ctx.format.csv() {
                ctx.write("dse.csv", &text)?;
            }
            if ctx.format.svg() {
                let x = s.x_label.as_deref().unwrap_or("per-cube TFLOPS");
                let y = s.y_label.as_deref().unwrap_or("D2D TB/s");
                ctx.write("dse.svg", &heatmap_from_csv(&text, DSE_TITLE, x, y)?.render())?;
            }
            let summary = DseSummary {
                grid: &grid,
                compute_plateau_tflops: grid.compute_plateau().map(|f| f / 1e12),
                compute_elasticity: grid.compute_elasticity(),
                link_elasticity: grid.link_elasticity(),
            };
            ctx.report("sweep.json", "sweep", &summary)
        }
        SweepKind::Batch => {
            if s.batches.is_empty() {
                return Err(Failure::Config("field `sweep.batches`: must be non-empty".into()));
            }
            let seq = c.point()?.seq_len;
            let sw = engine::sweep_batch(&c.model, seq, &s.batches, c.strategy, &c.hardware, ctx.exec)?;
            let rows: Vec<BatchRow> = sw
                .points
                .iter()
                .map(|p| BatchRow {
                    batch: p.batch,
                    latency_us: us(p.latency),
                    throughput_tok_per_us: p.throughput_per_layer * 1e-6,
                    tokens_per_joule: p.tokens_per_joule,
                })
                .collect();
            ctx.csv("batch.csv", &rows)?;
            if ctx.format.svg() {
                let chart = BarChart {
                    title: format!("Throughput per layer, S={seq}"),
                    x_label: s.x_label.clone().unwrap_or_else(|| "batch".into()),
                    y_label: s.y_label.clone().unwrap_or_else(|| "tokens/us".into()),
                    categories: rows.iter().map(|r| r.batch.to_string()).collect(),
                    series: vec![(
                        c.strategy.name().into(),
                        rows.iter().map(|r| r.throughput_tok_per_us).collect(),
                    )],
                };
                ctx.write("batch.svg", &chart.render())?;
            }
            ctx.report("sweep.json", "sweep", &sw)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateRow {
    pub seq_len: usize,
    pub strategy: StrategyKind,
    pub latency_us: f64,
    pub comm_us: f64,
    pub speedup: f64,
    pub comm_speedup: f64,
}

fn seq_label(s: usize) -> String {
    if s >= 1 << 20 && s.is_multiple_of(1 << 20) {
        format!("{}M", s >> 20)
    } else if s >= 1024 && s.is_multiple_of(1024) {
        format!("{}K", s >> 10)
    } else {
        s.to_string()
    }
}

pub fn ablate(ctx: &Context) -> Result<(), Failure> {
    let c = &ctx.config;
    let a = c
        .ablate
        .as_ref()
        .ok_or_else(|| Failure::Config("field `ablate`: the ablate command needs an [ablate] table".into()))?;
    if a.seq_lens.is_empty() {
        return Err(Failure::Config("field `ablate.seq_lens`: must be non-empty".into()));
    }
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &s in &a.seq_lens {
        let ab = engine::ablate(&c.model, &WorkloadPoint::new(a.batch, s), &c.hardware, ctx.exec)?;
        for r in &ab.rows {
            rows.push(AblateRow {
                seq_len: s,
                strategy: r.strategy,
                latency_us: us(r.latency),
                comm_us: us(r.comm_time),
                speedup: r.speedup,
                comm_speedup: r.comm_speedup,
            });
        }
        runs.push(ab);
    }
    ctx.csv("ablate.csv", &rows)?;
    if ctx.format.svg() {
        let categories: Vec<String> = a.seq_lens.iter().map(|&s| seq_label(s)).collect();
        let series = |f: fn(&AblateRow) -> f64| -> Vec<(String, Vec<f64>)> {
            StrategyKind::ALL
                .iter()
                .map(|&k| {
                    (
                        k.name().to_string(),
                        rows.iter().filter(|r| r.strategy == k).map(f).collect(),
                    )
                })
                .collect()
        };
        let total = BarChart {
            title: format!("Speedup over TP16, B={}", a.batch),
            x_label: "sequence length".into(),
            y_label: "speedup".into(),
            categories: categories.clone(),
            series: series(|r| r.speedup),
        };
        ctx.write("ablate.svg", &total.render())?;
        let comm = BarChart {
            title: format!("Communication speedup over TP16, B={}", a.batch),
            y_label: "comm speedup".into(),
            series: series(|r| r.comm_speedup),
            ..total
        };
        ctx.write("ablate_comm.svg", &comm.render())?;
    }
    ctx.report("ablate.json", "ablate", &runs)
}

#[derive(Debug, Clone, Serialize)]
struct RooflineRow {
    profile: String,
    batch: usize,
    seq_len: usize,
    latency_us: f64,
    attention_binding: Resource,
    ridge_flops_per_byte: f64,
    aggregate_hbm_tbps: f64,
    energy_j: f64,
    avg_power_w: f64,
    tokens_per_joule: f64,
    /// Latency of the first listed profile at the same point over this one.
    speedup_vs_first: f64,
}

pub fn roofline(ctx: &Context) -> Result<(), Failure> {
    let c = &ctx.config;
    let (names, seqs, batch) = match &c.roofline {
        Some(r) => (r.profiles.clone(), r.seq_lens.clone(), r.batch),
        None => {
            let p = c.point()?;
            (
                PROFILES.iter().map(|s| s.to_string()).collect(),
                vec![p.seq_len],
                p.batch,
            )
        }
    };
    if names.is_empty() || seqs.is_empty() {
        return Err(Failure::Config(
            "field `roofline`: profiles and seq_lens must be non-empty".into(),
        ));
    }
    let profiles: Vec<HardwareProfile> = names
        .iter()
        .map(|n| {
            if *n == c.hardware.name {
                Ok(c.hardware.clone())
            } else {
                HardwareProfile::preset(n)
            }
        })
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &s in &seqs {
        let point = WorkloadPoint::new(batch, s);
        let mut first = None;
        for p in &profiles {
            let r = evaluate(&c.model, &point, c.strategy, p)?;
            let base = *first.get_or_insert(r.latency);
            rows.push(RooflineRow {
                profile: p.name.clone(),
                batch,
                seq_len: s,
                latency_us: us(r.latency),
                attention_binding: r.stage(Phase::Attention).map_or(Resource::Memory, |a| a.binding),
                ridge_flops_per_byte: ridge_point(p.aggregate_flops(), p.aggregate_hbm_bw()),
                aggregate_hbm_tbps: p.aggregate_hbm_bw() / 1e12,
                energy_j: r.energy,
                avg_power_w: r.avg_power,
                tokens_per_joule: r.tokens_per_joule,
                speedup_vs_first: base / r.latency,
            });
            runs.push(r);
        }
    }
    ctx.csv("roofline.csv", &rows)?;
    if ctx.format.svg() {
        let chart = BarChart {
            title: format!("Per-layer latency, B={batch}"),
            x_label: "sequence length".into(),
            y_label: "latency (us)".into(),
            categories: seqs.iter().map(|&s| seq_label(s)).collect(),
            series: profiles
                .iter()
                .map(|p| {
                    (
                        p.name.clone(),
                        rows.iter()
                            .filter(|r| r.profile == p.name)
                            .map(|r| r.latency_us)
                            .collect(),
                    )
                })
                .collect(),
        };
        ctx.write("roofline.svg", &chart.render())?;
    }
    ctx.report("roofline.json", "roofline", &runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_round_trips_through_csv() {
        let rows = vec![
            DseRow {
                cube_tflops: 8.0,
                d2d_tbps: 0.5,
                latency_us: 36.051234567,
            },
            DseRow {
                cube_tflops: 96.0,
                d2d_tbps: 0.5,
                latency_us: 3.97,
            },
        ];
        let text = to_csv(&rows).unwrap();
        let h = heatmap_from_csv(&text, "t", "x", "y").unwrap();
        assert_eq!(h.values, vec![vec![36.051234567, 3.97]]);
        assert_eq!(h.x, vec![8.0, 96.0]);
    }

    #[test]
    fn seq_labels() {
        assert_eq!(seq_label(65536), "64K");
        assert_eq!(seq_label(1 << 20), "1M");
        assert_eq!(seq_label(1000), "1000");
    }
}
