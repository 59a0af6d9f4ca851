use serde::{Deserialize, Serialize};

use super::{simulate, HardwareProfile, RunResult};
use crate::error::{Error, Result};
use crate::mapper::StrategyKind;
use crate::par::{self, Exec};
use crate::workload::{ModelConfig, WorkloadPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: StrategyKind,
    pub latency: f64,
    pub comm_time: f64,
    /// TP16 latency over this strategy's latency.
    pub speedup: f64,
    /// TP16 communication time over this strategy's communication time.
    pub comm_speedup: f64,
    pub run: RunResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub batch: usize,
    pub seq_len: usize,
    pub rows: Vec<AblationRow>,
}

impl Ablation {
    pub fn get(&self, s: StrategyKind) -> &AblationRow {
        self.rows
            .iter()
            .find(|r| r.strategy == s)
            .expect("all strategies are evaluated")
    }
}

fn ratio(base: f64, x: f64) -> f64 {
    if x > 0.0 {
        base / x
    } else if base > 0.0 {
        f64::INFINITY
    } else {
        1.0
    }
}

/// Runs every strategy on the same point and reports speedups against TP16.
pub fn ablate(model: &ModelConfig, point: &WorkloadPoint, profile: &HardwareProfile, exec: Exec) -> Result<Ablation> {
    let runs: Vec<Result<RunResult>> = par::map(&StrategyKind::ALL, exec, |&s| simulate(model, point, s, profile));
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let base = runs
        .iter()
        .find(|r| r.strategy == Some(StrategyKind::Tp16))
        .expect("TP16 is in the strategy list")
        .clone();
    let rows = runs
        .into_iter()
        .map(|r| AblationRow {
            strategy: r.strategy.expect("simulated runs carry a strategy"),
            latency: r.latency,
            comm_time: r.comm_time(),
            speedup: ratio(base.latency, r.latency),
            comm_speedup: ratio(base.comm_time(), r.comm_time()),
            run: r,
        })
        .collect();
    Ok(Ablation {
        batch: point.batch,
        seq_len: point.seq_len,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPoint {
    pub batch: usize,
    pub latency: f64,
    /// Tokens per second for one layer.
    pub throughput_per_layer: f64,
    pub tokens_per_joule: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSweep {
    pub seq_len: usize,
    pub strategy: StrategyKind,
    pub points: Vec<BatchPoint>,
    /// First batch after which one more step gains less than `SATURATION_GAIN`.
    pub saturation_batch: Option<usize>,
}

pub const SATURATION_GAIN: f64 = 0.05;

pub fn sweep_batch(
    model: &ModelConfig,
    seq_len: usize,
    batches: &[usize],
    strategy: StrategyKind,
    profile: &HardwareProfile,
    exec: Exec,
) -> Result<BatchSweep> {
    if batches.is_empty() {
        return Err(Error::InvalidWorkload("empty batch list".into()));
    }
    let mut sorted = batches.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let runs = par::map(&sorted, exec, |&b| {
        simulate(model, &WorkloadPoint::new(b, seq_len), strategy, profile)
    });
    let points = runs
        .into_iter()
        .map(|r| {
            r.map(|r| BatchPoint {
                batch: r.batch,
                latency: r.latency,
                throughput_per_layer: if r.latency > 0.0 {
                    r.batch as f64 / r.latency
                } else {
                    0.0
                },
                tokens_per_joule: r.tokens_per_joule,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let saturation_batch = points
        .windows(2)
        .find(|w| w[1].throughput_per_layer < w[0].throughput_per_layer * (1.0 + SATURATION_GAIN))
        .map(|w| w[0].batch);
    Ok(BatchSweep {
        seq_len,
        strategy,
        points,
        saturation_batch,
    })
}

/// Latency over a grid of per-cube compute rates and link bandwidths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DseGrid {
    pub batch: usize,
    pub seq_len: usize,
    pub strategy: StrategyKind,
    pub cube_flops: Vec<f64>,
    pub link_bw: Vec<f64>,
    /// `latency[i][j]` for `cube_flops[i]` and `link_bw[j]`.
    pub latency: Vec<Vec<f64>>,
}

pub const PLATEAU_TOLERANCE: f64 = 1.02;

impl DseGrid {
    /// Smallest compute rate whose latency is within `PLATEAU_TOLERANCE` of
    /// the fastest-compute latency at every link bandwidth.
    pub fn compute_plateau(&self) -> Option<f64> {
        let last = self.latency.last()?;
        self.cube_flops
            .iter()
            .zip(&self.latency)
            .find(|(_, row)| row.iter().zip(last).all(|(l, best)| *l <= best * PLATEAU_TOLERANCE))
            .map(|(c, _)| *c)
    }

    /// Log-log slope of latency against compute rate, at the lowest link
    /// bandwidth. Positive means faster compute lowers latency.
    pub fn compute_elasticity(&self) -> f64 {
        let col: Vec<f64> = self.latency.iter().map(|r| r[0]).collect();
        elasticity(&self.cube_flops, &col)
    }

    /// Same, against link bandwidth at the lowest compute rate.
    pub fn link_elasticity(&self) -> f64 {
        elasticity(&self.link_bw, &self.latency[0])
    }
}

fn elasticity(x: &[f64], lat: &[f64]) -> f64 {
    let (x0, x1) = (x[0], x[x.len() - 1]);
    if x1 <= x0 {
        return 0.0;
    }
    (lat[0].ln() - lat[lat.len() - 1].ln()) / (x1.ln() - x0.ln())
}

pub fn sweep_dse(
    model: &ModelConfig,
    point: &WorkloadPoint,
    strategy: StrategyKind,
    profile: &HardwareProfile,
    cube_flops: &[f64],
    link_bw: &[f64],
    exec: Exec,
) -> Result<DseGrid> {
    if cube_flops.is_empty() || link_bw.is_empty() {
        return Err(Error::InvalidHardware("empty design-space axis".into()));
    }
    let mut cf = cube_flops.to_vec();
    let mut lb = link_bw.to_vec();
    for v in cf.iter().chain(&lb) {
        if !(*v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidHardware(format!(
                "design-space value {v} must be positive"
            )));
        }
    }
    cf.sort_by(f64::total_cmp);
    lb.sort_by(f64::total_cmp);
    cf.dedup();
    lb.dedup();
    let cells: Vec<(f64, f64)> = cf.iter().flat_map(|&c| lb.iter().map(move |&l| (c, l))).collect();
    let lat = par::map(&cells, exec, |&(c, l)| {
        let p = profile.with_cube_flops(c).with_link_bw(l);
        simulate(model, point, strategy, &p).map(|r| r.latency)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let latency = lat.chunks(lb.len()).map(|c| c.to_vec()).collect();
    Ok(DseGrid {
        batch: point.batch,
        seq_len: point.seq_len,
        strategy,
        cube_flops: cf,
        link_bw: lb,
        latency,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qwen() -> ModelConfig {
        ModelConfig::preset("qwen3-235b-like").unwrap()
    }

    fn pnm() -> HardwareProfile {
        HardwareProfile::preset("pnm-16").unwrap()
    }

    #[test]
    fn tp16_is_its_own_baseline() {
        let a = ablate(&qwen(), &WorkloadPoint::new(4, 16384), &pnm(), Exec::Sequential).unwrap();
        assert_eq!(a.get(StrategyKind::Tp16).speedup, 1.0);
        assert!(a.get(StrategyKind::HpRo).speedup >= 1.0);
        assert!(a.get(StrategyKind::HpRo).comm_speedup > 1.0);
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let m = qwen();
        let pt = WorkloadPoint::new(2, 4096);
        let g1 = sweep_dse(
            &m,
            &pt,
            StrategyKind::HpRo,
            &pnm(),
            &[48e12, 96e12],
            &[500e9, 1500e9],
            Exec::Sequential,
        )
        .unwrap();
        let g2 = sweep_dse(
            &m,
            &pt,
            StrategyKind::HpRo,
            &pnm(),
            &[96e12, 48e12],
            &[1500e9, 500e9],
            Exec::Parallel,
        )
        .unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn throughput_grows_then_saturates() {
        let b: Vec<usize> = (0..9).map(|i| 1 << i).collect();
        let s = sweep_batch(&qwen(), 8192, &b, StrategyKind::HpRo, &pnm(), Exec::Sequential).unwrap();
        assert_eq!(s.points.len(), 9);
        assert!(s.points[1].throughput_per_layer > s.points[0].throughput_per_layer);
        assert!(s.points.windows(2).all(|w| w[1].latency >= w[0].latency));
    }

    #[test]
    fn plateau_and_elasticity_on_synthetic_grid() {
        let g = DseGrid {
            batch: 1,
            seq_len: 1,
            strategy: StrategyKind::HpRo,
            cube_flops: vec![1.0, 2.0, 4.0],
            link_bw: vec![1.0, 10.0],
            latency: vec![vec![4.0, 2.0], vec![1.01, 1.0], vec![1.0, 1.0]],
        };
        assert_eq!(g.compute_plateau(), Some(2.0));
        assert!((g.compute_elasticity() - 1.0).abs() < 1e-12);
        assert!((g.link_elasticity() - 2f64.ln() / 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_axes() {
        let m = qwen();
        let pt = WorkloadPoint::new(1, 64);
        assert!(sweep_dse(&m, &pt, StrategyKind::HpRo, &pnm(), &[], &[1e9], Exec::Sequential).is_err());
        assert!(sweep_dse(&m, &pt, StrategyKind::HpRo, &pnm(), &[-1.0], &[1e9], Exec::Sequential).is_err());
        assert!(sweep_batch(&m, 64, &[], StrategyKind::HpRo, &pnm(), Exec::Sequential).is_err());
    }
}
