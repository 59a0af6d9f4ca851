//! End-to-end latency, energy and power of one decode step of one layer.

mod profile;
mod sweeps;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fabric::concurrent_collective_cost;
use crate::mapper::{plan, EventKind, Phase, Placement, StrategyKind};
use crate::sa_model::{kernel_time, Resource};
use crate::workload::{derive_stage_gemms, roofline, ModelConfig, Stage, WorkloadPoint};

pub use profile::{C2cSpec, DeviceKind, GpuSpec, HardwareProfile, PowerSpec, PROFILES};
pub use sweeps::{ablate, sweep_batch, sweep_dse, Ablation, AblationRow, BatchPoint, BatchSweep, DseGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageBreakdown {
    pub phase: Phase,
    pub compute_time: f64,
    pub comm_time: f64,
    /// Resource that bounds the slowest kernels of this phase.
    pub binding: Resource,
    pub flops: f64,
    pub hbm_bytes: f64,
    pub wire_bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub profile: String,
    pub model: String,
    pub strategy: Option<StrategyKind>,
    pub batch: usize,
    pub seq_len: usize,
    pub stages: Vec<StageBreakdown>,
    pub latency: f64,
    /// Busy time of all memory, as package-wide equivalent seconds.
    pub hbm_active: f64,
    /// Busy time of all compute, as package-wide equivalent seconds.
    pub compute_active: f64,
    pub wire_bytes: f64,
    pub energy: f64,
    pub avg_power: f64,
    pub tokens_per_joule: f64,
}

impl RunResult {
    pub fn stage(&self, phase: Phase) -> Option<&StageBreakdown> {
        self.stages.iter().find(|s| s.phase == phase)
    }

    pub fn comm_time(&self) -> f64 {
        self.stages.iter().map(|s| s.comm_time).sum()
    }

    pub fn compute_time(&self) -> f64 {
        self.stages.iter().map(|s| s.compute_time).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub joules: f64,
    pub watts: f64,
    pub tokens_per_joule: f64,
    pub static_joules: f64,
    pub hbm_joules: f64,
    pub compute_joules: f64,
    pub link_joules: f64,
}

/// `static * latency + dynamic power * active time + link energy`, with
/// tokens per joule over all layers of the model.
pub fn energy_power(result: &RunResult, profile: &HardwareProfile, layers: usize) -> EnergyReport {
    let p = &profile.power;
    let dynamic = 1.0 - p.static_fraction;
    let static_joules = p.static_power() * result.latency;
    let hbm_joules = dynamic * p.hbm_stacks as f64 * p.hbm_w * result.hbm_active;
    let compute_joules = dynamic * p.compute_units as f64 * p.compute_w * result.compute_active;
    let link_joules = p.link_pj_per_byte * 1e-12 * result.wire_bytes;
    let joules = static_joules + hbm_joules + compute_joules + link_joules;
    let watts = if result.latency > 0.0 {
        joules / result.latency
    } else {
        0.0
    };
    let tokens_per_joule = if joules > 0.0 {
        result.batch as f64 / (joules * layers as f64)
    } else {
        0.0
    };
    EnergyReport {
        joules,
        watts,
        tokens_per_joule,
        static_joules,
        hbm_joules,
        compute_joules,
        link_joules,
    }
}

fn finish(mut r: RunResult, profile: &HardwareProfile, layers: usize) -> RunResult {
    let e = energy_power(&r, profile, layers);
    r.energy = e.joules;
    r.avg_power = e.watts;
    r.tokens_per_joule = e.tokens_per_joule;
    r
}

#[derive(Default)]
struct PhaseAcc {
    compute: f64,
    comm: f64,
    crit_compute: f64,
    crit_memory: f64,
    flops: f64,
    bytes: f64,
    wire: f64,
}

/// Evaluates the strategy's schedule on a near-memory profile. Compute
/// events last as long as their slowest cube, collectives as long as the
/// fabric model says, and every event waits for its dependencies.
pub fn simulate(
    model: &ModelConfig,
    point: &WorkloadPoint,
    strategy: StrategyKind,
    profile: &HardwareProfile,
) -> Result<RunResult> {
    profile.validate()?;
    if profile.kind != DeviceKind::Pnm {
        return Err(Error::InvalidHardware(format!(
            "{} is a GPU profile; use the roofline baseline",
            profile.name
        )));
    }
    let placement = Placement::build(strategy, model, point, &profile.topo, profile.destination)?;
    let sched = plan(model, point, &placement)?;
    let cube = profile.sim_cube();
    let cubes = profile.cubes as f64;

    let mut finish_at = vec![0.0f64; sched.events.len()];
    let mut phases: BTreeMap<Phase, PhaseAcc> = Phase::ALL.iter().map(|&p| (p, PhaseAcc::default())).collect();
    let (mut hbm_active, mut compute_active, mut wire) = (0.0, 0.0, 0.0);
    for e in &sched.events {
        let start = e.deps.iter().map(|&d| finish_at[d]).fold(0.0, f64::max);
        let acc = phases.get_mut(&e.phase).expect("every phase present");
        let duration = match &e.kind {
            EventKind::Compute { kernels } => {
                let mut slowest: Option<crate::sa_model::KernelTiming> = None;
                for k in kernels {
                    let t = kernel_time(&k.spec, &cube, profile.continuous_tiling)?;
                    hbm_active += t.memory_time / cubes;
                    compute_active += t.compute_time / cubes;
                    acc.flops += k.spec.flops();
                    acc.bytes += k.spec.streamed_bytes;
                    if slowest.as_ref().is_none_or(|s| t.time > s.time) {
                        slowest = Some(t);
                    }
                }
                let t = slowest.map_or(0.0, |s| {
                    acc.crit_compute += s.compute_time;
                    acc.crit_memory += s.memory_time;
                    s.time
                });
                acc.compute += t;
                t
            }
            EventKind::Collective {
                op,
                groups,
                bytes_per_cube,
                scope,
            } => {
                let c = concurrent_collective_cost(*op, groups, *bytes_per_cube, &profile.topo, &profile.link, *scope)?;
                acc.comm += c.time;
                acc.wire += c.bytes_on_wire;
                wire += c.bytes_on_wire;
                c.time
            }
            EventKind::Barrier => 0.0,
        };
        finish_at[e.id] = start + duration;
    }
    let latency = finish_at.iter().copied().fold(0.0, f64::max);
    let stages = phases
        .into_iter()
        .map(|(phase, a)| StageBreakdown {
            phase,
            compute_time: a.compute,
            comm_time: a.comm,
            binding: if a.crit_compute > a.crit_memory {
                Resource::Compute
            } else {
                Resource::Memory
            },
            flops: a.flops,
            hbm_bytes: a.bytes,
            wire_bytes: a.wire,
        })
        .collect();
    Ok(finish(
        RunResult {
            profile: profile.name.clone(),
            model: model.name.clone(),
            strategy: Some(strategy),
            batch: point.batch,
            seq_len: point.seq_len,
            stages,
            latency,
            hbm_active,
            compute_active,
            wire_bytes: wire,
            energy: 0.0,
            avg_power: 0.0,
            tokens_per_joule: 0.0,
        },
        profile,
        model.layers,
    ))
}

/// Roofline projection of a GPU profile. Attention runs as one fused
/// kernel that streams the KV cache, queries and outputs. With several
/// devices the heads are split; when there are fewer KV heads than devices
/// the cache is replicated. Multi-device runs end with a ring AllReduce of
/// the layer output over the chip-to-chip links.
pub fn baseline_roofline(model: &ModelConfig, point: &WorkloadPoint, profile: &HardwareProfile) -> Result<RunResult> {
    profile.validate()?;
    let gpu = profile
        .gpu
        .as_ref()
        .ok_or_else(|| Error::InvalidHardware(format!("{} has no GPU parameters", profile.name)))?;
    let gemms = derive_stage_gemms(model, point)?;
    let d = gpu.devices as f64;
    let peak = gpu.peak_flops * gpu.compute_util;
    let bw = profile.effective_hbm_bw.map_or(gpu.hbm_bw, |b| b / d) * gpu.mem_util;
    let bpe = model.bytes_per_elem;
    let kv_split = (gpu.devices.min(model.kv_heads)) as f64;

    let mut stages = Vec::new();
    let (mut hbm_active, mut compute_active) = (0.0, 0.0);
    let mut push = |phase: Phase, flops: f64, bytes: f64, comm: f64| {
        let t = roofline(flops, bytes, peak, bw);
        hbm_active += bytes / bw;
        compute_active += flops / peak;
        stages.push(StageBreakdown {
            phase,
            compute_time: t,
            comm_time: comm,
            binding: if flops / peak > bytes / bw {
                Resource::Compute
            } else {
                Resource::Memory
            },
            flops: flops * d,
            hbm_bytes: bytes * d,
            wire_bytes: 0.0,
        });
    };
    let sum = |stage: Stage, f: fn(&crate::workload::GemmShape) -> f64| -> f64 {
        gemms.iter().filter(|g| g.stage == stage).map(f).sum()
    };
    push(
        Phase::ProjQkv,
        sum(Stage::ProjQkv, |g| g.flops()) / d,
        sum(Stage::ProjQkv, |g| g.bytes()) / d,
        0.0,
    );
    let attn_flops = sum(Stage::ScoreQk, |g| g.flops()) + sum(Stage::WeightedAv, |g| g.flops());
    let kv = crate::workload::kv_cache_bytes(model, point).per_layer;
    let q_and_out = if point.seq_len == 0 {
        0.0
    } else {
        2.0 * (point.batch * model.q_heads * model.head_dim) as f64 * bpe
    };
    push(Phase::Attention, attn_flops / d, kv / kv_split + q_and_out / d, 0.0);
    let out_bytes = (point.batch * model.d_model) as f64 * bpe;
    let comm = if gpu.devices > 1 {
        let steps = 2.0 * (d - 1.0);
        steps * (gpu.c2c.latency + out_bytes / d / gpu.c2c.bw_per_dir)
    } else {
        0.0
    };
    push(
        Phase::ProjO,
        sum(Stage::ProjO, |g| g.flops()) / d,
        sum(Stage::ProjO, |g| g.bytes()) / d,
        comm,
    );
    let wire = if gpu.devices > 1 {
        2.0 * (d - 1.0) * out_bytes
    } else {
        0.0
    };
    if let Some(s) = stages.last_mut() {
        s.wire_bytes = wire;
    }
    let latency = stages.iter().map(|s| s.compute_time + s.comm_time).sum();
    Ok(finish(
        RunResult {
            profile: profile.name.clone(),
            model: model.name.clone(),
            strategy: None,
            batch: point.batch,
            seq_len: point.seq_len,
            stages,
            latency,
            hbm_active,
            compute_active,
            wire_bytes: wire,
            energy: 0.0,
            avg_power: 0.0,
            tokens_per_joule: 0.0,
        },
        profile,
        model.layers,
    ))
}

/// Dispatches on the profile kind.
pub fn evaluate(
    model: &ModelConfig,
    point: &WorkloadPoint,
    strategy: StrategyKind,
    profile: &HardwareProfile,
) -> Result<RunResult> {
    match profile.kind {
        DeviceKind::Pnm => simulate(model, point, strategy, profile),
        DeviceKind::Gpu => baseline_roofline(model, point, profile),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{kv_cache_bytes, ridge_point};
    use proptest::prelude::*;

    fn qwen() -> ModelConfig {
        ModelConfig::preset("qwen3-235b-like").unwrap()
    }

    fn pnm() -> HardwareProfile {
        HardwareProfile::preset("pnm-16").unwrap()
    }

    #[test]
    fn stages_add_up_to_latency() {
        for s in StrategyKind::ALL {
            let r = simulate(&qwen(), &WorkloadPoint::new(2, 8192), s, &pnm()).unwrap();
            let sum: f64 = r.stages.iter().map(|s| s.compute_time + s.comm_time).sum();
            assert!((sum - r.latency).abs() <= 1e-12 * r.latency);
            assert!(r.stages.iter().all(|s| s.compute_time + s.comm_time <= r.latency));
        }
    }

    #[test]
    fn empty_sequence_only_projects() {
        let r = simulate(&qwen(), &WorkloadPoint::new(1, 0), StrategyKind::HpRo, &pnm()).unwrap();
        let attn = r.stage(Phase::Attention).unwrap();
        assert_eq!((attn.compute_time, attn.comm_time), (0.0, 0.0));
        assert!(r.latency > 0.0);
    }

    #[test]
    fn long_sequences_approach_bandwidth_bound() {
        let m = qwen();
        let pt = WorkloadPoint::new(1, 1 << 22);
        let r = simulate(&m, &pt, StrategyKind::HpRo, &pnm()).unwrap();
        let ideal = kv_cache_bytes(&m, &pt).per_layer / pnm().aggregate_hbm_bw();
        let attn = r.stage(Phase::Attention).unwrap();
        assert!((attn.compute_time + attn.comm_time) / ideal < 1.05);
        assert_eq!(attn.binding, Resource::Memory);
    }

    #[test]
    fn gpu_profile_is_rejected_by_simulator() {
        let h100 = HardwareProfile::preset("h100").unwrap();
        assert!(simulate(&qwen(), &WorkloadPoint::new(1, 64), StrategyKind::Tp16, &h100).is_err());
        assert!(baseline_roofline(&qwen(), &WorkloadPoint::new(1, 64), &pnm()).is_err());
    }

    #[test]
    fn h100_memory_bound_stage() {
        let mut h100 = HardwareProfile::preset("h100").unwrap();
        h100.gpu.as_mut().unwrap().mem_util = 1.0;
        let m = qwen();
        let pt = WorkloadPoint::new(1, 65536);
        let r = baseline_roofline(&m, &pt, &h100).unwrap();
        let attn = r.stage(Phase::Attention).unwrap();
        assert_eq!(attn.binding, Resource::Memory);
        assert!((attn.compute_time - attn.hbm_bytes / 3.35e12).abs() < 1e-15);
    }

    #[test]
    fn gpu_compute_bound_synthetic() {
        let mut h100 = HardwareProfile::preset("h100").unwrap();
        h100.gpu.as_mut().unwrap().hbm_bw = 1e18;
        let r = baseline_roofline(&qwen(), &WorkloadPoint::new(32, 4096), &h100).unwrap();
        let qkv = r.stage(Phase::ProjQkv).unwrap();
        assert_eq!(qkv.binding, Resource::Compute);
        assert!((qkv.compute_time - qkv.flops / 1978e12).abs() < 1e-15);
    }

    #[test]
    fn ridge_and_bandwidth_ratios() {
        assert!((ridge_point(17500e12, 22e12) - 795.0).abs() < 1.0);
        let h100 = HardwareProfile::preset("h100").unwrap();
        assert!((pnm().aggregate_hbm_bw() / h100.aggregate_hbm_bw() - 44.0 / 3.35).abs() < 1e-9);
    }

    #[test]
    fn power_ceiling_matches_tdp() {
        let p = pnm();
        let r = simulate(&qwen(), &WorkloadPoint::new(1, 4096), StrategyKind::HpRo, &p).unwrap();
        let mut full = r.clone();
        full.hbm_active = full.latency;
        full.compute_active = full.latency;
        full.wire_bytes = 0.0;
        let e = energy_power(&full, &p, 1);
        assert!((e.watts - 1440.0).abs() < 1e-9);
        let mut idle = r.clone();
        idle.latency = 0.0;
        idle.hbm_active = 0.0;
        idle.compute_active = 0.0;
        idle.wire_bytes = 0.0;
        assert_eq!(energy_power(&idle, &p, 1).joules, 0.0);
    }

    #[test]
    fn static_energy_is_linear_in_latency() {
        let p = pnm();
        let r = simulate(&qwen(), &WorkloadPoint::new(1, 4096), StrategyKind::HpRo, &p).unwrap();
        let mut twice = r.clone();
        twice.latency *= 2.0;
        let (a, b) = (energy_power(&r, &p, 1), energy_power(&twice, &p, 1));
        assert_eq!(b.static_joules, 2.0 * a.static_joules);
        assert_eq!(b.hbm_joules, a.hbm_joules);
    }

    proptest! {
        #[test]
        fn more_resources_never_slow_down(s in 1usize..200_000, b in 1usize..8, f in 1.0f64..4.0) {
            let m = qwen();
            let pt = WorkloadPoint::new(b, s);
            let base = simulate(&m, &pt, StrategyKind::HpRo, &pnm()).unwrap().latency;
            let fast = simulate(&m, &pt, StrategyKind::HpRo, &pnm().with_cube_flops(96e12 * f)).unwrap().latency;
            let wide = simulate(&m, &pt, StrategyKind::HpRo, &pnm().with_link_bw(1500e9 * f)).unwrap().latency;
            prop_assert!(fast <= base * (1.0 + 1e-12));
            prop_assert!(wide <= base * (1.0 + 1e-12));
        }
    }
}
