//! Event schedules for one decode step of one attention layer.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fabric::{CollectiveOp, CubeId, Scope};
use crate::sa_model::KernelSpec;
use crate::workload::{GemmShape, ModelConfig, Stage, WorkloadPoint};

use super::{Placement, StrategyKind, WoAxis};

/// Bytes per softmax statistic sent alongside partial outputs.
pub const STAT_BYTES: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    ProjQkv,
    Attention,
    ProjO,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::ProjQkv, Phase::Attention, Phase::ProjO];

    pub fn name(&self) -> &'static str {
        match self {
            Phase::ProjQkv => "proj_qkv",
            Phase::Attention => "attention",
            Phase::ProjO => "proj_o",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeKernel {
    pub cube: CubeId,
    pub spec: KernelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EventKind {
    Compute {
        kernels: Vec<CubeKernel>,
    },
    Collective {
        op: CollectiveOp,
        groups: Vec<Vec<CubeId>>,
        bytes_per_cube: f64,
        scope: Scope,
    },
    Barrier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub id: usize,
    pub label: String,
    pub phase: Phase,
    pub request: Option<usize>,
    pub deps: Vec<usize>,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub strategy: StrategyKind,
    pub cubes: usize,
    pub events: Vec<Event>,
}

impl Schedule {
    fn new(strategy: StrategyKind, cubes: usize) -> Self {
        Schedule {
            strategy,
            cubes,
            events: Vec::new(),
        }
    }

    fn push(&mut self, label: &str, phase: Phase, request: Option<usize>, deps: Vec<usize>, kind: EventKind) -> usize {
        let id = self.events.len();
        self.events.push(Event {
            id,
            label: label.into(),
            phase,
            request,
            deps,
            kind,
        });
        id
    }

    fn last(&self) -> Vec<usize> {
        self.events.last().map(|e| vec![e.id]).unwrap_or_default()
    }

    /// Dependencies point backwards and every event id matches its index.
    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.events.iter().enumerate() {
            if e.id != i {
                return Err(Error::InvalidSchedule(format!("event {i} carries id {}", e.id)));
            }
            if let Some(&d) = e.deps.iter().find(|&&d| d >= i) {
                return Err(Error::InvalidSchedule(format!("event {i} depends on later event {d}")));
            }
            if let EventKind::Compute { kernels } = &e.kind {
                if let Some(k) = kernels.iter().find(|k| k.cube >= self.cubes) {
                    return Err(Error::UnknownCube(k.cube));
                }
            }
        }
        Ok(())
    }

    pub fn collectives(&self) -> impl Iterator<Item = (&Event, CollectiveOp, &Vec<Vec<CubeId>>, f64)> {
        self.events.iter().filter_map(|e| match &e.kind {
            EventKind::Collective {
                op,
                groups,
                bytes_per_cube,
                ..
            } => Some((e, *op, groups, *bytes_per_cube)),
            _ => None,
        })
    }

    /// Payload held by all participants, summed over collectives.
    pub fn collective_bytes(&self) -> f64 {
        self.collectives()
            .map(|(_, _, groups, b)| b * groups.iter().map(Vec::len).sum::<usize>() as f64)
            .sum()
    }

    pub fn collective_bytes_in(&self, phase: Phase) -> f64 {
        self.collectives()
            .filter(|(e, ..)| e.phase == phase)
            .map(|(_, _, groups, b)| b * groups.iter().map(Vec::len).sum::<usize>() as f64)
            .sum()
    }

    pub fn count(&self, op: CollectiveOp) -> usize {
        self.collectives().filter(|(_, o, ..)| *o == op).count()
    }

    pub fn count_in(&self, op: CollectiveOp, phase: Phase) -> usize {
        self.collectives()
            .filter(|(e, o, ..)| *o == op && e.phase == phase)
            .count()
    }

    pub fn flops_per_cube(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cubes];
        for e in &self.events {
            if let EventKind::Compute { kernels } = &e.kind {
                for k in kernels {
                    out[k.cube] += k.spec.flops();
                }
            }
        }
        out
    }

    /// One line per event: id, phase, request, kind, payload, deps.
    pub fn trace(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            let req = e.request.map_or("-".to_string(), |r| r.to_string());
            let deps = e.deps.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
            let body = match &e.kind {
                EventKind::Compute { kernels } => {
                    let flops: f64 = kernels.iter().map(|k| k.spec.flops()).sum();
                    let bytes: f64 = kernels.iter().map(|k| k.spec.streamed_bytes).sum();
                    format!("compute cubes={} flops={flops} bytes={bytes}", kernels.len())
                }
                EventKind::Collective {
                    op,
                    groups,
                    bytes_per_cube,
                    scope,
                } => {
                    let scope = match scope {
                        Scope::Local => "local",
                        Scope::Global => "global",
                    };
                    format!(
                        "{} groups={}x{} bytes_per_cube={bytes_per_cube} scope={scope}",
                        op.name(),
                        groups.len(),
                        groups.first().map_or(0, Vec::len)
                    )
                }
                EventKind::Barrier => "barrier".to_string(),
            };
            let _ = writeln!(
                s,
                "{} {} req={req} {} {body} deps=[{deps}]",
                e.id,
                e.phase.name(),
                e.label
            );
        }
        s
    }
}

fn gemm(m: usize, k: usize, n: usize, bpe: f64, stage: Stage) -> GemmShape {
    GemmShape::new(m, k, n, bpe, stage)
}

fn single_kernels(p: &Placement, f: impl Fn(&super::CubePlacement) -> GemmShape) -> EventKind {
    EventKind::Compute {
        kernels: p
            .cubes
            .iter()
            .map(|c| CubeKernel {
                cube: c.cube,
                spec: KernelSpec::single(f(c)),
            })
            .collect(),
    }
}

fn qkv_cols(c: &super::CubePlacement) -> usize {
    c.wq.cols_len() + c.wk.cols_len() + c.wv.cols_len()
}

fn collective(op: CollectiveOp, groups: Vec<Vec<CubeId>>, bytes_per_cube: f64, scope: Scope) -> Option<EventKind> {
    if groups.iter().all(|g| g.len() <= 1) {
        return None;
    }
    Some(EventKind::Collective {
        op,
        groups,
        bytes_per_cube,
        scope,
    })
}

fn check(
    placement: &Placement,
    model: &ModelConfig,
    point: &WorkloadPoint,
    want: StrategyKind,
    axis: WoAxis,
) -> Result<()> {
    model.validate()?;
    point.validate()?;
    if placement.strategy != want || placement.wo_axis != axis {
        return Err(Error::InvalidPlacement(format!(
            "{} needs a {:?}-sliced output projection, got {:?} from a {} placement",
            want.name(),
            axis,
            placement.wo_axis,
            placement.strategy.name()
        )));
    }
    if placement.seq_len != point.seq_len || placement.q_heads != model.q_heads || placement.d_model != model.d_model {
        return Err(Error::InvalidPlacement(
            "placement was built for a different model or point".into(),
        ));
    }
    Ok(())
}

pub fn plan(model: &ModelConfig, point: &WorkloadPoint, placement: &Placement) -> Result<Schedule> {
    match placement.strategy {
        StrategyKind::Tp16 => plan_tp16(model, point, placement),
        StrategyKind::Hp => plan_hp(model, point, placement),
        StrategyKind::HpRo => plan_hp_ro(model, point, placement),
    }
}

/// Shared front half of both hybrid flows: QKV projection, query
/// broadcast, per-request attention over local sequence shards and the
/// intra-group ReduceScatter that merges partial outputs with their
/// softmax statistics. Returns the id of the last event.
fn hybrid_attention(sched: &mut Schedule, model: &ModelConfig, point: &WorkloadPoint, p: &Placement) -> Option<usize> {
    let bpe = model.bytes_per_elem;
    let b = point.batch;
    let dh = model.head_dim;
    let n = p.group_len() as f64;
    let q_heads_per_group = p.heads_per_group * model.group_size;

    sched.push(
        "qkv",
        Phase::ProjQkv,
        None,
        vec![],
        single_kernels(p, |c| gemm(b, model.d_model, qkv_cols(c), bpe, Stage::ProjQkv)),
    );
    if point.seq_len == 0 {
        return sched.events.last().map(|e| e.id);
    }
    // Every cube needs the group's new query, key and value rows.
    let qkv_bytes = (b * (q_heads_per_group + 2 * p.heads_per_group) * dh) as f64 * bpe / n;
    if let Some(k) = collective(CollectiveOp::AllGather, p.groups.clone(), qkv_bytes, Scope::Local) {
        let deps = sched.last();
        sched.push("qkv_gather", Phase::Attention, None, deps, k);
    }
    for r in 0..b {
        let kernels = p
            .cubes
            .iter()
            .map(|c| {
                let s = c.seq.len();
                let heads = c.kv_heads.len();
                let mut gemms = Vec::with_capacity(2 * heads);
                for _ in 0..heads {
                    gemms.push(gemm(model.group_size, dh, s, bpe, Stage::ScoreQk));
                    gemms.push(gemm(model.group_size, s, dh, bpe, Stage::WeightedAv));
                }
                let kv = (2 * heads * s * dh) as f64 * bpe;
                let q_and_out = if s == 0 {
                    0.0
                } else {
                    (2 * heads * model.group_size * dh) as f64 * bpe
                };
                CubeKernel {
                    cube: c.cube,
                    spec: KernelSpec {
                        gemms,
                        streamed_bytes: kv + q_and_out,
                    },
                }
            })
            .collect();
        let deps = sched.last();
        sched.push(
            "attention",
            Phase::Attention,
            Some(r),
            deps,
            EventKind::Compute { kernels },
        );
    }
    let partial = (b * q_heads_per_group) as f64 * (dh as f64 * bpe + 2.0 * STAT_BYTES);
    if let Some(k) = collective(CollectiveOp::ReduceScatter, p.groups.clone(), partial, Scope::Local) {
        let deps = sched.last();
        sched.push("merge_scatter", Phase::Attention, None, deps, k);
    }
    sched.events.last().map(|e| e.id)
}

/// Two-level hybrid: KV heads over groups, sequence within a group, then
/// intra-group AllGather, column-sliced projection, cross-group AllReduce
/// and a final AllGather so every cube holds the layer output.
pub fn plan_hp(model: &ModelConfig, point: &WorkloadPoint, p: &Placement) -> Result<Schedule> {
    check(p, model, point, StrategyKind::Hp, WoAxis::Yx)?;
    let mut sched = Schedule::new(StrategyKind::Hp, p.cubes.len());
    let bpe = model.bytes_per_elem;
    let b = point.batch;
    let n = p.group_len() as f64;
    let q_heads_per_group = p.heads_per_group * model.group_size;
    hybrid_attention(&mut sched, model, point, p);
    if point.seq_len > 0 {
        let bytes = (b * q_heads_per_group * model.head_dim) as f64 * bpe / n;
        if let Some(k) = collective(CollectiveOp::AllGather, p.groups.clone(), bytes, Scope::Local) {
            let deps = sched.last();
            sched.push("attn_gather", Phase::Attention, None, deps, k);
        }
    }
    let deps = sched.last();
    sched.push(
        "proj_o",
        Phase::ProjO,
        None,
        deps,
        single_kernels(p, |c| gemm(b, c.wo.rows_len(), c.wo.cols_len(), bpe, Stage::ProjO)),
    );
    let slice = (b * model.d_model) as f64 * bpe / n;
    if p.groups.len() > 1 {
        let k = collective(CollectiveOp::AllReduce, p.strided_sets(), slice, Scope::Global).expect("several groups");
        let deps = sched.last();
        sched.push("cross_reduce", Phase::ProjO, None, deps, k);
    }
    if let Some(k) = collective(CollectiveOp::AllGather, p.groups.clone(), slice, Scope::Local) {
        let deps = sched.last();
        sched.push("out_gather", Phase::ProjO, None, deps, k);
    }
    sched.validate()?;
    Ok(sched)
}

/// Reordered hybrid: the ReduceScatter output feeds a row-sliced
/// projection directly and one Reduce delivers the result to the
/// destination cube.
pub fn plan_hp_ro(model: &ModelConfig, point: &WorkloadPoint, p: &Placement) -> Result<Schedule> {
    check(p, model, point, StrategyKind::HpRo, WoAxis::Yy)?;
    let mut sched = Schedule::new(StrategyKind::HpRo, p.cubes.len());
    let bpe = model.bytes_per_elem;
    let b = point.batch;
    hybrid_attention(&mut sched, model, point, p);
    let deps = sched.last();
    sched.push(
        "proj_o",
        Phase::ProjO,
        None,
        deps,
        single_kernels(p, |c| gemm(b, c.wo.rows_len(), c.wo.cols_len(), bpe, Stage::ProjO)),
    );
    let out = (b * model.d_model) as f64 * bpe;
    if let Some(k) = collective(CollectiveOp::Reduce, vec![p.reduce_order()], out, Scope::Local) {
        let deps = sched.last();
        sched.push("reduce_to_destination", Phase::ProjO, None, deps, k);
    }
    sched.validate()?;
    Ok(sched)
}

/// Tensor parallelism over all cubes. Each cube owns a window of KV
/// features, so scores are partial sums that need an AllReduce for every
/// request, and the attention output and layer output are gathered.
pub fn plan_tp16(model: &ModelConfig, point: &WorkloadPoint, p: &Placement) -> Result<Schedule> {
    check(p, model, point, StrategyKind::Tp16, WoAxis::Column)?;
    let mut sched = Schedule::new(StrategyKind::Tp16, p.cubes.len());
    let bpe = model.bytes_per_elem;
    let b = point.batch;
    let s = point.seq_len;
    let g = model.group_size;
    let dh = model.head_dim;
    let cubes = p.cubes.len() as f64;
    let all = p.groups.clone();

    sched.push(
        "qkv",
        Phase::ProjQkv,
        None,
        vec![],
        single_kernels(p, |c| gemm(b, model.d_model, qkv_cols(c), bpe, Stage::ProjQkv)),
    );
    // Feature widths of each KV head this cube touches.
    let widths = |c: &super::CubePlacement| -> Vec<usize> {
        let cols = &c.cache.rows[0];
        c.kv_heads
            .clone()
            .map(|h| cols.end.min((h + 1) * dh) - cols.start.max(h * dh))
            .collect()
    };
    if s > 0 {
        for r in 0..b {
            let score = p
                .cubes
                .iter()
                .map(|c| {
                    let w = widths(c);
                    let feats: usize = w.iter().sum();
                    CubeKernel {
                        cube: c.cube,
                        spec: KernelSpec {
                            gemms: w.iter().map(|&f| gemm(g, f, s, bpe, Stage::ScoreQk)).collect(),
                            streamed_bytes: (feats * s + g * feats + w.len() * g * s) as f64 * bpe,
                        },
                    }
                })
                .collect();
            let deps = sched.last();
            sched.push(
                "score",
                Phase::Attention,
                Some(r),
                deps,
                EventKind::Compute { kernels: score },
            );
            let scores = (model.q_heads * s) as f64 * bpe;
            if let Some(k) = collective(CollectiveOp::AllReduce, all.clone(), scores, Scope::Local) {
                let deps = sched.last();
                sched.push("score_reduce", Phase::Attention, Some(r), deps, k);
            }
            let av = p
                .cubes
                .iter()
                .map(|c| {
                    let w = widths(c);
                    let feats: usize = w.iter().sum();
                    CubeKernel {
                        cube: c.cube,
                        spec: KernelSpec {
                            gemms: w.iter().map(|&f| gemm(g, s, f, bpe, Stage::WeightedAv)).collect(),
                            streamed_bytes: (feats * s + w.len() * g * s + g * feats) as f64 * bpe,
                        },
                    }
                })
                .collect();
            let deps = sched.last();
            sched.push(
                "weighted_values",
                Phase::Attention,
                Some(r),
                deps,
                EventKind::Compute { kernels: av },
            );
        }
        let bytes = (b * model.q_heads * dh) as f64 * bpe / cubes;
        if let Some(k) = collective(CollectiveOp::AllGather, all.clone(), bytes, Scope::Local) {
            let deps = sched.last();
            sched.push("attn_gather", Phase::Attention, None, deps, k);
        }
    }
    let deps = sched.last();
    sched.push(
        "proj_o",
        Phase::ProjO,
        None,
        deps,
        single_kernels(p, |c| gemm(b, c.wo.rows_len(), c.wo.cols_len(), bpe, Stage::ProjO)),
    );
    let out = (b * model.d_model) as f64 * bpe / cubes;
    if let Some(k) = collective(CollectiveOp::AllGather, all, out, Scope::Local) {
        let deps = sched.last();
        sched.push("out_gather", Phase::ProjO, None, deps, k);
    }
    sched.validate()?;
    Ok(sched)
}
