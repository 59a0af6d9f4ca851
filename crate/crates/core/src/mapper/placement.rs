//! Assignment of weights, KV cache and attention outputs to cubes.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fabric::{CubeId, MeshTopology};
use crate::workload::{ModelConfig, WorkloadPoint};

use super::{build_groups, StrategyKind};

/// Balanced split of `0..total` into `parts`; the first `total % parts`
/// pieces are one longer.
pub fn split(total: usize, parts: usize, i: usize) -> Range<usize> {
    let base = total / parts;
    let extra = total % parts;
    let start = i * base + i.min(extra);
    let len = base + usize::from(i < extra);
    start..start + len
}

fn offset(r: &Range<usize>, by: usize) -> Range<usize> {
    r.start + by..r.end + by
}

/// Rectangular block set: the cartesian product of `rows` and `cols`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub rows: Vec<Range<usize>>,
    pub cols: Vec<Range<usize>>,
}

impl Block {
    pub fn new(rows: Vec<Range<usize>>, cols: Vec<Range<usize>>) -> Self {
        Block { rows, cols }
    }

    pub fn rows_len(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    pub fn cols_len(&self) -> usize {
        self.cols.iter().map(|r| r.len()).sum()
    }

    pub fn area(&self) -> usize {
        self.rows_len() * self.cols_len()
    }

    fn overlaps(&self, other: &Block) -> bool {
        let hit = |a: &[Range<usize>], b: &[Range<usize>]| {
            a.iter().any(|x| {
                b.iter()
                    .any(|y| x.start < y.end && y.start < x.end && !x.is_empty() && !y.is_empty())
            })
        };
        hit(&self.rows, &other.rows) && hit(&self.cols, &other.cols)
    }

    fn within(&self, rows: usize, cols: usize) -> bool {
        self.rows.iter().all(|r| r.end <= rows) && self.cols.iter().all(|c| c.end <= cols)
    }
}

/// Which axis of the output projection is split inside a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WoAxis {
    /// Group owns a band of input rows; cubes split the output columns.
    Yx,
    /// Group owns a band of input rows; cubes split it further.
    Yy,
    /// Every cube owns all input rows and a slice of output columns.
    Column,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubePlacement {
    pub cube: CubeId,
    pub group: usize,
    pub rank: usize,
    /// KV heads whose attention this cube takes part in.
    pub kv_heads: Range<usize>,
    /// Sequence positions of the cached keys and values held here.
    pub seq: Range<usize>,
    /// Cached KV features (over `kv_heads * head_dim`) times `seq`.
    pub cache: Block,
    /// Attention-output features (over `q_heads * head_dim`) this cube owns
    /// when the output projection starts.
    pub attn_out: Vec<Range<usize>>,
    pub wq: Block,
    pub wk: Block,
    pub wv: Block,
    pub wo: Block,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub strategy: StrategyKind,
    pub topo: MeshTopology,
    pub groups: Vec<Vec<CubeId>>,
    pub heads_per_group: usize,
    pub destination: CubeId,
    pub wo_axis: WoAxis,
    pub cubes: Vec<CubePlacement>,
    pub d_model: usize,
    pub q_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub group_size: usize,
    pub seq_len: usize,
}

impl Placement {
    pub fn build(
        strategy: StrategyKind,
        model: &ModelConfig,
        point: &WorkloadPoint,
        topo: &MeshTopology,
        destination: CubeId,
    ) -> Result<Placement> {
        model.validate()?;
        point.validate()?;
        topo.validate()?;
        topo.coord(destination)?;
        let (groups, heads_per_group) = match strategy {
            StrategyKind::Tp16 => (vec![topo.ids().collect()], model.kv_heads),
            _ => {
                let groups = build_groups(model.kv_heads, topo)?;
                let h = model.kv_heads / groups.len();
                (groups, h)
            }
        };
        let mut cubes: Vec<Option<CubePlacement>> = vec![None; topo.cubes()];
        for (m, group) in groups.iter().enumerate() {
            for (n, &cube) in group.iter().enumerate() {
                let p = match strategy {
                    StrategyKind::Tp16 => tp16_cube(model, point, topo.cubes(), cube),
                    _ => hybrid_cube(model, point, strategy, m, n, group.len(), heads_per_group, cube),
                };
                cubes[cube] = Some(p);
            }
        }
        let cubes = cubes
            .into_iter()
            .enumerate()
            .map(|(i, c)| c.ok_or_else(|| Error::InvalidPlacement(format!("cube {i} left unassigned"))))
            .collect::<Result<Vec<_>>>()?;
        let placement = Placement {
            strategy,
            topo: *topo,
            groups,
            heads_per_group,
            destination,
            wo_axis: match strategy {
                StrategyKind::Tp16 => WoAxis::Column,
                StrategyKind::Hp => WoAxis::Yx,
                StrategyKind::HpRo => WoAxis::Yy,
            },
            cubes,
            d_model: model.d_model,
            q_heads: model.q_heads,
            kv_heads: model.kv_heads,
            head_dim: model.head_dim,
            group_size: model.group_size,
            seq_len: point.seq_len,
        };
        placement.check_partition()?;
        Ok(placement)
    }

    pub fn group_len(&self) -> usize {
        self.groups[0].len()
    }

    /// Cubes holding the same rank in every group.
    pub fn strided_sets(&self) -> Vec<Vec<CubeId>> {
        (0..self.group_len())
            .map(|n| self.groups.iter().map(|g| g[n]).collect())
            .collect()
    }

    /// All cubes, destination first, then group by group.
    pub fn reduce_order(&self) -> Vec<CubeId> {
        let mut order = vec![self.destination];
        order.extend(self.groups.iter().flatten().copied().filter(|&c| c != self.destination));
        order
    }

    /// Every matrix and the KV cache is covered exactly once.
    pub fn check_partition(&self) -> Result<()> {
        let f_q = self.q_heads * self.head_dim;
        let f_kv = self.kv_heads * self.head_dim;
        let dm = self.d_model;
        type Pick = fn(&CubePlacement) -> &Block;
        let checks: [(&str, Pick, usize, usize); 5] = [
            ("W_Q", |c| &c.wq, dm, f_q),
            ("W_K", |c| &c.wk, dm, f_kv),
            ("W_V", |c| &c.wv, dm, f_kv),
            ("W_O", |c| &c.wo, f_q, dm),
            ("KV cache", |c| &c.cache, f_kv, self.seq_len),
        ];
        for (name, pick, rows, cols) in checks {
            let blocks: Vec<&Block> = self.cubes.iter().map(pick).collect();
            let area: usize = blocks.iter().map(|b| b.area()).sum();
            if area != rows * cols {
                return Err(Error::InvalidPlacement(format!(
                    "{name} slices cover {area} elements of {}",
                    rows * cols
                )));
            }
            for (i, a) in blocks.iter().enumerate() {
                if !a.within(rows, cols) {
                    return Err(Error::InvalidPlacement(format!(
                        "{name} slice of cube {i} is out of bounds"
                    )));
                }
                for (j, b) in blocks.iter().enumerate().skip(i + 1) {
                    if a.overlaps(b) {
                        return Err(Error::InvalidPlacement(format!(
                            "{name} slices of cubes {i} and {j} overlap"
                        )));
                    }
                }
            }
        }
        let mut owned: Vec<Range<usize>> = self.cubes.iter().flat_map(|c| c.attn_out.iter().cloned()).collect();
        owned.sort_by_key(|r| r.start);
        let mut next = 0;
        for r in owned.iter().filter(|r| !r.is_empty()) {
            if r.start != next {
                return Err(Error::InvalidPlacement("attention outputs are not partitioned".into()));
            }
            next = r.end;
        }
        if next != f_q {
            return Err(Error::InvalidPlacement("attention outputs are not partitioned".into()));
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn hybrid_cube(
    model: &ModelConfig,
    point: &WorkloadPoint,
    strategy: StrategyKind,
    m: usize,
    n: usize,
    group_len: usize,
    heads: usize,
    cube: CubeId,
) -> CubePlacement {
    let dh = model.head_dim;
    let dm = model.d_model;
    let kv_heads = m * heads..(m + 1) * heads;
    let kv_band = kv_heads.start * dh..kv_heads.end * dh;
    let q_band = kv_heads.start * model.group_size * dh..kv_heads.end * model.group_size * dh;
    let kv_cols = offset(&split(kv_band.len(), group_len, n), kv_band.start);
    let scatter = offset(&split(q_band.len(), group_len, n), q_band.start);
    let seq = split(point.seq_len, group_len, n);
    let wo = match strategy {
        StrategyKind::Hp => Block::new(vec![q_band.clone()], vec![split(dm, group_len, n)]),
        _ => Block::new(vec![scatter.clone()], vec![0..dm]),
    };
    CubePlacement {
        cube,
        group: m,
        rank: n,
        kv_heads,
        cache: Block::new(vec![kv_band], vec![seq.clone()]),
        seq,
        attn_out: vec![scatter.clone()],
        wq: Block::new(vec![0..dm], vec![scatter]),
        wk: Block::new(vec![0..dm], vec![kv_cols.clone()]),
        wv: Block::new(vec![0..dm], vec![kv_cols]),
        wo,
    }
}

fn tp16_cube(model: &ModelConfig, point: &WorkloadPoint, cubes: usize, cube: CubeId) -> CubePlacement {
    let dh = model.head_dim;
    let dm = model.d_model;
    let kv_cols = split(model.kv_heads * dh, cubes, cube);
    let attn_out = q_ranges_for(&kv_cols, model);
    let kv_heads = if kv_cols.is_empty() {
        0..0
    } else {
        kv_cols.start / dh..(kv_cols.end - 1) / dh + 1
    };
    CubePlacement {
        cube,
        group: 0,
        rank: cube,
        kv_heads,
        seq: 0..point.seq_len,
        cache: Block::new(vec![kv_cols.clone()], vec![0..point.seq_len]),
        wq: Block::new(vec![0..dm], attn_out.clone()),
        attn_out,
        wk: Block::new(vec![0..dm], vec![kv_cols.clone()]),
        wv: Block::new(vec![0..dm], vec![kv_cols]),
        wo: Block::new(vec![0..model.q_heads * dh], vec![split(dm, cubes, cube)]),
    }
}

/// Query features that attend through the given KV features: for each KV
/// head touched, the same within-head feature window of each of its query
/// heads.
pub fn q_ranges_for(kv_cols: &Range<usize>, model: &ModelConfig) -> Vec<Range<usize>> {
    let dh = model.head_dim;
    let mut out = Vec::new();
    let mut f = kv_cols.start;
    while f < kv_cols.end {
        let head = f / dh;
        let end = kv_cols.end.min((head + 1) * dh);
        let (lo, hi) = (f - head * dh, end - head * dh);
        for q in head * model.group_size..(head + 1) * model.group_size {
            out.push(q * dh + lo..q * dh + hi);
        }
        f = end;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn qwen() -> ModelConfig {
        ModelConfig::preset("qwen3-235b-like").unwrap()
    }

    #[test]
    fn split_is_balanced() {
        assert_eq!(split(10, 4, 0), 0..3);
        assert_eq!(split(10, 4, 1), 3..6);
        assert_eq!(split(10, 4, 3), 8..10);
        assert_eq!(split(2, 4, 3), 2..2);
    }

    #[test]
    fn all_strategies_partition() {
        let t = MeshTopology::default();
        for s in [StrategyKind::Tp16, StrategyKind::Hp, StrategyKind::HpRo] {
            for name in crate::workload::PRESETS {
                let m = ModelConfig::preset(name).unwrap();
                let p = Placement::build(s, &m, &WorkloadPoint::new(2, 1000), &t, 0).unwrap();
                p.check_partition().unwrap();
            }
        }
    }

    #[test]
    fn hp_ro_slices_input_rows() {
        let p = Placement::build(
            StrategyKind::HpRo,
            &qwen(),
            &WorkloadPoint::new(1, 64),
            &MeshTopology::default(),
            0,
        )
        .unwrap();
        assert_eq!(p.wo_axis, WoAxis::Yy);
        let c = &p.cubes[5];
        assert_eq!((c.group, c.rank), (0, 3));
        assert_eq!(c.wo.rows, vec![3 * 512..4 * 512]);
        assert_eq!(c.wo.cols, vec![0..4096]);
        assert_eq!(c.seq, 48..64);
    }

    #[test]
    fn overlapping_slices_are_caught() {
        let mut p = Placement::build(
            StrategyKind::Hp,
            &qwen(),
            &WorkloadPoint::new(1, 64),
            &MeshTopology::default(),
            0,
        )
        .unwrap();
        p.cubes[1].wq = p.cubes[0].wq.clone();
        assert!(matches!(p.check_partition(), Err(Error::InvalidPlacement(_))));
    }

    #[test]
    fn tp16_query_windows_follow_kv_features() {
        let m = qwen();
        let r = q_ranges_for(&(96..160), &m);
        // Feature window 96..128 of KV head 0 and 0..32 of KV head 1.
        assert_eq!(r.len(), 32);
        assert_eq!(r[0], 96..128);
        assert_eq!(r[16], 16 * 128..16 * 128 + 32);
    }

    proptest! {
        #[test]
        fn odd_shapes_still_partition(kv_pow in 0u32..5, g in 1usize..6, dh in 1usize..40, s in 0usize..200, strat in 0usize..3) {
            let kv = 1usize << kv_pow;
            let m = ModelConfig { name: "p".into(), d_model: 37, q_heads: kv * g, kv_heads: kv, head_dim: dh,
                group_size: g, layers: 1, attn_kind: crate::workload::AttentionKind::Gqa, bytes_per_elem: 1.0 };
            let s_kind = [StrategyKind::Tp16, StrategyKind::Hp, StrategyKind::HpRo][strat];
            let p = Placement::build(s_kind, &m, &WorkloadPoint::new(1, s), &MeshTopology::default(), 3).unwrap();
            prop_assert!(p.check_partition().is_ok());
        }
    }
}
