//! Parallelization strategies: cube grouping, placement and schedules.

mod placement;
mod schedule;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fabric::{CubeId, MeshTopology};

pub use placement::{q_ranges_for, split, Block, CubePlacement, Placement, WoAxis};
pub use schedule::{plan, plan_hp, plan_hp_ro, plan_tp16, CubeKernel, Event, EventKind, Phase, Schedule, STAT_BYTES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    /// Every stage split across all cubes.
    #[serde(rename = "tp16")]
    Tp16,
    /// KV heads across cube groups, sequence inside each group.
    #[serde(rename = "hp")]
    Hp,
    /// As `Hp`, with the output projection resliced so the intra-group
    /// AllGathers disappear and the final AllReduce becomes a Reduce.
    #[serde(rename = "hp_ro")]
    HpRo,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [StrategyKind::Tp16, StrategyKind::Hp, StrategyKind::HpRo];

    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Tp16 => "tp16",
            StrategyKind::Hp => "hp",
            StrategyKind::HpRo => "hp_ro",
        }
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tp16" => Ok(StrategyKind::Tp16),
            "hp" => Ok(StrategyKind::Hp),
            "hp_ro" | "hp-ro" => Ok(StrategyKind::HpRo),
            other => Err(Error::UnknownPreset(format!("strategy {other}"))),
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Splits the mesh into `gcd(kv_heads, cubes)` equal rectangular groups,
/// numbered row-major, members row-major within each group. Among the
/// rectangle shapes that tile the mesh, the one with the smallest diameter
/// wins; ties prefer the wider shape. When `kv_heads` exceeds the number of
/// groups each group serves several heads.
pub fn build_groups(kv_heads: usize, topo: &MeshTopology) -> Result<Vec<Vec<CubeId>>> {
    topo.validate()?;
    let cubes = topo.cubes();
    let err = |reason: String| Error::IndivisibleHeads {
        kv_heads,
        cubes,
        reason,
    };
    if kv_heads == 0 {
        return Err(err("no KV heads".into()));
    }
    let n_groups = gcd(kv_heads, cubes);
    let size = cubes / n_groups;
    let (a, b) = (1..=topo.rows)
        .filter(|&a| topo.rows.is_multiple_of(a) && size.is_multiple_of(a))
        .map(|a| (a, size / a))
        .filter(|&(_, b)| b <= topo.cols && topo.cols.is_multiple_of(b))
        .min_by_key(|&(a, b)| (a + b, a > b))
        .ok_or_else(|| {
            err(format!(
                "no rectangle of {size} cubes tiles a {}x{} mesh",
                topo.rows, topo.cols
            ))
        })?;
    let mut groups = Vec::with_capacity(n_groups);
    for br in 0..topo.rows / a {
        for bc in 0..topo.cols / b {
            let mut g = Vec::with_capacity(size);
            for r in br * a..(br + 1) * a {
                for c in bc * b..(bc + 1) * b {
                    g.push(topo.id(r, c));
                }
            }
            groups.push(g);
        }
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grouping_examples() {
        let t = MeshTopology::default();
        assert_eq!(
            build_groups(4, &t).unwrap(),
            vec![
                vec![0, 1, 4, 5],
                vec![2, 3, 6, 7],
                vec![8, 9, 12, 13],
                vec![10, 11, 14, 15]
            ]
        );
        let single = build_groups(16, &t).unwrap();
        assert_eq!(single.len(), 16);
        assert!(single.iter().all(|g| g.len() == 1));
        assert_eq!(build_groups(1, &t).unwrap(), vec![(0..16).collect::<Vec<_>>()]);
        assert_eq!(build_groups(2, &t).unwrap()[0], vec![0, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(build_groups(8, &t).unwrap()[1], vec![2, 3]);
        // 3 KV heads share one 16-cube group.
        assert_eq!(build_groups(3, &t).unwrap().len(), 1);
    }

    #[test]
    fn non_square_meshes() {
        let t = MeshTopology::new(3, 5);
        assert_eq!(build_groups(5, &t).unwrap()[1], vec![1, 6, 11]);
        assert_eq!(build_groups(3, &t).unwrap()[0], vec![0, 1, 2, 3, 4]);
        assert!(matches!(build_groups(0, &t), Err(Error::IndivisibleHeads { .. })));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in StrategyKind::ALL {
            assert_eq!(s.name().parse::<StrategyKind>().unwrap(), s);
        }
        assert!("tp8".parse::<StrategyKind>().is_err());
    }
}
