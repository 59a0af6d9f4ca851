//! Cube mesh, die-to-die links and collective costs.
//!
//! Point-to-point traffic uses XY dimension-order routing with cut-through
//! switching: a message pays one hop latency per link and its serialization
//! once. Ring collectives (AllGather, ReduceScatter, AllReduce) and binomial
//! tree collectives (Reduce, Broadcast) are broken into steps; in each step
//! all transfers run concurrently and directed links are time-shared.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type CubeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshTopology {
    pub rows: usize,
    pub cols: usize,
}

impl Default for MeshTopology {
    fn default() -> Self {
        MeshTopology { rows: 4, cols: 4 }
    }
}

impl MeshTopology {
    pub fn new(rows: usize, cols: usize) -> Self {
        MeshTopology { rows, cols }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidHardware("mesh needs at least one cube".into()));
        }
        Ok(())
    }

    pub fn cubes(&self) -> usize {
        self.rows * self.cols
    }

    pub fn ids(&self) -> std::ops::Range<CubeId> {
        0..self.cubes()
    }

    pub fn coord(&self, id: CubeId) -> Result<(usize, usize)> {
        if id >= self.cubes() {
            return Err(Error::UnknownCube(id));
        }
        Ok((id / self.cols, id % self.cols))
    }

    pub fn id(&self, row: usize, col: usize) -> CubeId {
        row * self.cols + col
    }

    pub fn diameter(&self) -> usize {
        self.rows + self.cols - 2
    }

    fn neighbors(&self, id: CubeId) -> impl Iterator<Item = CubeId> + '_ {
        let (r, c) = (id / self.cols, id % self.cols);
        let mut out = Vec::with_capacity(4);
        if r > 0 {
            out.push(self.id(r - 1, c));
        }
        if r + 1 < self.rows {
            out.push(self.id(r + 1, c));
        }
        if c > 0 {
            out.push(self.id(r, c - 1));
        }
        if c + 1 < self.cols {
            out.push(self.id(r, c + 1));
        }
        out.into_iter()
    }
}

/// Manhattan distance, which is the XY route length.
pub fn hop_count(a: CubeId, b: CubeId, topo: &MeshTopology) -> Result<usize> {
    let (ra, ca) = topo.coord(a)?;
    let (rb, cb) = topo.coord(b)?;
    Ok(ra.abs_diff(rb) + ca.abs_diff(cb))
}

/// Directed links visited by the XY route from `a` to `b`: columns first,
/// then rows.
pub fn xy_route(a: CubeId, b: CubeId, topo: &MeshTopology) -> Result<Vec<(CubeId, CubeId)>> {
    let (mut r, mut c) = topo.coord(a)?;
    let (rb, cb) = topo.coord(b)?;
    let mut links = Vec::with_capacity(hop_count(a, b, topo)?);
    while c != cb {
        let nc = if cb > c { c + 1 } else { c - 1 };
        links.push((topo.id(r, c), topo.id(r, nc)));
        c = nc;
    }
    while r != rb {
        let nr = if rb > r { r + 1 } else { r - 1 };
        links.push((topo.id(r, c), topo.id(nr, c)));
        r = nr;
    }
    Ok(links)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    /// Bytes per second in each direction.
    pub bw_per_dir: f64,
    pub hop_latency: f64,
}

impl Default for LinkSpec {
    fn default() -> Self {
        LinkSpec {
            bw_per_dir: 1500e9,
            hop_latency: 15e-9,
        }
    }
}

impl LinkSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.bw_per_dir > 0.0) || !(self.hop_latency >= 0.0) {
            return Err(Error::InvalidHardware(
                "link bandwidth must be positive and latency non-negative".into(),
            ));
        }
        Ok(())
    }
}

pub fn transfer_time(bytes: f64, hops: usize, link: &LinkSpec) -> f64 {
    hops as f64 * link.hop_latency + bytes / link.bw_per_dir
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CollectiveOp {
    AllGather,
    ReduceScatter,
    AllReduce,
    Reduce,
    Broadcast,
}

impl CollectiveOp {
    pub fn name(&self) -> &'static str {
        match self {
            CollectiveOp::AllGather => "AllGather",
            CollectiveOp::ReduceScatter => "ReduceScatter",
            CollectiveOp::AllReduce => "AllReduce",
            CollectiveOp::Reduce => "Reduce",
            CollectiveOp::Broadcast => "Broadcast",
        }
    }
}

/// `Local` requires every group to be connected in the mesh on its own;
/// `Global` lets traffic transit cubes outside the group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Local,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transfer {
    pub src: CubeId,
    pub dst: CubeId,
    pub bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub transfers: usize,
    pub bytes: f64,
    pub max_hops: usize,
    pub max_link_bytes: f64,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CollectiveCost {
    pub time: f64,
    /// Bytes injected by senders.
    pub bytes_on_wire: f64,
    /// Bytes summed over every link they cross.
    pub link_bytes: f64,
    pub max_hops: usize,
    pub steps: Vec<StepTrace>,
}

fn check_group(group: &[CubeId], topo: &MeshTopology, scope: Scope) -> Result<()> {
    if group.is_empty() {
        return Err(Error::InvalidSchedule("empty collective group".into()));
    }
    let mut seen = BTreeSet::new();
    for &id in group {
        topo.coord(id)?;
        if !seen.insert(id) {
            return Err(Error::InvalidSchedule(format!("cube {id} repeated in group {group:?}")));
        }
    }
    if scope == Scope::Local && !is_connected(group, topo) {
        return Err(Error::DisconnectedGroup(group.to_vec()));
    }
    Ok(())
}

/// Connectivity of the subgraph induced by `group`.
pub fn is_connected(group: &[CubeId], topo: &MeshTopology) -> bool {
    let members: BTreeSet<_> = group.iter().copied().collect();
    let Some(&start) = group.first() else {
        return false;
    };
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(v) = queue.pop_front() {
        for w in topo.neighbors(v) {
            if members.contains(&w) && seen.insert(w) {
                queue.push_back(w);
            }
        }
    }
    seen.len() == members.len()
}

/// Ring order used for the ring collectives.
///
/// A full rectangle with both sides at least 2 and an even cube count gets
/// a Hamiltonian cycle, so every ring neighbour is one hop away. Anything
/// else is visited in boustrophedon order.
pub fn ring_order(group: &[CubeId], topo: &MeshTopology) -> Result<Vec<CubeId>> {
    let coords: Vec<_> = group.iter().map(|&id| topo.coord(id)).collect::<Result<_>>()?;
    let r0 = coords.iter().map(|c| c.0).min().unwrap_or(0);
    let r1 = coords.iter().map(|c| c.0).max().unwrap_or(0);
    let c0 = coords.iter().map(|c| c.1).min().unwrap_or(0);
    let c1 = coords.iter().map(|c| c.1).max().unwrap_or(0);
    let (h, w) = (r1 - r0 + 1, c1 - c0 + 1);
    let full = h * w == group.len();
    if full && h >= 2 && w >= 2 && (h * w) % 2 == 0 {
        let cycle = if h % 2 == 0 {
            rect_cycle(h, w)
        } else {
            rect_cycle(w, h).into_iter().map(|(a, b)| (b, a)).collect()
        };
        return Ok(cycle.into_iter().map(|(r, c)| topo.id(r0 + r, c0 + c)).collect());
    }
    let mut by_row: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (r, c) in coords {
        by_row.entry(r).or_default().push(c);
    }
    let mut order = Vec::with_capacity(group.len());
    for (i, (r, mut cols)) in by_row.into_iter().enumerate() {
        cols.sort_unstable();
        if i % 2 == 1 {
            cols.reverse();
        }
        order.extend(cols.into_iter().map(|c| topo.id(r, c)));
    }
    Ok(order)
}

/// Hamiltonian cycle of an `h x w` grid with `h` even: along row 0, snake
/// through the remaining rows over columns `1..w`, then back up column 0.
fn rect_cycle(h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut cyc: Vec<_> = (0..w).map(|c| (0, c)).collect();
    for r in 1..h {
        if r % 2 == 1 {
            cyc.extend((1..w).rev().map(|c| (r, c)));
        } else {
            cyc.extend((1..w).map(|c| (r, c)));
        }
    }
    cyc.extend((1..h).rev().map(|r| (r, 0)));
    cyc
}

/// Transfers of every step of `op` on one group. For the tree collectives
/// the first cube of `group` is the root.
pub fn collective_steps(
    op: CollectiveOp,
    group: &[CubeId],
    bytes_per_cube: f64,
    topo: &MeshTopology,
) -> Result<Vec<Vec<Transfer>>> {
    let g = group.len();
    if g <= 1 || bytes_per_cube <= 0.0 {
        return Ok(Vec::new());
    }
    let steps = match op {
        CollectiveOp::AllGather | CollectiveOp::ReduceScatter | CollectiveOp::AllReduce => {
            let ring = ring_order(group, topo)?;
            let (count, chunk) = match op {
                CollectiveOp::AllGather => (g - 1, bytes_per_cube),
                CollectiveOp::ReduceScatter => (g - 1, bytes_per_cube / g as f64),
                _ => (2 * (g - 1), bytes_per_cube / g as f64),
            };
            let step: Vec<_> = (0..g)
                .map(|i| Transfer {
                    src: ring[i],
                    dst: ring[(i + 1) % g],
                    bytes: chunk,
                })
                .collect();
            vec![step; count]
        }
        CollectiveOp::Reduce | CollectiveOp::Broadcast => {
            let mut rounds = Vec::new();
            let mut span = 1;
            while span < g {
                let round: Vec<_> = (0..g)
                    .filter(|i| i % (2 * span) == span)
                    .map(|i| Transfer {
                        src: group[i],
                        dst: group[i - span],
                        bytes: bytes_per_cube,
                    })
                    .collect();
                rounds.push(round);
                span *= 2;
            }
            if op == CollectiveOp::Broadcast {
                rounds.reverse();
                for round in &mut rounds {
                    for t in round.iter_mut() {
                        std::mem::swap(&mut t.src, &mut t.dst);
                    }
                }
            }
            rounds
        }
    };
    Ok(steps)
}

/// Time of one step whose transfers share links.
pub fn step_time(transfers: &[Transfer], topo: &MeshTopology, link: &LinkSpec) -> Result<StepTrace> {
    let mut load: BTreeMap<(CubeId, CubeId), f64> = BTreeMap::new();
    let mut max_hops = 0;
    let mut bytes = 0.0;
    for t in transfers {
        let route = xy_route(t.src, t.dst, topo)?;
        max_hops = max_hops.max(route.len());
        bytes += t.bytes;
        for l in route {
            *load.entry(l).or_insert(0.0) += t.bytes;
        }
    }
    let max_link_bytes = load.values().copied().fold(0.0, f64::max);
    Ok(StepTrace {
        transfers: transfers.len(),
        bytes,
        max_hops,
        max_link_bytes,
        time: transfer_time(max_link_bytes, max_hops, link),
    })
}

/// Cost of running `op` on several groups at once. Step `i` of every
/// group runs together, so groups that share links slow each other down.
pub fn concurrent_collective_cost(
    op: CollectiveOp,
    groups: &[Vec<CubeId>],
    bytes_per_cube: f64,
    topo: &MeshTopology,
    link: &LinkSpec,
    scope: Scope,
) -> Result<CollectiveCost> {
    let mut per_group = Vec::with_capacity(groups.len());
    for group in groups {
        check_group(group, topo, scope)?;
        per_group.push(collective_steps(op, group, bytes_per_cube, topo)?);
    }
    let n_steps = per_group.iter().map(Vec::len).max().unwrap_or(0);
    let mut cost = CollectiveCost::default();
    for i in 0..n_steps {
        let pooled: Vec<Transfer> = per_group
            .iter()
            .filter_map(|steps| steps.get(i))
            .flatten()
            .copied()
            .collect();
        for t in &pooled {
            cost.link_bytes += t.bytes * hop_count(t.src, t.dst, topo)? as f64;
        }
        let trace = step_time(&pooled, topo, link)?;
        cost.time += trace.time;
        cost.bytes_on_wire += trace.bytes;
        cost.max_hops = cost.max_hops.max(trace.max_hops);
        cost.steps.push(trace);
    }
    Ok(cost)
}

pub fn collective_cost(
    op: CollectiveOp,
    group: &[CubeId],
    bytes_per_cube: f64,
    topo: &MeshTopology,
    link: &LinkSpec,
    scope: Scope,
) -> Result<CollectiveCost> {
    concurrent_collective_cost(op, &[group.to_vec()], bytes_per_cube, topo, link, scope)
}
