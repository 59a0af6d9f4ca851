//! Runs the data movement of each strategy on real tensors and compares
//! the destination cube's layer output with exact attention followed by
//! the full output projection.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{exact_attention, merge_shards, shard_attention, shard_from_scores, Mat, ProjectionSlices, ShardStats};
use crate::error::{Error, Result};
use crate::fabric::MeshTopology;
use crate::mapper::{Placement, StrategyKind};
use crate::workload::{ModelConfig, WorkloadPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub batch: usize,
    pub seq_len: usize,
    /// Sequence shards per KV head.
    pub shards: usize,
    pub max_abs_err: f64,
    pub max_abs_ref: f64,
    pub max_rel_err: f64,
}

/// Random layer inputs. The last cache row of every request is overwritten
/// by the key and value projected from that request's hidden state.
#[derive(Debug, Clone)]
pub struct FlowData {
    pub model: ModelConfig,
    pub point: WorkloadPoint,
    pub x: Mat<f64>,
    pub wq: Mat<f64>,
    pub wk: Mat<f64>,
    pub wv: Mat<f64>,
    pub wo: Mat<f64>,
    pub k_cache: Vec<Mat<f64>>,
    pub v_cache: Vec<Mat<f64>>,
}

const MAX_SEQ: usize = 1024;
const MAX_HEAD_DIM: usize = 64;

impl FlowData {
    pub fn generate(model: &ModelConfig, point: &WorkloadPoint, seed: u64) -> Result<Self> {
        model.validate()?;
        point.validate()?;
        if point.seq_len == 0 || point.seq_len > MAX_SEQ || model.head_dim > MAX_HEAD_DIM {
            return Err(Error::InvalidWorkload(format!(
                "flow checks need 1 <= seq_len <= {MAX_SEQ} and head_dim <= {MAX_HEAD_DIM}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |r: usize, c: usize| Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let fq = model.q_heads * model.head_dim;
        let fkv = model.kv_heads * model.head_dim;
        let (b, s, dm) = (point.batch, point.seq_len, model.d_model);
        let x = m(b, dm);
        let wq = m(dm, fq);
        let wk = m(dm, fkv);
        let wv = m(dm, fkv);
        let wo = m(fq, dm);
        let k_cache = (0..b).map(|_| m(s, fkv)).collect();
        let v_cache = (0..b).map(|_| m(s, fkv)).collect();
        Ok(FlowData {
            model: model.clone(),
            point: *point,
            x,
            wq,
            wk,
            wv,
            wo,
            k_cache,
            v_cache,
        })
    }

    fn scale(&self) -> f64 {
        1.0 / (self.model.head_dim as f64).sqrt()
    }

    /// Cache of request `b` with the new token's key and value appended at
    /// the last position.
    fn full_cache(&self, b: usize) -> Result<(Mat<f64>, Mat<f64>)> {
        let xb = self.x.rows_range(b..b + 1);
        let last = self.point.seq_len - 1;
        let mut k = self.k_cache[b].clone();
        let mut v = self.v_cache[b].clone();
        k.put(last, 0, &xb.matmul(&self.wk)?);
        v.put(last, 0, &xb.matmul(&self.wv)?);
        Ok((k, v))
    }

    /// Exact attention for every query head, then the full projection.
    pub fn reference(&self) -> Result<Mat<f64>> {
        let dh = self.model.head_dim;
        let q = self.x.matmul(&self.wq)?;
        let mut attn = Mat::zeros(self.point.batch, self.model.q_heads * dh);
        for b in 0..self.point.batch {
            let (k, v) = self.full_cache(b)?;
            for h in 0..self.model.q_heads {
                let j = h / self.model.group_size;
                let kv = j * dh..(j + 1) * dh;
                let out = exact_attention(
                    &q.rows_range(b..b + 1).cols_range(h * dh..(h + 1) * dh),
                    &k.cols_range(kv.clone()),
                    &v.cols_range(kv),
                    self.scale(),
                )?;
                attn.put(b, h * dh, &out);
            }
        }
        attn.matmul(&self.wo)
    }
}

/// Collects per-cube feature windows into one matrix and checks that every
/// feature in `need` arrived exactly once.
struct Gather {
    buf: Mat<f64>,
    seen: Vec<u8>,
}

impl Gather {
    fn new(rows: usize, cols: usize) -> Self {
        Gather {
            buf: Mat::zeros(rows, cols),
            seen: vec![0; cols],
        }
    }

    fn put(&mut self, col: usize, block: &Mat<f64>) {
        self.buf.put(0, col, block);
        for s in &mut self.seen[col..col + block.cols()] {
            *s += 1;
        }
    }

    fn finish(self, need: Range<usize>, what: &str) -> Result<Mat<f64>> {
        if self.seen[need].iter().any(|&s| s != 1) {
            return Err(Error::ShapeMismatch(format!(
                "{what}: gathered features do not tile the required range"
            )));
        }
        Ok(self.buf)
    }
}

fn project(x: &Mat<f64>, w: &Mat<f64>, cols: &Range<usize>) -> Result<Mat<f64>> {
    x.matmul(&w.cols_range(cols.clone()))
}

pub fn verify_flow(
    strategy: StrategyKind,
    model: &ModelConfig,
    point: &WorkloadPoint,
    seed: u64,
) -> Result<VerifyReport> {
    let data = FlowData::generate(model, point, seed)?;
    run_flow(strategy, &data, &MeshTopology::default(), 0, seed)
}

pub fn run_flow(
    strategy: StrategyKind,
    data: &FlowData,
    topo: &MeshTopology,
    destination: usize,
    seed: u64,
) -> Result<VerifyReport> {
    let placement = Placement::build(strategy, &data.model, &data.point, topo, destination)?;
    let got = match strategy {
        StrategyKind::Tp16 => tp16_flow(data, &placement)?,
        _ => hybrid_flow(data, &placement)?,
    };
    let want = data.reference()?;
    let max_abs_err = got.max_abs_diff(&want);
    let max_abs_ref = want.max_abs();
    Ok(VerifyReport {
        strategy,
        seed,
        batch: data.point.batch,
        seq_len: data.point.seq_len,
        shards: if strategy == StrategyKind::Tp16 {
            1
        } else {
            placement.group_len()
        },
        max_abs_err,
        max_abs_ref,
        max_rel_err: got.rel_err(&want),
    })
}

fn hybrid_flow(data: &FlowData, p: &Placement) -> Result<Mat<f64>> {
    let model = &data.model;
    let (bsz, s, dh, dm) = (data.point.batch, data.point.seq_len, model.head_dim, model.d_model);
    let fq = model.q_heads * dh;
    let fkv = model.kv_heads * dh;
    let g = model.group_size;

    // Projection slices as the two hybrid placements lay them out.
    let yx = Placement::build(StrategyKind::Hp, model, &data.point, &p.topo, p.destination)?;
    let yy = Placement::build(StrategyKind::HpRo, model, &data.point, &p.topo, p.destination)?;
    let window = |pl: &Placement| -> Vec<(Range<usize>, Range<usize>)> {
        pl.cubes
            .iter()
            .map(|c| (c.wo.rows[0].clone(), c.wo.cols[0].clone()))
            .collect()
    };
    let slices = ProjectionSlices::cut(&data.wo, &window(&yx), &window(&yy));
    let local = if p.strategy == StrategyKind::Hp {
        &slices.slices_yx
    } else {
        &slices.slices_yy
    };

    // QKV projection on weight slices, then gather inside each group.
    let mut q_g = Vec::with_capacity(p.groups.len());
    let mut k_g = Vec::with_capacity(p.groups.len());
    let mut v_g = Vec::with_capacity(p.groups.len());
    for (m, group) in p.groups.iter().enumerate() {
        let (mut q, mut k, mut v) = (Gather::new(bsz, fq), Gather::new(bsz, fkv), Gather::new(bsz, fkv));
        for &c in group {
            let cp = &p.cubes[c];
            q.put(cp.wq.cols[0].start, &project(&data.x, &data.wq, &cp.wq.cols[0])?);
            k.put(cp.wk.cols[0].start, &project(&data.x, &data.wk, &cp.wk.cols[0])?);
            v.put(cp.wv.cols[0].start, &project(&data.x, &data.wv, &cp.wv.cols[0])?);
        }
        let heads = &p.cubes[group[0]].kv_heads;
        let kv_band = heads.start * dh..heads.end * dh;
        let q_band = heads.start * g * dh..heads.end * g * dh;
        q_g.push(q.finish(q_band, &format!("query gather in group {m}"))?);
        k_g.push(k.finish(kv_band.clone(), &format!("key gather in group {m}"))?);
        v_g.push(v.finish(kv_band, &format!("value gather in group {m}"))?);
    }

    // Shard statistics per cube, request and query head.
    let scale = data.scale();
    let mut stats: Vec<Vec<Vec<ShardStats<f64>>>> = Vec::with_capacity(p.cubes.len());
    for cp in &p.cubes {
        let mut per_req = Vec::with_capacity(bsz);
        for b in 0..bsz {
            let mut k = data.k_cache[b].rows_range(cp.seq.clone());
            let mut v = data.v_cache[b].rows_range(cp.seq.clone());
            if cp.seq.contains(&(s - 1)) {
                let row = s - 1 - cp.seq.start;
                k.put(row, 0, &k_g[cp.group].rows_range(b..b + 1));
                v.put(row, 0, &v_g[cp.group].rows_range(b..b + 1));
            }
            let mut per_head = Vec::with_capacity(cp.kv_heads.len() * g);
            for j in cp.kv_heads.clone() {
                let kv = j * dh..(j + 1) * dh;
                let (kj, vj) = (k.cols_range(kv.clone()), v.cols_range(kv));
                for h in j * g..(j + 1) * g {
                    let q = q_g[cp.group].rows_range(b..b + 1).cols_range(h * dh..(h + 1) * dh);
                    per_head.push(shard_attention(&q, &kj, &vj, scale)?);
                }
            }
            per_req.push(per_head);
        }
        stats.push(per_req);
    }

    // ReduceScatter: each cube merges its scatter window across the group.
    let mut attn: Vec<Mat<f64>> = vec![Mat::zeros(bsz, fq); p.cubes.len()];
    for group in &p.groups {
        let first_head = p.cubes[group[0]].kv_heads.start * g;
        for &c in group {
            let r = p.cubes[c].attn_out[0].clone();
            let mut f = r.start;
            while f < r.end {
                let h = f / dh;
                let end = r.end.min((h + 1) * dh);
                let w = f - h * dh..end - h * dh;
                #[allow(clippy::needless_range_loop)]
                for b in 0..bsz {
                    let parts: Vec<_> = group
                        .iter()
                        .map(|&n| stats[n][b][h - first_head].cols_range(w.clone()))
                        .collect();
                    attn[c].put(b, f, &merge_shards(&parts)?);
                }
                f = end;
            }
        }
    }

    match p.strategy {
        StrategyKind::HpRo => {
            let partial: Vec<Mat<f64>> = p
                .cubes
                .iter()
                .map(|cp| {
                    let sl = &local[cp.cube];
                    if sl.rows != cp.attn_out[0] {
                        return Err(Error::ShapeMismatch(format!(
                            "cube {} projects rows it does not own",
                            cp.cube
                        )));
                    }
                    attn[cp.cube].cols_range(sl.rows.clone()).matmul(&sl.data)
                })
                .collect::<Result<_>>()?;
            tree_reduce(&p.reduce_order(), partial)
        }
        _ => {
            // AllGather of attention inside each group, column-sliced
            // projection, AllReduce across groups, AllGather of the output.
            let mut partial = Vec::with_capacity(p.cubes.len());
            for cp in &p.cubes {
                let group = &p.groups[cp.group];
                let mut gather = Gather::new(bsz, fq);
                for &n in group {
                    let r = p.cubes[n].attn_out[0].clone();
                    gather.put(r.start, &attn[n].cols_range(r));
                }
                let sl = &local[cp.cube];
                let full = gather.finish(sl.rows.clone(), "attention gather")?;
                partial.push(full.cols_range(sl.rows.clone()).matmul(&sl.data)?);
            }
            let mut reduced = partial.clone();
            for set in p.strided_sets() {
                let mut sum = partial[set[0]].clone();
                for &c in &set[1..] {
                    sum = sum.add(&partial[c])?;
                }
                for &c in &set {
                    reduced[c] = sum.clone();
                }
            }
            let dest = &p.cubes[p.destination];
            let mut out = Gather::new(bsz, dm);
            for &n in &p.groups[dest.group] {
                out.put(local[n].cols.start, &reduced[n]);
            }
            out.finish(0..dm, "output gather")
        }
    }
}

/// Binomial-tree reduction; `order[0]` receives the sum.
fn tree_reduce(order: &[usize], mut vals: Vec<Mat<f64>>) -> Result<Mat<f64>> {
    let mut span = 1;
    while span < order.len() {
        for i in (span..order.len()).step_by(2 * span) {
            let (dst, src) = (order[i - span], order[i]);
            vals[dst] = vals[dst].add(&vals[src])?;
        }
        span *= 2;
    }
    Ok(vals[order[0]].clone())
}

fn tp16_flow(data: &FlowData, p: &Placement) -> Result<Mat<f64>> {
    let model = &data.model;
    let (bsz, s, dh, dm) = (data.point.batch, data.point.seq_len, model.head_dim, model.d_model);
    let fq = model.q_heads * dh;
    let g = model.group_size;
    let scale = data.scale();

    let mut attn: Vec<Mat<f64>> = vec![Mat::zeros(bsz, fq); p.cubes.len()];
    // Local projections: query windows, and the cube's KV feature window.
    let mut q_loc = Vec::with_capacity(p.cubes.len());
    let mut k_new = Vec::with_capacity(p.cubes.len());
    let mut v_new = Vec::with_capacity(p.cubes.len());
    for cp in &p.cubes {
        let mut q = Mat::zeros(bsz, fq);
        for r in &cp.attn_out {
            q.put(0, r.start, &project(&data.x, &data.wq, r)?);
        }
        q_loc.push(q);
        k_new.push(project(&data.x, &data.wk, &cp.wk.cols[0])?);
        v_new.push(project(&data.x, &data.wv, &cp.wv.cols[0])?);
    }
    // Query window `r` of head `h` pairs with the same window of KV head `h / G`.
    let kv_window = |r: &Range<usize>| {
        let h = r.start / dh;
        let o = r.start - h * dh;
        let f0 = (h / g) * dh + o;
        (h, f0..f0 + r.len())
    };
    for b in 0..bsz {
        let mut kv = Vec::with_capacity(p.cubes.len());
        let mut partial_scores = Vec::with_capacity(p.cubes.len());
        for (i, cp) in p.cubes.iter().enumerate() {
            let cols = cp.cache.rows[0].clone();
            let mut k = data.k_cache[b].cols_range(cols.clone());
            let mut v = data.v_cache[b].cols_range(cols.clone());
            k.put(s - 1, 0, &k_new[i].rows_range(b..b + 1));
            v.put(s - 1, 0, &v_new[i].rows_range(b..b + 1));
            let mut sc = Mat::zeros(model.q_heads, s);
            for r in &cp.attn_out {
                let (h, f) = kv_window(r);
                let q = q_loc[i].rows_range(b..b + 1).cols_range(r.clone());
                let kf = k.cols_range(f.start - cols.start..f.end - cols.start);
                sc.put(h, 0, &q.matmul(&kf.transpose())?);
            }
            partial_scores.push(sc);
            kv.push((k, v));
        }
        // AllReduce of the partial scores.
        let mut scores = partial_scores[0].clone();
        for sc in &partial_scores[1..] {
            scores = scores.add(sc)?;
        }
        let scores = scores.map(|x| x * scale);
        for (i, cp) in p.cubes.iter().enumerate() {
            let cols = &cp.cache.rows[0];
            for r in &cp.attn_out {
                let (h, f) = kv_window(r);
                let vf = kv[i].1.cols_range(f.start - cols.start..f.end - cols.start);
                let out = shard_from_scores(&scores.rows_range(h..h + 1), &vf)?;
                attn[i].put(b, r.start, &out.a);
            }
        }
    }
    // AllGather of attention outputs, column-parallel projection, AllGather.
    let mut gather = Gather::new(bsz, fq);
    for (i, cp) in p.cubes.iter().enumerate() {
        for r in &cp.attn_out {
            gather.put(r.start, &attn[i].cols_range(r.clone()));
        }
    }
    let full = gather.finish(0..fq, "attention gather")?;
    let mut out = Gather::new(bsz, dm);
    for cp in &p.cubes {
        let cols = cp.wo.cols[0].clone();
        out.put(cols.start, &full.matmul(&data.wo.cols_range(cols))?);
    }
    out.finish(0..dm, "output gather")
}
