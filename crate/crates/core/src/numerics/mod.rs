//! Exact attention, sharded attention with softmax statistics, the shard
//! merge and the projection/reduction commute.
//!
//! The softmax core is generic over [`SoftmaxScalar`] so the same code can
//! run in `f64` and in exact arithmetic in tests.

mod verify;

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Range, Sub};

use num_traits::{One, Zero};

use crate::error::{Error, Result};

pub use verify::{verify_flow, FlowData, VerifyReport};

pub trait SoftmaxScalar:
    Copy
    + Debug
    + PartialOrd
    + Zero
    + One
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
{
    /// `e^(a - b)`.
    fn exp_diff(a: Self, b: Self) -> Self;
    fn neg_infinity() -> Self;
    fn is_neg_infinity(&self) -> bool;
}

impl SoftmaxScalar for f64 {
    fn exp_diff(a: Self, b: Self) -> Self {
        if a == f64::NEG_INFINITY {
            0.0
        } else {
            (a - b).exp()
        }
    }

    fn neg_infinity() -> Self {
        f64::NEG_INFINITY
    }

    fn is_neg_infinity(&self) -> bool {
        *self == f64::NEG_INFINITY
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: SoftmaxScalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn matmul(&self, other: &Mat<T>) -> Result<Mat<T>> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for l in 0..self.cols {
                let a = self.get(i, l);
                for j in 0..other.cols {
                    let v = out.get(i, j) + a * other.get(l, j);
                    out.set(i, j, v);
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Mat<T> {
        Mat::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn cols_range(&self, r: Range<usize>) -> Mat<T> {
        Mat::from_fn(self.rows, r.len(), |i, j| self.get(i, r.start + j))
    }

    pub fn rows_range(&self, r: Range<usize>) -> Mat<T> {
        Mat::from_fn(r.len(), self.cols, |i, j| self.get(r.start + i, j))
    }

    /// Writes `block` with its top-left corner at `(r0, c0)`.
    pub fn put(&mut self, r0: usize, c0: usize, block: &Mat<T>) {
        for i in 0..block.rows {
            for j in 0..block.cols {
                self.set(r0 + i, c0 + j, block.get(i, j));
            }
        }
    }

    pub fn add(&self, other: &Mat<T>) -> Result<Mat<T>> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::ShapeMismatch("adding matrices of different shapes".into()));
        }
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        })
    }

    pub fn scale_rows(&self, w: &[T]) -> Mat<T> {
        Mat::from_fn(self.rows, self.cols, |i, j| w[i] * self.get(i, j))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Mat<T> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }
}

impl Mat<f64> {
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Mat<f64>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// `max |self - other| / max |other|`.
    pub fn rel_err(&self, reference: &Mat<f64>) -> f64 {
        let r = reference.max_abs();
        let d = self.max_abs_diff(reference);
        if r == 0.0 {
            d
        } else {
            d / r
        }
    }
}

/// Partial attention over one shard of keys: the locally normalized output
/// `a`, and per query row the local max score `m` and exp-sum `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardStats<T> {
    pub a: Mat<T>,
    pub m: Vec<T>,
    pub l: Vec<T>,
}

impl<T: SoftmaxScalar> ShardStats<T> {
    /// Stats of a shard with no keys; the identity of the merge.
    pub fn neutral(rows: usize, d: usize) -> Self {
        ShardStats {
            a: Mat::zeros(rows, d),
            m: vec![T::neg_infinity(); rows],
            l: vec![T::zero(); rows],
        }
    }

    pub fn is_neutral(&self) -> bool {
        self.m.iter().all(|m| m.is_neg_infinity())
    }

    /// Same statistics restricted to a window of output features.
    pub fn cols_range(&self, r: Range<usize>) -> Self {
        ShardStats {
            a: self.a.cols_range(r),
            m: self.m.clone(),
            l: self.l.clone(),
        }
    }
}

/// Stable softmax of each score row over the shard, applied to `v`.
pub fn shard_from_scores<T: SoftmaxScalar>(scores: &Mat<T>, v: &Mat<T>) -> Result<ShardStats<T>> {
    if scores.cols() != v.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores per row against {} value rows",
            scores.cols(),
            v.rows()
        )));
    }
    let (rows, d) = (scores.rows(), v.cols());
    if scores.cols() == 0 {
        return Ok(ShardStats::neutral(rows, d));
    }
    let mut a = Mat::zeros(rows, d);
    let mut ms = Vec::with_capacity(rows);
    let mut ls = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = scores.row(i);
        let m = row.iter().copied().fold(row[0], |x, y| if y > x { y } else { x });
        let mut l = T::zero();
        let mut acc = vec![T::zero(); d];
        for (t, &s) in row.iter().enumerate() {
            let p = T::exp_diff(s, m);
            l = l + p;
            for (j, slot) in acc.iter_mut().enumerate() {
                *slot = *slot + p * v.get(t, j);
            }
        }
        for (j, x) in acc.into_iter().enumerate() {
            a.set(i, j, x / l);
        }
        ms.push(m);
        ls.push(l);
    }
    Ok(ShardStats { a, m: ms, l: ls })
}

/// Merges shards in the given order. Rows are combined with weights
/// `alpha_n = e^(m_n - m) l_n / l` where `m` is the largest shard max and
/// `l = sum_n e^(m_n - m) l_n`.
pub fn combine<T: SoftmaxScalar>(stats: &[ShardStats<T>]) -> Result<ShardStats<T>> {
    let first = stats.first().ok_or(Error::AllNeutral)?;
    let (rows, d) = (first.a.rows(), first.a.cols());
    if stats
        .iter()
        .any(|s| s.a.rows() != rows || s.a.cols() != d || s.m.len() != rows || s.l.len() != rows)
    {
        return Err(Error::ShapeMismatch("shards disagree on shape".into()));
    }
    if stats.iter().all(ShardStats::is_neutral) {
        return Err(Error::AllNeutral);
    }
    let mut out = ShardStats::neutral(rows, d);
    for i in 0..rows {
        let live: Vec<&ShardStats<T>> = stats.iter().filter(|s| !s.m[i].is_neg_infinity()).collect();
        let Some(first) = live.first() else { continue };
        let m = live
            .iter()
            .map(|s| s.m[i])
            .fold(first.m[i], |x, y| if y > x { y } else { x });
        let l = live
            .iter()
            .fold(T::zero(), |acc, s| acc + T::exp_diff(s.m[i], m) * s.l[i]);
        for j in 0..d {
            let v = live.iter().fold(T::zero(), |acc, s| {
                acc + (T::exp_diff(s.m[i], m) * s.l[i] / l) * s.a.get(i, j)
            });
            out.a.set(i, j, v);
        }
        out.m[i] = m;
        out.l[i] = l;
    }
    Ok(out)
}

pub fn merge_shards<T: SoftmaxScalar>(stats: &[ShardStats<T>]) -> Result<Mat<T>> {
    Ok(combine(stats)?.a)
}

/// Merge weights `alpha_n` per shard and row.
pub fn merge_weights<T: SoftmaxScalar>(stats: &[ShardStats<T>]) -> Result<Vec<Vec<T>>> {
    let merged = combine(stats)?;
    Ok(stats
        .iter()
        .map(|s| {
            (0..s.m.len())
                .map(|i| {
                    if s.m[i].is_neg_infinity() || merged.m[i].is_neg_infinity() {
                        T::zero()
                    } else {
                        T::exp_diff(s.m[i], merged.m[i]) * s.l[i] / merged.l[i]
                    }
                })
                .collect()
        })
        .collect())
}

fn check_qkv(q: &Mat<f64>, k: &Mat<f64>, v: &Mat<f64>) -> Result<()> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::ShapeMismatch(format!(
            "Q {}x{}, K {}x{}, V {}x{}",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols(),
            v.rows(),
            v.cols()
        )));
    }
    Ok(())
}

fn scores(q: &Mat<f64>, k: &Mat<f64>, scale: f64) -> Result<Mat<f64>> {
    Ok(q.matmul(&k.transpose())?.map(|s| s * scale))
}

/// `softmax(Q K^T scale) V` with max subtraction.
pub fn exact_attention(q: &Mat<f64>, k: &Mat<f64>, v: &Mat<f64>, scale: f64) -> Result<Mat<f64>> {
    check_qkv(q, k, v)?;
    if k.rows() == 0 {
        return Err(Error::ShapeMismatch("attention over zero keys".into()));
    }
    Ok(shard_from_scores(&scores(q, k, scale)?, v)?.a)
}

/// Attention over one shard of keys. An empty shard gives the neutral stats.
pub fn shard_attention(q: &Mat<f64>, k: &Mat<f64>, v: &Mat<f64>, scale: f64) -> Result<ShardStats<f64>> {
    check_qkv(q, k, v)?;
    shard_from_scores(&scores(q, k, scale)?, v)
}

/// Output-projection weight cut two ways: input rows per group and output
/// columns per cube (`yx`), or input rows per cube (`yy`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSlices {
    pub w_o_full: Mat<f64>,
    pub slices_yx: Vec<WeightSlice>,
    pub slices_yy: Vec<WeightSlice>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSlice {
    pub cube: usize,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
    pub data: Mat<f64>,
}

impl ProjectionSlices {
    /// `yx` and `yy` give, per cube, the `(rows, cols)` window to cut.
    pub fn cut(w_o: &Mat<f64>, yx: &[(Range<usize>, Range<usize>)], yy: &[(Range<usize>, Range<usize>)]) -> Self {
        let take = |blocks: &[(Range<usize>, Range<usize>)]| {
            blocks
                .iter()
                .enumerate()
                .map(|(cube, (r, c))| WeightSlice {
                    cube,
                    rows: r.clone(),
                    cols: c.clone(),
                    data: w_o.rows_range(r.clone()).cols_range(c.clone()),
                })
                .collect()
        };
        ProjectionSlices {
            w_o_full: w_o.clone(),
            slices_yx: take(yx),
            slices_yy: take(yy),
        }
    }

    pub fn reassemble(slices: &[WeightSlice], rows: usize, cols: usize) -> Mat<f64> {
        let mut out = Mat::zeros(rows, cols);
        for s in slices {
            out.put(s.rows.start, s.cols.start, &s.data);
        }
        out
    }
}

/// Project first, reduce after: each cube weights every shard's slice of
/// the partial output by its merge weight, multiplies by its row slice of
/// `W_O`, and the per-cube products are summed in cube order.
///
/// `scatter[c]` must equal the row window of `slices[c]`.
pub fn deferred_projection_reduce(
    stats: &[ShardStats<f64>],
    slices: &[WeightSlice],
    scatter: &[Range<usize>],
) -> Result<Mat<f64>> {
    if slices.len() != scatter.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} slices for {} scatter ranges",
            slices.len(),
            scatter.len()
        )));
    }
    let alphas = merge_weights(stats)?;
    let d = stats[0].a.cols();
    let mut covered = vec![false; d];
    let mut out: Option<Mat<f64>> = None;
    for (slice, r) in slices.iter().zip(scatter) {
        if slice.rows != *r || r.end > d {
            return Err(Error::ShapeMismatch(format!(
                "projection rows {:?} misaligned with scatter range {r:?}",
                slice.rows
            )));
        }
        let mut partial: Option<Mat<f64>> = None;
        for (s, alpha) in stats.iter().zip(&alphas) {
            let projected = s.a.cols_range(r.clone()).matmul(&slice.data)?.scale_rows(alpha);
            partial = Some(match partial {
                None => projected,
                Some(p) => p.add(&projected)?,
            });
        }
        for c in covered[r.clone()].iter_mut() {
            if *c {
                return Err(Error::ShapeMismatch("scatter ranges overlap".into()));
            }
            *c = true;
        }
        if let Some(p) = partial {
            out = Some(match out {
                None => p,
                Some(o) => o.add(&p)?,
            });
        }
    }
    if covered.iter().any(|c| !c) {
        return Err(Error::ShapeMismatch("scatter ranges leave features uncovered".into()));
    }
    out.ok_or_else(|| Error::ShapeMismatch("no projection slices".into()))
}
