//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::ops::{Add, Div, Mul, Sub};

use num_rational::Ratio;
use num_traits::{One, Zero};
use pnmsim_core::numerics::SoftmaxScalar;

/// Exact softmax scalar. A score is stored as its exponential, so
/// `exp_diff(a, b)` is the quotient `a / b` and `-inf` is zero.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ExpRat(pub Ratio<i128>);

impl ExpRat {
    pub fn new(n: i128, d: i128) -> Self {
        ExpRat(Ratio::new(n, d))
    }
}

impl Add for ExpRat {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ExpRat(self.0 + o.0)
    }
}

impl Sub for ExpRat {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        ExpRat(self.0 - o.0)
    }
}

impl Mul for ExpRat {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        ExpRat(self.0 * o.0)
    }
}

impl Div for ExpRat {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        ExpRat(self.0 / o.0)
    }
}

impl Zero for ExpRat {
    fn zero() -> Self {
        ExpRat(Ratio::zero())
    }
    fn is_zero(&self) -> bool {
        self.0.is_zero()
    }
}

impl One for ExpRat {
    fn one() -> Self {
        ExpRat(Ratio::one())
    }
}

impl SoftmaxScalar for ExpRat {
    fn exp_diff(a: Self, b: Self) -> Self {
        if a.0.is_zero() {
            ExpRat::zero()
        } else {
            a / b
        }
    }

    fn neg_infinity() -> Self {
        ExpRat::zero()
    }

    fn is_neg_infinity(&self) -> bool {
        self.0.is_zero()
    }
}

/// Brute-force argmax of `min(T,P)/P * K/(K + fill*s)` over every split
/// count `s` in `1..=K`, smallest `s` on ties. Returns `(s, num, den)`.
pub fn best_split(k: u64, n: u64, dim: u64, arrays: u64, fill: u64) -> (u64, u128, u128) {
    let cols = n.div_ceil(dim);
    let mut best = (0u64, 0u128, 1u128);
    for s in 1..=k {
        let num = (s * cols).min(arrays) as u128 * k as u128;
        let den = arrays as u128 * (k + fill * s) as u128;
        if num * best.2 > best.1 * den {
            best = (s, num, den);
        }
    }
    best
}

/// Bytes each member sends and the buffers it ends with, found by moving
/// real data through a ring AllReduce: `g-1` reduce-scatter steps, then
/// `g-1` all-gather steps, each cube passing one chunk to its successor.
pub fn simulate_ring_allreduce(inputs: &[Vec<f64>]) -> (Vec<usize>, Vec<Vec<f64>>) {
    let g = inputs.len();
    let len = inputs[0].len();
    assert_eq!(len % g, 0, "payload must split into g chunks");
    let c = len / g;
    let mut buf: Vec<Vec<f64>> = inputs.to_vec();
    let mut sent = vec![0usize; g];
    for step in 0..g - 1 {
        let msgs: Vec<(usize, usize, Vec<f64>)> = (0..g)
            .map(|i| {
                let chunk = (i + g - step) % g;
                (i, chunk, buf[i][chunk * c..(chunk + 1) * c].to_vec())
            })
            .collect();
        for (i, chunk, data) in msgs {
            sent[i] += data.len();
            let dst = (i + 1) % g;
            for (x, y) in buf[dst][chunk * c..(chunk + 1) * c].iter_mut().zip(data) {
                *x += y;
            }
        }
    }
    for step in 0..g - 1 {
        let msgs: Vec<(usize, usize, Vec<f64>)> = (0..g)
            .map(|i| {
                let chunk = (i + 1 + g - step) % g;
                (i, chunk, buf[i][chunk * c..(chunk + 1) * c].to_vec())
            })
            .collect();
        for (i, chunk, data) in msgs {
            sent[i] += data.len();
            buf[(i + 1) % g][chunk * c..(chunk + 1) * c].copy_from_slice(&data);
        }
    }
    (sent, buf)
}

/// Binomial-tree reduce to member 0 with real data; returns bytes sent
/// per member and the root's result.
pub fn simulate_tree_reduce(inputs: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    let g = inputs.len();
    let mut buf: Vec<Vec<f64>> = inputs.to_vec();
    let mut sent = vec![0usize; g];
    let mut span = 1;
    while span < g {
        for i in (0..g).filter(|i| i % (2 * span) == span) {
            sent[i] += buf[i].len();
            let data = buf[i].clone();
            for (x, y) in buf[i - span].iter_mut().zip(data) {
                *x += y;
            }
        }
        span *= 2;
    }
    (sent, buf.swap_remove(0))
}

/// Coefficient of determination of the least-squares line through the points.
pub fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}
