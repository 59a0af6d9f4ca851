//! Per-cube compute model: output-stationary systolic arrays, K/N tiling,
//! utilization with fill/drain overhead, and kernel time under
//! double-buffered HBM streaming.

use num_rational::Ratio;
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workload::GemmShape;

/// Exact fractions for utilization values.
pub type Frac = Ratio<u64>;

pub fn frac_to_f64(f: Frac) -> f64 {
    f.to_f64().unwrap_or(f64::NAN)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SAConfig {
    pub array_dim: usize,
    pub arrays_per_core: usize,
    pub cores: usize,
    pub freq: f64,
}

impl Default for SAConfig {
    fn default() -> Self {
        SAConfig {
            array_dim: 16,
            arrays_per_core: 8,
            cores: 12,
            freq: 2.0e9,
        }
    }
}

impl SAConfig {
    pub fn total_arrays(&self) -> usize {
        self.arrays_per_core * self.cores
    }

    /// Fill plus drain cycles of one pass through the array.
    pub fn fill_drain(&self) -> usize {
        2 * (self.array_dim - 1)
    }

    /// Two FLOPs per MAC per PE per cycle.
    pub fn derived_peak_flops(&self) -> f64 {
        (self.total_arrays() * self.array_dim * self.array_dim) as f64 * self.freq * 2.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.array_dim < 2 {
            return Err(Error::InvalidHardware("array_dim must be >= 2".into()));
        }
        if self.arrays_per_core == 0 || self.cores == 0 {
            return Err(Error::InvalidHardware("need at least one array".into()));
        }
        if !(self.freq > 0.0) {
            return Err(Error::InvalidHardware("freq must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CubeConfig {
    pub sa: SAConfig,
    pub peak_flops: f64,
    pub hbm_bw: f64,
    pub hbm_latency: f64,
    pub sram_per_core: f64,
    /// Size of one input/output buffer bank.
    pub sram_bank: f64,
    /// Skip the check that `peak_flops` matches the array geometry. Used by
    /// design-space sweeps that scale compute independently.
    pub peak_override: bool,
    /// Exposed vector-unit time added to every kernel. Zero means softmax
    /// and normalization are fully hidden behind the arrays.
    pub vector_overhead: f64,
}

impl Default for CubeConfig {
    fn default() -> Self {
        CubeConfig {
            sa: SAConfig::default(),
            peak_flops: 96.0e12,
            hbm_bw: 2.75e12,
            hbm_latency: 200e-9,
            sram_per_core: 32.0 * 1000.0,
            sram_bank: 6400.0,
            peak_override: false,
            vector_overhead: 0.0,
        }
    }
}

impl CubeConfig {
    pub fn validate(&self) -> Result<()> {
        self.sa.validate()?;
        for (field, v) in [
            ("peak_flops", self.peak_flops),
            ("hbm_bw", self.hbm_bw),
            ("sram_per_core", self.sram_per_core),
            ("sram_bank", self.sram_bank),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidHardware(format!("{field} must be positive")));
            }
        }
        if !(self.hbm_latency >= 0.0) || !(self.vector_overhead >= 0.0) {
            return Err(Error::InvalidHardware("latencies must be non-negative".into()));
        }
        if !self.peak_override {
            let derived = self.sa.derived_peak_flops();
            if (self.peak_flops - derived).abs() > 0.05 * derived {
                return Err(Error::InvalidHardware(format!(
                    "peak_flops {:.3e} differs from array geometry ({derived:.3e}) by more than 5%",
                    self.peak_flops
                )));
            }
        }
        // Two A banks, two B banks and one output bank per core.
        if 5.0 * self.sram_bank > self.sram_per_core {
            return Err(Error::InvalidHardware(format!(
                "five banks of {} B do not fit in {} B of core SRAM",
                self.sram_bank, self.sram_per_core
            )));
        }
        Ok(())
    }

    pub fn ridge_point(&self) -> f64 {
        self.peak_flops / self.hbm_bw
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tiling {
    /// Number of K segments.
    pub s_k: usize,
    /// Deepest segment, `ceil(K / s_k)`.
    pub k: usize,
    /// Shallowest segment, `floor(K / s_k)`.
    pub min_k: usize,
    /// Column tiles `ceil(N / M_SA)`.
    pub col_tiles: usize,
    /// Total output tiles `s_k * col_tiles`.
    pub n_tiles: usize,
    pub tiles_per_sa: usize,
    pub busy_arrays: usize,
    /// Full depth `K`, kept for exact utilization with uneven segments.
    pub depth: usize,
}

impl Tiling {
    /// Tiling with `s_k` segments of `floor` or `ceil` of `K / s_k` depth.
    pub fn with_splits(gemm: &GemmShape, sa: &SAConfig, s_k: usize) -> Result<Tiling> {
        let infeasible = |reason: &str| Error::InfeasibleTiling {
            m: gemm.m,
            k: gemm.k,
            n: gemm.n,
            reason: reason.into(),
        };
        if gemm.k == 0 || gemm.n == 0 {
            return Err(infeasible("empty K or N"));
        }
        if s_k == 0 || s_k > gemm.k {
            return Err(infeasible("per-tile depth would drop below 1"));
        }
        let k = gemm.k.div_ceil(s_k);
        let min_k = gemm.k / s_k;
        let col_tiles = gemm.n.div_ceil(sa.array_dim);
        let n_tiles = s_k * col_tiles;
        let p = sa.total_arrays();
        Ok(Tiling {
            s_k,
            k,
            min_k,
            col_tiles,
            n_tiles,
            tiles_per_sa: n_tiles.div_ceil(p),
            busy_arrays: n_tiles.min(p),
            depth: gemm.k,
        })
    }

    pub fn is_uneven(&self) -> bool {
        self.min_k != self.k
    }
}

fn as_u64(v: usize) -> u64 {
    v as u64
}

/// Array occupancy times per-array efficiency:
/// `min(T,P)/P * K / (K + 2(M_SA-1) s_k)`, which is `k/(k + 2(M_SA-1))`
/// when the segments are even. With `continuous`, an array running `n > 1`
/// consecutive tiles pays the fill/drain once: `nK / (nK + 2(M_SA-1) s_k)`.
pub fn utilization(tiling: &Tiling, sa: &SAConfig, continuous: bool) -> Frac {
    let p = as_u64(sa.total_arrays());
    let occupancy = Frac::new(as_u64(tiling.busy_arrays), p);
    let n = if continuous { as_u64(tiling.tiles_per_sa) } else { 1 };
    let work = n * as_u64(tiling.depth);
    let overhead = as_u64(sa.fill_drain()) * as_u64(tiling.s_k);
    occupancy * Frac::new(work, work + overhead)
}

/// `nk / (nk + 2(M_SA - 1))`.
pub fn continuous_utilization(k: usize, n: usize, sa: &SAConfig) -> Frac {
    let work = as_u64(n) * as_u64(k);
    Frac::new(work, work + as_u64(sa.fill_drain()))
}

/// Number of K splits maximizing the default-mode utilization.
///
/// Below saturation (`T <= P`) utilization grows with `s_k`; above it,
/// it shrinks. The optimum is therefore one of the two splits around
/// `P / col_tiles`. Ties go to the smaller split.
pub fn choose_tiling(gemm: &GemmShape, sa: &SAConfig) -> Result<Tiling> {
    let probe = Tiling::with_splits(gemm, sa, 1)?;
    let p = sa.total_arrays();
    if probe.col_tiles >= p {
        return Ok(probe);
    }
    let below = (p / probe.col_tiles).clamp(1, gemm.k);
    let above = (below + 1).min(gemm.k);
    let lo = Tiling::with_splits(gemm, sa, below)?;
    if above == below {
        return Ok(lo);
    }
    let hi = Tiling::with_splits(gemm, sa, above)?;
    if utilization(&hi, sa, false) > utilization(&lo, sa, false) {
        Ok(hi)
    } else {
        Ok(lo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resource {
    Compute,
    Memory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GemmTiming {
    pub tiling: Tiling,
    pub utilization: f64,
    pub compute_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelTiming {
    pub time: f64,
    pub compute_time: f64,
    pub memory_time: f64,
    pub latency: f64,
    pub binding: Resource,
    pub gemms: Vec<GemmTiming>,
}

/// One kernel on one cube: a set of GEMMs sharing a single HBM stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub gemms: Vec<GemmShape>,
    pub streamed_bytes: f64,
}

impl KernelSpec {
    pub fn single(gemm: GemmShape) -> Self {
        KernelSpec {
            streamed_bytes: gemm.bytes(),
            gemms: vec![gemm],
        }
    }

    pub fn flops(&self) -> f64 {
        self.gemms.iter().map(|g| g.flops()).sum()
    }
}

/// Live operand footprint: one `M_SA x M_SA` block per array in each bank.
pub fn check_sram(cube: &CubeConfig, bytes_per_elem: f64) -> Result<()> {
    let d = cube.sa.array_dim as f64;
    let need = cube.sa.arrays_per_core as f64 * d * d * bytes_per_elem;
    if need > cube.sram_bank {
        return Err(Error::InvalidHardware(format!(
            "tile blocks need {need} B per bank but banks hold {} B",
            cube.sram_bank
        )));
    }
    Ok(())
}

/// Time of one GEMM's arithmetic. Rows are padded to whole array passes.
pub fn gemm_compute(gemm: &GemmShape, cube: &CubeConfig, continuous: bool) -> Result<Option<GemmTiming>> {
    if gemm.is_empty() {
        return Ok(None);
    }
    check_sram(cube, gemm.bytes_per_elem)?;
    let tiling = choose_tiling(gemm, &cube.sa)?;
    let util = frac_to_f64(utilization(&tiling, &cube.sa, continuous));
    let d = cube.sa.array_dim;
    let padded_rows = gemm.m.div_ceil(d) * d;
    let padded_flops = 2.0 * padded_rows as f64 * gemm.k as f64 * gemm.n as f64;
    Ok(Some(GemmTiming {
        tiling,
        utilization: util,
        compute_time: padded_flops / (cube.peak_flops * util),
    }))
}

/// `max(compute, memory) + hbm_latency + vector_overhead`. The HBM latency
/// is paid once because the next tile is prefetched while the arrays work.
pub fn kernel_time(spec: &KernelSpec, cube: &CubeConfig, continuous: bool) -> Result<KernelTiming> {
    let mut gemms = Vec::with_capacity(spec.gemms.len());
    let mut compute_time = 0.0;
    for g in &spec.gemms {
        if let Some(t) = gemm_compute(g, cube, continuous)? {
            compute_time += t.compute_time;
            gemms.push(t);
        }
    }
    let memory_time = spec.streamed_bytes / cube.hbm_bw;
    if compute_time == 0.0 && memory_time == 0.0 {
        return Ok(KernelTiming {
            time: 0.0,
            compute_time,
            memory_time,
            latency: 0.0,
            binding: Resource::Memory,
            gemms,
        });
    }
    let binding = if compute_time > memory_time {
        Resource::Compute
    } else {
        Resource::Memory
    };
    let latency = cube.hbm_latency + cube.vector_overhead;
    Ok(KernelTiming {
        time: compute_time.max(memory_time) + latency,
        compute_time,
        memory_time,
        latency,
        binding,
        gemms,
    })
}

pub fn cube_kernel_time(gemm: &GemmShape, cube: &CubeConfig, continuous: bool) -> Result<KernelTiming> {
    kernel_time(&KernelSpec::single(*gemm), cube, continuous)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dataflow {
    WS,
    IS,
    OS,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataflowEntry {
    pub kind: Dataflow,
    /// GEMM dimension that streams through the array.
    pub streamed_dim: char,
    pub streamed_len: usize,
    /// Fraction of PE-cycles lost to fill and drain for one pass.
    pub idle_fraction: f64,
    /// Partial-sum bytes each array ships for cross-array collection.
    pub collection_bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataflowReport {
    pub entries: Vec<DataflowEntry>,
    pub chosen: Dataflow,
}

const PSUM_BYTES: f64 = 4.0;

/// Compares the three dataflows for a GEMM. Only output-stationary is
/// executed by the model; the others are reported for comparison.
pub fn dataflow_report(gemm: &GemmShape, sa: &SAConfig) -> DataflowReport {
    let d = sa.array_dim;
    let fd = sa.fill_drain() as f64;
    let idle = |len: usize| fd / (len as f64 + fd);
    let entries = vec![
        DataflowEntry {
            kind: Dataflow::WS,
            streamed_dim: 'M',
            streamed_len: gemm.m,
            idle_fraction: idle(gemm.m),
            collection_bytes: (gemm.m * d) as f64 * PSUM_BYTES,
        },
        DataflowEntry {
            kind: Dataflow::IS,
            streamed_dim: 'N',
            streamed_len: gemm.n,
            idle_fraction: idle(gemm.n),
            collection_bytes: (gemm.m * gemm.n) as f64 * PSUM_BYTES,
        },
        DataflowEntry {
            kind: Dataflow::OS,
            streamed_dim: 'K',
            streamed_len: gemm.k,
            idle_fraction: idle(gemm.k),
            collection_bytes: (d * d) as f64 * PSUM_BYTES,
        },
    ];
    DataflowReport {
        entries,
        chosen: Dataflow::OS,
    }
}

impl DataflowReport {
    pub fn get(&self, kind: Dataflow) -> &DataflowEntry {
        self.entries
            .iter()
            .find(|e| e.kind == kind)
            .expect("all dataflows reported")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::Stage;
    use proptest::prelude::*;

    fn g(m: usize, k: usize, n: usize) -> GemmShape {
        GemmShape::new(m, k, n, 1.0, Stage::ScoreQk)
    }

    fn sa() -> SAConfig {
        SAConfig::default()
    }

    #[test]
    fn default_cube_is_consistent() {
        CubeConfig::default().validate().unwrap();
        assert_eq!(sa().total_arrays(), 96);
        let mut c = CubeConfig {
            peak_flops: 256e12,
            ..CubeConfig::default()
        };
        assert!(c.validate().is_err());
        c.peak_override = true;
        c.validate().unwrap();
    }

    #[test]
    fn worked_examples() {
        let t = choose_tiling(&g(16, 4096, 768), &sa()).unwrap();
        assert_eq!((t.s_k, t.n_tiles, t.tiles_per_sa), (2, 96, 1));
        let t = choose_tiling(&g(16, 4096, 3072), &sa()).unwrap();
        assert_eq!((t.s_k, t.n_tiles, t.tiles_per_sa), (1, 192, 2));
    }

    #[test]
    fn utilization_examples() {
        let t = Tiling::with_splits(&g(16, 32, 96 * 16), &sa(), 1).unwrap();
        assert_eq!(utilization(&t, &sa(), false), Frac::new(32, 62));
        assert_eq!(continuous_utilization(32, 4, &sa()), Frac::new(128, 158));
        assert_eq!(continuous_utilization(32, 2, &sa()), Frac::new(64, 94));
        assert_eq!(continuous_utilization(32, 1, &sa()), Frac::new(32, 62));
    }

    #[test]
    fn half_occupied_matches_const_over_k_plus_30() {
        // T = 48 < P: U = (48/96) * K / (K + 30) = (N/16) K / (P (k + 30)).
        for k in [1usize, 7, 32, 500] {
            let t = Tiling::with_splits(&g(16, k, 768), &sa(), 1).unwrap();
            assert_eq!(
                utilization(&t, &sa(), false),
                Frac::new(48 * k as u64, 96 * (k as u64 + 30))
            );
        }
    }

    #[test]
    fn single_column_tile_uses_all_depth() {
        let t = choose_tiling(&g(16, 64, 16), &sa()).unwrap();
        assert_eq!(t.n_tiles, t.s_k);
        let best = (1..=64)
            .map(|s| utilization(&Tiling::with_splits(&g(16, 64, 16), &sa(), s).unwrap(), &sa(), false))
            .max()
            .unwrap();
        assert_eq!(utilization(&t, &sa(), false), best);
    }

    #[test]
    fn uneven_split_is_flagged() {
        let t = Tiling::with_splits(&g(1, 10, 16), &sa(), 3).unwrap();
        assert_eq!((t.k, t.min_k), (4, 3));
        assert!(t.is_uneven());
        assert!(Tiling::with_splits(&g(1, 10, 16), &sa(), 11).is_err());
        let t = Tiling::with_splits(&g(1, 10, 16), &sa(), 6).unwrap();
        assert_eq!((t.k, t.min_k), (2, 1));
        assert!(!Tiling::with_splits(&g(1, 10, 16), &sa(), 5).unwrap().is_uneven());
    }

    #[test]
    fn limits() {
        let cube = CubeConfig::default();
        let gemv = g(1, 8192, 8192);
        let t = cube_kernel_time(&gemv, &cube, true).unwrap();
        let mem = gemv.bytes() / cube.hbm_bw + cube.hbm_latency;
        assert_eq!(t.binding, Resource::Memory);
        assert!((t.time - mem).abs() / mem < 0.01);

        let big = g(4096, 4096, 4096);
        let t = cube_kernel_time(&big, &cube, true).unwrap();
        assert_eq!(t.binding, Resource::Compute);
        let c = t.gemms[0].compute_time;
        assert!((t.time - c).abs() / c < 0.01);
    }

    #[test]
    fn score_gemm_is_memory_bound() {
        let cube = CubeConfig::default();
        let score = g(16, 128, 65536);
        assert!(crate::workload::arithmetic_intensity(&score) < cube.ridge_point());
        assert_eq!(cube_kernel_time(&score, &cube, true).unwrap().binding, Resource::Memory);
    }

    #[test]
    fn sram_rejects_wide_elements() {
        let cube = CubeConfig::default();
        check_sram(&cube, 2.0).unwrap();
        assert!(cube_kernel_time(&GemmShape::new(1, 64, 64, 4.0, Stage::ProjO), &cube, true).is_err());
        let mut wide = cube;
        wide.sa.array_dim = 32;
        assert!(check_sram(&wide, 1.0).is_err());
    }

    #[test]
    fn empty_kernel_costs_nothing() {
        let t = kernel_time(
            &KernelSpec {
                gemms: vec![g(16, 128, 0)],
                streamed_bytes: 0.0,
            },
            &CubeConfig::default(),
            true,
        )
        .unwrap();
        assert_eq!(t.time, 0.0);
    }

    #[test]
    fn dataflow_examples() {
        let r = dataflow_report(&g(1, 4096, 512), &sa());
        assert!(r.get(Dataflow::WS).idle_fraction >= 15.0 / 16.0);
        let r2 = dataflow_report(&g(1, 4096, 1024), &sa());
        assert_eq!(
            r2.get(Dataflow::IS).collection_bytes,
            2.0 * r.get(Dataflow::IS).collection_bytes
        );
        assert_eq!(
            r2.get(Dataflow::OS).collection_bytes,
            r.get(Dataflow::OS).collection_bytes
        );
        assert_eq!(r.chosen, Dataflow::OS);
    }

    proptest! {
        #[test]
        fn utilization_in_unit_interval(k in 1usize..2048, n in 1usize..4096, s in 1usize..64) {
            prop_assume!(s <= k);
            let t = Tiling::with_splits(&g(16, k, n), &sa(), s).unwrap();
            let d = utilization(&t, &sa(), false);
            let c = utilization(&t, &sa(), true);
            prop_assert!(d > Frac::from_integer(0) && d <= Frac::from_integer(1));
            prop_assert!(c >= d && c <= Frac::from_integer(1));
        }

        #[test]
        fn continuous_monotone_in_n(k in 1usize..512, n in 1usize..64) {
            prop_assert!(continuous_utilization(k, n + 1, &sa()) > continuous_utilization(k, n, &sa()));
        }

        #[test]
        fn split_monotonicity(kpow in 1u32..10, cols in 1usize..200) {
            let k = 1usize << kpow;
            let gemm = g(16, k, cols * 16);
            let u = |s: usize| utilization(&Tiling::with_splits(&gemm, &sa(), s).unwrap(), &sa(), false);
            let mut s = 1;
            while 2 * s <= k {
                let (a, b) = (Tiling::with_splits(&gemm, &sa(), s).unwrap(), Tiling::with_splits(&gemm, &sa(), 2 * s).unwrap());
                if b.n_tiles <= 96 {
                    prop_assert!(u(2 * s) > u(s));
                }
                if a.n_tiles >= 96 {
                    prop_assert!(u(2 * s) < u(s));
                }
                s *= 2;
            }
        }

        #[test]
        fn kernel_time_monotone(k in 1usize..4096, n in 1usize..8192, f in 1.0f64..4.0) {
            let cube = CubeConfig {
                peak_override: true,
                ..CubeConfig::default()
            };
            let gemm = g(16, k, n);
            let base = cube_kernel_time(&gemm, &cube, true).unwrap().time;
            let mut faster = cube;
            faster.peak_flops *= f;
            prop_assert!(cube_kernel_time(&gemm, &faster, true).unwrap().time <= base);
            let mut wider = cube;
            wider.hbm_bw *= f;
            prop_assert!(cube_kernel_time(&gemm, &wider, true).unwrap().time <= base);
        }
    }
}
