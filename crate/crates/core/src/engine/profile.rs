use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fabric::{LinkSpec, MeshTopology};
use crate::sa_model::CubeConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceKind {
    /// Compute on the base die of every memory cube, cubes on a mesh.
    Pnm,
    /// One or more GPUs with a single memory pool each.
    Gpu,
}

/// Chip-to-chip link between GPUs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct C2cSpec {
    pub latency: f64,
    pub bw_per_dir: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuSpec {
    pub devices: usize,
    /// Per device.
    pub peak_flops: f64,
    /// Per device.
    pub hbm_bw: f64,
    pub mem_util: f64,
    pub compute_util: f64,
    pub c2c: C2cSpec,
}

/// Power ceiling is `hbm_stacks * hbm_w + compute_units * compute_w`. A
/// `static_fraction` of it is drawn whenever the package is on; the rest
/// scales with how long memory and compute are busy. The split and the
/// link energy are calibrated values, not measurements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerSpec {
    pub hbm_stacks: usize,
    pub hbm_w: f64,
    pub compute_units: usize,
    pub compute_w: f64,
    pub static_fraction: f64,
    pub link_pj_per_byte: f64,
}

impl PowerSpec {
    pub fn ceiling(&self) -> f64 {
        self.hbm_stacks as f64 * self.hbm_w + self.compute_units as f64 * self.compute_w
    }

    pub fn static_power(&self) -> f64 {
        self.static_fraction * self.ceiling()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    pub name: String,
    pub kind: DeviceKind,
    pub cubes: usize,
    pub cube: CubeConfig,
    pub link: LinkSpec,
    pub topo: MeshTopology,
    pub gpu: Option<GpuSpec>,
    pub power: PowerSpec,
    /// Aggregate bandwidth to use instead of `cubes * cube.hbm_bw`.
    #[serde(default)]
    pub effective_hbm_bw: Option<f64>,
    #[serde(default = "default_true")]
    pub continuous_tiling: bool,
    #[serde(default)]
    pub destination: usize,
}

fn default_true() -> bool {
    true
}

pub const PROFILES: [&str; 4] = ["pnm-16", "h100", "rubin", "rubin-tp2"];

const NVLINK_LATENCY: f64 = 900e-9;

impl HardwareProfile {
    pub fn preset(name: &str) -> Result<Self> {
        let gpu =
            |devices: usize, peak: f64, bw: f64, c2c_bw: f64, stacks: usize, stack_w: f64, dies: usize, die_w: f64| {
                HardwareProfile {
                    name: name.to_string(),
                    kind: DeviceKind::Gpu,
                    cubes: stacks * devices,
                    cube: CubeConfig {
                        peak_override: true,
                        peak_flops: peak / stacks as f64,
                        hbm_bw: bw / stacks as f64,
                        ..CubeConfig::default()
                    },
                    link: LinkSpec::default(),
                    topo: MeshTopology::new(1, 1),
                    gpu: Some(GpuSpec {
                        devices,
                        peak_flops: peak,
                        hbm_bw: bw,
                        mem_util: 0.9,
                        compute_util: 1.0,
                        c2c: C2cSpec {
                            latency: NVLINK_LATENCY,
                            bw_per_dir: c2c_bw,
                        },
                    }),
                    power: PowerSpec {
                        hbm_stacks: stacks * devices,
                        hbm_w: stack_w,
                        compute_units: dies * devices,
                        compute_w: die_w,
                        static_fraction: 0.7,
                        link_pj_per_byte: 10.0,
                    },
                    effective_hbm_bw: None,
                    continuous_tiling: true,
                    destination: 0,
                }
            };
        let p = match name {
            "pnm-16" => HardwareProfile {
                name: name.into(),
                kind: DeviceKind::Pnm,
                cubes: 16,
                cube: CubeConfig::default(),
                link: LinkSpec::default(),
                topo: MeshTopology::default(),
                gpu: None,
                power: PowerSpec {
                    hbm_stacks: 16,
                    hbm_w: 75.0,
                    compute_units: 16,
                    compute_w: 15.0,
                    static_fraction: 0.2,
                    link_pj_per_byte: 1.0,
                },
                effective_hbm_bw: None,
                continuous_tiling: true,
                destination: 0,
            },
            // 5 HBM3 stacks at 40 W and one 500 W die: 700 W.
            "h100" => gpu(1, 1978e12, 3.35e12, 450e9, 5, 40.0, 1, 500.0),
            // 8 HBM4 stacks at 75 W and two 800 W dies: 2200 W.
            "rubin" => gpu(1, 17500e12, 22e12, 1800e9, 8, 75.0, 2, 800.0),
            "rubin-tp2" => gpu(2, 17500e12, 22e12, 1800e9, 8, 75.0, 2, 800.0),
            other => return Err(Error::UnknownPreset(other.to_string())),
        };
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.link.validate()?;
        self.topo.validate()?;
        let sf = self.power.static_fraction;
        if !(0.0..=1.0).contains(&sf)
            || self.power.hbm_w < 0.0
            || self.power.compute_w < 0.0
            || self.power.link_pj_per_byte < 0.0
        {
            return Err(Error::InvalidHardware("power parameters out of range".into()));
        }
        if let Some(bw) = self.effective_hbm_bw {
            if !(bw > 0.0) {
                return Err(Error::InvalidHardware("effective_hbm_bw must be positive".into()));
            }
        }
        match self.kind {
            DeviceKind::Pnm => {
                self.cube.validate()?;
                if self.topo.cubes() != self.cubes {
                    return Err(Error::InvalidHardware(format!(
                        "{} cubes do not fill a {}x{} mesh",
                        self.cubes, self.topo.rows, self.topo.cols
                    )));
                }
                if self.destination >= self.cubes {
                    return Err(Error::UnknownCube(self.destination));
                }
            }
            DeviceKind::Gpu => {
                let g = self
                    .gpu
                    .as_ref()
                    .ok_or_else(|| Error::InvalidHardware("GPU profile without GPU parameters".into()))?;
                if g.devices == 0 || !(g.peak_flops > 0.0) || !(g.hbm_bw > 0.0) || !(g.c2c.bw_per_dir > 0.0) {
                    return Err(Error::InvalidHardware("GPU parameters must be positive".into()));
                }
                if !(g.mem_util > 0.0 && g.mem_util <= 1.0) || !(g.compute_util > 0.0 && g.compute_util <= 1.0) {
                    return Err(Error::InvalidHardware("utilization factors must lie in (0, 1]".into()));
                }
            }
        }
        Ok(())
    }

    pub fn aggregate_hbm_bw(&self) -> f64 {
        if let Some(bw) = self.effective_hbm_bw {
            return bw;
        }
        match (&self.kind, &self.gpu) {
            (DeviceKind::Gpu, Some(g)) => g.hbm_bw * g.devices as f64,
            _ => self.cubes as f64 * self.cube.hbm_bw,
        }
    }

    pub fn aggregate_flops(&self) -> f64 {
        match (&self.kind, &self.gpu) {
            (DeviceKind::Gpu, Some(g)) => g.peak_flops * g.devices as f64,
            _ => self.cubes as f64 * self.cube.peak_flops,
        }
    }

    pub fn tdp(&self) -> f64 {
        self.power.ceiling()
    }

    /// Copy with a different per-cube compute rate, skipping the check
    /// against the array geometry.
    pub fn with_cube_flops(&self, flops: f64) -> Self {
        let mut p = self.clone();
        p.cube.peak_flops = flops;
        p.cube.peak_override = true;
        p
    }

    pub fn with_link_bw(&self, bw: f64) -> Self {
        let mut p = self.clone();
        p.link.bw_per_dir = bw;
        p
    }

    /// Cube parameters used by the simulator, with the per-cube share of
    /// `effective_hbm_bw` when set.
    pub fn sim_cube(&self) -> CubeConfig {
        let mut c = self.cube;
        if let Some(bw) = self.effective_hbm_bw {
            c.hbm_bw = bw / self.cubes as f64;
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in PROFILES {
            HardwareProfile::preset(p).unwrap().validate().unwrap();
        }
        assert!(HardwareProfile::preset("b200").is_err());
    }

    #[test]
    fn table_values() {
        let pnm = HardwareProfile::preset("pnm-16").unwrap();
        assert_eq!(pnm.tdp(), 1440.0);
        assert!((pnm.aggregate_hbm_bw() - 44e12).abs() < 1.0);
        assert!((pnm.aggregate_flops() - 1536e12).abs() < 1.0);
        let h100 = HardwareProfile::preset("h100").unwrap();
        assert_eq!(h100.tdp(), 700.0);
        assert_eq!(HardwareProfile::preset("rubin").unwrap().tdp(), 2200.0);
        let tp2 = HardwareProfile::preset("rubin-tp2").unwrap();
        assert!((tp2.aggregate_hbm_bw() - pnm.aggregate_hbm_bw()).abs() < 1.0);
        assert!((pnm.aggregate_hbm_bw() / h100.aggregate_hbm_bw() - 13.13).abs() < 0.01);
    }

    #[test]
    fn effective_bandwidth_overrides_table() {
        let mut pnm = HardwareProfile::preset("pnm-16").unwrap();
        pnm.effective_hbm_bw = Some(40e12);
        assert_eq!(pnm.aggregate_hbm_bw(), 40e12);
        assert_eq!(pnm.sim_cube().hbm_bw, 2.5e12);
    }
}
