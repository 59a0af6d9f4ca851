//! Run configuration: one TOML file per run. Models and hardware are given
//! either by preset name or inline; every run echoes the resolved form.

use std::path::{Path, PathBuf};

use pnmsim_core::engine::HardwareProfile;
use pnmsim_core::mapper::StrategyKind;
use pnmsim_core::workload::{ModelConfig, WorkloadPoint};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug)]
pub enum ConfigError {
    Io(PathBuf, std::io::Error),
    Parse(String),
    Field(String, String),
}

impl std::error::Error for ConfigError {}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Io(p, e) => write!(f, "cannot read {}: {e}", p.display()),
            ConfigError::Parse(m) => write!(f, "{m}"),
            ConfigError::Field(field, m) => write!(f, "field `{field}`: {m}"),
        }
    }
}

fn field(name: &str, msg: impl ToString) -> ConfigError {
    ConfigError::Field(name.to_string(), msg.to_string())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: toml::Value,
    #[serde(default)]
    hardware: Option<toml::Value>,
    #[serde(default)]
    strategy: Option<String>,
    #[serde(default)]
    workload: Option<WorkloadSection>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    out_dir: Option<PathBuf>,
    #[serde(default)]
    sweep: Option<SweepSection>,
    #[serde(default)]
    ablate: Option<AblateSection>,
    #[serde(default)]
    verify: Option<VerifySection>,
    #[serde(default)]
    roofline: Option<RooflineSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    pub batch: usize,
    pub seq_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Dse,
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub kind: SweepKind,
    /// Per-cube compute axis, TFLOPS.
    #[serde(default)]
    pub cube_tflops: Vec<f64>,
    /// Link bandwidth axis per direction, TB/s.
    #[serde(default)]
    pub d2d_tbps: Vec<f64>,
    #[serde(default)]
    pub batches: Vec<usize>,
    #[serde(default)]
    pub x_label: Option<String>,
    #[serde(default)]
    pub y_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    pub seq_lens: Vec<usize>,
    #[serde(default = "one")]
    pub batch: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub strategies: Option<Vec<String>>,
    #[serde(default = "default_verify_batch")]
    pub batch: usize,
    #[serde(default = "default_verify_seq")]
    pub seq_len: usize,
}

fn default_seeds() -> usize {
    20
}

fn default_threshold() -> f64 {
    1e-10
}

fn default_verify_batch() -> usize {
    2
}

fn default_verify_seq() -> usize {
    256
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            seeds: default_seeds(),
            threshold: default_threshold(),
            strategies: None,
            batch: default_verify_batch(),
            seq_len: default_verify_seq(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RooflineSection {
    pub profiles: Vec<String>,
    pub seq_lens: Vec<usize>,
    #[serde(default = "one")]
    pub batch: usize,
}

/// Fully resolved configuration, serialized into every report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub hardware: HardwareProfile,
    pub strategy: StrategyKind,
    pub workload: Option<WorkloadSection>,
    pub seed: u64,
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
    pub sweep: Option<SweepSection>,
    pub ablate: Option<AblateSection>,
    pub verify: VerifySection,
    pub roofline: Option<RooflineSection>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let model = resolve_model(raw.model)?;
        let hardware = match raw.hardware {
            None => HardwareProfile::preset("pnm-16").expect("built-in profile"),
            Some(v) => resolve_hardware(v)?,
        };
        let strategy = match raw.strategy {
            None => StrategyKind::HpRo,
            Some(s) => s.parse().map_err(|_| {
                field(
                    "strategy",
                    format!("unknown strategy `{s}`, expected one of tp16, hp, hp_ro"),
                )
            })?,
        };
        if let Some(w) = &raw.workload {
            WorkloadPoint::new(w.batch, w.seq_len)
                .validate()
                .map_err(|e| field("workload", e))?;
        }
        let verify = raw.verify.unwrap_or_default();
        if !(verify.threshold >= 0.0) {
            return Err(field("verify.threshold", "must be non-negative"));
        }
        if let Some(list) = &verify.strategies {
            for s in list {
                s.parse::<StrategyKind>()
                    .map_err(|_| field("verify.strategies", format!("unknown strategy `{s}`")))?;
            }
        }
        if let Some(r) = &raw.roofline {
            for p in &r.profiles {
                HardwareProfile::preset(p).map_err(|e| field("roofline.profiles", e))?;
            }
        }
        Ok(RunConfig {
            model,
            hardware,
            strategy,
            workload: raw.workload,
            seed: raw.seed.unwrap_or(0),
            out_dir: raw.out_dir,
            sweep: raw.sweep,
            ablate: raw.ablate,
            verify,
            roofline: raw.roofline,
        })
    }

    pub fn point(&self) -> Result<WorkloadPoint, ConfigError> {
        let w = self
            .workload
            .as_ref()
            .ok_or_else(|| field("workload", "this command needs a [workload] table"))?;
        Ok(WorkloadPoint::new(w.batch, w.seq_len))
    }

    /// Hex SHA-256 of the resolved configuration as canonical JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn verify_strategies(&self) -> Vec<StrategyKind> {
        match &self.verify.strategies {
            None => StrategyKind::ALL.to_vec(),
            Some(list) => list.iter().map(|s| s.parse().expect("checked at load")).collect(),
        }
    }
}

fn preset_name(v: &toml::Value, what: &str) -> Result<Option<String>, ConfigError> {
    match v {
        toml::Value::String(s) => Ok(Some(s.clone())),
        toml::Value::Table(t) if t.contains_key("preset") => {
            if t.len() != 1 {
                return Err(field(what, "a preset table takes no other keys"));
            }
            match &t["preset"] {
                toml::Value::String(s) => Ok(Some(s.clone())),
                _ => Err(field(&format!("{what}.preset"), "must be a string")),
            }
        }
        toml::Value::Table(_) => Ok(None),
        _ => Err(field(what, "expected a preset name or a table")),
    }
}

fn resolve_model(v: toml::Value) -> Result<ModelConfig, ConfigError> {
    let model = match preset_name(&v, "model")? {
        Some(name) => ModelConfig::preset(&name).map_err(|e| field("model", e))?,
        None => v.try_into().map_err(|e: toml::de::Error| field("model", e.message()))?,
    };
    model.validate().map_err(|e| field("model", e))?;
    Ok(model)
}

fn resolve_hardware(v: toml::Value) -> Result<HardwareProfile, ConfigError> {
    let hw = match preset_name(&v, "hardware")? {
        Some(name) => HardwareProfile::preset(&name).map_err(|e| field("hardware", e))?,
        None => v
            .try_into()
            .map_err(|e: toml::de::Error| field("hardware", e.message()))?,
    };
    hw.validate().map_err(|e| field("hardware", e))?;
    Ok(hw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config() {
        let c = RunConfig::parse("model = \"qwen3-235b-like\"\n[workload]\nbatch = 1\nseq_len = 64\n").unwrap();
        assert_eq!(c.strategy, StrategyKind::HpRo);
        assert_eq!(c.hardware.name, "pnm-16");
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn bad_strategy_names_the_field() {
        let e = RunConfig::parse("model = \"qwen3-235b-like\"\nstrategy = \"tp8\"\n").unwrap_err();
        assert!(e.to_string().contains("strategy"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("model = \"qwen3-235b-like\"\ncolour = 1\n").is_err());
        let inline = "[model]\nname = \"m\"\nd_model = 64\nq_heads = 8\nkv_heads = 4\nhead_dim = 8\ngroup_size = 2\nlayers = 1\nattn_kind = \"gqa\"\nextra = 1\n";
        let e = RunConfig::parse(inline).unwrap_err();
        assert!(e.to_string().contains("model"), "{e}");
    }

    #[test]
    fn inline_model_and_preset_table() {
        let inline = "[model]\nname = \"m\"\nd_model = 64\nq_heads = 8\nkv_heads = 4\nhead_dim = 8\ngroup_size = 2\nlayers = 1\nattn_kind = \"gqa\"\n[hardware]\npreset = \"h100\"\n";
        let c = RunConfig::parse(inline).unwrap();
        assert_eq!(c.model.kv_heads, 4);
        assert_eq!(c.hardware.name, "h100");
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::parse("model = \"qwen3-235b-like\"\nseed = 1\n").unwrap();
        let b = RunConfig::parse("model = \"qwen3-235b-like\"\nseed = 2\n").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(
            a.hash(),
            RunConfig::parse("seed = 1\nmodel = \"qwen3-235b-like\"\n")
                .unwrap()
                .hash()
        );
    }
}
