//! Attention model descriptions and the GEMM shapes of one decode step.
//!
//! Byte accounting streams every operand once and includes the output
//! write-back; nothing is assumed to be cached between kernels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Gqa,
    /// Latent attention, described as a GQA-shaped workload with one
    /// latent KV head shared by every query head.
    Mla,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub d_model: usize,
    pub q_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub group_size: usize,
    pub layers: usize,
    pub attn_kind: AttentionKind,
    #[serde(default = "default_bytes_per_elem")]
    pub bytes_per_elem: f64,
}

fn default_bytes_per_elem() -> f64 {
    1.0
}

const ALLOWED_ELEM_BYTES: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

/// Built-in presets. Shapes follow the public model cards of the models they
/// are named after; only the attention block is described.
pub const PRESETS: [&str; 4] = [
    "qwen3-235b-like",
    "llama4-maverick-like",
    "deepseek-v3-mla-like",
    "desk-gqa",
];

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let model = match name {
            "desk-gqa" => ModelConfig::desk_gqa(),
            // Qwen3-235B-A22B: hidden 4096, 64 query heads, 4 KV heads,
            // head dim 128, 94 layers.
            "qwen3-235b-like" => ModelConfig {
                name: name.into(),
                d_model: 4096,
                q_heads: 64,
                kv_heads: 4,
                head_dim: 128,
                group_size: 16,
                layers: 94,
                attn_kind: AttentionKind::Gqa,
                bytes_per_elem: 1.0,
            },
            // Llama-4-Maverick: hidden 5120, 40 query heads, 8 KV heads,
            // head dim 128, 48 layers.
            "llama4-maverick-like" => ModelConfig {
                name: name.into(),
                d_model: 5120,
                q_heads: 40,
                kv_heads: 8,
                head_dim: 128,
                group_size: 5,
                layers: 48,
                attn_kind: AttentionKind::Gqa,
                bytes_per_elem: 1.0,
            },
            // DeepSeek-V3: hidden 7168, 128 query heads sharing one latent
            // KV head, 61 layers. The latent cache is held in BF16 and the
            // 192-wide head matches the q/k head dim (128 nope + 64 rope).
            // With G=128 the core-attention intensity is 8x that of a G=16
            // GQA model at the same element width.
            "deepseek-v3-mla-like" => ModelConfig {
                name: name.into(),
                d_model: 7168,
                q_heads: 128,
                kv_heads: 1,
                head_dim: 192,
                group_size: 128,
                layers: 61,
                attn_kind: AttentionKind::Mla,
                bytes_per_elem: 2.0,
            },
            other => return Err(Error::UnknownPreset(other.to_string())),
        };
        Ok(model)
    }

    /// Small GQA model used by the numerical flow checks: 4 KV heads,
    /// G = 16, head dim 32.
    pub fn desk_gqa() -> Self {
        ModelConfig {
            name: "desk-gqa".into(),
            d_model: 64,
            q_heads: 64,
            kv_heads: 4,
            head_dim: 32,
            group_size: 16,
            layers: 1,
            attn_kind: AttentionKind::Gqa,
            bytes_per_elem: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| {
            Err(Error::InvalidModel {
                model: self.name.clone(),
                reason,
            })
        };
        for (field, v) in [
            ("d_model", self.d_model),
            ("q_heads", self.q_heads),
            ("kv_heads", self.kv_heads),
            ("head_dim", self.head_dim),
            ("group_size", self.group_size),
            ("layers", self.layers),
        ] {
            if v == 0 {
                return bad(format!("{field} must be positive"));
            }
        }
        if self.q_heads != self.kv_heads * self.group_size {
            return bad(format!(
                "q_heads ({}) != kv_heads ({}) x group_size ({})",
                self.q_heads, self.kv_heads, self.group_size
            ));
        }
        if !ALLOWED_ELEM_BYTES.contains(&self.bytes_per_elem) {
            return bad(format!(
                "bytes_per_elem {} not in {{0.5, 1, 2, 4}}",
                self.bytes_per_elem
            ));
        }
        if self.attn_kind == AttentionKind::Mla && self.kv_heads != 1 {
            return bad(format!(
                "MLA uses a single latent KV head but kv_heads = {}",
                self.kv_heads
            ));
        }
        Ok(())
    }

    /// Width of the fused QKV projection output.
    pub fn qkv_width(&self) -> usize {
        (self.q_heads + 2 * self.kv_heads) * self.head_dim
    }

    /// Width of the concatenated attention output (input of the O projection).
    pub fn attn_width(&self) -> usize {
        self.q_heads * self.head_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadPoint {
    pub batch: usize,
    pub seq_len: usize,
}

impl WorkloadPoint {
    pub fn new(batch: usize, seq_len: usize) -> Self {
        WorkloadPoint { batch, seq_len }
    }

    /// `seq_len = 0` is accepted as the degenerate empty-cache point.
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::InvalidWorkload("batch must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ProjQkv,
    ScoreQk,
    WeightedAv,
    ProjO,
}

/// `C[m x n] = A[m x k] * B[k x n]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GemmShape {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub bytes_per_elem: f64,
    pub stage: Stage,
}

impl GemmShape {
    pub fn new(m: usize, k: usize, n: usize, bytes_per_elem: f64, stage: Stage) -> Self {
        GemmShape {
            m,
            k,
            n,
            bytes_per_elem,
            stage,
        }
    }

    pub fn flops(&self) -> f64 {
        2.0 * self.m as f64 * self.k as f64 * self.n as f64
    }

    pub fn a_bytes(&self) -> f64 {
        (self.m * self.k) as f64 * self.bytes_per_elem
    }

    pub fn b_bytes(&self) -> f64 {
        (self.k * self.n) as f64 * self.bytes_per_elem
    }

    pub fn c_bytes(&self) -> f64 {
        (self.m * self.n) as f64 * self.bytes_per_elem
    }

    pub fn bytes(&self) -> f64 {
        self.a_bytes() + self.b_bytes() + self.c_bytes()
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0 || self.k == 0 || self.n == 0
    }
}

/// GEMMs of one decode step of one layer, unsharded.
///
/// Attention is per request and per KV head: each request attends only to
/// its own cache, so a batch of `B` yields `B x kv_heads` score GEMMs of
/// `G x d_h x S` and as many `G x S x d_h` value GEMMs.
pub fn derive_stage_gemms(model: &ModelConfig, point: &WorkloadPoint) -> Result<Vec<GemmShape>> {
    model.validate()?;
    point.validate()?;
    let bpe = model.bytes_per_elem;
    let b = point.batch;
    let s = point.seq_len;
    let g = model.group_size;
    let dh = model.head_dim;

    let mut out = vec![GemmShape::new(b, model.d_model, model.qkv_width(), bpe, Stage::ProjQkv)];
    if s > 0 {
        for _request in 0..b {
            for _head in 0..model.kv_heads {
                out.push(GemmShape::new(g, dh, s, bpe, Stage::ScoreQk));
                out.push(GemmShape::new(g, s, dh, bpe, Stage::WeightedAv));
            }
        }
    }
    out.push(GemmShape::new(b, model.attn_width(), model.d_model, bpe, Stage::ProjO));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KvCacheBytes {
    pub per_layer: f64,
    pub total: f64,
}

/// `2 * H_KV * S * d_h` elements per layer and request.
pub fn kv_cache_bytes(model: &ModelConfig, point: &WorkloadPoint) -> KvCacheBytes {
    let per_layer = 2.0
        * model.kv_heads as f64
        * point.seq_len as f64
        * model.head_dim as f64
        * model.bytes_per_elem
        * point.batch as f64;
    KvCacheBytes {
        per_layer,
        total: per_layer * model.layers as f64,
    }
}

pub fn arithmetic_intensity(gemm: &GemmShape) -> f64 {
    gemm.flops() / gemm.bytes()
}

/// Core-attention FLOPs per KV-cache byte in the long-sequence limit:
/// `4 G d_h` FLOPs per key against `2 d_h` cached elements.
pub fn core_attention_intensity(model: &ModelConfig) -> f64 {
    2.0 * model.group_size as f64 / model.bytes_per_elem
}

pub fn ridge_point(peak_flops: f64, mem_bw: f64) -> f64 {
    peak_flops / mem_bw
}

pub fn roofline_time(gemm: &GemmShape, peak_flops: f64, mem_bw: f64) -> f64 {
    roofline(gemm.flops(), gemm.bytes(), peak_flops, mem_bw)
}

pub fn roofline(flops: f64, bytes: f64, peak_flops: f64, mem_bw: f64) -> f64 {
    (flops / peak_flops).max(bytes / mem_bw)
}
