//! Analytical roofline iteration-latency estimator.
//!
//! The per-operator FLOP/byte table implemented here is normative and is
//! reproduced in `COSTMODEL.md` at the repository root. Each operator costs
//! `max(flops / effective_flops, bytes / effective_bandwidth)`; per-layer
//! operators are multiplied by the layer count and the operator times are
//! summed in list order.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelSpec, OperatorKind};
use crate::time::SimDuration;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("batch plan is empty")]
    EmptyPlan,
    #[error("request {0} appears more than once in the batch plan")]
    DuplicateRequest(u64),
    #[error("prefill entry for request {0} has zero tokens")]
    ZeroPrefill(u64),
    #[error("decode entry for request {0} has zero context")]
    ZeroContext(u64),
    #[error("unknown builtin hardware `{0}` (known: a100, v100, gddr6-aim, a100-quarter-flops)")]
    UnknownHardware(String),
    #[error("hardware field `{0}` must be positive")]
    NonPositive(&'static str),
    #[error("hardware efficiency `{0}` must lie in (0, 1]")]
    Efficiency(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareSpec {
    pub name: String,
    /// FLOP/s at the model's dtype.
    pub peak_flops: f64,
    /// Bytes/s.
    pub mem_bandwidth: f64,
    /// Bytes.
    pub mem_capacity: u64,
    #[serde(default = "default_eff_flops")]
    pub efficiency_flops: f64,
    #[serde(default = "default_eff_bw")]
    pub efficiency_bw: f64,
}

/// Uncalibrated derating defaults.
pub const DEFAULT_EFFICIENCY_FLOPS: f64 = 0.6;
pub const DEFAULT_EFFICIENCY_BW: f64 = 0.8;

fn default_eff_flops() -> f64 {
    DEFAULT_EFFICIENCY_FLOPS
}

fn default_eff_bw() -> f64 {
    DEFAULT_EFFICIENCY_BW
}

impl HardwareSpec {
    pub fn builtin(name: &str) -> Result<Self, CostError> {
        let (peak_flops, mem_bandwidth, mem_capacity) = match name {
            // NVIDIA A100 SXM4 80GB datasheet: 312 TFLOPS dense FP16 tensor,
            // 2,039 GB/s HBM2e.
            "a100" => (312e12, 2.039e12, 80_000_000_000),
            // NVIDIA V100 SXM2 32GB datasheet: 125 TFLOPS FP16 tensor,
            // 900 GB/s HBM2.
            "v100" => (125e12, 900e9, 32_000_000_000),
            // SK hynix GDDR6-AiM (ISSCC 2022): 1 TFLOPS and 512 GB/s of
            // in-bank bandwidth per 1 GB device; modeled as a 32-device card.
            "gddr6-aim" => (32e12, 16.384e12, 32_000_000_000),
            "a100-quarter-flops" => (312e12 / 4.0, 2.039e12, 80_000_000_000),
            other => return Err(CostError::UnknownHardware(other.into())),
        };
        Ok(Self {
            name: name.into(),
            peak_flops,
            mem_bandwidth,
            mem_capacity,
            efficiency_flops: DEFAULT_EFFICIENCY_FLOPS,
            efficiency_bw: DEFAULT_EFFICIENCY_BW,
        })
    }

    pub fn validate(&self) -> Result<(), CostError> {
        if !(self.peak_flops > 0.0) {
            return Err(CostError::NonPositive("peak_flops"));
        }
        if !(self.mem_bandwidth > 0.0) {
            return Err(CostError::NonPositive("mem_bandwidth"));
        }
        if self.mem_capacity == 0 {
            return Err(CostError::NonPositive("mem_capacity"));
        }
        if !(self.efficiency_flops > 0.0 && self.efficiency_flops <= 1.0) {
            return Err(CostError::Efficiency("efficiency_flops"));
        }
        if !(self.efficiency_bw > 0.0 && self.efficiency_bw <= 1.0) {
            return Err(CostError::Efficiency("efficiency_bw"));
        }
        Ok(())
    }

    pub fn effective_flops(&self) -> f64 {
        self.peak_flops * self.efficiency_flops
    }

    pub fn effective_bandwidth(&self) -> f64 {
        self.mem_bandwidth * self.efficiency_bw
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefillEntry {
    pub request: u64,
    /// New prompt tokens processed this iteration.
    pub tokens: u32,
    /// Tokens already in the KV cache before this chunk (cache hits,
    /// earlier chunks).
    pub context_before: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeEntry {
    pub request: u64,
    /// Tokens attended to, including the one being processed.
    pub context_len: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchPlan {
    pub prefill: Vec<PrefillEntry>,
    pub decode: Vec<DecodeEntry>,
}

impl BatchPlan {
    pub fn is_empty(&self) -> bool {
        self.prefill.is_empty() && self.decode.is_empty()
    }

    pub fn len(&self) -> usize {
        self.prefill.len() + self.decode.len()
    }

    pub fn prefill_tokens(&self) -> u64 {
        self.prefill.iter().map(|p| p.tokens as u64).sum()
    }

    pub fn validate(&self) -> Result<(), CostError> {
        if self.is_empty() {
            return Err(CostError::EmptyPlan);
        }
        let mut seen = HashSet::with_capacity(self.len());
        for p in &self.prefill {
            if p.tokens == 0 {
                return Err(CostError::ZeroPrefill(p.request));
            }
            if !seen.insert(p.request) {
                return Err(CostError::DuplicateRequest(p.request));
            }
        }
        for d in &self.decode {
            if d.context_len == 0 {
                return Err(CostError::ZeroContext(d.request));
            }
            if !seen.insert(d.request) {
                return Err(CostError::DuplicateRequest(d.request));
            }
        }
        Ok(())
    }
}

/// Aggregate batch quantities the operator table is written in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BatchShape {
    /// New tokens: sum of prefill chunk sizes plus one per decode entry.
    tokens: u128,
    decodes: u128,
    /// Query/key pairs scored by attention.
    attn_pairs: u128,
    /// KV-cache tokens read by attention.
    kv_read_tokens: u128,
}

impl BatchShape {
    fn of(plan: &BatchPlan) -> Self {
        let mut s = BatchShape {
            tokens: 0,
            decodes: plan.decode.len() as u128,
            attn_pairs: 0,
            kv_read_tokens: 0,
        };
        for p in &plan.prefill {
            let n = p.tokens as u128;
            let before = p.context_before as u128;
            s.tokens += n;
            s.attn_pairs += n * before + n * (n + 1) / 2;
            s.kv_read_tokens += before + n;
        }
        for d in &plan.decode {
            s.tokens += 1;
            s.attn_pairs += d.context_len as u128;
            s.kv_read_tokens += d.context_len as u128;
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OperatorCost {
    pub flops: u128,
    pub bytes: u128,
}

/// Per-operator FLOPs and bytes for one layer (or one pass, for
/// non-per-layer operators), in the model's operator order.
pub fn operator_costs(plan: &BatchPlan, m: &ModelSpec) -> Vec<OperatorCost> {
    let s = BatchShape::of(plan);
    let h = m.hidden_dim as u128;
    let kv = m.kv_dim() as u128;
    let f = m.ffn_dim as u128;
    let v = m.vocab_size as u128;
    let b = m.dtype_bytes as u128;
    let t = s.tokens;
    let mlp_mats: u128 = if m.gated_mlp { 2 } else { 1 };

    m.operators
        .iter()
        .map(|op| match &op.kind {
            OperatorKind::QkvProj => OperatorCost {
                flops: 2 * t * h * (h + 2 * kv),
                bytes: b * (h * (h + 2 * kv) + 2 * t * h),
            },
            OperatorKind::AttnScore => OperatorCost {
                flops: 4 * h * s.attn_pairs,
                bytes: b * (2 * kv * s.kv_read_tokens + 2 * kv * t + 2 * t * h),
            },
            OperatorKind::AttnOutProj => OperatorCost {
                flops: 2 * t * h * h,
                bytes: b * (h * h + 2 * t * h),
            },
            OperatorKind::MlpUp => OperatorCost {
                flops: 2 * t * h * f * mlp_mats,
                bytes: b * (mlp_mats * h * f + t * h + mlp_mats * t * f),
            },
            OperatorKind::MlpDown => OperatorCost {
                flops: 2 * t * f * h,
                bytes: b * (f * h + t * f + t * h),
            },
            OperatorKind::LmHead if s.decodes == 0 => OperatorCost::default(),
            OperatorKind::LmHead => OperatorCost {
                flops: 2 * s.decodes * h * v,
                bytes: b * (h * v + s.decodes * h + s.decodes * v),
            },
            OperatorKind::Custom {
                flops_per_token,
                weight_bytes,
                act_bytes_per_token,
                ..
            } => OperatorCost {
                flops: *flops_per_token as u128 * t,
                bytes: *weight_bytes as u128 + *act_bytes_per_token as u128 * t,
            },
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorTime {
    /// Seconds, already multiplied by the layer count where applicable.
    pub compute: f64,
    pub memory: f64,
}

impl OperatorTime {
    pub fn time(&self) -> f64 {
        self.compute.max(self.memory)
    }
}

pub fn operator_times(plan: &BatchPlan, m: &ModelSpec, hw: &HardwareSpec) -> Vec<OperatorTime> {
    let flops_rate = hw.effective_flops();
    let byte_rate = hw.effective_bandwidth();
    let layers = m.num_layers as f64;
    operator_costs(plan, m)
        .into_iter()
        .zip(&m.operators)
        .map(|(c, op)| {
            let scale = if op.per_layer { layers } else { 1.0 };
            OperatorTime {
                compute: c.flops as f64 / flops_rate * scale,
                memory: c.bytes as f64 / byte_rate * scale,
            }
        })
        .collect()
}

/// Pluggable iteration-latency estimator.
pub trait CostModel: Send + Sync {
    fn iteration_time(&self, plan: &BatchPlan, m: &ModelSpec, hw: &HardwareSpec) -> SimDuration;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Roofline {
    /// Fixed framework/launch overhead added to every iteration.
    pub overhead: SimDuration,
}

pub const DEFAULT_ITERATION_OVERHEAD: SimDuration = SimDuration::from_micros(200);

impl Default for Roofline {
    fn default() -> Self {
        Self {
            overhead: DEFAULT_ITERATION_OVERHEAD,
        }
    }
}

impl Roofline {
    pub fn without_overhead() -> Self {
        Self {
            overhead: SimDuration::ZERO,
        }
    }

    /// Roofline seconds before quantization.
    pub fn raw_seconds(plan: &BatchPlan, m: &ModelSpec, hw: &HardwareSpec) -> f64 {
        operator_times(plan, m, hw)
            .iter()
            .fold(0.0, |acc, t| acc + t.time())
    }
}

impl CostModel for Roofline {
    fn iteration_time(&self, plan: &BatchPlan, m: &ModelSpec, hw: &HardwareSpec) -> SimDuration {
        debug_assert!(!plan.is_empty(), "iteration_time on empty plan");
        let t = SimDuration::from_secs_f64(Self::raw_seconds(plan, m, hw)) + self.overhead;
        t.max(SimDuration::from_nanos(1))
    }
}

/// Checked entry point: validates the plan first.
pub fn iteration_time(
    model: &dyn CostModel,
    plan: &BatchPlan,
    m: &ModelSpec,
    hw: &HardwareSpec,
) -> Result<SimDuration, CostError> {
    plan.validate()?;
    Ok(model.iteration_time(plan, m, hw))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    ComputeBound,
    MemoryBound,
    Mixed,
}

/// Share of iteration time that must sit in compute-dominated operators for
/// a plan to count as compute-bound; `1 - this` bounds memory-bound plans.
pub const PHASE_THRESHOLD: f64 = 2.0 / 3.0;

pub fn phase_classification(
    plan: &BatchPlan,
    m: &ModelSpec,
    hw: &HardwareSpec,
) -> Result<Phase, CostError> {
    plan.validate()?;
    let times = operator_times(plan, m, hw);
    let total: f64 = times.iter().map(OperatorTime::time).sum();
    let compute: f64 = times
        .iter()
        .filter(|t| t.compute >= t.memory)
        .map(OperatorTime::time)
        .sum();
    let share = if total > 0.0 { compute / total } else { 0.0 };
    Ok(if share >= PHASE_THRESHOLD {
        Phase::ComputeBound
    } else if share <= 1.0 - PHASE_THRESHOLD {
        Phase::MemoryBound
    } else {
        Phase::Mixed
    })
}
