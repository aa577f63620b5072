//! Brute-force evaluation of the operator table, token by token.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use servesim_core::costmodel::{DecodeEntry, PrefillEntry, DEFAULT_ITERATION_OVERHEAD};
use servesim_core::model::OperatorKind;
use servesim_core::{BatchPlan, HardwareSpec, ModelSpec};

/// Per-token walk: every new token pays the weight-independent terms once;
/// attention visits each (query, key) pair explicitly.
pub fn brute_force(plan: &BatchPlan, m: &ModelSpec) -> Vec<(u128, u128)> {
    let h = m.hidden_dim as u128;
    let kv = (m.num_kv_heads * m.head_dim) as u128;
    let f = m.ffn_dim as u128;
    let v = m.vocab_size as u128;
    let b = m.dtype_bytes as u128;

    // (context length seen by each new token, kv tokens read by the request)
    let mut queries: Vec<u128> = Vec::new();
    let mut kv_reads: u128 = 0;
    let mut decodes: u128 = 0;
    for p in &plan.prefill {
        for i in 0..p.tokens {
            queries.push(p.context_before as u128 + i as u128 + 1);
        }
        kv_reads += (p.context_before + p.tokens) as u128;
    }
    for d in &plan.decode {
        queries.push(d.context_len as u128);
        kv_reads += d.context_len as u128;
        decodes += 1;
    }

    let mut out = Vec::new();
    for op in &m.operators {
        let (mut fl, mut by) = (0u128, 0u128);
        match &op.kind {
            OperatorKind::QkvProj => {
                let (wq, wk, wv) = (h * h, h * kv, h * kv);
                by += b * (wq + wk + wv);
                for _ in &queries {
                    fl += 2 * (wq + wk + wv);
                    by += b * (h + h);
                }
            }
            OperatorKind::AttnScore => {
                for &ctx in &queries {
                    for _key in 0..ctx {
                        // score and weighted sum, each a dot product over h
                        fl += 2 * h + 2 * h;
                    }
                    // new K/V written, Q read and output written
                    by += b * (kv + kv) + b * (h + h);
                }
                by += b * 2 * kv * kv_reads;
            }
            OperatorKind::AttnOutProj => {
                by += b * h * h;
                for _ in &queries {
                    fl += 2 * h * h;
                    by += b * 2 * h;
                }
            }
            OperatorKind::MlpUp => {
                let mats = if m.gated_mlp { 2 } else { 1 };
                by += b * mats * h * f;
                for _ in &queries {
                    fl += mats * 2 * h * f;
                    by += b * (h + mats * f);
                }
            }
            OperatorKind::MlpDown => {
                by += b * f * h;
                for _ in &queries {
                    fl += 2 * f * h;
                    by += b * (f + h);
                }
            }
            OperatorKind::LmHead => {
                if decodes > 0 {
                    by += b * h * v;
                    for _ in 0..decodes {
                        fl += 2 * h * v;
                        by += b * (h + v);
                    }
                }
            }
            OperatorKind::Custom {
                flops_per_token,
                weight_bytes,
                act_bytes_per_token,
                ..
            } => {
                by += *weight_bytes as u128;
                for _ in &queries {
                    fl += *flops_per_token as u128;
                    by += *act_bytes_per_token as u128;
                }
            }
        }
        out.push((fl, by));
    }
    out
}

pub fn oracle_ns(plan: &BatchPlan, m: &ModelSpec, hw: &HardwareSpec) -> u64 {
    let fr = hw.peak_flops * hw.efficiency_flops;
    let br = hw.mem_bandwidth * hw.efficiency_bw;
    let mut secs = 0.0f64;
    for ((fl, by), op) in brute_force(plan, m).into_iter().zip(&m.operators) {
        let layers = if op.per_layer {
            m.num_layers as f64
        } else {
            1.0
        };
        let c = fl as f64 / fr * layers;
        let mm = by as f64 / br * layers;
        secs += if c > mm { c } else { mm };
    }
    let ns = if secs > 0.0 {
        (secs * 1e9 + 0.5).floor() as u64
    } else {
        0
    };
    (ns + DEFAULT_ITERATION_OVERHEAD.as_nanos()).max(1)
}

pub fn random_plan(rng: &mut ChaCha8Rng) -> BatchPlan {
    let mut plan = BatchPlan::default();
    let mut id = 0;
    for _ in 0..rng.random_range(0..4) {
        plan.prefill.push(PrefillEntry {
            request: id,
            tokens: rng.random_range(1..=96),
            context_before: if rng.random_bool(0.5) {
                0
            } else {
                rng.random_range(0..128)
            },
        });
        id += 1;
    }
    for _ in 0..rng.random_range(0..6) {
        plan.decode.push(DecodeEntry {
            request: id,
            context_len: rng.random_range(1..=256),
        });
        id += 1;
    }
    if plan.is_empty() {
        plan.decode.push(DecodeEntry {
            request: id,
            context_len: rng.random_range(1..=64),
        });
    }
    plan
}

pub fn small_model(rng: &mut ChaCha8Rng) -> ModelSpec {
    let mut m = ModelSpec::builtin(if rng.random_bool(0.5) {
        "llama2-7b"
    } else {
        "opt-13b"
    })
    .unwrap();
    if rng.random_bool(0.3) {
        // grouped-query attention variant
        m.num_kv_heads = m.num_heads / 4;
    }
    if rng.random_bool(0.2) {
        m.operators.push(servesim_core::model::OperatorSpec::layer(
            OperatorKind::Custom {
                name: "norm".into(),
                flops_per_token: rng.random_range(1..10_000),
                weight_bytes: rng.random_range(0..100_000),
                act_bytes_per_token: rng.random_range(0..20_000),
            },
        ));
    }
    m
}

pub const HARDWARE: [&str; 4] = ["a100", "v100", "gddr6-aim", "a100-quarter-flops"];
