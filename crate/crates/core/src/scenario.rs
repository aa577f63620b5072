//! Preset studies. Each returns a ready-to-run config or sweep.

use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{
    CacheSection, CostSection, MemorySection, ModelSection, OutputSection, RunConfig,
    SchedulerSection, WorkerSection,
};
use crate::metrics::SloSpec;
use crate::sched::{BatchLimit, WorkerRole};
use crate::sweep::{Axis, SweepSpec};
use crate::workload::{LengthDist, RoundsDist, WorkloadSpec};

#[derive(Debug, Error, PartialEq)]
#[error("unknown scenario `{0}` (known: {known})", known = SCENARIOS.join(", "))]
pub struct UnknownScenario(pub String);

#[derive(Debug, Clone)]
pub enum Preset {
    Run(RunConfig),
    Sweep(SweepSpec),
}

impl Preset {
    /// The single config, or the sweep's base.
    pub fn base(&self) -> &RunConfig {
        match self {
            Preset::Run(c) => c,
            Preset::Sweep(s) => &s.base,
        }
    }

    pub fn base_mut(&mut self) -> &mut RunConfig {
        match self {
            Preset::Run(c) => c,
            Preset::Sweep(s) => &mut s.base,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: &'static str,
    pub description: &'static str,
    pub preset: Preset,
}

pub const SCENARIOS: [&str; 8] = [
    "static-vs-continuous",
    "mem-ratio",
    "pd-ratio",
    "pd-hardware",
    "pd-footprint",
    "mem-cache",
    "hw-sweep",
    "continuous-50k",
];

pub fn scenario(name: &str) -> Result<Scenario, UnknownScenario> {
    let (description, preset) = match name {
        "static-vs-continuous" => (
            "Static vs continuous batching over a QPS grid",
            static_vs_continuous(),
        ),
        "mem-ratio" => (
            "Admission utilization cap under memory pressure",
            mem_ratio(),
        ),
        "pd-ratio" => (
            "Prefill/decode device split on an 8-device node",
            pd_ratio(),
        ),
        "pd-hardware" => ("Decode-device hardware variants", pd_hardware()),
        "pd-footprint" => (
            "Per-role KV memory footprint over time",
            Preset::Run(pd_footprint()),
        ),
        "mem-cache" => (
            "Multi-round conversations with a host KV cache",
            mem_cache(),
        ),
        "hw-sweep" => ("Prefill-device FLOPS, bandwidth and capacity", hw_sweep()),
        "continuous-50k" => (
            "50,000 requests under continuous batching",
            Preset::Run(continuous_50k()),
        ),
        other => return Err(UnknownScenario(other.into())),
    };
    let name = SCENARIOS.iter().find(|&&n| n == name).expect("listed");
    Ok(Scenario {
        name,
        description,
        preset,
    })
}

fn config(workers: Vec<WorkerSection>, workload: WorkloadSpec) -> RunConfig {
    RunConfig {
        seed: 1,
        horizon_s: None,
        model: ModelSection::builtin("llama2-7b"),
        workers,
        links: Vec::new(),
        workload,
        scheduler: SchedulerSection::default(),
        memory: MemorySection::default(),
        cost: CostSection::default(),
        slo: SloSpec::default(),
        output: OutputSection::default(),
    }
}

fn unified(hw: &str, count: usize) -> WorkerSection {
    WorkerSection::new(hw, WorkerRole::Unified, count)
}

fn disaggregated(mut c: RunConfig, prefill: usize, decode: usize) -> RunConfig {
    c.workers = vec![
        WorkerSection::new("a100", WorkerRole::Prefill, prefill),
        WorkerSection::new("a100", WorkerRole::Decode, decode),
    ];
    c.scheduler.local_policy = "disaggregated".into();
    c
}

fn values<T: Into<Value> + Copy>(xs: &[T]) -> Vec<Value> {
    xs.iter().map(|&x| x.into()).collect()
}

/// Grid: policy x QPS at a fixed batch cap.
pub fn static_vs_continuous() -> Preset {
    let mut c = config(
        vec![unified("a100", 1)],
        WorkloadSpec::synthetic(
            1.0,
            2000,
            LengthDist::Uniform([16, 512]),
            LengthDist::Uniform([16, 512]),
        ),
    );
    c.scheduler.max_batch_size = BatchLimit::Max(32);
    Preset::Sweep(SweepSpec {
        base: c,
        axes: vec![
            Axis::single("scheduler.local_policy", values(&["static", "continuous"])),
            Axis::single("workload.qps", values(&[1.0, 2.0, 4.0, 6.0])),
        ],
    })
}

/// A memory-starved single device where admission at full utilization
/// leads to frequent swaps.
pub fn mem_ratio() -> Preset {
    let mut w = unified("a100", 1);
    w.capacity_scale = 0.25;
    let mut c = config(
        vec![w],
        WorkloadSpec::synthetic(
            2.0,
            1500,
            LengthDist::Uniform([64, 512]),
            LengthDist::Uniform([256, 1024]),
        ),
    );
    c.memory.max_mem_ratio = 1.0;
    Preset::Sweep(SweepSpec {
        base: c,
        axes: vec![Axis::single(
            "memory.max_mem_ratio",
            values(&[0.5, 0.6, 0.7, 0.8, 0.9, 1.0]),
        )],
    })
}

fn pd_workload(n: u64, qps: f64) -> WorkloadSpec {
    WorkloadSpec::synthetic(
        qps,
        n,
        LengthDist::Uniform([128, 1024]),
        LengthDist::Uniform([16, 256]),
    )
}

/// Every P/D split of eight A100s, for two models and three loads.
pub fn pd_ratio() -> Preset {
    let c = disaggregated(config(vec![], pd_workload(2000, 8.0)), 1, 7);
    let splits: Vec<Value> = (1..8).map(|p| json!([p, 8 - p])).collect();
    Preset::Sweep(SweepSpec {
        base: c,
        axes: vec![
            Axis::single("model.builtin", values(&["llama2-7b", "opt-13b"])),
            Axis::zipped(&["workers[0].count", "workers[1].count"], splits),
            Axis::single("workload.qps", values(&[8.0, 16.0, 32.0])),
        ],
    })
}

/// One A100 prefill device with decode devices of each builtin type.
pub fn pd_hardware() -> Preset {
    let c = disaggregated(config(vec![], pd_workload(2000, 4.0)), 1, 2);
    Preset::Sweep(SweepSpec {
        base: c,
        axes: vec![Axis::single(
            "workers[1].hardware",
            values(&["a100", "v100", "gddr6-aim", "a100-quarter-flops"]),
        )],
    })
}

/// Fixed 128-token prompts and 1024-token outputs; observe over [5, 65] s.
pub fn pd_footprint() -> RunConfig {
    disaggregated(
        config(
            vec![],
            WorkloadSpec::synthetic(6.0, 10_000, LengthDist::Fixed(128), LengthDist::Fixed(1024)),
        ),
        1,
        3,
    )
}

/// Observation window of the footprint study, seconds.
pub const FOOTPRINT_WINDOW_S: (f64, f64) = (5.0, 65.0);

/// Chat-style conversations; cache on/off x output length x QPS.
pub fn mem_cache() -> Preset {
    let mut c = config(
        vec![unified("a100", 1)],
        WorkloadSpec {
            rounds: RoundsDist::Chat,
            think_time_s: 5.0,
            ..WorkloadSpec::synthetic(
                1.0,
                2000,
                LengthDist::Uniform([128, 768]),
                LengthDist::Fixed(64),
            )
        },
    );
    c.memory.cache = CacheSection::default();
    Preset::Sweep(SweepSpec {
        base: c,
        axes: vec![
            Axis::single(
                "workload.output_len",
                vec![
                    json!({"fixed": 16}),
                    json!({"fixed": 32}),
                    json!({"fixed": 64}),
                ],
            ),
            Axis::single("memory.cache.enabled", values(&[false, true])),
            Axis::single("workload.qps", values(&[1.0, 2.0, 3.0, 4.0, 5.0])),
        ],
    })
}

/// Prefill-device variants as (flops, bandwidth, capacity) scales.
pub const HW_VARIANTS: [[f64; 3]; 11] = [
    [1.0, 1.0, 1.0],
    [1.0, 1.0, 0.25],
    [1.0, 1.0, 0.5],
    [1.0, 1.0, 2.0],
    [1.0, 1.0, 4.0],
    [1.0, 0.125, 1.0],
    [1.0, 0.25, 1.0],
    [1.0, 0.5, 1.0],
    [1.0, 2.0, 1.0],
    [1.0, 4.0, 1.0],
    [0.5, 1.0, 1.0],
];

/// Prefill-heavy P/D workload swept over prefill hardware and QPS.
pub fn hw_sweep() -> Preset {
    let c = disaggregated(
        config(
            vec![],
            WorkloadSpec::synthetic(
                4.0,
                1000,
                LengthDist::Uniform([1536, 2560]),
                LengthDist::Uniform([16, 64]),
            ),
        ),
        1,
        2,
    );
    let variants: Vec<Value> = HW_VARIANTS.iter().map(|v| json!(v)).collect();
    Preset::Sweep(SweepSpec {
        base: c,
        axes: vec![
            Axis::zipped(
                &[
                    "workers[0].flops_scale",
                    "workers[0].bandwidth_scale",
                    "workers[0].capacity_scale",
                ],
                variants,
            ),
            Axis::single("workload.qps", values(&[2.0, 4.0, 6.0, 8.0, 10.0])),
        ],
    })
}

pub fn continuous_50k() -> RunConfig {
    config(
        vec![unified("a100", 1)],
        WorkloadSpec::synthetic(
            6.0,
            50_000,
            LengthDist::Uniform([16, 512]),
            LengthDist::Uniform([16, 256]),
        ),
    )
}
