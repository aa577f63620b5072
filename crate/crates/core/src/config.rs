//! Run configuration: TOML schema, cross-validation and assembly into a
//! simulation. See CONFIG.md for the field reference.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::comm::{Endpoint, Link, LinkMode};
use crate::costmodel::{HardwareSpec, Roofline};
use crate::memory::DEFAULT_FETCH_PER_BLOCK;
use crate::metrics::{analyze, export, Analysis, SloSpec};
use crate::model::{standard_operators, Breakpoint, ModelSpec, OperatorSpec};
use crate::sched::{BatchLimit, Limits, PolicyRegistry, WorkerRole};
use crate::sim::{CacheSetup, RunReport, SimError, SimSetup, Simulation, WorkerSetup};
use crate::time::{SimDuration, SimTime};
use crate::workload::{generate, RequestSpec, Source, WorkloadSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{path}: {msg}")]
    Invalid { path: String, msg: String },
    /// An override path that does not name a config field.
    #[error("{path}: {msg}")]
    Path { path: String, msg: String },
}

fn bad_path(path: &str, msg: impl std::fmt::Display) -> ConfigError {
    ConfigError::Path {
        path: path.into(),
        msg: msg.to_string(),
    }
}

fn invalid(path: impl Into<String>, msg: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid {
        path: path.into(),
        msg: msg.to_string(),
    }
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

fn one() -> f64 {
    1.0
}

fn is_one(v: &f64) -> bool {
    *v == 1.0
}

/// A builtin model name plus optional field overrides, or a full spec.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_layers: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_heads: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_kv_heads: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn_dim: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dtype_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gated_mlp: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tied_embeddings: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operators: Option<Vec<OperatorSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakpoints: Option<Vec<Breakpoint>>,
}

impl ModelSection {
    pub fn builtin(name: &str) -> Self {
        Self {
            builtin: Some(name.into()),
            ..Self::default()
        }
    }

    pub fn resolve(&self) -> Result<ModelSpec, ConfigError> {
        let mut m = match &self.builtin {
            Some(b) => ModelSpec::builtin(b).map_err(|e| invalid("model.builtin", e))?,
            None => {
                let need = |v: Option<u64>, f: &str| {
                    v.ok_or_else(|| invalid(format!("model.{f}"), "required without `builtin`"))
                };
                ModelSpec {
                    name: self.name.clone().unwrap_or_else(|| "custom".into()),
                    num_layers: need(self.num_layers, "num_layers")?,
                    hidden_dim: need(self.hidden_dim, "hidden_dim")?,
                    num_heads: need(self.num_heads, "num_heads")?,
                    num_kv_heads: self.num_kv_heads.or(self.num_heads).unwrap_or(0),
                    head_dim: need(self.head_dim, "head_dim")?,
                    ffn_dim: need(self.ffn_dim, "ffn_dim")?,
                    vocab_size: need(self.vocab_size, "vocab_size")?,
                    dtype_bytes: self.dtype_bytes.unwrap_or(2),
                    gated_mlp: self.gated_mlp.unwrap_or(false),
                    tied_embeddings: self.tied_embeddings.unwrap_or(false),
                    operators: standard_operators(),
                    breakpoints: Vec::new(),
                }
            }
        };
        macro_rules! over {
            ($($f:ident),*) => {$(
                if let Some(v) = &self.$f { m.$f = v.clone(); }
            )*};
        }
        over!(
            name,
            num_layers,
            hidden_dim,
            num_heads,
            num_kv_heads,
            head_dim,
            ffn_dim,
            vocab_size,
            dtype_bytes,
            gated_mlp,
            tied_embeddings,
            operators,
            breakpoints
        );
        m.validate().map_err(|e| invalid("model", e))?;
        Ok(m)
    }
}

fn unified() -> WorkerRole {
    WorkerRole::Unified
}

fn one_worker() -> usize {
    1
}

/// A group of identical workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerSection {
    /// Builtin hardware name, or any label when all three of `peak_flops`,
    /// `mem_bandwidth` and `mem_capacity` are given.
    pub hardware: String,
    #[serde(default = "unified")]
    pub role: WorkerRole,
    #[serde(default = "one_worker")]
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peak_flops: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mem_bandwidth: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mem_capacity: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub efficiency_flops: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub efficiency_bw: Option<f64>,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub flops_scale: f64,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub bandwidth_scale: f64,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub capacity_scale: f64,
}

impl WorkerSection {
    pub fn new(hardware: &str, role: WorkerRole, count: usize) -> Self {
        Self {
            hardware: hardware.into(),
            role,
            count,
            peak_flops: None,
            mem_bandwidth: None,
            mem_capacity: None,
            efficiency_flops: None,
            efficiency_bw: None,
            flops_scale: 1.0,
            bandwidth_scale: 1.0,
            capacity_scale: 1.0,
        }
    }

    pub fn resolve(&self, path: &str) -> Result<HardwareSpec, ConfigError> {
        let mut hw = match HardwareSpec::builtin(&self.hardware) {
            Ok(hw) => hw,
            Err(e) => match (self.peak_flops, self.mem_bandwidth, self.mem_capacity) {
                (Some(peak_flops), Some(mem_bandwidth), Some(mem_capacity)) => HardwareSpec {
                    name: self.hardware.clone(),
                    peak_flops,
                    mem_bandwidth,
                    mem_capacity,
                    efficiency_flops: crate::costmodel::DEFAULT_EFFICIENCY_FLOPS,
                    efficiency_bw: crate::costmodel::DEFAULT_EFFICIENCY_BW,
                },
                _ => return Err(invalid(format!("{path}.hardware"), e)),
            },
        };
        if let Some(v) = self.peak_flops {
            hw.peak_flops = v;
        }
        if let Some(v) = self.mem_bandwidth {
            hw.mem_bandwidth = v;
        }
        if let Some(v) = self.mem_capacity {
            hw.mem_capacity = v;
        }
        if let Some(v) = self.efficiency_flops {
            hw.efficiency_flops = v;
        }
        if let Some(v) = self.efficiency_bw {
            hw.efficiency_bw = v;
        }
        for (f, v) in [
            ("flops_scale", self.flops_scale),
            ("bandwidth_scale", self.bandwidth_scale),
            ("capacity_scale", self.capacity_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{path}.{f}"), "must be positive"));
            }
        }
        hw.peak_flops *= self.flops_scale;
        hw.mem_bandwidth *= self.bandwidth_scale;
        hw.mem_capacity = (hw.mem_capacity as f64 * self.capacity_scale).round() as u64;
        hw.validate().map_err(|e| invalid(path, e))?;
        Ok(hw)
    }
}

fn sequential() -> LinkMode {
    LinkMode::Sequential
}

fn is_sequential(m: &LinkMode) -> bool {
    *m == LinkMode::Sequential
}

fn yes() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSection {
    /// `"host"` or `"w<index>"` (worker index after expanding counts).
    pub src: String,
    pub dst: String,
    /// Bytes/s.
    pub bandwidth: f64,
    #[serde(default)]
    pub latency_ns: u64,
    #[serde(default = "sequential", skip_serializing_if = "is_sequential")]
    pub mode: LinkMode,
    /// Also create the reverse direction.
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub duplex: bool,
}

pub fn parse_endpoint(s: &str) -> Option<Endpoint> {
    if s == "host" {
        return Some(Endpoint::Host);
    }
    s.strip_prefix('w')?.parse().ok().map(Endpoint::Device)
}

fn default_global() -> String {
    "least-outstanding".into()
}

fn default_local() -> String {
    "continuous".into()
}

fn inf() -> BatchLimit {
    BatchLimit::Inf
}

fn is_inf(b: &BatchLimit) -> bool {
    *b == BatchLimit::Inf
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSection {
    #[serde(default = "default_global")]
    pub global_policy: String,
    #[serde(default = "default_local")]
    pub local_policy: String,
    #[serde(default = "inf", skip_serializing_if = "is_inf")]
    pub max_batch_size: BatchLimit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefill_chunk: Option<u32>,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        Self {
            global_policy: default_global(),
            local_policy: default_local(),
            max_batch_size: BatchLimit::Inf,
            prefill_chunk: None,
        }
    }
}

fn default_fetch_ns() -> u64 {
    DEFAULT_FETCH_PER_BLOCK.as_nanos()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheSection {
    #[serde(default)]
    pub enabled: bool,
    /// Defaults to four times the summed device KV capacity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity_bytes: Option<u64>,
    #[serde(default = "default_fetch_ns")]
    pub per_block_fetch_ns: u64,
}

impl Default for CacheSection {
    fn default() -> Self {
        Self {
            enabled: false,
            capacity_bytes: None,
            per_block_fetch_ns: default_fetch_ns(),
        }
    }
}

fn default_block_size() -> u64 {
    16
}

fn default_reserve() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemorySection {
    #[serde(default = "default_block_size")]
    pub block_size: u64,
    #[serde(default = "one")]
    pub max_mem_ratio: f64,
    #[serde(default = "default_reserve")]
    pub reserve_fraction: f64,
    #[serde(default)]
    pub cache: CacheSection,
}

impl Default for MemorySection {
    fn default() -> Self {
        Self {
            block_size: default_block_size(),
            max_mem_ratio: 1.0,
            reserve_fraction: default_reserve(),
            cache: CacheSection::default(),
        }
    }
}

fn default_overhead_ns() -> u64 {
    crate::costmodel::DEFAULT_ITERATION_OVERHEAD.as_nanos()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    #[serde(default = "default_overhead_ns")]
    pub iteration_overhead_ns: u64,
}

impl Default for CostSection {
    fn default() -> Self {
        Self {
            iteration_overhead_ns: default_overhead_ns(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "is_default")]
    pub record_tokens: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Stop at this simulated time even if requests remain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon_s: Option<f64>,
    pub model: ModelSection,
    pub workers: Vec<WorkerSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub links: Vec<LinkSection>,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub scheduler: SchedulerSection,
    #[serde(default)]
    pub memory: MemorySection,
    #[serde(default)]
    pub cost: CostSection,
    #[serde(default)]
    pub slo: SloSpec,
    #[serde(default, skip_serializing_if = "is_default")]
    pub output: OutputSection,
}

/// Everything needed to run one simulation.
pub struct Prepared {
    pub setup: SimSetup,
    pub requests: Vec<RequestSpec>,
    pub slo: SloSpec,
    pub overhead: SimDuration,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes relative trace paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let Source::Trace(p) = &mut self.workload.source {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config is always serializable")
    }

    pub fn from_json(v: Value) -> Result<Self, ConfigError> {
        serde_json::from_value(v).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Workers after expanding `count`, in id order.
    pub fn expanded_workers(&self) -> Result<Vec<WorkerSetup>, ConfigError> {
        let mut out = Vec::new();
        for (i, w) in self.workers.iter().enumerate() {
            let path = format!("workers[{i}]");
            if w.count == 0 {
                return Err(invalid(format!("{path}.count"), "must be >= 1"));
            }
            let hw = w.resolve(&path)?;
            for _ in 0..w.count {
                out.push(WorkerSetup {
                    hardware: hw.clone(),
                    role: w.role,
                });
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_with(&PolicyRegistry::builtin())
    }

    pub fn validate_with(&self, registry: &PolicyRegistry) -> Result<(), ConfigError> {
        let model = self.model.resolve()?;
        if self.workers.is_empty() {
            return Err(invalid("workers", "at least one worker group is required"));
        }
        let workers = self.expanded_workers()?;
        let weights = model.weight_bytes();
        let mut id = 0;
        for (i, w) in self.workers.iter().enumerate() {
            let cap = workers[id].hardware.mem_capacity;
            if cap < weights {
                return Err(invalid(
                    format!("workers[{i}].mem_capacity"),
                    format!(
                        "capacity {cap} B is below the model weight bytes {weights} B; \
                         capacity must be >= weight bytes"
                    ),
                ));
            }
            id += w.count;
        }

        let s = &self.scheduler;
        if registry.global(&s.global_policy).is_none() {
            return Err(invalid(
                "scheduler.global_policy",
                format!(
                    "unknown policy `{}` (known: {})",
                    s.global_policy,
                    registry.global_names().join(", ")
                ),
            ));
        }
        if registry.local(&s.local_policy).is_none() {
            return Err(invalid(
                "scheduler.local_policy",
                format!(
                    "unknown policy `{}` (known: {})",
                    s.local_policy,
                    registry.local_names().join(", ")
                ),
            ));
        }
        let disaggregated = s.local_policy == "disaggregated";
        for (i, w) in self.workers.iter().enumerate() {
            if disaggregated && w.role == WorkerRole::Unified {
                return Err(invalid(
                    format!("workers[{i}].role"),
                    "disaggregated scheduling needs every worker tagged prefill or decode",
                ));
            }
            if !disaggregated && w.role != WorkerRole::Unified {
                return Err(invalid(
                    format!("workers[{i}].role"),
                    format!(
                        "role `{}` requires local_policy = \"disaggregated\"",
                        w.role
                    ),
                ));
            }
        }
        if disaggregated {
            for role in [WorkerRole::Prefill, WorkerRole::Decode] {
                if !self.workers.iter().any(|w| w.role == role) {
                    return Err(invalid(
                        "workers",
                        format!("disaggregated mode needs a {role} worker"),
                    ));
                }
            }
        }
        if s.prefill_chunk == Some(0) {
            return Err(invalid("scheduler.prefill_chunk", "must be >= 1"));
        }

        for (i, l) in self.links.iter().enumerate() {
            for (f, e) in [("src", &l.src), ("dst", &l.dst)] {
                match parse_endpoint(e) {
                    None => {
                        return Err(invalid(
                            format!("links[{i}].{f}"),
                            format!("`{e}` is not \"host\" or \"w<index>\""),
                        ))
                    }
                    Some(Endpoint::Device(d)) if d >= workers.len() => {
                        return Err(invalid(
                            format!("links[{i}].{f}"),
                            format!("worker {d} does not exist ({} workers)", workers.len()),
                        ))
                    }
                    _ => {}
                }
            }
            if l.src == l.dst {
                return Err(invalid(format!("links[{i}]"), "src and dst must differ"));
            }
            self.link(l)
                .validate()
                .map_err(|e| invalid(format!("links[{i}]"), e))?;
        }

        self.workload
            .validate()
            .map_err(|e| invalid("workload", e))?;

        let m = &self.memory;
        if m.block_size == 0 {
            return Err(invalid("memory.block_size", "must be >= 1"));
        }
        if !(m.max_mem_ratio > 0.0 && m.max_mem_ratio <= 1.0) {
            return Err(invalid("memory.max_mem_ratio", "must be in (0, 1]"));
        }
        if !(0.0..1.0).contains(&m.reserve_fraction) {
            return Err(invalid("memory.reserve_fraction", "must be in [0, 1)"));
        }
        if m.cache.capacity_bytes == Some(0) {
            return Err(invalid("memory.cache.capacity_bytes", "must be positive"));
        }
        if !(self.slo.ttft_s > 0.0) {
            return Err(invalid("slo.ttft_s", "must be positive"));
        }
        if !(self.slo.mtpot_s > 0.0) {
            return Err(invalid("slo.mtpot_s", "must be positive"));
        }
        if let Some(h) = self.horizon_s {
            if !(h > 0.0 && h.is_finite()) {
                return Err(invalid("horizon_s", "must be positive"));
            }
        }
        Ok(())
    }

    fn link(&self, l: &LinkSection) -> Link {
        Link {
            src: parse_endpoint(&l.src).expect("validated"),
            dst: parse_endpoint(&l.dst).expect("validated"),
            bandwidth: l.bandwidth,
            base_latency: SimDuration::from_nanos(l.latency_ns),
            mode: l.mode,
        }
    }

    pub fn prepare(&self) -> Result<Prepared, ConfigError> {
        self.validate()?;
        let model = self.model.resolve()?;
        let mut links = Vec::new();
        for l in &self.links {
            let link = self.link(l);
            if l.duplex {
                links.push(Link {
                    src: link.dst,
                    dst: link.src,
                    ..link.clone()
                });
            }
            links.push(link);
        }
        let requests = generate(&self.workload, self.seed).map_err(|e| invalid("workload", e))?;
        let m = &self.memory;
        let setup = SimSetup {
            model,
            workers: self.expanded_workers()?,
            links,
            limits: Limits {
                max_batch_size: self.scheduler.max_batch_size,
                max_mem_ratio: m.max_mem_ratio,
                prefill_chunk: self.scheduler.prefill_chunk,
            },
            block_size: m.block_size,
            reserve_fraction: m.reserve_fraction,
            cache: m.cache.enabled.then(|| CacheSetup {
                capacity_bytes: m.cache.capacity_bytes,
                per_block_fetch: SimDuration::from_nanos(m.cache.per_block_fetch_ns),
            }),
            horizon: self.horizon_s.map(SimTime::from_secs_f64),
            record_tokens: self.output.record_tokens,
        };
        Ok(Prepared {
            setup,
            requests,
            slo: self.slo,
            overhead: SimDuration::from_nanos(self.cost.iteration_overhead_ns),
        })
    }

    pub fn simulate(&self) -> Result<RunReport, ConfigError> {
        self.simulate_with(&PolicyRegistry::builtin())
    }

    pub fn simulate_with(&self, registry: &PolicyRegistry) -> Result<RunReport, ConfigError> {
        let p = self.prepare()?;
        let sim = Simulation::with_registry(
            p.setup,
            &p.requests,
            Box::new(Roofline {
                overhead: p.overhead,
            }),
            registry,
            &self.scheduler.global_policy,
            &self.scheduler.local_policy,
        )
        .map_err(sim_error)?;
        Ok(sim.run())
    }

    /// Simulates and analyzes; exports when `out` is given.
    pub fn run(&self, out: Option<&Path>) -> Result<(RunReport, Analysis), RunError> {
        let report = self.simulate()?;
        let analysis = analyze(&report, &self.slo);
        if let Some(dir) = out {
            export(&report, &analysis, dir).map_err(|source| RunError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
            std::fs::write(dir.join("config.toml"), self.to_toml()).map_err(|source| {
                RunError::Io {
                    path: dir.to_path_buf(),
                    source,
                }
            })?;
        }
        Ok((report, analysis))
    }
}

fn sim_error(e: SimError) -> ConfigError {
    invalid("config", e)
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Parses `a.b[2].c` (or `a.b.2.c`) into segments.
fn split_path(path: &str) -> Result<Vec<String>, ConfigError> {
    let mut out = Vec::new();
    for part in path.split('.') {
        let (head, mut rest) = match part.find('[') {
            Some(i) => (&part[..i], &part[i..]),
            None => (part, ""),
        };
        if !head.is_empty() {
            out.push(head.to_string());
        }
        while let Some(r) = rest.strip_prefix('[') {
            let end = r
                .find(']')
                .ok_or_else(|| bad_path(path, "unclosed `[` in path"))?;
            out.push(r[..end].to_string());
            rest = &r[end + 1..];
        }
        if !rest.is_empty() || (head.is_empty() && part.is_empty()) {
            return Err(bad_path(path, "malformed path"));
        }
    }
    Ok(out)
}

/// Returns whether a previously absent key was created.
fn set_at(
    node: &mut Value,
    segs: &[String],
    value: &Value,
    full: &str,
) -> Result<bool, ConfigError> {
    let (first, rest) = segs.split_first().expect("non-empty path");
    match node {
        Value::Array(items) => {
            let targets: Vec<usize> = if first == "*" {
                (0..items.len()).collect()
            } else {
                let i: usize = first
                    .parse()
                    .map_err(|_| bad_path(full, format!("`{first}` is not an index")))?;
                if i >= items.len() {
                    return Err(bad_path(
                        full,
                        format!("index {i} out of range ({})", items.len()),
                    ));
                }
                vec![i]
            };
            let mut created = false;
            for i in targets {
                if rest.is_empty() {
                    items[i] = value.clone();
                } else {
                    created |= set_at(&mut items[i], rest, value, full)?;
                }
            }
            Ok(created)
        }
        Value::Object(map) => {
            if rest.is_empty() {
                return Ok(map.insert(first.clone(), value.clone()).is_none());
            }
            let child = map
                .get_mut(first)
                .ok_or_else(|| bad_path(full, format!("no field `{first}`")))?;
            set_at(child, rest, value, full)
        }
        _ => Err(bad_path(full, format!("cannot descend into `{first}`"))),
    }
}

/// Returns a copy of `cfg` with `path` set to `value`. The result is
/// re-parsed, so unknown fields and ill-typed values are rejected.
pub fn apply_override(
    cfg: &RunConfig,
    path: &str,
    value: &Value,
) -> Result<RunConfig, ConfigError> {
    let segs = split_path(path)?;
    if segs.is_empty() {
        return Err(bad_path(path, "empty path"));
    }
    let mut v = cfg.to_json();
    set_at(&mut v, &segs, value, path)?;
    RunConfig::from_json(v).map_err(|e| bad_path(path, e))
}
