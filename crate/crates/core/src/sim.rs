//! The serving engine: workers, links and schedulers driven by the event
//! queue.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::Serialize;
use thiserror::Error;

use crate::comm::{
    CommError, Endpoint, Link, LinkState, DEFAULT_HOST_BANDWIDTH, DEFAULT_HOST_LATENCY,
    DEFAULT_PEER_BANDWIDTH, DEFAULT_PEER_LATENCY,
};
use crate::costmodel::{BatchPlan, CostError, CostModel, HardwareSpec};
use crate::kernel::{EventQueue, QueueStats};
use crate::memory::{device_block_count, BlockPool, MemoryCache, MemoryError, RequestId};
use crate::model::{Breakpoint, ModelError, ModelSpec};
use crate::request::{Request, Stage};
use crate::sched::{
    BatchBuilder, BreakpointCtx, DispatchKind, GlobalPolicy, Limits, LocalPolicy, PolicyRegistry,
    Routing, WorkerRole, WorkerView,
};
use crate::time::{SimDuration, SimTime};
use crate::workload::{Arrival, RequestSpec};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error("at least one worker is required")]
    NoWorkers,
    #[error(
        "worker {worker}: memory capacity {capacity} B is smaller than model weights {weights} B"
    )]
    WeightsExceedCapacity {
        worker: usize,
        capacity: u64,
        weights: u64,
    },
    #[error("worker {worker}: no room for a single KV block after weights and reserve")]
    NoKvBlocks { worker: usize },
    #[error("link {0} references a worker that does not exist")]
    LinkEndpoint(String),
    #[error("unknown {kind} policy `{name}`")]
    UnknownPolicy { kind: &'static str, name: String },
    #[error("expected one local policy per worker ({workers}), got {policies}")]
    PolicyCount { workers: usize, policies: usize },
    #[error("request ids must be 0..n in order; position {index} holds id {id}")]
    RequestIds { index: usize, id: u64 },
    #[error("reserve_fraction must be in [0, 1), got {0}")]
    Reserve(f64),
    #[error("max_mem_ratio must be in (0, 1], got {0}")]
    MemRatio(f64),
}

#[derive(Debug, Clone)]
pub struct WorkerSetup {
    pub hardware: HardwareSpec,
    pub role: WorkerRole,
}

#[derive(Debug, Clone)]
pub struct CacheSetup {
    /// `None` means four times the summed device KV capacity.
    pub capacity_bytes: Option<u64>,
    pub per_block_fetch: SimDuration,
}

#[derive(Debug, Clone)]
pub struct SimSetup {
    pub model: ModelSpec,
    pub workers: Vec<WorkerSetup>,
    /// Directed links; pairs not listed get a default link on first use.
    pub links: Vec<Link>,
    pub limits: Limits,
    pub block_size: u64,
    pub reserve_fraction: f64,
    pub cache: Option<CacheSetup>,
    pub horizon: Option<SimTime>,
    /// Keep every token timestamp (memory heavy on large runs).
    pub record_tokens: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferKind {
    SwapOut,
    SwapIn,
    Handoff,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferRecord {
    pub kind: TransferKind,
    pub request: RequestId,
    pub src: Endpoint,
    pub dst: Endpoint,
    pub bytes: u64,
    pub start: SimTime,
    pub end: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchRecord {
    pub worker: usize,
    pub start: SimTime,
    pub end: SimTime,
    pub prefill_requests: u32,
    pub prefill_tokens: u64,
    pub decode_requests: u32,
    pub fetch_delay: SimDuration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FootprintSample {
    pub time: SimTime,
    pub worker: usize,
    pub allocated_blocks: u64,
    pub utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreemptionRecord {
    pub time: SimTime,
    pub worker: usize,
    pub request: RequestId,
    pub tokens: u64,
}

#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub transfers: Vec<TransferRecord>,
    pub batches: Vec<BatchRecord>,
    pub footprint: Vec<FootprintSample>,
    pub preemptions: Vec<PreemptionRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WorkerInfo {
    pub id: usize,
    pub role: WorkerRole,
    pub hardware: String,
    pub total_blocks: u64,
    pub iterations: u64,
    pub busy_ns: u64,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub requests: Vec<Request>,
    pub workers: Vec<WorkerInfo>,
    pub log: RunLog,
    pub end_time: SimTime,
    /// The run stopped at the horizon with work outstanding.
    pub horizon_reached: bool,
    pub kv_bytes_per_token: u64,
    pub block_size: u64,
    pub cache: Option<CacheStats>,
    pub events: QueueStats,
    /// Prompt tokens actually computed (cache hits excluded).
    pub prefill_tokens: u64,
}

#[derive(Debug, Clone, Copy)]
enum Event {
    Arrival(RequestId),
    IterationDone(usize),
    TransferDone(usize),
}

struct Worker {
    role: WorkerRole,
    hardware: HardwareSpec,
    pool: BlockPool,
    waiting: VecDeque<RequestId>,
    running: Vec<RequestId>,
    inbound: usize,
    outstanding: usize,
    current: Option<(BatchPlan, SimTime)>,
    policy: Box<dyn LocalPolicy>,
    iterations: u64,
    busy: SimDuration,
}

pub struct Simulation {
    queue: EventQueue<Event>,
    model: ModelSpec,
    breakpoints: Vec<Breakpoint>,
    kv_bytes: u64,
    limits: Limits,
    requests: Vec<Request>,
    arrivals: Vec<Arrival>,
    next_round: Vec<Option<RequestId>>,
    workers: Vec<Worker>,
    links: BTreeMap<(Endpoint, Endpoint), LinkState>,
    global: Box<dyn GlobalPolicy>,
    global_queue: VecDeque<(RequestId, DispatchKind)>,
    cost: Box<dyn CostModel>,
    cache: Option<MemoryCache>,
    horizon: SimTime,
    log: RunLog,
    done: usize,
    prefill_tokens: u64,
}

impl Simulation {
    pub fn new(
        setup: SimSetup,
        specs: &[RequestSpec],
        cost: Box<dyn CostModel>,
        global: Box<dyn GlobalPolicy>,
        locals: Vec<Box<dyn LocalPolicy>>,
    ) -> Result<Self, SimError> {
        setup.model.validate()?;
        if setup.workers.is_empty() {
            return Err(SimError::NoWorkers);
        }
        if locals.len() != setup.workers.len() {
            return Err(SimError::PolicyCount {
                workers: setup.workers.len(),
                policies: locals.len(),
            });
        }
        if !(0.0..1.0).contains(&setup.reserve_fraction) {
            return Err(SimError::Reserve(setup.reserve_fraction));
        }
        let ratio = setup.limits.max_mem_ratio;
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(SimError::MemRatio(ratio));
        }
        let kv_bytes = setup.model.kv_bytes_per_token();
        let weights = setup.model.weight_bytes();
        let mut workers = Vec::with_capacity(setup.workers.len());
        for (id, (w, policy)) in setup.workers.into_iter().zip(locals).enumerate() {
            w.hardware.validate()?;
            if w.hardware.mem_capacity < weights {
                return Err(SimError::WeightsExceedCapacity {
                    worker: id,
                    capacity: w.hardware.mem_capacity,
                    weights,
                });
            }
            let blocks = device_block_count(
                w.hardware.mem_capacity,
                weights,
                setup.reserve_fraction,
                setup.block_size,
                kv_bytes,
            );
            if blocks == 0 {
                return Err(SimError::NoKvBlocks { worker: id });
            }
            workers.push(Worker {
                role: w.role,
                hardware: w.hardware,
                pool: BlockPool::new(id, setup.block_size, blocks)?,
                waiting: VecDeque::new(),
                running: Vec::new(),
                inbound: 0,
                outstanding: 0,
                current: None,
                policy,
                iterations: 0,
                busy: SimDuration::ZERO,
            });
        }

        let mut links = BTreeMap::new();
        for l in setup.links {
            l.validate()?;
            for e in [l.src, l.dst] {
                if let Endpoint::Device(d) = e {
                    if d >= workers.len() {
                        return Err(SimError::LinkEndpoint(format!("{}->{}", l.src, l.dst)));
                    }
                }
            }
            links.insert((l.src, l.dst), LinkState::new(l));
        }

        let cache = setup.cache.map(|c| {
            let device_kv: u64 = workers
                .iter()
                .map(|w| w.pool.total_blocks() * setup.block_size * kv_bytes)
                .sum();
            MemoryCache::new(
                c.capacity_bytes.unwrap_or(device_kv.saturating_mul(4)),
                setup.block_size,
                kv_bytes,
                c.per_block_fetch,
            )
        });

        let mut requests = Vec::with_capacity(specs.len());
        let mut arrivals = Vec::with_capacity(specs.len());
        let mut by_round = HashMap::new();
        for (i, s) in specs.iter().enumerate() {
            if s.id != i as u64 {
                return Err(SimError::RequestIds { index: i, id: s.id });
            }
            requests.push(Request::from_spec(s, setup.record_tokens));
            arrivals.push(s.arrival);
            by_round.insert((s.conversation_id, s.round_index), s.id);
        }
        let next_round = specs
            .iter()
            .map(|s| {
                by_round
                    .get(&(s.conversation_id, s.round_index + 1))
                    .copied()
            })
            .collect();

        let mut queue = EventQueue::new();
        for s in specs {
            if let Arrival::At(t) = s.arrival {
                queue
                    .schedule_at(t, Event::Arrival(s.id))
                    .expect("queue starts at zero");
            }
        }

        Ok(Self {
            queue,
            breakpoints: setup.model.effective_breakpoints(),
            model: setup.model,
            kv_bytes,
            limits: setup.limits,
            requests,
            arrivals,
            next_round,
            workers,
            links,
            global,
            global_queue: VecDeque::new(),
            cost,
            cache,
            horizon: setup.horizon.unwrap_or(SimTime::MAX),
            log: RunLog::default(),
            done: 0,
            prefill_tokens: 0,
        })
    }

    /// Builds the policies by name: one local policy instance per worker.
    pub fn with_registry(
        setup: SimSetup,
        specs: &[RequestSpec],
        cost: Box<dyn CostModel>,
        registry: &PolicyRegistry,
        global: &str,
        local: &str,
    ) -> Result<Self, SimError> {
        let g = registry
            .global(global)
            .ok_or_else(|| SimError::UnknownPolicy {
                kind: "global",
                name: global.to_string(),
            })?;
        let mut locals = Vec::with_capacity(setup.workers.len());
        for _ in 0..setup.workers.len() {
            locals.push(
                registry
                    .local(local)
                    .ok_or_else(|| SimError::UnknownPolicy {
                        kind: "local",
                        name: local.to_string(),
                    })?,
            );
        }
        Self::new(setup, specs, cost, g, locals)
    }

    pub fn run(mut self) -> RunReport {
        while self.done < self.requests.len() {
            let Some((_, ev)) = self.queue.pop_until(self.horizon) else {
                break;
            };
            match ev {
                Event::Arrival(id) => self.on_arrival(id),
                Event::IterationDone(w) => self.on_iteration_done(w),
                Event::TransferDone(t) => self.on_transfer_done(t),
            }
            debug_assert!(self.workers.iter().all(|w| w.pool.check_conservation()));
        }
        let horizon_reached = self.done < self.requests.len();
        let workers = self
            .workers
            .iter()
            .enumerate()
            .map(|(id, w)| WorkerInfo {
                id,
                role: w.role,
                hardware: w.hardware.name.clone(),
                total_blocks: w.pool.total_blocks(),
                iterations: w.iterations,
                busy_ns: w.busy.as_nanos(),
            })
            .collect();
        RunReport {
            requests: self.requests,
            workers,
            log: self.log,
            end_time: self.queue.now(),
            horizon_reached,
            kv_bytes_per_token: self.kv_bytes,
            block_size: self.workers[0].pool.block_size(),
            cache: self.cache.as_ref().map(|c| CacheStats {
                hits: c.hits,
                misses: c.misses,
                evictions: c.evictions,
            }),
            events: self.queue.stats(),
            prefill_tokens: self.prefill_tokens,
        }
    }

    fn now(&self) -> SimTime {
        self.queue.now()
    }

    fn on_arrival(&mut self, id: RequestId) {
        let now = self.now();
        let r = &mut self.requests[id as usize];
        r.arrival_time = Some(now);
        r.stage = Stage::Waiting;
        self.global_queue.push_back((id, DispatchKind::New));
        self.dispatch_global();
    }

    fn dispatch_global(&mut self) {
        let mut parked = VecDeque::new();
        while let Some((id, kind)) = self.global_queue.pop_front() {
            let views: Vec<WorkerView> = self
                .workers
                .iter()
                .enumerate()
                .filter(|(_, w)| w.role.accepts(kind))
                .map(|(i, w)| WorkerView {
                    id: i,
                    role: w.role,
                    hardware: w.hardware.name.clone(),
                    outstanding: w.outstanding,
                    queue_depth: w.waiting.len(),
                    utilization: w.pool.utilization(),
                })
                .collect();
            if views.is_empty() {
                parked.push_back((id, kind));
                continue;
            }
            let target = self
                .global
                .dispatch(&self.requests[id as usize], kind, &views);
            assert!(
                views.iter().any(|v| v.id == target),
                "global policy `{}` chose ineligible worker {target}",
                self.global.name()
            );
            let w = &mut self.workers[target];
            w.outstanding += 1;
            w.waiting.push_back(id);
            self.try_start(target);
        }
        self.global_queue = parked;
    }

    fn try_start(&mut self, wid: usize) {
        let now = self.now();
        let w = &mut self.workers[wid];
        if w.current.is_some() {
            return;
        }
        let mut builder = BatchBuilder::new(
            wid,
            w.role,
            self.limits,
            now,
            self.kv_bytes,
            &mut w.pool,
            &mut self.requests,
            &mut w.waiting,
            &mut w.running,
            &mut w.inbound,
            self.cache.as_mut(),
        );
        w.policy.form_batch(&mut builder);
        let out = builder.finish();

        for &(id, bytes) in &out.swap_outs {
            let tokens = self.requests[id as usize].swapped_tokens;
            self.log.preemptions.push(PreemptionRecord {
                time: now,
                worker: wid,
                request: id,
                tokens,
            });
            self.start_transfer(
                TransferKind::SwapOut,
                id,
                Endpoint::Device(wid),
                Endpoint::Host,
                bytes,
            );
        }
        for &(id, bytes) in &out.swap_ins {
            self.start_transfer(
                TransferKind::SwapIn,
                id,
                Endpoint::Host,
                Endpoint::Device(wid),
                bytes,
            );
        }
        for &id in &out.handoffs {
            let src = self.requests[id as usize]
                .prefill_worker
                .expect("handoff has a prefill worker");
            let bytes = self.requests[id as usize].prompt_len as u64 * self.kv_bytes;
            self.start_transfer(
                TransferKind::Handoff,
                id,
                Endpoint::Device(src),
                Endpoint::Device(wid),
                bytes,
            );
        }
        for &id in &out.rejected {
            self.on_rejected(wid, id);
        }

        if out.plan.is_empty() {
            if !out.rejected.is_empty() || !out.swap_outs.is_empty() {
                self.sample(wid);
            }
            if !out.rejected.is_empty() {
                self.try_start(wid);
            }
            return;
        }
        let w = &mut self.workers[wid];
        let compute = self
            .cost
            .iteration_time(&out.plan, &self.model, &w.hardware);
        let duration = out.fetch_delay + compute;
        for e in &out.plan.decode {
            let r = &mut self.requests[e.request as usize];
            if r.first_decode_start.is_none() {
                r.first_decode_start = Some(now);
            }
            if r.decode_workers.last() != Some(&wid) {
                r.decode_workers.push(wid);
            }
        }
        self.prefill_tokens += out.plan.prefill_tokens();
        self.log.batches.push(BatchRecord {
            worker: wid,
            start: now,
            end: now + duration,
            prefill_requests: out.plan.prefill.len() as u32,
            prefill_tokens: out.plan.prefill_tokens(),
            decode_requests: out.plan.decode.len() as u32,
            fetch_delay: out.fetch_delay,
        });
        w.iterations += 1;
        w.busy += duration;
        w.current = Some((out.plan, now));
        self.sample(wid);
        self.queue.schedule(duration, Event::IterationDone(wid));
    }

    fn sample(&mut self, wid: usize) {
        let pool = &self.workers[wid].pool;
        self.log.footprint.push(FootprintSample {
            time: self.queue.now(),
            worker: wid,
            allocated_blocks: pool.allocated_blocks(),
            utilization: pool.utilization(),
        });
    }

    fn link(&mut self, src: Endpoint, dst: Endpoint) -> &mut LinkState {
        self.links.entry((src, dst)).or_insert_with(|| {
            let (bw, lat) = if src == Endpoint::Host || dst == Endpoint::Host {
                (DEFAULT_HOST_BANDWIDTH, DEFAULT_HOST_LATENCY)
            } else {
                (DEFAULT_PEER_BANDWIDTH, DEFAULT_PEER_LATENCY)
            };
            LinkState::new(Link::sequential(src, dst, bw, lat))
        })
    }

    fn start_transfer(
        &mut self,
        kind: TransferKind,
        request: RequestId,
        src: Endpoint,
        dst: Endpoint,
        bytes: u64,
    ) {
        let now = self.now();
        let consumer = match dst {
            Endpoint::Device(d) => Some(self.workers[d].hardware.effective_bandwidth()),
            Endpoint::Host => None,
        };
        let (start, end) = self.link(src, dst).reserve(now, bytes, consumer);
        let idx = self.log.transfers.len();
        self.log.transfers.push(TransferRecord {
            kind,
            request,
            src,
            dst,
            bytes,
            start,
            end,
        });
        self.queue
            .schedule_at(end, Event::TransferDone(idx))
            .expect("transfer ends in the future");
    }

    fn on_transfer_done(&mut self, idx: usize) {
        let now = self.now();
        let t = self.log.transfers[idx].clone();
        let id = t.request;
        match t.kind {
            TransferKind::SwapOut => {
                let Endpoint::Device(wid) = t.src else {
                    unreachable!("swap-out leaves a device")
                };
                self.requests[id as usize].stage = Stage::SwappedOut;
                self.try_start(wid);
            }
            TransferKind::SwapIn => {
                let Endpoint::Device(wid) = t.dst else {
                    unreachable!("swap-in lands on a device")
                };
                self.make_resident(wid, id);
                self.try_start(wid);
            }
            TransferKind::Handoff => {
                let (Endpoint::Device(src), Endpoint::Device(dst)) = (t.src, t.dst) else {
                    unreachable!("handoff is device to device")
                };
                let p = &mut self.workers[src];
                p.pool.release(id).expect("prefill worker holds the KV");
                p.outstanding -= 1;
                self.sample(src);
                let r = &mut self.requests[id as usize];
                r.handoff_done = Some(now);
                r.handoffs += 1;
                self.make_resident(dst, id);
                self.try_start(src);
                self.try_start(dst);
            }
        }
    }

    fn make_resident(&mut self, wid: usize, id: RequestId) {
        let r = &mut self.requests[id as usize];
        r.stage = Stage::Decoding;
        r.worker = Some(wid);
        let key = (r.arrival(), r.id);
        let w = &mut self.workers[wid];
        w.inbound -= 1;
        let reqs = &self.requests;
        let pos = w
            .running
            .partition_point(|&o| (reqs[o as usize].arrival(), o) < key);
        w.running.insert(pos, id);
    }

    fn on_iteration_done(&mut self, wid: usize) {
        let now = self.now();
        let (plan, _) = self.workers[wid]
            .current
            .take()
            .expect("iteration in flight");
        let mut produced: Vec<(RequestId, bool)> = Vec::with_capacity(plan.len());
        for e in &plan.prefill {
            let r = &mut self.requests[e.request as usize];
            r.prefilled += e.tokens;
            if r.prefill_done() {
                r.prefill_worker = Some(wid);
                produced.push((r.id, true));
            }
        }
        for e in &plan.decode {
            produced.push((e.request, false));
        }

        let mut returned = Vec::new();
        for (id, prefill_completed) in produced {
            let r = &mut self.requests[id as usize];
            r.generated += 1;
            r.tokens.push(now);
            r.stage = Stage::Decoding;
            r.iteration_boundaries += 1;
            if r.generated >= r.output_len {
                self.finish(wid, id);
                continue;
            }
            let w = &mut self.workers[wid];
            let r = &self.requests[id as usize];
            let mut routing = Routing::KeepLocal;
            for bp in &self.breakpoints {
                let ctx = BreakpointCtx {
                    request: r,
                    role: w.role,
                    breakpoint: bp,
                    prefill_completed,
                };
                if w.policy.on_breakpoint(&ctx) == Routing::ReturnToGlobal {
                    routing = Routing::ReturnToGlobal;
                    break;
                }
            }
            if routing == Routing::ReturnToGlobal {
                returned.push(id);
            }
        }

        for &id in &returned {
            let w = &mut self.workers[wid];
            w.running.retain(|&x| x != id);
            let r = &mut self.requests[id as usize];
            r.stage = Stage::AwaitingHandoff;
            r.prefill_worker = Some(wid);
            self.global_queue.push_back((id, DispatchKind::Handoff));
        }
        self.sample(wid);
        if !returned.is_empty() {
            self.dispatch_global();
        }
        self.try_start(wid);
    }

    fn finish(&mut self, wid: usize, id: RequestId) {
        let now = self.now();
        let w = &mut self.workers[wid];
        w.pool.release(id).expect("finished request is resident");
        w.running.retain(|&x| x != id);
        w.outstanding -= 1;
        let r = &mut self.requests[id as usize];
        r.stage = Stage::Finished;
        r.finish_time = Some(now);
        let context = r.prompt_len as u64 + r.output_len as u64;
        let conversation = r.conversation_id;
        if let Some(c) = self.cache.as_mut() {
            c.store(conversation, context, now);
        }
        self.done += 1;
        self.release_next_round(id);
    }

    fn on_rejected(&mut self, wid: usize, id: RequestId) {
        let w = &mut self.workers[wid];
        w.outstanding -= 1;
        // A rejected handoff still holds KV on its prefill worker.
        if let Some(p) = self.requests[id as usize].prefill_worker {
            if p != wid && self.workers[p].pool.is_registered(id) {
                self.workers[p].pool.release(id).expect("registered");
                self.workers[p].outstanding -= 1;
                self.sample(p);
                self.try_start(p);
            }
        }
        self.requests[id as usize].finish_time = Some(self.now());
        self.done += 1;
        self.release_next_round(id);
    }

    fn release_next_round(&mut self, id: RequestId) {
        let Some(next) = self.next_round[id as usize] else {
            return;
        };
        // Absolute arrivals were queued up front.
        let Arrival::AfterPrevious(think) = self.arrivals[next as usize] else {
            return;
        };
        self.queue
            .schedule(think.max(SimDuration::from_nanos(1)), Event::Arrival(next));
    }
}

/// Convenience: run with the built-in policies.
pub fn simulate(
    setup: SimSetup,
    specs: &[RequestSpec],
    cost: Box<dyn CostModel>,
    global: &str,
    local: &str,
) -> Result<RunReport, SimError> {
    Ok(Simulation::with_registry(
        setup,
        specs,
        cost,
        &PolicyRegistry::builtin(),
        global,
        local,
    )?
    .run())
}
