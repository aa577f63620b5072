//! Two-stage scheduling.
//!
//! A [`GlobalPolicy`] assigns arriving requests (and requests handed back by
//! a local scheduler) to workers. Each worker runs a [`LocalPolicy`] that
//! forms one [`BatchPlan`] per iteration through a [`BatchBuilder`] and is
//! consulted at every model breakpoint.
//!
//! Policies are compiled in and selected by name through a
//! [`PolicyRegistry`]. To add one, implement the trait and call
//! [`PolicyRegistry::register_local`] (or `register_global`) before building
//! the simulation.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::costmodel::{BatchPlan, DecodeEntry, PrefillEntry};
use crate::memory::{
    Allocation, BlockPool, CacheLookup, LatestArrival, MemoryCache, RequestId, VictimPolicy,
};
use crate::model::{Breakpoint, BreakpointPosition};
use crate::request::{Request, Stage};
use crate::time::{SimDuration, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkerRole {
    Unified,
    Prefill,
    Decode,
}

impl WorkerRole {
    pub fn accepts(self, kind: DispatchKind) -> bool {
        match kind {
            DispatchKind::New => matches!(self, WorkerRole::Unified | WorkerRole::Prefill),
            DispatchKind::Handoff => self == WorkerRole::Decode,
        }
    }
}

impl fmt::Display for WorkerRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WorkerRole::Unified => "unified",
            WorkerRole::Prefill => "prefill",
            WorkerRole::Decode => "decode",
        })
    }
}

/// Concurrent-request cap per worker; `"inf"` in config means no cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchLimit {
    Inf,
    Max(usize),
}

impl BatchLimit {
    pub fn allows(self, n: usize) -> bool {
        match self {
            BatchLimit::Inf => true,
            BatchLimit::Max(m) => n <= m,
        }
    }
}

impl Serialize for BatchLimit {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            BatchLimit::Inf => s.serialize_str("inf"),
            BatchLimit::Max(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for BatchLimit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(0) => Err(serde::de::Error::custom("max_batch_size must be >= 1")),
            Raw::N(n) => Ok(BatchLimit::Max(n as usize)),
            Raw::S(s) if s == "inf" => Ok(BatchLimit::Inf),
            Raw::S(s) => Err(serde::de::Error::custom(format!(
                "max_batch_size must be a positive integer or \"inf\", got `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Limits {
    pub max_batch_size: BatchLimit,
    pub max_mem_ratio: f64,
    /// Prefill token budget per iteration; `None` prefills whole prompts.
    pub prefill_chunk: Option<u32>,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_batch_size: BatchLimit::Inf,
            max_mem_ratio: 1.0,
            prefill_chunk: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaitKind {
    /// Needs prefill.
    New,
    /// Swapped out on this worker; needs swap-in.
    Resume,
    /// Prefilled elsewhere; needs its KV pulled in.
    Handoff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Refusal {
    BatchFull,
    /// Fails the utilization-ratio admission gate.
    MemoryRatio,
    /// Not enough free blocks to grow.
    Insufficient,
    /// Swap-out still in flight.
    NotReady,
    TokenBudget,
    /// Can never fit on this worker; the request was rejected.
    Rejected,
}

/// Side effects of one batch formation, applied by the engine.
#[derive(Debug, Default)]
pub struct BatchOutcome {
    pub plan: BatchPlan,
    /// Memory-cache retrieval charged before this iteration's compute.
    pub fetch_delay: SimDuration,
    /// `(request, bytes)` to move device -> host.
    pub swap_outs: Vec<(RequestId, u64)>,
    /// `(request, bytes)` to move host -> device.
    pub swap_ins: Vec<(RequestId, u64)>,
    /// Requests whose prefill KV should be pulled to this worker.
    pub handoffs: Vec<RequestId>,
    pub rejected: Vec<RequestId>,
    pub admitted: Vec<RequestId>,
    pub cache_hits: u64,
}

/// Mutable view of one worker handed to a [`LocalPolicy`].
///
/// Every admission goes through [`BatchBuilder::admit_at`], which enforces
/// the batch-size limit and the utilization-ratio gate, so no policy can
/// violate them.
pub struct BatchBuilder<'a> {
    pub(crate) worker: usize,
    pub(crate) role: WorkerRole,
    pub(crate) limits: Limits,
    pub(crate) now: SimTime,
    pub(crate) kv_bytes_per_token: u64,
    pub(crate) pool: &'a mut BlockPool,
    pub(crate) requests: &'a mut [Request],
    pub(crate) waiting: &'a mut VecDeque<RequestId>,
    pub(crate) running: &'a mut Vec<RequestId>,
    pub(crate) inbound: &'a mut usize,
    pub(crate) cache: Option<&'a mut MemoryCache>,
    scheduled: HashSet<RequestId>,
    token_budget: Option<u64>,
    out: BatchOutcome,
}

impl<'a> BatchBuilder<'a> {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        worker: usize,
        role: WorkerRole,
        limits: Limits,
        now: SimTime,
        kv_bytes_per_token: u64,
        pool: &'a mut BlockPool,
        requests: &'a mut [Request],
        waiting: &'a mut VecDeque<RequestId>,
        running: &'a mut Vec<RequestId>,
        inbound: &'a mut usize,
        cache: Option<&'a mut MemoryCache>,
    ) -> Self {
        Self {
            worker,
            role,
            limits,
            now,
            kv_bytes_per_token,
            pool,
            requests,
            waiting,
            running,
            inbound,
            cache,
            scheduled: HashSet::new(),
            token_budget: limits.prefill_chunk.map(u64::from),
            out: BatchOutcome::default(),
        }
    }

    pub fn finish(self) -> BatchOutcome {
        self.out
    }

    pub fn worker(&self) -> usize {
        self.worker
    }

    pub fn role(&self) -> WorkerRole {
        self.role
    }

    pub fn limits(&self) -> &Limits {
        &self.limits
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pool(&self) -> &BlockPool {
        self.pool
    }

    pub fn request(&self, id: RequestId) -> &Request {
        &self.requests[id as usize]
    }

    /// Requests resident on this worker, ordered by (arrival, id).
    pub fn running(&self) -> &[RequestId] {
        self.running
    }

    pub fn inbound(&self) -> usize {
        *self.inbound
    }

    pub fn waiting_len(&self) -> usize {
        self.waiting.len()
    }

    pub fn waiting(&self) -> impl Iterator<Item = (RequestId, WaitKind, bool)> + '_ {
        self.waiting.iter().map(|&id| {
            let (kind, ready) = self.wait_kind(id);
            (id, kind, ready)
        })
    }

    /// Requests counted against `max_batch_size`.
    pub fn batch_len(&self) -> usize {
        self.running.len() + *self.inbound
    }

    pub fn plan(&self) -> &BatchPlan {
        &self.out.plan
    }

    pub fn is_scheduled(&self, id: RequestId) -> bool {
        self.scheduled.contains(&id)
    }

    fn wait_kind(&self, id: RequestId) -> (WaitKind, bool) {
        match self.requests[id as usize].stage {
            Stage::SwappingOut => (WaitKind::Resume, false),
            Stage::SwappedOut => (WaitKind::Resume, true),
            Stage::AwaitingHandoff => (WaitKind::Handoff, true),
            _ => (WaitKind::New, true),
        }
    }

    fn insert_running(&mut self, id: RequestId) {
        let key = |r: &Request| (r.arrival(), r.id);
        let k = key(&self.requests[id as usize]);
        let reqs = &*self.requests;
        let pos = self
            .running
            .partition_point(|&other| key(&reqs[other as usize]) < k);
        self.running.insert(pos, id);
    }

    fn take_budget(&mut self, want: u64) -> Option<u64> {
        match self.token_budget.as_mut() {
            None => Some(want),
            Some(0) => None,
            Some(left) => {
                let n = want.min(*left);
                *left -= n;
                Some(n)
            }
        }
    }

    fn give_back_budget(&mut self, n: u64) {
        if let Some(left) = self.token_budget.as_mut() {
            *left += n;
        }
    }

    fn reject(&mut self, id: RequestId) {
        let r = &mut self.requests[id as usize];
        r.stage = Stage::Rejected;
        if self.pool.is_registered(id) {
            self.pool.release(id).expect("registered");
        }
        self.running.retain(|&x| x != id);
        self.out.rejected.push(id);
    }

    /// Adds a resident request to this iteration: one decode step, or the
    /// next prefill chunk.
    pub fn schedule_running(&mut self, id: RequestId) -> Result<(), Refusal> {
        if self.scheduled.contains(&id) {
            return Ok(());
        }
        let r = &self.requests[id as usize];
        match r.stage {
            Stage::Decoding => {
                let used = self
                    .pool
                    .tokens_used(id)
                    .expect("resident request registered");
                if self.pool.blocks_for(used + 1) > self.pool.total_blocks() {
                    self.reject(id);
                    return Err(Refusal::Rejected);
                }
                match self.pool.allocate(id, 1).expect("registered") {
                    Allocation::Granted(_) => {}
                    Allocation::Insufficient { .. } => return Err(Refusal::Insufficient),
                }
                self.out.plan.decode.push(DecodeEntry {
                    request: id,
                    context_len: (used + 1) as u32,
                });
            }
            Stage::Prefilling => {
                let remaining = (r.prompt_len - r.prefilled) as u64;
                let before = r.prefilled;
                let chunk = self.take_budget(remaining).ok_or(Refusal::TokenBudget)?;
                match self.pool.allocate(id, chunk).expect("registered") {
                    Allocation::Granted(_) => {}
                    Allocation::Insufficient { .. } => {
                        self.give_back_budget(chunk);
                        return Err(Refusal::Insufficient);
                    }
                }
                self.out.plan.prefill.push(PrefillEntry {
                    request: id,
                    tokens: chunk as u32,
                    context_before: before,
                });
            }
            _ => return Err(Refusal::NotReady),
        }
        self.scheduled.insert(id);
        Ok(())
    }

    /// Evicts the latest-arriving decoding request not yet scheduled this
    /// iteration (swap to host). Returns the victim.
    pub fn preempt_latest(&mut self) -> Option<RequestId> {
        let candidates: Vec<(RequestId, SimTime)> = self
            .running
            .iter()
            .filter(|id| !self.scheduled.contains(id))
            .map(|&id| &self.requests[id as usize])
            .filter(|r| r.stage == Stage::Decoding)
            .map(|r| (r.id, r.arrival()))
            .collect();
        let victim = LatestArrival.choose(&candidates)?;
        let p = self
            .pool
            .preempt(&[(victim, SimTime::ZERO)], &LatestArrival)
            .expect("victim is registered");
        self.running.retain(|&x| x != victim);
        let bytes = p.blocks * self.pool.block_size() * self.kv_bytes_per_token;
        let r = &mut self.requests[victim as usize];
        r.stage = Stage::SwappingOut;
        r.swapped_tokens = p.tokens;
        r.preemptions += 1;
        // Resume priority: preempted requests go ahead of fresh work, ordered
        // by arrival among themselves.
        let key = (r.arrival(), r.id);
        let reqs = &*self.requests;
        let pos = self
            .waiting
            .iter()
            .position(|&w| {
                let o = &reqs[w as usize];
                !matches!(o.stage, Stage::SwappingOut | Stage::SwappedOut)
                    || (o.arrival(), o.id) > key
            })
            .unwrap_or(self.waiting.len());
        self.waiting.insert(pos, victim);
        self.out.swap_outs.push((victim, bytes));
        Some(victim)
    }

    /// Schedules every resident request, earliest arrival first, preempting
    /// from the latest arrivals when a decode step cannot get a block.
    pub fn schedule_running_with_preemption(&mut self) {
        let ids: Vec<RequestId> = self.running.clone();
        for id in ids {
            if self.requests[id as usize].stage == Stage::SwappingOut {
                continue;
            }
            while let Err(Refusal::Insufficient) = self.schedule_running(id) {
                match self.preempt_latest() {
                    Some(v) if v != id => continue,
                    _ => break,
                }
            }
        }
    }

    /// Admits the waiting entry at `index`, subject to the batch limit and
    /// the admission gate.
    pub fn admit_at(&mut self, index: usize) -> Result<(), Refusal> {
        let id = self.waiting[index];
        let (kind, ready) = self.wait_kind(id);
        if !ready {
            return Err(Refusal::NotReady);
        }
        if !self.limits.max_batch_size.allows(self.batch_len() + 1) {
            return Err(Refusal::BatchFull);
        }
        let r = &self.requests[id as usize];
        let (tokens, ratio) = match kind {
            WaitKind::New => (r.prompt_len as u64, self.limits.max_mem_ratio),
            WaitKind::Handoff => (r.prompt_len as u64, self.limits.max_mem_ratio),
            WaitKind::Resume => (r.swapped_tokens, 1.0),
        };
        let needed = self.pool.blocks_for(tokens);
        let ceiling = (ratio * self.pool.total_blocks() as f64).floor() as u64;
        if needed > ceiling {
            self.waiting.remove(index);
            self.reject(id);
            return Err(Refusal::Rejected);
        }
        if !self.pool.admit(needed, ratio) {
            return Err(Refusal::MemoryRatio);
        }
        match kind {
            WaitKind::New => self.admit_new(index, id),
            WaitKind::Resume => {
                self.pool
                    .register(id)
                    .expect("swapped-out request not resident");
                self.pool.allocate(id, tokens).expect("registered");
                self.waiting.remove(index);
                let bytes = needed * self.pool.block_size() * self.kv_bytes_per_token;
                let r = &mut self.requests[id as usize];
                r.stage = Stage::SwappingIn;
                *self.inbound += 1;
                self.out.swap_ins.push((id, bytes));
                self.out.admitted.push(id);
                Ok(())
            }
            WaitKind::Handoff => {
                self.pool.register(id).expect("handoff not resident here");
                self.pool.allocate(id, tokens).expect("registered");
                self.waiting.remove(index);
                let r = &mut self.requests[id as usize];
                r.stage = Stage::Transferring;
                r.worker = Some(self.worker);
                *self.inbound += 1;
                self.out.handoffs.push(id);
                self.out.admitted.push(id);
                Ok(())
            }
        }
    }

    fn admit_new(&mut self, index: usize, id: RequestId) -> Result<(), Refusal> {
        let (conversation, prefix, prompt) = {
            let r = &self.requests[id as usize];
            (
                r.conversation_id,
                r.cached_context_len as u64,
                r.prompt_len as u64,
            )
        };
        // Peek the hit size without touching the cache; the lookup itself
        // happens once admission is certain.
        let mut hit = 0u64;
        if prefix > 0 {
            if let Some(cache) = self.cache.as_deref() {
                if cache
                    .cached_tokens(conversation)
                    .is_some_and(|t| t >= prefix)
                {
                    hit = prefix.min(prompt - 1);
                }
            }
        }
        let chunk = self.take_budget(prompt - hit).ok_or(Refusal::TokenBudget)?;
        self.pool.register(id).expect("new request not resident");
        match self.pool.allocate(id, hit + chunk).expect("registered") {
            Allocation::Granted(_) => {}
            Allocation::Insufficient { .. } => {
                self.pool.release(id).expect("registered");
                self.give_back_budget(chunk);
                return Err(Refusal::Insufficient);
            }
        }
        let mut served = 0u64;
        if let (true, Some(cache)) = (prefix > 0, self.cache.as_deref_mut()) {
            let want = if hit > 0 { hit } else { prefix };
            match cache.lookup(conversation, want, self.now) {
                CacheLookup::Hit {
                    tokens,
                    fetch_delay,
                    ..
                } => {
                    served = tokens;
                    self.out.fetch_delay += fetch_delay;
                    self.out.cache_hits += 1;
                }
                CacheLookup::Miss => {}
            }
        }
        debug_assert_eq!(served, hit, "peeked entry must hit");
        self.waiting.remove(index);
        let r = &mut self.requests[id as usize];
        r.stage = Stage::Prefilling;
        r.worker = Some(self.worker);
        r.prefilled = served as u32;
        r.cache_hit_tokens = served as u32;
        self.out.plan.prefill.push(PrefillEntry {
            request: id,
            tokens: chunk as u32,
            context_before: served as u32,
        });
        self.scheduled.insert(id);
        self.out.admitted.push(id);
        self.insert_running(id);
        Ok(())
    }

    /// Admits waiting entries of the given kinds from the head of the queue
    /// until one is refused. Entries whose swap-out is still in flight, or
    /// of other kinds, are skipped.
    pub fn admit_fcfs(&mut self, kinds: &[WaitKind]) -> usize {
        let mut admitted = 0;
        let mut i = 0;
        while i < self.waiting.len() {
            let (kind, ready) = self.wait_kind(self.waiting[i]);
            if !ready || !kinds.contains(&kind) {
                i += 1;
                continue;
            }
            match self.admit_at(i) {
                Ok(()) => admitted += 1,
                Err(Refusal::Rejected) => {}
                Err(_) => break,
            }
        }
        admitted
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Routing {
    KeepLocal,
    ReturnToGlobal,
}

pub struct BreakpointCtx<'a> {
    pub request: &'a Request,
    pub role: WorkerRole,
    pub breakpoint: &'a Breakpoint,
    /// The request's prefill finished in the iteration that just ended.
    pub prefill_completed: bool,
}

pub trait LocalPolicy: Send {
    fn name(&self) -> &'static str;

    fn form_batch(&mut self, batch: &mut BatchBuilder<'_>);

    fn on_breakpoint(&mut self, _ctx: &BreakpointCtx<'_>) -> Routing {
        Routing::KeepLocal
    }
}

/// Re-forms the batch at every iteration boundary.
#[derive(Debug, Default)]
pub struct ContinuousBatching;

impl LocalPolicy for ContinuousBatching {
    fn name(&self) -> &'static str {
        "continuous"
    }

    fn form_batch(&mut self, b: &mut BatchBuilder<'_>) {
        b.schedule_running_with_preemption();
        b.admit_fcfs(&[WaitKind::Resume, WaitKind::New]);
    }
}

/// Admits a new batch only once the previous one has fully drained.
#[derive(Debug, Default)]
pub struct StaticBatching;

impl LocalPolicy for StaticBatching {
    fn name(&self) -> &'static str {
        "static"
    }

    fn form_batch(&mut self, b: &mut BatchBuilder<'_>) {
        if b.batch_len() == 0 {
            b.admit_fcfs(&[WaitKind::Resume, WaitKind::New]);
        } else {
            b.schedule_running_with_preemption();
        }
    }
}

/// Prefill and decode on separate workers. Prefill workers hand requests
/// back to the global scheduler at the end of prefill; decode workers pull
/// the KV cache in before decoding.
#[derive(Debug, Default)]
pub struct Disaggregated;

impl LocalPolicy for Disaggregated {
    fn name(&self) -> &'static str {
        "disaggregated"
    }

    fn form_batch(&mut self, b: &mut BatchBuilder<'_>) {
        b.schedule_running_with_preemption();
        match b.role() {
            WorkerRole::Prefill => b.admit_fcfs(&[WaitKind::New]),
            WorkerRole::Decode => b.admit_fcfs(&[WaitKind::Resume, WaitKind::Handoff]),
            WorkerRole::Unified => b.admit_fcfs(&[WaitKind::Resume, WaitKind::New]),
        };
    }

    fn on_breakpoint(&mut self, ctx: &BreakpointCtx<'_>) -> Routing {
        let end = ctx.breakpoint.position == BreakpointPosition::EndOfIteration;
        if ctx.role == WorkerRole::Prefill && end && ctx.prefill_completed {
            Routing::ReturnToGlobal
        } else {
            Routing::KeepLocal
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispatchKind {
    New,
    Handoff,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerView {
    pub id: usize,
    pub role: WorkerRole,
    pub hardware: String,
    /// Requests assigned and not yet finished or handed off.
    pub outstanding: usize,
    pub queue_depth: usize,
    pub utilization: f64,
}

pub trait GlobalPolicy: Send {
    fn name(&self) -> &'static str;

    /// Picks a worker id from `workers` (already filtered to eligible ones,
    /// never empty).
    fn dispatch(&mut self, request: &Request, kind: DispatchKind, workers: &[WorkerView]) -> usize;
}

#[derive(Debug, Default)]
pub struct RoundRobin {
    next: [usize; 2],
}

impl GlobalPolicy for RoundRobin {
    fn name(&self) -> &'static str {
        "round-robin"
    }

    fn dispatch(&mut self, _: &Request, kind: DispatchKind, workers: &[WorkerView]) -> usize {
        let slot = &mut self.next[kind as usize];
        let w = workers[*slot % workers.len()].id;
        *slot += 1;
        w
    }
}

/// Fewest outstanding requests; ties go to the lowest worker id.
#[derive(Debug, Default)]
pub struct LeastOutstanding;

impl GlobalPolicy for LeastOutstanding {
    fn name(&self) -> &'static str {
        "least-outstanding"
    }

    fn dispatch(&mut self, _: &Request, _: DispatchKind, workers: &[WorkerView]) -> usize {
        workers
            .iter()
            .min_by_key(|w| (w.outstanding, w.id))
            .expect("non-empty")
            .id
    }
}

/// Lowest KV-cache utilization; ties by outstanding count, then worker id.
#[derive(Debug, Default)]
pub struct LeastMemory;

impl GlobalPolicy for LeastMemory {
    fn name(&self) -> &'static str {
        "least-memory"
    }

    fn dispatch(&mut self, _: &Request, _: DispatchKind, workers: &[WorkerView]) -> usize {
        workers
            .iter()
            .min_by(|a, b| {
                a.utilization
                    .total_cmp(&b.utilization)
                    .then(a.outstanding.cmp(&b.outstanding))
                    .then(a.id.cmp(&b.id))
            })
            .expect("non-empty")
            .id
    }
}

pub type LocalFactory = fn() -> Box<dyn LocalPolicy>;
pub type GlobalFactory = fn() -> Box<dyn GlobalPolicy>;

#[derive(Clone)]
pub struct PolicyRegistry {
    local: BTreeMap<String, LocalFactory>,
    global: BTreeMap<String, GlobalFactory>,
}

impl Default for PolicyRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PolicyRegistry {
    pub fn empty() -> Self {
        Self {
            local: BTreeMap::new(),
            global: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register_local("continuous", || Box::new(ContinuousBatching));
        r.register_local("static", || Box::new(StaticBatching));
        r.register_local("disaggregated", || Box::new(Disaggregated));
        r.register_global("round-robin", || Box::<RoundRobin>::default());
        r.register_global("least-outstanding", || Box::new(LeastOutstanding));
        r.register_global("least-memory", || Box::new(LeastMemory));
        r
    }

    pub fn register_local(&mut self, name: &str, f: LocalFactory) {
        self.local.insert(name.to_string(), f);
    }

    pub fn register_global(&mut self, name: &str, f: GlobalFactory) {
        self.global.insert(name.to_string(), f);
    }

    pub fn local(&self, name: &str) -> Option<Box<dyn LocalPolicy>> {
        self.local.get(name).map(|f| f())
    }

    pub fn global(&self, name: &str) -> Option<Box<dyn GlobalPolicy>> {
        self.global.get(name).map(|f| f())
    }

    pub fn local_names(&self) -> Vec<&str> {
        self.local.keys().map(String::as_str).collect()
    }

    pub fn global_names(&self) -> Vec<&str> {
        self.global.keys().map(String::as_str).collect()
    }
}
