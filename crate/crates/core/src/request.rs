//! Runtime state of one inference request.

use serde::{Deserialize, Serialize};

use crate::memory::RequestId;
use crate::time::{SimDuration, SimTime};
use crate::workload::RequestSpec;

/// Externally visible lifecycle state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestState {
    Queued,
    Prefilling,
    Decoding,
    Preempted,
    Finished,
    Rejected,
}

/// Engine-internal stage; finer than [`RequestState`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Later round whose predecessor has not finished yet.
    NotArrived,
    /// In the global queue or a worker's wait queue, needing prefill.
    Waiting,
    Prefilling,
    /// Prefill done on a prefill worker; KV still there, waiting for a
    /// decode worker to take it.
    AwaitingHandoff,
    /// KV moving from the prefill worker to the decode worker.
    Transferring,
    Decoding,
    SwappingOut,
    SwappedOut,
    SwappingIn,
    Finished,
    Rejected,
}

impl Stage {
    pub fn state(self) -> RequestState {
        match self {
            Stage::NotArrived | Stage::Waiting => RequestState::Queued,
            Stage::Prefilling => RequestState::Prefilling,
            Stage::AwaitingHandoff | Stage::Transferring | Stage::Decoding => {
                RequestState::Decoding
            }
            Stage::SwappingOut | Stage::SwappedOut | Stage::SwappingIn => RequestState::Preempted,
            Stage::Finished => RequestState::Finished,
            Stage::Rejected => RequestState::Rejected,
        }
    }
}

/// Generated-token timestamps. Summary statistics are always kept; the full
/// list only when requested, since long runs produce millions of tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenTimeline {
    pub first: Option<SimTime>,
    pub last: Option<SimTime>,
    pub count: u32,
    /// Largest gap between consecutive tokens; the arrival-to-first-token
    /// gap is not included.
    pub max_gap: SimDuration,
    pub times: Option<Vec<SimTime>>,
}

impl TokenTimeline {
    pub fn recording() -> Self {
        Self {
            times: Some(Vec::new()),
            ..Self::default()
        }
    }

    pub fn push(&mut self, t: SimTime) {
        if let Some(last) = self.last {
            debug_assert!(t > last, "token times must strictly increase");
            self.max_gap = self.max_gap.max(t - last);
        } else {
            self.first = Some(t);
        }
        self.last = Some(t);
        self.count += 1;
        if let Some(v) = self.times.as_mut() {
            v.push(t);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Request {
    pub id: RequestId,
    pub conversation_id: u64,
    pub round_index: u32,
    pub arrival_time: Option<SimTime>,
    pub prompt_len: u32,
    pub output_len: u32,
    pub cached_context_len: u32,
    pub stage: Stage,
    /// Prompt tokens whose KV is on the device (including cache hits).
    pub prefilled: u32,
    /// Prompt tokens served from the memory cache.
    pub cache_hit_tokens: u32,
    pub generated: u32,
    /// KV tokens held when swapped out.
    pub swapped_tokens: u64,
    pub tokens: TokenTimeline,
    pub preemptions: u32,
    /// Worker currently holding (or about to hold) this request's KV.
    pub worker: Option<usize>,
    pub prefill_worker: Option<usize>,
    /// Distinct decode workers in the order they were used.
    pub decode_workers: Vec<usize>,
    pub first_decode_start: Option<SimTime>,
    pub handoff_done: Option<SimTime>,
    pub handoffs: u32,
    /// End-of-iteration boundaries this request passed through.
    pub iteration_boundaries: u32,
    pub finish_time: Option<SimTime>,
}

impl Request {
    pub fn from_spec(spec: &RequestSpec, record_tokens: bool) -> Self {
        Self {
            id: spec.id,
            conversation_id: spec.conversation_id,
            round_index: spec.round_index,
            arrival_time: None,
            prompt_len: spec.prompt_len,
            output_len: spec.output_len,
            cached_context_len: spec.cached_context_len,
            stage: Stage::NotArrived,
            prefilled: 0,
            cache_hit_tokens: 0,
            generated: 0,
            swapped_tokens: 0,
            tokens: if record_tokens {
                TokenTimeline::recording()
            } else {
                TokenTimeline::default()
            },
            preemptions: 0,
            worker: None,
            prefill_worker: None,
            decode_workers: Vec::new(),
            first_decode_start: None,
            handoff_done: None,
            handoffs: 0,
            iteration_boundaries: 0,
            finish_time: None,
        }
    }

    pub fn state(&self) -> RequestState {
        self.stage.state()
    }

    /// Arrival time, or `SimTime::MAX` for rounds that have not arrived.
    pub fn arrival(&self) -> SimTime {
        self.arrival_time.unwrap_or(SimTime::MAX)
    }

    pub fn prefill_done(&self) -> bool {
        self.prefilled >= self.prompt_len
    }

    pub fn is_done(&self) -> bool {
        matches!(self.stage, Stage::Finished | Stage::Rejected)
    }
}
