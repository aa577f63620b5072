//! Data-movement latency between devices and the host.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{SimDuration, SimTime};

#[derive(Debug, Error, PartialEq)]
pub enum CommError {
    #[error("link bandwidth must be positive")]
    Bandwidth,
    #[error("preload buffer must be positive")]
    EmptyBuffer,
    #[error("chunk of {chunk} bytes does not fit a {buffer}-byte preload buffer")]
    ChunkExceedsBuffer { chunk: u64, buffer: u64 },
    #[error("chunk size must be positive")]
    ZeroChunk,
    #[error("link {0} is not in preload-buffer mode")]
    NotPreload(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Host,
    Device(usize),
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Host => write!(f, "host"),
            Endpoint::Device(i) => write!(f, "w{i}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LinkMode {
    Sequential,
    PreloadBuffer { buffer_bytes: u64, chunk_bytes: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub src: Endpoint,
    pub dst: Endpoint,
    /// Bytes/s.
    pub bandwidth: f64,
    pub base_latency: SimDuration,
    pub mode: LinkMode,
}

/// PCIe 4.0 x16 class device<->host bandwidth (uncalibrated default).
pub const DEFAULT_HOST_BANDWIDTH: f64 = 32e9;
/// NVLink class device<->device bandwidth (uncalibrated default).
pub const DEFAULT_PEER_BANDWIDTH: f64 = 200e9;
pub const DEFAULT_HOST_LATENCY: SimDuration = SimDuration::from_micros(2);
pub const DEFAULT_PEER_LATENCY: SimDuration = SimDuration::from_micros(1);

impl Link {
    pub fn sequential(src: Endpoint, dst: Endpoint, bandwidth: f64, latency: SimDuration) -> Self {
        Self {
            src,
            dst,
            bandwidth,
            base_latency: latency,
            mode: LinkMode::Sequential,
        }
    }

    pub fn validate(&self) -> Result<(), CommError> {
        if !(self.bandwidth > 0.0) {
            return Err(CommError::Bandwidth);
        }
        if let LinkMode::PreloadBuffer {
            buffer_bytes,
            chunk_bytes,
        } = self.mode
        {
            if buffer_bytes == 0 {
                return Err(CommError::EmptyBuffer);
            }
            if chunk_bytes == 0 {
                return Err(CommError::ZeroChunk);
            }
            if chunk_bytes > buffer_bytes {
                return Err(CommError::ChunkExceedsBuffer {
                    chunk: chunk_bytes,
                    buffer: buffer_bytes,
                });
            }
        }
        Ok(())
    }

    fn wire_time(&self, bytes: u64) -> SimDuration {
        SimDuration::from_secs_f64(bytes as f64 / self.bandwidth)
    }

    /// Unloaded single-stream latency: `base_latency + bytes / bandwidth`.
    pub fn transfer_time(&self, bytes: u64) -> SimDuration {
        self.base_latency + self.wire_time(bytes)
    }

    /// Completion time of a chunked transfer through a preload buffer whose
    /// consumer drains chunks at `consumer_rate` bytes/s (`None` means
    /// instantly). The producer sends chunk `k` only once a buffer slot is
    /// free, i.e. once chunk `k - slots` has been consumed. `base_latency` is
    /// paid once up front. Completion is the arrival of the last chunk.
    pub fn pipelined_transfer(
        &self,
        start: SimTime,
        bytes: u64,
        consumer_rate: Option<f64>,
    ) -> Result<SimTime, CommError> {
        let LinkMode::PreloadBuffer {
            buffer_bytes,
            chunk_bytes,
        } = self.mode
        else {
            return Err(CommError::NotPreload(format!("{}->{}", self.src, self.dst)));
        };
        self.validate()?;
        let plan = ChunkPlan::new(bytes, chunk_bytes, buffer_bytes);
        let consume = |size: u64| match consumer_rate {
            Some(rate) => SimDuration::from_secs_f64(size as f64 / rate),
            None => SimDuration::ZERO,
        };
        Ok(pipeline_completion(
            start,
            self.base_latency,
            &plan,
            |size| self.wire_time(size),
            consume,
        ))
    }

    /// Store-then-load baseline: each chunk is sent and consumed before the
    /// next one starts.
    pub fn store_then_load(
        &self,
        start: SimTime,
        bytes: u64,
        chunk_bytes: u64,
        consumer_rate: Option<f64>,
    ) -> SimTime {
        let plan = ChunkPlan::new(bytes, chunk_bytes.max(1), chunk_bytes.max(1));
        let mut t = start + self.base_latency;
        let mut arrive = t;
        for &size in &plan.chunks {
            arrive = t + self.wire_time(size);
            let consumed = match consumer_rate {
                Some(rate) => SimDuration::from_secs_f64(size as f64 / rate),
                None => SimDuration::ZERO,
            };
            t = arrive + consumed;
        }
        arrive
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    pub chunks: Vec<u64>,
    pub slots: usize,
}

impl ChunkPlan {
    pub fn new(bytes: u64, chunk_bytes: u64, buffer_bytes: u64) -> Self {
        let mut chunks = Vec::new();
        let mut left = bytes;
        while left > 0 {
            let c = left.min(chunk_bytes);
            chunks.push(c);
            left -= c;
        }
        Self {
            chunks,
            slots: ((buffer_bytes / chunk_bytes) as usize).max(1),
        }
    }
}

fn pipeline_completion(
    start: SimTime,
    latency: SimDuration,
    plan: &ChunkPlan,
    send: impl Fn(u64) -> SimDuration,
    consume: impl Fn(u64) -> SimDuration,
) -> SimTime {
    // Latency is paid once, as setup before the first byte moves.
    let open = start + latency;
    let mut consume_end: Vec<SimTime> = Vec::with_capacity(plan.chunks.len());
    let mut arrive = open;
    for (k, &size) in plan.chunks.iter().enumerate() {
        let slot_free = if k >= plan.slots {
            consume_end[k - plan.slots]
        } else {
            open
        };
        arrive = arrive.max(slot_free) + send(size);
        let prev_consumed = consume_end.last().copied().unwrap_or(open);
        consume_end.push(arrive.max(prev_consumed) + consume(size));
    }
    arrive
}

/// A link as a simulation resource: transfers serialize FIFO in request
/// order.
#[derive(Debug, Clone)]
pub struct LinkState {
    pub link: Link,
    busy_until: SimTime,
    pub transfers: u64,
    pub bytes: u64,
}

impl LinkState {
    pub fn new(link: Link) -> Self {
        Self {
            link,
            busy_until: SimTime::ZERO,
            transfers: 0,
            bytes: 0,
        }
    }

    /// Reserves the link for `bytes` starting no earlier than `now`.
    /// `consumer_rate` only matters in preload-buffer mode. Returns the
    /// `(start, end)` of the transfer.
    pub fn reserve(
        &mut self,
        now: SimTime,
        bytes: u64,
        consumer_rate: Option<f64>,
    ) -> (SimTime, SimTime) {
        let start = now.max(self.busy_until);
        let end = match self.link.mode {
            LinkMode::Sequential => start + self.link.transfer_time(bytes),
            LinkMode::PreloadBuffer { .. } => self
                .link
                .pipelined_transfer(start, bytes, consumer_rate)
                .expect("link validated at construction"),
        };
        self.busy_until = end;
        self.transfers += 1;
        self.bytes += bytes;
        (start, end)
    }

    pub fn busy_until(&self) -> SimTime {
        self.busy_until
    }
}
