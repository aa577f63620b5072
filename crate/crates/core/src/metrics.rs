//! Per-request records, latency statistics, SLO goodput and file export.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;
use thiserror::Error;

use crate::request::{Request, RequestState};
use crate::sched::WorkerRole;
use crate::sim::{CacheStats, FootprintSample, RunReport, TransferKind, WorkerInfo};
use crate::time::{fmt_secs, SimDuration, SimTime};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("percentile of an empty set")]
    Empty,
    #[error("percentile must be in [0, 100], got {0}")]
    Range(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SloSpec {
    #[serde(default = "default_ttft")]
    pub ttft_s: f64,
    #[serde(default = "default_mtpot")]
    pub mtpot_s: f64,
}

fn default_ttft() -> f64 {
    15.0
}

fn default_mtpot() -> f64 {
    0.3
}

impl Default for SloSpec {
    fn default() -> Self {
        Self {
            ttft_s: default_ttft(),
            mtpot_s: default_mtpot(),
        }
    }
}

impl SloSpec {
    pub fn ttft(&self) -> SimDuration {
        SimDuration::from_secs_f64(self.ttft_s)
    }

    pub fn mtpot(&self) -> SimDuration {
        SimDuration::from_secs_f64(self.mtpot_s)
    }
}

/// Nearest rank: the `ceil(p/100 * n)`-th smallest value; `p = 0` gives the
/// minimum.
pub fn percentile<T: Copy + Ord>(values: &[T], p: f64) -> Result<T, MetricsError> {
    if !(0.0..=100.0).contains(&p) {
        return Err(MetricsError::Range(p));
    }
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    Ok(v[nearest_rank(v.len(), p) - 1])
}

fn nearest_rank(n: usize, p: f64) -> usize {
    ((p * n as f64 / 100.0).ceil() as usize).clamp(1, n)
}

fn pick(sorted: &[u64], p: f64) -> u64 {
    sorted[nearest_rank(sorted.len(), p) - 1]
}

/// One row of `requests.csv`. Durations are nanoseconds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestRecord {
    pub id: u64,
    pub conversation_id: u64,
    pub round_index: u32,
    pub state: RequestState,
    pub arrival: Option<SimTime>,
    pub prompt_len: u32,
    pub output_len: u32,
    pub cached_context_len: u32,
    pub cache_hit_tokens: u32,
    pub generated: u32,
    pub first_token: Option<SimTime>,
    pub finish: Option<SimTime>,
    pub ttft: Option<u64>,
    pub e2e: Option<u64>,
    /// `e2e / output_len`, rounded half-up to whole nanoseconds.
    pub normalized_latency: Option<u64>,
    /// Largest gap between consecutive tokens, first-token gap excluded.
    pub max_inter_token: Option<u64>,
    pub preemptions: u32,
    pub prefill_worker: Option<usize>,
    pub decode_worker: Option<usize>,
    pub handoff_done: Option<SimTime>,
    pub first_decode_start: Option<SimTime>,
}

impl RequestRecord {
    pub fn from_request(r: &Request) -> Self {
        let finished = r.state() == RequestState::Finished;
        let arrival = r.arrival_time;
        let ttft = match (arrival, r.tokens.first) {
            (Some(a), Some(f)) => Some((f - a).as_nanos()),
            _ => None,
        };
        let e2e = match (arrival, r.tokens.last) {
            (Some(a), Some(l)) if finished => Some((l - a).as_nanos()),
            _ => None,
        };
        let out = r.output_len as u64;
        Self {
            id: r.id,
            conversation_id: r.conversation_id,
            round_index: r.round_index,
            state: r.state(),
            arrival,
            prompt_len: r.prompt_len,
            output_len: r.output_len,
            cached_context_len: r.cached_context_len,
            cache_hit_tokens: r.cache_hit_tokens,
            generated: r.generated,
            first_token: r.tokens.first,
            finish: r.finish_time.filter(|_| finished),
            ttft,
            e2e,
            normalized_latency: e2e.map(|e| (2 * e + out) / (2 * out)),
            max_inter_token: r.tokens.first.map(|_| r.tokens.max_gap.as_nanos()),
            preemptions: r.preemptions,
            prefill_worker: r.prefill_worker,
            decode_worker: r.decode_workers.last().copied(),
            handoff_done: r.handoff_done,
            first_decode_start: r.first_decode_start,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.state == RequestState::Finished
    }

    pub fn meets(&self, slo: &SloSpec, variant: SloVariant) -> bool {
        if !self.is_finished() {
            return false;
        }
        let gap_ok = self.max_inter_token.unwrap_or(0) <= slo.mtpot().as_nanos();
        match variant {
            SloVariant::DecodeOnly => gap_ok,
            SloVariant::Both => gap_ok && self.ttft.unwrap_or(u64::MAX) <= slo.ttft().as_nanos(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SloVariant {
    /// mTPOT only.
    DecodeOnly,
    /// TTFT and mTPOT.
    Both,
}

/// First arrival to last completion.
pub fn span(records: &[RequestRecord]) -> SimDuration {
    let first = records.iter().filter_map(|r| r.arrival).min();
    let last = records.iter().filter_map(|r| r.finish).max();
    match (first, last) {
        (Some(a), Some(b)) if b > a => b - a,
        _ => SimDuration::ZERO,
    }
}

/// SLO-compliant finished requests per second over [`span`].
pub fn goodput(records: &[RequestRecord], slo: &SloSpec, variant: SloVariant) -> f64 {
    let s = span(records).as_secs_f64();
    if s == 0.0 {
        return 0.0;
    }
    records.iter().filter(|r| r.meets(slo, variant)).count() as f64 / s
}

/// Time-weighted mean utilization of one worker over `[from, to)`, treating
/// the samples as a step function (zero before the first sample).
pub fn time_averaged_utilization(
    samples: &[FootprintSample],
    worker: usize,
    from: SimTime,
    to: SimTime,
) -> f64 {
    if to <= from {
        return 0.0;
    }
    let mut level = 0.0;
    let mut t = from;
    let mut area = 0.0;
    for s in samples.iter().filter(|s| s.worker == worker) {
        if s.time <= from {
            level = s.utilization;
            continue;
        }
        if s.time >= to {
            break;
        }
        area += level * (s.time - t).as_nanos() as f64;
        t = s.time;
        level = s.utilization;
    }
    area += level * (to - t).as_nanos() as f64;
    area / (to - from).as_nanos() as f64
}

/// Mean of [`time_averaged_utilization`] over every worker with `role`.
pub fn role_utilization(report: &RunReport, role: WorkerRole, from: SimTime, to: SimTime) -> f64 {
    let ws: Vec<usize> = report
        .workers
        .iter()
        .filter(|w| w.role == role)
        .map(|w| w.id)
        .collect();
    if ws.is_empty() {
        return 0.0;
    }
    let total: f64 = ws
        .iter()
        .map(|&w| time_averaged_utilization(&report.log.footprint, w, from, to))
        .sum();
    total / ws.len() as f64
}

/// Seconds with nine decimals, emitted as a bare JSON number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Secs(pub u64);

impl Serialize for Secs {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        RawValue::from_string(fmt_secs(self.0))
            .map_err(serde::ser::Error::custom)?
            .serialize(s)
    }
}

/// Fixed nine-decimal float, emitted as a bare JSON number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fixed(pub f64);

impl Serialize for Fixed {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        RawValue::from_string(format!("{:.9}", self.0))
            .map_err(serde::ser::Error::custom)?
            .serialize(s)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean: Secs,
    pub p50: Secs,
    pub p90: Secs,
    pub p99: Secs,
    pub max: Secs,
}

impl LatencyStats {
    pub fn from_ns(values: &[u64]) -> Self {
        if values.is_empty() {
            return Self {
                count: 0,
                mean: Secs(0),
                p50: Secs(0),
                p90: Secs(0),
                p99: Secs(0),
                max: Secs(0),
            };
        }
        let mut v = values.to_vec();
        v.sort_unstable();
        let sum: u128 = v.iter().map(|&x| x as u128).sum();
        let n = v.len() as u128;
        Self {
            count: v.len(),
            mean: Secs(((2 * sum + n) / (2 * n)) as u64),
            p50: Secs(pick(&v, 50.0)),
            p90: Secs(pick(&v, 90.0)),
            p99: Secs(pick(&v, 99.0)),
            max: Secs(*v.last().expect("non-empty")),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Counts {
    pub generated: usize,
    pub finished: usize,
    pub rejected: usize,
    pub unfinished: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Goodput {
    pub both: Fixed,
    pub decode_only: Fixed,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TransferTotals {
    pub swap_out: u64,
    pub swap_in: u64,
    pub handoff: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub requests: Counts,
    pub sim_end_s: Secs,
    pub horizon_reached: bool,
    pub span_s: Secs,
    pub throughput_rps: Fixed,
    pub token_throughput: Fixed,
    pub ttft_s: LatencyStats,
    pub e2e_s: LatencyStats,
    pub normalized_latency_s: LatencyStats,
    pub max_inter_token_s: LatencyStats,
    pub slo: SloSpec,
    pub goodput_rps: Goodput,
    pub preemptions: u64,
    pub transfers: TransferTotals,
    pub prefill_tokens: u64,
    pub cache: Option<CacheStats>,
    pub workers: Vec<WorkerInfo>,
    pub events_dispatched: u64,
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub records: Vec<RequestRecord>,
    pub summary: Summary,
}

impl Analysis {
    pub fn goodput(&self, variant: SloVariant) -> f64 {
        goodput(&self.records, &self.summary.slo, variant)
    }

    pub fn finished(&self) -> impl Iterator<Item = &RequestRecord> {
        self.records.iter().filter(|r| r.is_finished())
    }

    pub fn values(&self, f: impl Fn(&RequestRecord) -> Option<u64>) -> Vec<u64> {
        self.finished().filter_map(f).collect()
    }
}

pub fn analyze(report: &RunReport, slo: &SloSpec) -> Analysis {
    let records: Vec<RequestRecord> = report
        .requests
        .iter()
        .map(RequestRecord::from_request)
        .collect();
    let finished: Vec<&RequestRecord> = records.iter().filter(|r| r.is_finished()).collect();
    let rejected = records
        .iter()
        .filter(|r| r.state == RequestState::Rejected)
        .count();
    let col = |f: fn(&RequestRecord) -> Option<u64>| -> Vec<u64> {
        finished.iter().filter_map(|r| f(r)).collect()
    };
    let sp = span(&records);
    let secs = sp.as_secs_f64();
    let per_sec = |x: f64| if secs > 0.0 { x / secs } else { 0.0 };
    let tokens: u64 = records.iter().map(|r| r.generated as u64).sum();
    let mut transfers = TransferTotals::default();
    for t in &report.log.transfers {
        match t.kind {
            TransferKind::SwapOut => transfers.swap_out += 1,
            TransferKind::SwapIn => transfers.swap_in += 1,
            TransferKind::Handoff => transfers.handoff += 1,
        }
        transfers.bytes += t.bytes;
    }
    let summary = Summary {
        requests: Counts {
            generated: records.len(),
            finished: finished.len(),
            rejected,
            unfinished: records.len() - finished.len() - rejected,
        },
        sim_end_s: Secs(report.end_time.as_nanos()),
        horizon_reached: report.horizon_reached,
        span_s: Secs(sp.as_nanos()),
        throughput_rps: Fixed(per_sec(finished.len() as f64)),
        token_throughput: Fixed(per_sec(tokens as f64)),
        ttft_s: LatencyStats::from_ns(&col(|r| r.ttft)),
        e2e_s: LatencyStats::from_ns(&col(|r| r.e2e)),
        normalized_latency_s: LatencyStats::from_ns(&col(|r| r.normalized_latency)),
        max_inter_token_s: LatencyStats::from_ns(&col(|r| r.max_inter_token)),
        slo: *slo,
        goodput_rps: Goodput {
            both: Fixed(goodput(&records, slo, SloVariant::Both)),
            decode_only: Fixed(goodput(&records, slo, SloVariant::DecodeOnly)),
        },
        preemptions: report.log.preemptions.len() as u64,
        transfers,
        prefill_tokens: report.prefill_tokens,
        cache: report.cache,
        workers: report.workers.clone(),
        events_dispatched: report.events.dispatched,
    };
    Analysis { records, summary }
}

fn opt_secs(t: Option<u64>) -> String {
    t.map(fmt_secs).unwrap_or_default()
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn state_name(s: RequestState) -> &'static str {
    match s {
        RequestState::Queued => "queued",
        RequestState::Prefilling => "prefilling",
        RequestState::Decoding => "decoding",
        RequestState::Preempted => "preempted",
        RequestState::Finished => "finished",
        RequestState::Rejected => "rejected",
    }
}

pub const REQUESTS_HEADER: &str = "id,conversation_id,round_index,state,arrival_s,prompt_len,output_len,cached_context_len,cache_hit_tokens,generated,first_token_s,finish_s,ttft_s,e2e_s,normalized_latency_s,max_inter_token_s,preemptions,prefill_worker,decode_worker,handoff_done_s,first_decode_start_s";
pub const FOOTPRINT_HEADER: &str = "time_s,worker,allocated_blocks,total_blocks,utilization";
pub const BATCHES_HEADER: &str =
    "worker,start_s,end_s,prefill_requests,prefill_tokens,decode_requests,fetch_delay_s";
pub const TRANSFERS_HEADER: &str = "kind,request,src,dst,bytes,start_s,end_s";
pub const PREEMPTIONS_HEADER: &str = "time_s,worker,request,tokens";
pub const CDF_HEADER: &str = "metric,value_s,fraction";

pub const EXPORT_FILES: [&str; 7] = [
    "requests.csv",
    "footprint.csv",
    "batches.csv",
    "transfers.csv",
    "preemptions.csv",
    "cdf.csv",
    "summary.json",
];

fn create(dir: &Path, name: &str) -> io::Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(dir.join(name))?))
}

/// Writes every export file into `dir` (created if missing).
pub fn export(report: &RunReport, analysis: &Analysis, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;

    let mut f = create(dir, "requests.csv")?;
    writeln!(f, "{REQUESTS_HEADER}")?;
    for r in &analysis.records {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.id,
            r.conversation_id,
            r.round_index,
            state_name(r.state),
            opt_secs(r.arrival.map(SimTime::as_nanos)),
            r.prompt_len,
            r.output_len,
            r.cached_context_len,
            r.cache_hit_tokens,
            r.generated,
            opt_secs(r.first_token.map(SimTime::as_nanos)),
            opt_secs(r.finish.map(SimTime::as_nanos)),
            opt_secs(r.ttft),
            opt_secs(r.e2e),
            opt_secs(r.normalized_latency),
            opt_secs(r.max_inter_token),
            r.preemptions,
            opt(r.prefill_worker),
            opt(r.decode_worker),
            opt_secs(r.handoff_done.map(SimTime::as_nanos)),
            opt_secs(r.first_decode_start.map(SimTime::as_nanos)),
        )?;
    }
    f.flush()?;

    let mut f = create(dir, "footprint.csv")?;
    writeln!(f, "{FOOTPRINT_HEADER}")?;
    for s in &report.log.footprint {
        writeln!(
            f,
            "{},{},{},{},{:.9}",
            fmt_secs(s.time.as_nanos()),
            s.worker,
            s.allocated_blocks,
            report.workers[s.worker].total_blocks,
            s.utilization
        )?;
    }
    f.flush()?;

    let mut f = create(dir, "batches.csv")?;
    writeln!(f, "{BATCHES_HEADER}")?;
    for b in &report.log.batches {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            b.worker,
            fmt_secs(b.start.as_nanos()),
            fmt_secs(b.end.as_nanos()),
            b.prefill_requests,
            b.prefill_tokens,
            b.decode_requests,
            fmt_secs(b.fetch_delay.as_nanos())
        )?;
    }
    f.flush()?;

    let mut f = create(dir, "transfers.csv")?;
    writeln!(f, "{TRANSFERS_HEADER}")?;
    for t in &report.log.transfers {
        let kind = match t.kind {
            TransferKind::SwapOut => "swap_out",
            TransferKind::SwapIn => "swap_in",
            TransferKind::Handoff => "handoff",
        };
        writeln!(
            f,
            "{kind},{},{},{},{},{},{}",
            t.request,
            t.src,
            t.dst,
            t.bytes,
            fmt_secs(t.start.as_nanos()),
            fmt_secs(t.end.as_nanos())
        )?;
    }
    f.flush()?;

    let mut f = create(dir, "preemptions.csv")?;
    writeln!(f, "{PREEMPTIONS_HEADER}")?;
    for p in &report.log.preemptions {
        writeln!(
            f,
            "{},{},{},{}",
            fmt_secs(p.time.as_nanos()),
            p.worker,
            p.request,
            p.tokens
        )?;
    }
    f.flush()?;

    let mut f = create(dir, "cdf.csv")?;
    writeln!(f, "{CDF_HEADER}")?;
    let metrics: [(&str, fn(&RequestRecord) -> Option<u64>); 3] = [
        ("ttft", |r| r.ttft),
        ("e2e", |r| r.e2e),
        ("normalized_latency", |r| r.normalized_latency),
    ];
    for (name, get) in metrics {
        let mut v = analysis.values(get);
        v.sort_unstable();
        let n = v.len();
        for (i, x) in v.iter().enumerate() {
            writeln!(
                f,
                "{name},{},{:.9}",
                fmt_secs(*x),
                (i + 1) as f64 / n as f64
            )?;
        }
    }
    f.flush()?;

    let mut f = create(dir, "summary.json")?;
    serde_json::to_writer_pretty(&mut f, &analysis.summary).map_err(io::Error::other)?;
    writeln!(f)?;
    f.flush()
}
