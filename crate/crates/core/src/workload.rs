//! Request-stream generation: synthetic distributions, trace replay and
//! multi-round conversations.
//!
//! Randomness comes from ChaCha8 with one root seed. Each quantity draws
//! from its own ChaCha stream (fixed stream ids below), so adding a new
//! stream never perturbs the existing ones.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{SimDuration, SimTime};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("cannot read trace file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("trace line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("trace file contains no records")]
    EmptyTrace,
    #[error("num_requests must be at least 1")]
    NoRequests,
    #[error("qps must be positive, got {0}")]
    Qps(f64),
    #[error("invalid distribution for {field}: {msg}")]
    Distribution { field: &'static str, msg: String },
    #[error("`empirical` lengths need a trace source")]
    EmpiricalWithoutTrace,
}

const STREAM_ARRIVALS: u64 = 0;
const STREAM_PROMPT: u64 = 1;
const STREAM_OUTPUT: u64 = 2;
const STREAM_ROUNDS: u64 = 3;
const STREAM_THINK: u64 = 4;
const STREAM_TRACE: u64 = 5;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LengthDist {
    Fixed(u32),
    Uniform([u32; 2]),
    Poisson(f64),
    /// Taken from the sampled trace record.
    Empirical,
}

impl LengthDist {
    fn validate(&self, field: &'static str) -> Result<(), WorkloadError> {
        let bad = |msg: String| Err(WorkloadError::Distribution { field, msg });
        match *self {
            LengthDist::Fixed(0) => bad("fixed length must be >= 1".into()),
            LengthDist::Uniform([lo, hi]) if lo == 0 || lo > hi => bad(format!(
                "uniform bounds [{lo}, {hi}] must satisfy 1 <= lo <= hi"
            )),
            LengthDist::Poisson(mean) if !(mean > 0.0 && mean.is_finite()) => {
                bad(format!("poisson mean {mean} must be positive"))
            }
            _ => Ok(()),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, traced: u32) -> u32 {
        match *self {
            LengthDist::Fixed(n) => n,
            LengthDist::Uniform([lo, hi]) => rng.random_range(lo..=hi),
            LengthDist::Poisson(mean) => {
                let d = Poisson::new(mean).expect("validated mean");
                let x: f64 = d.sample(rng);
                (x as u32).max(1)
            }
            LengthDist::Empirical => traced,
        }
    }
}

/// Number of rounds per conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RoundsDist {
    Single,
    /// Half the conversations have one round, the rest uniform over 2..=7.
    Chat,
    Fixed(u32),
    Uniform([u32; 2]),
}

impl RoundsDist {
    fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |msg: String| {
            Err(WorkloadError::Distribution {
                field: "rounds",
                msg,
            })
        };
        match *self {
            RoundsDist::Fixed(0) => bad("fixed round count must be >= 1".into()),
            RoundsDist::Uniform([lo, hi]) if lo == 0 || lo > hi => bad(format!(
                "uniform bounds [{lo}, {hi}] must satisfy 1 <= lo <= hi"
            )),
            _ => Ok(()),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> u32 {
        match *self {
            RoundsDist::Single => 1,
            RoundsDist::Chat => {
                if rng.random_bool(0.5) {
                    1
                } else {
                    rng.random_range(2..=7)
                }
            }
            RoundsDist::Fixed(n) => n,
            RoundsDist::Uniform([lo, hi]) => rng.random_range(lo..=hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Source {
    Synthetic,
    Trace(PathBuf),
}

fn default_rounds() -> RoundsDist {
    RoundsDist::Single
}

fn default_think_time() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub source: Source,
    /// New conversations per second (each conversation's first round).
    pub qps: f64,
    pub num_requests: u64,
    pub prompt_len: LengthDist,
    pub output_len: LengthDist,
    #[serde(default = "default_rounds")]
    pub rounds: RoundsDist,
    /// Mean of the exponential gap between a round finishing and the next
    /// round arriving.
    #[serde(default = "default_think_time")]
    pub think_time_s: f64,
    /// Overrides the run seed for the workload streams.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl WorkloadSpec {
    pub fn synthetic(qps: f64, num_requests: u64, prompt: LengthDist, output: LengthDist) -> Self {
        Self {
            source: Source::Synthetic,
            qps,
            num_requests,
            prompt_len: prompt,
            output_len: output,
            rounds: RoundsDist::Single,
            think_time_s: default_think_time(),
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if !(self.qps > 0.0 && self.qps.is_finite()) {
            return Err(WorkloadError::Qps(self.qps));
        }
        if self.num_requests == 0 {
            return Err(WorkloadError::NoRequests);
        }
        self.prompt_len.validate("prompt_len")?;
        self.output_len.validate("output_len")?;
        self.rounds.validate()?;
        if !(self.think_time_s > 0.0 && self.think_time_s.is_finite()) {
            return Err(WorkloadError::Distribution {
                field: "think_time_s",
                msg: format!("mean {} must be positive", self.think_time_s),
            });
        }
        let empirical = matches!(self.prompt_len, LengthDist::Empirical)
            || matches!(self.output_len, LengthDist::Empirical);
        if empirical && self.source == Source::Synthetic {
            return Err(WorkloadError::EmpiricalWithoutTrace);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arrival {
    At(SimTime),
    /// Think time after the previous round of the conversation finishes.
    AfterPrevious(SimDuration),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestSpec {
    pub id: u64,
    pub conversation_id: u64,
    pub round_index: u32,
    pub arrival: Arrival,
    pub prompt_len: u32,
    pub output_len: u32,
    /// Prior-round context contained in `prompt_len`.
    pub cached_context_len: u32,
}

/// Parses `prompt_len,output_len` records. A first line that does not parse
/// as numbers is treated as a header.
pub fn parse_trace(text: &str) -> Result<Vec<(u32, u32)>, WorkloadError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(WorkloadError::Malformed {
                line: lineno,
                msg: format!("expected 2 comma-separated fields, found {}", fields.len()),
            });
        }
        let parsed = (fields[0].parse::<u32>(), fields[1].parse::<u32>());
        match parsed {
            (Ok(p), Ok(o)) => {
                if p == 0 || o == 0 {
                    return Err(WorkloadError::Malformed {
                        line: lineno,
                        msg: "token counts must be >= 1".into(),
                    });
                }
                out.push((p, o));
            }
            _ if out.is_empty() && lineno == 1 => continue,
            _ => {
                return Err(WorkloadError::Malformed {
                    line: lineno,
                    msg: format!("cannot parse `{line}` as two token counts"),
                })
            }
        }
    }
    if out.is_empty() {
        return Err(WorkloadError::EmptyTrace);
    }
    Ok(out)
}

pub fn load_trace(path: &Path) -> Result<Vec<(u32, u32)>, WorkloadError> {
    let text = std::fs::read_to_string(path).map_err(|source| WorkloadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_trace(&text)
}

pub fn generate(spec: &WorkloadSpec, run_seed: u64) -> Result<Vec<RequestSpec>, WorkloadError> {
    spec.validate()?;
    let trace = match &spec.source {
        Source::Synthetic => None,
        Source::Trace(path) => Some(load_trace(path)?),
    };
    Ok(generate_with_trace(spec, run_seed, trace.as_deref()))
}

/// Generation given an already-loaded trace (used by tests and sweeps).
pub fn generate_with_trace(
    spec: &WorkloadSpec,
    run_seed: u64,
    trace: Option<&[(u32, u32)]>,
) -> Vec<RequestSpec> {
    let seed = spec.seed.unwrap_or(run_seed);
    let mut arrivals = stream(seed, STREAM_ARRIVALS);
    let mut prompts = stream(seed, STREAM_PROMPT);
    let mut outputs = stream(seed, STREAM_OUTPUT);
    let mut rounds_rng = stream(seed, STREAM_ROUNDS);
    let mut think = stream(seed, STREAM_THINK);
    let mut picks = stream(seed, STREAM_TRACE);

    let gap = Exp::new(spec.qps).expect("validated qps");
    let think_gap = Exp::new(1.0 / spec.think_time_s).expect("validated think time");

    let mut out = Vec::with_capacity(spec.num_requests as usize);
    let mut clock = SimTime::ZERO;
    let mut conversation = 0u64;
    while (out.len() as u64) < spec.num_requests {
        let g: f64 = gap.sample(&mut arrivals);
        clock += SimDuration::from_secs_f64(g);
        let rounds = spec.rounds.sample(&mut rounds_rng);
        let mut context: u32 = 0;
        for round in 0..rounds {
            if out.len() as u64 == spec.num_requests {
                break;
            }
            let (tp, to) = match trace {
                Some(t) => t[picks.random_range(0..t.len())],
                None => (0, 0),
            };
            let turn = spec.prompt_len.sample(&mut prompts, tp);
            let output_len = spec.output_len.sample(&mut outputs, to);
            let arrival = if round == 0 {
                Arrival::At(clock)
            } else {
                let t: f64 = think_gap.sample(&mut think);
                Arrival::AfterPrevious(SimDuration::from_secs_f64(t))
            };
            let prompt_len = context.saturating_add(turn);
            out.push(RequestSpec {
                id: out.len() as u64,
                conversation_id: conversation,
                round_index: round,
                arrival,
                prompt_len,
                output_len,
                cached_context_len: context,
            });
            context = prompt_len.saturating_add(output_len);
        }
        conversation += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(qps: f64, n: u64) -> WorkloadSpec {
        WorkloadSpec::synthetic(
            qps,
            n,
            LengthDist::Uniform([8, 64]),
            LengthDist::Poisson(20.0),
        )
    }

    fn arrivals(reqs: &[RequestSpec]) -> Vec<SimTime> {
        reqs.iter()
            .filter_map(|r| match r.arrival {
                Arrival::At(t) => Some(t),
                Arrival::AfterPrevious(_) => None,
            })
            .collect()
    }

    #[test]
    fn deterministic_under_seed() {
        let s = spec(2.0, 1000);
        assert_eq!(generate(&s, 7).unwrap(), generate(&s, 7).unwrap());
        assert_ne!(generate(&s, 7).unwrap(), generate(&s, 8).unwrap());
    }

    #[test]
    fn mean_gap_matches_rate() {
        let reqs = generate(&spec(2.0, 50_000), 11).unwrap();
        let times = arrivals(&reqs);
        let mut prev = SimTime::ZERO;
        let mut total = 0.0;
        for t in &times {
            total += (*t - prev).as_secs_f64();
            prev = *t;
        }
        let mean = total / times.len() as f64;
        assert!((0.45..=0.55).contains(&mean), "mean gap {mean}");
    }

    #[test]
    fn arrival_counts_are_poisson_dispersed() {
        let reqs = generate(&spec(5.0, 10_000), 3).unwrap();
        let times = arrivals(&reqs);
        let window = SimDuration::from_secs(2).as_nanos();
        let end = times.last().unwrap().as_nanos();
        let bins = (end / window) as usize;
        let mut counts = vec![0f64; bins];
        for t in &times {
            let b = (t.as_nanos() / window) as usize;
            if b < bins {
                counts[b] += 1.0;
            }
        }
        let n = counts.len() as f64;
        let mean = counts.iter().sum::<f64>() / n;
        let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let d = var / mean;
        assert!((0.8..=1.2).contains(&d), "dispersion {d}");
    }

    #[test]
    fn chat_mix_is_half_single_round() {
        let mut s = spec(1.0, 40_000);
        s.rounds = RoundsDist::Chat;
        let reqs = generate(&s, 5).unwrap();
        let mut rounds = std::collections::BTreeMap::<u64, u32>::new();
        for r in &reqs {
            *rounds.entry(r.conversation_id).or_default() += 1;
        }
        // Drop the possibly truncated last conversation, keep 10^4.
        let counts: Vec<u32> = rounds.values().copied().take(10_000).collect();
        assert_eq!(counts.len(), 10_000);
        let multi = counts.iter().filter(|&&c| c >= 2).count() as f64 / counts.len() as f64;
        assert!(
            (0.45..=0.55).contains(&multi),
            "multi-round fraction {multi}"
        );
        assert!(counts.iter().all(|&c| (1..=7).contains(&c)));
    }

    #[test]
    fn later_rounds_carry_context() {
        let mut s = spec(1.0, 500);
        s.rounds = RoundsDist::Fixed(3);
        let reqs = generate(&s, 1).unwrap();
        for w in reqs.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if a.conversation_id == b.conversation_id {
                assert_eq!(b.round_index, a.round_index + 1);
                assert_eq!(b.cached_context_len, a.prompt_len + a.output_len);
                assert!(b.prompt_len > b.cached_context_len);
                assert!(matches!(b.arrival, Arrival::AfterPrevious(_)));
            } else {
                assert_eq!(b.round_index, 0);
                assert_eq!(b.cached_context_len, 0);
            }
        }
        assert_eq!(reqs.len(), 500);
    }

    #[test]
    fn first_rounds_sorted_by_arrival() {
        let times = arrivals(&generate(&spec(3.0, 2_000), 9).unwrap());
        assert!(times.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(matches!(
            generate(&spec(0.0, 10), 1),
            Err(WorkloadError::Qps(_))
        ));
        assert!(matches!(
            generate(&spec(-1.0, 10), 1),
            Err(WorkloadError::Qps(_))
        ));
        assert!(matches!(
            generate(&spec(1.0, 0), 1),
            Err(WorkloadError::NoRequests)
        ));
        let mut s = spec(1.0, 10);
        s.prompt_len = LengthDist::Uniform([0, 4]);
        assert!(generate(&s, 1).is_err());
        s.prompt_len = LengthDist::Empirical;
        assert!(matches!(
            generate(&s, 1),
            Err(WorkloadError::EmpiricalWithoutTrace)
        ));
    }

    #[test]
    fn trace_parsing() {
        assert_eq!(
            parse_trace("128,256\n64,64").unwrap(),
            vec![(128, 256), (64, 64)]
        );
        assert_eq!(
            parse_trace("prompt_len,output_len\n5,6\n").unwrap(),
            vec![(5, 6)]
        );
        assert!(matches!(parse_trace(""), Err(WorkloadError::EmptyTrace)));
        assert!(matches!(
            parse_trace("0,5"),
            Err(WorkloadError::Malformed { line: 1, .. })
        ));
        assert!(matches!(
            parse_trace("1,2\n3;4"),
            Err(WorkloadError::Malformed { line: 2, .. })
        ));
        assert!(matches!(
            parse_trace("1,2\nx,y"),
            Err(WorkloadError::Malformed { line: 2, .. })
        ));
    }

    #[test]
    fn trace_replay_draws_pairs_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "10,20\n30,40\n").unwrap();
        let s = WorkloadSpec {
            source: Source::Trace(path),
            prompt_len: LengthDist::Empirical,
            output_len: LengthDist::Empirical,
            ..spec(1.0, 200)
        };
        let reqs = generate(&s, 2).unwrap();
        assert!(reqs.iter().all(|r| (r.prompt_len, r.output_len) == (10, 20)
            || (r.prompt_len, r.output_len) == (30, 40)));
        assert!(reqs.iter().any(|r| r.prompt_len == 10));
        assert!(reqs.iter().any(|r| r.prompt_len == 30));

        let missing = WorkloadSpec {
            source: Source::Trace(dir.path().join("nope.csv")),
            ..s
        };
        assert!(matches!(
            generate(&missing, 2),
            Err(WorkloadError::Io { .. })
        ));
    }
}
