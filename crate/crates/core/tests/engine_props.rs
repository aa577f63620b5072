//! End-to-end invariants checked from the run log.

use std::collections::BTreeMap;

use proptest::prelude::*;
use servesim_core::comm::Endpoint;
use servesim_core::config::RunConfig;
use servesim_core::request::Stage;
use servesim_core::sched::{BatchLimit, WorkerRole};
use servesim_core::sim::{RunReport, TransferKind};

#[derive(Debug, Clone)]
struct Case {
    policy: &'static str,
    workers: (usize, usize),
    capacity_scale: f64,
    max_batch: Option<u32>,
    mem_ratio: f64,
    chunk: Option<u32>,
    chat: bool,
    cache: bool,
    qps: f64,
    n: u64,
    seed: u64,
}

impl Case {
    fn toml(&self) -> String {
        let mut s = format!("seed = {}\n\n[model]\nbuiltin = \"llama2-7b\"\n", self.seed);
        let workers: Vec<(&str, usize)> = if self.policy == "disaggregated" {
            vec![("prefill", self.workers.0), ("decode", self.workers.1)]
        } else {
            vec![("unified", self.workers.0)]
        };
        for (role, count) in workers {
            s += &format!(
                "\n[[workers]]\nhardware = \"a100\"\nrole = \"{role}\"\ncount = {count}\ncapacity_scale = {}\n",
                self.capacity_scale
            );
        }
        s += &format!(
            "\n[workload]\nsource = \"synthetic\"\nqps = {}\nnum_requests = {}\nprompt_len = {{ uniform = [1, 400] }}\noutput_len = {{ uniform = [1, 200] }}\nrounds = \"{}\"\nthink_time_s = 0.5\n",
            self.qps,
            self.n,
            if self.chat { "chat" } else { "single" }
        );
        s += &format!("\n[scheduler]\nlocal_policy = \"{}\"\n", self.policy);
        if let Some(b) = self.max_batch {
            s += &format!("max_batch_size = {b}\n");
        }
        if let Some(c) = self.chunk {
            s += &format!("prefill_chunk = {c}\n");
        }
        s += &format!("\n[memory]\nmax_mem_ratio = {}\n", self.mem_ratio);
        if self.cache {
            s += "\n[memory.cache]\nenabled = true\n";
        }
        s
    }

    fn config(&self) -> RunConfig {
        RunConfig::from_toml(&self.toml()).unwrap_or_else(|e| panic!("{e}\n{}", self.toml()))
    }
}

fn case_strategy() -> impl Strategy<Value = Case> {
    (
        prop_oneof![Just("continuous"), Just("static"), Just("disaggregated")],
        (1usize..3, 1usize..3),
        prop_oneof![Just(1.0), Just(0.2), Just(0.19)],
        prop::option::of(1u32..24),
        prop_oneof![Just(1.0), Just(0.9), Just(0.7)],
        prop::option::of(16u32..256),
        any::<bool>(),
        any::<bool>(),
        prop_oneof![Just(2.0), Just(10.0), Just(40.0)],
        20u64..120,
        0u64..1000,
    )
        .prop_map(
            |(
                policy,
                workers,
                capacity_scale,
                max_batch,
                mem_ratio,
                chunk,
                chat,
                cache,
                qps,
                n,
                seed,
            )| Case {
                policy,
                workers,
                capacity_scale,
                max_batch,
                mem_ratio,
                chunk,
                chat,
                cache,
                qps,
                n,
                seed,
            },
        )
}

fn role_of(r: &RunReport, w: usize) -> WorkerRole {
    r.workers[w].role
}

fn check(case: &Case, cfg: &RunConfig, r: &RunReport) {
    let ctx = || format!("{case:?}");
    assert!(!r.horizon_reached, "{}", ctx());
    let kv = r.kv_bytes_per_token;

    // every request reaches a terminal state with a consistent timeline
    for q in &r.requests {
        assert!(
            q.is_done(),
            "request {} stuck in {:?}: {}",
            q.id,
            q.stage,
            ctx()
        );
        if q.stage != Stage::Finished {
            continue;
        }
        let arrival = q.arrival_time.expect("arrived");
        assert_eq!(q.generated, q.output_len);
        assert_eq!(q.tokens.count, q.output_len);
        assert_eq!(
            q.iteration_boundaries,
            q.output_len,
            "breakpoint visits: {}",
            ctx()
        );
        assert!(q.tokens.first.unwrap() > arrival);
        assert_eq!(q.finish_time, q.tokens.last);
        assert!(q.prefilled >= q.prompt_len);
    }

    // per-worker batches are serial, respect the limit, and respect roles
    let mut last_end: BTreeMap<usize, _> = BTreeMap::new();
    for b in &r.log.batches {
        if let Some(&e) = last_end.get(&b.worker) {
            assert!(
                b.start >= e,
                "overlapping iterations on w{}: {}",
                b.worker,
                ctx()
            );
        }
        last_end.insert(b.worker, b.end);
        let size = b.prefill_requests + b.decode_requests;
        assert!(size > 0);
        if let BatchLimit::Max(m) = cfg.scheduler.max_batch_size {
            assert!(size as usize <= m, "batch of {size} > {m}: {}", ctx());
        }
        if let Some(c) = cfg.scheduler.prefill_chunk {
            assert!(
                b.prefill_tokens <= c as u64,
                "prefill tokens over budget: {}",
                ctx()
            );
        }
        match role_of(r, b.worker) {
            WorkerRole::Prefill => assert_eq!(b.decode_requests, 0, "{}", ctx()),
            WorkerRole::Decode => assert_eq!(b.prefill_requests, 0, "{}", ctx()),
            WorkerRole::Unified => {}
        }
        if case.policy == "static" && case.chunk.is_none() && b.prefill_requests > 0 {
            assert_eq!(b.decode_requests, 0, "static batch mixed phases: {}", ctx());
        }
    }

    // memory never oversubscribed and fully returned
    let mut last_alloc: BTreeMap<usize, u64> = BTreeMap::new();
    for s in &r.log.footprint {
        assert!(s.allocated_blocks <= r.workers[s.worker].total_blocks);
        last_alloc.insert(s.worker, s.allocated_blocks);
    }
    for (w, a) in last_alloc {
        assert_eq!(a, 0, "w{w} still holds blocks at the end: {}", ctx());
    }

    // transfers: handoffs exactly once, swaps paired and ordered
    let mut by_req: BTreeMap<u64, Vec<_>> = BTreeMap::new();
    for t in &r.log.transfers {
        assert!(t.end > t.start);
        by_req.entry(t.request).or_default().push(t);
    }
    for q in r.requests.iter().filter(|q| q.stage == Stage::Finished) {
        let ts = by_req.get(&q.id).cloned().unwrap_or_default();
        let handoffs: Vec<_> = ts
            .iter()
            .filter(|t| t.kind == TransferKind::Handoff)
            .collect();
        if case.policy == "disaggregated" && q.output_len >= 2 {
            assert_eq!(handoffs.len(), 1, "request {}: {}", q.id, ctx());
            let h = handoffs[0];
            assert_eq!(h.bytes, q.prompt_len as u64 * kv);
            let (Endpoint::Device(src), Endpoint::Device(dst)) = (h.src, h.dst) else {
                panic!("handoff endpoints")
            };
            assert_eq!(role_of(r, src), WorkerRole::Prefill);
            assert_eq!(role_of(r, dst), WorkerRole::Decode);
            assert!(h.end <= q.first_decode_start.expect("decoded"), "{}", ctx());
        } else {
            assert!(handoffs.is_empty());
        }
        let outs: Vec<_> = ts
            .iter()
            .filter(|t| t.kind == TransferKind::SwapOut)
            .collect();
        let ins: Vec<_> = ts
            .iter()
            .filter(|t| t.kind == TransferKind::SwapIn)
            .collect();
        assert_eq!(outs.len(), ins.len(), "{}", ctx());
        assert_eq!(outs.len() as u32, q.preemptions);
        for (o, i) in outs.iter().zip(&ins) {
            assert!(
                i.start >= o.end,
                "swap-in before swap-out finished: {}",
                ctx()
            );
            assert_eq!(o.bytes, i.bytes);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_configs_keep_invariants(case in case_strategy()) {
        let cfg = case.config();
        prop_assume!(cfg.validate().is_ok());
        let r = cfg.simulate().unwrap();
        check(&case, &cfg, &r);
    }

    #[test]
    fn cache_never_adds_prefill_work(seed in 0u64..500, qps in 1.0f64..20.0) {
        let base = Case {
            policy: "continuous",
            workers: (1, 1),
            capacity_scale: 1.0,
            max_batch: None,
            mem_ratio: 1.0,
            chunk: None,
            chat: true,
            cache: false,
            qps,
            n: 80,
            seed,
        };
        let off = base.config().simulate().unwrap();
        let on = Case { cache: true, ..base }.config().simulate().unwrap();
        prop_assert!(on.prefill_tokens <= off.prefill_tokens);
    }
}

#[test]
fn runs_are_reproducible() {
    let case = Case {
        policy: "disaggregated",
        workers: (2, 2),
        capacity_scale: 0.2,
        max_batch: Some(8),
        mem_ratio: 0.9,
        chunk: Some(64),
        chat: true,
        cache: false,
        qps: 20.0,
        n: 150,
        seed: 9,
    };
    let a = case.config().simulate().unwrap();
    let b = case.config().simulate().unwrap();
    let key = |r: &RunReport| {
        r.requests
            .iter()
            .map(|q| (q.id, q.finish_time, q.tokens.first, q.preemptions))
            .collect::<Vec<_>>()
    };
    assert_eq!(key(&a), key(&b));
    assert_eq!(a.log.transfers, b.log.transfers);
    assert_eq!(a.log.batches, b.log.batches);
}

#[test]
fn memory_pressure_causes_swaps_and_recovers() {
    let case = Case {
        policy: "continuous",
        workers: (1, 1),
        capacity_scale: 0.19,
        max_batch: None,
        mem_ratio: 1.0,
        chunk: None,
        chat: false,
        cache: false,
        qps: 40.0,
        n: 100,
        seed: 3,
    };
    let cfg = case.config();
    let r = cfg.simulate().unwrap();
    check(&case, &cfg, &r);
    assert!(r.requests.iter().any(|q| q.preemptions > 0));
}

#[test]
fn single_token_outputs_never_hand_off() {
    let mut cfg = Case {
        policy: "disaggregated",
        workers: (1, 1),
        capacity_scale: 1.0,
        max_batch: None,
        mem_ratio: 1.0,
        chunk: None,
        chat: false,
        cache: false,
        qps: 5.0,
        n: 30,
        seed: 1,
    }
    .config();
    cfg.workload.output_len = servesim_core::workload::LengthDist::Fixed(1);
    let r = cfg.simulate().unwrap();
    assert!(r.log.transfers.is_empty());
    assert!(r.requests.iter().all(|q| q.stage == Stage::Finished));
}
