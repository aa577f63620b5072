//! A set-based reference allocator replayed alongside the block pool.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use servesim_core::memory::{
    Allocation, BlockId, BlockPool, LatestArrival, MemoryError, RequestId,
};
use servesim_core::SimTime;

#[derive(Debug, Clone)]
pub enum Op {
    Register(RequestId),
    Allocate(RequestId, u64),
    Release(RequestId),
    /// Candidate ids; arrival = a fixed function of the id.
    Preempt(Vec<RequestId>),
    Admit(u64, f64),
}

pub fn arrival(id: RequestId) -> SimTime {
    SimTime::from_nanos((id * 7919) % 23)
}

pub struct Reference {
    block_size: u64,
    total: u64,
    free: BTreeSet<BlockId>,
    held: BTreeMap<RequestId, (u64, BTreeSet<BlockId>)>,
}

impl Reference {
    pub fn new(block_size: u64, total: u64) -> Self {
        Self {
            block_size,
            total,
            free: (0..total as BlockId).collect(),
            held: BTreeMap::new(),
        }
    }

    fn need(&self, tokens: u64) -> u64 {
        tokens.div_ceil(self.block_size)
    }

    pub fn check(&self, pool: &BlockPool, step: usize) {
        assert!(pool.check_conservation(), "step {step}: pool conservation");
        assert_eq!(
            pool.free_blocks(),
            self.free.len() as u64,
            "step {step}: free"
        );
        let held: u64 = self.held.values().map(|(_, b)| b.len() as u64).sum();
        assert_eq!(
            held + self.free.len() as u64,
            self.total,
            "step {step}: reference conservation"
        );
        assert_eq!(
            pool.tables().count(),
            self.held.len(),
            "step {step}: registered"
        );
        for (id, (tokens, blocks)) in &self.held {
            let t = pool.table(*id).expect("registered");
            assert_eq!(t.tokens_used, *tokens, "step {step}: tokens of {id}");
            let got: BTreeSet<BlockId> = t.blocks.iter().copied().collect();
            assert_eq!(&got, blocks, "step {step}: blocks of {id}");
            assert_eq!(
                blocks.len() as u64,
                self.need(*tokens),
                "step {step}: ceil of {id}"
            );
        }
        let pool_free: BTreeSet<BlockId> = pool.free_block_ids().iter().copied().collect();
        assert_eq!(pool_free, self.free, "step {step}: free ids");
    }

    pub fn apply(&mut self, pool: &mut BlockPool, op: &Op, step: usize) {
        match op {
            Op::Register(id) => {
                let r = pool.register(*id);
                if self.held.contains_key(id) {
                    assert_eq!(r, Err(MemoryError::AlreadyRegistered(*id)));
                } else {
                    assert_eq!(r, Ok(()));
                    self.held.insert(*id, (0, BTreeSet::new()));
                }
            }
            Op::Allocate(id, n) => {
                let r = pool.allocate(*id, *n);
                let Some((tokens, blocks)) = self.held.get(id).cloned() else {
                    assert_eq!(r, Err(MemoryError::UnknownRequest(*id)), "step {step}");
                    return;
                };
                let needed = self.need(tokens + n) - blocks.len() as u64;
                if needed > self.free.len() as u64 {
                    assert_eq!(
                        r,
                        Ok(Allocation::Insufficient {
                            needed,
                            free: self.free.len() as u64
                        }),
                        "step {step}"
                    );
                    return;
                }
                assert_eq!(r, Ok(Allocation::Granted(needed)), "step {step}");
                let now: BTreeSet<BlockId> =
                    pool.table(*id).unwrap().blocks.iter().copied().collect();
                let fresh: Vec<BlockId> = now.difference(&blocks).copied().collect();
                assert_eq!(fresh.len() as u64, needed, "step {step}");
                for b in &fresh {
                    assert!(self.free.remove(b), "step {step}: block {b} was not free");
                }
                self.held.insert(*id, (tokens + n, now));
            }
            Op::Release(id) => {
                let r = pool.release(*id);
                match self.held.remove(id) {
                    None => assert_eq!(r, Err(MemoryError::UnknownRequest(*id))),
                    Some((_, blocks)) => {
                        assert_eq!(r, Ok(blocks.len() as u64));
                        self.free.extend(blocks);
                    }
                }
            }
            Op::Preempt(cands) => {
                let c: Vec<(RequestId, SimTime)> = cands
                    .iter()
                    .filter(|id| self.held.contains_key(id))
                    .map(|&id| (id, arrival(id)))
                    .collect();
                let r = pool.preempt(&c, &LatestArrival);
                let expect = c.iter().max_by_key(|(id, a)| (*a, *id)).map(|(id, _)| *id);
                match expect {
                    None => assert_eq!(r, Err(MemoryError::NothingToPreempt)),
                    Some(v) => {
                        let (tokens, blocks) = self.held.remove(&v).unwrap();
                        let p = r.expect("preempt");
                        assert_eq!(
                            (p.request, p.blocks, p.tokens),
                            (v, blocks.len() as u64, tokens)
                        );
                        self.free.extend(blocks);
                    }
                }
            }
            Op::Admit(n, ratio) => {
                let used = self.total - self.free.len() as u64;
                let expect =
                    *n <= self.free.len() as u64 && (used + n) as f64 <= ratio * self.total as f64;
                assert_eq!(pool.admit(*n, *ratio), expect, "step {step}");
            }
        }
    }
}

pub fn random_op(rng: &mut ChaCha8Rng, ids: u64) -> Op {
    let id = rng.random_range(0..ids);
    match rng.random_range(0..100) {
        0..15 => Op::Register(id),
        15..60 => Op::Allocate(
            id,
            if rng.random_bool(0.7) {
                1
            } else {
                rng.random_range(0..80)
            },
        ),
        60..75 => Op::Release(id),
        75..85 => Op::Preempt(
            (0..rng.random_range(0..6))
                .map(|_| rng.random_range(0..ids))
                .collect(),
        ),
        _ => Op::Admit(rng.random_range(0..20), rng.random_range(0.0..1.2)),
    }
}
