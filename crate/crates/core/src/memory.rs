//! Block-granularity KV-cache management.
//!
//! [`BlockPool`] is the per-device PagedAttention-style allocator: each
//! request owns a [`BlockTable`] mapping its logical blocks to physical block
//! ids. [`MemoryCache`] is the host-side pool that keeps whole-conversation
//! KV prefixes across rounds, evicting least-recently-touched entries.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::time::{SimDuration, SimTime};

pub type RequestId = u64;
pub type BlockId = u32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MemoryError {
    #[error("request {0} is not registered with the block pool")]
    UnknownRequest(RequestId),
    #[error("request {0} is already registered with the block pool")]
    AlreadyRegistered(RequestId),
    #[error("no decoding request available to preempt")]
    NothingToPreempt,
    #[error("block size must be positive")]
    ZeroBlockSize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockTable {
    pub request: RequestId,
    pub blocks: Vec<BlockId>,
    pub tokens_used: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Allocation {
    /// Number of physical blocks newly attached to the request.
    Granted(u64),
    Insufficient {
        needed: u64,
        free: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Preemption {
    pub request: RequestId,
    pub blocks: u64,
    pub tokens: u64,
}

/// Chooses which candidate `(request, arrival)` to evict.
pub trait VictimPolicy {
    fn choose(&self, candidates: &[(RequestId, SimTime)]) -> Option<RequestId>;
}

/// Latest arrival first; ties go to the larger request id.
#[derive(Debug, Clone, Copy, Default)]
pub struct LatestArrival;

impl VictimPolicy for LatestArrival {
    fn choose(&self, candidates: &[(RequestId, SimTime)]) -> Option<RequestId> {
        candidates
            .iter()
            .max_by_key(|(id, arrival)| (*arrival, *id))
            .map(|(id, _)| *id)
    }
}

/// Number of KV blocks a device can hold after weights and reserve.
pub fn device_block_count(
    mem_capacity: u64,
    weight_bytes: u64,
    reserve_fraction: f64,
    block_size: u64,
    kv_bytes_per_token: u64,
) -> u64 {
    let reserve = (mem_capacity as f64 * reserve_fraction).floor() as u64;
    let usable = mem_capacity
        .saturating_sub(weight_bytes)
        .saturating_sub(reserve);
    usable / (block_size * kv_bytes_per_token).max(1)
}

pub fn blocks_for(tokens: u64, block_size: u64) -> u64 {
    tokens.div_ceil(block_size)
}

#[derive(Debug, Clone)]
pub struct BlockPool {
    pub device: usize,
    block_size: u64,
    total_blocks: u64,
    // LIFO free list; physical ids are assigned deterministically.
    free: Vec<BlockId>,
    tables: BTreeMap<RequestId, BlockTable>,
}

impl BlockPool {
    pub fn new(device: usize, block_size: u64, total_blocks: u64) -> Result<Self, MemoryError> {
        if block_size == 0 {
            return Err(MemoryError::ZeroBlockSize);
        }
        let free = (0..total_blocks as BlockId).rev().collect();
        Ok(Self {
            device,
            block_size,
            total_blocks,
            free,
            tables: BTreeMap::new(),
        })
    }

    pub fn block_size(&self) -> u64 {
        self.block_size
    }

    pub fn total_blocks(&self) -> u64 {
        self.total_blocks
    }

    pub fn free_blocks(&self) -> u64 {
        self.free.len() as u64
    }

    pub fn allocated_blocks(&self) -> u64 {
        self.total_blocks - self.free_blocks()
    }

    pub fn utilization(&self) -> f64 {
        if self.total_blocks == 0 {
            0.0
        } else {
            self.allocated_blocks() as f64 / self.total_blocks as f64
        }
    }

    pub fn blocks_for(&self, tokens: u64) -> u64 {
        blocks_for(tokens, self.block_size)
    }

    pub fn is_registered(&self, request: RequestId) -> bool {
        self.tables.contains_key(&request)
    }

    pub fn table(&self, request: RequestId) -> Option<&BlockTable> {
        self.tables.get(&request)
    }

    pub fn tables(&self) -> impl Iterator<Item = &BlockTable> {
        self.tables.values()
    }

    pub fn free_block_ids(&self) -> &[BlockId] {
        &self.free
    }

    pub fn tokens_used(&self, request: RequestId) -> Option<u64> {
        self.tables.get(&request).map(|t| t.tokens_used)
    }

    pub fn register(&mut self, request: RequestId) -> Result<(), MemoryError> {
        if self.tables.contains_key(&request) {
            return Err(MemoryError::AlreadyRegistered(request));
        }
        self.tables.insert(
            request,
            BlockTable {
                request,
                blocks: Vec::new(),
                tokens_used: 0,
            },
        );
        Ok(())
    }

    /// Grows the request's table to hold `new_tokens` more tokens. On
    /// `Insufficient` nothing changes.
    pub fn allocate(
        &mut self,
        request: RequestId,
        new_tokens: u64,
    ) -> Result<Allocation, MemoryError> {
        let table = self
            .tables
            .get_mut(&request)
            .ok_or(MemoryError::UnknownRequest(request))?;
        let target = blocks_for(table.tokens_used + new_tokens, self.block_size);
        let needed = target - table.blocks.len() as u64;
        if needed > self.free.len() as u64 {
            return Ok(Allocation::Insufficient {
                needed,
                free: self.free.len() as u64,
            });
        }
        for _ in 0..needed {
            let b = self.free.pop().expect("free count checked");
            table.blocks.push(b);
        }
        table.tokens_used += new_tokens;
        Ok(Allocation::Granted(needed))
    }

    /// Blocks `request` would need to grow by `new_tokens`.
    pub fn shortfall(&self, request: RequestId, new_tokens: u64) -> Option<u64> {
        let t = self.tables.get(&request)?;
        Some(blocks_for(t.tokens_used + new_tokens, self.block_size) - t.blocks.len() as u64)
    }

    /// Releases every block of `request` and unregisters it. Returns the
    /// number of blocks freed.
    pub fn release(&mut self, request: RequestId) -> Result<u64, MemoryError> {
        let table = self
            .tables
            .remove(&request)
            .ok_or(MemoryError::UnknownRequest(request))?;
        let n = table.blocks.len() as u64;
        // Reverse so a re-allocation picks the same physical ids back up.
        self.free.extend(table.blocks.into_iter().rev());
        Ok(n)
    }

    /// Admission gate: would `needed_blocks` more keep utilization within
    /// `max_mem_ratio`?
    pub fn admit(&self, needed_blocks: u64, max_mem_ratio: f64) -> bool {
        if needed_blocks > self.free_blocks() {
            return false;
        }
        let after = (self.allocated_blocks() + needed_blocks) as f64;
        after <= max_mem_ratio * self.total_blocks as f64
    }

    /// Evicts one of `candidates` (decoding requests on this device) chosen
    /// by `policy`, freeing its blocks.
    pub fn preempt(
        &mut self,
        candidates: &[(RequestId, SimTime)],
        policy: &dyn VictimPolicy,
    ) -> Result<Preemption, MemoryError> {
        let victim = policy
            .choose(candidates)
            .ok_or(MemoryError::NothingToPreempt)?;
        let tokens = self
            .tokens_used(victim)
            .ok_or(MemoryError::UnknownRequest(victim))?;
        let blocks = self.release(victim)?;
        Ok(Preemption {
            request: victim,
            blocks,
            tokens,
        })
    }

    /// `free + allocated == total` and no physical block is shared.
    pub fn check_conservation(&self) -> bool {
        let allocated: u64 = self.tables.values().map(|t| t.blocks.len() as u64).sum();
        if allocated + self.free_blocks() != self.total_blocks {
            return false;
        }
        let mut seen = vec![false; self.total_blocks as usize];
        for b in self
            .free
            .iter()
            .chain(self.tables.values().flat_map(|t| t.blocks.iter()))
        {
            let slot = &mut seen[*b as usize];
            if *slot {
                return false;
            }
            *slot = true;
        }
        self.tables
            .values()
            .all(|t| blocks_for(t.tokens_used, self.block_size) == t.blocks.len() as u64)
    }
}

pub type ConversationId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheLookup {
    Hit {
        blocks: u64,
        tokens: u64,
        fetch_delay: SimDuration,
    },
    Miss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct CacheEntry {
    tokens: u64,
    blocks: u64,
    last_touch: SimTime,
}

/// Host-side conversation KV cache with LRU eviction.
#[derive(Debug, Clone)]
pub struct MemoryCache {
    capacity: u64,
    block_bytes: u64,
    block_size: u64,
    pub per_block_fetch: SimDuration,
    entries: BTreeMap<ConversationId, CacheEntry>,
    lru: BTreeSet<(SimTime, ConversationId)>,
    used: u64,
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
}

/// Per-block retrieval latency default.
pub const DEFAULT_FETCH_PER_BLOCK: SimDuration = SimDuration::from_nanos(800);

impl MemoryCache {
    pub fn new(
        capacity_bytes: u64,
        block_size: u64,
        kv_bytes_per_token: u64,
        per_block_fetch: SimDuration,
    ) -> Self {
        Self {
            capacity: capacity_bytes,
            block_bytes: block_size * kv_bytes_per_token,
            block_size,
            per_block_fetch,
            entries: BTreeMap::new(),
            lru: BTreeSet::new(),
            used: 0,
            hits: 0,
            misses: 0,
            evictions: 0,
        }
    }

    pub fn used_bytes(&self) -> u64 {
        self.used
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, conversation: ConversationId) -> bool {
        self.entries.contains_key(&conversation)
    }

    /// Stored context length, without touching LRU state or counters.
    pub fn cached_tokens(&self, conversation: ConversationId) -> Option<u64> {
        self.entries.get(&conversation).map(|e| e.tokens)
    }

    /// Stores (or replaces) a conversation's context, evicting LRU entries
    /// to stay within capacity. Entries larger than the whole cache are not
    /// stored.
    pub fn store(&mut self, conversation: ConversationId, tokens: u64, now: SimTime) -> bool {
        self.remove(conversation);
        let blocks = blocks_for(tokens, self.block_size);
        let bytes = blocks * self.block_bytes;
        if bytes > self.capacity {
            return false;
        }
        while self.used + bytes > self.capacity {
            let &(t, victim) = self.lru.iter().next().expect("used > 0 implies entries");
            self.lru.remove(&(t, victim));
            let e = self.entries.remove(&victim).expect("lru index in sync");
            self.used -= e.blocks * self.block_bytes;
            self.evictions += 1;
        }
        self.entries.insert(
            conversation,
            CacheEntry {
                tokens,
                blocks,
                last_touch: now,
            },
        );
        self.lru.insert((now, conversation));
        self.used += bytes;
        true
    }

    fn remove(&mut self, conversation: ConversationId) {
        if let Some(e) = self.entries.remove(&conversation) {
            self.lru.remove(&(e.last_touch, conversation));
            self.used -= e.blocks * self.block_bytes;
        }
    }

    /// Looks up a reusable prefix of `prefix_tokens` for `conversation`.
    pub fn lookup(
        &mut self,
        conversation: ConversationId,
        prefix_tokens: u64,
        now: SimTime,
    ) -> CacheLookup {
        let hit = prefix_tokens > 0
            && self
                .entries
                .get(&conversation)
                .is_some_and(|e| e.tokens >= prefix_tokens);
        if !hit {
            self.misses += 1;
            return CacheLookup::Miss;
        }
        let e = self.entries.get_mut(&conversation).expect("checked");
        self.lru.remove(&(e.last_touch, conversation));
        e.last_touch = now;
        self.lru.insert((now, conversation));
        self.hits += 1;
        let blocks = blocks_for(prefix_tokens, self.block_size);
        CacheLookup::Hit {
            blocks,
            tokens: prefix_tokens,
            fetch_delay: self.per_block_fetch.saturating_mul(blocks),
        }
    }
}
