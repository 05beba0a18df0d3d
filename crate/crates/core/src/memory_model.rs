//! Simulated CPU-side memory.
//!
//! Blocks live in a flat 64-bit address space handed out by a bump allocator.
//! Byte ranges can carry write guards (attached to speculative ciphertext
//! records) and read guards (attached to outstanding deferred decryptions).
//! Touching a guarded range produces fault events that stand in for page
//! faults raised by revoked page permissions.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a memory block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockId(pub u64);

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b{}", self.0)
    }
}

/// Identifier of a ciphertext record; owns write guards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordId(pub u64);

/// Identifier of a deferred decryption task; owns read guards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskId(pub u64);

/// A half-open byte range `[base, base + len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Range {
    pub base: u64,
    pub len: u64,
}

impl Range {
    pub fn new(base: u64, len: u64) -> Self {
        Range { base, len }
    }

    pub fn end(&self) -> u64 {
        self.base + self.len
    }

    pub fn intersects(&self, other: &Range) -> bool {
        self.base < other.end() && other.base < self.end()
    }

    pub fn contains(&self, other: &Range) -> bool {
        other.base >= self.base && other.end() <= self.end()
    }
}

impl fmt::Display for Range {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:#x}+{}]", self.base, self.len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BlockKind {
    ModelLayer { layer_index: u32 },
    KvCache { owner_id: u64, layer_index: u32 },
    SmallIo,
}

/// Initial contents of a freshly allocated block.
#[derive(Clone, Debug)]
pub enum Fill {
    Zeros,
    Byte(u8),
    /// ChaCha8 stream keyed by the seed.
    Prng(u64),
    Bytes(Vec<u8>),
}

impl Fill {
    pub fn materialize(&self, len: usize) -> Vec<u8> {
        match self {
            Fill::Zeros => vec![0; len],
            Fill::Byte(b) => vec![*b; len],
            Fill::Prng(seed) => prng_bytes(*seed, len),
            Fill::Bytes(bytes) => {
                let mut out = bytes.clone();
                out.resize(len, 0);
                out
            }
        }
    }
}

/// Deterministic pseudo-random payload for `seed`.
pub fn prng_bytes(seed: u64, len: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0u8; len];
    rng.fill_bytes(&mut out);
    out
}

#[derive(Clone, Debug)]
pub struct MemoryBlock {
    pub id: BlockId,
    pub base: u64,
    pub len: u64,
    pub kind: BlockKind,
    bytes: Vec<u8>,
}

impl MemoryBlock {
    pub fn range(&self) -> Range {
        Range::new(self.base, self.len)
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WriteGuard {
    pub range: Range,
    pub owner: RecordId,
    pub active: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReadGuard {
    pub range: Range,
    pub pending_decrypt: TaskId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FaultEvent {
    WriteFault { owner: RecordId, range: Range },
    ReadFault { task: TaskId, range: Range },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MemoryError {
    #[error("address space exhausted: requested {requested} bytes, {available} available")]
    Alloc { requested: u64, available: u64 },
    #[error("zero-length allocation")]
    ZeroLength,
    #[error("access {offset}+{len} out of bounds for block {block} of length {block_len}")]
    Bounds {
        block: BlockId,
        offset: u64,
        len: u64,
        block_len: u64,
    },
    #[error("unknown block {0}")]
    UnknownBlock(BlockId),
    #[error("range {0} is not inside a single block")]
    UnmappedRange(Range),
    #[error("guard on {range} overlaps an existing guard owned by {existing:?}")]
    GuardOverlap { range: Range, existing: RecordId },
}

/// Default first address handed out; keeps address 0 unused.
const BASE_ADDRESS: u64 = 0x1000;

#[derive(Debug)]
pub struct Memory {
    blocks: HashMap<BlockId, MemoryBlock>,
    by_base: BTreeMap<u64, BlockId>,
    next_id: u64,
    next_base: u64,
    cap: u64,
    write_guards: BTreeMap<u64, WriteGuard>,
    guard_base_by_owner: HashMap<RecordId, u64>,
    read_guards: BTreeMap<u64, ReadGuard>,
    fault_log: Vec<FaultEvent>,
}

impl Default for Memory {
    fn default() -> Self {
        Memory::with_capacity(u64::MAX - BASE_ADDRESS)
    }
}

impl Memory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Memory whose address space holds at most `cap` bytes.
    pub fn with_capacity(cap: u64) -> Self {
        Memory {
            blocks: HashMap::new(),
            by_base: BTreeMap::new(),
            next_id: 0,
            next_base: BASE_ADDRESS,
            cap,
            write_guards: BTreeMap::new(),
            guard_base_by_owner: HashMap::new(),
            read_guards: BTreeMap::new(),
            fault_log: Vec::new(),
        }
    }

    pub fn alloc(
        &mut self,
        kind: BlockKind,
        len: u64,
        fill: Fill,
    ) -> Result<&MemoryBlock, MemoryError> {
        let id = BlockId(self.next_id);
        self.alloc_with_id(id, kind, len, fill)
    }

    /// Allocate a block under a caller-chosen id (trace replay uses the
    /// trace's block ids).
    pub fn alloc_with_id(
        &mut self,
        id: BlockId,
        kind: BlockKind,
        len: u64,
        fill: Fill,
    ) -> Result<&MemoryBlock, MemoryError> {
        if len == 0 {
            return Err(MemoryError::ZeroLength);
        }
        let used = self.next_base - BASE_ADDRESS;
        let available = self.cap.saturating_sub(used);
        if len > available {
            return Err(MemoryError::Alloc {
                requested: len,
                available,
            });
        }
        let base = self.next_base;
        self.next_base += len;
        self.next_id = self.next_id.max(id.0 + 1);
        let block = MemoryBlock {
            id,
            base,
            len,
            kind,
            bytes: fill.materialize(len as usize),
        };
        self.by_base.insert(base, id);
        self.blocks.insert(id, block);
        Ok(&self.blocks[&id])
    }

    pub fn block(&self, id: BlockId) -> Option<&MemoryBlock> {
        self.blocks.get(&id)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &MemoryBlock> {
        self.by_base.values().map(|id| &self.blocks[id])
    }

    /// Block containing the whole of `range`.
    pub fn locate(&self, range: Range) -> Result<BlockId, MemoryError> {
        let (_, id) = self
            .by_base
            .range(..=range.base)
            .next_back()
            .ok_or(MemoryError::UnmappedRange(range))?;
        let block = &self.blocks[id];
        if block.range().contains(&range) && range.len > 0 {
            Ok(*id)
        } else {
            Err(MemoryError::UnmappedRange(range))
        }
    }

    fn check_bounds(
        &self,
        id: BlockId,
        offset: u64,
        len: u64,
    ) -> Result<&MemoryBlock, MemoryError> {
        let block = self.blocks.get(&id).ok_or(MemoryError::UnknownBlock(id))?;
        if offset.checked_add(len).is_none_or(|end| end > block.len) {
            return Err(MemoryError::Bounds {
                block: id,
                offset,
                len,
                block_len: block.len,
            });
        }
        Ok(block)
    }

    /// Write `data` at `offset`. Every active write guard intersecting the
    /// written range faults (and deactivates) before the bytes change; read
    /// guards report a read fault. The write itself always lands.
    pub fn write(
        &mut self,
        id: BlockId,
        offset: u64,
        data: &[u8],
    ) -> Result<Vec<FaultEvent>, MemoryError> {
        let block = self.check_bounds(id, offset, data.len() as u64)?;
        let range = Range::new(block.base + offset, data.len() as u64);
        let mut faults = self.collect_write_faults(range);
        faults.extend(self.read_faults(range));
        let block = self.blocks.get_mut(&id).expect("checked above");
        let start = offset as usize;
        block.bytes[start..start + data.len()].copy_from_slice(data);
        self.fault_log.extend(faults.iter().copied());
        Ok(faults)
    }

    /// Write at an absolute address.
    pub fn write_at(&mut self, range: Range, data: &[u8]) -> Result<Vec<FaultEvent>, MemoryError> {
        debug_assert_eq!(range.len, data.len() as u64);
        let id = self.locate(range)?;
        let base = self.blocks[&id].base;
        self.write(id, range.base - base, data)
    }

    pub fn read(
        &mut self,
        id: BlockId,
        offset: u64,
        len: u64,
    ) -> Result<(Vec<u8>, Vec<FaultEvent>), MemoryError> {
        let block = self.check_bounds(id, offset, len)?;
        let range = Range::new(block.base + offset, len);
        let start = offset as usize;
        let bytes = block.bytes[start..start + len as usize].to_vec();
        let faults = self.read_faults(range);
        self.fault_log.extend(faults.iter().copied());
        Ok((bytes, faults))
    }

    pub fn read_at(&mut self, range: Range) -> Result<(Vec<u8>, Vec<FaultEvent>), MemoryError> {
        let id = self.locate(range)?;
        let base = self.blocks[&id].base;
        self.read(id, range.base - base, range.len)
    }

    /// Current bytes of a range, bypassing guards. For oracles and for the
    /// runtime's own bookkeeping, never for application accesses.
    pub fn peek(&self, range: Range) -> Result<&[u8], MemoryError> {
        let id = self.locate(range)?;
        let block = &self.blocks[&id];
        let start = (range.base - block.base) as usize;
        Ok(&block.bytes[start..start + range.len as usize])
    }

    /// Overwrite bytes without raising faults; used when the runtime itself
    /// fills a destination (decryption output).
    pub fn fill_unguarded(&mut self, range: Range, data: &[u8]) -> Result<(), MemoryError> {
        let id = self.locate(range)?;
        let block = self.blocks.get_mut(&id).expect("located");
        let start = (range.base - block.base) as usize;
        block.bytes[start..start + data.len()].copy_from_slice(data);
        Ok(())
    }

    fn guards_intersecting<'a, G>(
        map: &'a BTreeMap<u64, G>,
        range: Range,
        range_of: impl Fn(&G) -> Range + 'a,
    ) -> impl Iterator<Item = u64> + 'a {
        // Guards are disjoint, so at most one guard starting before
        // `range.base` can reach into it.
        let before = map
            .range(..range.base)
            .next_back()
            .filter(|(_, g)| range_of(g).intersects(&range))
            .map(|(b, _)| *b);
        let inside = map.range(range.base..range.end()).map(|(b, _)| *b);
        before
            .into_iter()
            .chain(inside)
            .collect::<Vec<_>>()
            .into_iter()
    }

    fn collect_write_faults(&mut self, range: Range) -> Vec<FaultEvent> {
        let hits: Vec<u64> =
            Self::guards_intersecting(&self.write_guards, range, |g| g.range).collect();
        let mut faults = Vec::new();
        for base in hits {
            let guard = self.write_guards.remove(&base).expect("present");
            self.guard_base_by_owner.remove(&guard.owner);
            if guard.active {
                faults.push(FaultEvent::WriteFault {
                    owner: guard.owner,
                    range: guard.range,
                });
            }
        }
        faults
    }

    fn read_faults(&self, range: Range) -> Vec<FaultEvent> {
        Self::guards_intersecting(&self.read_guards, range, |g| g.range)
            .map(|b| {
                let g = self.read_guards[&b];
                FaultEvent::ReadFault {
                    task: g.pending_decrypt,
                    range: g.range,
                }
            })
            .collect()
    }

    /// Revoke write permission on `range` on behalf of `owner`.
    pub fn install_write_guard(
        &mut self,
        range: Range,
        owner: RecordId,
    ) -> Result<(), MemoryError> {
        if let Some(b) = Self::guards_intersecting(&self.write_guards, range, |g| g.range).next() {
            return Err(MemoryError::GuardOverlap {
                range,
                existing: self.write_guards[&b].owner,
            });
        }
        self.write_guards.insert(
            range.base,
            WriteGuard {
                range,
                owner,
                active: true,
            },
        );
        self.guard_base_by_owner.insert(owner, range.base);
        Ok(())
    }

    /// Drop the guard owned by `owner`; returns whether one was active.
    pub fn remove_write_guard(&mut self, owner: RecordId) -> bool {
        match self.guard_base_by_owner.remove(&owner) {
            Some(base) => self.write_guards.remove(&base).is_some(),
            None => false,
        }
    }

    pub fn write_guard(&self, owner: RecordId) -> Option<&WriteGuard> {
        self.guard_base_by_owner
            .get(&owner)
            .and_then(|b| self.write_guards.get(b))
    }

    pub fn active_write_guards(&self) -> impl Iterator<Item = &WriteGuard> {
        self.write_guards.values().filter(|g| g.active)
    }

    pub fn install_read_guard(&mut self, range: Range, task: TaskId) {
        debug_assert!(
            Self::guards_intersecting(&self.read_guards, range, |g| g.range)
                .next()
                .is_none(),
            "read guards must be disjoint"
        );
        self.read_guards.insert(
            range.base,
            ReadGuard {
                range,
                pending_decrypt: task,
            },
        );
    }

    pub fn remove_read_guard(&mut self, range: Range) -> Option<ReadGuard> {
        self.read_guards.remove(&range.base)
    }

    /// Tasks whose read guards intersect `range`.
    pub fn read_guarded(&self, range: Range) -> Vec<TaskId> {
        Self::guards_intersecting(&self.read_guards, range, |g| g.range)
            .map(|b| self.read_guards[&b].pending_decrypt)
            .collect()
    }

    pub fn read_guard_count(&self) -> usize {
        self.read_guards.len()
    }

    pub fn fault_log(&self) -> &[FaultEvent] {
        &self.fault_log
    }
}
