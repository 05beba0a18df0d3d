//! Provenance labels for speculative ciphertext.
//!
//! Every pre-encrypted block is labeled with the exact source range and the
//! IV it was sealed under, and the source range is write-guarded. A write
//! fault invalidates the record on the spot. On the request path a single
//! hash lookup on `(base, len)` yields the verdict.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory_model::{BlockId, FaultEvent, Memory, MemoryError, Range, RecordId};
use crate::secure_channel::CiphertextMsg;

pub const DEFAULT_CAPACITY: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordState {
    Pending,
    Committed,
    Invalidated,
}

#[derive(Clone, Debug)]
pub struct CiphertextRecord {
    pub id: RecordId,
    pub label: Range,
    pub block: BlockId,
    /// IV of the first chunk; chunk `i` was sealed at `iv + i`.
    pub iv: u64,
    /// Number of chunks, hence IVs, the record occupies.
    pub span: u64,
    pub chunks: Vec<CiphertextMsg>,
    pub state: RecordState,
}

impl CiphertextRecord {
    pub fn span(&self) -> u64 {
        self.span
    }

    pub fn iv_end(&self) -> u64 {
        self.iv + self.span()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Hit { record: RecordId },
    IvAhead { record: RecordId, gap: u64 },
    IvBehind { record: RecordId },
    Stale,
    Miss,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ValidatorError {
    #[error("label {0} overlaps a pending label")]
    Overlap(Range),
    #[error("record {0:?} is not pending")]
    State(RecordId),
    #[error("unknown record {0:?}")]
    Unknown(RecordId),
    /// The source range was written between reservation and labeling.
    #[error("reservation {0:?} faulted before labeling")]
    Faulted(RecordId),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidatorStats {
    pub hits: u64,
    pub misses: u64,
    pub stale: u64,
    pub iv_ahead: u64,
    pub iv_behind: u64,
    /// Hash probes performed by `validate`.
    pub lookups: u64,
    pub evictions: u64,
}

#[derive(Debug)]
pub struct Validator {
    capacity: usize,
    next_id: u64,
    records: HashMap<RecordId, CiphertextRecord>,
    by_label: HashMap<Range, RecordId>,
    pending_by_iv: BTreeMap<u64, RecordId>,
    pending_fifo: VecDeque<RecordId>,
    reserved: HashMap<RecordId, Range>,
    stats: ValidatorStats,
}

impl Default for Validator {
    fn default() -> Self {
        Validator::new(DEFAULT_CAPACITY)
    }
}

impl Validator {
    pub fn new(capacity: usize) -> Self {
        Validator {
            capacity: capacity.max(1),
            next_id: 0,
            records: HashMap::new(),
            by_label: HashMap::new(),
            pending_by_iv: BTreeMap::new(),
            pending_fifo: VecDeque::new(),
            reserved: HashMap::new(),
            stats: ValidatorStats::default(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Guard `range` ahead of encryption so writes racing the encryption
    /// are caught. The returned id becomes the record id when labeled.
    pub fn reserve(
        &mut self,
        memory: &mut Memory,
        range: Range,
    ) -> Result<RecordId, ValidatorError> {
        let id = RecordId(self.next_id);
        match memory.install_write_guard(range, id) {
            Ok(()) => {}
            Err(MemoryError::GuardOverlap { .. }) => return Err(ValidatorError::Overlap(range)),
            Err(e) => return Err(e.into()),
        }
        self.next_id += 1;
        self.reserved.insert(id, range);
        Ok(id)
    }

    /// Drop a reservation that will not be labeled.
    pub fn release(&mut self, memory: &mut Memory, id: RecordId) {
        if self.reserved.remove(&id).is_some() {
            memory.remove_write_guard(id);
        }
    }

    /// Turn a reservation into a pending record. Fails with `Faulted` if the
    /// range was written since `reserve`.
    pub fn label_reserved(
        &mut self,
        memory: &mut Memory,
        id: RecordId,
        block: BlockId,
        iv: u64,
        chunks: Vec<CiphertextMsg>,
    ) -> Result<RecordId, ValidatorError> {
        let range = self
            .reserved
            .remove(&id)
            .ok_or(ValidatorError::Unknown(id))?;
        if !memory.write_guard(id).is_some_and(|g| g.active) {
            return Err(ValidatorError::Faulted(id));
        }
        debug_assert!(!chunks.is_empty());
        if self.pending_fifo.len() >= self.capacity {
            if let Some(oldest) = self.pending_fifo.front().copied() {
                self.invalidate(memory, oldest)?;
                self.stats.evictions += 1;
            }
        }
        let record = CiphertextRecord {
            id,
            label: range,
            block,
            iv,
            span: chunks.len() as u64,
            chunks,
            state: RecordState::Pending,
        };
        self.pending_by_iv.insert(iv, id);
        self.pending_fifo.push_back(id);
        self.by_label.insert(range, id);
        self.records.insert(id, record);
        Ok(id)
    }

    /// Reserve and label in one step.
    pub fn label(
        &mut self,
        memory: &mut Memory,
        block: BlockId,
        range: Range,
        iv: u64,
        chunks: Vec<CiphertextMsg>,
    ) -> Result<RecordId, ValidatorError> {
        let id = self.reserve(memory, range)?;
        self.label_reserved(memory, id, block, iv, chunks)
    }

    /// Classify a request against the labels. One hash probe; no state
    /// change apart from counters.
    pub fn validate(&mut self, request: Range, current_iv: u64) -> Verdict {
        self.stats.lookups += 1;
        let verdict = match self
            .by_label
            .get(&request)
            .and_then(|id| self.records.get(id))
        {
            None => Verdict::Miss,
            Some(r) => match r.state {
                RecordState::Invalidated => Verdict::Stale,
                RecordState::Committed => Verdict::Miss,
                RecordState::Pending if r.iv == current_iv => Verdict::Hit { record: r.id },
                RecordState::Pending if r.iv > current_iv => Verdict::IvAhead {
                    record: r.id,
                    gap: r.iv - current_iv,
                },
                RecordState::Pending => Verdict::IvBehind { record: r.id },
            },
        };
        match verdict {
            Verdict::Hit { .. } => self.stats.hits += 1,
            Verdict::IvAhead { .. } => self.stats.iv_ahead += 1,
            Verdict::IvBehind { .. } => self.stats.iv_behind += 1,
            Verdict::Stale => self.stats.stale += 1,
            Verdict::Miss => self.stats.misses += 1,
        }
        verdict
    }

    fn transition(
        &mut self,
        memory: &mut Memory,
        id: RecordId,
        to: RecordState,
    ) -> Result<&CiphertextRecord, ValidatorError> {
        let record = self
            .records
            .get_mut(&id)
            .ok_or(ValidatorError::Unknown(id))?;
        if record.state != RecordState::Pending {
            return Err(ValidatorError::State(id));
        }
        record.state = to;
        self.pending_by_iv.remove(&record.iv);
        self.pending_fifo.retain(|r| *r != id);
        memory.remove_write_guard(id);
        if to == RecordState::Committed {
            self.by_label.remove(&record.label);
        }
        Ok(&self.records[&id])
    }

    pub fn commit(
        &mut self,
        memory: &mut Memory,
        id: RecordId,
    ) -> Result<&CiphertextRecord, ValidatorError> {
        self.transition(memory, id, RecordState::Committed)
    }

    /// Commit and hand over the sealed chunks for transmission.
    pub fn commit_take(
        &mut self,
        memory: &mut Memory,
        id: RecordId,
    ) -> Result<(u64, Vec<CiphertextMsg>), ValidatorError> {
        self.transition(memory, id, RecordState::Committed)?;
        let r = self.records.get_mut(&id).expect("just committed");
        Ok((r.iv, std::mem::take(&mut r.chunks)))
    }

    pub fn invalidate(&mut self, memory: &mut Memory, id: RecordId) -> Result<(), ValidatorError> {
        self.transition(memory, id, RecordState::Invalidated)
            .map(|_| ())
    }

    /// React to a memory fault. Returns the faulted pending record, if any.
    /// The guard is already gone from memory at this point.
    pub fn on_fault(&mut self, memory: &mut Memory, fault: &FaultEvent) -> Option<RecordId> {
        let FaultEvent::WriteFault { owner, .. } = fault else {
            return None;
        };
        match self.records.get(owner) {
            Some(r) if r.state == RecordState::Pending => {
                self.invalidate(memory, *owner).expect("pending");
                Some(*owner)
            }
            _ => None,
        }
    }

    pub fn record(&self, id: RecordId) -> Option<&CiphertextRecord> {
        self.records.get(&id)
    }

    /// Pending record whose IV span contains `iv`.
    pub fn pending_at_iv(&self, iv: u64) -> Option<RecordId> {
        let (_, id) = self.pending_by_iv.range(..=iv).next_back()?;
        let r = &self.records[id];
        (iv < r.iv_end()).then_some(*id)
    }

    /// Pending records ordered by IV.
    pub fn pending(&self) -> impl Iterator<Item = &CiphertextRecord> {
        self.pending_by_iv.values().map(|id| &self.records[id])
    }

    pub fn pending_count(&self) -> usize {
        self.pending_by_iv.len()
    }

    pub fn reserved_count(&self) -> usize {
        self.reserved.len()
    }

    pub fn stats(&self) -> &ValidatorStats {
        &self.stats
    }

    /// Drop finished records to bound memory. Pending ones stay.
    pub fn prune(&mut self) {
        let by_label = &self.by_label;
        self.records
            .retain(|id, r| r.state == RecordState::Pending || by_label.get(&r.label) == Some(id));
        for r in self.records.values_mut() {
            if r.state != RecordState::Pending {
                r.chunks = Vec::new();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory_model::{BlockKind, Fill};
    use crate::secure_channel::new_channel;
    use rand::SeedableRng;

    fn setup() -> (Memory, Validator, BlockId, Range, CiphertextMsg) {
        let mut mem = Memory::new();
        let b = mem
            .alloc(BlockKind::SmallIo, 64 << 10, Fill::Prng(1))
            .unwrap();
        let (id, range) = (b.id, b.range());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (cpu, _) = new_channel(&mut rng, 0, 0);
        let ct = cpu
            .encrypt_at(12, range.base, mem.peek(range).unwrap())
            .unwrap();
        (mem, Validator::default(), id, range, ct)
    }

    #[test]
    fn label_installs_guard() {
        let (mut mem, mut v, block, range, ct) = setup();
        let id = v.label(&mut mem, block, range, 12, vec![ct]).unwrap();
        assert_eq!(v.record(id).unwrap().state, RecordState::Pending);
        assert!(mem.write_guard(id).unwrap().active);
    }

    #[test]
    fn overlapping_label_rejected() {
        let (mut mem, mut v, block, range, ct) = setup();
        v.label(&mut mem, block, range, 12, vec![ct.clone()])
            .unwrap();
        let sub = Range::new(range.base + 8, 16);
        assert_eq!(
            v.label(&mut mem, block, sub, 13, vec![ct]).unwrap_err(),
            ValidatorError::Overlap(sub)
        );
    }

    #[test]
    fn write_fault_invalidates_and_validate_says_stale() {
        let (mut mem, mut v, block, range, ct) = setup();
        let id = v.label(&mut mem, block, range, 12, vec![ct]).unwrap();
        let faults = mem.write_at(Range::new(range.base, 1), &[7]).unwrap();
        assert_eq!(faults.len(), 1);
        assert_eq!(v.on_fault(&mut mem, &faults[0]), Some(id));
        assert_eq!(v.record(id).unwrap().state, RecordState::Invalidated);
        assert_eq!(v.validate(range, 12), Verdict::Stale);
    }

    #[test]
    fn verdicts_by_iv() {
        let (mut mem, mut v, block, range, ct) = setup();
        let id = v.label(&mut mem, block, range, 3, vec![ct]).unwrap();
        assert_eq!(v.validate(range, 3), Verdict::Hit { record: id });
        assert_eq!(
            v.validate(range, 1),
            Verdict::IvAhead { record: id, gap: 2 }
        );
        assert_eq!(v.validate(range, 9), Verdict::IvBehind { record: id });
        assert_eq!(v.validate(Range::new(range.base, 10), 3), Verdict::Miss);
        let s = v.stats();
        assert_eq!(
            (s.hits, s.iv_ahead, s.iv_behind, s.misses, s.lookups),
            (1, 1, 1, 1, 4)
        );
    }

    #[test]
    fn commit_and_double_transition() {
        let (mut mem, mut v, block, range, ct) = setup();
        let id = v.label(&mut mem, block, range, 3, vec![ct]).unwrap();
        v.commit(&mut mem, id).unwrap();
        assert!(mem.write_guard(id).is_none());
        assert_eq!(
            v.commit(&mut mem, id).unwrap_err(),
            ValidatorError::State(id)
        );
        assert_eq!(
            v.invalidate(&mut mem, id).unwrap_err(),
            ValidatorError::State(id)
        );
        assert_eq!(v.validate(range, 4), Verdict::Miss);
    }

    #[test]
    fn reservation_faulted_before_label() {
        let (mut mem, mut v, block, range, ct) = setup();
        let id = v.reserve(&mut mem, range).unwrap();
        let faults = mem.write_at(Range::new(range.base + 3, 1), &[1]).unwrap();
        assert_eq!(v.on_fault(&mut mem, &faults[0]), None);
        assert_eq!(
            v.label_reserved(&mut mem, id, block, 1, vec![ct])
                .unwrap_err(),
            ValidatorError::Faulted(id)
        );
    }

    #[test]
    fn capacity_evicts_oldest_pending() {
        let mut mem = Memory::new();
        let mut v = Validator::new(2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (cpu, _) = new_channel(&mut rng, 0, 0);
        let mut ids = Vec::new();
        for i in 0..3u64 {
            let b = mem.alloc(BlockKind::SmallIo, 16, Fill::Zeros).unwrap();
            let (bid, r) = (b.id, b.range());
            let ct = cpu.encrypt_at(i, r.base, &[0; 16]).unwrap();
            ids.push(v.label(&mut mem, bid, r, i, vec![ct]).unwrap());
        }
        assert_eq!(v.record(ids[0]).unwrap().state, RecordState::Invalidated);
        assert_eq!(v.pending_count(), 2);
        assert_eq!(v.stats().evictions, 1);
    }

    #[test]
    fn pending_at_iv_covers_chunk_span() {
        let (mut mem, mut v, block, range, ct) = setup();
        let id = v
            .label(&mut mem, block, range, 10, vec![ct.clone(), ct.clone(), ct])
            .unwrap();
        assert_eq!(v.pending_at_iv(9), None);
        assert_eq!(v.pending_at_iv(10), Some(id));
        assert_eq!(v.pending_at_iv(12), Some(id));
        assert_eq!(v.pending_at_iv(13), None);
    }
}
