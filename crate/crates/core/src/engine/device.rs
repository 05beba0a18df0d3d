//! GPU-side model and the shared staging ring.

use std::collections::hash_map::DefaultHasher;
use std::collections::{HashMap, VecDeque};
use std::hash::Hasher;

use serde::Serialize;

use crate::memory_model::{prng_bytes, RecordId};
use crate::predictor::chunk_sizes;
use crate::secure_channel::{ChannelEndpoint, ChannelError, Delivery, MsgKind};
use crate::validator::RecordState;

pub fn digest(bytes: &[u8]) -> u64 {
    let mut h = DefaultHasher::new();
    h.write(bytes);
    h.finish()
}

/// One message as opened by the GPU.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DeliveredMsg {
    /// Number of sync boundaries passed before the message was sent.
    pub batch: u64,
    pub iv: u64,
    pub kind: MsgKind,
    pub dest: u64,
    pub len: u64,
    pub digest: u64,
    #[serde(skip)]
    pub bytes: Option<Vec<u8>>,
}

/// The device end of the channel plus device memory keyed by address.
#[derive(Debug)]
pub struct Device {
    endpoint: ChannelEndpoint,
    memory: HashMap<u64, Vec<u8>>,
    delivered: Vec<DeliveredMsg>,
    keep_payloads: bool,
}

/// Seed for device contents never written by the host (fresh KV cache).
const DEVICE_SALT: u64 = 0x6b76_6361_6368_6521;

impl Device {
    pub fn new(endpoint: ChannelEndpoint, keep_payloads: bool) -> Self {
        Device {
            endpoint,
            memory: HashMap::new(),
            delivered: Vec::new(),
            keep_payloads,
        }
    }

    pub fn endpoint(&self) -> &ChannelEndpoint {
        &self.endpoint
    }

    /// Open everything waiting on the host-to-device link, in order.
    pub fn receive_all(&mut self, batch: u64) -> Result<usize, ChannelError> {
        let mut n = 0;
        while self.endpoint.in_flight_inbound() > 0 {
            let iv = self.endpoint.recv_iv();
            let (kind, dest, bytes) = match self.endpoint.recv()? {
                Delivery::Data { dest, bytes } => (MsgKind::Data, dest, bytes),
                Delivery::Nop => (MsgKind::Nop, 0, Vec::new()),
            };
            self.delivered.push(DeliveredMsg {
                batch,
                iv,
                kind,
                dest,
                len: bytes.len() as u64,
                digest: digest(&bytes),
                bytes: self.keep_payloads.then(|| bytes.clone()),
            });
            if kind == MsgKind::Data {
                self.memory.insert(dest, bytes);
            }
            n += 1;
        }
        Ok(n)
    }

    /// Current device contents for `[dest, dest+len)`.
    pub fn contents(&self, dest: u64, len: u64) -> Vec<u8> {
        match self.memory.get(&dest) {
            Some(b) if b.len() as u64 == len => b.clone(),
            _ => prng_bytes(dest ^ DEVICE_SALT, len as usize),
        }
    }

    pub fn set_contents(&mut self, dest: u64, bytes: Vec<u8>) {
        self.memory.insert(dest, bytes);
    }

    /// Seal and send `[dest, dest+len)` to the host in chunks. Returns the
    /// IV used for each chunk.
    pub fn send_range(
        &mut self,
        dest: u64,
        len: u64,
        chunk: u64,
    ) -> Result<Vec<u64>, ChannelError> {
        let mut ivs = Vec::new();
        let mut at = dest;
        for size in chunk_sizes(len, chunk) {
            let bytes = self.contents(at, size);
            ivs.push(self.endpoint.send_iv());
            self.endpoint.send_data(at, &bytes)?;
            at += size;
        }
        Ok(ivs)
    }

    pub fn delivered(&self) -> &[DeliveredMsg] {
        &self.delivered
    }

    /// Data messages as `(dest, len, digest)`, grouped by batch and sorted
    /// within each batch. Two runs of one trace must agree on this even
    /// when speculation reordered messages inside a batch.
    pub fn data_by_batch(&self) -> Vec<Vec<(u64, u64, u64)>> {
        let mut out: Vec<Vec<(u64, u64, u64)>> = Vec::new();
        for m in self.delivered.iter().filter(|m| m.kind == MsgKind::Data) {
            let b = m.batch as usize;
            if out.len() <= b {
                out.resize(b + 1, Vec::new());
            }
            out[b].push((m.dest, m.len, m.digest));
        }
        for batch in &mut out {
            batch.sort_unstable();
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct RingSlot {
    pub iv: u64,
    pub len: u64,
    pub record: Option<RecordId>,
}

/// Fixed-size ring standing in for DMA-visible shared memory. Only
/// committed (or freshly sealed on-the-fly) ciphertext may enter.
#[derive(Debug)]
pub struct SharedRing {
    slots: VecDeque<RingSlot>,
    capacity: usize,
    inserted: u64,
    violations: u64,
}

impl SharedRing {
    pub fn new(capacity: usize) -> Self {
        SharedRing {
            slots: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
            inserted: 0,
            violations: 0,
        }
    }

    /// `record` carries the state of the speculative record the ciphertext
    /// came from, if any.
    pub fn insert(&mut self, iv: u64, len: u64, record: Option<(RecordId, RecordState)>) {
        if let Some((id, state)) = record {
            if state != RecordState::Committed {
                self.violations += 1;
                debug_assert!(
                    false,
                    "record {id:?} entered shared ring in state {state:?}"
                );
            }
        }
        if self.slots.len() == self.capacity {
            self.slots.pop_front();
        }
        self.slots.push_back(RingSlot {
            iv,
            len,
            record: record.map(|(id, _)| id),
        });
        self.inserted += 1;
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn violations(&self) -> u64 {
        self.violations
    }

    pub fn slots(&self) -> impl Iterator<Item = &RingSlot> {
        self.slots.iter()
    }
}
