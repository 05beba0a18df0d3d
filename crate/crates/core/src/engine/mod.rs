//! Speculative pipelined encryption runtime.
//!
//! The control plane is a single owner: verdicts, IV assignment and channel
//! sends happen in call order. Speculative jobs are sealed in bulk (on the
//! rayon pool when the `parallel` feature is on) and labeled in issue order.

mod device;
mod speculate;
mod types;

use std::collections::VecDeque;

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use device::{digest, DeliveredMsg, Device, RingSlot, SharedRing};
pub use types::*;

use crate::memory_model::{BlockId, BlockKind, FaultEvent, Fill, Memory, Range, RecordId, TaskId};
use crate::predictor::{chunk_sizes, Predictor, SequenceScore, TransferClass};
use crate::secure_channel::{new_channel, ChannelEndpoint, CiphertextMsg, Delivery};
use crate::validator::{RecordState, Validator, Verdict};

#[derive(Debug)]
struct Suspended {
    req: u64,
    range: Range,
    record: RecordId,
    /// Source bytes at submission, taken only if the source is written
    /// before the request is sent.
    snapshot: Option<Vec<u8>>,
}

#[derive(Debug)]
struct Job {
    record: RecordId,
    block: BlockId,
    range: Range,
    iv: u64,
    plaintext: Vec<u8>,
}

impl Job {
    fn span(&self, chunk: u64) -> u64 {
        crate::predictor::chunk_count(self.range.len, chunk)
    }
}

pub struct Engine {
    cfg: EngineConfig,
    memory: Memory,
    validator: Validator,
    predictor: Predictor,
    cpu: ChannelEndpoint,
    device: Device,
    ring: SharedRing,
    suspended: Vec<Suspended>,
    jobs: Vec<Job>,
    deferred: VecDeque<DeferredDecrypt>,
    small_buffers: Vec<(u64, Range)>,
    next_req: u64,
    next_task: u64,
    batch: u64,
    last_sent_iv: Option<u64>,
    /// Send IV when the next batch was first planned.
    anchor: Option<u64>,
    batch_prediction: Vec<BlockId>,
    score: SequenceScore,
    stats: EngineStats,
    events: Vec<EngineEvent>,
}

impl Engine {
    pub fn new(cfg: EngineConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (cpu, gpu) = new_channel(&mut rng, cfg.initial_iv_h2d, cfg.initial_iv_d2h);
        Engine {
            memory: Memory::new(),
            validator: Validator::new(cfg.window * 2 + 8),
            predictor: Predictor::new(cfg.thresholds.chunk_bytes, cfg.leeway),
            cpu,
            device: Device::new(gpu, cfg.keep_payloads),
            ring: SharedRing::new(cfg.ring_slots),
            suspended: Vec::new(),
            jobs: Vec::new(),
            deferred: VecDeque::new(),
            small_buffers: Vec::new(),
            next_req: 0,
            next_task: 0,
            batch: 0,
            last_sent_iv: None,
            anchor: None,
            batch_prediction: Vec::new(),
            score: SequenceScore::default(),
            stats: EngineStats::default(),
            events: Vec::new(),
            cfg,
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn memory(&self) -> &Memory {
        &self.memory
    }

    pub fn validator(&self) -> &Validator {
        &self.validator
    }

    pub fn predictor(&self) -> &Predictor {
        &self.predictor
    }

    pub fn cpu(&self) -> &ChannelEndpoint {
        &self.cpu
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn device_mut(&mut self) -> &mut Device {
        &mut self.device
    }

    pub fn ring(&self) -> &SharedRing {
        &self.ring
    }

    pub fn stats(&self) -> EngineStats {
        let mut s = self.stats;
        s.ring_violations = self.ring.violations();
        s
    }

    pub fn sequence_score(&self) -> SequenceScore {
        self.score
    }

    pub fn batch(&self) -> u64 {
        self.batch
    }

    pub fn suspended_count(&self) -> usize {
        self.suspended.len()
    }

    pub fn pending_decrypts(&self) -> usize {
        self.deferred.len()
    }

    pub fn take_events(&mut self) -> Vec<EngineEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn alloc_block(
        &mut self,
        id: BlockId,
        kind: BlockKind,
        len: u64,
        fill: Fill,
    ) -> Result<Range, EngineError> {
        Ok(self.memory.alloc_with_id(id, kind, len, fill)?.range())
    }

    fn block_range(&self, block: BlockId) -> Result<Range, EngineError> {
        self.memory
            .block(block)
            .map(|b| b.range())
            .ok_or(EngineError::UnknownBlock(block))
    }

    fn chunk(&self) -> u64 {
        self.cfg.thresholds.chunk_bytes
    }

    // ---- host-to-device -------------------------------------------------

    pub fn copy_h2d(&mut self, req: CopyRequest) -> Result<Completion, EngineError> {
        if req.direction != CopyDirection::HostToDevice {
            return Err(EngineError::Direction);
        }
        let id = self.next_req;
        self.next_req += 1;
        self.stats.h2d_requests += 1;
        if req.class.is_swap() {
            let block = self.memory.locate(req.range)?;
            self.note_swap_in(block);
        }
        if !req.class.is_swap() || !self.cfg.speculation {
            self.on_the_fly(id, req.range, req.class, None)?;
            return Ok(Completion {
                req: id,
                kind: CompletionKind::OnTheFly,
            });
        }
        let verdict = self.validator.validate(req.range, self.cpu.send_iv());
        debug!("req {id} {:?}: {verdict:?}", req.range);
        let kind = match verdict {
            Verdict::Hit { record } => {
                self.stats.hits += 1;
                self.send_record(record, SendSource::Hit { record }, Some(id))?;
                self.drain_aligned()?;
                CompletionKind::Hit
            }
            Verdict::IvAhead { record, gap }
                if !self.suspended.iter().any(|s| s.record == record) =>
            {
                self.stats.suspended += 1;
                self.suspended.push(Suspended {
                    req: id,
                    range: req.range,
                    record,
                    snapshot: None,
                });
                self.events.push(EngineEvent::Suspended {
                    req: id,
                    record,
                    gap,
                });
                CompletionKind::Suspended
            }
            Verdict::IvBehind { .. } => {
                self.relinquish();
                self.on_the_fly(id, req.range, req.class, None)?;
                CompletionKind::OnTheFly
            }
            _ => {
                self.on_the_fly(id, req.range, req.class, None)?;
                CompletionKind::OnTheFly
            }
        };
        Ok(Completion { req: id, kind })
    }

    fn note_swap_in(&mut self, block: BlockId) {
        if self.predictor.open_batch().is_empty() {
            if let Some(a) = self.anchor.take() {
                self.predictor
                    .note_slack(self.cpu.send_iv().saturating_sub(a));
            }
            self.batch_prediction = if self.cfg.speculation {
                self.predictor.predicted_order(1)
            } else {
                Vec::new()
            };
        }
        if let Err(e) = self.predictor.observe_swap_in(block) {
            warn!("swap-in not tracked by predictor: {e}");
        }
        self.cancel_jobs_where(|j| j.block == block);
    }

    /// Encrypt at the current IV and send. `bytes` overrides the source.
    fn on_the_fly(
        &mut self,
        req: u64,
        range: Range,
        class: TransferClass,
        bytes: Option<Vec<u8>>,
    ) -> Result<(), EngineError> {
        let bytes = match bytes {
            Some(b) => b,
            None => self.read_host(range)?,
        };
        self.stats.on_the_fly += 1;
        let mut off = 0u64;
        for size in chunk_sizes(range.len, self.chunk()) {
            let iv = self.cpu.send_iv();
            let ct = self.cpu.encrypt_at(
                iv,
                range.base + off,
                &bytes[off as usize..(off + size) as usize],
            )?;
            self.transmit(ct, iv, None, SendSource::OnTheFly, Some(req));
            if class == TransferClass::SmallIo {
                self.predictor.note_unpredicted_iv();
            }
            off += size;
        }
        Ok(())
    }

    /// Commit a pending record and send all of its chunks.
    fn send_record(
        &mut self,
        record: RecordId,
        source: SendSource,
        req: Option<u64>,
    ) -> Result<(), EngineError> {
        let (iv, chunks) = self.validator.commit_take(&mut self.memory, record)?;
        for (i, ct) in chunks.into_iter().enumerate() {
            self.transmit(ct, iv + i as u64, Some(record), source, req);
        }
        Ok(())
    }

    fn transmit(
        &mut self,
        ct: CiphertextMsg,
        iv: u64,
        record: Option<RecordId>,
        source: SendSource,
        req: Option<u64>,
    ) {
        if iv != self.cpu.send_iv() || self.last_sent_iv.is_some_and(|last| iv <= last) {
            self.stats.iv_audit_violations += 1;
        }
        let state = record.map(|r| {
            (
                r,
                self.validator
                    .record(r)
                    .map_or(RecordState::Invalidated, |x| x.state),
            )
        });
        let bytes = ct.declared_len;
        self.ring.insert(iv, bytes, state);
        self.cpu.send(ct);
        self.last_sent_iv = Some(iv);
        if source != SendSource::Nop {
            self.stats.data_messages += 1;
        }
        self.events.push(EngineEvent::Sent {
            iv,
            bytes,
            source,
            req,
        });
    }

    fn send_nop(&mut self) {
        let iv = self.cpu.send_iv();
        self.burn(iv);
        self.ring.insert(iv, 1, None);
        if self.last_sent_iv.is_some_and(|last| iv <= last) {
            self.stats.iv_audit_violations += 1;
        }
        self.cpu.nop();
        self.last_sent_iv = Some(iv);
        self.stats.nops += 1;
        self.events.push(EngineEvent::Sent {
            iv,
            bytes: 1,
            source: SendSource::Nop,
            req: None,
        });
    }

    /// `iv` is about to carry a NOP; a record sealed at it can never be sent.
    fn burn(&mut self, iv: u64) {
        if let Some(record) = self.validator.pending_at_iv(iv) {
            self.validator
                .invalidate(&mut self.memory, record)
                .expect("pending record");
            self.stats.burned_records += 1;
            self.stats.discarded_records += 1;
            self.events.push(EngineEvent::Discarded { record });
        }
        let chunk = self.chunk();
        self.cancel_jobs_where(|j| j.iv <= iv && iv < j.iv + j.span(chunk));
    }

    /// Send every suspended request whose record sits at the current IV.
    fn drain_aligned(&mut self) -> Result<(), EngineError> {
        loop {
            let current = self.cpu.send_iv();
            let pos = self.suspended.iter().position(|s| {
                s.snapshot.is_none()
                    && self
                        .validator
                        .record(s.record)
                        .is_some_and(|r| r.state == RecordState::Pending && r.iv == current)
            });
            let Some(pos) = pos else { return Ok(()) };
            let s = self.suspended.remove(pos);
            self.stats.reordered += 1;
            self.send_record(
                s.record,
                SendSource::Reordered { record: s.record },
                Some(s.req),
            )?;
        }
    }

    /// Batch boundary: finish suspended requests (padding with NOPs where
    /// needed), close the predictor batch and deliver to the device.
    pub fn sync(&mut self) -> Result<(), EngineError> {
        loop {
            self.drain_aligned()?;
            if self.suspended.is_empty() {
                break;
            }
            let current = self.cpu.send_iv();
            let broken = self.suspended.iter().position(|s| {
                s.snapshot.is_some()
                    || self
                        .validator
                        .record(s.record)
                        .is_none_or(|r| r.state != RecordState::Pending || r.iv < current)
            });
            if let Some(pos) = broken {
                let s = self.suspended.remove(pos);
                self.finish_unaligned(s)?;
                continue;
            }
            let (pos, target) = self
                .suspended
                .iter()
                .enumerate()
                .map(|(i, s)| (i, self.validator.record(s.record).expect("checked").iv))
                .min_by_key(|&(_, iv)| iv)
                .expect("non-empty");
            if target - current > self.cfg.max_nop_pad {
                let s = self.suspended.remove(pos);
                self.validator.invalidate(&mut self.memory, s.record)?;
                self.stats.discarded_records += 1;
                self.events
                    .push(EngineEvent::Discarded { record: s.record });
                self.finish_unaligned(s)?;
                continue;
            }
            while self.cpu.send_iv() < target {
                self.send_nop();
            }
        }
        self.close_batch();
        self.device.receive_all(self.batch)?;
        self.events.push(EngineEvent::Synced { batch: self.batch });
        self.batch += 1;
        Ok(())
    }

    fn finish_unaligned(&mut self, s: Suspended) -> Result<(), EngineError> {
        if self
            .validator
            .record(s.record)
            .is_some_and(|r| r.state == RecordState::Pending)
        {
            self.validator.invalidate(&mut self.memory, s.record)?;
            self.stats.discarded_records += 1;
            self.events
                .push(EngineEvent::Discarded { record: s.record });
        }
        self.on_the_fly(s.req, s.range, TransferClass::SwapKvCache, s.snapshot)
    }

    fn close_batch(&mut self) {
        let was_open = !self.predictor.open_batch().is_empty();
        self.predictor.close_batch();
        if was_open {
            let actual = self
                .predictor
                .history()
                .last()
                .map(|b| b.blocks.clone())
                .unwrap_or_default();
            if !self.batch_prediction.is_empty() {
                self.score.record(&self.batch_prediction, &actual);
            }
            self.batch_prediction.clear();
        }
    }

    /// Deliver anything still on the host-to-device link.
    pub fn deliver(&mut self) -> Result<usize, EngineError> {
        Ok(self.device.receive_all(self.batch)?)
    }

    // ---- device-to-host -------------------------------------------------

    pub fn copy_d2h(&mut self, req: CopyRequest) -> Result<Completion, EngineError> {
        if req.direction != CopyDirection::DeviceToHost {
            return Err(EngineError::Direction);
        }
        let id = self.next_req;
        self.next_req += 1;
        self.stats.d2h_requests += 1;
        // Anything still queued towards the device precedes this copy.
        self.device.receive_all(self.batch)?;
        let chunk = self.chunk();
        let ivs = self
            .device
            .send_range(req.range.base, req.range.len, chunk)?;
        let deferred = req.class.is_swap();
        let mut off = 0;
        for (size, iv) in chunk_sizes(req.range.len, chunk).into_iter().zip(ivs) {
            let dest = Range::new(req.range.base + off, size);
            let mut deferred_task = None;
            if deferred {
                let msg = self.cpu.recv_deferred()?;
                let task = TaskId(self.next_task);
                self.next_task += 1;
                self.memory.install_read_guard(dest, task);
                deferred_task = Some(task);
                self.deferred.push_back(DeferredDecrypt {
                    task,
                    msg,
                    dest,
                    state: DecryptState::Queued,
                });
                self.stats.deferred_decrypts += 1;
            } else {
                match self.cpu.recv()? {
                    Delivery::Data { bytes, .. } => self.host_write(dest, &bytes)?,
                    Delivery::Nop => {}
                }
            }
            self.events.push(EngineEvent::D2hSent {
                req: id,
                iv,
                bytes: size,
                task: deferred_task,
            });
            off += size;
        }
        if deferred {
            if let Ok(block) = self.memory.locate(req.range) {
                self.predictor.observe_swap_out(block, req.range.len);
            }
        }
        let kind = if deferred {
            CompletionKind::Deferred
        } else {
            CompletionKind::Decrypted
        };
        Ok(Completion { req: id, kind })
    }

    /// Finish every queued decryption.
    pub fn drain_decrypts(&mut self) -> Result<usize, EngineError> {
        let mut n = 0;
        while let Some(d) = self.deferred.pop_front() {
            self.complete_decrypt(d, false)?;
            n += 1;
        }
        Ok(n)
    }

    /// Decrypt now anything destined for `range`.
    fn force_decrypt(&mut self, range: Range) -> Result<(), EngineError> {
        if self.memory.read_guard_count() == 0 {
            return Ok(());
        }
        let (hit, keep): (VecDeque<_>, VecDeque<_>) = std::mem::take(&mut self.deferred)
            .into_iter()
            .partition(|d| d.dest.intersects(&range));
        self.deferred = keep;
        for d in hit {
            self.stats.forced_decrypts += 1;
            self.complete_decrypt(d, true)?;
        }
        Ok(())
    }

    fn complete_decrypt(
        &mut self,
        mut d: DeferredDecrypt,
        forced: bool,
    ) -> Result<(), EngineError> {
        let bytes = self.cpu.open_deferred(&d.msg)?;
        self.memory.remove_read_guard(d.dest);
        self.host_write(d.dest, &bytes)?;
        d.state = DecryptState::Done;
        self.events.push(EngineEvent::Decrypted {
            task: d.task,
            bytes: d.dest.len,
            forced,
        });
        Ok(())
    }

    fn host_write(&mut self, range: Range, bytes: &[u8]) -> Result<(), EngineError> {
        let faults = self.memory.write_at(range, bytes)?;
        self.handle_faults(&faults);
        Ok(())
    }

    fn handle_faults(&mut self, faults: &[FaultEvent]) {
        for f in faults {
            if let FaultEvent::WriteFault { .. } = f {
                self.stats.faults += 1;
                if let Some(record) = self.validator.on_fault(&mut self.memory, f) {
                    self.events.push(EngineEvent::Discarded { record });
                    self.stats.discarded_records += 1;
                }
            }
        }
    }

    fn read_host(&mut self, range: Range) -> Result<Vec<u8>, EngineError> {
        self.force_decrypt(range)?;
        Ok(self.memory.peek(range)?.to_vec())
    }

    // ---- application access ---------------------------------------------

    /// Application store into host memory.
    pub fn app_write(&mut self, range: Range, bytes: &[u8]) -> Result<(), EngineError> {
        self.force_decrypt(range)?;
        for i in 0..self.suspended.len() {
            let r = self.suspended[i].range;
            if r.intersects(&range) && self.suspended[i].snapshot.is_none() {
                self.suspended[i].snapshot = Some(self.memory.peek(r)?.to_vec());
            }
        }
        self.host_write(range, bytes)
    }

    /// Application load from host memory.
    pub fn app_read(&mut self, range: Range) -> Result<Vec<u8>, EngineError> {
        self.force_decrypt(range)?;
        let (bytes, _) = self.memory.read_at(range)?;
        Ok(bytes)
    }

    // ---- trace-level helpers --------------------------------------------

    fn class_of(&self, block: BlockId) -> Result<TransferClass, EngineError> {
        match self.memory.block(block).map(|b| b.kind) {
            Some(BlockKind::ModelLayer { .. }) => Ok(TransferClass::SwapModelWeights),
            Some(BlockKind::KvCache { .. }) => Ok(TransferClass::SwapKvCache),
            Some(BlockKind::SmallIo) => Ok(TransferClass::SmallIo),
            None => Err(EngineError::UnknownBlock(block)),
        }
    }

    /// Swap a block in: host-to-device copy of the whole block.
    pub fn swap_in(&mut self, block: BlockId, submit_time: u64) -> Result<Completion, EngineError> {
        let mut req = CopyRequest::h2d(self.block_range(block)?, self.class_of(block)?);
        req.submit_time = submit_time;
        self.copy_h2d(req)
    }

    /// Swap a block out. Model weights are simply dropped on the device (the
    /// host copy stays authoritative); KV blocks are copied back.
    pub fn swap_out(
        &mut self,
        block: BlockId,
        submit_time: u64,
    ) -> Result<Option<Completion>, EngineError> {
        let range = self.block_range(block)?;
        match self.class_of(block)? {
            TransferClass::SwapKvCache => {
                let mut req = CopyRequest::d2h(range, TransferClass::SwapKvCache);
                req.submit_time = submit_time;
                self.copy_d2h(req).map(Some)
            }
            _ => {
                self.predictor.observe_swap_out(block, range.len);
                Ok(None)
            }
        }
    }

    fn small_buffer(&mut self, size: u64) -> Result<Range, EngineError> {
        if let Some((_, r)) = self.small_buffers.iter().find(|(s, _)| *s == size) {
            return Ok(*r);
        }
        let r = self
            .memory
            .alloc(BlockKind::SmallIo, size, Fill::Zeros)?
            .range();
        self.small_buffers.push((size, r));
        Ok(r)
    }

    /// Small unpipelined transfer. Host-to-device payloads are fresh
    /// application data derived from `tag`.
    pub fn small_io(
        &mut self,
        direction: CopyDirection,
        size: u64,
        tag: u64,
        submit_time: u64,
    ) -> Result<Completion, EngineError> {
        let range = self.small_buffer(size)?;
        let mut req = CopyRequest {
            direction,
            range,
            class: TransferClass::SmallIo,
            submit_time,
        };
        match direction {
            CopyDirection::HostToDevice => {
                let bytes = crate::memory_model::prng_bytes(tag, size as usize);
                self.app_write(range, &bytes)?;
                self.copy_h2d(req)
            }
            CopyDirection::DeviceToHost => {
                req.direction = CopyDirection::DeviceToHost;
                self.copy_d2h(req)
            }
        }
    }
}
