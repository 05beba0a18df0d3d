//! Prediction-driven pre-encryption: planning, job issue, sealing and
//! labeling, plus pipeline teardown.

use std::collections::HashSet;

use log::warn;

use super::{Engine, EngineError, EngineEvent, Job};
use crate::memory_model::{BlockId, RecordId};
use crate::predictor::{chunk_count, chunk_sizes, Pattern};
use crate::secure_channel::{
    encrypt_at, ChannelError, ChannelKey, CiphertextMsg, Direction, MsgKind,
};
use crate::validator::ValidatorError;

fn seal(key: &ChannelKey, chunk: u64, job: &Job) -> Result<Vec<CiphertextMsg>, ChannelError> {
    let mut off = 0u64;
    let mut out = Vec::new();
    for (i, size) in chunk_sizes(job.range.len, chunk).into_iter().enumerate() {
        let pt = &job.plaintext[off as usize..(off + size) as usize];
        out.push(encrypt_at(
            key,
            Direction::HostToDevice,
            job.iv + i as u64,
            MsgKind::Data,
            job.range.base + off,
            pt,
        )?);
        off += size;
    }
    Ok(out)
}

#[cfg(feature = "parallel")]
fn seal_all(
    key: &ChannelKey,
    chunk: u64,
    jobs: &[Job],
    parallel: bool,
) -> Vec<Result<Vec<CiphertextMsg>, ChannelError>> {
    use rayon::prelude::*;
    if parallel {
        jobs.par_iter().map(|j| seal(key, chunk, j)).collect()
    } else {
        jobs.iter().map(|j| seal(key, chunk, j)).collect()
    }
}

#[cfg(not(feature = "parallel"))]
fn seal_all(
    key: &ChannelKey,
    chunk: u64,
    jobs: &[Job],
    _parallel: bool,
) -> Vec<Result<Vec<CiphertextMsg>, ChannelError>> {
    jobs.iter().map(|j| seal(key, chunk, j)).collect()
}

impl Engine {
    /// One speculation round: finish queued decryptions, plan and issue new
    /// jobs, seal them and label the results.
    pub fn speculate_tick(&mut self) -> Result<(), EngineError> {
        self.drain_decrypts()?;
        self.speculate_issue()?;
        self.speculate_complete()?;
        Ok(())
    }

    fn held_records(&self) -> HashSet<RecordId> {
        self.suspended.iter().map(|s| s.record).collect()
    }

    /// Compare the speculative window with the predictor's order and issue
    /// jobs for the blocks not yet covered. Returns the number issued.
    pub fn speculate_issue(&mut self) -> Result<usize, EngineError> {
        if !self.cfg.speculation || self.predictor.hypothesis().pattern == Pattern::Unknown {
            return Ok(0);
        }
        let chunk = self.chunk();
        let predicted = self.predictor.predicted_order(self.cfg.depth);
        let held = self.held_records();
        let mut window: Vec<(u64, BlockId)> = self
            .validator
            .pending()
            .filter(|r| !held.contains(&r.id))
            .map(|r| (r.iv, r.block))
            .chain(self.jobs.iter().map(|j| (j.iv, j.block)))
            .collect();
        window.sort_unstable();
        if window
            .first()
            .is_some_and(|&(iv, _)| iv < self.cpu.send_iv())
        {
            // Unpredicted transfers overtook the window.
            self.relinquish();
            window.clear();
        }
        let is_prefix = window.len() <= predicted.len()
            && window.iter().zip(&predicted).all(|(w, p)| w.1 == *p);
        if !is_prefix {
            let n = self.discard_window(false);
            self.stats.replans += 1;
            self.events.push(EngineEvent::Replanned { count: n });
            window.clear();
        }
        let room = self.cfg.window.saturating_sub(window.len());
        if room == 0 || window.len() >= predicted.len() {
            return Ok(0);
        }

        let current = self.cpu.send_iv();
        let k = self.predictor.expected_batch_size();
        let open = self.predictor.open_batch().len();
        let rest = if open > 0 { k.saturating_sub(open) } else { 0 };
        if open == 0 && self.anchor.is_none() {
            self.anchor = Some(current);
        }
        let lead = self.anchor.unwrap_or(current) + self.predictor.leeway();
        let batch_gap = self.predictor.batch_gap();
        let floor = self
            .validator
            .pending()
            .map(|r| r.iv_end())
            .chain(self.jobs.iter().map(|j| j.iv + j.span(chunk)))
            .max()
            .unwrap_or(0);
        let mut next = floor.max(current);

        let mut issued = 0;
        for (pos, &block) in predicted.iter().enumerate().skip(window.len()).take(room) {
            let range = match self.memory.block(block) {
                Some(b) => b.range(),
                None => {
                    warn!("predicted block {block} has no host copy");
                    break;
                }
            };
            let boundary = pos >= rest && (pos - rest) % k == 0;
            let mut iv = next;
            if boundary {
                iv = if pos == 0 && open == 0 {
                    iv.max(lead)
                } else {
                    iv + batch_gap
                };
            }
            self.force_decrypt(range)?;
            let record = match self.validator.reserve(&mut self.memory, range) {
                Ok(id) => id,
                Err(ValidatorError::Overlap(_)) => break,
                Err(e) => return Err(e.into()),
            };
            let plaintext = self.memory.peek(range)?.to_vec();
            self.events.push(EngineEvent::JobIssued {
                record,
                block,
                iv,
                bytes: range.len,
            });
            self.jobs.push(Job {
                record,
                block,
                range,
                iv,
                plaintext,
            });
            self.stats.jobs_issued += 1;
            next = iv + chunk_count(range.len, chunk);
            issued += 1;
        }
        Ok(issued)
    }

    /// Seal all issued jobs and label them in issue order. Jobs whose source
    /// was written since issue are dropped.
    pub fn speculate_complete(&mut self) -> Result<usize, EngineError> {
        let jobs = std::mem::take(&mut self.jobs);
        if jobs.is_empty() {
            return Ok(0);
        }
        let sealed = seal_all(self.cpu.key(), self.chunk(), &jobs, self.cfg.parallel);
        let mut labeled = 0;
        for (job, chunks) in jobs.into_iter().zip(sealed) {
            match self.validator.label_reserved(
                &mut self.memory,
                job.record,
                job.block,
                job.iv,
                chunks?,
            ) {
                Ok(record) => {
                    self.stats.records_labeled += 1;
                    self.events.push(EngineEvent::Labeled { record });
                    labeled += 1;
                }
                Err(ValidatorError::Faulted(record)) => {
                    self.validator.release(&mut self.memory, record);
                    self.stats.cancelled_jobs += 1;
                    self.events.push(EngineEvent::JobCancelled { record });
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(labeled)
    }

    /// Pre-encrypt `block` at `iv` and label it right away, bypassing the
    /// predictor. Used to set up explicit scenarios.
    pub fn prelabel(&mut self, block: BlockId, iv: u64) -> Result<RecordId, EngineError> {
        let range = self.block_range(block)?;
        let record = self.validator.reserve(&mut self.memory, range)?;
        let job = Job {
            record,
            block,
            range,
            iv,
            plaintext: self.memory.peek(range)?.to_vec(),
        };
        let chunks = seal(self.cpu.key(), self.chunk(), &job)?;
        self.stats.jobs_issued += 1;
        self.stats.records_labeled += 1;
        Ok(self
            .validator
            .label_reserved(&mut self.memory, record, block, iv, chunks)?)
    }

    pub(super) fn cancel_jobs_where(&mut self, pred: impl Fn(&Job) -> bool) {
        let (gone, keep): (Vec<_>, Vec<_>) = std::mem::take(&mut self.jobs)
            .into_iter()
            .partition(|j| pred(j));
        self.jobs = keep;
        for j in gone {
            self.validator.release(&mut self.memory, j.record);
            self.stats.cancelled_jobs += 1;
            self.events
                .push(EngineEvent::JobCancelled { record: j.record });
        }
    }

    /// Invalidate pending records and cancel jobs. Records held by suspended
    /// requests survive unless `all`.
    fn discard_window(&mut self, all: bool) -> usize {
        let held = if all {
            HashSet::new()
        } else {
            self.held_records()
        };
        let ids: Vec<RecordId> = self
            .validator
            .pending()
            .map(|r| r.id)
            .filter(|id| !held.contains(id))
            .collect();
        for &id in &ids {
            self.validator
                .invalidate(&mut self.memory, id)
                .expect("pending record");
            self.events.push(EngineEvent::Discarded { record: id });
        }
        self.stats.discarded_records += ids.len() as u64;
        self.cancel_jobs_where(|_| true);
        ids.len()
    }

    /// Drop the whole speculative pipeline. The pattern hypothesis is kept;
    /// the next round lays out IVs from the current counter.
    pub fn relinquish(&mut self) -> usize {
        let n = self.discard_window(true);
        self.stats.relinquishes += 1;
        self.events.push(EngineEvent::Relinquished { count: n });
        n
    }
}
