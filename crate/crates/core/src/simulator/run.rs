//! The event loop.

use std::collections::HashMap;

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use super::{ns_for, SimConfig, System};
use crate::engine::{
    CopyDirection, Engine, EngineConfig, EngineError, EngineEvent, EngineStats, SendSource,
};
use crate::memory_model::{prng_bytes, BlockId, BlockKind, Fill, Range, RecordId, TaskId};
use crate::predictor::Thresholds;
use crate::workload::{EventKind, Trace, TraceError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("bad configuration: {0}")]
    Config(String),
}

impl SimError {
    pub fn is_auth(&self) -> bool {
        matches!(self, SimError::Engine(e) if e.is_auth())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub system: String,
    pub workers: u32,
    pub total_ns: u64,
    pub compute_events: u64,
    /// Compute steps per second, or bytes per second for traces without
    /// compute.
    pub throughput: f64,
    /// Seconds per compute step.
    pub normalized_latency: f64,
    pub gpu_idle_fraction: f64,
    /// Swap-ins served from speculative ciphertext.
    pub hit_rate: f64,
    /// Positional accuracy of the predicted swap-in order.
    pub sequence_hit_rate: f64,
    pub nop_count: u64,
    pub relinquish_count: u64,
    pub replan_count: u64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub event_log: bool,
    /// Keep delivered plaintext on the device log.
    pub keep_payloads: bool,
}

pub struct SimResult {
    pub metrics: Metrics,
    pub engine_stats: Option<EngineStats>,
    /// The engine after the run (speculative system only).
    pub engine: Option<Engine>,
    pub event_log: Vec<Value>,
}

/// Timelines of the modeled resources. All values are ns.
#[derive(Default)]
struct Clock {
    host: u64,
    gpu_free: u64,
    gpu_busy: u64,
    h2d_free: u64,
    d2h_free: u64,
    /// Latest completion of any asynchronous copy since the last sync.
    outstanding: u64,
    enc_free: u64,
    dec_free: u64,
    ready: HashMap<RecordId, u64>,
    task_ready: HashMap<TaskId, u64>,
    block_ready: HashMap<BlockId, u64>,
}

struct Sim<'a> {
    trace: &'a Trace,
    cfg: &'a SimConfig,
    clock: Clock,
    engine: Option<Engine>,
    log: Option<Vec<Value>>,
    small_tag: u64,
    swap_ins: u64,
}

/// Engine configuration matching a simulated run.
pub fn engine_config(
    trace: &Trace,
    cfg: &SimConfig,
    speculation: bool,
    keep_payloads: bool,
) -> EngineConfig {
    EngineConfig {
        speculation,
        window: cfg.window,
        depth: cfg.depth,
        leeway: cfg.leeway,
        max_nop_pad: cfg.max_nop_pad,
        profile: trace.header.profile.clone(),
        thresholds: Thresholds::default(),
        parallel: cfg.parallel,
        keep_payloads,
        seed: cfg.seed,
        ..EngineConfig::default()
    }
}

fn alloc_blocks(engine: &mut Engine, trace: &Trace) -> Result<(), EngineError> {
    for b in &trace.header.blocks {
        let fill = match b.kind {
            BlockKind::KvCache { .. } => Fill::Zeros,
            _ => Fill::Prng(b.id.0),
        };
        engine.alloc_block(b.id, b.kind, b.len, fill)?;
    }
    Ok(())
}

/// Replay a trace through the engine without timing.
pub fn replay(trace: &Trace, ecfg: EngineConfig) -> Result<Engine, SimError> {
    trace.validate()?;
    let mut engine = Engine::new(ecfg);
    alloc_blocks(&mut engine, trace)?;
    let mut tag = 0;
    for ev in &trace.events {
        drive(&mut engine, &ev.kind, ev.time, &mut tag)?;
        engine.speculate_tick()?;
        engine.take_events();
    }
    engine.deliver()?;
    Ok(engine)
}

fn drive(engine: &mut Engine, kind: &EventKind, t: u64, tag: &mut u64) -> Result<(), EngineError> {
    match *kind {
        EventKind::SwapIn { block } => {
            engine.swap_in(block, t)?;
        }
        EventKind::SwapOut { block } => {
            engine.swap_out(block, t)?;
        }
        EventKind::SmallIo { direction, size } => {
            *tag += 1;
            engine.small_io(direction, size, *tag, t)?;
        }
        EventKind::Sync => engine.sync()?,
        EventKind::AppWrite {
            block,
            offset,
            len,
            seed,
        } => {
            let base = engine
                .memory()
                .block(block)
                .ok_or(EngineError::UnknownBlock(block))?
                .base;
            engine.app_write(
                Range::new(base + offset, len),
                &prng_bytes(seed, len as usize),
            )?;
        }
        EventKind::Compute { .. } => {}
    }
    Ok(())
}

pub fn run(trace: &Trace, cfg: &SimConfig) -> Result<Metrics, SimError> {
    Ok(run_detailed(trace, cfg, RunOptions::default())?.metrics)
}

pub fn run_detailed(
    trace: &Trace,
    cfg: &SimConfig,
    opts: RunOptions,
) -> Result<SimResult, SimError> {
    trace.validate()?;
    cfg.cost.validate().map_err(SimError::Config)?;
    if cfg.workers == 0 && cfg.system != System::NoCc {
        return Err(SimError::Config(
            "confidential systems need at least one worker".into(),
        ));
    }
    let engine = if cfg.system == System::SpecPipe {
        let mut e = Engine::new(engine_config(trace, cfg, true, opts.keep_payloads));
        alloc_blocks(&mut e, trace)?;
        Some(e)
    } else {
        None
    };
    let mut sim = Sim {
        trace,
        cfg,
        clock: Clock::default(),
        engine,
        log: opts.event_log.then(Vec::new),
        small_tag: 0,
        swap_ins: 0,
    };
    for ev in &trace.events {
        sim.clock.host = sim.clock.host.max(ev.time);
        sim.log_value(|| json!({ "t": ev.time, "trace": ev.kind }));
        sim.step(&ev.kind)?;
        if let Some(e) = sim.engine.as_mut() {
            e.speculate_tick()?;
            sim.apply_engine_events();
        }
    }
    if let Some(e) = sim.engine.as_mut() {
        e.deliver()?;
    }
    Ok(sim.finish())
}

impl Sim<'_> {
    fn log_value(&mut self, f: impl FnOnce() -> Value) {
        if let Some(log) = self.log.as_mut() {
            let mut v = f();
            v["host"] = json!(self.clock.host);
            log.push(v);
        }
    }

    fn block_len(&self, block: BlockId) -> Result<(u64, BlockKind), SimError> {
        let d = self.trace.block(block).ok_or_else(|| {
            SimError::Trace(TraceError::Invalid(format!("undeclared block {block}")))
        })?;
        Ok((d.len, d.kind))
    }

    fn crypto(&self, bytes: u64) -> u64 {
        self.cfg.cost.crypto_ns(bytes, self.cfg.workers)
    }

    fn cc_link(&self, bytes: u64) -> u64 {
        ns_for(bytes, self.cfg.cost.pcie_bw_cc)
    }

    fn plain_link(&self, bytes: u64) -> u64 {
        ns_for(bytes, self.cfg.cost.pcie_bw_plain)
    }

    fn step(&mut self, kind: &EventKind) -> Result<(), SimError> {
        let c = &mut self.clock;
        match *kind {
            EventKind::Compute { duration } => {
                let start = c.host.max(c.gpu_free);
                c.gpu_free = start + duration;
                c.gpu_busy += duration;
            }
            EventKind::Sync => {
                if let Some(e) = self.engine.as_mut() {
                    e.sync()?;
                    self.apply_engine_events();
                }
                let c = &mut self.clock;
                c.host = c.host.max(c.outstanding).max(c.gpu_free);
            }
            EventKind::SwapIn { block } => {
                self.swap_ins += 1;
                let (len, _) = self.block_len(block)?;
                self.h2d(len, Some(block))?;
            }
            EventKind::SwapOut { block } => {
                let (len, kind) = self.block_len(block)?;
                match kind {
                    BlockKind::KvCache { .. } => self.d2h(len, Some(block))?,
                    _ => {
                        if let Some(e) = self.engine.as_mut() {
                            e.swap_out(block, self.clock.host)?;
                        }
                    }
                }
            }
            EventKind::SmallIo { direction, size } => match direction {
                CopyDirection::HostToDevice => self.h2d(size, None)?,
                CopyDirection::DeviceToHost => self.d2h(size, None)?,
            },
            EventKind::AppWrite { .. } => {
                if let Some(e) = self.engine.as_mut() {
                    drive(e, kind, self.clock.host, &mut self.small_tag)?;
                    self.apply_engine_events();
                }
            }
        }
        Ok(())
    }

    fn h2d(&mut self, len: u64, block: Option<BlockId>) -> Result<(), SimError> {
        let cost = self.cfg.cost;
        match self.cfg.system {
            System::NoCc => {
                let link = self.plain_link(len);
                let c = &mut self.clock;
                c.host += cost.fixed_overhead_plain_ns;
                let end = c.host.max(c.h2d_free) + link;
                c.h2d_free = end;
                c.outstanding = c.outstanding.max(end);
            }
            System::SyncCc => {
                let (enc, link) = (self.crypto(len), self.cc_link(len));
                let c = &mut self.clock;
                let start = c.host + cost.fixed_overhead_cc_ns;
                let enc_end = start + enc;
                let end = (start.max(c.h2d_free) + link).max(enc_end);
                c.host = enc_end;
                c.h2d_free = end;
                c.outstanding = c.outstanding.max(end);
            }
            System::SpecPipe => {
                self.clock.host += cost.fixed_overhead_cc_ns;
                let t = self.clock.host;
                let e = self.engine.as_mut().expect("speculative system");
                match block {
                    Some(b) => e.swap_in(b, t)?,
                    None => {
                        self.small_tag += 1;
                        e.small_io(CopyDirection::HostToDevice, len, self.small_tag, t)?
                    }
                };
                self.apply_engine_events();
            }
        }
        Ok(())
    }

    fn d2h(&mut self, len: u64, block: Option<BlockId>) -> Result<(), SimError> {
        let cost = self.cfg.cost;
        let blocking = block.is_none();
        match self.cfg.system {
            System::NoCc => {
                let link = self.plain_link(len);
                let c = &mut self.clock;
                c.host += cost.fixed_overhead_plain_ns;
                let mut start = c.host.max(c.d2h_free);
                if blocking {
                    start = start.max(c.gpu_free);
                }
                let end = start + link;
                c.d2h_free = end;
                if blocking {
                    c.host = end;
                } else {
                    c.outstanding = c.outstanding.max(end);
                }
            }
            System::SyncCc => {
                let (dec, link) = (self.crypto(len), self.cc_link(len));
                let c = &mut self.clock;
                c.host += cost.fixed_overhead_cc_ns;
                let mut start = c.host.max(c.d2h_free);
                if blocking {
                    start = start.max(c.gpu_free);
                }
                c.d2h_free = start + link;
                c.host = (start + link).max(start + dec);
            }
            System::SpecPipe => {
                self.clock.host += cost.fixed_overhead_cc_ns;
                let t = self.clock.host;
                let e = self.engine.as_mut().expect("speculative system");
                match block {
                    Some(b) => {
                        e.swap_out(b, t)?;
                    }
                    None => {
                        self.small_tag += 1;
                        e.small_io(CopyDirection::DeviceToHost, len, self.small_tag, t)?;
                    }
                }
                let events = self
                    .engine
                    .as_mut()
                    .expect("speculative system")
                    .take_events();
                for ev in events {
                    if let EngineEvent::D2hSent { bytes, task, .. } = ev {
                        self.timed_d2h(bytes, task, block);
                    }
                    self.log_value(|| json!({ "engine": ev }));
                }
            }
        }
        Ok(())
    }

    fn timed_d2h(&mut self, bytes: u64, task: Option<TaskId>, block: Option<BlockId>) {
        let (dec, link) = (self.crypto(bytes), self.cc_link(bytes));
        let c = &mut self.clock;
        match task {
            Some(task) => {
                let start = c.host.max(c.d2h_free);
                let xfer_end = start + link;
                c.d2h_free = xfer_end;
                c.outstanding = c.outstanding.max(xfer_end);
                let dec_end = (start.max(c.dec_free) + dec).max(xfer_end);
                c.dec_free = dec_end;
                c.task_ready.insert(task, dec_end);
                if let Some(b) = block {
                    let r = c.block_ready.entry(b).or_insert(0);
                    *r = (*r).max(dec_end);
                }
            }
            None => {
                let start = c.host.max(c.d2h_free).max(c.gpu_free);
                c.d2h_free = start + link;
                c.host = (start + link).max(start + dec);
            }
        }
    }

    fn apply_engine_events(&mut self) {
        let Some(engine) = self.engine.as_mut() else {
            return;
        };
        let events = engine.take_events();
        for ev in events {
            self.apply(&ev);
            self.log_value(|| json!({ "engine": ev }));
        }
    }

    fn apply(&mut self, ev: &EngineEvent) {
        let cost = self.cfg.cost;
        match *ev {
            EngineEvent::JobIssued {
                record,
                block,
                bytes,
                ..
            } => {
                let enc = self.crypto(bytes);
                let c = &mut self.clock;
                let arrival = c.host.max(c.block_ready.get(&block).copied().unwrap_or(0));
                let end = arrival.max(c.enc_free) + enc;
                c.enc_free = end;
                c.ready.insert(record, end);
            }
            EngineEvent::Sent { bytes, source, .. } => match source {
                SendSource::Hit { record } | SendSource::Reordered { record } => {
                    let (enc, link) = (self.crypto(bytes), self.cc_link(bytes));
                    let c = &mut self.clock;
                    let ready = c.ready.get(&record).copied().unwrap_or(0);
                    // Never worse than sealing it on the request path.
                    let data = ready.min(c.host + enc);
                    // Chunks stream onto the link as they are sealed.
                    let end = (c.host.max(c.h2d_free) + link).max(data);
                    c.h2d_free = end;
                    c.outstanding = c.outstanding.max(end);
                }
                SendSource::OnTheFly => {
                    let (enc, link) = (self.crypto(bytes), self.cc_link(bytes));
                    let c = &mut self.clock;
                    if c.enc_free > c.host {
                        // Preempts the speculative workers.
                        let now = c.host;
                        for r in c.ready.values_mut().filter(|r| **r > now) {
                            *r += enc;
                        }
                        c.enc_free += enc;
                    }
                    let start = c.host;
                    c.host += enc;
                    let end = (start.max(c.h2d_free) + link).max(c.host);
                    c.h2d_free = end;
                    c.outstanding = c.outstanding.max(end);
                }
                SendSource::Nop => {
                    let link = self.cc_link(bytes);
                    let c = &mut self.clock;
                    c.host += cost.fixed_overhead_cc_ns;
                    let end = c.host.max(c.h2d_free) + link;
                    c.h2d_free = end;
                    c.outstanding = c.outstanding.max(end);
                }
            },
            EngineEvent::Decrypted {
                task, forced: true, ..
            } => {
                let c = &mut self.clock;
                c.host = c.host.max(c.task_ready.get(&task).copied().unwrap_or(0));
            }
            EngineEvent::Labeled { .. }
            | EngineEvent::JobCancelled { .. }
            | EngineEvent::Discarded { .. }
            | EngineEvent::Suspended { .. }
            | EngineEvent::Relinquished { .. }
            | EngineEvent::Replanned { .. }
            | EngineEvent::D2hSent { .. }
            | EngineEvent::Decrypted { .. }
            | EngineEvent::Synced { .. } => {}
        }
    }

    fn finish(self) -> SimResult {
        let c = &self.clock;
        let total = c
            .host
            .max(c.gpu_free)
            .max(c.outstanding)
            .max(c.h2d_free)
            .max(c.d2h_free)
            .max(c.dec_free)
            .max(1);
        let summary = self.trace.summary();
        let secs = total as f64 / 1e9;
        let (throughput, latency) = if summary.computes > 0 {
            (
                summary.computes as f64 / secs,
                secs / summary.computes as f64,
            )
        } else {
            let bytes: u64 = summary.swap_in_bytes;
            (bytes as f64 / secs, 0.0)
        };
        let mut m = Metrics {
            system: self.cfg.system.name().to_string(),
            workers: self.cfg.workers,
            total_ns: total,
            compute_events: summary.computes,
            throughput,
            normalized_latency: latency,
            gpu_idle_fraction: (1.0 - c.gpu_busy as f64 / total as f64).clamp(0.0, 1.0),
            ..Metrics::default()
        };
        let mut engine_stats = None;
        if let Some(e) = &self.engine {
            let s = e.stats();
            if self.swap_ins > 0 {
                m.hit_rate = (s.hits + s.reordered) as f64 / self.swap_ins as f64;
            }
            m.sequence_hit_rate = e.sequence_score().rate();
            m.nop_count = s.nops;
            m.relinquish_count = s.relinquishes;
            m.replan_count = s.replans;
            engine_stats = Some(s);
        }
        SimResult {
            metrics: m,
            engine_stats,
            engine: self.engine,
            event_log: self.log.unwrap_or_default(),
        }
    }
}
