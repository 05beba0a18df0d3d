//! Trace format and synthetic trace generators.
//!
//! A trace is line-delimited JSON: one header line, then one event per line.
//! Files ending in `.gz` are gzip-compressed; gzip input is also detected by
//! its magic bytes.

mod gen;

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gen::*;

use crate::engine::CopyDirection;
use crate::memory_model::{BlockId, BlockKind};
use crate::predictor::ModelProfile;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDecl {
    pub id: BlockId,
    pub len: u64,
    pub kind: BlockKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema_version: u32,
    pub profile: ModelProfile,
    pub generator: GeneratorParams,
    pub blocks: Vec<BlockDecl>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    SwapOut {
        block: BlockId,
    },
    SwapIn {
        block: BlockId,
    },
    SmallIo {
        direction: CopyDirection,
        size: u64,
    },
    Compute {
        duration: u64,
    },
    Sync,
    /// Application store of `len` bytes at `offset` into `block`; contents
    /// derive from `seed`.
    AppWrite {
        block: BlockId,
        offset: u64,
        len: u64,
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    /// Earliest host time (ns) at which the event may issue.
    pub time: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub events: Vec<TraceEvent>,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported schema version {0}")]
    Schema(u32),
    #[error("malformed trace: {0}")]
    Invalid(String),
    #[error("bad generator parameters: {0}")]
    Params(String),
}

/// Per-trace counts used by the simulator and reports.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TraceSummary {
    pub events: u64,
    pub swap_ins: u64,
    pub swap_outs: u64,
    pub small_ios: u64,
    pub computes: u64,
    pub syncs: u64,
    pub app_writes: u64,
    pub swap_in_bytes: u64,
    pub compute_ns: u64,
}

impl Trace {
    pub fn block(&self, id: BlockId) -> Option<&BlockDecl> {
        self.header.blocks.iter().find(|b| b.id == id)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), TraceError> {
        serde_json::to_writer(&mut w, &self.header).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        for e in &self.events {
            serde_json::to_writer(&mut w, e).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Trace, TraceError> {
        let mut lines = r
            .lines()
            .enumerate()
            .filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()));
        let (_, first) = lines.next().ok_or(TraceError::Parse {
            line: 1,
            msg: "missing header".into(),
        })?;
        let header: TraceHeader = serde_json::from_str(&first?).map_err(|e| TraceError::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(TraceError::Schema(header.schema_version));
        }
        let mut events = Vec::new();
        for (i, line) in lines {
            let ev = serde_json::from_str(&line?).map_err(|e| TraceError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            events.push(ev);
        }
        Ok(Trace { header, events })
    }

    pub fn parse(s: &str) -> Result<Trace, TraceError> {
        Trace::read_jsonl(s.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Trace, TraceError> {
        let mut reader = BufReader::new(File::open(path)?);
        let gz = reader.fill_buf()?.starts_with(&[0x1f, 0x8b]);
        if gz {
            Trace::read_jsonl(BufReader::new(GzDecoder::new(reader)))
        } else {
            Trace::read_jsonl(reader)
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), TraceError> {
        let file = BufWriter::new(File::create(path)?);
        if path.extension().is_some_and(|e| e == "gz") {
            let mut enc = GzEncoder::new(file, Compression::default());
            self.write_jsonl(&mut enc)?;
            enc.finish()?.flush()?;
            Ok(())
        } else {
            self.write_jsonl(file)
        }
    }

    /// Check time order, block references and batch termination.
    pub fn validate(&self) -> Result<(), TraceError> {
        let bad = |i: usize, msg: String| Err(TraceError::Invalid(format!("event {i}: {msg}")));
        let blocks: HashMap<BlockId, &BlockDecl> =
            self.header.blocks.iter().map(|b| (b.id, b)).collect();
        if blocks.len() != self.header.blocks.len() {
            return Err(TraceError::Invalid("duplicate block declaration".into()));
        }
        if let Some(b) = self.header.blocks.iter().find(|b| b.len == 0) {
            return Err(TraceError::Invalid(format!(
                "block {} has zero length",
                b.id
            )));
        }
        let mut swapped_out: HashSet<BlockId> = HashSet::new();
        let mut open_batch = false;
        let mut last = 0;
        for (i, e) in self.events.iter().enumerate() {
            if e.time < last {
                return bad(i, format!("time {} before {}", e.time, last));
            }
            last = e.time;
            match e.kind {
                EventKind::SwapOut { block } => {
                    if !blocks.contains_key(&block) {
                        return bad(i, format!("undeclared block {block}"));
                    }
                    if !swapped_out.insert(block) {
                        return bad(i, format!("block {block} swapped out twice"));
                    }
                }
                EventKind::SwapIn { block } => {
                    if !swapped_out.remove(&block) {
                        return bad(i, format!("block {block} swapped in without swap-out"));
                    }
                    open_batch = true;
                }
                EventKind::AppWrite {
                    block, offset, len, ..
                } => match blocks.get(&block) {
                    Some(b)
                        if len > 0 && offset.checked_add(len).is_some_and(|end| end <= b.len) => {}
                    _ => return bad(i, format!("app write outside block {block}")),
                },
                EventKind::SmallIo { size: 0, .. } => return bad(i, "empty transfer".into()),
                EventKind::Sync => open_batch = false,
                _ => {}
            }
        }
        if open_batch {
            return Err(TraceError::Invalid("trailing swap-ins without sync".into()));
        }
        Ok(())
    }

    pub fn summary(&self) -> TraceSummary {
        let mut s = TraceSummary {
            events: self.events.len() as u64,
            ..TraceSummary::default()
        };
        for e in &self.events {
            match e.kind {
                EventKind::SwapOut { .. } => s.swap_outs += 1,
                EventKind::SwapIn { block } => {
                    s.swap_ins += 1;
                    s.swap_in_bytes += self.block(block).map_or(0, |b| b.len);
                }
                EventKind::SmallIo { .. } => s.small_ios += 1,
                EventKind::Compute { duration } => {
                    s.computes += 1;
                    s.compute_ns += duration;
                }
                EventKind::Sync => s.syncs += 1,
                EventKind::AppWrite { .. } => s.app_writes += 1,
            }
        }
        s
    }

    /// Swap-in blocks in trace order.
    pub fn swap_in_sequence(&self) -> Vec<BlockId> {
        self.events
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::SwapIn { block } => Some(block),
                _ => None,
            })
            .collect()
    }

    /// Swap-in batches: the swap-ins between consecutive syncs.
    pub fn swap_in_batches(&self) -> Vec<Vec<BlockId>> {
        let mut out = Vec::new();
        let mut cur = Vec::new();
        for e in &self.events {
            match e.kind {
                EventKind::SwapIn { block } => cur.push(block),
                EventKind::Sync if !cur.is_empty() => out.push(std::mem::take(&mut cur)),
                _ => {}
            }
        }
        out
    }
}
