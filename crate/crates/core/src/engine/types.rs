//! Requests, outcomes, events and counters of the engine.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory_model::{BlockId, MemoryError, Range, RecordId, TaskId};
use crate::predictor::{LeewayPolicy, ModelProfile, Thresholds, TransferClass};
use crate::secure_channel::{ChannelError, DeferredMsg};
use crate::validator::ValidatorError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopyDirection {
    HostToDevice,
    DeviceToHost,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopyRequest {
    pub direction: CopyDirection,
    /// Host range: source for host-to-device, destination otherwise.
    pub range: Range,
    pub class: TransferClass,
    pub submit_time: u64,
}

impl CopyRequest {
    pub fn h2d(range: Range, class: TransferClass) -> Self {
        CopyRequest {
            direction: CopyDirection::HostToDevice,
            range,
            class,
            submit_time: 0,
        }
    }

    pub fn d2h(range: Range, class: TransferClass) -> Self {
        CopyRequest {
            direction: CopyDirection::DeviceToHost,
            range,
            class,
            submit_time: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionKind {
    /// Sent from a validated speculative record.
    Hit,
    /// Encrypted at the current IV on the request path.
    OnTheFly,
    /// Parked until its record's IV comes up; finished by the batch's sync.
    Suspended,
    /// Device-to-host copy whose decryption was deferred.
    Deferred,
    /// Device-to-host copy decrypted before returning.
    Decrypted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub req: u64,
    pub kind: CompletionKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum SendSource {
    Hit {
        record: RecordId,
    },
    /// A suspended request committed once the IV caught up.
    Reordered {
        record: RecordId,
    },
    OnTheFly,
    Nop,
}

/// What the engine did, in control order. The simulator times these.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EngineEvent {
    JobIssued {
        record: RecordId,
        block: BlockId,
        iv: u64,
        bytes: u64,
    },
    JobCancelled {
        record: RecordId,
    },
    Labeled {
        record: RecordId,
    },
    Discarded {
        record: RecordId,
    },
    Sent {
        iv: u64,
        bytes: u64,
        #[serde(flatten)]
        source: SendSource,
        req: Option<u64>,
    },
    Suspended {
        req: u64,
        record: RecordId,
        gap: u64,
    },
    Relinquished {
        count: usize,
    },
    Replanned {
        count: usize,
    },
    D2hSent {
        req: u64,
        iv: u64,
        bytes: u64,
        task: Option<TaskId>,
    },
    Decrypted {
        task: TaskId,
        bytes: u64,
        forced: bool,
    },
    Synced {
        batch: u64,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EngineConfig {
    pub speculation: bool,
    /// Speculative records plus in-flight jobs kept ahead of the channel.
    pub window: usize,
    /// Batches predicted beyond the open one.
    pub depth: usize,
    pub leeway: LeewayPolicy,
    /// Larger IV gaps at sync are served on the fly instead of padded.
    pub max_nop_pad: u64,
    pub profile: ModelProfile,
    pub thresholds: Thresholds,
    /// Seal speculative jobs on the rayon pool when compiled in.
    pub parallel: bool,
    /// Keep delivered plaintext on the device log, not just digests.
    pub keep_payloads: bool,
    pub ring_slots: usize,
    pub seed: u64,
    pub initial_iv_h2d: u64,
    pub initial_iv_d2h: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            speculation: true,
            window: 16,
            depth: 2,
            leeway: LeewayPolicy::default(),
            max_nop_pad: 16,
            profile: ModelProfile::default(),
            thresholds: Thresholds::default(),
            parallel: true,
            keep_payloads: false,
            ring_slots: 64,
            seed: 0,
            initial_iv_h2d: 0,
            initial_iv_d2h: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineStats {
    pub h2d_requests: u64,
    pub d2h_requests: u64,
    pub hits: u64,
    pub suspended: u64,
    pub reordered: u64,
    pub on_the_fly: u64,
    pub nops: u64,
    pub relinquishes: u64,
    pub replans: u64,
    pub discarded_records: u64,
    pub burned_records: u64,
    pub jobs_issued: u64,
    pub records_labeled: u64,
    pub cancelled_jobs: u64,
    pub deferred_decrypts: u64,
    pub forced_decrypts: u64,
    pub faults: u64,
    pub ring_violations: u64,
    pub iv_audit_violations: u64,
    pub data_messages: u64,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("channel: {0}")]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Validator(#[from] ValidatorError),
    #[error("request direction does not match the operation")]
    Direction,
    #[error("unknown block {0}")]
    UnknownBlock(BlockId),
}

impl EngineError {
    /// Authentication failures end the session.
    pub fn is_auth(&self) -> bool {
        matches!(self, EngineError::Channel(ChannelError::Auth { .. }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecryptState {
    Queued,
    Done,
}

#[derive(Clone, Debug)]
pub struct DeferredDecrypt {
    pub task: TaskId,
    pub msg: DeferredMsg,
    pub dest: Range,
    pub state: DecryptState,
}
