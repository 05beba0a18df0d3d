//! Discrete-event performance model.
//!
//! Replays a trace through one of three systems: no confidential computing,
//! synchronous encryption on every copy, or the speculative engine. Engine
//! decisions are untimed; this module assigns times to what the engine did.

mod report;
mod run;

use serde::{Deserialize, Serialize};

pub use report::*;
pub use run::*;

use crate::predictor::LeewayPolicy;

/// Bytes per second and nanosecond overheads, calibrated against a
/// host-to-device copy microbenchmark (sizes in decimal units).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub pcie_bw_plain: f64,
    pub pcie_bw_cc: f64,
    pub crypto_bw_per_worker: f64,
    pub fixed_overhead_plain_ns: u64,
    pub fixed_overhead_cc_ns: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            pcie_bw_plain: 55.31e9,
            pcie_bw_cc: 40e9,
            crypto_bw_per_worker: 5.83e9,
            fixed_overhead_plain_ns: 1430,
            fixed_overhead_cc_ns: 14930,
        }
    }
}

/// Nanoseconds to move `bytes` at `bw` bytes/s, rounded up.
pub fn ns_for(bytes: u64, bw: f64) -> u64 {
    (bytes as f64 * 1e9 / bw).ceil() as u64
}

impl CostModel {
    pub fn crypto_ns(&self, bytes: u64, workers: u32) -> u64 {
        ns_for(bytes, self.crypto_bw_per_worker * workers.max(1) as f64)
    }

    pub fn validate(&self) -> Result<(), String> {
        let bws = [
            self.pcie_bw_plain,
            self.pcie_bw_cc,
            self.crypto_bw_per_worker,
        ];
        if bws.iter().all(|b| b.is_finite() && *b > 0.0) {
            Ok(())
        } else {
            Err("bandwidths must be positive".into())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopyMode {
    Plain,
    CcSync,
}

/// Latency of one isolated host-to-device copy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TransferTime {
    /// When the copy call returns to the host.
    pub api_latency_ns: u64,
    /// When the data has landed on the device.
    pub completion_ns: u64,
}

/// Plain copies return after the fixed overhead while the DMA runs on. A
/// synchronous confidential copy encrypts inside the call; the DMA is
/// chunk-pipelined with the encryption.
pub fn transfer_time(
    size: u64,
    mode: CopyMode,
    model: &CostModel,
    workers: u32,
) -> Result<TransferTime, String> {
    if size == 0 {
        return Err("transfer size must be at least one byte".into());
    }
    Ok(match mode {
        CopyMode::Plain => TransferTime {
            api_latency_ns: model.fixed_overhead_plain_ns,
            completion_ns: model.fixed_overhead_plain_ns + ns_for(size, model.pcie_bw_plain),
        },
        CopyMode::CcSync => {
            let api = model.fixed_overhead_cc_ns + model.crypto_ns(size, workers);
            TransferTime {
                api_latency_ns: api,
                completion_ns: api.max(model.fixed_overhead_cc_ns + ns_for(size, model.pcie_bw_cc)),
            }
        }
    })
}

#[derive(
    Clone,
    Copy,
    Debug,
    PartialEq,
    Eq,
    Hash,
    PartialOrd,
    Ord,
    Serialize,
    Deserialize,
    clap::ValueEnum,
)]
#[serde(rename_all = "snake_case")]
pub enum System {
    #[value(name = "nocc")]
    NoCc,
    #[value(name = "synccc")]
    SyncCc,
    #[value(name = "specpipe")]
    SpecPipe,
}

impl System {
    pub fn name(self) -> &'static str {
        match self {
            System::NoCc => "nocc",
            System::SyncCc => "synccc",
            System::SpecPipe => "specpipe",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub system: System,
    /// Crypto threads per direction.
    pub workers: u32,
    /// Speculative records kept ahead of the channel.
    pub window: usize,
    pub depth: usize,
    pub leeway: LeewayPolicy,
    pub max_nop_pad: u64,
    pub seed: u64,
    pub cost: CostModel,
    /// Seal speculative jobs on the rayon pool.
    pub parallel: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            system: System::SpecPipe,
            workers: 2,
            window: 16,
            depth: 2,
            leeway: LeewayPolicy::default(),
            max_nop_pad: 16,
            seed: 0,
            cost: CostModel::default(),
            parallel: true,
        }
    }
}

impl SimConfig {
    pub fn with(system: System, workers: u32) -> Self {
        SimConfig {
            system,
            workers,
            ..SimConfig::default()
        }
    }

    /// Stable short hash of the configuration, used as a CSV key.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", crate::engine::digest(json.as_bytes()))
    }
}

/// Per-step stage times of a homogeneous pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub encrypt_ns: u64,
    pub transfer_ns: u64,
    pub compute_ns: u64,
}

impl StageTimes {
    /// Stage times of one offloaded layer per step under `config`.
    pub fn for_step(bytes_per_step: u64, compute_ns: u64, config: &SimConfig) -> Self {
        let c = &config.cost;
        let (encrypt_ns, transfer_ns) = match config.system {
            System::NoCc => (0, ns_for(bytes_per_step, c.pcie_bw_plain)),
            System::SyncCc | System::SpecPipe => (
                c.crypto_ns(bytes_per_step, config.workers),
                ns_for(bytes_per_step, c.pcie_bw_cc),
            ),
        };
        StageTimes {
            encrypt_ns,
            transfer_ns,
            compute_ns,
        }
    }

    pub fn bottleneck_ns(&self) -> u64 {
        self.encrypt_ns.max(self.transfer_ns).max(self.compute_ns)
    }
}

/// Upper bound on steps per second: a perfect pipeline runs at the pace of
/// its slowest stage.
pub fn analytic_bound(stages: &StageTimes) -> f64 {
    1e9 / stages.bottleneck_ns().max(1) as f64
}
