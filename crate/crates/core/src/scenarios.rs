//! Built-in end-to-end checks of channel bookkeeping, prediction and
//! reordering, runnable from the command line.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::engine::{Engine, EngineConfig, EngineError};
use crate::memory_model::{BlockId, BlockKind, Fill};
use crate::secure_channel::{new_channel, ChannelError, Delivery, MsgKind};
use crate::simulator::{engine_config, replay, SimConfig, System};
use crate::workload::{gen_kvswap, gen_offload, KvSwapParams, OffloadParams, SwapPolicy, Trace};

pub const SCENARIOS: [&str; 6] = ["counters", "cycle", "lifo", "fifo", "reorder", "replay"];

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, pass: bool, detail: String) -> Self {
        Check {
            name: name.to_string(),
            pass,
            detail,
        }
    }
}

/// Run one scenario by name; `None` if the name is unknown.
pub fn run_scenario(name: &str, inject_corruption: bool) -> Option<Check> {
    let check = match name {
        "counters" => counters(),
        "cycle" => cycle(),
        "lifo" => pattern("lifo", SwapPolicy::Lifo),
        "fifo" => pattern("fifo", SwapPolicy::Fifo),
        "reorder" => reorder(),
        "replay" => replay_rejection(inject_corruption),
        _ => return None,
    };
    Some(check)
}

/// Two host-to-device messages from IV 1 and two device-to-host messages
/// from IV 5 leave the send counters at 3 and 7.
pub fn counters() -> Check {
    let (mut cpu, mut gpu) = new_channel(&mut ChaCha8Rng::seed_from_u64(0), 1, 5);
    let mut ok = true;
    for (dest, data) in [(0x10, &b"a"[..]), (0x20, b"b")] {
        ok &= cpu.send_data(dest, data).is_ok();
    }
    for (dest, data) in [(0x30, &b"c"[..]), (0x40, b"d")] {
        ok &= gpu.send_data(dest, data).is_ok();
    }
    for _ in 0..2 {
        ok &= matches!(gpu.recv(), Ok(Delivery::Data { .. }));
        ok &= matches!(cpu.recv(), Ok(Delivery::Data { .. }));
    }
    let (h2d, d2h) = (cpu.send_iv(), gpu.send_iv());
    Check::new(
        "counters",
        ok && h2d == 3 && d2h == 7,
        format!("cpu send iv {h2d}, gpu send iv {d2h}"),
    )
}

/// Replay `trace` with speculation and report the positional hit rate,
/// allowing `warmup` unscored swap-ins.
fn score(name: &str, trace: &Trace, warmup: usize) -> Check {
    let cfg = SimConfig::with(System::SpecPipe, 1);
    let engine = match replay(trace, engine_config(trace, &cfg, true, false)) {
        Ok(e) => e,
        Err(e) => return Check::new(name, false, e.to_string()),
    };
    let s = engine.sequence_score();
    let total = trace.swap_in_sequence().len() as u64;
    let pass = s.hits == s.scored && total - s.scored <= warmup as u64 && s.scored > 0;
    Check::new(
        name,
        pass,
        format!(
            "{}/{} predicted in order, {} of {total} in warmup",
            s.hits,
            s.scored,
            total - s.scored
        ),
    )
}

/// Layers 1, 3 and 4 of a four-layer model offloaded over several
/// iterations. The cycle is learned after one pass plus one repeat.
pub fn cycle() -> Check {
    let offload = vec![1, 3, 4];
    let trace = gen_offload(&OffloadParams {
        layers: 4,
        offload: offload.clone(),
        iterations: 4,
        ..OffloadParams::default()
    });
    match trace {
        Ok(t) => score("cycle", &t, offload.len() + 1),
        Err(e) => Check::new("cycle", false, e.to_string()),
    }
}

/// One eviction episode under `policy`: two batches of warmup.
pub fn pattern(name: &str, policy: SwapPolicy) -> Check {
    let params = KvSwapParams {
        requests: 8,
        policy,
        parallel_size: 8,
        ..KvSwapParams::default()
    };
    match gen_kvswap(&params) {
        Ok(t) => score(name, &t, 2 * params.blocks_per_request as usize),
        Err(e) => Check::new(name, false, e.to_string()),
    }
}

fn layer_engine(blocks: u64, initial_iv: u64) -> Result<Engine, EngineError> {
    let mut e = Engine::new(EngineConfig {
        initial_iv_h2d: initial_iv,
        ..EngineConfig::default()
    });
    for i in 0..blocks {
        e.alloc_block(
            BlockId(i),
            BlockKind::ModelLayer {
                layer_index: i as u32,
            },
            4096,
            Fill::Prng(i),
        )?;
    }
    Ok(e)
}

/// Records for blocks 1..=3 at IVs 1..=3; requests for 3 then 1 go out as
/// [1, NOP, 3] and the record for 2 is dropped.
pub fn reorder() -> Check {
    type Sequence = Vec<(MsgKind, u64)>;
    let run = || -> Result<(Sequence, Sequence), EngineError> {
        let mut e = layer_engine(4, 1)?;
        for b in 1..=3 {
            e.prelabel(BlockId(b), b)?;
        }
        e.swap_in(BlockId(3), 0)?;
        e.swap_in(BlockId(1), 0)?;
        e.sync()?;
        let base = |b: u64| e.memory().block(BlockId(b)).map_or(0, |x| x.base);
        let want = vec![
            (MsgKind::Data, base(1)),
            (MsgKind::Nop, 0),
            (MsgKind::Data, base(3)),
        ];
        let got = e
            .device()
            .delivered()
            .iter()
            .map(|m| (m.kind, m.dest))
            .collect();
        Ok((got, want))
    };
    match run() {
        Ok((got, want)) => {
            let words: Vec<&str> = got
                .iter()
                .map(|(k, _)| if *k == MsgKind::Nop { "nop" } else { "data" })
                .collect();
            Check::new("reorder", got == want, words.join(","))
        }
        Err(e) => Check::new("reorder", false, e.to_string()),
    }
}

/// A captured message delivered twice must fail authentication. With
/// `inject_corruption` an engine transfer also has a bit flipped in flight.
pub fn replay_rejection(inject_corruption: bool) -> Check {
    let (mut cpu, mut gpu) = new_channel(&mut ChaCha8Rng::seed_from_u64(1), 0, 0);
    let ct = match cpu.encrypt_at(0, 0, b"secret") {
        Ok(ct) => ct,
        Err(e) => return Check::new("replay", false, e.to_string()),
    };
    cpu.send(ct.clone());
    cpu.send(ct);
    let first = gpu.recv();
    let second = gpu.recv();
    let mut pass = first.is_ok() && matches!(second, Err(ChannelError::Auth { .. }));
    let mut detail = format!(
        "replayed message: {}",
        second.map_or_else(|e| e.to_string(), |_| "accepted".into())
    );
    if inject_corruption {
        let (ok, d) = corrupted_transfer();
        pass &= ok;
        detail += &format!("; corrupted transfer: {d}");
    }
    Check::new("replay", pass, detail)
}

#[cfg(feature = "fault-injection")]
fn corrupted_transfer() -> (bool, String) {
    let run = || -> Result<(), EngineError> {
        let mut e = layer_engine(2, 0)?;
        e.prelabel(BlockId(1), 0)?;
        e.swap_in(BlockId(1), 0)?;
        e.cpu().outbound().inject_bit_flip(0, 3);
        e.sync()
    };
    match run() {
        Err(e) => (e.is_auth(), e.to_string()),
        Ok(()) => (false, "accepted".into()),
    }
}

#[cfg(not(feature = "fault-injection"))]
fn corrupted_transfer() -> (bool, String) {
    (false, "built without fault injection".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_scenarios_pass() {
        for name in SCENARIOS {
            let c = run_scenario(name, cfg!(feature = "fault-injection")).unwrap();
            assert!(c.pass, "{name}: {}", c.detail);
        }
        assert!(run_scenario("nope", false).is_none());
    }
}
