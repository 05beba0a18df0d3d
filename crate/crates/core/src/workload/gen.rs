//! Synthetic trace generators.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BlockDecl, EventKind, Trace, TraceError, TraceEvent, TraceHeader, SCHEMA_VERSION};
use crate::engine::CopyDirection;
use crate::memory_model::{BlockId, BlockKind};
use crate::predictor::ModelProfile;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SwapPolicy {
    Lifo,
    Fifo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffloadParams {
    pub layers: u32,
    /// 1-based indices of the layers kept on the host.
    pub offload: Vec<u32>,
    pub iterations: u32,
    pub layer_bytes: u64,
    pub compute_per_layer: u64,
    /// Load the next layer while the current one computes.
    pub prefetch: bool,
    pub seed: u64,
}

impl Default for OffloadParams {
    fn default() -> Self {
        OffloadParams {
            layers: 4,
            offload: vec![1, 3, 4],
            iterations: 2,
            layer_bytes: 4 << 20,
            compute_per_layer: 100_000,
            prefetch: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KvSwapParams {
    pub requests: u32,
    pub policy: SwapPolicy,
    pub kv_block_bytes: u64,
    pub blocks_per_request: u32,
    /// Request arrivals per second; 0 means all arrive at once.
    pub request_rate: f64,
    /// Requests decoded together; evictions happen within such a group.
    pub parallel_size: u32,
    /// Token transfer size; 0 disables token transfers.
    pub small_io_size: u64,
    pub small_io_per_step: u32,
    pub decode_steps: u32,
    pub compute_per_step: u64,
    /// Requests evicted per episode; 0 picks 2..=group size at random.
    pub evict: u32,
    pub seed: u64,
}

impl Default for KvSwapParams {
    fn default() -> Self {
        KvSwapParams {
            requests: 12,
            policy: SwapPolicy::Lifo,
            kv_block_bytes: 1 << 20,
            blocks_per_request: 4,
            request_rate: 0.0,
            parallel_size: 4,
            small_io_size: 2048,
            small_io_per_step: 2,
            decode_steps: 4,
            compute_per_step: 200_000,
            evict: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorParams {
    Offload(OffloadParams),
    KvSwap(KvSwapParams),
    Adversarial {
        base: Box<GeneratorParams>,
        mutation_rate: f64,
        seed: u64,
    },
    Manual,
}

struct Builder {
    t: u64,
    events: Vec<TraceEvent>,
}

impl Builder {
    fn push(&mut self, kind: EventKind) {
        self.events.push(TraceEvent { time: self.t, kind });
    }

    fn compute(&mut self, duration: u64) {
        self.push(EventKind::Compute { duration });
        self.t += duration;
    }
}

fn header(
    profile: ModelProfile,
    generator: GeneratorParams,
    blocks: Vec<BlockDecl>,
) -> TraceHeader {
    TraceHeader {
        schema_version: SCHEMA_VERSION,
        profile,
        generator,
        blocks,
    }
}

/// Layer-offloading inference: each offloaded layer is loaded before it
/// computes and evicted afterwards, in layer order, every iteration.
pub fn gen_offload(p: &OffloadParams) -> Result<Trace, TraceError> {
    if p.layers == 0 || p.layer_bytes == 0 {
        return Err(TraceError::Params(
            "layers and layer_bytes must be positive".into(),
        ));
    }
    if let Some(l) = p.offload.iter().find(|&&l| l == 0 || l > p.layers) {
        return Err(TraceError::Params(format!(
            "offloaded layer {l} outside 1..={}",
            p.layers
        )));
    }
    let offloaded = |l: u32| p.offload.contains(&l);
    let mut sorted = p.offload.clone();
    sorted.sort_unstable();
    sorted.dedup();
    let blocks = sorted
        .iter()
        .map(|&l| BlockDecl {
            id: BlockId(l as u64),
            len: p.layer_bytes,
            kind: BlockKind::ModelLayer { layer_index: l },
        })
        .collect();
    let mut b = Builder {
        t: 0,
        events: Vec::new(),
    };
    for &l in &sorted {
        b.push(EventKind::SwapOut {
            block: BlockId(l as u64),
        });
    }
    let steps: Vec<u32> = (0..p.iterations).flat_map(|_| 1..=p.layers).collect();
    let id = |l: u32| BlockId(l as u64);
    if p.prefetch {
        if let Some(&first) = steps.first().filter(|&&l| offloaded(l)) {
            b.push(EventKind::SwapIn { block: id(first) });
            b.push(EventKind::Sync);
        }
        for (i, &c) in steps.iter().enumerate() {
            let next = steps.get(i + 1).copied();
            if let Some(n) = next.filter(|&n| offloaded(n) && n != c) {
                b.push(EventKind::SwapIn { block: id(n) });
            }
            b.compute(p.compute_per_layer);
            b.push(EventKind::Sync);
            if offloaded(c) && next != Some(c) {
                b.push(EventKind::SwapOut { block: id(c) });
            }
        }
    } else {
        for &c in &steps {
            if offloaded(c) {
                b.push(EventKind::SwapIn { block: id(c) });
                b.push(EventKind::Sync);
            }
            b.compute(p.compute_per_layer);
            if offloaded(c) {
                b.push(EventKind::SwapOut { block: id(c) });
            }
        }
    }
    let profile = ModelProfile::new("offload", p.layer_bytes, 1 << 20);
    Ok(Trace {
        header: header(profile, GeneratorParams::Offload(p.clone()), blocks),
        events: b.events,
    })
}

/// Serving with KV-cache swapping: groups of requests decode together;
/// under memory pressure the lowest-priority requests of a group are
/// swapped out and later brought back in LIFO or FIFO order.
pub fn gen_kvswap(p: &KvSwapParams) -> Result<Trace, TraceError> {
    if p.requests == 0 || p.blocks_per_request == 0 || p.kv_block_bytes == 0 || p.parallel_size == 0
    {
        return Err(TraceError::Params(
            "counts and sizes must be positive".into(),
        ));
    }
    if p.request_rate < 0.0 || !p.request_rate.is_finite() {
        return Err(TraceError::Params(
            "request_rate must be finite and non-negative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let bpr = p.blocks_per_request as u64;
    let block = |r: u32, j: u32| BlockId(r as u64 * bpr + j as u64);
    let blocks = (0..p.requests)
        .flat_map(|r| {
            (0..p.blocks_per_request).map(move |j| BlockDecl {
                id: block(r, j),
                len: p.kv_block_bytes,
                kind: BlockKind::KvCache {
                    owner_id: r as u64,
                    layer_index: j,
                },
            })
        })
        .collect();
    let gap = if p.request_rate > 0.0 {
        (1e9 / p.request_rate) as u64
    } else {
        0
    };
    let mut b = Builder {
        t: 0,
        events: Vec::new(),
    };
    let decode = |b: &mut Builder, steps: u32| {
        for _ in 0..steps {
            let h2d = p.small_io_per_step.div_ceil(2);
            let d2h = p.small_io_per_step / 2;
            if p.small_io_size > 0 {
                for _ in 0..h2d {
                    b.push(EventKind::SmallIo {
                        direction: CopyDirection::HostToDevice,
                        size: p.small_io_size,
                    });
                }
            }
            b.compute(p.compute_per_step);
            if p.small_io_size > 0 {
                for _ in 0..d2h {
                    b.push(EventKind::SmallIo {
                        direction: CopyDirection::DeviceToHost,
                        size: p.small_io_size,
                    });
                }
            }
            b.push(EventKind::Sync);
        }
    };
    let all: Vec<u32> = (0..p.requests).collect();
    for group in all.chunks(p.parallel_size as usize) {
        let arrival = *group.last().expect("non-empty") as u64 * gap;
        b.t = b.t.max(arrival);
        decode(&mut b, p.decode_steps);
        if group.len() >= 2 {
            let n = if p.evict == 0 {
                rng.gen_range(2..=group.len())
            } else {
                (p.evict as usize).clamp(1, group.len())
            };
            // Latest arrivals have the lowest priority and go first.
            let evicted: Vec<u32> = group.iter().rev().take(n).copied().collect();
            for &r in &evicted {
                for j in 0..p.blocks_per_request {
                    b.push(EventKind::SwapOut { block: block(r, j) });
                }
            }
            decode(&mut b, rng.gen_range(1..=p.decode_steps.max(1)));
            let order: Vec<(u32, Vec<u32>)> = match p.policy {
                SwapPolicy::Lifo => evicted
                    .iter()
                    .rev()
                    .map(|&r| (r, (0..p.blocks_per_request).rev().collect()))
                    .collect(),
                SwapPolicy::Fifo => evicted
                    .iter()
                    .map(|&r| (r, (0..p.blocks_per_request).collect()))
                    .collect(),
            };
            for (r, js) in order {
                for j in js {
                    b.push(EventKind::SwapIn { block: block(r, j) });
                }
                b.push(EventKind::Sync);
            }
            decode(&mut b, p.decode_steps);
        }
    }
    let profile = ModelProfile::new("kvswap", 4 << 20, p.kv_block_bytes);
    Ok(Trace {
        header: header(profile, GeneratorParams::KvSwap(p.clone()), blocks),
        events: b.events,
    })
}

/// Share of `mutation_rate` applied to writes and batch swaps; derangement
/// uses the full rate.
const SECONDARY_SHARE: f64 = 0.25;

#[derive(Debug)]
struct BatchSpan {
    /// Indices of the swap-in events.
    swap_ins: Vec<usize>,
    sync: usize,
    /// Only swap-ins between the first swap-in and the sync.
    pure: bool,
}

fn batch_spans(events: &[TraceEvent]) -> Vec<BatchSpan> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    for (i, e) in events.iter().enumerate() {
        match e.kind {
            EventKind::SwapIn { .. } => cur.push(i),
            EventKind::Sync if !cur.is_empty() => {
                let pure = i - cur[0] == cur.len();
                out.push(BatchSpan {
                    swap_ins: std::mem::take(&mut cur),
                    sync: i,
                    pure,
                });
            }
            _ => {}
        }
    }
    out
}

fn derange<R: Rng>(v: &mut [BlockId], rng: &mut R) {
    let orig = v.to_vec();
    loop {
        v.shuffle(rng);
        if v.iter().zip(&orig).all(|(a, b)| a != b) {
            return;
        }
    }
}

/// Perturb a trace against the predictor: derange swap-in order within
/// batches, write to blocks right before they are swapped in, and exchange
/// adjacent swap-in batches. At rate 1 every multi-block batch is deranged.
pub fn gen_adversarial(base: &Trace, mutation_rate: f64, seed: u64) -> Result<Trace, TraceError> {
    if !(0.0..=1.0).contains(&mutation_rate) {
        return Err(TraceError::Params(
            "mutation_rate must lie in [0, 1]".into(),
        ));
    }
    if mutation_rate == 0.0 {
        return Ok(base.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = base.events.clone();
    let spans = batch_spans(&events);
    let block_of = |e: &TraceEvent| match e.kind {
        EventKind::SwapIn { block } => block,
        _ => unreachable!("span holds swap-ins"),
    };
    // Writes to insert before a given event index.
    let mut writes: Vec<(usize, TraceEvent)> = Vec::new();
    let mut i = 0;
    while i < spans.len() {
        let s = &spans[i];
        let mut blocks: Vec<BlockId> = s.swap_ins.iter().map(|&k| block_of(&events[k])).collect();
        if blocks.len() >= 2 && rng.gen_bool(mutation_rate) {
            derange(&mut blocks, &mut rng);
            for (&k, &blk) in s.swap_ins.iter().zip(&blocks) {
                events[k].kind = EventKind::SwapIn { block: blk };
            }
        }
        if rng.gen_bool(mutation_rate * SECONDARY_SHARE) {
            let target = *blocks.choose(&mut rng).expect("non-empty batch");
            let len_total = base.block(target).map_or(1, |d| d.len);
            let len = rng.gen_range(1..=len_total.min(64));
            let offset = rng.gen_range(0..=len_total - len);
            let at = s.swap_ins[0];
            writes.push((
                at,
                TraceEvent {
                    time: events[at].time,
                    kind: EventKind::AppWrite {
                        block: target,
                        offset,
                        len,
                        seed: rng.gen(),
                    },
                },
            ));
        }
        let swap_next = spans
            .get(i + 1)
            .is_some_and(|n| s.pure && n.pure && n.swap_ins[0] == s.sync + 1)
            && rng.gen_bool(mutation_rate * SECONDARY_SHARE);
        if swap_next {
            let n = &spans[i + 1];
            let first: Vec<TraceEvent> = events[s.swap_ins[0]..=s.sync].to_vec();
            let second: Vec<TraceEvent> = events[n.swap_ins[0]..=n.sync].to_vec();
            let t = events[s.swap_ins[0]].time;
            for (k, mut e) in (s.swap_ins[0]..).zip(second.into_iter().chain(first)) {
                e.time = t;
                events[k] = e;
            }
            i += 2;
        } else {
            i += 1;
        }
    }
    let mut out = Vec::with_capacity(events.len() + writes.len());
    let mut w = writes.into_iter().peekable();
    for (k, e) in events.into_iter().enumerate() {
        while let Some((_, ev)) = w.next_if(|(at, _)| *at == k) {
            out.push(ev);
        }
        out.push(e);
    }
    let mut header = base.header.clone();
    header.generator = GeneratorParams::Adversarial {
        base: Box::new(base.header.generator.clone()),
        mutation_rate,
        seed,
    };
    Ok(Trace {
        header,
        events: out,
    })
}
