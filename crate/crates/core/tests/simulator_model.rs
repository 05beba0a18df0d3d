use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specpipe::predictor::ModelProfile;
use specpipe::simulator::*;
use specpipe::workload::*;

fn offload(layer_bytes: u64, compute: u64, iterations: u32) -> Trace {
    gen_offload(&OffloadParams {
        layers: 8,
        offload: (1..=8).collect(),
        iterations,
        layer_bytes,
        compute_per_layer: compute,
        prefetch: true,
        seed: 0,
    })
    .unwrap()
}

fn kv(requests: u32, policy: SwapPolicy) -> Trace {
    gen_kvswap(&KvSwapParams {
        requests,
        policy,
        ..KvSwapParams::default()
    })
    .unwrap()
}

#[test]
fn calibration_matches_microbenchmark() {
    let m = CostModel::default();
    // (bytes, measured CC copy latency in us)
    let points = [(32e6 as u64, 5252.1)];
    for (size, want) in points {
        let t = transfer_time(size, CopyMode::CcSync, &m, 1).unwrap();
        let got = t.completion_ns as f64 / 1e3;
        let residual = (got - want) / want;
        println!(
            "cc copy {size} B: model {got:.1} us, measured {want} us, residual {:.1}%",
            residual * 100.0
        );
        assert!(residual.abs() < 0.10);
    }
    let plain = transfer_time(4096, CopyMode::Plain, &m, 1).unwrap();
    assert_eq!(plain.api_latency_ns, 1430);
}

#[test]
fn zero_size_copy_rejected() {
    let m = CostModel::default();
    assert!(transfer_time(0, CopyMode::Plain, &m, 1).is_err());
    assert!(transfer_time(0, CopyMode::CcSync, &m, 4).is_err());
}

#[test]
fn pure_transfer_ratio_follows_bandwidths() {
    let m = CostModel::default();
    let size = 1u64 << 34;
    let plain = transfer_time(size, CopyMode::Plain, &m, 1)
        .unwrap()
        .completion_ns as f64;
    let cc = transfer_time(size, CopyMode::CcSync, &m, 1)
        .unwrap()
        .completion_ns as f64;
    let want = 5.83 / 55.31;
    assert!(((plain / cc) - want).abs() / want < 0.01, "{}", plain / cc);
}

#[test]
fn crypto_scales_with_workers_until_link_bound() {
    let m = CostModel::default();
    let size = 64 << 20;
    let times: Vec<u64> = (1..=8)
        .map(|w| {
            transfer_time(size, CopyMode::CcSync, &m, w)
                .unwrap()
                .completion_ns
        })
        .collect();
    assert!(times.windows(2).all(|w| w[1] <= w[0]));
    let link = m.fixed_overhead_cc_ns + ns_for(size, m.pcie_bw_cc);
    assert_eq!(
        times[7],
        link.max(m.fixed_overhead_cc_ns + m.crypto_ns(size, 8))
    );
}

#[test]
fn no_swap_trace_is_system_independent() {
    let t = Trace {
        header: TraceHeader {
            schema_version: SCHEMA_VERSION,
            profile: ModelProfile::default(),
            generator: GeneratorParams::Manual,
            blocks: Vec::new(),
        },
        events: (0..20)
            .map(|i| TraceEvent {
                time: i * 1000,
                kind: EventKind::Compute { duration: 50_000 },
            })
            .collect(),
    };
    let r: Vec<f64> = [System::NoCc, System::SyncCc, System::SpecPipe]
        .iter()
        .map(|&s| run(&t, &SimConfig::with(s, 3)).unwrap().throughput)
        .collect();
    assert_eq!(r[0], r[1]);
    assert_eq!(r[1], r[2]);
}

#[test]
fn runs_are_deterministic() {
    let t = gen_adversarial(&kv(12, SwapPolicy::Lifo), 0.5, 7).unwrap();
    let cfg = SimConfig::with(System::SpecPipe, 3);
    let opts = RunOptions {
        event_log: true,
        keep_payloads: false,
    };
    let a = run_detailed(&t, &cfg, opts).unwrap();
    let b = run_detailed(&t, &cfg, opts).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.event_log, b.event_log);
    assert_eq!(cfg.hash(), SimConfig::with(System::SpecPipe, 3).hash());
    assert_ne!(cfg.hash(), SimConfig::with(System::SpecPipe, 4).hash());
}

#[test]
fn event_log_preserves_trace_order() {
    let t = offload(1 << 20, 50_000, 2);
    let r = run_detailed(
        &t,
        &SimConfig::with(System::SpecPipe, 2),
        RunOptions {
            event_log: true,
            keep_payloads: false,
        },
    )
    .unwrap();
    let logged: Vec<&serde_json::Value> =
        r.event_log.iter().filter_map(|v| v.get("trace")).collect();
    assert_eq!(logged.len(), t.events.len());
    for (l, e) in logged.iter().zip(&t.events) {
        assert_eq!(**l, serde_json::to_value(e.kind).unwrap());
    }
}

#[test]
fn sandwich_and_worker_monotonicity() {
    let traces = [
        offload(4 << 20, 100_000, 4),
        kv(12, SwapPolicy::Lifo),
        kv(12, SwapPolicy::Fifo),
    ];
    for t in &traces {
        let no = run(t, &SimConfig::with(System::NoCc, 1))
            .unwrap()
            .throughput;
        let mut prev = 0.0;
        for w in 1..=8 {
            let sy = run(t, &SimConfig::with(System::SyncCc, w))
                .unwrap()
                .throughput;
            let sp = run(t, &SimConfig::with(System::SpecPipe, w))
                .unwrap()
                .throughput;
            assert!(no >= sp && sp >= sy, "w{w}: {no} {sp} {sy}");
            assert!(sp >= prev, "w{w}: {sp} < {prev}");
            prev = sp;
        }
    }
}

/// Random steady-state config: small blocks on a proportionally slower
/// link and crypto pool so stage times stay well above fixed overheads.
fn random_config(rng: &mut ChaCha8Rng) -> (u64, u64, SimConfig) {
    let scale = rng.gen_range(8.0..32.0);
    let bytes = rng.gen_range(64u64..=512) << 10;
    let compute = rng.gen_range(100_000..=2_000_000);
    let mut cfg = SimConfig::with(System::SpecPipe, rng.gen_range(1..=8));
    cfg.cost.pcie_bw_plain /= scale;
    cfg.cost.pcie_bw_cc /= scale;
    cfg.cost.crypto_bw_per_worker /= scale;
    (bytes, compute, cfg)
}

/// One stage dominates the others, and the serial per-copy host overhead
/// is at most 2% of it.
fn fully_overlappable(st: &StageTimes, cost: &CostModel) -> bool {
    let mut v = [st.encrypt_ns, st.transfer_ns, st.compute_ns];
    v.sort_unstable();
    v[2] as f64 >= 1.25 * v[1] as f64 && v[2] >= 50 * cost.fixed_overhead_cc_ns
}

#[test]
fn analytic_bound_is_an_upper_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (bytes, compute, cfg) = random_config(&mut rng);
        let m = run(&offload(bytes, compute, 10), &cfg).unwrap();
        let st = StageTimes::for_step(bytes, compute, &cfg);
        let bound = analytic_bound(&st);
        assert!(
            m.throughput <= bound * (1.0 + 1e-9),
            "{st:?}: {} > {bound}",
            m.throughput
        );
        if fully_overlappable(&st, &cfg.cost) {
            assert!(
                m.throughput >= 0.95 * bound,
                "{st:?}: {} vs {bound}",
                m.throughput
            );
        }
    }
}

#[test]
fn analytic_bound_ordering() {
    let cfg = |s, w| SimConfig::with(s, w);
    let b = |s, w| analytic_bound(&StageTimes::for_step(8 << 20, 100_000, &cfg(s, w)));
    assert!(b(System::NoCc, 1) >= b(System::SpecPipe, 1));
    assert!(b(System::SpecPipe, 8) >= b(System::SpecPipe, 1));
    let st = StageTimes {
        encrypt_ns: 3,
        transfer_ns: 9,
        compute_ns: 5,
    };
    assert_eq!(st.bottleneck_ns(), 9);
    assert_eq!(analytic_bound(&st), 1e9 / 9.0);
}
