use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use specpipe::simulator::{run, SimConfig, System};
use specpipe::workload::{gen_offload, OffloadParams, Trace};

fn trace() -> Trace {
    gen_offload(&OffloadParams {
        layers: 8,
        offload: (1..=8).collect(),
        iterations: 2,
        layer_bytes: 1 << 20,
        compute_per_layer: 100_000,
        prefetch: true,
        seed: 0,
    })
    .unwrap()
}

/// Speculative sealing on the rayon pool versus inline.
fn sealing(c: &mut Criterion) {
    let t = trace();
    let mut g = c.benchmark_group("sealing");
    g.sample_size(10);
    for parallel in [false, true] {
        let mut cfg = SimConfig::with(System::SpecPipe, 4);
        cfg.parallel = parallel;
        let name = if parallel { "rayon" } else { "sequential" };
        g.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| {
            b.iter(|| run(&t, cfg).unwrap())
        });
    }
    g.finish();
}

/// A worker-count sweep, one simulation per config.
fn sweep(c: &mut Criterion) {
    let t = trace();
    let cfgs: Vec<SimConfig> = (1..=8)
        .map(|w| SimConfig::with(System::SpecPipe, w))
        .collect();
    let mut g = c.benchmark_group("sweep");
    g.sample_size(10);
    g.bench_function("sequential", |b| {
        b.iter(|| {
            cfgs.iter()
                .map(|cfg| run(&t, cfg).unwrap().throughput)
                .collect::<Vec<_>>()
        })
    });
    #[cfg(feature = "parallel")]
    g.bench_function("rayon", |b| {
        use rayon::prelude::*;
        b.iter(|| {
            cfgs.par_iter()
                .map(|cfg| run(&t, cfg).unwrap().throughput)
                .collect::<Vec<_>>()
        })
    });
    g.finish();
}

criterion_group!(benches, sealing, sweep);
criterion_main!(benches);
