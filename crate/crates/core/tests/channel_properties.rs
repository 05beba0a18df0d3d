use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specpipe::secure_channel::*;

fn pair(seed: u64) -> (ChannelEndpoint, ChannelEndpoint) {
    new_channel(&mut ChaCha8Rng::seed_from_u64(seed), 0, 0)
}

fn is_auth(r: Result<Delivery, ChannelError>) -> bool {
    matches!(r, Err(ChannelError::Auth { .. }))
}

#[test]
fn ten_thousand_roundtrips() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut cpu, mut gpu) = pair(2);
    for i in 0..10_000u64 {
        let len = rng.gen_range(1..=512);
        let mut data = vec![0u8; len];
        rng.fill(&mut data[..]);
        let dest = rng.gen();
        if i % 2 == 0 {
            cpu.send_data(dest, &data).unwrap();
            assert_eq!(gpu.recv().unwrap(), Delivery::Data { dest, bytes: data });
        } else {
            gpu.send_data(dest, &data).unwrap();
            assert_eq!(cpu.recv().unwrap(), Delivery::Data { dest, bytes: data });
        }
    }
    assert_eq!(cpu.send_iv(), 5000);
    assert_eq!(gpu.send_iv(), 5000);
}

#[test]
fn four_message_bookkeeping() {
    let (mut cpu, mut gpu) = new_channel(&mut ChaCha8Rng::seed_from_u64(3), 1, 5);
    cpu.send_data(0x100, b"weights").unwrap();
    cpu.send_data(0x200, b"inputs").unwrap();
    gpu.send_data(0x300, b"kv").unwrap();
    gpu.send_data(0x400, b"logits").unwrap();
    assert_eq!(cpu.send_iv(), 3);
    assert_eq!(gpu.send_iv(), 7);
    assert!(matches!(
        gpu.recv().unwrap(),
        Delivery::Data { dest: 0x100, .. }
    ));
    assert!(matches!(
        gpu.recv().unwrap(),
        Delivery::Data { dest: 0x200, .. }
    ));
    assert!(matches!(
        cpu.recv().unwrap(),
        Delivery::Data { dest: 0x300, .. }
    ));
    assert!(matches!(
        cpu.recv().unwrap(),
        Delivery::Data { dest: 0x400, .. }
    ));
    assert_eq!((gpu.recv_iv(), cpu.recv_iv()), (3, 7));
}

#[test]
fn nop_advances_both_counters() {
    let (mut cpu, mut gpu) = pair(4);
    cpu.nop();
    cpu.send_data(9, b"x").unwrap();
    assert_eq!(gpu.recv().unwrap(), Delivery::Nop);
    assert_eq!(
        gpu.recv().unwrap(),
        Delivery::Data {
            dest: 9,
            bytes: b"x".to_vec()
        }
    );
}

#[test]
fn wrong_iv_fails_auth() {
    let (mut cpu, mut gpu) = pair(5);
    let ct = cpu.encrypt_at(1, 0, b"ahead").unwrap();
    cpu.send(ct);
    assert!(is_auth(gpu.recv()));
}

fn loaded(seed: u64, msgs: &[Vec<u8>]) -> (ChannelEndpoint, ChannelEndpoint) {
    let (mut cpu, gpu) = pair(seed);
    for (i, m) in msgs.iter().enumerate() {
        cpu.send_data(i as u64, m).unwrap();
    }
    (cpu, gpu)
}

fn drain(gpu: &mut ChannelEndpoint) -> bool {
    while gpu.in_flight_inbound() > 0 {
        if is_auth(gpu.recv()) {
            return true;
        }
    }
    false
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn bit_flip_detected(msgs in prop::collection::vec(prop::collection::vec(any::<u8>(), 1..64), 1..8), pick in any::<prop::sample::Index>(), bit in any::<prop::sample::Index>()) {
        let (cpu, mut gpu) = loaded(6, &msgs);
        let i = pick.index(msgs.len());
        // Payload bits followed by tag bits.
        let bits = (msgs[i].len() + TAG_BYTES) * 8;
        cpu.outbound().inject_bit_flip(i, bit.index(bits));
        prop_assert!(drain(&mut gpu));
    }

    #[test]
    fn duplicate_detected(msgs in prop::collection::vec(prop::collection::vec(any::<u8>(), 1..64), 1..8), pick in any::<prop::sample::Index>()) {
        let (cpu, mut gpu) = loaded(7, &msgs);
        cpu.outbound().inject_duplicate(pick.index(msgs.len()));
        prop_assert!(drain(&mut gpu));
    }

    #[test]
    fn reorder_detected(msgs in prop::collection::vec(prop::collection::vec(any::<u8>(), 1..64), 2..8), a in any::<prop::sample::Index>(), b in any::<prop::sample::Index>()) {
        let n = msgs.len();
        let (i, j) = (a.index(n), b.index(n));
        prop_assume!(i != j);
        let (cpu, mut gpu) = loaded(8, &msgs);
        cpu.outbound().inject_swap(i, j);
        prop_assert!(drain(&mut gpu));
    }
}

#[test]
fn engine_never_reuses_an_iv() {
    use specpipe::engine::EngineEvent;
    use specpipe::simulator::*;
    use specpipe::workload::*;
    let base = gen_kvswap(&KvSwapParams::default()).unwrap();
    for rate in [0.0, 1.0] {
        let t = gen_adversarial(&base, rate, 3).unwrap();
        let opts = RunOptions {
            event_log: true,
            keep_payloads: false,
        };
        let r = run_detailed(&t, &SimConfig::with(System::SpecPipe, 2), opts).unwrap();
        let engine = r.engine.unwrap();
        assert_eq!(engine.stats().iv_audit_violations, 0);
        let (mut h2d, mut d2h) = (HashSet::new(), HashSet::new());
        for v in r.event_log.iter().filter_map(|v| v.get("engine")) {
            match serde_json::from_value(v.clone()).unwrap() {
                EngineEvent::Sent { iv, .. } => assert!(h2d.insert(iv), "h2d iv {iv} reused"),
                EngineEvent::D2hSent { iv, .. } => assert!(d2h.insert(iv), "d2h iv {iv} reused"),
                _ => {}
            }
        }
        assert!(!d2h.is_empty());
        let delivered: Vec<u64> = engine.device().delivered().iter().map(|m| m.iv).collect();
        assert_eq!(delivered.len(), h2d.len());
        assert!(delivered.windows(2).all(|w| w[0] < w[1]));
    }
}
