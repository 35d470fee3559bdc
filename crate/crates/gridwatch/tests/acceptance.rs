//! Acceptance suite: every release criterion as one test, printing one
//! pass/fail line. Tolerances are pinned here, not configured elsewhere.

use std::collections::{HashMap, HashSet};
use std::net::Ipv4Addr;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use gridwatch::alert::{write_log, AlertSink, ClockMode};
use gridwatch::automata::{new_automaton, InputSymbol, Role, State};
use gridwatch::engine::{Engine, EngineOptions};
use gridwatch::harness::{
    default_rule_config, generate_conformant_load, generate_demo_capture,
    generate_rtt_probe_capture, generate_scenario, generate_violating_load, percentile, replay,
    score, testbed_fixture, LabeledCapture, ReplaySpeed, ScenarioId, ScenarioParams,
};
use gridwatch::iec104::{
    cot, encode_apdu, split_frames, type_ids, Apdu, Asdu, InformationObject, ObjectValue, UFunction,
};
use gridwatch::packet::{build_tcp_packet, decode_packet, tcp_flags, MacAddr, RawPacket};
use gridwatch::rules::{export_rules, generate_rules, import_rules, SpecificationBase};

fn compiled_rules() -> SpecificationBase {
    let doc = export_rules(&generate_rules(&testbed_fixture(), &default_rule_config()).unwrap());
    import_rules(&doc).unwrap()
}

fn run_capture(
    sb: &SpecificationBase,
    capture: &LabeledCapture,
) -> (AlertSink, Vec<gridwatch::InspectionReport>) {
    let mut engine = Engine::new(sb.clone(), EngineOptions::default());
    let mut sink = AlertSink::new(ClockMode::Wall);
    let (reports, _) = replay(
        &mut engine,
        &mut sink,
        capture,
        ReplaySpeed::AsFastAsPossible,
    );
    (sink, reports)
}

#[test]
fn criterion_confusion_table_reproduction() {
    let begin = Instant::now();
    let gim = testbed_fixture();
    let params = ScenarioParams::default();

    for seed in 1..=5u64 {
        // Full pipeline: compile -> export -> import, generate -> pcap ->
        // parse, inspect, score.
        let sb = compiled_rules();
        for (id, want_tp, want_fn, check_tn) in [
            (ScenarioId::S1, 0u64, 0u64, Some(200u64)),
            (ScenarioId::S2A, 115, 0, None),
            (ScenarioId::S2B1, 10, 0, None),
            (ScenarioId::S2B2, 0, 10, None),
        ] {
            let generated = generate_scenario(id, seed, &gim, &params).unwrap();
            let packets = gridwatch::pcap::read_pcap(&generated.to_pcap()).unwrap();
            let capture = LabeledCapture {
                packets,
                labels: generated.labels.clone(),
            };
            let (sink, _) = run_capture(&sb, &capture);
            let cm = score(sink.records(), &capture.labels).unwrap();
            assert_eq!(cm.tp, want_tp, "seed {seed} {id:?}: {cm}");
            assert_eq!(cm.fne, want_fn, "seed {seed} {id:?}: {cm}");
            assert_eq!(cm.fp, 0, "seed {seed} {id:?}: {cm}");
            if let Some(tn) = check_tn {
                assert_eq!(cm.tn, tn, "seed {seed} {id:?}: {cm}");
            }
            assert_eq!(cm.total(), capture.labels.len() as u64);
        }
    }

    let elapsed = begin.elapsed();
    assert!(
        elapsed.as_secs() < 30,
        "pipeline took {elapsed:?}, budget is 30 s"
    );
    println!("[PASS] confusion-table reproduction, seeds 1..5 in {elapsed:?}");
}

#[test]
fn criterion_alert_log_golden_file() {
    let golden = include_str!("data/demo_alerts.log");
    let capture = generate_demo_capture(&testbed_fixture()).unwrap();
    let sb = compiled_rules();
    let mut engine = Engine::new(sb, EngineOptions::default());
    let mut sink = AlertSink::new(ClockMode::parse("fixed:14.04.2022 10:47:09").unwrap());
    replay(
        &mut engine,
        &mut sink,
        &capture,
        ReplaySpeed::AsFastAsPossible,
    );

    let mut produced = Vec::new();
    write_log(sink.alerts(), &mut produced).unwrap();
    let produced = String::from_utf8(produced).unwrap();
    assert_eq!(
        produced, golden,
        "alert log must reproduce the reference byte for byte"
    );

    // The log parser recovers the same alerts.
    let parsed = gridwatch::alert::parse_log(&produced).unwrap();
    assert_eq!(parsed, sink.alerts());
    println!(
        "[PASS] golden alert log reproduced byte-for-byte ({} sections)",
        parsed.len()
    );
}

#[test]
fn criterion_rtt_false_positive_behavior() {
    let gim = testbed_fixture();
    let choices = [50u64, 80, 110, 140, 180];
    let capture = generate_rtt_probe_capture(&gim, 11, 15, &choices).unwrap();

    let narrow = {
        let mut sb = compiled_rules();
        sb.max_rtt_ms = 100.0;
        let (sink, _) = run_capture(&sb, &capture);
        score(sink.records(), &capture.labels).unwrap()
    };
    assert!(
        narrow.fp > 0,
        "narrow bound must misfire on benign traffic: {narrow}"
    );

    // Re-parameterize with the 95th percentile of the observed samples.
    let observed = {
        let sb = compiled_rules();
        let mut engine = Engine::new(sb, EngineOptions::default());
        let mut sink = AlertSink::new(ClockMode::Wall);
        let (_, stats) = replay(
            &mut engine,
            &mut sink,
            &capture,
            ReplaySpeed::AsFastAsPossible,
        );
        stats.rtt_samples_ms
    };
    let wide = {
        let mut sb = compiled_rules();
        sb.max_rtt_ms = percentile(&observed, 0.95);
        let (sink, _) = run_capture(&sb, &capture);
        score(sink.records(), &capture.labels).unwrap()
    };
    assert_eq!(wide.fp, 0, "95th-percentile bound must be silent: {wide}");
    println!(
        "[PASS] RTT bound behavior: fp={} at 100 ms, fp=0 at p95={:.1} ms over {} samples",
        narrow.fp,
        percentile(&observed, 0.95),
        observed.len()
    );
}

#[test]
fn criterion_performance_proxy() {
    let gim = testbed_fixture();
    let sb = compiled_rules();
    let conformant = generate_conformant_load(&gim, 42, 10_000).unwrap();
    let violating = generate_violating_load(&gim, 43, 10_000).unwrap();
    assert!(conformant.packets.len() >= 10_000);
    assert!(violating.packets.len() >= 10_000);

    let mut engine = Engine::new(sb.clone(), EngineOptions::default());
    let mut sink = AlertSink::new(ClockMode::Wall);
    let (reports_ok, stats_ok) = replay(
        &mut engine,
        &mut sink,
        &conformant,
        ReplaySpeed::AsFastAsPossible,
    );
    let valid_us: Vec<f64> = reports_ok
        .iter()
        .zip(&stats_ok.per_packet_us)
        .filter(|(r, _)| r.violations.is_empty())
        .map(|(_, us)| *us as f64)
        .collect();
    assert_eq!(
        valid_us.len(),
        conformant.packets.len(),
        "conformant load must stay alert-free"
    );

    let mut engine = Engine::new(sb, EngineOptions::default());
    let mut sink = AlertSink::new(ClockMode::Wall);
    let (reports_bad, stats_bad) = replay(
        &mut engine,
        &mut sink,
        &violating,
        ReplaySpeed::AsFastAsPossible,
    );
    let invalid_us: Vec<f64> = reports_bad
        .iter()
        .zip(&stats_bad.per_packet_us)
        .filter(|(r, _)| !r.violations.is_empty())
        .map(|(_, us)| *us as f64)
        .collect();
    assert!(
        invalid_us.len() > 1_000,
        "violating load must flag its data packets"
    );

    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let mean_valid_ms = mean(&valid_us) / 1_000.0;
    let mean_invalid_ms = mean(&invalid_us) / 1_000.0;
    assert!(
        mean_valid_ms <= 1.0,
        "conformant mean {mean_valid_ms:.4} ms exceeds 1.0 ms"
    );
    assert!(
        mean_invalid_ms <= 5.0,
        "violating mean {mean_invalid_ms:.4} ms exceeds 5.0 ms"
    );
    assert!(
        mean_invalid_ms > mean_valid_ms,
        "violating packets must be slower: {mean_invalid_ms:.4} vs {mean_valid_ms:.4} ms"
    );
    println!(
        "[PASS] latency proxy: conformant {mean_valid_ms:.4} ms, violating {mean_invalid_ms:.4} ms over {}+{} packets",
        valid_us.len(),
        invalid_us.len()
    );
}

// ---- property suites, >= 1000 randomized cases each ----------------------

fn arb_asdu() -> impl Strategy<Value = Asdu> {
    let obj_count = 1..=6usize;
    (
        prop_oneof![
            Just(type_ids::M_SP_NA_1),
            Just(type_ids::M_ME_NC_1),
            Just(type_ids::M_ME_TF_1),
            Just(type_ids::C_SC_NA_1),
            Just(type_ids::C_SE_NC_1),
            Just(type_ids::C_IC_NA_1),
        ],
        0u8..64,
        any::<bool>(),
        any::<bool>(),
        any::<u8>(),
        any::<u16>(),
        obj_count,
        any::<bool>(),
        0u32..0x00F0_0000,
        proptest::collection::vec((-1.0e6f32..1.0e6, any::<u8>(), any::<[u8; 7]>()), 6),
    )
        .prop_map(
            |(type_id, cause, negative, test, originator, ca, n, sq, base_ioa, elements)| {
                let objects = (0..n)
                    .map(|i| {
                        let (v, q, tag) = elements[i];
                        let ioa = if sq {
                            base_ioa + i as u32
                        } else {
                            base_ioa + (i as u32) * 7
                        };
                        let mut obj = match type_id {
                            type_ids::M_SP_NA_1 | type_ids::C_SC_NA_1 => InformationObject::new(
                                ioa,
                                ObjectValue::Bool(q & 1 == 1),
                                Some(q & 0xFE),
                            ),
                            type_ids::C_IC_NA_1 => {
                                InformationObject::new(ioa, ObjectValue::None, Some(q))
                            }
                            _ => InformationObject::new(ioa, ObjectValue::Float(v), Some(q)),
                        };
                        if type_id == type_ids::M_ME_TF_1 {
                            obj = obj.with_time_tag(tag);
                        }
                        obj
                    })
                    .collect();
                let mut asdu = Asdu::new(type_id, cause, ca, objects);
                asdu.sequence_flag = sq;
                asdu.negative = negative;
                asdu.test = test;
                asdu.originator = originator;
                asdu
            },
        )
}

fn arb_apdu() -> impl Strategy<Value = Apdu> {
    prop_oneof![
        prop_oneof![
            Just(UFunction::StartDtAct),
            Just(UFunction::StartDtCon),
            Just(UFunction::StopDtAct),
            Just(UFunction::StopDtCon),
            Just(UFunction::TestFrAct),
            Just(UFunction::TestFrCon),
        ]
        .prop_map(Apdu::u_frame),
        (0u16..32768).prop_map(Apdu::s_frame),
        (0u16..32768, 0u16..32768, arb_asdu()).prop_map(
            |(s, r, asdu)| Apdu::i_frame(s, r, asdu).expect("generator builds valid frames")
        ),
    ]
}

#[test]
fn property_codec_round_trip() {
    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        ..PropConfig::default()
    });
    runner
        .run(&arb_apdu(), |apdu| {
            let bytes = encode_apdu(&apdu).expect("valid frame encodes");
            let scan = split_frames(&bytes);
            prop_assert_eq!(scan.frames.len(), 1);
            prop_assert_eq!(scan.residue, 0);
            prop_assert_eq!(scan.frames[0].apdu(), Some(&apdu));
            // Sequence fields stay within 15 bits.
            if let Some(a) = scan.frames[0].apdu() {
                if let Some(s) = a.apci.send_seq() {
                    prop_assert!(s < 32768);
                }
                if let Some(r) = a.apci.recv_seq() {
                    prop_assert!(r < 32768);
                }
            }
            Ok(())
        })
        .unwrap();

    // Frame split: concatenations decode pairwise in wire order.
    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        ..PropConfig::default()
    });
    runner
        .run(&(arb_apdu(), arb_apdu()), |(a, b)| {
            let mut bytes = encode_apdu(&a).unwrap();
            bytes.extend_from_slice(&encode_apdu(&b).unwrap());
            let scan = split_frames(&bytes);
            prop_assert_eq!(scan.frames.len(), 2);
            prop_assert_eq!(scan.frames[0].apdu(), Some(&a));
            prop_assert_eq!(scan.frames[1].apdu(), Some(&b));
            Ok(())
        })
        .unwrap();
    println!("[PASS] codec round trip + frame split, 1000 cases each");
}

#[test]
fn property_decode_offset_safety() {
    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        ..PropConfig::default()
    });
    runner
        .run(&proptest::collection::vec(any::<u8>(), 0..600), |bytes| {
            // Must never panic or read out of bounds, whatever the input.
            let scan = split_frames(&bytes);
            prop_assert!(scan.consumed <= bytes.len());
            prop_assert!(scan.residue <= bytes.len());
            let _ = decode_packet(&RawPacket::new(0, 0, bytes));
            Ok(())
        })
        .unwrap();
    println!("[PASS] decode offset safety, 1000 fuzzed byte strings");
}

#[test]
fn property_automata_totality() {
    // Exhaustive: every (role, state, symbol) has exactly one defined step.
    let mut combos = 0;
    for role in [Role::Mtu, Role::Rtu] {
        for state in State::ALL {
            for symbol in InputSymbol::alphabet() {
                let mut a = new_automaton(role);
                a.state = state;
                let _ = a.step(symbol);
                assert!(State::ALL.contains(&a.state));
                combos += 1;
            }
        }
    }
    assert_eq!(combos, 2 * 4 * 17);

    // Randomized walks keep the machine total and deterministic.
    let alphabet = InputSymbol::alphabet();
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let role = if rng.gen() { Role::Mtu } else { Role::Rtu };
        let mut a = new_automaton(role);
        let mut b = new_automaton(role);
        for _ in 0..64 {
            let sym = alphabet[rng.gen_range(0..alphabet.len())];
            let out_a = a.step(sym);
            let out_b = b.step(sym);
            assert_eq!(out_a, out_b, "transition function must be deterministic");
            assert_eq!(a.state, b.state);
        }
    }
    println!("[PASS] automata totality: 136 exhaustive combos + 1000 random walks");
}

#[test]
fn property_conformant_traces_accepted() {
    let gim = testbed_fixture();
    let sb = compiled_rules();
    let params = ScenarioParams {
        packets: 40,
        ..ScenarioParams::default()
    };
    for seed in 0..1000u64 {
        let capture = generate_scenario(ScenarioId::S1, seed, &gim, &params).unwrap();
        let (sink, reports) = run_capture(&sb, &capture);
        assert!(
            sink.records().is_empty(),
            "seed {seed}: conformant trace produced {:?}",
            reports.iter().find(|r| !r.violations.is_empty())
        );
    }
    println!("[PASS] conformant traces accepted, 1000 seeded captures");
}

#[test]
fn property_startdt_deletion_detected() {
    use gridwatch::automata::{Direction, SymbolKind};

    // Random conformant traces as (from_client, kind) events. The client
    // side is the controlling station.
    let random_trace = |rng: &mut ChaCha20Rng| -> Vec<(bool, SymbolKind)> {
        let mut trace = vec![
            (true, SymbolKind::StartDtAct),
            (false, SymbolKind::StartDtCon),
        ];
        for _ in 0..rng.gen_range(3..30) {
            match rng.gen_range(0..4) {
                0 => trace.push((true, SymbolKind::IFrame)),
                1 => trace.push((false, SymbolKind::IFrame)),
                2 => trace.push((rng.gen(), SymbolKind::SFrame)),
                _ => {
                    let dir: bool = rng.gen();
                    trace.push((dir, SymbolKind::TestFrAct));
                    trace.push((!dir, SymbolKind::TestFrCon));
                }
            }
        }
        trace
    };

    let feed = |mtu: &mut gridwatch::automata::Automaton,
                rtu: &mut gridwatch::automata::Automaton,
                (from_client, kind): (bool, SymbolKind)| {
        let (mtu_dir, rtu_dir) = if from_client {
            (Direction::Sent, Direction::Received)
        } else {
            (Direction::Received, Direction::Sent)
        };
        (
            mtu.step(InputSymbol::Directed {
                direction: mtu_dir,
                kind,
            }),
            rtu.step(InputSymbol::Directed {
                direction: rtu_dir,
                kind,
            }),
        )
    };

    let mut rng = ChaCha20Rng::seed_from_u64(0xdead);
    for case in 0..1000 {
        let trace = random_trace(&mut rng);

        // The untouched trace is fully conformant.
        let mut mtu = new_automaton(Role::Mtu);
        let mut rtu = new_automaton(Role::Rtu);
        for step in &trace {
            let (a, b) = feed(&mut mtu, &mut rtu, *step);
            assert!(
                a.is_valid() && b.is_valid(),
                "case {case}: conformant trace rejected at {step:?}"
            );
        }

        // Without the STARTDT exchange the first numbered frame must be
        // rejected by both endpoint models.
        let mutated: Vec<(bool, SymbolKind)> = trace
            .iter()
            .copied()
            .filter(|(_, kind)| !matches!(kind, SymbolKind::StartDtAct | SymbolKind::StartDtCon))
            .collect();
        let mut mtu = new_automaton(Role::Mtu);
        let mut rtu = new_automaton(Role::Rtu);
        let mut saw_numbered = false;
        for step in &mutated {
            let numbered = matches!(step.1, SymbolKind::IFrame | SymbolKind::SFrame);
            let (a, b) = feed(&mut mtu, &mut rtu, *step);
            if numbered && !saw_numbered {
                saw_numbered = true;
                assert!(
                    !a.is_valid() && !b.is_valid(),
                    "case {case}: mutated trace accepted: {a:?} {b:?}"
                );
            } else if !numbered {
                assert!(
                    a.is_valid() && b.is_valid(),
                    "case {case}: keepalive rejected after mutation"
                );
            }
        }
        if !saw_numbered {
            continue; // keepalive-only trace; nothing to detect
        }
    }
    println!("[PASS] STARTDT-deletion mutations detected by both automata, 1000 traces");
}

#[test]
fn property_sequence_wraparound_matches_wide_oracle() {
    use gridwatch::automata::{Direction, SeqCheck, SeqCounters};

    // Unbounded reference counters; the implementation must track them
    // modulo 32768 through arbitrarily long conformant exchanges.
    #[derive(Default)]
    struct Oracle {
        sent: u64,
        received: u64,
    }

    let asdu = || {
        Asdu::new(
            type_ids::M_ME_NC_1,
            cot::SPONTANEOUS,
            1,
            vec![InformationObject::new(
                100,
                ObjectValue::Float(1.0),
                Some(0),
            )],
        )
    };

    let drive = |frames: u64, seed: u64| {
        let mut counters = SeqCounters::new();
        let mut peer = SeqCounters::new();
        let mut oracle = Oracle::default();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        while oracle.sent < frames {
            // A burst from this endpoint, then an acknowledgment back.
            let burst = rng.gen_range(1..=8u64);
            for _ in 0..burst {
                let apdu = Apdu::i_frame(
                    (oracle.sent % 32768) as u16,
                    (oracle.received % 32768) as u16,
                    asdu(),
                )
                .unwrap();
                assert_eq!(counters.check(&apdu.apci, Direction::Sent), SeqCheck::Ok);
                assert_eq!(peer.check(&apdu.apci, Direction::Received), SeqCheck::Ok);
                oracle.sent += 1;
            }
            let ack = Apdu::s_frame((oracle.sent % 32768) as u16);
            assert_eq!(peer.check(&ack.apci, Direction::Sent), SeqCheck::Ok);
            assert_eq!(counters.check(&ack.apci, Direction::Received), SeqCheck::Ok);
            assert_eq!(
                counters.vs,
                (oracle.sent % 32768) as u16,
                "send counter drifted"
            );
            assert_eq!(counters.unacked_sent(), 0);
            if rng.gen_bool(0.3) {
                // Occasional reverse-direction frame.
                let apdu = Apdu::i_frame(
                    (oracle.received % 32768) as u16,
                    (oracle.sent % 32768) as u16,
                    asdu(),
                )
                .unwrap();
                assert_eq!(peer.check(&apdu.apci, Direction::Sent), SeqCheck::Ok);
                assert_eq!(
                    counters.check(&apdu.apci, Direction::Received),
                    SeqCheck::Ok
                );
                oracle.received += 1;
                assert_eq!(
                    counters.vr,
                    (oracle.received % 32768) as u16,
                    "receive counter drifted"
                );
            }
        }
    };

    // One long run across the 32768 boundary, like a day of telemetry.
    drive(40_000, 7);
    // And a thousand randomized shorter exchanges.
    for seed in 0..1000u64 {
        drive(64, seed);
    }
    println!(
        "[PASS] sequence arithmetic matches the unbounded oracle (40000-frame run + 1000 cases)"
    );
}

#[test]
fn property_rule_generation_deterministic() {
    let gim = testbed_fixture();
    let config = default_rule_config();
    let reference = export_rules(&generate_rules(&gim, &config).unwrap());

    let mut rng = ChaCha20Rng::seed_from_u64(5);
    for case in 0..1000 {
        // Same model content, randomly permuted document order.
        let mut shuffled = gim.clone();
        for i in (1..shuffled.nodes.len()).rev() {
            shuffled.nodes.swap(i, rng.gen_range(0..=i));
        }
        for i in (1..shuffled.edges.len()).rev() {
            shuffled.edges.swap(i, rng.gen_range(0..=i));
        }
        let exported = export_rules(&generate_rules(&shuffled, &config).unwrap());
        assert_eq!(
            exported, reference,
            "case {case}: projection must not depend on document order"
        );

        // Export -> import -> export is the identity on bytes.
        let reimported = import_rules(&exported).unwrap();
        assert_eq!(export_rules(&reimported), exported);
    }
    println!("[PASS] rule generation deterministic under 1000 document permutations");
}

#[test]
fn property_idempotent_replay() {
    let gim = testbed_fixture();
    let sb = compiled_rules();
    for seed in 0..1000u64 {
        let id = match seed % 3 {
            0 => ScenarioId::S2A,
            1 => ScenarioId::S2B1,
            _ => ScenarioId::S1,
        };
        let params = ScenarioParams {
            packets: 40,
            ..ScenarioParams::default()
        };
        let capture = generate_scenario(id, seed, &gim, &params).unwrap();
        let (sink_a, _) = run_capture(&sb, &capture);
        let (sink_b, _) = run_capture(&sb, &capture);
        assert_eq!(sink_a.records(), sink_b.records(), "seed {seed} ({id:?})");
    }
    println!("[PASS] idempotent replay, 1000 seeded captures");
}

#[test]
fn property_order_insensitivity_across_connections() {
    let gim = testbed_fixture();
    let sb = compiled_rules();

    // Per-packet alert multiset, keyed by packet identity rather than
    // capture position.
    let alert_map = |capture: &LabeledCapture| -> HashMap<(u64, Vec<u8>), Vec<String>> {
        let (_, reports) = run_capture(&sb, capture);
        let mut map = HashMap::new();
        for (packet, report) in capture.packets.iter().zip(&reports) {
            let mut kinds: Vec<String> = report
                .violations
                .iter()
                .map(|v| format!("{}:{}", v.alert_type, v.reason))
                .collect();
            kinds.sort();
            map.insert((packet.ts_micros(), packet.link_bytes.clone()), kinds);
        }
        map
    };

    for seed in 0..100u64 {
        let params = ScenarioParams {
            packets: 60,
            ..ScenarioParams::default()
        };
        let capture = generate_scenario(ScenarioId::S2B1, seed, &gim, &params).unwrap();
        let baseline = alert_map(&capture);

        // Alternative interleaving: connections one after another, each
        // keeping its own packet order.
        let flow_key = |p: &RawPacket| {
            let l = decode_packet(p);
            let ip = l.ip.as_ref().unwrap();
            let tcp = l.tcp.as_ref().unwrap();
            let a = (ip.src_ip, tcp.src_port);
            let b = (ip.dst_ip, tcp.dst_port);
            if a <= b {
                (a, b)
            } else {
                (b, a)
            }
        };
        let mut keys: Vec<_> = capture.packets.iter().map(flow_key).collect();
        keys.sort();
        keys.dedup();
        let mut reordered = Vec::with_capacity(capture.packets.len());
        for key in keys {
            reordered.extend(
                capture
                    .packets
                    .iter()
                    .filter(|p| flow_key(p) == key)
                    .cloned(),
            );
        }
        assert_eq!(reordered.len(), capture.packets.len());
        let reordered = LabeledCapture {
            packets: reordered,
            labels: Vec::new(),
        };
        assert_eq!(alert_map(&reordered), baseline, "seed {seed}");
    }
    println!("[PASS] alert multiset invariant under connection re-interleaving, 100 seeds");
}

// ---- closed-world soundness against an independent classifier ------------

/// (asdu_type, direction, min, max) as read back from the document.
type DataPointFacts = (u8, String, Option<f64>, Option<f64>);

/// Whitelist facts re-read directly from the exported rule document.
struct RuleDocFacts {
    macs: HashSet<String>,
    ips: HashSet<String>,
    ports: HashSet<u16>,
    /// (client_ip, server_ip, server_port)
    channels: Vec<(String, String, u16)>,
    /// (server_ip, common_address, ioa) -> (asdu_type, direction, min, max)
    datapoints: HashMap<(String, u16, u32), DataPointFacts>,
}

fn read_rule_doc(doc: &str) -> RuleDocFacts {
    let v: serde_json::Value = serde_json::from_str(doc).unwrap();
    let mut facts = RuleDocFacts {
        macs: HashSet::new(),
        ips: HashSet::new(),
        ports: HashSet::new(),
        channels: Vec::new(),
        datapoints: HashMap::new(),
    };
    for e in v["endpoints"].as_array().unwrap() {
        facts.macs.insert(e["mac"].as_str().unwrap().to_string());
        facts.ips.insert(e["ip"].as_str().unwrap().to_string());
    }
    for c in v["channels"].as_array().unwrap() {
        let port = c["server_port"].as_u64().unwrap() as u16;
        facts.ports.insert(port);
        facts.channels.push((
            c["client_ip"].as_str().unwrap().to_string(),
            c["server_ip"].as_str().unwrap().to_string(),
            port,
        ));
    }
    for p in v["client_ports"].as_array().unwrap() {
        facts.ports.insert(p.as_u64().unwrap() as u16);
    }
    for d in v["datapoints"].as_array().unwrap() {
        facts.datapoints.insert(
            (
                d["server_ip"].as_str().unwrap().to_string(),
                d["common_address"].as_u64().unwrap() as u16,
                d["ioa"].as_u64().unwrap() as u32,
            ),
            (
                d["asdu_type"].as_u64().unwrap() as u8,
                d["direction"].as_str().unwrap().to_string(),
                d["min_value"].as_f64(),
                d["max_value"].as_f64(),
            ),
        );
    }
    facts
}

/// Brute-force re-check of one packet against the document facts alone.
fn packet_in_spec(facts: &RuleDocFacts, packet: &RawPacket) -> bool {
    let layers = decode_packet(packet);
    let (Some(eth), Some(ip), Some(tcp)) = (&layers.eth, &layers.ip, &layers.tcp) else {
        return false;
    };
    if !ip.checksum_ok || !tcp.checksum_ok {
        return false;
    }
    if !facts.macs.contains(&eth.src_mac.to_string())
        || !facts.macs.contains(&eth.dst_mac.to_string())
    {
        return false;
    }
    let src = ip.src_ip.to_string();
    let dst = ip.dst_ip.to_string();
    if !facts.ips.contains(&src) || !facts.ips.contains(&dst) {
        return false;
    }
    if !facts.ports.contains(&tcp.src_port) || !facts.ports.contains(&tcp.dst_port) {
        return false;
    }
    let channel = facts.channels.iter().find(|(c, s, p)| {
        (*c == src && *s == dst && *p == tcp.dst_port)
            || (*c == dst && *s == src && *p == tcp.src_port)
    });
    let Some((client_ip, server_ip, _)) = channel else {
        return false;
    };
    let sender_is_client = src == *client_ip;

    for slot in &layers.iec104 {
        let Some(apdu) = slot.apdu() else {
            return false;
        };
        let Some(asdu) = &apdu.asdu else { continue };
        if asdu.is_opaque() {
            return false;
        }
        for obj in &asdu.objects {
            if asdu.type_id == 100 {
                let ok = obj.ioa == 0
                    && ((sender_is_client && matches!(asdu.cot, 6 | 8))
                        || (!sender_is_client && matches!(asdu.cot, 7 | 10)));
                if !ok {
                    return false;
                }
                continue;
            }
            let Some((want_type, direction, min, max)) =
                facts
                    .datapoints
                    .get(&(server_ip.clone(), asdu.common_address, obj.ioa))
            else {
                return false;
            };
            if *want_type != asdu.type_id {
                return false;
            }
            let direction_ok = match direction.as_str() {
                "MONITOR" => !sender_is_client,
                "CONTROL" => {
                    (sender_is_client && matches!(asdu.cot, 6 | 8))
                        || (!sender_is_client && matches!(asdu.cot, 7 | 10))
                }
                _ => false,
            };
            if !direction_ok {
                return false;
            }
            if *direction == *"CONTROL" && asdu.cot == 6 {
                if let ObjectValue::Float(v) = obj.value {
                    let v = v as f64;
                    if min.is_some_and(|lo| v < lo) || max.is_some_and(|hi| v > hi) {
                        return false;
                    }
                }
            }
        }
    }
    true
}

/// Random out-of-whitelist one-off packets mixed into a benign capture.
fn fuzz_capture(seed: u64) -> LabeledCapture {
    let gim = testbed_fixture();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let id = if seed.is_multiple_of(2) {
        ScenarioId::S2B1
    } else {
        ScenarioId::S2B2
    };
    let params = ScenarioParams {
        packets: 60,
        ..ScenarioParams::default()
    };
    let base = generate_scenario(id, seed, &gim, &params).unwrap();

    let known_macs = [
        "02:42:ad:18:00:02",
        "02:42:ad:18:00:0b",
        "02:42:ad:18:00:0c",
        "02:42:ad:18:00:0d",
        "02:42:ad:18:00:14",
    ];
    let known_ips = [
        "173.24.0.2",
        "173.24.0.11",
        "173.24.0.12",
        "173.24.0.13",
        "173.24.0.20",
    ];
    let channels = [
        ("173.24.0.2", "173.24.0.11", 2404u16),
        ("173.24.0.2", "173.24.0.12", 2404),
        ("173.24.0.2", "173.24.0.13", 2404),
        ("173.24.0.20", "173.24.0.2", 22),
    ];

    let mut packets = base.packets.clone();
    let span = packets.last().unwrap().ts_micros() - packets[0].ts_micros();
    let start = packets[0].ts_micros();
    let rogues = rng.gen_range(5..15);
    let mut placed = 0;
    while placed < rogues {
        let mac = |rng: &mut ChaCha20Rng| -> MacAddr {
            if rng.gen_bool(0.5) {
                known_macs[rng.gen_range(0..known_macs.len())]
                    .parse()
                    .unwrap()
            } else {
                MacAddr([0x02, 0x42, rng.gen(), rng.gen(), rng.gen(), rng.gen()])
            }
        };
        let ip = |rng: &mut ChaCha20Rng| -> Ipv4Addr {
            if rng.gen_bool(0.5) {
                known_ips[rng.gen_range(0..known_ips.len())]
                    .parse()
                    .unwrap()
            } else {
                Ipv4Addr::new(173, 24, rng.gen_range(0..2), rng.gen_range(3..250))
            }
        };
        let port = |rng: &mut ChaCha20Rng| -> u16 {
            *[2404u16, 34404, 8080, rng.gen_range(1024..65000)]
                .get(rng.gen_range(0..4))
                .unwrap()
        };
        let (src_ip, dst_ip) = (ip(&mut rng), ip(&mut rng));
        let (src_port, dst_port) = (port(&mut rng), port(&mut rng));

        // Never touch a whitelisted channel: those flows stay untouched so
        // their state cannot be perturbed by the fuzz.
        let s = src_ip.to_string();
        let d = dst_ip.to_string();
        let channel_hit = channels.iter().any(|(c, sv, p)| {
            (*c == s && *sv == d && *p == dst_port) || (*c == d && *sv == s && *p == src_port)
        });
        if channel_hit {
            continue;
        }

        let payload: Vec<u8> = match rng.gen_range(0..4) {
            0 => encode_apdu(&Apdu::u_frame(UFunction::StartDtAct)).unwrap(),
            1 => {
                let asdu = Asdu::new(
                    type_ids::M_ME_NC_1,
                    cot::SPONTANEOUS,
                    rng.gen_range(1..4),
                    vec![InformationObject::new(
                        rng.gen_range(0..200000),
                        ObjectValue::Float(5.0),
                        Some(0),
                    )],
                );
                encode_apdu(
                    &Apdu::i_frame(rng.gen_range(0..100), rng.gen_range(0..100), asdu).unwrap(),
                )
                .unwrap()
            }
            2 => (0..rng.gen_range(1..40)).map(|_| rng.gen()).collect(),
            _ => Vec::new(),
        };
        let bytes = build_tcp_packet(
            mac(&mut rng),
            mac(&mut rng),
            src_ip,
            dst_ip,
            src_port,
            dst_port,
            rng.gen(),
            rng.gen(),
            tcp_flags::PSH | tcp_flags::ACK,
            &payload,
        );
        let ts = start + rng.gen_range(0..span);
        packets.push(RawPacket::new(
            ts / 1_000_000,
            ((ts % 1_000_000) * 1_000) as u32,
            bytes,
        ));
        placed += 1;
    }
    packets.sort_by_key(|p| p.ts_micros());
    LabeledCapture {
        packets,
        labels: Vec::new(),
    }
}

#[test]
fn criterion_closed_world_soundness() {
    let sb = generate_rules(&testbed_fixture(), &default_rule_config()).unwrap();
    let doc = export_rules(&sb);
    let facts = read_rule_doc(&doc);

    let mut checked = 0usize;
    let mut out_of_spec_total = 0usize;
    for seed in 0..200u64 {
        let capture = fuzz_capture(seed);
        let mut engine = Engine::new(sb.clone(), EngineOptions::default());
        let mut sink = AlertSink::new(ClockMode::Wall);
        let (reports, _) = replay(
            &mut engine,
            &mut sink,
            &capture,
            ReplaySpeed::AsFastAsPossible,
        );

        for (i, packet) in capture.packets.iter().enumerate() {
            let flagged = !reports[i].violations.is_empty();
            let in_spec = packet_in_spec(&facts, packet);
            assert_eq!(
                flagged, !in_spec,
                "seed {seed} packet {i}: engine={:?} classifier_in_spec={in_spec}",
                reports[i].violations
            );
            checked += 1;
            out_of_spec_total += usize::from(!in_spec);
        }
    }
    assert!(
        out_of_spec_total > 1000,
        "fuzz must exercise the violation path"
    );
    println!("[PASS] closed-world soundness: {checked} packets cross-checked, {out_of_spec_total} out-of-spec");
}
