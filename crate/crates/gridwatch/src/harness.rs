//! Labeled scenario generation, capture replay and alert scoring.
//!
//! The generator is an independent implementation of the protocol
//! procedure: it simulates well-behaved master and outstation endpoints
//! (plus attackers) directly on top of the codec, so conformant captures
//! double as an oracle for the inspection engine.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alert::{AlertSink, StreamRecord};
use crate::engine::{Engine, EngineOptions, InspectionReport};
use crate::iec104::{
    cot, encode_apdu, type_ids, Apdu, Asdu, InformationObject, ObjectValue, UFunction,
};
use crate::model::{DataDirection, EdgeKind, Gim, Protocol};
use crate::packet::{build_tcp_packet, tcp_flags, MacAddr, RawPacket};
use crate::pcap::CaptureError;
use crate::rules::SpecificationBase;

/// Capture epoch: all scenarios start at this wall-clock second.
const EPOCH_S: u64 = 1_649_933_229;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("fixture unsuitable for scenario generation: {0}")]
    Fixture(String),
    #[error(transparent)]
    Capture(#[from] CaptureError),
    #[error("alert references packet index {0} which carries no label")]
    LabelMismatch(u64),
}

/// The bundled evaluation scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioId {
    /// Normal operation, 200 conformant packets.
    S1,
    /// S1 background plus a rogue endpoint conversation (115 packets).
    S2A,
    /// S1 background plus 10 injected frames with unregistered addresses.
    S2B1,
    /// S1 background plus 10 injected frames that stay fully in-spec.
    S2B2,
}

impl ScenarioId {
    pub fn tag(&self) -> &'static str {
        match self {
            ScenarioId::S1 => "s1",
            ScenarioId::S2A => "s2a",
            ScenarioId::S2B1 => "s2b1",
            ScenarioId::S2B2 => "s2b2",
        }
    }
}

impl FromStr for ScenarioId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(ScenarioId::S1),
            "s2a" => Ok(ScenarioId::S2A),
            "s2b1" | "s2b-i" => Ok(ScenarioId::S2B1),
            "s2b2" | "s2b-ii" => Ok(ScenarioId::S2B2),
            _ => Err(format!(
                "unknown scenario '{s}' (expected s1, s2a, s2b1 or s2b2)"
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioParams {
    /// Background packet count.
    pub packets: usize,
    /// Round trip delays the endpoints answer with, in milliseconds.
    pub rtt_choices_ms: Vec<u64>,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            packets: 200,
            rtt_choices_ms: vec![30, 60, 90, 120, 150],
        }
    }
}

/// Ground-truth record for one capture packet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketLabel {
    pub index: u64,
    pub malicious: bool,
    pub scenario_tag: String,
}

/// A capture with per-packet ground truth.
#[derive(Debug, Clone)]
pub struct LabeledCapture {
    pub packets: Vec<RawPacket>,
    pub labels: Vec<PacketLabel>,
}

impl LabeledCapture {
    pub fn to_pcap(&self) -> Vec<u8> {
        crate::pcap::write_pcap(&self.packets)
    }

    pub fn labels_jsonl(&self) -> String {
        let mut out = String::new();
        for label in &self.labels {
            out.push_str(&serde_json::to_string(label).expect("label serialization"));
            out.push('\n');
        }
        out
    }

    pub fn parse_labels(text: &str) -> Result<Vec<PacketLabel>, serde_json::Error> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect()
    }

    pub fn malicious_count(&self) -> usize {
        self.labels.iter().filter(|l| l.malicious).count()
    }
}

/// Per-packet classification tallies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fne: u64,
}

impl std::fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "tp={} tn={} fp={} fn={}",
            self.tp, self.tn, self.fp, self.fne
        )
    }
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fne
    }
}

#[derive(Debug, Clone, Copy)]
struct Station {
    mac: MacAddr,
    ip: Ipv4Addr,
    port: u16,
}

/// Everything the simulator needs to drive one monitored channel.
#[derive(Debug, Clone)]
struct ChannelFixture {
    client: Station,
    server: Station,
    common_address: u16,
    monitor_float_ioa: u32,
    monitor_tfloat_ioa: Option<u32>,
    monitor_state_ioa: Option<u32>,
    value_lo: f64,
    value_hi: f64,
}

fn derive_channels(gim: &Gim) -> Result<Vec<ChannelFixture>, HarnessError> {
    let mut out = Vec::new();
    for edge in &gim.edges {
        if edge.kind != EdgeKind::CommChannel {
            continue;
        }
        let Some(spec) = &edge.channel else { continue };
        if spec.protocol != Protocol::Iec104 {
            continue;
        }
        let client = gim.node(&spec.client).ok_or_else(|| {
            HarnessError::Fixture(format!("channel client '{}' missing", spec.client))
        })?;
        let server = gim.node(&spec.server).ok_or_else(|| {
            HarnessError::Fixture(format!("channel server '{}' missing", spec.server))
        })?;
        let client_port = client
            .ports
            .iter()
            .find(|p| p.protocol == Protocol::Iec104 && p.role == crate::model::PortRole::Client)
            .map(|p| p.port)
            .ok_or_else(|| {
                HarnessError::Fixture(format!(
                    "client '{}' declares no IEC104 client port",
                    client.id
                ))
            })?;
        let (client_mac, client_ip) = match (client.mac, client.ip) {
            (Some(m), Some(i)) => (m, i),
            _ => {
                return Err(HarnessError::Fixture(format!(
                    "client '{}' lacks addresses",
                    client.id
                )))
            }
        };
        let (server_mac, server_ip) = match (server.mac, server.ip) {
            (Some(m), Some(i)) => (m, i),
            _ => {
                return Err(HarnessError::Fixture(format!(
                    "server '{}' lacks addresses",
                    server.id
                )))
            }
        };
        let float_dp = server
            .data_points
            .iter()
            .find(|d| d.asdu_type == type_ids::M_ME_NC_1 && d.direction == DataDirection::Monitor)
            .ok_or_else(|| {
                HarnessError::Fixture(format!(
                    "server '{}' hosts no measured-float data point",
                    server.id
                ))
            })?;
        let p_max = server.op_limits.map(|l| l.p_max_kw).unwrap_or(10.0);
        out.push(ChannelFixture {
            client: Station {
                mac: client_mac,
                ip: client_ip,
                port: client_port,
            },
            server: Station {
                mac: server_mac,
                ip: server_ip,
                port: spec.server_port,
            },
            common_address: float_dp.common_address,
            monitor_float_ioa: float_dp.ioa,
            monitor_tfloat_ioa: server
                .data_points
                .iter()
                .find(|d| d.asdu_type == type_ids::M_ME_TF_1)
                .map(|d| d.ioa),
            monitor_state_ioa: server
                .data_points
                .iter()
                .find(|d| d.asdu_type == type_ids::M_SP_NA_1)
                .map(|d| d.ioa),
            value_lo: float_dp.min_value.unwrap_or(0.0),
            value_hi: float_dp.max_value.unwrap_or(p_max),
        });
    }
    if out.is_empty() {
        return Err(HarnessError::Fixture(
            "model defines no IEC104 channel".into(),
        ));
    }
    Ok(out)
}

/// CP56Time2a encoding of a capture timestamp.
fn cp56(ts_us: u64) -> [u8; 7] {
    use chrono::{Datelike, Timelike};
    let dt = chrono::DateTime::from_timestamp(
        (ts_us / 1_000_000) as i64,
        ((ts_us % 1_000_000) * 1_000) as u32,
    )
    .expect("valid timestamp")
    .naive_utc();
    let ms = (dt.second() * 1_000 + dt.and_utc().timestamp_subsec_millis()) as u16;
    [
        (ms & 0xFF) as u8,
        (ms >> 8) as u8,
        dt.minute() as u8,
        dt.hour() as u8,
        dt.day() as u8 | ((dt.weekday().number_from_monday() as u8) << 5),
        dt.month() as u8,
        (dt.year() % 100) as u8,
    ]
}

/// Generator output record: timestamp, flow id, order within the flow,
/// the packet itself, and its ground-truth label.
type SimPacket = (u64, usize, usize, RawPacket, bool, &'static str);

/// One simulated endpoint pair with its own transport and protocol state.
struct FlowSim {
    flow_id: usize,
    client: Station,
    server: Station,
    t_us: u64,
    client_seq: u32,
    server_seq: u32,
    client_vs: u16,
    server_vs: u16,
    /// Which side owes a transport acknowledgment for peer data.
    owes_ack: Option<bool>, // true: client owes
    out: Vec<SimPacket>,
    emitted: usize,
}

impl FlowSim {
    fn new(
        flow_id: usize,
        client: Station,
        server: Station,
        start_us: u64,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        Self {
            flow_id,
            client,
            server,
            t_us: start_us,
            client_seq: rng.gen(),
            server_seq: rng.gen(),
            client_vs: 0,
            server_vs: 0,
            owes_ack: None,
            out: Vec::new(),
            emitted: 0,
        }
    }

    fn emit(
        &mut self,
        from_client: bool,
        flags: u8,
        payload: &[u8],
        malicious: bool,
        tag: &'static str,
    ) {
        let (src, dst) = if from_client {
            (self.client, self.server)
        } else {
            (self.server, self.client)
        };
        let (seq, ack) = if from_client {
            (self.client_seq, self.server_seq)
        } else {
            (self.server_seq, self.client_seq)
        };
        let bytes = build_tcp_packet(
            src.mac, dst.mac, src.ip, dst.ip, src.port, dst.port, seq, ack, flags, payload,
        );
        let packet = RawPacket::new(
            self.t_us / 1_000_000,
            ((self.t_us % 1_000_000) * 1_000) as u32,
            bytes,
        );
        self.out.push((
            self.t_us,
            self.flow_id,
            self.emitted,
            packet,
            malicious,
            tag,
        ));
        self.emitted += 1;

        let consumed = payload.len() as u32 + if flags & tcp_flags::SYN != 0 { 1 } else { 0 };
        if from_client {
            self.client_seq = self.client_seq.wrapping_add(consumed);
        } else {
            self.server_seq = self.server_seq.wrapping_add(consumed);
        }
        if !payload.is_empty() {
            self.owes_ack = Some(!from_client);
        } else if flags & tcp_flags::ACK != 0 && self.owes_ack == Some(from_client) {
            self.owes_ack = None;
        }
        self.t_us += 1; // strictly increasing per-flow timestamps
    }

    fn advance_ms(&mut self, ms: u64) {
        self.t_us += ms * 1_000;
    }

    fn apdu(&mut self, from_client: bool, apdu: &Apdu, malicious: bool, tag: &'static str) {
        let payload = encode_apdu(apdu).expect("simulator builds valid frames");
        self.emit(
            from_client,
            tcp_flags::PSH | tcp_flags::ACK,
            &payload,
            malicious,
            tag,
        );
    }

    fn i_frame(&mut self, from_client: bool, asdu: Asdu, malicious: bool, tag: &'static str) {
        let (send, recv) = if from_client {
            let f = (self.client_vs, self.server_vs);
            self.client_vs = (self.client_vs + 1) % 32768;
            f
        } else {
            let f = (self.server_vs, self.client_vs);
            self.server_vs = (self.server_vs + 1) % 32768;
            f
        };
        let apdu = Apdu::i_frame(send, recv, asdu).expect("simulator builds valid frames");
        self.apdu(from_client, &apdu, malicious, tag);
    }

    fn s_frame(&mut self, from_client: bool, tag: &'static str) {
        let recv = if from_client {
            self.server_vs
        } else {
            self.client_vs
        };
        self.apdu(from_client, &Apdu::s_frame(recv), false, tag);
    }

    fn u_frame(&mut self, from_client: bool, f: UFunction, malicious: bool, tag: &'static str) {
        self.apdu(from_client, &Apdu::u_frame(f), malicious, tag);
    }

    fn pure_ack(&mut self, from_client: bool, tag: &'static str) {
        self.emit(from_client, tcp_flags::ACK, &[], false, tag);
    }

    /// Delayed transport acknowledgment, so no data probe lingers across
    /// event gaps.
    fn settle(&mut self, rng: &mut ChaCha20Rng, tag: &'static str) {
        if let Some(owing_client) = self.owes_ack {
            self.advance_ms(rng.gen_range(20..=40));
            self.pure_ack(owing_client, tag);
        }
    }

    fn handshake(&mut self, rng: &mut ChaCha20Rng, malicious: bool, tag: &'static str) {
        self.emit(true, tcp_flags::SYN, &[], malicious, tag);
        self.advance_ms(rng.gen_range(5..=15));
        self.emit(false, tcp_flags::SYN | tcp_flags::ACK, &[], malicious, tag);
        self.advance_ms(rng.gen_range(5..=15));
        self.emit(true, tcp_flags::ACK, &[], malicious, tag);
    }
}

fn interrogation_asdu(ca: u16, cause: u8) -> Asdu {
    Asdu::new(
        type_ids::C_IC_NA_1,
        cause,
        ca,
        vec![InformationObject::new(0, ObjectValue::None, Some(20))],
    )
}

fn measurement_asdu(ca: u16, ioa: u32, value: f32, cause: u8) -> Asdu {
    Asdu::new(
        type_ids::M_ME_NC_1,
        cause,
        ca,
        vec![InformationObject::new(
            ioa,
            ObjectValue::Float(value),
            Some(0),
        )],
    )
}

/// What the outstation puts into measurement replies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DataStyle {
    Registered,
    /// Three information objects with unregistered addresses per frame.
    UnknownTriple,
}

struct FlowState {
    value: f64,
    state_bit: bool,
    spont_rotation: usize,
}

/// Simulator events; the packet count of each is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Event {
    Interrogation,              // 6 packets
    Spontaneous,                // 3 packets
    Keepalive,                  // 3 packets
    BareKeepalive,              // 2 packets, only as the final event of a flow
    AckFiller,                  // 1 packet
    Inject { known_ioa: bool }, // 3 packets, 1 labeled malicious
}

impl Event {
    fn cost(&self) -> usize {
        match self {
            Event::Interrogation => 6,
            Event::Spontaneous | Event::Keepalive | Event::Inject { .. } => 3,
            Event::BareKeepalive => 2,
            Event::AckFiller => 1,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_event(
    sim: &mut FlowSim,
    fixture: &ChannelFixture,
    state: &mut FlowState,
    event: Event,
    rng: &mut ChaCha20Rng,
    rtt_choices: &[u64],
    style: DataStyle,
    inject_tag: &'static str,
) {
    let rtt = |rng: &mut ChaCha20Rng| rtt_choices[rng.gen_range(0..rtt_choices.len())];
    let ca = fixture.common_address;

    // Drift the measured value inside its registered range.
    let span = (fixture.value_hi - fixture.value_lo).max(1.0);
    state.value += rng.gen_range(-0.05..0.05) * span;
    state.value = state.value.clamp(
        fixture.value_lo + 0.02 * span,
        fixture.value_hi - 0.05 * span,
    );

    let data_asdu = |state: &FlowState, cause: u8| -> Asdu {
        match style {
            DataStyle::Registered => {
                measurement_asdu(ca, fixture.monitor_float_ioa, state.value as f32, cause)
            }
            DataStyle::UnknownTriple => Asdu::new(
                type_ids::M_ME_NC_1,
                cause,
                ca,
                (0..3)
                    .map(|i| {
                        InformationObject::new(
                            99_997 + i,
                            ObjectValue::Float(state.value as f32),
                            Some(0),
                        )
                    })
                    .collect(),
            ),
        }
    };

    sim.advance_ms(rng.gen_range(80..=150));
    match event {
        Event::Interrogation => {
            sim.i_frame(
                true,
                interrogation_asdu(ca, cot::ACTIVATION),
                false,
                "background",
            );
            sim.advance_ms(rtt(rng));
            sim.i_frame(
                false,
                interrogation_asdu(ca, cot::ACTIVATION_CON),
                false,
                "background",
            );
            sim.advance_ms(rng.gen_range(10..=20));
            sim.i_frame(
                false,
                data_asdu(state, cot::INTERROGATED),
                false,
                "background",
            );
            sim.advance_ms(rng.gen_range(10..=20));
            sim.i_frame(
                false,
                interrogation_asdu(ca, cot::ACTIVATION_TERM),
                false,
                "background",
            );
            sim.advance_ms(rng.gen_range(30..=50));
            sim.s_frame(true, "background");
            sim.settle(rng, "background");
        }
        Event::Spontaneous => {
            let asdu = match (
                style,
                state.spont_rotation % 3,
                fixture.monitor_tfloat_ioa,
                fixture.monitor_state_ioa,
            ) {
                (DataStyle::Registered, 1, Some(ioa), _) => {
                    let mut a = Asdu::new(
                        type_ids::M_ME_TF_1,
                        cot::SPONTANEOUS,
                        ca,
                        vec![InformationObject::new(
                            ioa,
                            ObjectValue::Float(state.value as f32),
                            Some(0),
                        )
                        .with_time_tag(cp56(sim.t_us))],
                    );
                    a.num_objects = 1;
                    a
                }
                (DataStyle::Registered, 2, _, Some(ioa)) => Asdu::new(
                    type_ids::M_SP_NA_1,
                    cot::SPONTANEOUS,
                    ca,
                    vec![InformationObject::new(
                        ioa,
                        ObjectValue::Bool(state.state_bit),
                        Some(0),
                    )],
                ),
                _ => data_asdu(state, cot::SPONTANEOUS),
            };
            state.spont_rotation += 1;
            state.state_bit ^= true;
            sim.i_frame(false, asdu, false, "background");
            sim.advance_ms(rng.gen_range(30..=50));
            sim.s_frame(true, "background");
            sim.settle(rng, "background");
        }
        Event::Keepalive => {
            sim.u_frame(true, UFunction::TestFrAct, false, "background");
            sim.advance_ms(rtt(rng));
            sim.u_frame(false, UFunction::TestFrCon, false, "background");
            sim.settle(rng, "background");
        }
        Event::BareKeepalive => {
            sim.u_frame(true, UFunction::TestFrAct, false, "background");
            sim.advance_ms(rtt(rng));
            sim.u_frame(false, UFunction::TestFrCon, false, "background");
        }
        Event::AckFiller => {
            sim.pure_ack(true, "background");
        }
        Event::Inject { known_ioa } => {
            // The interception model rewrites transport and application
            // counters consistently, so the frame splices into the stream.
            let asdu = if known_ioa {
                let noise = rng.gen_range(-0.3..0.3);
                let v = (state.value + noise).clamp(
                    fixture.value_lo + 0.01 * span,
                    fixture.value_hi - 0.01 * span,
                );
                measurement_asdu(ca, fixture.monitor_float_ioa, v as f32, cot::SPONTANEOUS)
            } else {
                measurement_asdu(ca, 99_999, state.value as f32, cot::SPONTANEOUS)
            };
            sim.i_frame(false, asdu, true, inject_tag);
            sim.advance_ms(rng.gen_range(30..=50));
            sim.s_frame(true, "background");
            sim.settle(rng, "background");
        }
    }
}

struct BackgroundSpec {
    packets: usize,
    injections: usize,
    inject_known_ioa: bool,
    inject_tag: &'static str,
    style: DataStyle,
}

fn generate_background(
    gim: &Gim,
    seed: u64,
    spec: &BackgroundSpec,
    rtt_choices: &[u64],
) -> Result<Vec<SimPacket>, HarnessError> {
    let channels = derive_channels(gim)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let start = EPOCH_S * 1_000_000;

    let setup_cost = 6 * channels.len();
    if spec.packets < setup_cost + 2 {
        return Err(HarnessError::Fixture(format!(
            "background of {} packets cannot cover connection setup ({} packets)",
            spec.packets, setup_cost
        )));
    }

    let mut sims: Vec<FlowSim> = Vec::new();
    let mut states: Vec<FlowState> = Vec::new();
    for (i, ch) in channels.iter().enumerate() {
        let mut sim = FlowSim::new(i, ch.client, ch.server, start + i as u64 * 37_000, &mut rng);
        // Connection setup: transport handshake plus STARTDT, 6 packets.
        sim.handshake(&mut rng, false, "background");
        sim.advance_ms(rng.gen_range(10..=30));
        sim.u_frame(true, UFunction::StartDtAct, false, "background");
        sim.advance_ms(rtt_choices[rng.gen_range(0..rtt_choices.len())]);
        sim.u_frame(false, UFunction::StartDtCon, false, "background");
        sim.settle(&mut rng, "background");
        let span = ch.value_hi - ch.value_lo;
        states.push(FlowState {
            value: ch.value_lo + rng.gen_range(0.3..0.6) * span,
            state_bit: rng.gen(),
            spont_rotation: rng.gen_range(0..3),
        });
        sims.push(sim);
    }

    // Split the remaining budget across flows and pick per-flow events.
    let content = spec.packets - setup_cost;
    let mut budgets = vec![content / channels.len(); channels.len()];
    for budget in budgets.iter_mut().take(content % channels.len()) {
        *budget += 1;
    }

    let mut plans: Vec<Vec<Event>> = Vec::new();
    for budget in &budgets {
        let mut plan = Vec::new();
        let mut r = *budget;
        while r >= 6 {
            let ev = match rng.gen_range(0..4) {
                0 => Event::Interrogation,
                1 | 2 => Event::Spontaneous,
                _ => Event::Keepalive,
            };
            r -= ev.cost();
            plan.push(ev);
        }
        while r >= 3 {
            let ev = if rng.gen_bool(0.5) {
                Event::Spontaneous
            } else {
                Event::Keepalive
            };
            r -= 3;
            plan.push(ev);
        }
        if r == 2 {
            plan.push(Event::BareKeepalive);
            r = 0;
        }
        if r == 1 {
            plan.push(Event::AckFiller);
        }
        plans.push(plan);
    }

    // Splice injection events into the background plans at random spots.
    for _ in 0..spec.injections {
        let f = rng.gen_range(0..plans.len());
        let at = rng.gen_range(0..=plans[f].len().saturating_sub(1));
        plans[f].insert(
            at,
            Event::Inject {
                known_ioa: spec.inject_known_ioa,
            },
        );
    }

    // Interleave: repeatedly run the next event of a random flow.
    let mut cursors = vec![0usize; plans.len()];
    loop {
        let live: Vec<usize> = (0..plans.len())
            .filter(|f| cursors[*f] < plans[*f].len())
            .collect();
        if live.is_empty() {
            break;
        }
        let f = live[rng.gen_range(0..live.len())];
        let ev = plans[f][cursors[f]];
        cursors[f] += 1;
        run_event(
            &mut sims[f],
            &channels[f],
            &mut states[f],
            ev,
            &mut rng,
            rtt_choices,
            spec.style,
            spec.inject_tag,
        );
    }

    let mut all: Vec<SimPacket> = sims.into_iter().flat_map(|s| s.out).collect();
    all.sort_by_key(|(ts, flow, ord, ..)| (*ts, *flow, *ord));
    assert_eq!(
        all.len(),
        spec.packets + 3 * spec.injections,
        "event cost accounting"
    );
    Ok(all)
}

/// The rogue conversation of the external-attacker scenario: a station with
/// unknown addresses runs STARTDT, interrogates, and receives data.
/// Exactly 115 packets.
fn rogue_conversation(gim: &Gim, seed: u64, start_us: u64) -> Result<Vec<SimPacket>, HarnessError> {
    let channels = derive_channels(gim)?;
    let target = &channels[0];
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x6f67_7565);
    let rogue = Station {
        mac: MacAddr([0x02, 0x42, 0xde, 0xad, 0xbe, 0x03]),
        ip: Ipv4Addr::new(173, 24, 0, 3),
        port: 59478,
    };
    let mut sim = FlowSim::new(usize::MAX, rogue, target.server, start_us, &mut rng);
    let tag = "s2a";
    let ca = target.common_address;

    sim.handshake(&mut rng, true, tag);
    // Relabel handshake packets: every frame of the conversation is hostile.
    for p in &mut sim.out {
        p.4 = true;
    }
    sim.advance_ms(rng.gen_range(10..=30));
    sim.u_frame(true, UFunction::StartDtAct, true, tag);
    sim.advance_ms(rng.gen_range(20..=60));
    sim.u_frame(false, UFunction::StartDtCon, true, tag);
    sim.advance_ms(rng.gen_range(10..=30));
    sim.i_frame(true, interrogation_asdu(ca, cot::ACTIVATION), true, tag);
    sim.advance_ms(rng.gen_range(20..=60));
    sim.i_frame(
        false,
        interrogation_asdu(ca, cot::ACTIVATION_CON),
        true,
        tag,
    );

    // 97 data frames with an acknowledgment after every tenth.
    let mut value = 7.5f64;
    for i in 0..97 {
        sim.advance_ms(rng.gen_range(10..=30));
        value += rng.gen_range(-0.2..0.2);
        sim.i_frame(
            false,
            measurement_asdu(
                ca,
                target.monitor_float_ioa,
                value as f32,
                cot::INTERROGATED,
            ),
            true,
            tag,
        );
        if i % 10 == 9 {
            sim.advance_ms(rng.gen_range(5..=15));
            let recv = sim.server_vs;
            sim.apdu(true, &Apdu::s_frame(recv), true, tag);
        }
    }
    sim.advance_ms(rng.gen_range(10..=30));
    sim.i_frame(
        false,
        interrogation_asdu(ca, cot::ACTIVATION_TERM),
        true,
        tag,
    );
    sim.advance_ms(rng.gen_range(5..=15));
    let recv = sim.server_vs;
    sim.apdu(true, &Apdu::s_frame(recv), true, tag);

    assert_eq!(sim.out.len(), 115, "rogue conversation script length");
    Ok(sim.out)
}

fn finalize(mut all: Vec<SimPacket>) -> LabeledCapture {
    all.sort_by_key(|(ts, flow, ord, ..)| (*ts, *flow, *ord));
    let mut packets = Vec::with_capacity(all.len());
    let mut labels = Vec::with_capacity(all.len());
    for (i, (_, _, _, packet, malicious, tag)) in all.into_iter().enumerate() {
        packets.push(packet);
        labels.push(PacketLabel {
            index: i as u64,
            malicious,
            scenario_tag: tag.to_string(),
        });
    }
    LabeledCapture { packets, labels }
}

/// Generate one of the bundled scenarios. Deterministic per seed.
pub fn generate_scenario(
    id: ScenarioId,
    seed: u64,
    gim: &Gim,
    params: &ScenarioParams,
) -> Result<LabeledCapture, HarnessError> {
    let base = BackgroundSpec {
        packets: params.packets,
        injections: 0,
        inject_known_ioa: false,
        inject_tag: "background",
        style: DataStyle::Registered,
    };
    let capture = match id {
        ScenarioId::S1 => finalize(generate_background(
            gim,
            seed,
            &base,
            &params.rtt_choices_ms,
        )?),
        ScenarioId::S2A => {
            let mut all = generate_background(gim, seed, &base, &params.rtt_choices_ms)?;
            let span_us = all
                .last()
                .map(|p| p.0)
                .unwrap_or(0)
                .saturating_sub(EPOCH_S * 1_000_000);
            let rogue_start = EPOCH_S * 1_000_000 + span_us / 3;
            all.extend(rogue_conversation(gim, seed, rogue_start)?);
            finalize(all)
        }
        ScenarioId::S2B1 => {
            let spec = BackgroundSpec {
                injections: 10,
                inject_tag: "s2b1",
                ..base
            };
            finalize(generate_background(
                gim,
                seed,
                &spec,
                &params.rtt_choices_ms,
            )?)
        }
        ScenarioId::S2B2 => {
            let spec = BackgroundSpec {
                injections: 10,
                inject_known_ioa: true,
                inject_tag: "s2b2",
                ..base
            };
            finalize(generate_background(
                gim,
                seed,
                &spec,
                &params.rtt_choices_ms,
            )?)
        }
    };
    Ok(capture)
}

/// Large conformant capture for throughput measurements.
pub fn generate_conformant_load(
    gim: &Gim,
    seed: u64,
    packets: usize,
) -> Result<LabeledCapture, HarnessError> {
    let spec = BackgroundSpec {
        packets,
        injections: 0,
        inject_known_ioa: false,
        inject_tag: "background",
        style: DataStyle::Registered,
    };
    Ok(finalize(generate_background(
        gim,
        seed,
        &spec,
        &ScenarioParams::default().rtt_choices_ms,
    )?))
}

/// Same traffic shape, but every measurement frame carries unregistered
/// addresses, so all data packets violate the rules.
pub fn generate_violating_load(
    gim: &Gim,
    seed: u64,
    packets: usize,
) -> Result<LabeledCapture, HarnessError> {
    let spec = BackgroundSpec {
        packets,
        injections: 0,
        inject_known_ioa: false,
        inject_tag: "background",
        style: DataStyle::UnknownTriple,
    };
    Ok(finalize(generate_background(
        gim,
        seed,
        &spec,
        &ScenarioParams::default().rtt_choices_ms,
    )?))
}

/// Keepalive probes whose response delays cycle through `choices_ms`.
/// The only data segments are the probes, so the measured round trip
/// times are exactly the configured delays plus the settle delays.
pub fn generate_rtt_probe_capture(
    gim: &Gim,
    seed: u64,
    probes: usize,
    choices_ms: &[u64],
) -> Result<LabeledCapture, HarnessError> {
    let channels = derive_channels(gim)?;
    let ch = &channels[0];
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut sim = FlowSim::new(0, ch.client, ch.server, EPOCH_S * 1_000_000, &mut rng);
    sim.handshake(&mut rng, false, "rtt");
    sim.advance_ms(20);
    sim.u_frame(true, UFunction::StartDtAct, false, "rtt");
    sim.advance_ms(30);
    sim.u_frame(false, UFunction::StartDtCon, false, "rtt");
    sim.settle(&mut rng, "rtt");
    for i in 0..probes {
        sim.advance_ms(rng.gen_range(500..=900));
        sim.u_frame(true, UFunction::TestFrAct, false, "rtt");
        sim.advance_ms(choices_ms[i % choices_ms.len()]);
        sim.u_frame(false, UFunction::TestFrCon, false, "rtt");
        sim.settle(&mut rng, "rtt");
    }
    Ok(finalize(sim.out))
}

/// Nearest-rank percentile of a sample set.
pub fn percentile(samples: &[f64], p: f64) -> f64 {
    assert!(!samples.is_empty(), "percentile of empty sample set");
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplaySpeed {
    AsFastAsPossible,
    /// Sleep up to 2 ms per inter-packet gap.
    Paced,
}

/// Per-run timing telemetry.
#[derive(Debug, Clone, Default)]
pub struct ReplayStats {
    /// Inspection latency per packet, microseconds, in capture order.
    pub per_packet_us: Vec<u64>,
    /// Round trip times the engine measured, milliseconds.
    pub rtt_samples_ms: Vec<f64>,
}

/// Feed a capture through an engine in timestamp order.
pub fn replay(
    engine: &mut Engine,
    sink: &mut AlertSink,
    capture: &LabeledCapture,
    speed: ReplaySpeed,
) -> (Vec<InspectionReport>, ReplayStats) {
    let mut reports = Vec::with_capacity(capture.packets.len());
    let mut stats = ReplayStats::default();
    if let Some(first) = capture.packets.first() {
        sink.note_capture_start(first.ts_micros());
    }
    let mut prev_ts = None;
    for packet in &capture.packets {
        if speed == ReplaySpeed::Paced {
            if let Some(prev) = prev_ts {
                let gap_us: u64 = packet.ts_micros().saturating_sub(prev).min(2_000);
                std::thread::sleep(std::time::Duration::from_micros(gap_us));
            }
            prev_ts = Some(packet.ts_micros());
        }
        let begin = Instant::now();
        let report = engine.inspect(packet);
        for draft in &report.violations {
            sink.emit(draft);
        }
        stats.per_packet_us.push(begin.elapsed().as_micros() as u64);
        reports.push(report);
    }
    stats.rtt_samples_ms = engine.rtt_samples_ms().to_vec();
    (reports, stats)
}

/// Replay with the connection table sharded across worker threads.
///
/// Packets are partitioned by flow so each connection is processed in
/// capture order by exactly one worker; drafts are merged back into capture
/// order before ids are assigned, so the output equals a sequential run.
pub fn replay_sharded(
    sb: &SpecificationBase,
    options: EngineOptions,
    sink: &mut AlertSink,
    capture: &LabeledCapture,
    workers: usize,
) -> (Vec<InspectionReport>, ReplayStats) {
    if workers <= 1 {
        let mut engine = Engine::new(sb.clone(), options);
        return replay(&mut engine, sink, capture, ReplaySpeed::AsFastAsPossible);
    }

    if let Some(first) = capture.packets.first() {
        sink.note_capture_start(first.ts_micros());
    }

    // Stable flow key: the unordered address/port pair.
    let shard_of = |packet: &RawPacket| -> usize {
        let layers = crate::packet::decode_packet(packet);
        let key = match (&layers.ip, &layers.tcp) {
            (Some(ip), Some(tcp)) => {
                let a = (ip.src_ip, tcp.src_port);
                let b = (ip.dst_ip, tcp.dst_port);
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                u32::from(lo.0) as u64
                    ^ ((lo.1 as u64) << 32)
                    ^ (u32::from(hi.0) as u64).rotate_left(17)
                    ^ ((hi.1 as u64) << 48)
            }
            _ => 0,
        };
        (key % workers as u64) as usize
    };

    let mut partitions: Vec<Vec<(u64, &RawPacket)>> = vec![Vec::new(); workers];
    for (i, packet) in capture.packets.iter().enumerate() {
        partitions[shard_of(packet)].push((i as u64, packet));
    }

    type WorkerOut = (Vec<InspectionReport>, Vec<(u64, u64)>, Vec<f64>);
    let results: Vec<WorkerOut> = std::thread::scope(|scope| {
        let handles: Vec<_> = partitions
            .iter()
            .map(|part| {
                scope.spawn(move || {
                    let mut engine = Engine::new(sb.clone(), options);
                    let mut reports = Vec::with_capacity(part.len());
                    let mut timings = Vec::with_capacity(part.len());
                    for (index, packet) in part {
                        let begin = Instant::now();
                        reports.push(engine.inspect_at(*index, packet));
                        timings.push((*index, begin.elapsed().as_micros() as u64));
                    }
                    (reports, timings, engine.rtt_samples_ms().to_vec())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });

    let mut reports: Vec<InspectionReport> = Vec::with_capacity(capture.packets.len());
    let mut per_packet: Vec<(u64, u64)> = Vec::with_capacity(capture.packets.len());
    let mut rtt = Vec::new();
    for (r, t, samples) in results {
        reports.extend(r);
        per_packet.extend(t);
        rtt.extend(samples);
    }
    reports.sort_by_key(|r| r.packet_index);
    per_packet.sort_by_key(|(i, _)| *i);
    for report in &reports {
        for draft in &report.violations {
            sink.emit(draft);
        }
    }
    let stats = ReplayStats {
        per_packet_us: per_packet.into_iter().map(|(_, us)| us).collect(),
        rtt_samples_ms: rtt,
    };
    (reports, stats)
}

/// Per-packet scoring: a packet is predicted malicious when at least one
/// alert references it.
pub fn score(
    records: &[StreamRecord],
    labels: &[PacketLabel],
) -> Result<ConfusionMatrix, HarnessError> {
    let truth: BTreeMap<u64, bool> = labels.iter().map(|l| (l.index, l.malicious)).collect();
    let mut flagged: BTreeMap<u64, bool> = BTreeMap::new();
    for record in records {
        if !truth.contains_key(&record.packet_index) {
            return Err(HarnessError::LabelMismatch(record.packet_index));
        }
        flagged.insert(record.packet_index, true);
    }
    let mut cm = ConfusionMatrix::default();
    for (index, malicious) in truth {
        let predicted = flagged.contains_key(&index);
        match (malicious, predicted) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fne += 1,
            (false, true) => cm.fp += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

/// Embedded copy of the evaluation infrastructure model.
pub fn testbed_fixture() -> Gim {
    crate::model::load_model(include_bytes!("../fixtures/testbed.gim.json"))
        .expect("bundled fixture is valid")
}

/// Embedded copy of the evaluation rule configuration.
pub fn default_rule_config() -> crate::rules::RuleConfig {
    crate::rules::RuleConfig::load(include_bytes!("../fixtures/testbed.rules.json"))
        .expect("bundled config is valid")
}

/// The demonstration capture behind the sample alert log: a short
/// conformant preamble, one frame from a rogue station that spoofs the
/// master's hardware address, and one out-of-role setpoint injected on the
/// monitored channel 51 seconds later.
pub fn generate_demo_capture(gim: &Gim) -> Result<LabeledCapture, HarnessError> {
    let channels = derive_channels(gim)?;
    let ch = &channels[0];
    let mut rng = ChaCha20Rng::seed_from_u64(0x11);
    let mut sim = FlowSim::new(0, ch.client, ch.server, EPOCH_S * 1_000_000, &mut rng);

    sim.handshake(&mut rng, false, "demo");
    sim.advance_ms(20);
    sim.u_frame(true, UFunction::StartDtAct, false, "demo");
    sim.advance_ms(40);
    sim.u_frame(false, UFunction::StartDtCon, false, "demo");
    sim.settle(&mut rng, "demo");

    // Rogue station: fresh flow, spoofed client MAC, unknown IP, 900 ms in.
    let rogue_ts = EPOCH_S * 1_000_000 + 900_000;
    let rogue_frame = encode_apdu(&Apdu::u_frame(UFunction::StartDtAct)).expect("valid frame");
    let rogue_bytes = build_tcp_packet(
        ch.client.mac,
        ch.server.mac,
        Ipv4Addr::new(173, 24, 0, 3),
        ch.server.ip,
        59478,
        ch.server.port,
        rng.gen(),
        0,
        tcp_flags::PSH | tcp_flags::ACK,
        &rogue_frame,
    );

    // Setpoint command sent by the outstation side of the monitored
    // channel, out of role and above the technical limit.
    sim.t_us = EPOCH_S * 1_000_000 + 51_200_000;
    let setpoint = Asdu::new(
        type_ids::C_SE_NC_1,
        cot::ACTIVATION,
        ch.common_address,
        vec![InformationObject::new(
            110,
            ObjectValue::Float(40.0),
            Some(0),
        )],
    );
    sim.i_frame(false, setpoint, true, "demo-fdi");

    let mut all = sim.out;
    all.push((
        rogue_ts,
        1,
        0,
        RawPacket::new(
            rogue_ts / 1_000_000,
            ((rogue_ts % 1_000_000) * 1_000) as u32,
            rogue_bytes,
        ),
        true,
        "demo-rogue",
    ));
    Ok(finalize(all))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alert::ClockMode;
    use crate::rules::generate_rules;

    fn sb() -> SpecificationBase {
        generate_rules(&testbed_fixture(), &default_rule_config()).unwrap()
    }

    #[test]
    fn fixture_compiles_to_twelve_datapoints() {
        let sb = sb();
        // Brute-force count: every data point hosted by an outstation.
        let hosted: usize = testbed_fixture()
            .nodes
            .iter()
            .filter(|n| n.kind == crate::model::NodeKind::Rtu)
            .map(|n| n.data_points.len())
            .sum();
        assert_eq!(hosted, 12);
        assert_eq!(sb.datapoints.len(), hosted);
        assert_eq!(sb.endpoints.len(), 5);
        assert_eq!(sb.channels.len(), 4);
    }

    #[test]
    fn paced_replay_matches_fast_replay() {
        let c = generate_demo_capture(&testbed_fixture()).unwrap();
        let mut fast_sink = AlertSink::new(ClockMode::Wall);
        let mut engine = Engine::new(sb(), EngineOptions::default());
        let (fast_reports, _) = replay(
            &mut engine,
            &mut fast_sink,
            &c,
            ReplaySpeed::AsFastAsPossible,
        );

        let mut paced_sink = AlertSink::new(ClockMode::Wall);
        let mut engine = Engine::new(sb(), EngineOptions::default());
        let (paced_reports, _) = replay(&mut engine, &mut paced_sink, &c, ReplaySpeed::Paced);

        let kinds = |rs: &[InspectionReport]| {
            rs.iter()
                .map(|r| {
                    r.violations
                        .iter()
                        .map(|v| v.alert_type)
                        .collect::<Vec<_>>()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(kinds(&fast_reports), kinds(&paced_reports));
    }

    #[test]
    fn s1_has_exactly_200_benign_packets() {
        let c = generate_scenario(
            ScenarioId::S1,
            1,
            &testbed_fixture(),
            &ScenarioParams::default(),
        )
        .unwrap();
        assert_eq!(c.packets.len(), 200);
        assert_eq!(c.malicious_count(), 0);
        assert_eq!(c.labels.len(), 200);
    }

    #[test]
    fn s2a_has_exactly_115_malicious_packets() {
        let c = generate_scenario(
            ScenarioId::S2A,
            1,
            &testbed_fixture(),
            &ScenarioParams::default(),
        )
        .unwrap();
        assert_eq!(c.malicious_count(), 115);
        assert_eq!(c.packets.len(), 315);
    }

    #[test]
    fn injection_scenarios_have_ten_malicious_each() {
        for id in [ScenarioId::S2B1, ScenarioId::S2B2] {
            let c =
                generate_scenario(id, 3, &testbed_fixture(), &ScenarioParams::default()).unwrap();
            assert_eq!(c.malicious_count(), 10, "{id:?}");
            assert_eq!(c.packets.len(), 230, "{id:?}");
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let p = ScenarioParams::default();
        let a = generate_scenario(ScenarioId::S2A, 7, &testbed_fixture(), &p).unwrap();
        let b = generate_scenario(ScenarioId::S2A, 7, &testbed_fixture(), &p).unwrap();
        assert_eq!(a.to_pcap(), b.to_pcap());
        assert_eq!(a.labels_jsonl(), b.labels_jsonl());
        let c = generate_scenario(ScenarioId::S2A, 8, &testbed_fixture(), &p).unwrap();
        assert_ne!(a.to_pcap(), c.to_pcap());
    }

    #[test]
    fn capture_timestamps_are_sorted() {
        let c = generate_scenario(
            ScenarioId::S2A,
            2,
            &testbed_fixture(),
            &ScenarioParams::default(),
        )
        .unwrap();
        for w in c.packets.windows(2) {
            assert!(w[0].ts_micros() <= w[1].ts_micros());
        }
    }

    #[test]
    fn s1_replay_is_alert_free() {
        let c = generate_scenario(
            ScenarioId::S1,
            1,
            &testbed_fixture(),
            &ScenarioParams::default(),
        )
        .unwrap();
        let mut engine = Engine::new(sb(), EngineOptions::default());
        let mut sink = AlertSink::new(ClockMode::Wall);
        let (reports, _) = replay(&mut engine, &mut sink, &c, ReplaySpeed::AsFastAsPossible);
        let noisy: Vec<_> = reports
            .iter()
            .filter(|r| !r.violations.is_empty())
            .collect();
        assert!(
            noisy.is_empty(),
            "benign capture produced alerts: {:?}",
            noisy.first()
        );
    }

    #[test]
    fn scoring_matches_scenario_expectations() {
        let gim = testbed_fixture();
        let rules = sb();
        let expect = [
            (ScenarioId::S1, 0u64, 0u64),
            (ScenarioId::S2A, 115, 0),
            (ScenarioId::S2B1, 10, 0),
            (ScenarioId::S2B2, 0, 10),
        ];
        for (id, tp, fne) in expect {
            let c = generate_scenario(id, 5, &gim, &ScenarioParams::default()).unwrap();
            let mut engine = Engine::new(rules.clone(), EngineOptions::default());
            let mut sink = AlertSink::new(ClockMode::Wall);
            replay(&mut engine, &mut sink, &c, ReplaySpeed::AsFastAsPossible);
            let cm = score(sink.records(), &c.labels).unwrap();
            assert_eq!((cm.tp, cm.fne, cm.fp), (tp, fne, 0), "{id:?}: {cm}");
            assert_eq!(cm.total(), c.labels.len() as u64);
        }
    }

    #[test]
    fn injected_frame_differs_only_in_payload_values() {
        let c = generate_scenario(
            ScenarioId::S2B2,
            9,
            &testbed_fixture(),
            &ScenarioParams::default(),
        )
        .unwrap();
        let injected: Vec<usize> = c
            .labels
            .iter()
            .filter(|l| l.malicious)
            .map(|l| l.index as usize)
            .collect();
        assert_eq!(injected.len(), 10);
        for idx in injected {
            let inj = crate::packet::decode_packet(&c.packets[idx]);
            let inj_tcp = inj.tcp.as_ref().unwrap();
            let inj_apdu = inj.apdus().next().expect("injected frame decodes");
            let inj_asdu = inj_apdu.asdu.as_ref().unwrap();

            // Find a benign template: same flow, same type, same address.
            let template = c
                .packets
                .iter()
                .enumerate()
                .filter(|(i, _)| !c.labels[*i].malicious)
                .map(|(_, p)| crate::packet::decode_packet(p))
                .find(|l| {
                    l.ip.as_ref().map(|ip| ip.src_ip) == inj.ip.as_ref().map(|ip| ip.src_ip)
                        && l.apdus()
                            .next()
                            .and_then(|a| a.asdu.as_ref())
                            .is_some_and(|a| {
                                a.type_id == inj_asdu.type_id
                                    && a.cot == inj_asdu.cot
                                    && a.common_address == inj_asdu.common_address
                                    && a.objects[0].ioa == inj_asdu.objects[0].ioa
                            })
                })
                .expect("legitimate template exists");
            let t_tcp = template.tcp.as_ref().unwrap();
            assert_eq!(
                template.eth.as_ref().unwrap().src_mac,
                inj.eth.as_ref().unwrap().src_mac
            );
            assert_eq!(
                template.ip.as_ref().unwrap().dst_ip,
                inj.ip.as_ref().unwrap().dst_ip
            );
            assert_eq!(
                (t_tcp.src_port, t_tcp.dst_port),
                (inj_tcp.src_port, inj_tcp.dst_port)
            );
            let t_asdu = template.apdus().next().unwrap().asdu.as_ref().unwrap();
            assert_eq!(t_asdu.cot, inj_asdu.cot);
        }
    }

    #[test]
    fn rtt_probe_capture_samples_cycle_choices() {
        let gim = testbed_fixture();
        let c =
            generate_rtt_probe_capture(&gim, 3, 15, &[50, 80, 110, 140, 180, 180, 180]).unwrap();
        let mut engine = Engine::new(sb(), EngineOptions::default());
        let mut sink = AlertSink::new(ClockMode::Wall);
        let (_, stats) = replay(&mut engine, &mut sink, &c, ReplaySpeed::AsFastAsPossible);
        assert!(stats
            .rtt_samples_ms
            .iter()
            .any(|r| (*r - 180.0).abs() < 1.0));
        let p95 = percentile(&stats.rtt_samples_ms, 0.95);
        assert!((p95 - 180.0).abs() < 1.0, "p95 {p95}");
    }

    #[test]
    fn demo_capture_shape() {
        let c = generate_demo_capture(&testbed_fixture()).unwrap();
        assert_eq!(c.malicious_count(), 2);
        let last = c.packets.last().unwrap();
        let first = c.packets.first().unwrap();
        assert_eq!((last.ts_micros() - first.ts_micros()) / 1_000_000, 51);
    }

    #[test]
    fn sharded_replay_equals_sequential() {
        let gim = testbed_fixture();
        let rules = sb();
        let c = generate_scenario(ScenarioId::S2A, 4, &gim, &ScenarioParams::default()).unwrap();

        let mut seq_sink = AlertSink::new(ClockMode::Wall);
        let mut engine = Engine::new(rules.clone(), EngineOptions::default());
        replay(
            &mut engine,
            &mut seq_sink,
            &c,
            ReplaySpeed::AsFastAsPossible,
        );

        let mut par_sink = AlertSink::new(ClockMode::Wall);
        replay_sharded(&rules, EngineOptions::default(), &mut par_sink, &c, 3);

        let strip = |records: &[StreamRecord]| {
            records
                .iter()
                .map(|r| (r.id, r.packet_index, r.alert_type, r.reason.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(seq_sink.records()), strip(par_sink.records()));
    }

    #[test]
    fn model_without_channels_is_rejected() {
        let mut gim = testbed_fixture();
        gim.edges.retain(|e| e.kind != EdgeKind::CommChannel);
        let err =
            generate_scenario(ScenarioId::S1, 1, &gim, &ScenarioParams::default()).unwrap_err();
        assert!(matches!(err, HarnessError::Fixture(_)));
    }

    #[test]
    fn score_rejects_unlabeled_packets() {
        let records = vec![StreamRecord {
            id: 0,
            packet_index: 99,
            alert_type: crate::alert::AlertType::IpMismatch,
            threat_level: crate::alert::ThreatLevel::High,
            reason: "r".into(),
        }];
        let labels = vec![PacketLabel {
            index: 0,
            malicious: false,
            scenario_tag: "t".into(),
        }];
        assert!(matches!(
            score(&records, &labels),
            Err(HarnessError::LabelMismatch(99))
        ));
    }
}
