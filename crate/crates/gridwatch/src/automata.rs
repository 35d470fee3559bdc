//! Flow conformance checking: direction-prefixed input symbols, role-based
//! Mealy automata and per-endpoint sequence counters.
//!
//! Every monitored channel owns two automata, one per endpoint role. Each
//! decoded frame becomes one input symbol per endpoint (prefixed with the
//! direction as seen from that endpoint) and every step returns a status
//! output; a transition that is undefined in the protocol procedure is a
//! self-loop that reports INVALID.

use std::fmt;

use crate::iec104::{Apci, Apdu, Control, UFunction, SEQ_MODULUS};
use crate::packet::PacketLayers;

/// Direction of a packet as seen from one endpoint of a connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Sent,
    Received,
}

/// Frame categories distinguished by the mapper.
///
/// Eight kinds: the six U-frame functions plus I- and S-frames. With the
/// two direction prefixes and the shared error symbol the alphabet has
/// 8 x 2 + 1 = 17 symbols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SymbolKind {
    StartDtAct,
    StartDtCon,
    StopDtAct,
    StopDtCon,
    TestFrAct,
    TestFrCon,
    IFrame,
    SFrame,
}

impl SymbolKind {
    pub const ALL: [SymbolKind; 8] = [
        SymbolKind::StartDtAct,
        SymbolKind::StartDtCon,
        SymbolKind::StopDtAct,
        SymbolKind::StopDtCon,
        SymbolKind::TestFrAct,
        SymbolKind::TestFrCon,
        SymbolKind::IFrame,
        SymbolKind::SFrame,
    ];

    fn name(&self) -> &'static str {
        match self {
            SymbolKind::StartDtAct => "STARTDT_ACT",
            SymbolKind::StartDtCon => "STARTDT_CON",
            SymbolKind::StopDtAct => "STOPDT_ACT",
            SymbolKind::StopDtCon => "STOPDT_CON",
            SymbolKind::TestFrAct => "TESTFR_ACT",
            SymbolKind::TestFrCon => "TESTFR_CON",
            SymbolKind::IFrame => "I_FRAME",
            SymbolKind::SFrame => "S_FRAME",
        }
    }
}

/// Automata input symbol. The error symbol carries no direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InputSymbol {
    Directed {
        direction: Direction,
        kind: SymbolKind,
    },
    Error,
}

impl InputSymbol {
    pub fn sent(kind: SymbolKind) -> Self {
        InputSymbol::Directed {
            direction: Direction::Sent,
            kind,
        }
    }

    pub fn received(kind: SymbolKind) -> Self {
        InputSymbol::Directed {
            direction: Direction::Received,
            kind,
        }
    }

    /// The full 17-symbol alphabet.
    pub fn alphabet() -> Vec<InputSymbol> {
        let mut v = Vec::with_capacity(17);
        for kind in SymbolKind::ALL {
            v.push(InputSymbol::sent(kind));
            v.push(InputSymbol::received(kind));
        }
        v.push(InputSymbol::Error);
        v
    }
}

impl fmt::Display for InputSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputSymbol::Directed {
                direction: Direction::Sent,
                kind,
            } => write!(f, "SENT_{}", kind.name()),
            InputSymbol::Directed {
                direction: Direction::Received,
                kind,
            } => {
                write!(f, "RECEIVED_{}", kind.name())
            }
            InputSymbol::Error => write!(f, "ERROR"),
        }
    }
}

/// Endpoint role within a monitored channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Mtu,
    Rtu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum State {
    Idle,
    StartPending,
    Started,
    StopPending,
}

impl State {
    pub const ALL: [State; 4] = [
        State::Idle,
        State::StartPending,
        State::Started,
        State::StopPending,
    ];

    fn name(&self) -> &'static str {
        match self {
            State::Idle => "IDLE",
            State::StartPending => "START_PENDING",
            State::Started => "STARTED",
            State::StopPending => "STOP_PENDING",
        }
    }
}

/// Mealy output of one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutput {
    Valid,
    Invalid(String),
    Suspicious(String),
}

impl StepOutput {
    pub fn is_valid(&self) -> bool {
        matches!(self, StepOutput::Valid)
    }
}

/// Total transition function for one role.
fn transition(role: Role, state: State, symbol: InputSymbol) -> (State, StepOutput) {
    let InputSymbol::Directed { direction, kind } = symbol else {
        return (state, StepOutput::Invalid("unmappable frame".into()));
    };

    // The controlling station initiates start/stop; for the MTU automaton
    // that is its own Sent traffic, for the RTU automaton the Received side.
    let from_master = matches!(
        (role, direction),
        (Role::Mtu, Direction::Sent) | (Role::Rtu, Direction::Received)
    );

    match kind {
        SymbolKind::TestFrAct | SymbolKind::TestFrCon => (state, StepOutput::Valid),
        SymbolKind::StartDtAct if from_master && state == State::Idle => {
            (State::StartPending, StepOutput::Valid)
        }
        SymbolKind::StartDtCon if !from_master && state == State::StartPending => {
            (State::Started, StepOutput::Valid)
        }
        SymbolKind::StopDtAct if from_master && state == State::Started => {
            (State::StopPending, StepOutput::Valid)
        }
        SymbolKind::StopDtCon if !from_master && state == State::StopPending => {
            (State::Idle, StepOutput::Valid)
        }
        SymbolKind::IFrame | SymbolKind::SFrame => match state {
            State::Started => (state, StepOutput::Valid),
            State::Idle | State::StartPending => (
                state,
                StepOutput::Invalid("data transfer before STARTDT".into()),
            ),
            State::StopPending => (
                state,
                StepOutput::Invalid("data transfer while stopping".into()),
            ),
        },
        _ => (
            state,
            StepOutput::Invalid(format!("unexpected {symbol} in state {}", state.name())),
        ),
    }
}

/// One endpoint's protocol-procedure automaton.
#[derive(Debug, Clone)]
pub struct Automaton {
    pub role: Role,
    pub state: State,
    status: StepOutput,
}

/// Fresh automaton in the IDLE state.
pub fn new_automaton(role: Role) -> Automaton {
    Automaton {
        role,
        state: State::Idle,
        status: StepOutput::Valid,
    }
}

impl Automaton {
    pub fn new(role: Role) -> Self {
        new_automaton(role)
    }

    /// Fresh automaton already in STARTED, for attaching mid-stream.
    pub fn started(role: Role) -> Self {
        Automaton {
            role,
            state: State::Started,
            status: StepOutput::Valid,
        }
    }

    /// Feed one symbol; the returned output reflects only this step.
    pub fn step(&mut self, symbol: InputSymbol) -> StepOutput {
        let (next, output) = transition(self.role, self.state, symbol);
        self.state = next;
        self.status = output.clone();
        output
    }

    /// Status variable: the output of the most recent step.
    pub fn status(&self) -> &StepOutput {
        &self.status
    }
}

/// Outcome of a sequence counter check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqCheck {
    Ok,
    Violation { expected: u16, got: u16 },
}

/// Send/receive counters and acknowledgment levels for one endpoint.
///
/// All arithmetic is modulo 32768. `unacked_sent` is derived from the gap
/// between the own send counter and the peer's acknowledgment level.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SeqCounters {
    /// Next send sequence number.
    pub vs: u16,
    /// Next expected receive sequence number.
    pub vr: u16,
    /// Highest acknowledgment this endpoint has sent for peer frames.
    ack_sent: u16,
    /// Highest acknowledgment the peer has sent for this endpoint's frames.
    peer_acked: u16,
}

fn seq_add(a: u16, b: u16) -> u16 {
    (a + b) % SEQ_MODULUS
}

fn seq_distance(from: u16, to: u16) -> u16 {
    (to + SEQ_MODULUS - from) % SEQ_MODULUS
}

/// Whether `x` lies in the modular interval [lo, hi].
fn in_window(lo: u16, x: u16, hi: u16) -> bool {
    seq_distance(lo, x) <= seq_distance(lo, hi)
}

impl SeqCounters {
    pub fn new() -> Self {
        Self::default()
    }

    /// Mid-stream attachment: adopt the counters implied by the first
    /// observed frame from this endpoint's perspective.
    pub fn seed(&mut self, apci: &Apci, direction: Direction) {
        match (apci.control, direction) {
            (Control::I { send_seq, recv_seq }, Direction::Sent) => {
                self.vs = send_seq;
                self.vr = recv_seq;
                self.ack_sent = recv_seq;
                self.peer_acked = send_seq;
            }
            (Control::I { send_seq, recv_seq }, Direction::Received) => {
                self.vr = send_seq;
                self.vs = recv_seq;
                self.peer_acked = recv_seq;
                self.ack_sent = send_seq;
            }
            (Control::S { recv_seq }, Direction::Sent) => {
                self.vr = recv_seq;
                self.ack_sent = recv_seq;
            }
            (Control::S { recv_seq }, Direction::Received) => {
                self.vs = recv_seq;
                self.peer_acked = recv_seq;
            }
            (Control::U { .. }, _) => {}
        }
    }

    /// I-frames this endpoint has sent that the peer has not yet acknowledged.
    pub fn unacked_sent(&self) -> u16 {
        seq_distance(self.peer_acked, self.vs)
    }

    /// Check one frame's sequence fields against the counters and, if
    /// conformant, advance them. A violation leaves the counters unchanged.
    pub fn check(&mut self, apci: &Apci, direction: Direction) -> SeqCheck {
        match (apci.control, direction) {
            (Control::I { send_seq, recv_seq }, Direction::Sent) => {
                if send_seq != self.vs {
                    return SeqCheck::Violation {
                        expected: self.vs,
                        got: send_seq,
                    };
                }
                if !in_window(self.ack_sent, recv_seq, self.vr) {
                    return SeqCheck::Violation {
                        expected: self.vr,
                        got: recv_seq,
                    };
                }
                self.vs = seq_add(self.vs, 1);
                self.ack_sent = recv_seq;
                SeqCheck::Ok
            }
            (Control::I { send_seq, recv_seq }, Direction::Received) => {
                if send_seq != self.vr {
                    return SeqCheck::Violation {
                        expected: self.vr,
                        got: send_seq,
                    };
                }
                if !in_window(self.peer_acked, recv_seq, self.vs) {
                    return SeqCheck::Violation {
                        expected: self.vs,
                        got: recv_seq,
                    };
                }
                self.vr = seq_add(self.vr, 1);
                self.peer_acked = recv_seq;
                SeqCheck::Ok
            }
            (Control::S { recv_seq }, Direction::Sent) => {
                if !in_window(self.ack_sent, recv_seq, self.vr) {
                    return SeqCheck::Violation {
                        expected: self.vr,
                        got: recv_seq,
                    };
                }
                self.ack_sent = recv_seq;
                SeqCheck::Ok
            }
            (Control::S { recv_seq }, Direction::Received) => {
                if !in_window(self.peer_acked, recv_seq, self.vs) {
                    return SeqCheck::Violation {
                        expected: self.vs,
                        got: recv_seq,
                    };
                }
                self.peer_acked = recv_seq;
                SeqCheck::Ok
            }
            (Control::U { .. }, _) => SeqCheck::Ok,
        }
    }
}

/// Map one decoded frame to its input symbol for a given direction.
pub fn map_apdu(apdu: &Apdu, direction: Direction) -> InputSymbol {
    // ASDU types outside the implemented subset do not match any mapping
    // criterion and fall through to the error symbol.
    if apdu.asdu.as_ref().is_some_and(|a| a.is_opaque()) {
        return InputSymbol::Error;
    }
    let kind = match apdu.apci.control {
        Control::I { .. } => SymbolKind::IFrame,
        Control::S { .. } => SymbolKind::SFrame,
        Control::U { function } => match function {
            UFunction::StartDtAct => SymbolKind::StartDtAct,
            UFunction::StartDtCon => SymbolKind::StartDtCon,
            UFunction::StopDtAct => SymbolKind::StopDtAct,
            UFunction::StopDtCon => SymbolKind::StopDtCon,
            UFunction::TestFrAct => SymbolKind::TestFrAct,
            UFunction::TestFrCon => SymbolKind::TestFrCon,
        },
    };
    InputSymbol::Directed { direction, kind }
}

/// Map all frames of a decoded packet, in wire order, for one endpoint.
///
/// Frames that failed to decode map to the error symbol.
pub fn map_packet(layers: &PacketLayers, direction: Direction) -> Vec<InputSymbol> {
    layers
        .iec104
        .iter()
        .map(|slot| match slot.apdu() {
            Some(apdu) => map_apdu(apdu, direction),
            None => InputSymbol::Error,
        })
        .collect()
}
