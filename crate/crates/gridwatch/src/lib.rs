//! Specification-based intrusion detection for IEC 60870-5-104 process
//! networks.
//!
//! The crate compiles a graph-based infrastructure model into closed-world
//! whitelisting rules, inspects captured traffic against them with deep
//! packet inspection plus role-based flow automata, and emits numbered,
//! explainable alerts. A bundled scenario harness generates labeled
//! captures for evaluation and scores alerts against ground truth.

pub mod alert;
pub mod automata;
pub mod engine;
pub mod harness;
pub mod iec104;
pub mod model;
pub mod packet;
pub mod pcap;
pub mod rules;

pub use alert::{Alert, AlertDraft, AlertSink, AlertType, ClockMode, ThreatLevel};
pub use engine::{Engine, EngineOptions, InspectionReport, PacketCategory};
pub use model::Gim;
pub use packet::RawPacket;
pub use rules::{RuleConfig, SpecificationBase};
