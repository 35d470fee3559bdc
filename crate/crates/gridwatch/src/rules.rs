//! Rule compilation: project an infrastructure model and a rule
//! configuration onto the specification base the inspection engine consumes.
//!
//! The compiled document is a closed-world whitelist. Anything absent from
//! it is treated as malicious traffic, so the compiler only ever emits
//! explicit allow entries, never defaults.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{DataDirection, EdgeKind, Gim, NodeKind, Protocol};
use crate::packet::MacAddr;

#[derive(Debug, Error)]
pub enum RuleError {
    #[error(
        "no node matches the configured device kinds; refusing to emit an empty specification"
    )]
    EmptySpecification,
    #[error("schema error at {path}: {reason}")]
    Schema { path: String, reason: String },
    #[error("checksum mismatch: document says {found}, content hashes to {computed}")]
    ChecksumMismatch { found: String, computed: String },
    #[error("referential error: {0}")]
    Referential(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RuleDomain {
    Communication,
    Asset,
    Operation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Weekday {
    Mon,
    Tue,
    Wed,
    Thu,
    Fri,
    Sat,
    Sun,
}

impl From<chrono::Weekday> for Weekday {
    fn from(w: chrono::Weekday) -> Self {
        match w {
            chrono::Weekday::Mon => Weekday::Mon,
            chrono::Weekday::Tue => Weekday::Tue,
            chrono::Weekday::Wed => Weekday::Wed,
            chrono::Weekday::Thu => Weekday::Thu,
            chrono::Weekday::Fri => Weekday::Fri,
            chrono::Weekday::Sat => Weekday::Sat,
            chrono::Weekday::Sun => Weekday::Sun,
        }
    }
}

/// Minute-of-day clock value, serialized as `HH:MM`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ClockTime(pub u16);

impl ClockTime {
    pub fn minutes(&self) -> u16 {
        self.0
    }
}

impl fmt::Display for ClockTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02}:{:02}", self.0 / 60, self.0 % 60)
    }
}

impl FromStr for ClockTime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (h, m) = s
            .split_once(':')
            .ok_or_else(|| format!("invalid clock time '{s}'"))?;
        let h: u16 = h.parse().map_err(|_| format!("invalid clock time '{s}'"))?;
        let m: u16 = m.parse().map_err(|_| format!("invalid clock time '{s}'"))?;
        if h > 23 || m > 59 {
            return Err(format!("clock time '{s}' out of range"));
        }
        Ok(ClockTime(h * 60 + m))
    }
}

impl Serialize for ClockTime {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ClockTime {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(de::Error::custom)
    }
}

/// Allowed usage window for a non-IEC104 protocol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolWindow {
    pub protocol: Protocol,
    pub weekdays: BTreeSet<Weekday>,
    pub start_time: ClockTime,
    pub end_time: ClockTime,
}

fn default_max_rtt() -> f64 {
    200.0
}

fn default_domains() -> BTreeSet<RuleDomain> {
    [
        RuleDomain::Communication,
        RuleDomain::Asset,
        RuleDomain::Operation,
    ]
    .into()
}

/// Selects which rules are compiled and with what bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleConfig {
    pub device_kinds_of_interest: BTreeSet<NodeKind>,
    #[serde(default = "default_max_rtt")]
    pub max_rtt_ms: f64,
    #[serde(default)]
    pub protocol_windows: Vec<ProtocolWindow>,
    #[serde(default = "default_domains")]
    pub emit_domains: BTreeSet<RuleDomain>,
}

impl RuleConfig {
    pub fn validate(&self) -> Result<(), RuleError> {
        if self.max_rtt_ms <= 0.0 || self.max_rtt_ms.is_nan() {
            return Err(RuleError::Schema {
                path: "max_rtt_ms".into(),
                reason: "must be positive".into(),
            });
        }
        for (i, w) in self.protocol_windows.iter().enumerate() {
            if w.start_time >= w.end_time {
                return Err(RuleError::Schema {
                    path: format!("protocol_windows[{i}]"),
                    reason: "start_time must be before end_time".into(),
                });
            }
        }
        Ok(())
    }

    pub fn load(document: &[u8]) -> Result<Self, RuleError> {
        let de = &mut serde_json::Deserializer::from_slice(document);
        let config: RuleConfig =
            serde_path_to_error::deserialize(de).map_err(|e| RuleError::Schema {
                path: e.path().to_string(),
                reason: e.inner().to_string(),
            })?;
        config.validate()?;
        Ok(config)
    }
}

/// L2/L3 identity of one whitelisted station.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointRule {
    pub mac: MacAddr,
    pub ip: Ipv4Addr,
    pub node_id: String,
}

/// One allowed client/server channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelRule {
    pub client_ip: Ipv4Addr,
    pub server_ip: Ipv4Addr,
    pub server_port: u16,
    pub protocol: Protocol,
}

/// Registered data point, keyed by (server_ip, common_address, ioa).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPointRule {
    pub server_ip: Ipv4Addr,
    pub common_address: u16,
    pub ioa: u32,
    pub asdu_type: u8,
    pub direction: DataDirection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_value: Option<f64>,
}

/// What a station is allowed to send on its side of a channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleOps {
    pub send_control: bool,
    pub send_monitor: bool,
}

/// The compiled whitelists and bounds the engine checks traffic against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecificationBase {
    pub endpoints: Vec<EndpointRule>,
    pub channels: Vec<ChannelRule>,
    pub datapoints: Vec<DataPointRule>,
    pub role_ops: BTreeMap<String, RoleOps>,
    /// Fixed source ports declared on whitelisted stations. Together with
    /// the channels' server ports these form the set of known ports.
    pub client_ports: Vec<u16>,
    pub max_rtt_ms: f64,
    pub protocol_windows: Vec<ProtocolWindow>,
    /// SHA-256 over the canonical document with this field blanked.
    pub checksum: String,
}

impl SpecificationBase {
    /// Look up a data point rule; `datapoints` is sorted by key.
    pub fn datapoint(
        &self,
        server_ip: Ipv4Addr,
        common_address: u16,
        ioa: u32,
    ) -> Option<&DataPointRule> {
        self.datapoints
            .binary_search_by(|dp| {
                (dp.server_ip, dp.common_address, dp.ioa).cmp(&(server_ip, common_address, ioa))
            })
            .ok()
            .map(|i| &self.datapoints[i])
    }

    fn canonical_checksum(&self) -> String {
        let mut blanked = self.clone();
        blanked.checksum = String::new();
        let bytes = serde_json::to_vec(&blanked).expect("rule serialization is infallible");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Compile a model and configuration into a specification base.
///
/// The projection is deterministic: all collections are emitted in sorted
/// order, so identical inputs export byte-identical documents.
pub fn generate_rules(gim: &Gim, config: &RuleConfig) -> Result<SpecificationBase, RuleError> {
    config.validate()?;

    let comm = config.emit_domains.contains(&RuleDomain::Communication);
    // Asset and operation rules hang off channels, so they need the
    // communication domain as their referential base.
    let asset = comm && config.emit_domains.contains(&RuleDomain::Asset);
    let operation = config.emit_domains.contains(&RuleDomain::Operation);

    let mut endpoints: Vec<EndpointRule> = gim
        .nodes
        .iter()
        .filter(|n| config.device_kinds_of_interest.contains(&n.kind))
        .filter_map(|n| match (n.mac, n.ip) {
            (Some(mac), Some(ip)) => Some(EndpointRule {
                mac,
                ip,
                node_id: n.id.clone(),
            }),
            _ => None,
        })
        .collect();
    endpoints.sort_by(|a, b| a.node_id.cmp(&b.node_id));
    if endpoints.is_empty() {
        return Err(RuleError::EmptySpecification);
    }
    let endpoint_ids: BTreeSet<&str> = endpoints.iter().map(|e| e.node_id.as_str()).collect();

    let mut channels = Vec::new();
    let mut server_nodes: BTreeSet<&str> = BTreeSet::new();
    for edge in &gim.edges {
        if edge.kind != EdgeKind::CommChannel {
            continue;
        }
        let Some(spec) = &edge.channel else { continue };
        if !endpoint_ids.contains(spec.client.as_str())
            || !endpoint_ids.contains(spec.server.as_str())
        {
            continue;
        }
        let client = gim.node(&spec.client).expect("validated model");
        let server = gim.node(&spec.server).expect("validated model");
        channels.push(ChannelRule {
            client_ip: client.ip.expect("addressable endpoint"),
            server_ip: server.ip.expect("addressable endpoint"),
            server_port: spec.server_port,
            protocol: spec.protocol,
        });
        if spec.protocol == Protocol::Iec104 {
            server_nodes.insert(spec.server.as_str());
        }
    }
    channels.sort_by_key(|c| (c.client_ip, c.server_ip, c.server_port));
    channels.dedup();

    let mut client_ports: Vec<u16> = gim
        .nodes
        .iter()
        .filter(|n| endpoint_ids.contains(n.id.as_str()))
        .flat_map(|n| n.ports.iter())
        .filter(|p| p.role == crate::model::PortRole::Client)
        .map(|p| p.port)
        .collect();
    client_ports.sort_unstable();
    client_ports.dedup();

    let mut datapoints = Vec::new();
    let mut role_ops: BTreeMap<String, RoleOps> = BTreeMap::new();
    if asset {
        for id in &server_nodes {
            let node = gim.node(id).expect("validated model");
            let server_ip = node.ip.expect("addressable endpoint");
            for dp in &node.data_points {
                let (mut min_value, mut max_value) = (None, None);
                if operation {
                    min_value = dp.min_value;
                    max_value = dp.max_value;
                    if dp.direction == DataDirection::Control
                        && (min_value.is_none() || max_value.is_none())
                    {
                        if let Some(limits) = &node.op_limits {
                            let fallback = match dp.unit.as_str() {
                                "kW" => Some((-limits.p_max_kw, limits.p_max_kw)),
                                "kvar" => Some((-limits.q_max_kvar, limits.q_max_kvar)),
                                "cos_phi" => Some((limits.cos_phi_min, limits.cos_phi_max)),
                                _ => None,
                            };
                            if let Some((lo, hi)) = fallback {
                                min_value = min_value.or(Some(lo));
                                max_value = max_value.or(Some(hi));
                            }
                        }
                    }
                }
                datapoints.push(DataPointRule {
                    server_ip,
                    common_address: dp.common_address,
                    ioa: dp.ioa,
                    asdu_type: dp.asdu_type,
                    direction: dp.direction,
                    min_value,
                    max_value,
                });
            }
        }
        datapoints.sort_by_key(|dp| (dp.server_ip, dp.common_address, dp.ioa));

        for edge in &gim.edges {
            if edge.kind != EdgeKind::CommChannel {
                continue;
            }
            let Some(spec) = &edge.channel else { continue };
            if spec.protocol != Protocol::Iec104
                || !endpoint_ids.contains(spec.client.as_str())
                || !endpoint_ids.contains(spec.server.as_str())
            {
                continue;
            }
            role_ops
                .entry(spec.client.clone())
                .or_default()
                .send_control = true;
            role_ops
                .entry(spec.server.clone())
                .or_default()
                .send_monitor = true;
        }
    }

    let mut sb = SpecificationBase {
        endpoints,
        channels: if comm { channels } else { Vec::new() },
        datapoints,
        role_ops,
        client_ports: if comm { client_ports } else { Vec::new() },
        max_rtt_ms: if comm {
            config.max_rtt_ms
        } else {
            default_max_rtt()
        },
        protocol_windows: if comm {
            config.protocol_windows.clone()
        } else {
            Vec::new()
        },
        checksum: String::new(),
    };
    sb.checksum = sb.canonical_checksum();
    Ok(sb)
}

/// Canonical serialization: sorted collections, fixed field order, checksum
/// embedded.
pub fn export_rules(sb: &SpecificationBase) -> String {
    serde_json::to_string_pretty(sb).expect("rule serialization is infallible")
}

/// Parse and verify an exported rule document.
pub fn import_rules(document: &str) -> Result<SpecificationBase, RuleError> {
    let de = &mut serde_json::Deserializer::from_str(document);
    let sb: SpecificationBase =
        serde_path_to_error::deserialize(de).map_err(|e| RuleError::Schema {
            path: e.path().to_string(),
            reason: e.inner().to_string(),
        })?;

    let computed = sb.canonical_checksum();
    if computed != sb.checksum {
        return Err(RuleError::ChecksumMismatch {
            found: sb.checksum.clone(),
            computed,
        });
    }

    let known_ips: BTreeSet<Ipv4Addr> = sb.endpoints.iter().map(|e| e.ip).collect();
    for ch in &sb.channels {
        for ip in [ch.client_ip, ch.server_ip] {
            if !known_ips.contains(&ip) {
                return Err(RuleError::Referential(format!(
                    "channel references unknown endpoint ip {ip}"
                )));
            }
        }
    }
    let server_ips: BTreeSet<Ipv4Addr> = sb.channels.iter().map(|c| c.server_ip).collect();
    for dp in &sb.datapoints {
        if !server_ips.contains(&dp.server_ip) {
            return Err(RuleError::Referential(format!(
                "data point references {} which is not a channel server",
                dp.server_ip
            )));
        }
    }
    let known_ids: BTreeSet<&str> = sb.endpoints.iter().map(|e| e.node_id.as_str()).collect();
    for id in sb.role_ops.keys() {
        if !known_ids.contains(id.as_str()) {
            return Err(RuleError::Referential(format!(
                "role_ops references unknown node '{id}'"
            )));
        }
    }
    Ok(sb)
}
