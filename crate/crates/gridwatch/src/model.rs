//! Graph-based infrastructure model: the operator's asset, link and data
//! point knowledge that all whitelisting rules are compiled from.
//!
//! The model is a single strict JSON document (`nodes`, `edges`, `meta`);
//! unknown fields are rejected so misspelled attributes cannot silently
//! drop rules.

use std::collections::BTreeSet;
use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::packet::MacAddr;

/// Asset categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum NodeKind {
    Mtu,
    Rtu,
    Ied,
    Switch,
    Firewall,
    Der,
    Load,
    Substation,
    Workstation,
}

impl NodeKind {
    /// Kinds that must carry MAC and IP addresses.
    pub fn requires_addresses(&self) -> bool {
        matches!(self, NodeKind::Mtu | NodeKind::Rtu | NodeKind::Ied)
    }

    /// Kinds that may host data points.
    pub fn may_host_data_points(&self) -> bool {
        matches!(self, NodeKind::Rtu | NodeKind::Ied | NodeKind::Der)
    }
}

/// Application protocols distinguished by the rule set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Protocol {
    Iec104,
    Ssh,
    Modbus,
    Other,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Iec104 => write!(f, "IEC104"),
            Protocol::Ssh => write!(f, "SSH"),
            Protocol::Modbus => write!(f, "MODBUS"),
            Protocol::Other => write!(f, "OTHER"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PortRole {
    Client,
    Server,
}

/// A port an asset is known to use, with its side of the conversation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortSpec {
    pub port: u16,
    pub protocol: Protocol,
    pub role: PortRole,
}

/// Direction of a data point from the hosting asset's perspective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DataDirection {
    Monitor,
    Control,
}

/// One process data point hosted by an asset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPoint {
    pub ioa: u32,
    pub common_address: u16,
    pub asdu_type: u8,
    pub direction: DataDirection,
    pub unit: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_value: Option<f64>,
}

/// Technical operating limits of an asset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpLimits {
    pub p_max_kw: f64,
    pub q_max_kvar: f64,
    pub cos_phi_min: f64,
    pub cos_phi_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetNode {
    pub id: String,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mac: Option<MacAddr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ip: Option<Ipv4Addr>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ports: Vec<PortSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub data_points: Vec<DataPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op_limits: Option<OpLimits>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EdgeKind {
    NetworkLink,
    CommChannel,
    PowerLine,
}

/// Communication channel descriptor attached to a COMM_CHANNEL edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub protocol: Protocol,
    pub server_port: u16,
    pub client: String,
    pub server: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub src: String,
    pub dst: String,
    pub kind: EdgeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<ChannelSpec>,
}

impl Edge {
    /// Stable identifier for diagnostics; edges carry no explicit id.
    pub fn label(&self) -> String {
        format!("{}->{}", self.src, self.dst)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub model_id: String,
    pub version: String,
    pub created: String,
}

/// The full infrastructure model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gim {
    pub nodes: Vec<AssetNode>,
    pub edges: Vec<Edge>,
    pub meta: ModelMeta,
}

impl Gim {
    pub fn node(&self, id: &str) -> Option<&AssetNode> {
        self.nodes.iter().find(|n| n.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagnosticKind {
    Referential,
    Invariant,
}

/// One validation finding, carrying the offending node or edge and the
/// violated rule name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub subject: String,
    pub rule: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            DiagnosticKind::Referential => "referential",
            DiagnosticKind::Invariant => "invariant",
        };
        write!(f, "{kind} violation on '{}': {}", self.subject, self.rule)
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("schema error at {path}: {reason}")]
    Schema { path: String, reason: String },
    #[error("model failed validation with {} finding(s), first: {}", .0.len(), .0[0])]
    Invalid(Vec<Diagnostic>),
}

fn invariant(subject: &str, rule: &str) -> Diagnostic {
    Diagnostic {
        kind: DiagnosticKind::Invariant,
        subject: subject.to_string(),
        rule: rule.to_string(),
    }
}

fn referential(subject: &str, rule: &str) -> Diagnostic {
    Diagnostic {
        kind: DiagnosticKind::Referential,
        subject: subject.to_string(),
        rule: rule.to_string(),
    }
}

/// Check every structural invariant of a parsed model.
///
/// Returns an empty list exactly when the model is valid. The result is
/// sorted, so it does not depend on node or edge order in the document.
pub fn validate_model(gim: &Gim) -> Vec<Diagnostic> {
    let mut out = Vec::new();

    let mut ids = BTreeSet::new();
    for node in &gim.nodes {
        if !ids.insert(node.id.as_str()) {
            out.push(invariant(&node.id, "duplicate-node-id"));
        }
    }

    for node in &gim.nodes {
        if node.kind.requires_addresses() {
            if node.mac.is_none() {
                out.push(invariant(&node.id, "addressable-asset-needs-mac"));
            }
            if node.ip.is_none() {
                out.push(invariant(&node.id, "addressable-asset-needs-ip"));
            }
        }
        if !node.data_points.is_empty() && !node.kind.may_host_data_points() {
            out.push(invariant(&node.id, "data-points-on-wrong-kind"));
        }
        if let Some(limits) = &node.op_limits {
            let in_range = |v: f64| (-1.0..=1.0).contains(&v);
            if !in_range(limits.cos_phi_min)
                || !in_range(limits.cos_phi_max)
                || limits.cos_phi_min > limits.cos_phi_max
            {
                out.push(invariant(&node.id, "cos-phi-bounds"));
            }
        }

        let mut dp_keys = BTreeSet::new();
        for dp in &node.data_points {
            if !dp_keys.insert((dp.ioa, dp.common_address)) {
                out.push(invariant(&node.id, "duplicate-data-point"));
            }
            match dp.direction {
                DataDirection::Monitor if dp.asdu_type >= 45 => {
                    out.push(invariant(&node.id, "monitor-type-range"));
                }
                DataDirection::Control if !(45..=69).contains(&dp.asdu_type) => {
                    out.push(invariant(&node.id, "control-type-range"));
                }
                _ => {}
            }
            if let (Some(min), Some(max)) = (dp.min_value, dp.max_value) {
                if min > max {
                    out.push(invariant(&node.id, "data-point-bounds"));
                }
            }
        }
    }

    for edge in &gim.edges {
        for end in [&edge.src, &edge.dst] {
            if gim.node(end).is_none() {
                out.push(referential(&edge.label(), "edge-endpoint-missing"));
            }
        }
        match (&edge.kind, &edge.channel) {
            (EdgeKind::CommChannel, None) => {
                out.push(invariant(&edge.label(), "comm-channel-needs-descriptor"));
            }
            (EdgeKind::CommChannel, Some(ch)) => {
                let ends = [edge.src.as_str(), edge.dst.as_str()];
                if !ends.contains(&ch.client.as_str())
                    || !ends.contains(&ch.server.as_str())
                    || ch.client == ch.server
                {
                    out.push(invariant(&edge.label(), "channel-endpoints-mismatch"));
                }
            }
            _ => {}
        }
    }

    out.sort_by(|a, b| (&a.subject, &a.rule).cmp(&(&b.subject, &b.rule)));
    out
}

/// Parse and fully validate a model document.
pub fn load_model(document: &[u8]) -> Result<Gim, ModelError> {
    let de = &mut serde_json::Deserializer::from_slice(document);
    let gim: Gim = serde_path_to_error::deserialize(de).map_err(|e| ModelError::Schema {
        path: e.path().to_string(),
        reason: e.inner().to_string(),
    })?;
    let diagnostics = validate_model(&gim);
    if diagnostics.is_empty() {
        Ok(gim)
    } else {
        Err(ModelError::Invalid(diagnostics))
    }
}

/// Serialize a model back to its document form.
pub fn serialize_model(gim: &Gim) -> String {
    serde_json::to_string_pretty(gim).expect("model serialization is infallible")
}
