//! Alert model, id allocation, and the alert log / alert stream writers.
//!
//! The log is an INI-style text file, one `[ALERT_<id>]` section per alert.
//! A companion stream (one JSON record per line) carries the packet index
//! that the log format lacks, for downstream scoring.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TIMESTAMP_FORMAT: &str = "%d.%m.%Y %H:%M:%S";

/// Closed set of alert categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AlertType {
    IpMismatch,
    MacMismatch,
    PortMismatch,
    NoSuchConnection,
    DatapointMismatch,
    TypeMismatch,
    InvalidOperation,
    InvalidSetpoint,
    SequenceViolation,
    AutomataViolation,
    RttExceeded,
    ProtocolNotAllowed,
    TimeWindowViolation,
    MalformedPacket,
}

impl AlertType {
    pub const ALL: [AlertType; 14] = [
        AlertType::IpMismatch,
        AlertType::MacMismatch,
        AlertType::PortMismatch,
        AlertType::NoSuchConnection,
        AlertType::DatapointMismatch,
        AlertType::TypeMismatch,
        AlertType::InvalidOperation,
        AlertType::InvalidSetpoint,
        AlertType::SequenceViolation,
        AlertType::AutomataViolation,
        AlertType::RttExceeded,
        AlertType::ProtocolNotAllowed,
        AlertType::TimeWindowViolation,
        AlertType::MalformedPacket,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AlertType::IpMismatch => "IP_MISMATCH",
            AlertType::MacMismatch => "MAC_MISMATCH",
            AlertType::PortMismatch => "PORT_MISMATCH",
            AlertType::NoSuchConnection => "NO_SUCH_CONNECTION",
            AlertType::DatapointMismatch => "DATAPOINT_MISMATCH",
            AlertType::TypeMismatch => "TYPE_MISMATCH",
            AlertType::InvalidOperation => "INVALID_OPERATION",
            AlertType::InvalidSetpoint => "INVALID_SETPOINT",
            AlertType::SequenceViolation => "SEQUENCE_VIOLATION",
            AlertType::AutomataViolation => "AUTOMATA_VIOLATION",
            AlertType::RttExceeded => "RTT_EXCEEDED",
            AlertType::ProtocolNotAllowed => "PROTOCOL_NOT_ALLOWED",
            AlertType::TimeWindowViolation => "TIME_WINDOW_VIOLATION",
            AlertType::MalformedPacket => "MALFORMED_PACKET",
        }
    }

    /// Fixed type-to-level table: specification violations are high,
    /// timing excess is low, undecodable traffic is medium.
    pub fn threat_level(&self) -> ThreatLevel {
        match self {
            AlertType::RttExceeded => ThreatLevel::Low,
            AlertType::MalformedPacket => ThreatLevel::Medium,
            _ => ThreatLevel::High,
        }
    }
}

impl fmt::Display for AlertType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlertType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AlertType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown alert type '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThreatLevel {
    Low,
    Medium,
    High,
}

impl ThreatLevel {
    pub fn as_str(&self) -> &'static str {
        match self {
            ThreatLevel::Low => "low",
            ThreatLevel::Medium => "medium",
            ThreatLevel::High => "high",
        }
    }
}

impl fmt::Display for ThreatLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ThreatLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "low" => Ok(ThreatLevel::Low),
            "medium" => Ok(ThreatLevel::Medium),
            "high" => Ok(ThreatLevel::High),
            _ => Err(format!("unknown threat level '{s}'")),
        }
    }
}

/// A violation found during inspection, before id and timestamp assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct AlertDraft {
    pub alert_type: AlertType,
    pub reason: String,
    pub packet_info: String,
    pub packet_index: u64,
    /// Capture timestamp of the offending packet, in microseconds.
    pub pkt_ts_us: u64,
}

/// A numbered, explainable alert as it appears in the log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alert {
    pub id: u64,
    pub alert_type: AlertType,
    pub threat_level: ThreatLevel,
    pub timestamp: NaiveDateTime,
    pub alert_reason: String,
    pub packet_info: String,
}

/// Machine-readable alert record for the companion stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub id: u64,
    pub packet_index: u64,
    pub alert_type: AlertType,
    pub threat_level: ThreatLevel,
    pub reason: String,
}

/// Source of alert timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockMode {
    /// Wall clock at detection time.
    Wall,
    /// Replay clock: the given base plus each packet's offset from the
    /// start of the capture, at one-second resolution.
    Fixed(NaiveDateTime),
}

impl ClockMode {
    /// Parse a CLI clock argument: `wall` or `fixed:DD.MM.YYYY HH:MM:SS`.
    pub fn parse(s: &str) -> Result<Self, String> {
        if s == "wall" {
            return Ok(ClockMode::Wall);
        }
        let Some(ts) = s.strip_prefix("fixed:") else {
            return Err(format!(
                "invalid clock mode '{s}' (expected 'wall' or 'fixed:<timestamp>')"
            ));
        };
        let base = NaiveDateTime::parse_from_str(ts, TIMESTAMP_FORMAT)
            .map_err(|e| format!("invalid fixed clock '{ts}': {e}"))?;
        Ok(ClockMode::Fixed(base))
    }
}

/// Serialized alert emitter: the only id allocator of a run.
#[derive(Debug)]
pub struct AlertSink {
    clock: ClockMode,
    next_id: u64,
    capture_start_us: Option<u64>,
    alerts: Vec<Alert>,
    records: Vec<StreamRecord>,
}

impl AlertSink {
    pub fn new(clock: ClockMode) -> Self {
        Self {
            clock,
            next_id: 0,
            capture_start_us: None,
            alerts: Vec::new(),
            records: Vec::new(),
        }
    }

    /// Anchor the replay clock to the first packet of the capture.
    pub fn note_capture_start(&mut self, ts_us: u64) {
        self.capture_start_us.get_or_insert(ts_us);
    }

    /// Assign the next id and timestamp to a draft.
    pub fn emit(&mut self, draft: &AlertDraft) -> &Alert {
        let timestamp = match self.clock {
            ClockMode::Wall => {
                let now = chrono::Utc::now().naive_utc();
                now - Duration::nanoseconds(now.and_utc().timestamp_subsec_nanos() as i64)
            }
            ClockMode::Fixed(base) => {
                let start = self.capture_start_us.unwrap_or(draft.pkt_ts_us);
                let offset_s = draft.pkt_ts_us.saturating_sub(start) / 1_000_000;
                base + Duration::seconds(offset_s as i64)
            }
        };
        let alert = Alert {
            id: self.next_id,
            alert_type: draft.alert_type,
            threat_level: draft.alert_type.threat_level(),
            timestamp,
            alert_reason: draft.reason.clone(),
            packet_info: draft.packet_info.clone(),
        };
        self.records.push(StreamRecord {
            id: alert.id,
            packet_index: draft.packet_index,
            alert_type: alert.alert_type,
            threat_level: alert.threat_level,
            reason: alert.alert_reason.clone(),
        });
        self.next_id += 1;
        self.alerts.push(alert);
        self.alerts.last().expect("just pushed")
    }

    pub fn alerts(&self) -> &[Alert] {
        &self.alerts
    }

    pub fn records(&self) -> &[StreamRecord] {
        &self.records
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("failed writing alert log: {0}")]
    Sink(#[from] std::io::Error),
    #[error("malformed alert log at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

fn render_alert(alert: &Alert) -> String {
    format!(
        "[ALERT_{}]\nalert_type = {}\nthreat_level = {}\ntimestamp = {}\nalert_reason = {}\npacket_info = {}\n",
        alert.id,
        alert.alert_type,
        alert.threat_level,
        alert.timestamp.format(TIMESTAMP_FORMAT),
        alert.alert_reason,
        alert.packet_info,
    )
}

/// Write the alert log; sections separated by a blank line, UTF-8, LF.
/// Returns the number of bytes written.
pub fn write_log<W: Write>(alerts: &[Alert], sink: &mut W) -> Result<usize, LogError> {
    let text = alerts
        .iter()
        .map(render_alert)
        .collect::<Vec<_>>()
        .join("\n");
    sink.write_all(text.as_bytes())?;
    Ok(text.len())
}

/// Parse an alert log back into alerts.
pub fn parse_log(text: &str) -> Result<Vec<Alert>, LogError> {
    let mut alerts = Vec::new();
    let mut lines = text.lines().enumerate().peekable();

    while let Some((lineno, line)) = lines.next() {
        if line.is_empty() {
            continue;
        }
        let id: u64 = line
            .strip_prefix("[ALERT_")
            .and_then(|s| s.strip_suffix(']'))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| LogError::Parse {
                line: lineno + 1,
                reason: format!("expected section header, got '{line}'"),
            })?;

        let mut field = |name: &str| -> Result<String, LogError> {
            let (lineno, line) = lines.next().ok_or_else(|| LogError::Parse {
                line: lineno + 1,
                reason: format!("missing field '{name}'"),
            })?;
            line.strip_prefix(&format!("{name} = "))
                .map(str::to_string)
                .ok_or_else(|| LogError::Parse {
                    line: lineno + 1,
                    reason: format!("expected '{name}', got '{line}'"),
                })
        };

        let alert_type: AlertType =
            field("alert_type")?
                .parse()
                .map_err(|reason| LogError::Parse {
                    line: lineno + 2,
                    reason,
                })?;
        let threat_level: ThreatLevel =
            field("threat_level")?
                .parse()
                .map_err(|reason| LogError::Parse {
                    line: lineno + 3,
                    reason,
                })?;
        let timestamp = NaiveDateTime::parse_from_str(&field("timestamp")?, TIMESTAMP_FORMAT)
            .map_err(|e| LogError::Parse {
                line: lineno + 4,
                reason: e.to_string(),
            })?;
        let alert_reason = field("alert_reason")?;
        let packet_info = field("packet_info")?;

        alerts.push(Alert {
            id,
            alert_type,
            threat_level,
            timestamp,
            alert_reason,
            packet_info,
        });
    }
    Ok(alerts)
}

/// Write the companion stream: one JSON record per line.
pub fn write_stream<W: Write>(records: &[StreamRecord], sink: &mut W) -> Result<(), LogError> {
    for record in records {
        serde_json::to_writer(&mut *sink, record).map_err(|e| LogError::Sink(e.into()))?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

/// Parse a companion stream.
pub fn read_stream(text: &str) -> Result<Vec<StreamRecord>, LogError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| LogError::Parse {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}
