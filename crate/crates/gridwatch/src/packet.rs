//! Link, network and transport layer decoding for captured frames.
//!
//! Covers exactly what the inspection pipeline needs: Ethernet II, IPv4
//! (no options beyond IHL handling) and TCP, with header checksums verified
//! so corrupted frames can be categorized as malformed.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::iec104::{split_frames, FrameParse, START_BYTE};

pub const ETHERTYPE_IPV4: u16 = 0x0800;

/// TCP flag bits.
pub mod tcp_flags {
    pub const FIN: u8 = 0x01;
    pub const SYN: u8 = 0x02;
    pub const RST: u8 = 0x04;
    pub const PSH: u8 = 0x08;
    pub const ACK: u8 = 0x10;
}

/// 48-bit hardware address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MacAddr(pub [u8; 6]);

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            b[0], b[1], b[2], b[3], b[4], b[5]
        )
    }
}

impl FromStr for MacAddr {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut bytes = [0u8; 6];
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 6 {
            return Err(format!("invalid MAC address '{s}'"));
        }
        for (i, p) in parts.iter().enumerate() {
            bytes[i] =
                u8::from_str_radix(p, 16).map_err(|_| format!("invalid MAC address '{s}'"))?;
        }
        Ok(MacAddr(bytes))
    }
}

impl Serialize for MacAddr {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for MacAddr {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(de::Error::custom)
    }
}

/// A captured frame: arrival time plus link-layer bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPacket {
    pub ts_sec: u64,
    pub ts_nsec: u32,
    pub link_bytes: Vec<u8>,
}

impl RawPacket {
    pub fn new(ts_sec: u64, ts_nsec: u32, link_bytes: Vec<u8>) -> Self {
        Self {
            ts_sec,
            ts_nsec,
            link_bytes,
        }
    }

    /// Timestamp in whole microseconds since the epoch.
    pub fn ts_micros(&self) -> u64 {
        self.ts_sec * 1_000_000 + (self.ts_nsec / 1_000) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Ethernet,
    Ipv4,
    Tcp,
    Iec104,
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Ethernet => write!(f, "ETH"),
            Layer::Ipv4 => write!(f, "IP"),
            Layer::Tcp => write!(f, "TCP"),
            Layer::Iec104 => write!(f, "IEC104"),
        }
    }
}

/// Decode diagnostic for a layer that failed to parse or verify.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerError {
    pub layer: Layer,
    pub offset: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EthLayer {
    pub src_mac: MacAddr,
    pub dst_mac: MacAddr,
    pub ethertype: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ipv4Layer {
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub protocol: u8,
    pub checksum: u16,
    pub checksum_ok: bool,
    pub total_length: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcpLayer {
    pub src_port: u16,
    pub dst_port: u16,
    pub seq: u32,
    pub ack: u32,
    pub flags: u8,
    pub checksum: u16,
    pub checksum_ok: bool,
    pub payload: Vec<u8>,
}

impl TcpLayer {
    pub fn has_flag(&self, flag: u8) -> bool {
        self.flags & flag != 0
    }
}

/// All layers recovered from one frame, plus decode diagnostics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PacketLayers {
    pub eth: Option<EthLayer>,
    pub ip: Option<Ipv4Layer>,
    pub tcp: Option<TcpLayer>,
    /// APDUs split out of the TCP payload, in wire order. Malformed slots
    /// stay inline so flow mapping sees them as error symbols.
    pub iec104: Vec<FrameParse>,
    /// Trailing bytes of an incomplete APDU at the end of the payload.
    pub residue: usize,
    pub diagnostics: Vec<LayerError>,
}

impl PacketLayers {
    /// Summary of the layer chain, e.g. `ETH / IP / TCP / IEC104-U`.
    pub fn chain(&self) -> String {
        let mut parts: Vec<String> = Vec::with_capacity(4);
        if self.eth.is_some() {
            parts.push("ETH".into());
        }
        if self.ip.is_some() {
            parts.push("IP".into());
        }
        if self.tcp.is_some() {
            parts.push("TCP".into());
        }
        if let Some(apdu) = self.iec104.iter().find_map(|f| f.apdu()) {
            parts.push(format!("IEC104-{}", apdu.apci.format().letter()));
        }
        parts.join(" / ")
    }

    pub fn apdus(&self) -> impl Iterator<Item = &crate::iec104::Apdu> {
        self.iec104.iter().filter_map(|f| f.apdu())
    }
}

/// RFC 1071 ones' complement sum over 16-bit words.
fn checksum_fold(mut sum: u32) -> u16 {
    while sum >> 16 != 0 {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    !(sum as u16)
}

fn checksum_words(data: &[u8], mut sum: u32) -> u32 {
    let mut chunks = data.chunks_exact(2);
    for w in &mut chunks {
        sum += u16::from_be_bytes([w[0], w[1]]) as u32;
    }
    if let [last] = chunks.remainder() {
        sum += (*last as u32) << 8;
    }
    sum
}

pub fn ipv4_header_checksum(header: &[u8]) -> u16 {
    let mut sum = checksum_words(&header[..10], 0);
    sum = checksum_words(&header[12..], sum);
    checksum_fold(sum)
}

pub fn tcp_checksum(src: Ipv4Addr, dst: Ipv4Addr, segment: &[u8]) -> u16 {
    let mut sum = checksum_words(&src.octets(), 0);
    sum = checksum_words(&dst.octets(), sum);
    sum += 6u32; // protocol
    sum += segment.len() as u32;
    // Segment with the checksum field zeroed.
    sum = checksum_words(&segment[..16], sum);
    sum = checksum_words(&segment[18..], sum);
    checksum_fold(sum)
}

/// Decode a raw frame into all layers that parse.
///
/// Failures never panic; they end the descent and are reported through
/// `diagnostics`, leaving shallower layers intact.
pub fn decode_packet(raw: &RawPacket) -> PacketLayers {
    let mut out = PacketLayers::default();
    let bytes = &raw.link_bytes;

    if bytes.len() < 14 {
        out.diagnostics.push(LayerError {
            layer: Layer::Ethernet,
            offset: 0,
            reason: format!(
                "frame of {} bytes is shorter than an Ethernet header",
                bytes.len()
            ),
        });
        return out;
    }
    let mut dst = [0u8; 6];
    let mut src = [0u8; 6];
    dst.copy_from_slice(&bytes[0..6]);
    src.copy_from_slice(&bytes[6..12]);
    let ethertype = u16::from_be_bytes([bytes[12], bytes[13]]);
    out.eth = Some(EthLayer {
        src_mac: MacAddr(src),
        dst_mac: MacAddr(dst),
        ethertype,
    });

    if ethertype != ETHERTYPE_IPV4 {
        return out;
    }
    let ip_bytes = &bytes[14..];
    if ip_bytes.len() < 20 {
        out.diagnostics.push(LayerError {
            layer: Layer::Ipv4,
            offset: 14,
            reason: "truncated IPv4 header".into(),
        });
        return out;
    }
    let version = ip_bytes[0] >> 4;
    let ihl = ((ip_bytes[0] & 0x0F) as usize) * 4;
    if version != 4 || ihl < 20 || ip_bytes.len() < ihl {
        out.diagnostics.push(LayerError {
            layer: Layer::Ipv4,
            offset: 14,
            reason: format!("invalid IPv4 header (version {version}, ihl {ihl})"),
        });
        return out;
    }
    let total_length = u16::from_be_bytes([ip_bytes[2], ip_bytes[3]]);
    if (total_length as usize) < ihl || ip_bytes.len() < total_length as usize {
        out.diagnostics.push(LayerError {
            layer: Layer::Ipv4,
            offset: 14,
            reason: format!("IPv4 total length {total_length} inconsistent with frame"),
        });
        return out;
    }
    let checksum = u16::from_be_bytes([ip_bytes[10], ip_bytes[11]]);
    let checksum_ok = ipv4_header_checksum(&ip_bytes[..ihl]) == checksum;
    let ip = Ipv4Layer {
        src_ip: Ipv4Addr::new(ip_bytes[12], ip_bytes[13], ip_bytes[14], ip_bytes[15]),
        dst_ip: Ipv4Addr::new(ip_bytes[16], ip_bytes[17], ip_bytes[18], ip_bytes[19]),
        protocol: ip_bytes[9],
        checksum,
        checksum_ok,
        total_length,
    };
    if !checksum_ok {
        out.diagnostics.push(LayerError {
            layer: Layer::Ipv4,
            offset: 14 + 10,
            reason: "IPv4 header checksum mismatch".into(),
        });
    }
    let protocol = ip.protocol;
    out.ip = Some(ip);
    if protocol != 6 {
        return out;
    }

    // Use the IP total length, not the frame length: short frames are padded.
    let segment = &ip_bytes[ihl..total_length as usize];
    if segment.len() < 20 {
        out.diagnostics.push(LayerError {
            layer: Layer::Tcp,
            offset: 14 + ihl,
            reason: "truncated TCP header".into(),
        });
        return out;
    }
    let data_offset = ((segment[12] >> 4) as usize) * 4;
    if data_offset < 20 || segment.len() < data_offset {
        out.diagnostics.push(LayerError {
            layer: Layer::Tcp,
            offset: 14 + ihl + 12,
            reason: format!("invalid TCP data offset {data_offset}"),
        });
        return out;
    }
    let ip_ref = out.ip.as_ref().unwrap();
    let checksum = u16::from_be_bytes([segment[16], segment[17]]);
    let checksum_ok = tcp_checksum(ip_ref.src_ip, ip_ref.dst_ip, segment) == checksum;
    let tcp = TcpLayer {
        src_port: u16::from_be_bytes([segment[0], segment[1]]),
        dst_port: u16::from_be_bytes([segment[2], segment[3]]),
        seq: u32::from_be_bytes([segment[4], segment[5], segment[6], segment[7]]),
        ack: u32::from_be_bytes([segment[8], segment[9], segment[10], segment[11]]),
        flags: segment[13],
        checksum,
        checksum_ok,
        payload: segment[data_offset..].to_vec(),
    };
    if !checksum_ok {
        out.diagnostics.push(LayerError {
            layer: Layer::Tcp,
            offset: 14 + ihl + 16,
            reason: "TCP checksum mismatch".into(),
        });
    }
    let starts_iec104 = !tcp.payload.is_empty() && tcp.payload[0] == START_BYTE;
    out.tcp = Some(tcp);

    if checksum_ok && starts_iec104 {
        let scan = split_frames(&out.tcp.as_ref().unwrap().payload);
        out.iec104 = scan.frames;
        out.residue = scan.residue;
    }
    out
}

/// Assemble a complete Ethernet/IPv4/TCP frame with valid checksums.
#[allow(clippy::too_many_arguments)]
pub fn build_tcp_packet(
    src_mac: MacAddr,
    dst_mac: MacAddr,
    src_ip: Ipv4Addr,
    dst_ip: Ipv4Addr,
    src_port: u16,
    dst_port: u16,
    seq: u32,
    ack: u32,
    flags: u8,
    payload: &[u8],
) -> Vec<u8> {
    let tcp_len = 20 + payload.len();
    let total_length = (20 + tcp_len) as u16;

    let mut frame = Vec::with_capacity(14 + total_length as usize);
    frame.extend_from_slice(&dst_mac.0);
    frame.extend_from_slice(&src_mac.0);
    frame.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());

    let mut ip = [0u8; 20];
    ip[0] = 0x45;
    ip[1] = 0x00;
    ip[2..4].copy_from_slice(&total_length.to_be_bytes());
    ip[4..6].copy_from_slice(&0x0001u16.to_be_bytes());
    ip[6..8].copy_from_slice(&0x4000u16.to_be_bytes()); // don't fragment
    ip[8] = 64;
    ip[9] = 6;
    ip[12..16].copy_from_slice(&src_ip.octets());
    ip[16..20].copy_from_slice(&dst_ip.octets());
    let ip_csum = ipv4_header_checksum(&ip);
    ip[10..12].copy_from_slice(&ip_csum.to_be_bytes());
    frame.extend_from_slice(&ip);

    let mut tcp = Vec::with_capacity(tcp_len);
    tcp.extend_from_slice(&src_port.to_be_bytes());
    tcp.extend_from_slice(&dst_port.to_be_bytes());
    tcp.extend_from_slice(&seq.to_be_bytes());
    tcp.extend_from_slice(&ack.to_be_bytes());
    tcp.push(0x50); // data offset 5
    tcp.push(flags);
    tcp.extend_from_slice(&8192u16.to_be_bytes());
    tcp.extend_from_slice(&[0u8, 0u8]); // checksum placeholder
    tcp.extend_from_slice(&[0u8, 0u8]); // urgent pointer
    tcp.extend_from_slice(payload);
    let tcp_csum = tcp_checksum(src_ip, dst_ip, &tcp);
    tcp[16..18].copy_from_slice(&tcp_csum.to_be_bytes());
    frame.extend_from_slice(&tcp);

    frame
}
