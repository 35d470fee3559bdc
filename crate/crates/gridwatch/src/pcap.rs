//! Classic pcap reading and writing (link type Ethernet).
//!
//! Captures are written in the microsecond format; readers accept both
//! endiannesses and the nanosecond magic variant.

use thiserror::Error;

use crate::packet::RawPacket;

const MAGIC_US: u32 = 0xA1B2_C3D4;
const MAGIC_NS: u32 = 0xA1B2_3C4D;
const LINKTYPE_ETHERNET: u32 = 1;

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("capture too short for a pcap global header")]
    TruncatedHeader,
    #[error("unknown pcap magic 0x{0:08X}")]
    BadMagic(u32),
    #[error("unsupported link type {0}, expected Ethernet")]
    BadLinkType(u32),
    #[error("truncated packet record at offset {0}")]
    TruncatedRecord(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy)]
struct Endianness {
    big: bool,
    nanos: bool,
}

impl Endianness {
    fn u32(&self, b: &[u8]) -> u32 {
        let arr = [b[0], b[1], b[2], b[3]];
        if self.big {
            u32::from_be_bytes(arr)
        } else {
            u32::from_le_bytes(arr)
        }
    }
}

/// Serialize packets as a classic microsecond pcap capture.
pub fn write_pcap(packets: &[RawPacket]) -> Vec<u8> {
    let mut out = Vec::with_capacity(
        24 + packets
            .iter()
            .map(|p| 16 + p.link_bytes.len())
            .sum::<usize>(),
    );
    out.extend_from_slice(&MAGIC_US.to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&4u16.to_le_bytes());
    out.extend_from_slice(&0i32.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&65535u32.to_le_bytes());
    out.extend_from_slice(&LINKTYPE_ETHERNET.to_le_bytes());
    for p in packets {
        out.extend_from_slice(&(p.ts_sec as u32).to_le_bytes());
        out.extend_from_slice(&(p.ts_nsec / 1_000).to_le_bytes());
        out.extend_from_slice(&(p.link_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&(p.link_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&p.link_bytes);
    }
    out
}

/// Parse a pcap capture into packets.
pub fn read_pcap(bytes: &[u8]) -> Result<Vec<RawPacket>, CaptureError> {
    if bytes.len() < 24 {
        return Err(CaptureError::TruncatedHeader);
    }
    let magic_le = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let magic_be = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let endian = if magic_le == MAGIC_US {
        Endianness {
            big: false,
            nanos: false,
        }
    } else if magic_be == MAGIC_US {
        Endianness {
            big: true,
            nanos: false,
        }
    } else if magic_le == MAGIC_NS {
        Endianness {
            big: false,
            nanos: true,
        }
    } else if magic_be == MAGIC_NS {
        Endianness {
            big: true,
            nanos: true,
        }
    } else {
        return Err(CaptureError::BadMagic(magic_le));
    };

    let linktype = endian.u32(&bytes[20..24]);
    if linktype != LINKTYPE_ETHERNET {
        return Err(CaptureError::BadLinkType(linktype));
    }

    let mut packets = Vec::new();
    let mut off = 24usize;
    while off < bytes.len() {
        if off + 16 > bytes.len() {
            return Err(CaptureError::TruncatedRecord(off));
        }
        let ts_sec = endian.u32(&bytes[off..off + 4]) as u64;
        let ts_frac = endian.u32(&bytes[off + 4..off + 8]);
        let incl_len = endian.u32(&bytes[off + 8..off + 12]) as usize;
        off += 16;
        if off + incl_len > bytes.len() {
            return Err(CaptureError::TruncatedRecord(off));
        }
        let ts_nsec = if endian.nanos {
            ts_frac
        } else {
            ts_frac * 1_000
        };
        packets.push(RawPacket::new(
            ts_sec,
            ts_nsec,
            bytes[off..off + incl_len].to_vec(),
        ));
        off += incl_len;
    }
    Ok(packets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<RawPacket> {
        vec![
            RawPacket::new(1_649_933_229, 123_000, vec![1, 2, 3, 4]),
            RawPacket::new(1_649_933_230, 999_000, vec![5; 60]),
        ]
    }

    #[test]
    fn round_trip() {
        let packets = sample();
        let bytes = write_pcap(&packets);
        assert_eq!(read_pcap(&bytes).unwrap(), packets);
    }

    #[test]
    fn reads_big_endian() {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC_US.to_be_bytes());
        out.extend_from_slice(&2u16.to_be_bytes());
        out.extend_from_slice(&4u16.to_be_bytes());
        out.extend_from_slice(&[0u8; 8]);
        out.extend_from_slice(&65535u32.to_be_bytes());
        out.extend_from_slice(&LINKTYPE_ETHERNET.to_be_bytes());
        out.extend_from_slice(&7u32.to_be_bytes());
        out.extend_from_slice(&5u32.to_be_bytes());
        out.extend_from_slice(&2u32.to_be_bytes());
        out.extend_from_slice(&2u32.to_be_bytes());
        out.extend_from_slice(&[0xAA, 0xBB]);
        let packets = read_pcap(&out).unwrap();
        assert_eq!(packets.len(), 1);
        assert_eq!(packets[0].ts_sec, 7);
        assert_eq!(packets[0].ts_nsec, 5_000);
        assert_eq!(packets[0].link_bytes, vec![0xAA, 0xBB]);
    }

    #[test]
    fn reads_nanosecond_magic() {
        let mut bytes = write_pcap(&sample());
        bytes[0..4].copy_from_slice(&MAGIC_NS.to_le_bytes());
        let packets = read_pcap(&bytes).unwrap();
        // Fraction field reinterpreted as nanoseconds.
        assert_eq!(packets[0].ts_nsec, 123);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = write_pcap(&sample());
        bytes[0] = 0x00;
        assert!(matches!(read_pcap(&bytes), Err(CaptureError::BadMagic(_))));
    }

    #[test]
    fn rejects_truncated_record() {
        let mut bytes = write_pcap(&sample());
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(
            read_pcap(&bytes),
            Err(CaptureError::TruncatedRecord(_))
        ));
    }

    #[test]
    fn rejects_non_ethernet_linktype() {
        let mut bytes = write_pcap(&sample());
        bytes[20] = 101; // raw IP
        assert!(matches!(
            read_pcap(&bytes),
            Err(CaptureError::BadLinkType(101))
        ));
    }
}
