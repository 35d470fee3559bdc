//! IEC 60870-5-104 application layer: APCI framing and ASDU contents.
//!
//! An APDU on the wire is `0x68 | length | 4 control bytes | optional ASDU`,
//! where `length` counts the control field plus the ASDU. The control field
//! selects one of three frame formats: I (numbered information transfer),
//! S (supervisory acknowledgment) and U (unnumbered control functions).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Start byte of every APDU.
pub const START_BYTE: u8 = 0x68;

/// Minimum value of the APDU length field (control field only).
pub const MIN_APDU_LENGTH: usize = 4;

/// Maximum value of the APDU length field.
pub const MAX_APDU_LENGTH: usize = 253;

/// Sequence numbers are 15 bit wide; all counter arithmetic is modulo this.
pub const SEQ_MODULUS: u16 = 32768;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("unsupported ASDU type id {0}")]
    UnsupportedTypeId(u8),
    #[error("invalid APDU: {0}")]
    InvalidApdu(String),
}

/// APCI frame format discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Format {
    I,
    S,
    U,
}

impl Format {
    /// Single-letter tag used in packet summaries, e.g. `IEC104-U`.
    pub fn letter(&self) -> char {
        match self {
            Format::I => 'I',
            Format::S => 'S',
            Format::U => 'U',
        }
    }
}

/// U-frame control functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UFunction {
    StartDtAct,
    StartDtCon,
    StopDtAct,
    StopDtCon,
    TestFrAct,
    TestFrCon,
}

impl UFunction {
    pub fn control_byte(&self) -> u8 {
        match self {
            UFunction::StartDtAct => 0x07,
            UFunction::StartDtCon => 0x0B,
            UFunction::StopDtAct => 0x13,
            UFunction::StopDtCon => 0x23,
            UFunction::TestFrAct => 0x43,
            UFunction::TestFrCon => 0x83,
        }
    }

    pub fn from_control_byte(byte: u8) -> Option<Self> {
        match byte {
            0x07 => Some(UFunction::StartDtAct),
            0x0B => Some(UFunction::StartDtCon),
            0x13 => Some(UFunction::StopDtAct),
            0x23 => Some(UFunction::StopDtCon),
            0x43 => Some(UFunction::TestFrAct),
            0x83 => Some(UFunction::TestFrCon),
            _ => None,
        }
    }
}

/// Control field contents, one variant per frame format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    I { send_seq: u16, recv_seq: u16 },
    S { recv_seq: u16 },
    U { function: UFunction },
}

/// APCI header of one APDU: length field plus decoded control field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Apci {
    /// Raw length field: 4 + ASDU byte length.
    pub length: u8,
    pub control: Control,
}

impl Apci {
    pub fn format(&self) -> Format {
        match self.control {
            Control::I { .. } => Format::I,
            Control::S { .. } => Format::S,
            Control::U { .. } => Format::U,
        }
    }

    pub fn send_seq(&self) -> Option<u16> {
        match self.control {
            Control::I { send_seq, .. } => Some(send_seq),
            _ => None,
        }
    }

    pub fn recv_seq(&self) -> Option<u16> {
        match self.control {
            Control::I { recv_seq, .. } | Control::S { recv_seq } => Some(recv_seq),
            _ => None,
        }
    }

    fn encode_control(&self) -> [u8; 4] {
        match self.control {
            Control::I { send_seq, recv_seq } => [
                ((send_seq << 1) & 0xFE) as u8,
                (send_seq >> 7) as u8,
                ((recv_seq << 1) & 0xFE) as u8,
                (recv_seq >> 7) as u8,
            ],
            Control::S { recv_seq } => [
                0x01,
                0x00,
                ((recv_seq << 1) & 0xFE) as u8,
                (recv_seq >> 7) as u8,
            ],
            Control::U { function } => [function.control_byte(), 0x00, 0x00, 0x00],
        }
    }

    fn parse_control(control: &[u8; 4]) -> Result<Control, String> {
        let cf1 = control[0];
        if cf1 & 0x01 == 0 {
            let send_seq = ((control[1] as u16) << 7) | ((cf1 >> 1) as u16);
            let recv_seq = ((control[3] as u16) << 7) | ((control[2] >> 1) as u16);
            Ok(Control::I { send_seq, recv_seq })
        } else if cf1 & 0x03 == 0x01 {
            if cf1 != 0x01 {
                return Err(format!("invalid S-frame control byte 0x{cf1:02X}"));
            }
            let recv_seq = ((control[3] as u16) << 7) | ((control[2] >> 1) as u16);
            Ok(Control::S { recv_seq })
        } else {
            match UFunction::from_control_byte(cf1) {
                Some(function) => Ok(Control::U { function }),
                None => Err(format!("unknown U-frame function byte 0x{cf1:02X}")),
            }
        }
    }
}

/// Scalar carried by one information object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObjectValue {
    Float(f32),
    Bool(bool),
    Bitstring(u32),
    None,
}

/// A single information object: 24-bit address plus value and quality bits.
#[derive(Debug, Clone, PartialEq)]
pub struct InformationObject {
    pub ioa: u32,
    pub value: ObjectValue,
    pub quality: Option<u8>,
    /// CP56Time2a bytes for time-tagged types, kept verbatim.
    pub time_tag: Option<[u8; 7]>,
}

impl InformationObject {
    pub fn new(ioa: u32, value: ObjectValue, quality: Option<u8>) -> Self {
        Self {
            ioa: ioa & 0x00FF_FFFF,
            value,
            quality,
            time_tag: None,
        }
    }

    pub fn with_time_tag(mut self, tag: [u8; 7]) -> Self {
        self.time_tag = Some(tag);
        self
    }
}

/// Type ids implemented by the codec. Everything else decodes header-only
/// with the object section preserved as opaque bytes.
pub mod type_ids {
    /// Single-point information.
    pub const M_SP_NA_1: u8 = 1;
    /// Measured value, short float.
    pub const M_ME_NC_1: u8 = 13;
    /// Measured value, short float with CP56Time2a time tag.
    pub const M_ME_TF_1: u8 = 36;
    /// Single command.
    pub const C_SC_NA_1: u8 = 45;
    /// Setpoint command, short float.
    pub const C_SE_NC_1: u8 = 50;
    /// Interrogation command.
    pub const C_IC_NA_1: u8 = 100;
}

/// Per-object element size in bytes (IOA excluded) for the implemented subset.
pub fn element_size(type_id: u8) -> Option<usize> {
    match type_id {
        type_ids::M_SP_NA_1 => Some(1),
        type_ids::M_ME_NC_1 => Some(5),
        type_ids::M_ME_TF_1 => Some(12),
        type_ids::C_SC_NA_1 => Some(1),
        type_ids::C_SE_NC_1 => Some(5),
        type_ids::C_IC_NA_1 => Some(1),
        _ => None,
    }
}

/// Command type ids per the standard's process-information split.
pub fn is_command_type(type_id: u8) -> bool {
    (45..=69).contains(&type_id) || type_id == type_ids::C_IC_NA_1
}

/// Common causes of transmission.
pub mod cot {
    pub const PERIODIC: u8 = 1;
    pub const SPONTANEOUS: u8 = 3;
    pub const ACTIVATION: u8 = 6;
    pub const ACTIVATION_CON: u8 = 7;
    pub const DEACTIVATION: u8 = 8;
    pub const ACTIVATION_TERM: u8 = 10;
    pub const INTERROGATED: u8 = 20;
}

/// ASDU: typed payload of an I-frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Asdu {
    pub type_id: u8,
    pub num_objects: u8,
    pub sequence_flag: bool,
    /// 6-bit cause of transmission.
    pub cot: u8,
    pub negative: bool,
    pub test: bool,
    pub originator: u8,
    pub common_address: u16,
    pub objects: Vec<InformationObject>,
    /// Object section bytes for type ids outside the implemented subset.
    pub opaque: Option<Vec<u8>>,
}

impl Asdu {
    pub fn new(type_id: u8, cot: u8, common_address: u16, objects: Vec<InformationObject>) -> Self {
        Self {
            type_id,
            num_objects: objects.len() as u8,
            sequence_flag: false,
            cot: cot & 0x3F,
            negative: false,
            test: false,
            originator: 0,
            common_address,
            objects,
            opaque: None,
        }
    }

    pub fn is_opaque(&self) -> bool {
        self.opaque.is_some()
    }

    fn byte_len(&self) -> Result<usize, CodecError> {
        if let Some(raw) = &self.opaque {
            return Ok(6 + raw.len());
        }
        let esz = element_size(self.type_id).ok_or(CodecError::UnsupportedTypeId(self.type_id))?;
        let n = self.objects.len();
        Ok(if self.sequence_flag {
            6 + 3 + n * esz
        } else {
            6 + n * (3 + esz)
        })
    }
}

fn decode_element(type_id: u8, bytes: &[u8]) -> (ObjectValue, Option<u8>, Option<[u8; 7]>) {
    match type_id {
        type_ids::M_SP_NA_1 | type_ids::C_SC_NA_1 => (
            ObjectValue::Bool(bytes[0] & 0x01 != 0),
            Some(bytes[0] & 0xFE),
            None,
        ),
        type_ids::M_ME_NC_1 | type_ids::C_SE_NC_1 => {
            let v = f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
            (ObjectValue::Float(v), Some(bytes[4]), None)
        }
        type_ids::M_ME_TF_1 => {
            let v = f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
            let mut tag = [0u8; 7];
            tag.copy_from_slice(&bytes[5..12]);
            (ObjectValue::Float(v), Some(bytes[4]), Some(tag))
        }
        type_ids::C_IC_NA_1 => (ObjectValue::None, Some(bytes[0]), None),
        _ => unreachable!("element_size gated"),
    }
}

fn encode_element(
    type_id: u8,
    obj: &InformationObject,
    out: &mut Vec<u8>,
) -> Result<(), CodecError> {
    let quality = obj.quality.unwrap_or(0);
    match type_id {
        type_ids::M_SP_NA_1 | type_ids::C_SC_NA_1 => {
            let bit = match obj.value {
                ObjectValue::Bool(b) => b as u8,
                _ => {
                    return Err(CodecError::InvalidApdu(format!(
                        "type {type_id} needs a boolean value"
                    )))
                }
            };
            out.push((quality & 0xFE) | bit);
        }
        type_ids::M_ME_NC_1 | type_ids::C_SE_NC_1 | type_ids::M_ME_TF_1 => {
            let v = match obj.value {
                ObjectValue::Float(v) => v,
                _ => {
                    return Err(CodecError::InvalidApdu(format!(
                        "type {type_id} needs a float value"
                    )))
                }
            };
            out.extend_from_slice(&v.to_le_bytes());
            out.push(quality);
            if type_id == type_ids::M_ME_TF_1 {
                out.extend_from_slice(&obj.time_tag.unwrap_or([0; 7]));
            }
        }
        type_ids::C_IC_NA_1 => out.push(quality),
        _ => return Err(CodecError::UnsupportedTypeId(type_id)),
    }
    Ok(())
}

fn parse_asdu(bytes: &[u8]) -> Result<Asdu, String> {
    if bytes.len() < 6 {
        return Err(format!("ASDU header truncated ({} bytes)", bytes.len()));
    }
    let type_id = bytes[0];
    let num_objects = bytes[1] & 0x7F;
    let sequence_flag = bytes[1] & 0x80 != 0;
    let cot_byte = bytes[2];
    let originator = bytes[3];
    let common_address = u16::from_le_bytes([bytes[4], bytes[5]]);
    let body = &bytes[6..];

    let mut asdu = Asdu {
        type_id,
        num_objects,
        sequence_flag,
        cot: cot_byte & 0x3F,
        negative: cot_byte & 0x40 != 0,
        test: cot_byte & 0x80 != 0,
        originator,
        common_address,
        objects: Vec::new(),
        opaque: None,
    };

    let Some(esz) = element_size(type_id) else {
        asdu.opaque = Some(body.to_vec());
        return Ok(asdu);
    };

    let n = num_objects as usize;
    let expected = if sequence_flag {
        3 + n * esz
    } else {
        n * (3 + esz)
    };
    if body.len() != expected {
        return Err(format!(
            "ASDU object section is {} bytes, expected {expected} for type {type_id} x{n}",
            body.len()
        ));
    }

    if sequence_flag {
        let base = u32::from_le_bytes([body[0], body[1], body[2], 0]);
        for i in 0..n {
            let el = &body[3 + i * esz..3 + (i + 1) * esz];
            let (value, quality, time_tag) = decode_element(type_id, el);
            asdu.objects.push(InformationObject {
                ioa: base + i as u32,
                value,
                quality,
                time_tag,
            });
        }
    } else {
        for i in 0..n {
            let rec = &body[i * (3 + esz)..(i + 1) * (3 + esz)];
            let ioa = u32::from_le_bytes([rec[0], rec[1], rec[2], 0]);
            let (value, quality, time_tag) = decode_element(type_id, &rec[3..]);
            asdu.objects.push(InformationObject {
                ioa,
                value,
                quality,
                time_tag,
            });
        }
    }
    Ok(asdu)
}

fn encode_asdu(asdu: &Asdu) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::with_capacity(asdu.byte_len()?);
    if asdu.objects.len() > 127 {
        return Err(CodecError::InvalidApdu(
            "more than 127 information objects".into(),
        ));
    }
    if !asdu.is_opaque() && asdu.num_objects as usize != asdu.objects.len() {
        return Err(CodecError::InvalidApdu(format!(
            "num_objects {} does not match {} objects",
            asdu.num_objects,
            asdu.objects.len()
        )));
    }
    out.push(asdu.type_id);
    out.push((asdu.num_objects & 0x7F) | if asdu.sequence_flag { 0x80 } else { 0 });
    out.push(
        (asdu.cot & 0x3F) | if asdu.negative { 0x40 } else { 0 } | if asdu.test { 0x80 } else { 0 },
    );
    out.push(asdu.originator);
    out.extend_from_slice(&asdu.common_address.to_le_bytes());

    if let Some(raw) = &asdu.opaque {
        out.extend_from_slice(raw);
        return Ok(out);
    }

    if asdu.sequence_flag {
        let base = asdu.objects.first().map(|o| o.ioa).unwrap_or(0);
        out.extend_from_slice(&base.to_le_bytes()[..3]);
        for (i, obj) in asdu.objects.iter().enumerate() {
            if obj.ioa != base + i as u32 {
                return Err(CodecError::InvalidApdu(
                    "sequence flag set but IOAs are not consecutive".into(),
                ));
            }
            encode_element(asdu.type_id, obj, &mut out)?;
        }
    } else {
        for obj in &asdu.objects {
            out.extend_from_slice(&obj.ioa.to_le_bytes()[..3]);
            encode_element(asdu.type_id, obj, &mut out)?;
        }
    }
    Ok(out)
}

/// One application protocol data unit: APCI plus optional ASDU.
///
/// The ASDU is present exactly when the APCI format is I.
#[derive(Debug, Clone, PartialEq)]
pub struct Apdu {
    pub apci: Apci,
    pub asdu: Option<Asdu>,
}

impl Apdu {
    pub fn u_frame(function: UFunction) -> Self {
        Self {
            apci: Apci {
                length: 4,
                control: Control::U { function },
            },
            asdu: None,
        }
    }

    pub fn s_frame(recv_seq: u16) -> Self {
        Self {
            apci: Apci {
                length: 4,
                control: Control::S {
                    recv_seq: recv_seq % SEQ_MODULUS,
                },
            },
            asdu: None,
        }
    }

    pub fn i_frame(send_seq: u16, recv_seq: u16, asdu: Asdu) -> Result<Self, CodecError> {
        let body_len = asdu.byte_len()?;
        let length = 4 + body_len;
        if length > MAX_APDU_LENGTH {
            return Err(CodecError::InvalidApdu(format!(
                "APDU length {length} exceeds {MAX_APDU_LENGTH}"
            )));
        }
        Ok(Self {
            apci: Apci {
                length: length as u8,
                control: Control::I {
                    send_seq: send_seq % SEQ_MODULUS,
                    recv_seq: recv_seq % SEQ_MODULUS,
                },
            },
            asdu: Some(asdu),
        })
    }
}

/// Parse error for one frame slot inside a TCP payload or stream buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameError {
    /// Byte offset of the problem, relative to the scanned buffer.
    pub offset: usize,
    pub reason: String,
}

/// Outcome of one frame slot: either a decoded APDU or a diagnostic that
/// upstream mapping turns into the error symbol.
#[derive(Debug, Clone, PartialEq)]
pub enum FrameParse {
    Frame(Apdu),
    Malformed(FrameError),
}

impl FrameParse {
    pub fn apdu(&self) -> Option<&Apdu> {
        match self {
            FrameParse::Frame(a) => Some(a),
            FrameParse::Malformed(_) => None,
        }
    }
}

/// Result of scanning a byte buffer for APDUs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameScan {
    /// Decoded frames and inline diagnostics, in wire order.
    pub frames: Vec<FrameParse>,
    /// Bytes consumed from the front of the buffer.
    pub consumed: usize,
    /// Trailing bytes of an incomplete frame awaiting more stream data.
    pub residue: usize,
}

/// Split a buffer into APDUs at start-byte/length boundaries.
///
/// A structurally intact frame with an undecodable interior becomes a
/// `Malformed` slot and scanning continues at the next boundary. A broken
/// boundary (bad start byte or out-of-range length) ends the scan, since
/// resynchronization inside a TCP stream is not reliable.
pub fn split_frames(buf: &[u8]) -> FrameScan {
    let mut scan = FrameScan::default();
    let mut off = 0usize;
    while off < buf.len() {
        if buf[off] != START_BYTE {
            scan.frames.push(FrameParse::Malformed(FrameError {
                offset: off,
                reason: format!("invalid start byte 0x{:02X}", buf[off]),
            }));
            scan.consumed = buf.len();
            return scan;
        }
        if off + 2 > buf.len() {
            scan.residue = buf.len() - off;
            scan.consumed = off;
            return scan;
        }
        let length = buf[off + 1] as usize;
        if !(MIN_APDU_LENGTH..=MAX_APDU_LENGTH).contains(&length) {
            scan.frames.push(FrameParse::Malformed(FrameError {
                offset: off + 1,
                reason: format!("APDU length {length} out of range"),
            }));
            scan.consumed = buf.len();
            return scan;
        }
        let end = off + 2 + length;
        if end > buf.len() {
            scan.residue = buf.len() - off;
            scan.consumed = off;
            return scan;
        }

        let mut control = [0u8; 4];
        control.copy_from_slice(&buf[off + 2..off + 6]);
        match Apci::parse_control(&control) {
            Err(reason) => {
                scan.frames.push(FrameParse::Malformed(FrameError {
                    offset: off + 2,
                    reason,
                }));
            }
            Ok(ctrl) => {
                let apci = Apci {
                    length: length as u8,
                    control: ctrl,
                };
                let body = &buf[off + 6..end];
                match apci.format() {
                    Format::S | Format::U if !body.is_empty() => {
                        scan.frames.push(FrameParse::Malformed(FrameError {
                            offset: off + 6,
                            reason: format!(
                                "{} bytes after {}-frame control field",
                                body.len(),
                                apci.format().letter()
                            ),
                        }));
                    }
                    Format::I if body.is_empty() => {
                        scan.frames.push(FrameParse::Malformed(FrameError {
                            offset: off + 2,
                            reason: "I-frame without ASDU".into(),
                        }));
                    }
                    Format::I => match parse_asdu(body) {
                        Ok(asdu) => scan.frames.push(FrameParse::Frame(Apdu {
                            apci,
                            asdu: Some(asdu),
                        })),
                        Err(reason) => scan.frames.push(FrameParse::Malformed(FrameError {
                            offset: off + 6,
                            reason,
                        })),
                    },
                    Format::S | Format::U => scan
                        .frames
                        .push(FrameParse::Frame(Apdu { apci, asdu: None })),
                }
            }
        }
        off = end;
    }
    scan.consumed = off;
    scan
}

/// Encode one APDU to its wire representation.
pub fn encode_apdu(apdu: &Apdu) -> Result<Vec<u8>, CodecError> {
    let body = match (&apdu.apci.control, &apdu.asdu) {
        (Control::I { .. }, Some(asdu)) => encode_asdu(asdu)?,
        (Control::I { .. }, None) => {
            return Err(CodecError::InvalidApdu("I-frame requires an ASDU".into()))
        }
        (_, Some(_)) => {
            return Err(CodecError::InvalidApdu(
                "ASDU is only valid in an I-frame".into(),
            ))
        }
        (_, None) => Vec::new(),
    };
    let length = 4 + body.len();
    if length > MAX_APDU_LENGTH {
        return Err(CodecError::InvalidApdu(format!(
            "APDU length {length} exceeds {MAX_APDU_LENGTH}"
        )));
    }
    if apdu.apci.length as usize != length {
        return Err(CodecError::InvalidApdu(format!(
            "length field {} does not match encoded length {length}",
            apdu.apci.length
        )));
    }
    let mut out = Vec::with_capacity(2 + length);
    out.push(START_BYTE);
    out.push(length as u8);
    out.extend_from_slice(&apdu.apci.encode_control());
    out.extend_from_slice(&body);
    Ok(out)
}
