//! Frame layout shared by every transport.
//!
//! A frame is an 18-byte little-endian header followed by the raw payload:
//!
//! ```text
//! offset  size  field
//! 0       2     op (bit 15 set on responses)
//! 2       8     correlation id
//! 10      2     source component
//! 12      2     destination component
//! 14      4     payload length
//! 18      n     payload
//! ```
//!
//! Component ids pack the kind into the top four bits and the index into the
//! low twelve.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const HEADER_LEN: usize = 18;
const RESPONSE_BIT: u16 = 0x8000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Kind {
    P,
    M,
    N,
    Gnm,
    External,
}

impl Kind {
    fn code(self) -> u16 {
        match self {
            Kind::P => 1,
            Kind::M => 2,
            Kind::N => 3,
            Kind::Gnm => 4,
            Kind::External => 5,
        }
    }

    fn from_code(code: u16) -> Option<Kind> {
        Some(match code {
            1 => Kind::P,
            2 => Kind::M,
            3 => Kind::N,
            4 => Kind::Gnm,
            5 => Kind::External,
            _ => return None,
        })
    }

    pub fn letter(self) -> &'static str {
        match self {
            Kind::P => "P",
            Kind::M => "M",
            Kind::N => "N",
            Kind::Gnm => "G",
            Kind::External => "X",
        }
    }
}

/// Names one board (or the GNM) in the rack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ComponentId {
    pub kind: Kind,
    pub index: u16,
}

impl ComponentId {
    pub const GNM: ComponentId = ComponentId {
        kind: Kind::Gnm,
        index: 0,
    };

    pub const fn new(kind: Kind, index: u16) -> Self {
        ComponentId { kind, index }
    }
    pub const fn p(index: u16) -> Self {
        Self::new(Kind::P, index)
    }
    pub const fn m(index: u16) -> Self {
        Self::new(Kind::M, index)
    }
    pub const fn n(index: u16) -> Self {
        Self::new(Kind::N, index)
    }

    pub fn to_wire(self) -> u16 {
        (self.kind.code() << 12) | (self.index & 0x0fff)
    }

    pub fn from_wire(raw: u16) -> Result<Self> {
        let kind = Kind::from_code(raw >> 12)
            .ok_or_else(|| Error::Protocol(format!("bad component kind in {raw:#06x}")))?;
        Ok(ComponentId {
            kind,
            index: raw & 0x0fff,
        })
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.kind.letter(), self.index)
    }
}

impl FromStr for ComponentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("gnm") {
            return Ok(ComponentId::GNM);
        }
        let (head, tail) = s.split_at(s.char_indices().nth(1).map(|(i, _)| i).unwrap_or(s.len()));
        let kind = match head {
            "P" | "p" => Kind::P,
            "M" | "m" => Kind::M,
            "N" | "n" => Kind::N,
            "G" | "g" => Kind::Gnm,
            "X" | "x" => Kind::External,
            _ => return Err(Error::Config(format!("bad component id {s:?}"))),
        };
        let index = tail
            .parse::<u16>()
            .map_err(|_| Error::Config(format!("bad component index in {s:?}")))?;
        if index > 0x0fff {
            return Err(Error::Config(format!("component index too large in {s:?}")));
        }
        Ok(ComponentId { kind, index })
    }
}

macro_rules! ops {
    ($($name:ident = $code:expr),* $(,)?) => {
        /// Operation codes carried in the frame header.
        #[allow(non_camel_case_types)]
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        #[repr(u16)]
        pub enum Op {
            $($name = $code),*
        }

        impl Op {
            pub const ALL: &'static [Op] = &[$(Op::$name),*];

            pub fn from_code(code: u16) -> Option<Op> {
                match code {
                    $($code => Some(Op::$name),)*
                    _ => None,
                }
            }

            pub fn name(self) -> &'static str {
                match self {
                    $(Op::$name => stringify!($name)),*
                }
            }
        }
    };
}

ops! {
    PING = 0x0001,

    REGISTER_NC = 0x0101,
    LOOKUP_IP = 0x0102,
    IS_LOCAL = 0x0103,
    DEREGISTER_NC = 0x0104,
    ALLOC_NIC = 0x0105,
    NIC_RELEASE = 0x0106,
    GNM_SYNC = 0x0107,

    M_ALLOC = 0x0201,
    M_WRITE = 0x0202,
    M_READ = 0x0203,
    M_FREE = 0x0204,

    CREATE_SKEL = 0x0301,
    SKEL_BIND = 0x0302,
    SKEL_LISTEN = 0x0303,
    SKEL_ACCEPT_EVT = 0x0304,
    SKEL_CONNECT = 0x0305,
    SEND_NOTIFY = 0x0306,
    SEND_INLINE = 0x0307,
    RECV_REQ = 0x0308,
    RECV_REQ_DIRECT = 0x0309,
    CLOSE = 0x030a,
    PROXY_RESOLVE = 0x030b,

    FIT_CONNECT = 0x0401,
    FIT_DATA = 0x0402,
    FIT_CREDIT = 0x0403,
    FIT_CLOSE = 0x0404,
}

impl Op {
    pub fn code(self) -> u16 {
        self as u16
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Unit of the message protocol between components.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub op: Op,
    pub response: bool,
    pub correlation_id: u64,
    pub source: ComponentId,
    pub dest: ComponentId,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn request(
        op: Op,
        correlation_id: u64,
        source: ComponentId,
        dest: ComponentId,
        payload: Vec<u8>,
    ) -> Frame {
        Frame {
            op,
            response: false,
            correlation_id,
            source,
            dest,
            payload,
        }
    }

    /// Builds the response to `self`, swapping the endpoints and keeping the
    /// correlation id.
    pub fn reply(&self, payload: Vec<u8>) -> Frame {
        Frame {
            op: self.op,
            response: true,
            correlation_id: self.correlation_id,
            source: self.dest,
            dest: self.source,
            payload,
        }
    }

    pub fn payload_len(&self) -> usize {
        self.payload.len()
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        let op = self.op.code() | if self.response { RESPONSE_BIT } else { 0 };
        out.extend_from_slice(&op.to_le_bytes());
        out.extend_from_slice(&self.correlation_id.to_le_bytes());
        out.extend_from_slice(&self.source.to_wire().to_le_bytes());
        out.extend_from_slice(&self.dest.to_wire().to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
    }

    /// Parses the fixed header, returning `(frame without payload, payload_len)`.
    pub fn decode_header(buf: &[u8]) -> Result<(Frame, usize)> {
        if buf.len() < HEADER_LEN {
            return Err(Error::Protocol(format!(
                "short frame header ({} bytes)",
                buf.len()
            )));
        }
        let raw_op = u16::from_le_bytes([buf[0], buf[1]]);
        let op = Op::from_code(raw_op & !RESPONSE_BIT)
            .ok_or_else(|| Error::Protocol(format!("unknown op {raw_op:#06x}")))?;
        let correlation_id = u64::from_le_bytes(buf[2..10].try_into().unwrap());
        let source = ComponentId::from_wire(u16::from_le_bytes([buf[10], buf[11]]))?;
        let dest = ComponentId::from_wire(u16::from_le_bytes([buf[12], buf[13]]))?;
        let len = u32::from_le_bytes(buf[14..18].try_into().unwrap()) as usize;
        let frame = Frame {
            op,
            response: raw_op & RESPONSE_BIT != 0,
            correlation_id,
            source,
            dest,
            payload: Vec::new(),
        };
        Ok((frame, len))
    }

    pub fn decode(buf: &[u8]) -> Result<Frame> {
        let (mut frame, len) = Frame::decode_header(buf)?;
        if buf.len() != HEADER_LEN + len {
            return Err(Error::Protocol(format!(
                "payload_len {len} does not match {} trailing bytes",
                buf.len() - HEADER_LEN
            )));
        }
        frame.payload = buf[HEADER_LEN..].to_vec();
        Ok(frame)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_little_endian() {
        let f = Frame::request(
            Op::SEND_NOTIFY,
            0x0102_0304_0506_0708,
            ComponentId::p(1),
            ComponentId::n(2),
            vec![0xaa, 0xbb],
        );
        let bytes = f.encode();
        assert_eq!(
            bytes,
            vec![
                0x06, 0x03, // op
                0x08, 0x07, 0x06, 0x05, 0x04, 0x03, 0x02, 0x01, // correlation id
                0x01, 0x10, // P1
                0x02, 0x30, // N2
                0x02, 0x00, 0x00, 0x00, // payload_len
                0xaa, 0xbb,
            ]
        );
        let reply = f.reply(vec![]);
        assert_eq!(&reply.encode()[..2], &[0x06, 0x83]);
    }

    #[test]
    fn decode_rejects_length_mismatch() {
        let mut bytes = Frame::request(
            Op::PING,
            1,
            ComponentId::p(0),
            ComponentId::m(0),
            vec![1, 2, 3],
        )
        .encode();
        bytes.pop();
        assert!(matches!(Frame::decode(&bytes), Err(Error::Protocol(_))));
    }

    #[test]
    fn component_id_parsing() {
        assert_eq!("P0".parse::<ComponentId>().unwrap(), ComponentId::p(0));
        assert_eq!("n12".parse::<ComponentId>().unwrap(), ComponentId::n(12));
        assert_eq!("GNM".parse::<ComponentId>().unwrap(), ComponentId::GNM);
        assert!("Q1".parse::<ComponentId>().is_err());
    }

    fn arb_id() -> impl Strategy<Value = ComponentId> {
        (
            prop_oneof![
                Just(Kind::P),
                Just(Kind::M),
                Just(Kind::N),
                Just(Kind::Gnm),
                Just(Kind::External)
            ],
            0u16..4096,
        )
            .prop_map(|(k, i)| ComponentId::new(k, i))
    }

    proptest! {
        #[test]
        fn frame_roundtrip(op in proptest::sample::select(Op::ALL.to_vec()), response: bool, corr: u64,
                           src in arb_id(), dst in arb_id(), payload in proptest::collection::vec(any::<u8>(), 0..300)) {
            let f = Frame { op, response, correlation_id: corr, source: src, dest: dst, payload };
            let bytes = f.encode();
            prop_assert_eq!(bytes.len(), f.encoded_len());
            prop_assert_eq!(Frame::decode(&bytes).unwrap(), f);
        }
    }
}
