//! Payload encodings for every op carried between rack components.
//!
//! Integers are little-endian, byte strings are `u32` length-prefixed, and
//! optional values use a one-byte tag. Responses start with a status byte
//! (zero for success) followed by an op-specific body.

use std::net::{Ipv4Addr, SocketAddrV4};

use crate::error::{Error, Result};
use crate::interconnect::{ComponentId, Frame, Op};
use crate::mcomponent::MemRegion;

#[derive(Default)]
pub(crate) struct Writer(Vec<u8>);

impl Writer {
    pub(crate) fn u8(mut self, v: u8) -> Self {
        self.0.push(v);
        self
    }
    pub(crate) fn u16(mut self, v: u16) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub(crate) fn u32(mut self, v: u32) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub(crate) fn u64(mut self, v: u64) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub(crate) fn ip(mut self, ip: Ipv4Addr) -> Self {
        self.0.extend_from_slice(&ip.octets());
        self
    }
    pub(crate) fn addr(self, a: SocketAddrV4) -> Self {
        self.ip(*a.ip()).u16(a.port())
    }
    pub(crate) fn comp(self, c: ComponentId) -> Self {
        self.u16(c.to_wire())
    }
    pub(crate) fn region(self, r: &MemRegion) -> Self {
        self.comp(r.owner).u64(r.address).u64(r.length)
    }
    pub(crate) fn bytes(mut self, b: &[u8]) -> Self {
        self.0.extend_from_slice(&(b.len() as u32).to_le_bytes());
        self.0.extend_from_slice(b);
        self
    }
    pub(crate) fn str(self, s: &str) -> Self {
        self.bytes(s.as_bytes())
    }
    pub(crate) fn finish(self) -> Vec<u8> {
        self.0
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Protocol("truncated payload".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub(crate) fn ip(&mut self) -> Result<Ipv4Addr> {
        let o = self.take(4)?;
        Ok(Ipv4Addr::new(o[0], o[1], o[2], o[3]))
    }
    pub(crate) fn addr(&mut self) -> Result<SocketAddrV4> {
        let ip = self.ip()?;
        Ok(SocketAddrV4::new(ip, self.u16()?))
    }
    pub(crate) fn comp(&mut self) -> Result<ComponentId> {
        ComponentId::from_wire(self.u16()?)
    }
    pub(crate) fn region(&mut self) -> Result<MemRegion> {
        Ok(MemRegion {
            owner: self.comp()?,
            address: self.u64()?,
            length: self.u64()?,
        })
    }
    pub(crate) fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }
    pub(crate) fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?).map_err(|_| Error::Protocol("invalid utf-8".into()))
    }
    pub(crate) fn end(&self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(Error::Protocol(format!(
                "{} trailing bytes",
                self.buf.len()
            )))
        }
    }
}

/// Socket description handed to the Proxy when a skeleton is created.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SocketMeta {
    pub sock_type: u8,
    pub protocol: u8,
    pub local: Option<SocketAddrV4>,
}

impl SocketMeta {
    pub const SOCK_STREAM: u8 = 1;
    pub const IPPROTO_TCP: u8 = 6;

    pub fn tcp(local: Option<SocketAddrV4>) -> SocketMeta {
        SocketMeta {
            sock_type: Self::SOCK_STREAM,
            protocol: Self::IPPROTO_TCP,
            local,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NicRecord {
    pub name: String,
    pub ip: Ipv4Addr,
    pub link_capacity_bps: u64,
}

/// Request and push messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Msg {
    Ping(Vec<u8>),

    RegisterNc {
        nc: ComponentId,
        nics: Vec<NicRecord>,
    },
    LookupIp {
        ip: Ipv4Addr,
    },
    IsLocal {
        ip: Ipv4Addr,
    },
    DeregisterNc {
        nc: ComponentId,
    },
    AllocNic,
    NicRelease {
        nc: ComponentId,
    },
    GnmSync {
        generation: u64,
        entries: Vec<(Ipv4Addr, ComponentId)>,
    },

    MAlloc {
        len: u64,
    },
    MWrite {
        address: u64,
        offset: u64,
        data: Vec<u8>,
    },
    MRead {
        address: u64,
        offset: u64,
        len: u64,
    },
    MFree {
        address: u64,
    },

    CreateSkel {
        stub: u32,
        meta: SocketMeta,
        connect_to: Option<SocketAddrV4>,
    },
    SkelBind {
        skel: u32,
        addr: SocketAddrV4,
    },
    SkelListen {
        skel: u32,
        backlog: u32,
    },
    SkelAcceptEvt {
        listener_stub: u32,
        skel: u32,
        peer: SocketAddrV4,
    },
    SkelConnect {
        skel: u32,
        addr: SocketAddrV4,
    },
    SendNotify {
        skel: u32,
        region: MemRegion,
        len: u64,
    },
    SendInline {
        skel: u32,
        data: Vec<u8>,
    },
    RecvReq {
        skel: u32,
        region: MemRegion,
        max: u64,
    },
    RecvReqDirect {
        skel: u32,
        max: u64,
    },
    Close {
        skel: u32,
    },
    ProxyResolve {
        addr: SocketAddrV4,
    },

    FitConnect {
        listener: u32,
        connector: u32,
    },
    FitData {
        dest: u32,
        data: Vec<u8>,
    },
    FitCredit {
        dest: u32,
        bytes: u64,
    },
    FitClose {
        dest: u32,
    },
}

impl Msg {
    pub fn op(&self) -> Op {
        match self {
            Msg::Ping(_) => Op::PING,
            Msg::RegisterNc { .. } => Op::REGISTER_NC,
            Msg::LookupIp { .. } => Op::LOOKUP_IP,
            Msg::IsLocal { .. } => Op::IS_LOCAL,
            Msg::DeregisterNc { .. } => Op::DEREGISTER_NC,
            Msg::AllocNic => Op::ALLOC_NIC,
            Msg::NicRelease { .. } => Op::NIC_RELEASE,
            Msg::GnmSync { .. } => Op::GNM_SYNC,
            Msg::MAlloc { .. } => Op::M_ALLOC,
            Msg::MWrite { .. } => Op::M_WRITE,
            Msg::MRead { .. } => Op::M_READ,
            Msg::MFree { .. } => Op::M_FREE,
            Msg::CreateSkel { .. } => Op::CREATE_SKEL,
            Msg::SkelBind { .. } => Op::SKEL_BIND,
            Msg::SkelListen { .. } => Op::SKEL_LISTEN,
            Msg::SkelAcceptEvt { .. } => Op::SKEL_ACCEPT_EVT,
            Msg::SkelConnect { .. } => Op::SKEL_CONNECT,
            Msg::SendNotify { .. } => Op::SEND_NOTIFY,
            Msg::SendInline { .. } => Op::SEND_INLINE,
            Msg::RecvReq { .. } => Op::RECV_REQ,
            Msg::RecvReqDirect { .. } => Op::RECV_REQ_DIRECT,
            Msg::Close { .. } => Op::CLOSE,
            Msg::ProxyResolve { .. } => Op::PROXY_RESOLVE,
            Msg::FitConnect { .. } => Op::FIT_CONNECT,
            Msg::FitData { .. } => Op::FIT_DATA,
            Msg::FitCredit { .. } => Op::FIT_CREDIT,
            Msg::FitClose { .. } => Op::FIT_CLOSE,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let w = Writer::default();
        match self {
            Msg::Ping(b) => w.bytes(b),
            Msg::RegisterNc { nc, nics } => {
                let mut w = w.comp(*nc).u16(nics.len() as u16);
                for n in nics {
                    w = w.str(&n.name).ip(n.ip).u64(n.link_capacity_bps);
                }
                w
            }
            Msg::LookupIp { ip } | Msg::IsLocal { ip } => w.ip(*ip),
            Msg::DeregisterNc { nc } | Msg::NicRelease { nc } => w.comp(*nc),
            Msg::AllocNic => w,
            Msg::GnmSync {
                generation,
                entries,
            } => {
                let mut w = w.u64(*generation).u32(entries.len() as u32);
                for (ip, nc) in entries {
                    w = w.ip(*ip).comp(*nc);
                }
                w
            }
            Msg::MAlloc { len } => w.u64(*len),
            Msg::MWrite {
                address,
                offset,
                data,
            } => w.u64(*address).u64(*offset).bytes(data),
            Msg::MRead {
                address,
                offset,
                len,
            } => w.u64(*address).u64(*offset).u64(*len),
            Msg::MFree { address } => w.u64(*address),
            Msg::CreateSkel {
                stub,
                meta,
                connect_to,
            } => {
                let w = w.u32(*stub).u8(meta.sock_type).u8(meta.protocol);
                let w = match meta.local {
                    Some(a) => w.u8(1).addr(a),
                    None => w.u8(0),
                };
                match connect_to {
                    Some(a) => w.u8(1).addr(*a),
                    None => w.u8(0),
                }
            }
            Msg::SkelBind { skel, addr } | Msg::SkelConnect { skel, addr } => {
                w.u32(*skel).addr(*addr)
            }
            Msg::SkelListen { skel, backlog } => w.u32(*skel).u32(*backlog),
            Msg::SkelAcceptEvt {
                listener_stub,
                skel,
                peer,
            } => w.u32(*listener_stub).u32(*skel).addr(*peer),
            Msg::SendNotify { skel, region, len } => w.u32(*skel).region(region).u64(*len),
            Msg::SendInline { skel, data } => w.u32(*skel).bytes(data),
            Msg::RecvReq { skel, region, max } => w.u32(*skel).region(region).u64(*max),
            Msg::RecvReqDirect { skel, max } => w.u32(*skel).u64(*max),
            Msg::Close { skel } => w.u32(*skel),
            Msg::ProxyResolve { addr } => w.addr(*addr),
            Msg::FitConnect {
                listener,
                connector,
            } => w.u32(*listener).u32(*connector),
            Msg::FitData { dest, data } => w.u32(*dest).bytes(data),
            Msg::FitCredit { dest, bytes } => w.u32(*dest).u64(*bytes),
            Msg::FitClose { dest } => w.u32(*dest),
        }
        .finish()
    }

    pub fn decode(op: Op, payload: &[u8]) -> Result<Msg> {
        let mut r = Reader::new(payload);
        let opt_addr = |r: &mut Reader| -> Result<Option<SocketAddrV4>> {
            Ok(match r.u8()? {
                0 => None,
                _ => Some(r.addr()?),
            })
        };
        let msg = match op {
            Op::PING => Msg::Ping(r.bytes()?),
            Op::REGISTER_NC => {
                let nc = r.comp()?;
                let n = r.u16()?;
                let mut nics = Vec::with_capacity(n as usize);
                for _ in 0..n {
                    nics.push(NicRecord {
                        name: r.string()?,
                        ip: r.ip()?,
                        link_capacity_bps: r.u64()?,
                    });
                }
                Msg::RegisterNc { nc, nics }
            }
            Op::LOOKUP_IP => Msg::LookupIp { ip: r.ip()? },
            Op::IS_LOCAL => Msg::IsLocal { ip: r.ip()? },
            Op::DEREGISTER_NC => Msg::DeregisterNc { nc: r.comp()? },
            Op::ALLOC_NIC => Msg::AllocNic,
            Op::NIC_RELEASE => Msg::NicRelease { nc: r.comp()? },
            Op::GNM_SYNC => {
                let generation = r.u64()?;
                let n = r.u32()?;
                let mut entries = Vec::with_capacity(n as usize);
                for _ in 0..n {
                    entries.push((r.ip()?, r.comp()?));
                }
                Msg::GnmSync {
                    generation,
                    entries,
                }
            }
            Op::M_ALLOC => Msg::MAlloc { len: r.u64()? },
            Op::M_WRITE => Msg::MWrite {
                address: r.u64()?,
                offset: r.u64()?,
                data: r.bytes()?,
            },
            Op::M_READ => Msg::MRead {
                address: r.u64()?,
                offset: r.u64()?,
                len: r.u64()?,
            },
            Op::M_FREE => Msg::MFree { address: r.u64()? },
            Op::CREATE_SKEL => {
                let stub = r.u32()?;
                let sock_type = r.u8()?;
                let protocol = r.u8()?;
                let local = opt_addr(&mut r)?;
                let connect_to = opt_addr(&mut r)?;
                Msg::CreateSkel {
                    stub,
                    meta: SocketMeta {
                        sock_type,
                        protocol,
                        local,
                    },
                    connect_to,
                }
            }
            Op::SKEL_BIND => Msg::SkelBind {
                skel: r.u32()?,
                addr: r.addr()?,
            },
            Op::SKEL_LISTEN => Msg::SkelListen {
                skel: r.u32()?,
                backlog: r.u32()?,
            },
            Op::SKEL_ACCEPT_EVT => Msg::SkelAcceptEvt {
                listener_stub: r.u32()?,
                skel: r.u32()?,
                peer: r.addr()?,
            },
            Op::SKEL_CONNECT => Msg::SkelConnect {
                skel: r.u32()?,
                addr: r.addr()?,
            },
            Op::SEND_NOTIFY => Msg::SendNotify {
                skel: r.u32()?,
                region: r.region()?,
                len: r.u64()?,
            },
            Op::SEND_INLINE => Msg::SendInline {
                skel: r.u32()?,
                data: r.bytes()?,
            },
            Op::RECV_REQ => Msg::RecvReq {
                skel: r.u32()?,
                region: r.region()?,
                max: r.u64()?,
            },
            Op::RECV_REQ_DIRECT => Msg::RecvReqDirect {
                skel: r.u32()?,
                max: r.u64()?,
            },
            Op::CLOSE => Msg::Close { skel: r.u32()? },
            Op::PROXY_RESOLVE => Msg::ProxyResolve { addr: r.addr()? },
            Op::FIT_CONNECT => Msg::FitConnect {
                listener: r.u32()?,
                connector: r.u32()?,
            },
            Op::FIT_DATA => Msg::FitData {
                dest: r.u32()?,
                data: r.bytes()?,
            },
            Op::FIT_CREDIT => Msg::FitCredit {
                dest: r.u32()?,
                bytes: r.u64()?,
            },
            Op::FIT_CLOSE => Msg::FitClose { dest: r.u32()? },
        };
        r.end()?;
        Ok(msg)
    }

    pub fn into_frame(self, corr: u64, source: ComponentId, dest: ComponentId) -> Frame {
        Frame::request(self.op(), corr, source, dest, self.encode())
    }

    pub fn from_frame(f: &Frame) -> Result<Msg> {
        Msg::decode(f.op, &f.payload)
    }
}

/// Response payload: status byte plus a body whose shape depends on the op.
pub(crate) fn ok_body(body: Writer) -> Vec<u8> {
    let mut out = vec![0u8];
    out.extend(body.finish());
    out
}

pub(crate) fn ok_empty() -> Vec<u8> {
    vec![0u8]
}

pub(crate) fn err_body(e: &Error) -> Vec<u8> {
    let w = Writer::default().u8(e.wire_code());
    match e {
        Error::DuplicateIp(ip) | Error::NoSuchIp(ip) => w.ip(*ip).finish(),
        _ => w.finish(),
    }
}

/// Splits a response payload into its body or the error it carries.
pub(crate) fn open_reply(payload: &[u8]) -> Result<Reader<'_>> {
    let mut r = Reader::new(payload);
    match r.u8()? {
        0 => Ok(r),
        4 => Err(Error::DuplicateIp(r.ip()?)),
        5 => Err(Error::NoSuchIp(r.ip()?)),
        code => Err(Error::from_wire_code(code)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn addr() -> impl Strategy<Value = SocketAddrV4> {
        (any::<u32>(), any::<u16>())
            .prop_map(|(ip, port)| SocketAddrV4::new(Ipv4Addr::from(ip), port))
    }

    fn region() -> impl Strategy<Value = MemRegion> {
        (0u16..16, any::<u64>(), any::<u64>()).prop_map(|(i, a, l)| MemRegion {
            owner: ComponentId::m(i),
            address: a,
            length: l,
        })
    }

    fn msg() -> impl Strategy<Value = Msg> {
        let data = || proptest::collection::vec(any::<u8>(), 0..64);
        prop_oneof![
            data().prop_map(Msg::Ping),
            (
                0u16..8,
                proptest::collection::vec(("[a-z]{1,6}", any::<u32>(), any::<u64>()), 0..4)
            )
                .prop_map(|(n, nics)| {
                    Msg::RegisterNc {
                        nc: ComponentId::n(n),
                        nics: nics
                            .into_iter()
                            .map(|(name, ip, bw)| NicRecord {
                                name,
                                ip: Ipv4Addr::from(ip),
                                link_capacity_bps: bw,
                            })
                            .collect(),
                    }
                }),
            any::<u32>().prop_map(|ip| Msg::LookupIp {
                ip: Ipv4Addr::from(ip)
            }),
            (
                any::<u64>(),
                proptest::collection::vec((any::<u32>(), 0u16..8), 0..5)
            )
                .prop_map(|(g, e)| Msg::GnmSync {
                    generation: g,
                    entries: e
                        .into_iter()
                        .map(|(ip, n)| (Ipv4Addr::from(ip), ComponentId::n(n)))
                        .collect()
                }),
            (any::<u64>(), any::<u64>(), data()).prop_map(|(a, o, d)| Msg::MWrite {
                address: a,
                offset: o,
                data: d
            }),
            (
                any::<u32>(),
                proptest::option::of(addr()),
                proptest::option::of(addr())
            )
                .prop_map(|(s, l, c)| Msg::CreateSkel {
                    stub: s,
                    meta: SocketMeta::tcp(l),
                    connect_to: c
                }),
            (any::<u32>(), region(), any::<u64>()).prop_map(|(s, r, l)| Msg::SendNotify {
                skel: s,
                region: r,
                len: l
            }),
            (any::<u32>(), region(), any::<u64>()).prop_map(|(s, r, m)| Msg::RecvReq {
                skel: s,
                region: r,
                max: m
            }),
            (any::<u32>(), data()).prop_map(|(s, d)| Msg::SendInline { skel: s, data: d }),
            (any::<u32>(), any::<u32>(), addr()).prop_map(|(l, s, p)| Msg::SkelAcceptEvt {
                listener_stub: l,
                skel: s,
                peer: p
            }),
            addr().prop_map(|a| Msg::ProxyResolve { addr: a }),
            (any::<u32>(), data()).prop_map(|(d, b)| Msg::FitData { dest: d, data: b }),
        ]
    }

    proptest! {
        #[test]
        fn messages_roundtrip_through_frames(m in msg(), corr: u64) {
            let f = m.clone().into_frame(corr, ComponentId::p(0), ComponentId::n(0));
            let back = Frame::decode(&f.encode()).unwrap();
            prop_assert_eq!(Msg::from_frame(&back).unwrap(), m);
        }
    }

    #[test]
    fn error_replies_keep_the_address() {
        let body = err_body(&Error::DuplicateIp(Ipv4Addr::new(10, 0, 0, 1)));
        assert!(
            matches!(open_reply(&body), Err(Error::DuplicateIp(ip)) if ip == Ipv4Addr::new(10, 0, 0, 1))
        );
        assert!(matches!(
            open_reply(&err_body(&Error::AddrInUse)),
            Err(Error::AddrInUse)
        ));
        assert!(open_reply(&ok_empty()).unwrap().end().is_ok());
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut payload = Msg::Close { skel: 3 }.encode();
        payload.push(0);
        assert!(Msg::decode(Op::CLOSE, &payload).is_err());
    }
}
