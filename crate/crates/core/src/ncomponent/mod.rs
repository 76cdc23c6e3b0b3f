//! The network board. Its Proxy keeps one skeleton socket per stub, each
//! backed by a native socket of the board's network stack, and moves payload
//! between the mComponent, the pComponent and the wire.
//!
//! Two data paths exist. In DMA mode the stub only tells the skeleton where
//! the payload sits in disaggregated memory and the dDMA engine fetches or
//! stores it with `M_READ`/`M_WRITE`. In DDIO mode the bytes travel inline
//! between the pComponent and the board and never touch an mComponent.

mod proxy;

use std::collections::BTreeMap;
use std::net::{Ipv4Addr, SocketAddrV4};

pub use proxy::{DramQueue, ProxyState, SkelState, SkeletonSocket};
use proxy::{ParkedRecv, PendingConnect, RecvTarget, ReplyTo};

use crate::error::{Error, Result};
use crate::gnm::{nic_records, NicDescriptor};
use crate::interconnect::{ComponentId, Frame, Kind, Op};
use crate::net::{NetEvent, NetStack, Owner, SockId};
use crate::sched::{CorrIds, Outbox};
use crate::topology::{CostModel, NcSpec};
use crate::wire::{self, Msg, SocketMeta, Writer};

/// Transfers between disaggregated memory and skeleton sockets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DdmaEngine {
    pub fetches: u64,
    pub fetch_bytes: u64,
    pub stores: u64,
    pub store_bytes: u64,
}

/// Transfers that bypass memory and go straight to the pComponent cache.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DdioEngine {
    pub inline_sends: u64,
    pub inline_bytes: u64,
    pub direct_recvs: u64,
    pub direct_bytes: u64,
}

#[derive(Debug)]
enum Pending {
    Register,
    /// dDMA fetch of a send payload.
    Fetch {
        skel: u32,
        reply: ReplyTo,
    },
    /// dDMA store of received bytes.
    Store {
        reply: ReplyTo,
        len: usize,
    },
}

pub struct NComponent {
    pub id: ComponentId,
    spec: NcSpec,
    cost: CostModel,
    pub proxy: ProxyState,
    natives: BTreeMap<SockId, u32>,
    pending: BTreeMap<u64, Pending>,
    corr: CorrIds,
    pub ddma: DdmaEngine,
    pub ddio: DdioEngine,
    registered: Option<Result<()>>,
    failed: bool,
}

impl NComponent {
    pub fn new(id: ComponentId, spec: NcSpec, cost: CostModel) -> Self {
        let nics = spec
            .nics
            .iter()
            .map(|n| NicDescriptor {
                ncomponent: id,
                nic_name: n.name.clone(),
                ip: n.ip,
                link_capacity_bps: n.link_capacity_bps,
            })
            .collect();
        let proxy = ProxyState::new(
            nics,
            spec.max_skeletons,
            spec.socket_budget_bytes,
            spec.dram_bytes,
        );
        NComponent {
            id,
            spec,
            cost,
            proxy,
            natives: BTreeMap::new(),
            pending: BTreeMap::new(),
            corr: CorrIds::default(),
            ddma: DdmaEngine::default(),
            ddio: DdioEngine::default(),
            registered: None,
            failed: false,
        }
    }

    fn owner(&self) -> Owner {
        Owner::Nc(self.id.index)
    }

    pub fn primary_ip(&self) -> Ipv4Addr {
        self.spec.nics[0].ip
    }

    pub fn owns_ip(&self, ip: Ipv4Addr) -> bool {
        self.spec.nics.iter().any(|n| n.ip == ip)
    }

    /// Outcome of the GNM registration, once answered.
    pub fn registration(&self) -> Option<&Result<()>> {
        self.registered.as_ref()
    }

    pub fn is_failed(&self) -> bool {
        self.failed
    }

    /// Announces the board's NICs to the GNM.
    pub(crate) fn start(&mut self, out: &mut Outbox<()>) {
        let corr = self.corr.next();
        self.pending.insert(corr, Pending::Register);
        let msg = Msg::RegisterNc {
            nc: self.id,
            nics: nic_records(&self.spec.nics),
        };
        out.send(msg.into_frame(corr, self.id, ComponentId::GNM));
    }

    /// Crash: every native socket goes away and nothing is answered again.
    pub(crate) fn fail(&mut self, net: &mut dyn NetStack) {
        self.failed = true;
        for &sock in self.natives.keys() {
            net.close(sock);
        }
        self.natives.clear();
        self.pending.clear();
    }

    pub(crate) fn on_frame(&mut self, f: Frame, out: &mut Outbox<()>, net: &mut dyn NetStack) {
        if self.failed {
            return;
        }
        if f.response {
            return self.on_response(f, out, net);
        }
        let reply = ReplyTo {
            op: f.op,
            corr: f.correlation_id,
            to: f.source,
        };
        let msg = match Msg::from_frame(&f) {
            Ok(m) => m,
            Err(e) => return out.send(f.reply(wire::err_body(&e))),
        };
        if let Err(e) = self.serve(msg, reply, out, net) {
            out.send(self.reply_frame(reply, wire::err_body(&e)));
        }
    }

    fn reply_frame(&self, r: ReplyTo, payload: Vec<u8>) -> Frame {
        Frame {
            op: r.op,
            response: true,
            correlation_id: r.corr,
            source: self.id,
            dest: r.to,
            payload,
        }
    }

    /// The skeleton `skel` if `pc` drives it.
    fn owned(&mut self, skel: u32, pc: ComponentId) -> Result<&mut SkeletonSocket> {
        match self.proxy.get_mut(skel) {
            Some(sk) if sk.owner.0 == pc => Ok(sk),
            _ => Err(Error::BadHandle),
        }
    }

    /// Handles one request. An `Err` is answered to the requester; `Ok`
    /// means the handler answered or parked the request itself.
    fn serve(
        &mut self,
        msg: Msg,
        reply: ReplyTo,
        out: &mut Outbox<()>,
        net: &mut dyn NetStack,
    ) -> Result<()> {
        let pc = reply.to;
        match msg {
            Msg::Ping(b) => {
                out.send(self.reply_frame(reply, wire::ok_body(Writer::default().bytes(&b))))
            }
            Msg::CreateSkel {
                stub,
                meta,
                connect_to,
            } => {
                if pc.kind != Kind::P {
                    return Err(Error::UnknownComponent(pc));
                }
                let skel = self.proxy.proxy_create_skeleton(meta, (pc, stub))?;
                let sock = net.socket(self.owner());
                self.natives.insert(sock, skel);
                self.proxy.get_mut(skel).expect("just created").native = Some(sock);
                match connect_to {
                    None => {
                        let body = Writer::default().u32(skel).u8(0);
                        out.send_after(
                            self.reply_frame(reply, wire::ok_body(body)),
                            self.cost.skeleton_create,
                        );
                    }
                    Some(to) => {
                        let started = net
                            .bind(sock, SocketAddrV4::new(self.primary_ip(), 0))
                            .and_then(|_| net.connect(sock, to));
                        if let Err(e) = started {
                            self.destroy(skel, net);
                            return Err(e);
                        }
                        let sk = self.proxy.get_mut(skel).expect("just created");
                        sk.state = SkelState::Connecting;
                        sk.pending_connect = Some(PendingConnect {
                            reply,
                            created: true,
                        });
                    }
                }
            }
            Msg::SkelBind { skel, addr } => {
                if !self.owns_ip(*addr.ip()) {
                    return Err(Error::NoSuchIp(*addr.ip()));
                }
                let sk = self.owned(skel, pc)?;
                if sk.state != SkelState::Created {
                    return Err(Error::InvalidState {
                        op: "bind",
                        state: state_name(sk.state),
                    });
                }
                let sock = sk.native.ok_or(Error::NotBound)?;
                let bound = net.bind(sock, addr)?;
                self.proxy.record_binding(skel, bound)?;
                out.send(self.reply_frame(reply, wire::ok_body(Writer::default().addr(bound))));
            }
            Msg::SkelListen { skel, backlog } => {
                let sk = self.owned(skel, pc)?;
                if sk.state != SkelState::Bound {
                    return Err(Error::InvalidState {
                        op: "listen",
                        state: state_name(sk.state),
                    });
                }
                net.listen(sk.native.ok_or(Error::NotBound)?, backlog)?;
                sk.state = SkelState::Listening;
                out.send(self.reply_frame(reply, wire::ok_empty()));
            }
            Msg::SkelConnect { skel, addr } => {
                let sk = self.owned(skel, pc)?;
                if sk.state != SkelState::Bound {
                    return Err(Error::InvalidState {
                        op: "connect",
                        state: state_name(sk.state),
                    });
                }
                net.connect(sk.native.ok_or(Error::NotBound)?, addr)?;
                sk.state = SkelState::Connecting;
                sk.pending_connect = Some(PendingConnect {
                    reply,
                    created: false,
                });
            }
            Msg::SendNotify { skel, region, len } => {
                let sk = self.owned(skel, pc)?;
                if sk.state != SkelState::Connected {
                    return Err(Error::NotConnected);
                }
                if len > region.length {
                    return Err(Error::OutOfBounds);
                }
                let corr = self.corr.next();
                self.pending.insert(corr, Pending::Fetch { skel, reply });
                let read = Msg::MRead {
                    address: region.address,
                    offset: 0,
                    len,
                };
                out.send(read.into_frame(corr, self.id, region.owner));
            }
            Msg::SendInline { skel, data } => {
                let sk = self.owned(skel, pc)?;
                if sk.state != SkelState::Connected {
                    return Err(Error::NotConnected);
                }
                let sent = net.send(sk.native.ok_or(Error::NotConnected)?, &data)?;
                self.ddio.inline_sends += 1;
                self.ddio.inline_bytes += sent as u64;
                out.send(
                    self.reply_frame(reply, wire::ok_body(Writer::default().u64(sent as u64))),
                );
            }
            Msg::RecvReq { skel, region, max } => {
                let max = max.min(region.length) as usize;
                self.park_recv(
                    skel,
                    pc,
                    ParkedRecv {
                        reply,
                        target: RecvTarget::Region(region),
                        max,
                    },
                )?;
                self.serve_recv(skel, out, net);
            }
            Msg::RecvReqDirect { skel, max } => {
                self.park_recv(
                    skel,
                    pc,
                    ParkedRecv {
                        reply,
                        target: RecvTarget::Direct,
                        max: max as usize,
                    },
                )?;
                self.serve_recv(skel, out, net);
            }
            Msg::Close { skel } => {
                self.owned(skel, pc)?;
                self.destroy_with_interrupts(skel, out, net);
                out.send(self.reply_frame(reply, wire::ok_empty()));
            }
            Msg::ProxyResolve { addr } => {
                let target = self
                    .proxy
                    .skeletons()
                    .find(|sk| sk.bound == Some(addr) && sk.state == SkelState::Listening)
                    .map(|sk| sk.owner)
                    .ok_or(Error::ConnRefused)?;
                let body = Writer::default().comp(target.0).u32(target.1);
                out.send(self.reply_frame(reply, wire::ok_body(body)));
            }
            other => {
                return Err(Error::Protocol(format!(
                    "{} cannot serve {}",
                    self.id,
                    other.op()
                )))
            }
        }
        Ok(())
    }

    fn park_recv(&mut self, skel: u32, pc: ComponentId, p: ParkedRecv) -> Result<()> {
        let sk = self.owned(skel, pc)?;
        if sk.state != SkelState::Connected {
            return Err(Error::NotConnected);
        }
        if sk.parked_recv.is_some() {
            return Err(Error::InvalidState {
                op: "recv",
                state: "recv pending",
            });
        }
        sk.parked_recv = Some(p);
        Ok(())
    }

    fn on_response(&mut self, f: Frame, out: &mut Outbox<()>, net: &mut dyn NetStack) {
        let Some(p) = self.pending.remove(&f.correlation_id) else {
            return;
        };
        match p {
            Pending::Register => {
                self.registered = Some(wire::open_reply(&f.payload).map(|_| ()));
            }
            Pending::Fetch { skel, reply } => {
                let result = wire::open_reply(&f.payload)
                    .and_then(|mut r| r.bytes())
                    .and_then(|data| {
                        self.ddma.fetches += 1;
                        self.ddma.fetch_bytes += data.len() as u64;
                        let sk = self.proxy.get_mut(skel).ok_or(Error::NotConnected)?;
                        net.send(sk.native.ok_or(Error::NotConnected)?, &data)
                    });
                let body = match result {
                    Ok(n) => wire::ok_body(Writer::default().u64(n as u64)),
                    Err(e) => wire::err_body(&e),
                };
                out.send(self.reply_frame(reply, body));
            }
            Pending::Store { reply, len } => {
                let body = match wire::open_reply(&f.payload) {
                    Ok(_) => {
                        self.ddma.stores += 1;
                        self.ddma.store_bytes += len as u64;
                        wire::ok_body(Writer::default().u64(len as u64))
                    }
                    Err(e) => wire::err_body(&e),
                };
                out.send(self.reply_frame(reply, body));
            }
        }
    }

    pub(crate) fn on_net(&mut self, ev: NetEvent, out: &mut Outbox<()>, net: &mut dyn NetStack) {
        if self.failed {
            return;
        }
        match ev {
            NetEvent::Acceptable { listener } => self.accept_all(listener, out, net),
            NetEvent::Connected { sock } => {
                let Some(&skel) = self.natives.get(&sock) else {
                    return;
                };
                let local = net.local_addr(sock);
                let Some(sk) = self.proxy.get_mut(skel) else {
                    return;
                };
                let Some(pc) = sk.pending_connect.take() else {
                    return;
                };
                sk.state = SkelState::Connected;
                sk.meta.local = local;
                let local = local.unwrap_or(SocketAddrV4::new(Ipv4Addr::UNSPECIFIED, 0));
                if pc.created {
                    let body = Writer::default().u32(skel).u8(1).addr(local);
                    out.send_after(
                        self.reply_frame(pc.reply, wire::ok_body(body)),
                        self.cost.skeleton_create,
                    );
                } else {
                    out.send(
                        self.reply_frame(pc.reply, wire::ok_body(Writer::default().addr(local))),
                    );
                }
                self.pump(skel, net);
            }
            NetEvent::ConnectFailed { sock, error } => {
                let Some(&skel) = self.natives.get(&sock) else {
                    return;
                };
                let Some(sk) = self.proxy.get_mut(skel) else {
                    return;
                };
                let Some(pc) = sk.pending_connect.take() else {
                    return;
                };
                out.send(self.reply_frame(pc.reply, wire::err_body(&Error::from(error))));
                if pc.created {
                    self.destroy(skel, net);
                } else if let Some(sk) = self.proxy.get_mut(skel) {
                    // A failed connect leaves a bound socket unusable, as with
                    // a host stack; the stub has to close it.
                    sk.state = SkelState::Bound;
                }
            }
            NetEvent::Readable { sock } => {
                if let Some(&skel) = self.natives.get(&sock) {
                    self.pump(skel, net);
                    self.serve_recv(skel, out, net);
                }
            }
            NetEvent::PeerClosed { sock } => {
                if let Some(&skel) = self.natives.get(&sock) {
                    if let Some(sk) = self.proxy.get_mut(skel) {
                        sk.peer_eof = true;
                    }
                    self.pump(skel, net);
                    self.serve_recv(skel, out, net);
                }
            }
            NetEvent::Timer { .. } => {}
        }
    }

    fn accept_all(&mut self, listener: SockId, out: &mut Outbox<()>, net: &mut dyn NetStack) {
        let Some(&lskel) = self.natives.get(&listener) else {
            return;
        };
        let Some(lsk) = self.proxy.get(lskel) else {
            return;
        };
        let (pc, listener_stub) = lsk.owner;
        let meta = SocketMeta {
            local: lsk.bound,
            ..lsk.meta
        };
        while let Ok(Some((sock, peer))) = net.accept(listener) {
            let skel = match self.proxy.proxy_create_skeleton(meta, (pc, listener_stub)) {
                Ok(s) => s,
                Err(_) => {
                    net.close(sock);
                    continue;
                }
            };
            let sk = self.proxy.get_mut(skel).expect("just created");
            sk.native = Some(sock);
            sk.state = SkelState::Connected;
            self.natives.insert(sock, skel);
            let evt = Msg::SkelAcceptEvt {
                listener_stub,
                skel,
                peer,
            };
            out.send_after(
                evt.into_frame(self.corr.next(), self.id, pc),
                self.cost.skeleton_create,
            );
            self.pump(skel, net);
        }
    }

    /// Moves bytes from the native socket into the skeleton's DRAM buffer.
    fn pump(&mut self, skel: u32, net: &mut dyn NetStack) {
        let Some(sk) = self.proxy.get_mut(skel) else {
            return;
        };
        let Some(sock) = sk.native else { return };
        let n = net.readable_bytes(sock).min(sk.dram_rx.free());
        if n > 0 {
            if let Ok(data) = net.recv(sock, n) {
                sk.dram_rx.push(data).expect("bounded by free space");
            }
        }
        if net.peer_closed(sock) {
            sk.peer_eof = true;
        }
    }

    /// Answers the parked receive of `skel` if bytes or EOF are available.
    fn serve_recv(&mut self, skel: u32, out: &mut Outbox<()>, net: &mut dyn NetStack) {
        let Some(sk) = self.proxy.get_mut(skel) else {
            return;
        };
        let Some(p) = sk.parked_recv else { return };
        let drained = sk.peer_eof && sk.native.is_none_or(|s| net.readable_bytes(s) == 0);
        if sk.dram_rx.is_empty() && !drained {
            return;
        }
        sk.parked_recv = None;
        let data = sk.dram_rx.pop(p.max);
        self.pump(skel, net);
        match p.target {
            RecvTarget::Direct => {
                self.ddio.direct_recvs += 1;
                self.ddio.direct_bytes += data.len() as u64;
                out.send(self.reply_frame(p.reply, wire::ok_body(Writer::default().bytes(&data))));
            }
            RecvTarget::Region(_) if data.is_empty() => {
                out.send(self.reply_frame(p.reply, wire::ok_body(Writer::default().u64(0))));
            }
            RecvTarget::Region(region) => {
                let corr = self.corr.next();
                self.pending.insert(
                    corr,
                    Pending::Store {
                        reply: p.reply,
                        len: data.len(),
                    },
                );
                let write = Msg::MWrite {
                    address: region.address,
                    offset: 0,
                    data,
                };
                out.send(write.into_frame(corr, self.id, region.owner));
            }
        }
    }

    fn destroy_with_interrupts(&mut self, skel: u32, out: &mut Outbox<()>, net: &mut dyn NetStack) {
        if let Some(sk) = self.proxy.get_mut(skel) {
            let parked = sk.parked_recv.take().map(|p| p.reply);
            let connect = sk.pending_connect.take().map(|p| p.reply);
            for r in parked.into_iter().chain(connect) {
                out.send(self.reply_frame(r, wire::err_body(&Error::Interrupted)));
            }
        }
        self.destroy(skel, net);
    }

    fn destroy(&mut self, skel: u32, net: &mut dyn NetStack) {
        if let Some(sk) = self.proxy.destroy(skel) {
            if let Some(sock) = sk.native {
                self.natives.remove(&sock);
                net.close(sock);
            }
        }
    }

    /// Regions named by in-flight dDMA transfers, for diagnostics.
    pub fn inflight_transfers(&self) -> usize {
        self.pending
            .values()
            .filter(|p| !matches!(p, Pending::Register))
            .count()
    }

    pub fn skeleton(&self, skel: u32) -> Option<&SkeletonSocket> {
        self.proxy.get(skel)
    }

    pub fn skeleton_count(&self) -> usize {
        self.proxy.skeleton_count()
    }

    /// Native sockets this board has open.
    pub fn native_count(&self) -> usize {
        self.natives.len()
    }

    /// Whether a frame with this op is one the Proxy serves.
    pub fn serves(op: Op) -> bool {
        matches!(
            op,
            Op::PING
                | Op::CREATE_SKEL
                | Op::SKEL_BIND
                | Op::SKEL_LISTEN
                | Op::SKEL_CONNECT
                | Op::SEND_NOTIFY
                | Op::SEND_INLINE
                | Op::RECV_REQ
                | Op::RECV_REQ_DIRECT
                | Op::CLOSE
                | Op::PROXY_RESOLVE
        )
    }
}

fn state_name(s: SkelState) -> &'static str {
    match s {
        SkelState::Created => "created",
        SkelState::Bound => "bound",
        SkelState::Listening => "listening",
        SkelState::Connecting => "connecting",
        SkelState::Connected => "connected",
    }
}
