use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::net::{Ipv4Addr, SocketAddrV4};

use super::{ConnectError, NetEvent, NetStack, Owner, SockId};
use crate::error::{Error, Result};
use crate::time::{serialization_delay, SimTime};
use crate::topology::ExternalNet;

const EPHEMERAL_BASE: u16 = 49_152;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Fresh,
    Bound,
    Listening,
    Connecting,
    Connected,
}

#[derive(Debug)]
struct Sock {
    owner: Owner,
    state: State,
    local: Option<SocketAddrV4>,
    peer: Option<SocketAddrV4>,
    peer_sock: Option<SockId>,
    rx: VecDeque<u8>,
    fin: bool,
    accept_q: VecDeque<SockId>,
    backlog: usize,
    /// End of the sender's protocol-stack work.
    cpu_until: SimTime,
    /// End of serialization on the outgoing direction.
    busy_until: SimTime,
}

impl Sock {
    fn new(owner: Owner) -> Sock {
        Sock {
            owner,
            state: State::Fresh,
            local: None,
            peer: None,
            peer_sock: None,
            rx: VecDeque::new(),
            fin: false,
            accept_q: VecDeque::new(),
            backlog: 0,
            cpu_until: SimTime::ZERO,
            busy_until: SimTime::ZERO,
        }
    }
}

#[derive(Debug)]
enum Wire {
    Syn {
        client: SockId,
        to: SocketAddrV4,
    },
    SynAck {
        client: SockId,
        server: Option<SockId>,
    },
    Data {
        to: SockId,
        bytes: Vec<u8>,
    },
    Fin {
        to: SockId,
    },
    Timer {
        owner: Owner,
        token: u64,
    },
}

/// Deterministic virtual TCP: every host sits on one switch with the
/// configured one-way latency and bandwidth; sockets on the same host use
/// the loopback latency and no serialization.
pub struct SimNet {
    params: ExternalNet,
    now: SimTime,
    hosts: BTreeMap<Ipv4Addr, u16>,
    silent: BTreeSet<Ipv4Addr>,
    socks: BTreeMap<SockId, Sock>,
    bound: BTreeMap<SocketAddrV4, SockId>,
    next_sock: SockId,
    queue: BinaryHeap<Reverse<(SimTime, u64, usize)>>,
    slots: BTreeMap<usize, Wire>,
    seq: u64,
    ready: VecDeque<(Owner, NetEvent)>,
    /// Connect timeouts, kept apart so a completed connect can cancel its own.
    deadlines: BTreeMap<(SimTime, u64), SockId>,
}

impl SimNet {
    pub fn new(params: ExternalNet) -> SimNet {
        SimNet {
            params,
            now: SimTime::ZERO,
            hosts: BTreeMap::new(),
            silent: BTreeSet::new(),
            socks: BTreeMap::new(),
            bound: BTreeMap::new(),
            next_sock: 1,
            queue: BinaryHeap::new(),
            slots: BTreeMap::new(),
            seq: 0,
            ready: VecDeque::new(),
            deadlines: BTreeMap::new(),
        }
    }

    /// A host that swallows connection attempts, so connects time out.
    pub fn add_silent_host(&mut self, ip: Ipv4Addr) {
        self.add_host(ip);
        self.silent.insert(ip);
    }

    fn latency(&self, a: Ipv4Addr, b: Ipv4Addr) -> SimTime {
        if a == b {
            self.params.loopback_latency
        } else {
            self.params.one_way_latency
        }
    }

    fn schedule(&mut self, at: SimTime, w: Wire) {
        self.seq += 1;
        let slot = self.seq as usize;
        self.slots.insert(slot, w);
        self.queue.push(Reverse((at, self.seq, slot)));
    }

    fn sock(&self, s: SockId) -> Result<&Sock> {
        self.socks.get(&s).ok_or(Error::BadHandle)
    }

    fn sock_mut(&mut self, s: SockId) -> Result<&mut Sock> {
        self.socks.get_mut(&s).ok_or(Error::BadHandle)
    }

    fn notify(&mut self, s: SockId, ev: NetEvent) {
        if let Some(sock) = self.socks.get(&s) {
            self.ready.push_back((sock.owner, ev));
        }
    }

    fn ephemeral(&mut self, ip: Ipv4Addr) -> Result<u16> {
        let next = self.hosts.get_mut(&ip).ok_or(Error::NoRoute)?;
        for _ in 0..(u16::MAX - EPHEMERAL_BASE) {
            let port = *next;
            *next = if *next == u16::MAX {
                EPHEMERAL_BASE
            } else {
                *next + 1
            };
            if !self.bound.contains_key(&SocketAddrV4::new(ip, port)) {
                return Ok(port);
            }
        }
        Err(Error::ResourceExhausted)
    }

    /// Sends with per-socket stack cost and serialization, FIFO per direction.
    fn transmit(&mut self, s: SockId, w: Wire, len: usize) -> Result<()> {
        let (stack, bw) = (self.params.stack_cost, self.params.bandwidth_bps);
        let now = self.now;
        let sock = self.sock(s)?;
        let (local, peer) = (
            sock.local.ok_or(Error::NotBound)?,
            sock.peer.ok_or(Error::NotConnected)?,
        );
        let lat = self.latency(*local.ip(), *peer.ip());
        let ser = if local.ip() == peer.ip() {
            SimTime::ZERO
        } else {
            serialization_delay(len, bw)
        };
        let sock = self.sock_mut(s)?;
        let cpu = now.max(sock.cpu_until) + if len > 0 { stack } else { SimTime::ZERO };
        sock.cpu_until = cpu;
        let depart = cpu.max(sock.busy_until);
        sock.busy_until = depart + ser;
        let at = sock.busy_until + lat;
        self.schedule(at, w);
        Ok(())
    }

    fn handle(&mut self, w: Wire) {
        match w {
            Wire::Syn { client, to } => self.on_syn(client, to),
            Wire::SynAck { client, server } => {
                if !self.socks.contains_key(&client) {
                    if let Some(srv) = server {
                        self.peer_gone(srv);
                    }
                    return;
                }
                self.deadlines.retain(|_, c| *c != client);
                let c = self.socks.get_mut(&client).expect("checked");
                if c.state != State::Connecting {
                    if let Some(srv) = server {
                        self.peer_gone(srv);
                    }
                    return;
                }
                match server {
                    Some(srv) => {
                        c.state = State::Connected;
                        c.peer_sock = Some(srv);
                        self.notify(client, NetEvent::Connected { sock: client });
                    }
                    None => {
                        c.state = State::Bound;
                        self.notify(
                            client,
                            NetEvent::ConnectFailed {
                                sock: client,
                                error: ConnectError::Refused,
                            },
                        );
                    }
                }
            }
            Wire::Data { to, bytes } => {
                if let Some(s) = self.socks.get_mut(&to) {
                    if s.state == State::Connected && !s.fin {
                        s.rx.extend(bytes);
                        self.notify(to, NetEvent::Readable { sock: to });
                    }
                }
            }
            Wire::Fin { to } => self.peer_gone(to),
            Wire::Timer { owner, token } => {
                self.ready.push_back((owner, NetEvent::Timer { token }))
            }
        }
    }

    fn peer_gone(&mut self, s: SockId) {
        if let Some(sock) = self.socks.get_mut(&s) {
            if sock.state == State::Connected && !sock.fin {
                sock.fin = true;
                self.notify(s, NetEvent::PeerClosed { sock: s });
            }
        }
    }

    fn on_syn(&mut self, client: SockId, to: SocketAddrV4) {
        if self.silent.contains(to.ip()) {
            return;
        }
        let Some(client_addr) = self.socks.get(&client).and_then(|c| c.local) else {
            return;
        };
        let lat = self.latency(*to.ip(), *client_addr.ip());
        let listener = self.bound.get(&to).copied().filter(|l| {
            self.socks
                .get(l)
                .is_some_and(|s| s.state == State::Listening && s.accept_q.len() < s.backlog)
        });
        let Some(l) = listener else {
            self.schedule(
                self.now + lat,
                Wire::SynAck {
                    client,
                    server: None,
                },
            );
            return;
        };
        let owner = self.socks[&l].owner;
        let id = self.next_sock;
        self.next_sock += 1;
        let mut srv = Sock::new(owner);
        srv.state = State::Connected;
        srv.local = Some(to);
        srv.peer = Some(client_addr);
        srv.peer_sock = Some(client);
        self.socks.insert(id, srv);
        let lsock = self.socks.get_mut(&l).expect("listener");
        lsock.accept_q.push_back(id);
        self.notify(l, NetEvent::Acceptable { listener: l });
        self.schedule(
            self.now + lat,
            Wire::SynAck {
                client,
                server: Some(id),
            },
        );
    }
}

impl NetStack for SimNet {
    fn now(&self) -> SimTime {
        self.now
    }

    fn add_host(&mut self, ip: Ipv4Addr) {
        self.hosts.entry(ip).or_insert(EPHEMERAL_BASE);
    }

    fn is_host(&self, ip: Ipv4Addr) -> bool {
        self.hosts.contains_key(&ip)
    }

    fn socket(&mut self, owner: Owner) -> SockId {
        let id = self.next_sock;
        self.next_sock += 1;
        self.socks.insert(id, Sock::new(owner));
        id
    }

    fn bind(&mut self, s: SockId, addr: SocketAddrV4) -> Result<SocketAddrV4> {
        if self.sock(s)?.state != State::Fresh {
            return Err(Error::InvalidState {
                op: "bind",
                state: "bound",
            });
        }
        if !self.hosts.contains_key(addr.ip()) {
            return Err(Error::NoSuchIp(*addr.ip()));
        }
        let addr = if addr.port() == 0 {
            SocketAddrV4::new(*addr.ip(), self.ephemeral(*addr.ip())?)
        } else {
            addr
        };
        if self.bound.contains_key(&addr) {
            return Err(Error::AddrInUse);
        }
        self.bound.insert(addr, s);
        let sock = self.sock_mut(s)?;
        sock.state = State::Bound;
        sock.local = Some(addr);
        Ok(addr)
    }

    fn listen(&mut self, s: SockId, backlog: u32) -> Result<()> {
        let sock = self.sock_mut(s)?;
        match sock.state {
            State::Bound | State::Listening => {
                sock.state = State::Listening;
                sock.backlog = backlog.max(1) as usize;
                Ok(())
            }
            State::Fresh => Err(Error::NotBound),
            _ => Err(Error::InvalidState {
                op: "listen",
                state: "connected",
            }),
        }
    }

    fn accept(&mut self, s: SockId) -> Result<Option<(SockId, SocketAddrV4)>> {
        let sock = self.sock_mut(s)?;
        if sock.state != State::Listening {
            return Err(Error::InvalidState {
                op: "accept",
                state: "not listening",
            });
        }
        Ok(sock.accept_q.pop_front().map(|id| {
            let peer = self.socks[&id]
                .peer
                .expect("accepted sockets know their peer");
            (id, peer)
        }))
    }

    fn connect(&mut self, s: SockId, to: SocketAddrV4) -> Result<()> {
        let now = self.now;
        let timeout = self.params.connect_timeout;
        let sock = self.sock(s)?;
        let local = match sock.state {
            State::Bound => sock.local.expect("bound"),
            State::Fresh => return Err(Error::NotBound),
            _ => {
                return Err(Error::InvalidState {
                    op: "connect",
                    state: "busy",
                })
            }
        };
        if !self.hosts.contains_key(to.ip()) {
            return Err(Error::NoRoute);
        }
        let lat = self.latency(*local.ip(), *to.ip());
        let stack = self.params.stack_cost;
        let sock = self.sock_mut(s)?;
        sock.state = State::Connecting;
        sock.peer = Some(to);
        let depart = now.max(sock.cpu_until) + stack;
        sock.cpu_until = depart;
        self.schedule(depart + lat, Wire::Syn { client: s, to });
        self.seq += 1;
        self.deadlines.insert((now + timeout, self.seq), s);
        Ok(())
    }

    fn send(&mut self, s: SockId, data: &[u8]) -> Result<usize> {
        let sock = self.sock(s)?;
        if sock.state != State::Connected {
            return Err(Error::NotConnected);
        }
        if data.is_empty() {
            return Ok(0);
        }
        let to = sock.peer_sock.expect("connected sockets have a peer");
        self.transmit(
            s,
            Wire::Data {
                to,
                bytes: data.to_vec(),
            },
            data.len(),
        )?;
        Ok(data.len())
    }

    fn recv(&mut self, s: SockId, max: usize) -> Result<Vec<u8>> {
        let sock = self.sock_mut(s)?;
        let n = max.min(sock.rx.len());
        Ok(sock.rx.drain(..n).collect())
    }

    fn readable_bytes(&self, s: SockId) -> usize {
        self.socks.get(&s).map_or(0, |x| x.rx.len())
    }

    fn peer_closed(&self, s: SockId) -> bool {
        self.socks.get(&s).is_none_or(|x| x.fin)
    }

    fn close(&mut self, s: SockId) {
        let Some(sock) = self.socks.get(&s) else {
            return;
        };
        match sock.state {
            State::Connected | State::Connecting => {
                if let Some(peer) = sock.peer_sock {
                    let _ = self.transmit(s, Wire::Fin { to: peer }, 0);
                }
            }
            State::Listening => {
                for pending in sock.accept_q.clone() {
                    self.close(pending);
                }
            }
            _ => {}
        }
        self.deadlines.retain(|_, c| *c != s);
        let sock = self.socks.remove(&s).expect("present");
        if let Some(addr) = sock.local {
            if self.bound.get(&addr) == Some(&s) {
                self.bound.remove(&addr);
            }
        }
        self.ready.retain(|(_, ev)| match ev {
            NetEvent::Acceptable { listener: x }
            | NetEvent::Connected { sock: x }
            | NetEvent::ConnectFailed { sock: x, .. }
            | NetEvent::Readable { sock: x }
            | NetEvent::PeerClosed { sock: x } => *x != s,
            NetEvent::Timer { .. } => true,
        });
    }

    fn local_addr(&self, s: SockId) -> Option<SocketAddrV4> {
        self.socks.get(&s).and_then(|x| x.local)
    }

    fn peer_addr(&self, s: SockId) -> Option<SocketAddrV4> {
        self.socks.get(&s).and_then(|x| x.peer)
    }

    fn set_timer(&mut self, owner: Owner, delay: SimTime, token: u64) {
        self.schedule(self.now + delay, Wire::Timer { owner, token });
    }

    fn next_event_time(&self) -> Option<SimTime> {
        if !self.ready.is_empty() {
            return Some(self.now);
        }
        let q = self.queue.peek().map(|Reverse((t, _, _))| *t);
        let d = self.deadlines.keys().next().map(|(t, _)| *t);
        match (q, d) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    fn advance_to(&mut self, t: SimTime) {
        self.now = self.now.max(t);
    }

    fn pop_event(&mut self) -> Option<(Owner, NetEvent)> {
        loop {
            if let Some(ev) = self.ready.pop_front() {
                return Some(ev);
            }
            let q = self.queue.peek().map(|Reverse((t, _, _))| *t);
            if let Some((&(t, seq), &client)) = self.deadlines.iter().next() {
                if q.is_none_or(|q| t < q) {
                    self.deadlines.remove(&(t, seq));
                    self.now = self.now.max(t);
                    if let Some(c) = self.socks.get_mut(&client) {
                        if c.state == State::Connecting {
                            c.state = State::Bound;
                            self.notify(
                                client,
                                NetEvent::ConnectFailed {
                                    sock: client,
                                    error: ConnectError::Timeout,
                                },
                            );
                        }
                    }
                    continue;
                }
            }
            let Reverse((t, _, slot)) = self.queue.pop()?;
            self.now = self.now.max(t);
            let w = self.slots.remove(&slot).expect("scheduled");
            self.handle(w);
        }
    }

    fn open_sockets(&self) -> usize {
        self.socks.len()
    }
}
