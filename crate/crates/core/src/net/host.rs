use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::io::{ErrorKind, Read, Write};
use std::net::{Ipv4Addr, Shutdown, SocketAddr, SocketAddrV4, TcpListener, TcpStream};
use std::time::Instant;

use super::{ConnectError, NetEvent, NetStack, Owner, SockId};
use crate::error::{Error, Result};
use crate::time::SimTime;

enum Kind {
    Fresh,
    Bound,
    Listener(TcpListener),
    Stream(TcpStream),
}

struct HSock {
    owner: Owner,
    kind: Kind,
    local: Option<SocketAddrV4>,
    peer: Option<SocketAddrV4>,
    rx: VecDeque<u8>,
    tx: VecDeque<u8>,
    eof: bool,
    accept_q: VecDeque<(TcpStream, SocketAddrV4)>,
}

/// Host-socket backend. Virtual addresses are mapped onto loopback
/// listeners with kernel-chosen ports, so several virtual hosts can share
/// one machine without port clashes.
pub struct HostNet {
    start: Instant,
    host_ip: BTreeMap<Ipv4Addr, Ipv4Addr>,
    socks: BTreeMap<SockId, HSock>,
    bound: BTreeMap<SocketAddrV4, SockId>,
    listeners: BTreeMap<SocketAddrV4, SocketAddr>,
    /// Real local address of a connecting stream -> its virtual address.
    origins: BTreeMap<SocketAddr, SocketAddrV4>,
    next_sock: SockId,
    next_port: u16,
    timers: BinaryHeap<Reverse<(SimTime, u64, Owner, u64)>>,
    seq: u64,
    ready: VecDeque<(Owner, NetEvent)>,
}

impl Default for HostNet {
    fn default() -> Self {
        Self::new()
    }
}

impl HostNet {
    pub fn new() -> HostNet {
        HostNet {
            start: Instant::now(),
            host_ip: BTreeMap::new(),
            socks: BTreeMap::new(),
            bound: BTreeMap::new(),
            listeners: BTreeMap::new(),
            origins: BTreeMap::new(),
            next_sock: 1,
            next_port: 49_152,
            timers: BinaryHeap::new(),
            seq: 0,
            ready: VecDeque::new(),
        }
    }

    /// Maps a virtual host to the host address its sockets really use.
    pub fn map_host(&mut self, virt: Ipv4Addr, real: Ipv4Addr) {
        self.host_ip.insert(virt, real);
    }

    fn sock_mut(&mut self, s: SockId) -> Result<&mut HSock> {
        self.socks.get_mut(&s).ok_or(Error::BadHandle)
    }

    fn flush_tx(sock: &mut HSock) -> std::io::Result<()> {
        let Kind::Stream(stream) = &mut sock.kind else {
            return Ok(());
        };
        while !sock.tx.is_empty() {
            let (head, _) = sock.tx.as_slices();
            match stream.write(head) {
                Ok(0) => return Err(ErrorKind::WriteZero.into()),
                Ok(n) => {
                    sock.tx.drain(..n);
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }
}

impl NetStack for HostNet {
    fn now(&self) -> SimTime {
        SimTime(self.start.elapsed().as_nanos() as u64)
    }

    fn add_host(&mut self, ip: Ipv4Addr) {
        self.host_ip.entry(ip).or_insert(Ipv4Addr::LOCALHOST);
    }

    fn is_host(&self, ip: Ipv4Addr) -> bool {
        self.host_ip.contains_key(&ip)
    }

    fn socket(&mut self, owner: Owner) -> SockId {
        let id = self.next_sock;
        self.next_sock += 1;
        self.socks.insert(
            id,
            HSock {
                owner,
                kind: Kind::Fresh,
                local: None,
                peer: None,
                rx: VecDeque::new(),
                tx: VecDeque::new(),
                eof: false,
                accept_q: VecDeque::new(),
            },
        );
        id
    }

    fn bind(&mut self, s: SockId, addr: SocketAddrV4) -> Result<SocketAddrV4> {
        if !self.host_ip.contains_key(addr.ip()) {
            return Err(Error::NoSuchIp(*addr.ip()));
        }
        let addr = if addr.port() == 0 {
            loop {
                let p = self.next_port;
                self.next_port = self.next_port.checked_add(1).unwrap_or(49_152);
                let a = SocketAddrV4::new(*addr.ip(), p);
                if !self.bound.contains_key(&a) {
                    break a;
                }
            }
        } else {
            addr
        };
        if self.bound.contains_key(&addr) {
            return Err(Error::AddrInUse);
        }
        let sock = self.sock_mut(s)?;
        if !matches!(sock.kind, Kind::Fresh) {
            return Err(Error::InvalidState {
                op: "bind",
                state: "bound",
            });
        }
        sock.kind = Kind::Bound;
        sock.local = Some(addr);
        self.bound.insert(addr, s);
        Ok(addr)
    }

    fn listen(&mut self, s: SockId, _backlog: u32) -> Result<()> {
        let sock = self.socks.get(&s).ok_or(Error::BadHandle)?;
        let local = sock.local.ok_or(Error::NotBound)?;
        let real_ip = self.host_ip[local.ip()];
        let listener = TcpListener::bind((real_ip, 0))?;
        listener.set_nonblocking(true)?;
        self.listeners.insert(local, listener.local_addr()?);
        self.sock_mut(s)?.kind = Kind::Listener(listener);
        Ok(())
    }

    fn accept(&mut self, s: SockId) -> Result<Option<(SockId, SocketAddrV4)>> {
        let sock = self.sock_mut(s)?;
        let owner = sock.owner;
        let local = sock.local;
        let Some((stream, peer)) = sock.accept_q.pop_front() else {
            return Ok(None);
        };
        let id = self.socket(owner);
        let new = self.sock_mut(id)?;
        new.kind = Kind::Stream(stream);
        new.local = local;
        new.peer = Some(peer);
        Ok(Some((id, peer)))
    }

    fn connect(&mut self, s: SockId, to: SocketAddrV4) -> Result<()> {
        let local = self
            .socks
            .get(&s)
            .ok_or(Error::BadHandle)?
            .local
            .ok_or(Error::NotBound)?;
        if !self.host_ip.contains_key(to.ip()) {
            return Err(Error::NoRoute);
        }
        let Some(real) = self.listeners.get(&to).copied() else {
            let owner = self.socks[&s].owner;
            self.ready.push_back((
                owner,
                NetEvent::ConnectFailed {
                    sock: s,
                    error: ConnectError::Refused,
                },
            ));
            return Ok(());
        };
        let stream = TcpStream::connect(real)?;
        stream.set_nonblocking(true)?;
        stream.set_nodelay(true)?;
        self.origins.insert(stream.local_addr()?, local);
        let sock = self.sock_mut(s)?;
        sock.kind = Kind::Stream(stream);
        sock.peer = Some(to);
        let owner = sock.owner;
        self.ready
            .push_back((owner, NetEvent::Connected { sock: s }));
        Ok(())
    }

    fn send(&mut self, s: SockId, data: &[u8]) -> Result<usize> {
        let sock = self.sock_mut(s)?;
        if !matches!(sock.kind, Kind::Stream(_)) {
            return Err(Error::NotConnected);
        }
        sock.tx.extend(data);
        Self::flush_tx(sock)?;
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
        self.socks.get(&s).is_none_or(|x| x.eof)
    }

    fn close(&mut self, s: SockId) {
        let Some(mut sock) = self.socks.remove(&s) else {
            return;
        };
        if let Kind::Stream(stream) = &sock.kind {
            let _ = stream.set_nonblocking(false);
            let _ = Self::flush_tx(&mut sock);
            if let Kind::Stream(stream) = &sock.kind {
                let _ = stream.shutdown(Shutdown::Write);
            }
        }
        if let Some(addr) = sock.local {
            if self.bound.get(&addr) == Some(&s) {
                self.bound.remove(&addr);
                self.listeners.remove(&addr);
            }
        }
    }

    fn local_addr(&self, s: SockId) -> Option<SocketAddrV4> {
        self.socks.get(&s).and_then(|x| x.local)
    }

    fn peer_addr(&self, s: SockId) -> Option<SocketAddrV4> {
        self.socks.get(&s).and_then(|x| x.peer)
    }

    fn set_timer(&mut self, owner: Owner, delay: SimTime, token: u64) {
        self.seq += 1;
        self.timers
            .push(Reverse((self.now() + delay, self.seq, owner, token)));
    }

    fn next_event_time(&self) -> Option<SimTime> {
        if !self.ready.is_empty() {
            return Some(self.now());
        }
        self.timers.peek().map(|Reverse((t, ..))| *t)
    }

    fn advance_to(&mut self, _t: SimTime) {}

    fn pop_event(&mut self) -> Option<(Owner, NetEvent)> {
        if let Some(ev) = self.ready.pop_front() {
            return Some(ev);
        }
        match self.timers.peek() {
            Some(Reverse((t, ..))) if *t <= self.now() => {
                let Reverse((_, _, owner, token)) = self.timers.pop().expect("peeked");
                Some((owner, NetEvent::Timer { token }))
            }
            _ => None,
        }
    }

    fn poll(&mut self) {
        let mut buf = [0u8; 64 * 1024];
        let ids: Vec<SockId> = self.socks.keys().copied().collect();
        for id in ids {
            let origins = &self.origins;
            let sock = self.socks.get_mut(&id).expect("listed");
            let owner = sock.owner;
            match &mut sock.kind {
                Kind::Listener(l) => {
                    let mut fresh = false;
                    while let Ok((stream, real_peer)) = l.accept() {
                        let _ = stream.set_nonblocking(true);
                        let _ = stream.set_nodelay(true);
                        let peer = origins.get(&real_peer).copied().unwrap_or(match real_peer {
                            SocketAddr::V4(v4) => v4,
                            SocketAddr::V6(_) => SocketAddrV4::new(Ipv4Addr::UNSPECIFIED, 0),
                        });
                        sock.accept_q.push_back((stream, peer));
                        fresh = true;
                    }
                    if fresh {
                        self.ready
                            .push_back((owner, NetEvent::Acceptable { listener: id }));
                    }
                }
                Kind::Stream(stream) => {
                    if sock.eof {
                        continue;
                    }
                    let mut got = false;
                    loop {
                        match stream.read(&mut buf) {
                            Ok(0) => {
                                sock.eof = true;
                                break;
                            }
                            Ok(n) => {
                                sock.rx.extend(&buf[..n]);
                                got = true;
                            }
                            Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                            Err(_) => {
                                sock.eof = true;
                                break;
                            }
                        }
                    }
                    let _ = Self::flush_tx(sock);
                    if got {
                        self.ready
                            .push_back((owner, NetEvent::Readable { sock: id }));
                    }
                    if sock.eof {
                        self.ready
                            .push_back((owner, NetEvent::PeerClosed { sock: id }));
                    }
                }
                _ => {}
            }
        }
    }

    fn open_sockets(&self) -> usize {
        self.socks.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loopback_echo_through_virtual_addresses() {
        let mut n = HostNet::new();
        n.add_host(Ipv4Addr::new(10, 0, 0, 1));
        n.add_host(Ipv4Addr::new(192, 168, 1, 10));
        let l = super::super::listen_on(&mut n, Owner::Nc(0), "10.0.0.1:5000".parse().unwrap(), 8)
            .unwrap();
        let c = super::super::connect_from(
            &mut n,
            Owner::App(0),
            Ipv4Addr::new(192, 168, 1, 10),
            "10.0.0.1:5000".parse().unwrap(),
        )
        .unwrap();
        let mut srv = None;
        let deadline = Instant::now() + std::time::Duration::from_secs(5);
        while srv.is_none() && Instant::now() < deadline {
            n.poll();
            while n.pop_event().is_some() {}
            srv = n.accept(l).unwrap();
        }
        let (srv, peer) = srv.expect("accepted");
        assert_eq!(peer, n.local_addr(c).unwrap());
        n.send(c, b"over loopback").unwrap();
        let mut got = Vec::new();
        while got.len() < 13 && Instant::now() < deadline {
            n.poll();
            got.extend(n.recv(srv, 100).unwrap());
        }
        assert_eq!(got, b"over loopback");
        n.close(c);
        while !n.peer_closed(srv) && Instant::now() < deadline {
            n.poll();
        }
        assert!(n.peer_closed(srv));
        // nothing listens on this virtual address
        let s = n.socket(Owner::App(0));
        n.bind(s, "192.168.1.10:0".parse().unwrap()).unwrap();
        n.connect(s, "10.0.0.1:1".parse().unwrap()).unwrap();
        let evs: Vec<_> = std::iter::from_fn(|| n.pop_event()).collect();
        assert!(evs.contains(&(
            Owner::App(0),
            NetEvent::ConnectFailed {
                sock: s,
                error: ConnectError::Refused
            }
        )));
    }
}
