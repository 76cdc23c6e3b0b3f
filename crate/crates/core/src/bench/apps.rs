//! Applications that run on external hosts during a benchmark.

use std::collections::BTreeMap;
use std::net::{Ipv4Addr, SocketAddrV4};

use crate::net::{connect_from, listen_on, NetApp, NetEvent, NetStack, Owner, SockId};
use crate::time::SimTime;

/// Sends fixed-size messages one at a time and times each echo.
///
/// After `hold_after` round trips the client pauses until [`resume`] so the
/// driver can reset counters between warmup and measurement.
///
/// [`resume`]: EchoClient::resume
pub struct EchoClient {
    ip: Ipv4Addr,
    server: SocketAddrV4,
    messages: Vec<Vec<u8>>,
    hold_after: Option<usize>,
    sock: Option<SockId>,
    rx: Vec<u8>,
    sent_at: SimTime,
    /// Round trips completed.
    pub completed: usize,
    /// Round-trip times in microseconds, in completion order.
    pub rtts_us: Vec<f64>,
    pub connected_at: Option<SimTime>,
    pub finished_at: Option<SimTime>,
    pub held: bool,
    pub error: Option<String>,
}

impl EchoClient {
    pub fn new(
        ip: Ipv4Addr,
        server: SocketAddrV4,
        messages: Vec<Vec<u8>>,
        hold_after: Option<usize>,
    ) -> Self {
        EchoClient {
            ip,
            server,
            messages,
            hold_after,
            sock: None,
            rx: Vec::new(),
            sent_at: SimTime::ZERO,
            completed: 0,
            rtts_us: Vec::new(),
            connected_at: None,
            finished_at: None,
            held: false,
            error: None,
        }
    }

    pub fn is_done(&self) -> bool {
        self.finished_at.is_some() || self.error.is_some()
    }

    /// Sends the next message after a hold.
    pub fn resume(&mut self, net: &mut dyn NetStack) {
        if self.held {
            self.held = false;
            self.hold_after = None;
            self.send_next(net);
        }
    }

    fn fail(&mut self, why: String, net: &mut dyn NetStack) {
        self.error.get_or_insert(why);
        if let Some(s) = self.sock.take() {
            net.close(s);
        }
    }

    fn send_next(&mut self, net: &mut dyn NetStack) {
        let Some(s) = self.sock else { return };
        if self.completed == self.messages.len() {
            self.finished_at = Some(net.now());
            net.close(s);
            self.sock = None;
            return;
        }
        if self.hold_after == Some(self.completed) {
            self.held = true;
            return;
        }
        self.sent_at = net.now();
        if let Err(e) = net.send(s, &self.messages[self.completed]) {
            self.fail(format!("send failed: {e}"), net);
        }
    }
}

impl NetApp for EchoClient {
    fn on_start(&mut self, me: Owner, net: &mut dyn NetStack) {
        match connect_from(net, me, self.ip, self.server) {
            Ok(s) => self.sock = Some(s),
            Err(e) => self.error = Some(format!("connect to {} failed: {e}", self.server)),
        }
    }

    fn on_event(&mut self, ev: NetEvent, _me: Owner, net: &mut dyn NetStack) {
        match ev {
            NetEvent::Connected { .. } => {
                self.connected_at = Some(net.now());
                self.send_next(net);
            }
            NetEvent::ConnectFailed { error, .. } => {
                self.fail(format!("connect failed: {error:?}"), net)
            }
            NetEvent::Readable { sock } => {
                let Ok(bytes) = net.recv(sock, usize::MAX) else {
                    return;
                };
                self.rx.extend(bytes);
                let Some(want) = self.messages.get(self.completed) else {
                    return self.fail("bytes arrived after the last echo".into(), net);
                };
                if self.rx.len() < want.len() {
                    return;
                }
                if self.rx != *want {
                    let at = self
                        .rx
                        .iter()
                        .zip(want)
                        .position(|(a, b)| a != b)
                        .unwrap_or(want.len());
                    return self.fail(
                        format!(
                            "echo {} differs from what was sent at byte {at}",
                            self.completed
                        ),
                        net,
                    );
                }
                self.rx.clear();
                self.rtts_us
                    .push((net.now() - self.sent_at).as_micros_f64());
                self.completed += 1;
                self.send_next(net);
            }
            NetEvent::PeerClosed { .. } if !self.is_done() => self.fail(
                format!("server closed after {} echoes", self.completed),
                net,
            ),
            _ => {}
        }
    }
}

/// Echoes every byte it receives on every accepted connection.
pub struct EchoServer {
    addr: SocketAddrV4,
    listener: Option<SockId>,
    pub echoed: u64,
    pub error: Option<String>,
}

impl EchoServer {
    pub fn new(addr: SocketAddrV4) -> Self {
        EchoServer {
            addr,
            listener: None,
            echoed: 0,
            error: None,
        }
    }
}

impl NetApp for EchoServer {
    fn on_start(&mut self, me: Owner, net: &mut dyn NetStack) {
        match listen_on(net, me, self.addr, 128) {
            Ok(s) => self.listener = Some(s),
            Err(e) => self.error = Some(format!("listen on {} failed: {e}", self.addr)),
        }
    }

    fn on_event(&mut self, ev: NetEvent, _me: Owner, net: &mut dyn NetStack) {
        match ev {
            NetEvent::Acceptable { listener } => while let Ok(Some(_)) = net.accept(listener) {},
            NetEvent::Readable { sock } => {
                let bytes = net.recv(sock, usize::MAX).unwrap_or_default();
                if net.send(sock, &bytes).is_ok() {
                    self.echoed += bytes.len() as u64;
                }
            }
            NetEvent::PeerClosed { sock } => net.close(sock),
            _ => {}
        }
    }
}

/// Accepts connections and holds them until the peer closes.
pub struct Listener {
    addr: SocketAddrV4,
    pub accepted: u64,
    pub closed: u64,
    pub error: Option<String>,
}

impl Listener {
    pub fn new(addr: SocketAddrV4) -> Self {
        Listener {
            addr,
            accepted: 0,
            closed: 0,
            error: None,
        }
    }
}

impl NetApp for Listener {
    fn on_start(&mut self, me: Owner, net: &mut dyn NetStack) {
        if let Err(e) = listen_on(net, me, self.addr, 1024) {
            self.error = Some(format!("listen on {} failed: {e}", self.addr));
        }
    }

    fn on_event(&mut self, ev: NetEvent, _me: Owner, net: &mut dyn NetStack) {
        match ev {
            NetEvent::Acceptable { listener } => {
                while let Ok(Some(_)) = net.accept(listener) {
                    self.accepted += 1;
                }
            }
            NetEvent::Readable { sock } => {
                let _ = net.recv(sock, usize::MAX);
            }
            NetEvent::PeerClosed { sock } => {
                self.closed += 1;
                net.close(sock);
            }
            _ => {}
        }
    }
}

/// Opens `count` connections one after another, timing each handshake.
pub struct Connector {
    ip: Ipv4Addr,
    target: SocketAddrV4,
    count: usize,
    started_at: SimTime,
    pub times_us: Vec<f64>,
    pub error: Option<String>,
}

impl Connector {
    pub fn new(ip: Ipv4Addr, target: SocketAddrV4, count: usize) -> Self {
        Connector {
            ip,
            target,
            count,
            started_at: SimTime::ZERO,
            times_us: Vec::new(),
            error: None,
        }
    }

    pub fn is_done(&self) -> bool {
        self.times_us.len() == self.count || self.error.is_some()
    }

    fn next(&mut self, me: Owner, net: &mut dyn NetStack) {
        if self.is_done() {
            return;
        }
        self.started_at = net.now();
        if let Err(e) = connect_from(net, me, self.ip, self.target) {
            self.error = Some(format!("connect to {} failed: {e}", self.target));
        }
    }
}

impl NetApp for Connector {
    fn on_start(&mut self, me: Owner, net: &mut dyn NetStack) {
        self.next(me, net);
    }

    fn on_event(&mut self, ev: NetEvent, me: Owner, net: &mut dyn NetStack) {
        match ev {
            NetEvent::Connected { sock } => {
                self.times_us
                    .push((net.now() - self.started_at).as_micros_f64());
                net.close(sock);
                self.next(me, net);
            }
            NetEvent::ConnectFailed { error, .. } => {
                self.error = Some(format!("connect failed: {error:?}"))
            }
            _ => {}
        }
    }
}

/// The word-count reducer: merges `word\tcount\n` records from any number
/// of mapper connections.
pub struct Reducer {
    addr: SocketAddrV4,
    partial: BTreeMap<SockId, Vec<u8>>,
    pub counts: BTreeMap<String, u64>,
    pub records: u64,
    pub streams_done: usize,
    pub last_eof_at: Option<SimTime>,
    pub error: Option<String>,
}

impl Reducer {
    pub fn new(addr: SocketAddrV4) -> Self {
        Reducer {
            addr,
            partial: BTreeMap::new(),
            counts: BTreeMap::new(),
            records: 0,
            streams_done: 0,
            last_eof_at: None,
            error: None,
        }
    }

    fn absorb(&mut self, sock: SockId, bytes: Vec<u8>) {
        let buf = self.partial.entry(sock).or_default();
        buf.extend(bytes);
        let Some(end) = buf.iter().rposition(|&b| b == b'\n') else {
            return;
        };
        let rest = buf.split_off(end + 1);
        let whole = std::mem::replace(buf, rest);
        for line in whole.split(|&b| b == b'\n').filter(|l| !l.is_empty()) {
            match parse_record(line) {
                Some((w, n)) => {
                    *self.counts.entry(w).or_insert(0) += n;
                    self.records += 1;
                }
                None => {
                    self.error.get_or_insert_with(|| {
                        format!("malformed record {:?}", String::from_utf8_lossy(line))
                    });
                }
            }
        }
    }
}

fn parse_record(line: &[u8]) -> Option<(String, u64)> {
    let line = std::str::from_utf8(line).ok()?;
    let (w, n) = line.split_once('\t')?;
    Some((w.to_string(), n.parse().ok()?))
}

impl NetApp for Reducer {
    fn on_start(&mut self, me: Owner, net: &mut dyn NetStack) {
        if let Err(e) = listen_on(net, me, self.addr, 128) {
            self.error = Some(format!("listen on {} failed: {e}", self.addr));
        }
    }

    fn on_event(&mut self, ev: NetEvent, _me: Owner, net: &mut dyn NetStack) {
        match ev {
            NetEvent::Acceptable { listener } => while let Ok(Some(_)) = net.accept(listener) {},
            NetEvent::Readable { sock } => {
                let bytes = net.recv(sock, usize::MAX).unwrap_or_default();
                self.absorb(sock, bytes);
            }
            NetEvent::PeerClosed { sock } => {
                let bytes = net.recv(sock, usize::MAX).unwrap_or_default();
                self.absorb(sock, bytes);
                if self
                    .partial
                    .remove(&sock)
                    .is_some_and(|rest| !rest.is_empty())
                {
                    self.error
                        .get_or_insert_with(|| "stream ended inside a record".into());
                }
                self.streams_done += 1;
                self.last_eof_at = Some(net.now());
                net.close(sock);
            }
            _ => {}
        }
    }
}

/// A mapper running directly on an external host, for the baseline.
pub struct NativeMapper {
    ip: Ipv4Addr,
    reducer: SocketAddrV4,
    batches: Vec<Vec<u8>>,
    pub error: Option<String>,
}

impl NativeMapper {
    pub fn new(ip: Ipv4Addr, reducer: SocketAddrV4, batches: Vec<Vec<u8>>) -> Self {
        NativeMapper {
            ip,
            reducer,
            batches,
            error: None,
        }
    }
}

impl NetApp for NativeMapper {
    fn on_start(&mut self, me: Owner, net: &mut dyn NetStack) {
        if let Err(e) = connect_from(net, me, self.ip, self.reducer) {
            self.error = Some(format!("connect to {} failed: {e}", self.reducer));
        }
    }

    fn on_event(&mut self, ev: NetEvent, _me: Owner, net: &mut dyn NetStack) {
        match ev {
            NetEvent::Connected { sock } => {
                for b in std::mem::take(&mut self.batches) {
                    // both backends buffer a whole send
                    if let Err(e) = net.send(sock, &b) {
                        self.error = Some(format!("send failed: {e}"));
                        break;
                    }
                }
                net.close(sock);
            }
            NetEvent::ConnectFailed { error, .. } => {
                self.error = Some(format!("connect failed: {error:?}"))
            }
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reducer_reassembles_records_split_anywhere() {
        let mut r = Reducer::new(SocketAddrV4::new(Ipv4Addr::LOCALHOST, 1));
        r.absorb(1, b"ab\t2\nc".to_vec());
        r.absorb(1, b"d\t1\n".to_vec());
        r.absorb(2, b"ab\t".to_vec());
        r.absorb(2, b"3\n".to_vec());
        assert_eq!(r.counts.get("ab"), Some(&5));
        assert_eq!(r.counts.get("cd"), Some(&1));
        assert_eq!(r.records, 3);
        assert!(r.error.is_none());
    }
}
