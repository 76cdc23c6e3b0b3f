//! The network outside the rack, as seen by nComponent skeletons and by
//! external applications.
//!
//! Two backends implement [`NetStack`]: [`SimNet`], a deterministic virtual
//! TCP world driven by the same clock as the interconnect, and [`HostNet`],
//! which uses non-blocking host sockets on loopback and the wall clock.
//! Both report readiness as [`NetEvent`]s addressed to an [`Owner`].

mod host;
mod sim;

use std::any::Any;
use std::net::{Ipv4Addr, SocketAddrV4};

pub use host::HostNet;
pub use sim::SimNet;

use crate::error::{Error, Result};
use crate::time::SimTime;

pub type SockId = u64;
pub type AppId = usize;

/// Who receives the events of a socket or timer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Owner {
    Nc(u16),
    App(AppId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectError {
    Refused,
    NoRoute,
    Timeout,
}

impl From<ConnectError> for Error {
    fn from(e: ConnectError) -> Error {
        match e {
            ConnectError::Refused => Error::ConnRefused,
            ConnectError::NoRoute => Error::NoRoute,
            ConnectError::Timeout => Error::Timeout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NetEvent {
    /// At least one connection waits in the listener's accept queue.
    Acceptable {
        listener: SockId,
    },
    Connected {
        sock: SockId,
    },
    ConnectFailed {
        sock: SockId,
        error: ConnectError,
    },
    Readable {
        sock: SockId,
    },
    /// The peer will send no more bytes; buffered bytes stay readable.
    PeerClosed {
        sock: SockId,
    },
    Timer {
        token: u64,
    },
}

pub trait NetStack {
    fn now(&self) -> SimTime;

    /// Makes `ip` an addressable host.
    fn add_host(&mut self, ip: Ipv4Addr);
    fn is_host(&self, ip: Ipv4Addr) -> bool;

    fn socket(&mut self, owner: Owner) -> SockId;
    /// Port 0 picks an ephemeral port. Returns the bound address.
    fn bind(&mut self, s: SockId, addr: SocketAddrV4) -> Result<SocketAddrV4>;
    fn listen(&mut self, s: SockId, backlog: u32) -> Result<()>;
    /// Pops one pending connection; the new socket belongs to the
    /// listener's owner.
    fn accept(&mut self, s: SockId) -> Result<Option<(SockId, SocketAddrV4)>>;
    /// Starts a connection from the socket's bound address. Completion is
    /// reported with `Connected` or `ConnectFailed`.
    fn connect(&mut self, s: SockId, to: SocketAddrV4) -> Result<()>;
    fn send(&mut self, s: SockId, data: &[u8]) -> Result<usize>;
    /// Takes up to `max` buffered bytes; empty when nothing is buffered.
    fn recv(&mut self, s: SockId, max: usize) -> Result<Vec<u8>>;
    fn readable_bytes(&self, s: SockId) -> usize;
    fn peer_closed(&self, s: SockId) -> bool;
    fn close(&mut self, s: SockId);
    fn local_addr(&self, s: SockId) -> Option<SocketAddrV4>;
    fn peer_addr(&self, s: SockId) -> Option<SocketAddrV4>;

    fn set_timer(&mut self, owner: Owner, delay: SimTime, token: u64);

    /// Time of the next event, if any is scheduled.
    fn next_event_time(&self) -> Option<SimTime>;
    fn advance_to(&mut self, t: SimTime);
    /// Pops the next event, advancing the clock to its time.
    fn pop_event(&mut self) -> Option<(Owner, NetEvent)>;
    /// Gives a wall-clock backend the chance to observe host sockets.
    fn poll(&mut self) {}
    /// Sockets currently open.
    fn open_sockets(&self) -> usize;
}

/// An application running on an external host.
pub trait NetApp: Any {
    fn on_start(&mut self, me: Owner, net: &mut dyn NetStack);
    fn on_event(&mut self, ev: NetEvent, me: Owner, net: &mut dyn NetStack);
}

/// Binds a fresh socket to `ip:0` and starts connecting it to `to`.
pub fn connect_from(
    net: &mut dyn NetStack,
    owner: Owner,
    ip: Ipv4Addr,
    to: SocketAddrV4,
) -> Result<SockId> {
    let s = net.socket(owner);
    net.bind(s, SocketAddrV4::new(ip, 0))?;
    net.connect(s, to)?;
    Ok(s)
}

/// Opens a listening socket at `addr`.
pub fn listen_on(
    net: &mut dyn NetStack,
    owner: Owner,
    addr: SocketAddrV4,
    backlog: u32,
) -> Result<SockId> {
    let s = net.socket(owner);
    net.bind(s, addr)?;
    net.listen(s, backlog)?;
    Ok(s)
}
