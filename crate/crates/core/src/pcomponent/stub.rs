use std::collections::VecDeque;
use std::fmt;
use std::net::SocketAddrV4;
use std::str::FromStr;

use crate::error::Error;
use crate::interconnect::ComponentId;
use crate::sched::Ticket;

/// How payload moves between a stub and its skeleton.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum TransferMode {
    /// Through disaggregated memory: flush to an mComponent, the nComponent
    /// fetches it.
    #[default]
    Dma,
    /// Straight between the pComponent cache and the nComponent.
    Ddio,
}

impl fmt::Display for TransferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransferMode::Dma => "dma",
            TransferMode::Ddio => "ddio",
        })
    }
}

impl FromStr for TransferMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "dma" => Ok(TransferMode::Dma),
            "ddio" => Ok(TransferMode::Ddio),
            _ => Err(Error::Config(format!("unknown transfer mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SockState {
    Created,
    Bound,
    Listening,
    Connecting,
    Connected,
    Closed,
}

impl SockState {
    pub fn name(self) -> &'static str {
        match self {
            SockState::Created => "created",
            SockState::Bound => "bound",
            SockState::Listening => "listening",
            SockState::Connecting => "connecting",
            SockState::Connected => "connected",
            SockState::Closed => "closed",
        }
    }
}

/// The data path a connected stub uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    None,
    /// Through a skeleton on an nComponent.
    Skel {
        nc: ComponentId,
        skel: u32,
    },
    /// To another stub of the same pComponent.
    Pipe {
        peer: u32,
    },
    /// To a stub on another pComponent.
    Fit {
        pc: ComponentId,
        peer: u32,
    },
}

/// Route and mode flattened for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RouteKind {
    Unrouted,
    SkelDma,
    SkelDdio,
    LocalPipe,
    LocalFit,
}

impl fmt::Display for RouteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RouteKind::Unrouted => "unrouted",
            RouteKind::SkelDma => "skel-dma",
            RouteKind::SkelDdio => "skel-ddio",
            RouteKind::LocalPipe => "local-pipe",
            RouteKind::LocalFit => "local-fit",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SocketHandle {
    pub pc: u16,
    pub id: u32,
}

/// A buffer in the pComponent's virtual address space. Its bytes live in
/// the cache and, once written back, in an mComponent region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AppBuffer {
    pub pc: u16,
    pub vaddr: u64,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub(crate) enum SendSrc {
    Bytes(Vec<u8>),
    Buffer { vaddr: u64 },
}

#[derive(Debug, Clone)]
pub(crate) struct SendOp {
    pub(crate) ticket: Ticket,
    pub(crate) src: SendSrc,
    pub(crate) total: usize,
    /// Bytes handed to the data path.
    pub(crate) departed: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct RecvOp {
    pub(crate) ticket: Ticket,
    pub(crate) max: usize,
}

#[derive(Debug)]
pub struct StubSocket {
    pub id: u32,
    pub state: SockState,
    pub local: Option<SocketAddrV4>,
    pub peer: Option<SocketAddrV4>,
    pub mode: TransferMode,
    /// Set once data has moved; the mode is fixed from then on.
    pub mode_locked: bool,
    pub route: Route,
    /// nComponent handed out by a wildcard bind.
    pub(crate) wildcard_nc: Option<ComponentId>,
    /// nComponent picked by the connect-time balancing policy.
    pub(crate) routed_nc: Option<ComponentId>,
    pub(crate) send_q: VecDeque<SendOp>,
    /// A DMA segment or a buffer load is in flight.
    pub(crate) send_busy: bool,
    pub(crate) recv_q: VecDeque<RecvOp>,
    pub(crate) recv_inflight: bool,
    pub(crate) accept_q: VecDeque<Ticket>,
    pub(crate) backlog: VecDeque<u32>,
    /// Bytes the stub may still put in flight on windowed paths.
    pub(crate) window: usize,
    pub(crate) rx_local: VecDeque<u8>,
    pub(crate) eof: bool,
    pub(crate) tx_vaddr: Option<u64>,
    pub(crate) rx_vaddr: Option<u64>,
}

impl StubSocket {
    pub(crate) fn new(id: u32, mode: TransferMode) -> Self {
        StubSocket {
            id,
            state: SockState::Created,
            local: None,
            peer: None,
            mode,
            mode_locked: false,
            route: Route::None,
            wildcard_nc: None,
            routed_nc: None,
            send_q: VecDeque::new(),
            send_busy: false,
            recv_q: VecDeque::new(),
            recv_inflight: false,
            accept_q: VecDeque::new(),
            backlog: VecDeque::new(),
            window: 0,
            rx_local: VecDeque::new(),
            eof: false,
            tx_vaddr: None,
            rx_vaddr: None,
        }
    }

    pub fn route_kind(&self) -> RouteKind {
        match self.route {
            Route::None => RouteKind::Unrouted,
            Route::Skel { .. } if self.mode == TransferMode::Dma => RouteKind::SkelDma,
            Route::Skel { .. } => RouteKind::SkelDdio,
            Route::Pipe { .. } => RouteKind::LocalPipe,
            Route::Fit { .. } => RouteKind::LocalFit,
        }
    }

    /// The skeleton behind this stub, if any.
    pub fn skeleton(&self) -> Option<(ComponentId, u32)> {
        match self.route {
            Route::Skel { nc, skel } => Some((nc, skel)),
            _ => None,
        }
    }

    pub fn rx_buffered(&self) -> usize {
        self.rx_local.len()
    }
}
