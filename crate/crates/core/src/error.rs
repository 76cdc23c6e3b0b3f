use std::net::Ipv4Addr;

use crate::interconnect::ComponentId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown component {0}")]
    UnknownComponent(ComponentId),
    #[error("invalid channel endpoints {0} <-> {1}")]
    InvalidPair(ComponentId, ComponentId),
    #[error("channel closed")]
    ChannelClosed,
    #[error("operation timed out")]
    Timeout,
    #[error("instrumentation is disabled in the topology")]
    InstrumentationDisabled,

    #[error("ip {0} is already registered")]
    DuplicateIp(Ipv4Addr),
    #[error("no ncomponent owns ip {0}")]
    NoSuchIp(Ipv4Addr),

    #[error("address in use")]
    AddrInUse,
    #[error("connection refused")]
    ConnRefused,
    #[error("no route to host")]
    NoRoute,
    #[error("socket is not bound")]
    NotBound,
    #[error("socket is not connected")]
    NotConnected,
    #[error("peer closed the connection")]
    PeerClosed,
    #[error("interrupted")]
    Interrupted,
    #[error("invalid socket handle")]
    BadHandle,
    #[error("{op} not permitted in state {state}")]
    InvalidState {
        op: &'static str,
        state: &'static str,
    },

    #[error("resource exhausted")]
    ResourceExhausted,
    #[error("requested {requested} bytes exceeds cache capacity {capacity}")]
    CapacityExceeded { requested: usize, capacity: usize },
    #[error("out of memory")]
    OutOfMemory,
    #[error("access out of bounds")]
    OutOfBounds,
    #[error("use after free")]
    UseAfterFree,

    #[error("no event can make progress")]
    Stalled,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("scenario failed: {0}")]
    ScenarioFailed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// A copy of the error for fanning one failure out to several waiters.
    pub fn duplicate(&self) -> Error {
        match self {
            Error::UnknownComponent(c) => Error::UnknownComponent(*c),
            Error::InvalidPair(a, b) => Error::InvalidPair(*a, *b),
            Error::ChannelClosed => Error::ChannelClosed,
            Error::Timeout => Error::Timeout,
            Error::InstrumentationDisabled => Error::InstrumentationDisabled,
            Error::DuplicateIp(ip) => Error::DuplicateIp(*ip),
            Error::NoSuchIp(ip) => Error::NoSuchIp(*ip),
            Error::AddrInUse => Error::AddrInUse,
            Error::ConnRefused => Error::ConnRefused,
            Error::NoRoute => Error::NoRoute,
            Error::NotBound => Error::NotBound,
            Error::NotConnected => Error::NotConnected,
            Error::PeerClosed => Error::PeerClosed,
            Error::Interrupted => Error::Interrupted,
            Error::BadHandle => Error::BadHandle,
            Error::InvalidState { op, state } => Error::InvalidState { op, state },
            Error::ResourceExhausted => Error::ResourceExhausted,
            Error::CapacityExceeded {
                requested,
                capacity,
            } => Error::CapacityExceeded {
                requested: *requested,
                capacity: *capacity,
            },
            Error::OutOfMemory => Error::OutOfMemory,
            Error::OutOfBounds => Error::OutOfBounds,
            Error::UseAfterFree => Error::UseAfterFree,
            Error::Stalled => Error::Stalled,
            Error::Protocol(m) => Error::Protocol(m.clone()),
            Error::Config(m) => Error::Config(m.clone()),
            Error::ScenarioFailed(m) => Error::ScenarioFailed(m.clone()),
            Error::Io(e) => Error::Io(std::io::Error::new(e.kind(), e.to_string())),
        }
    }

    /// Status byte carried in response frames. Zero means success.
    pub(crate) fn wire_code(&self) -> u8 {
        match self {
            Error::UnknownComponent(_) => 1,
            Error::ChannelClosed => 2,
            Error::Timeout => 3,
            Error::DuplicateIp(_) => 4,
            Error::NoSuchIp(_) => 5,
            Error::AddrInUse => 6,
            Error::ConnRefused => 7,
            Error::NoRoute => 8,
            Error::NotBound => 9,
            Error::NotConnected => 10,
            Error::PeerClosed => 11,
            Error::Interrupted => 12,
            Error::ResourceExhausted => 13,
            Error::OutOfMemory => 14,
            Error::OutOfBounds => 15,
            Error::UseAfterFree => 16,
            Error::BadHandle => 17,
            _ => 255,
        }
    }

    pub(crate) fn from_wire_code(code: u8) -> Error {
        match code {
            1 => Error::Protocol("unknown component at peer".into()),
            2 => Error::ChannelClosed,
            3 => Error::Timeout,
            4 => Error::DuplicateIp(Ipv4Addr::UNSPECIFIED),
            5 => Error::NoSuchIp(Ipv4Addr::UNSPECIFIED),
            6 => Error::AddrInUse,
            7 => Error::ConnRefused,
            8 => Error::NoRoute,
            9 => Error::NotBound,
            10 => Error::NotConnected,
            11 => Error::PeerClosed,
            12 => Error::Interrupted,
            13 => Error::ResourceExhausted,
            14 => Error::OutOfMemory,
            15 => Error::OutOfBounds,
            16 => Error::UseAfterFree,
            17 => Error::BadHandle,
            other => Error::Protocol(format!("peer reported error code {other}")),
        }
    }
}
