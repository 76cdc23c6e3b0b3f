use std::collections::{BTreeMap, VecDeque};
use std::net::SocketAddrV4;

use crate::error::{Error, Result};
use crate::gnm::NicDescriptor;
use crate::interconnect::{ComponentId, Op};
use crate::mcomponent::MemRegion;
use crate::net::SockId;
use crate::time::SimTime;
use crate::wire::SocketMeta;

/// Per-socket receive buffer carved out of the board's DRAM.
#[derive(Debug, Clone)]
pub struct DramQueue {
    capacity: usize,
    chunks: VecDeque<Vec<u8>>,
    head: usize,
    len: usize,
    pub total_in: u64,
    pub total_out: u64,
}

impl DramQueue {
    pub fn new(capacity: usize) -> Self {
        DramQueue {
            capacity,
            chunks: VecDeque::new(),
            head: 0,
            len: 0,
            total_in: 0,
            total_out: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn free(&self) -> usize {
        self.capacity - self.len
    }

    pub fn push(&mut self, bytes: Vec<u8>) -> Result<()> {
        if bytes.len() > self.free() {
            return Err(Error::CapacityExceeded {
                requested: bytes.len(),
                capacity: self.free(),
            });
        }
        if bytes.is_empty() {
            return Ok(());
        }
        self.len += bytes.len();
        self.total_in += bytes.len() as u64;
        self.chunks.push_back(bytes);
        Ok(())
    }

    pub fn pop(&mut self, max: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(max.min(self.len));
        while out.len() < max {
            let Some(front) = self.chunks.front() else {
                break;
            };
            let take = (front.len() - self.head).min(max - out.len());
            out.extend_from_slice(&front[self.head..self.head + take]);
            self.head += take;
            if self.head == front.len() {
                self.chunks.pop_front();
                self.head = 0;
            }
        }
        self.len -= out.len();
        self.total_out += out.len() as u64;
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkelState {
    Created,
    Bound,
    Listening,
    Connecting,
    Connected,
}

/// Where a reply to a stub request must go.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ReplyTo {
    pub(crate) op: Op,
    pub(crate) corr: u64,
    pub(crate) to: ComponentId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum RecvTarget {
    Region(MemRegion),
    Direct,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ParkedRecv {
    pub(crate) reply: ReplyTo,
    pub(crate) target: RecvTarget,
    pub(crate) max: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PendingConnect {
    pub(crate) reply: ReplyTo,
    /// Set when the skeleton was created for this connect and must go away
    /// if it fails.
    pub(crate) created: bool,
}

#[derive(Debug)]
pub struct SkeletonSocket {
    pub id: u32,
    /// (pComponent, stub) that drives this skeleton.
    pub owner: (ComponentId, u32),
    pub meta: SocketMeta,
    pub native: Option<SockId>,
    pub dram_rx: DramQueue,
    pub state: SkelState,
    pub bound: Option<SocketAddrV4>,
    pub peer_eof: bool,
    /// Emulated CPU time spent on this socket.
    pub busy: SimTime,
    pub(crate) parked_recv: Option<ParkedRecv>,
    pub(crate) pending_connect: Option<PendingConnect>,
}

/// The Proxy's bookkeeping: live skeletons and the (ip, port) bindings.
#[derive(Debug)]
pub struct ProxyState {
    skeletons: BTreeMap<u32, SkeletonSocket>,
    bindings: BTreeMap<SocketAddrV4, (ComponentId, u32)>,
    pub nics: Vec<NicDescriptor>,
    next_id: u32,
    max_skeletons: usize,
    socket_budget: usize,
    dram_bytes: usize,
}

impl ProxyState {
    pub fn new(
        nics: Vec<NicDescriptor>,
        max_skeletons: usize,
        socket_budget: usize,
        dram_bytes: usize,
    ) -> Self {
        ProxyState {
            skeletons: BTreeMap::new(),
            bindings: BTreeMap::new(),
            nics,
            next_id: 1,
            max_skeletons,
            socket_budget,
            dram_bytes,
        }
    }

    pub fn socket_budget(&self) -> usize {
        self.socket_budget
    }

    pub fn proxy_create_skeleton(
        &mut self,
        meta: SocketMeta,
        owner: (ComponentId, u32),
    ) -> Result<u32> {
        let n = self.skeletons.len();
        if n >= self.max_skeletons || (n + 1) * self.socket_budget > self.dram_bytes {
            return Err(Error::ResourceExhausted);
        }
        let id = self.next_id;
        self.next_id = self.next_id.wrapping_add(1).max(1);
        self.skeletons.insert(
            id,
            SkeletonSocket {
                id,
                owner,
                meta,
                native: None,
                dram_rx: DramQueue::new(self.socket_budget),
                state: SkelState::Created,
                bound: None,
                peer_eof: false,
                busy: SimTime::ZERO,
                parked_recv: None,
                pending_connect: None,
            },
        );
        Ok(id)
    }

    pub fn proxy_resolve_binding(&self, addr: SocketAddrV4) -> Option<(ComponentId, u32)> {
        self.bindings.get(&addr).copied()
    }

    /// Records that `skel` now owns `addr`.
    pub fn record_binding(&mut self, skel: u32, addr: SocketAddrV4) -> Result<()> {
        if self.bindings.contains_key(&addr) {
            return Err(Error::AddrInUse);
        }
        let sk = self.skeletons.get_mut(&skel).ok_or(Error::BadHandle)?;
        if sk.bound.is_some() {
            return Err(Error::InvalidState {
                op: "bind",
                state: "bound",
            });
        }
        sk.bound = Some(addr);
        sk.state = SkelState::Bound;
        sk.meta.local = Some(addr);
        self.bindings.insert(addr, sk.owner);
        Ok(())
    }

    pub fn destroy(&mut self, skel: u32) -> Option<SkeletonSocket> {
        let sk = self.skeletons.remove(&skel)?;
        if let Some(addr) = sk.bound {
            self.bindings.remove(&addr);
        }
        Some(sk)
    }

    pub fn get(&self, skel: u32) -> Option<&SkeletonSocket> {
        self.skeletons.get(&skel)
    }

    pub fn get_mut(&mut self, skel: u32) -> Option<&mut SkeletonSocket> {
        self.skeletons.get_mut(&skel)
    }

    pub fn skeletons(&self) -> impl Iterator<Item = &SkeletonSocket> {
        self.skeletons.values()
    }

    pub fn skeleton_count(&self) -> usize {
        self.skeletons.len()
    }

    pub fn binding_count(&self) -> usize {
        self.bindings.len()
    }

    /// Checks that bindings and bound skeletons correspond one to one.
    pub fn check_consistency(&self) -> std::result::Result<(), String> {
        let mut bound = 0;
        for sk in self.skeletons.values() {
            if let Some(addr) = sk.bound {
                bound += 1;
                match self.bindings.get(&addr) {
                    Some(owner) if *owner == sk.owner => {}
                    other => {
                        return Err(format!(
                            "skeleton {} bound to {addr} but binding is {other:?}",
                            sk.id
                        ))
                    }
                }
            }
        }
        if bound != self.bindings.len() {
            return Err(format!(
                "{} bindings for {bound} bound skeletons",
                self.bindings.len()
            ));
        }
        Ok(())
    }
}
