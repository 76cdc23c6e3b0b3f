//! The compute board. Applications hold stub sockets here; every stub
//! operation turns into frames to the GNM, an nComponent skeleton, an
//! mComponent or a peer pComponent.
//!
//! Operations are asynchronous: each `begin_*` call returns a [`Ticket`]
//! whose outcome appears in the completion table once the frames it
//! depends on have been answered. The rack driver runs the event loop.

mod cache;
mod stub;

use std::collections::{BTreeMap, VecDeque};
use std::net::SocketAddrV4;

pub use cache::{CacheStats, Evicted, ExCache};
pub use stub::{AppBuffer, Route, RouteKind, SockState, SocketHandle, StubSocket, TransferMode};
use stub::{RecvOp, SendOp, SendSrc};

use crate::error::{Error, Result};
use crate::gnm::{pick_least_loaded, GnmView};
use crate::interconnect::{ComponentId, Frame};
use crate::mcomponent::MemRegion;
use crate::sched::{CorrIds, Outbox, Ticket};
use crate::topology::{CostModel, PcSpec};
use crate::wire::{self, Msg, Reader, SocketMeta, Writer};

/// Outcome of a completed ticket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Done {
    Unit,
    Socket(SocketHandle),
    Sent(usize),
    Data(Vec<u8>),
}

/// Work the pComponent schedules for itself.
#[derive(Debug, Clone)]
pub(crate) enum PcTimer {
    PipeDeliver { to: u32, data: Vec<u8> },
    PipeClose { to: u32 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PcStats {
    pub dma_segments: u64,
    pub ddio_segments: u64,
    pub pipe_bytes: u64,
    pub fit_bytes: u64,
    pub writebacks: u64,
}

#[derive(Debug)]
enum RegionState {
    None,
    /// `M_ALLOC` in flight; steps run in arrival order once it lands.
    Pending(VecDeque<Step>),
    Ready(MemRegion),
}

#[derive(Debug)]
struct BufInfo {
    len: usize,
    region: RegionState,
    m: ComponentId,
    /// Freed while its allocation was in flight.
    freed: bool,
}

/// Work that needs the buffer's region to exist.
#[derive(Debug)]
enum Step {
    Write { data: Vec<u8>, after: After },
    Read { len: usize, after: After },
    RecvReq { stub: u32, max: usize },
    Then(After),
}

/// What to do once a memory operation has finished.
#[derive(Debug)]
enum After {
    Nothing,
    Ticket(Ticket),
    Notify { stub: u32, vaddr: u64, len: usize },
    RecvInstall { stub: u32 },
    Load { vaddr: u64, then: LoadThen },
}

#[derive(Debug)]
enum LoadThen {
    Unit(Ticket),
    Read {
        ticket: Ticket,
        offset: usize,
        len: usize,
    },
    Write {
        ticket: Ticket,
        offset: usize,
        data: Vec<u8>,
    },
    Send {
        stub: u32,
    },
}

/// A request awaiting its response.
#[derive(Debug)]
enum Cont {
    Ignore,
    BindLookup {
        stub: u32,
        ticket: Ticket,
        addr: SocketAddrV4,
        wildcard: bool,
    },
    BindCreate {
        stub: u32,
        ticket: Ticket,
        nc: ComponentId,
        addr: SocketAddrV4,
    },
    BindSkel {
        stub: u32,
        ticket: Ticket,
        nc: ComponentId,
        skel: u32,
    },
    Listen {
        stub: u32,
        ticket: Ticket,
    },
    Connect {
        stub: u32,
        ticket: Ticket,
        nc: ComponentId,
        created: bool,
        addr: SocketAddrV4,
    },
    Resolve {
        stub: u32,
        ticket: Ticket,
        addr: SocketAddrV4,
    },
    FitConnect {
        stub: u32,
        ticket: Ticket,
        pc: ComponentId,
        addr: SocketAddrV4,
    },
    /// The stub went away before its wildcard NIC was handed out.
    OrphanNic,
    /// The stub went away before its skeleton was created.
    OrphanSkel {
        nc: ComponentId,
    },
    /// The stub went away before the remote FIT peer was created.
    OrphanFit {
        pc: ComponentId,
    },
    Alloc {
        vaddr: u64,
    },
    Write {
        after: After,
    },
    Read {
        after: After,
    },
    Notify {
        stub: u32,
        len: usize,
    },
    Inline {
        stub: u32,
        len: usize,
    },
    Recv {
        stub: u32,
    },
    RecvDirect {
        stub: u32,
    },
    Close {
        ticket: Ticket,
    },
}

const VADDR_BASE: u64 = 0x1000_0000;
const PAGE: u64 = 4096;

pub struct PComponent {
    pub id: ComponentId,
    spec: PcSpec,
    cost: CostModel,
    /// Largest payload moved per segment, and the credit window.
    segment: usize,
    local_fastpath: bool,
    mcs: Vec<ComponentId>,
    next_m: usize,
    stubs: BTreeMap<u32, StubSocket>,
    conts: BTreeMap<u64, (ComponentId, Cont)>,
    corr: CorrIds,
    next_ticket: u64,
    done: BTreeMap<u64, Result<Done>>,
    buffers: BTreeMap<u64, BufInfo>,
    next_vaddr: u64,
    pub cache: ExCache,
    pub view: GnmView,
    routed: BTreeMap<ComponentId, u64>,
    last_pick: Option<ComponentId>,
    pub default_mode: TransferMode,
    pub stats: PcStats,
}

impl PComponent {
    pub fn new(
        id: ComponentId,
        spec: PcSpec,
        cost: CostModel,
        segment: usize,
        local_fastpath: bool,
        mcs: Vec<ComponentId>,
    ) -> Self {
        PComponent {
            id,
            cache: ExCache::new(spec.excache_bytes),
            spec,
            cost,
            segment: segment.max(1),
            local_fastpath,
            mcs,
            next_m: 0,
            stubs: BTreeMap::new(),
            conts: BTreeMap::new(),
            corr: CorrIds::default(),
            next_ticket: 0,
            done: BTreeMap::new(),
            buffers: BTreeMap::new(),
            next_vaddr: VADDR_BASE,
            view: GnmView::default(),
            routed: BTreeMap::new(),
            last_pick: None,
            default_mode: TransferMode::Dma,
            stats: PcStats::default(),
        }
    }

    pub fn segment(&self) -> usize {
        self.segment
    }

    fn handle(&self, id: u32) -> SocketHandle {
        SocketHandle {
            pc: self.id.index,
            id,
        }
    }

    fn ticket(&mut self) -> Ticket {
        self.next_ticket += 1;
        Ticket {
            pc: self.id.index,
            id: self.next_ticket,
        }
    }

    fn finish(&mut self, t: Ticket, r: Result<Done>) {
        self.done.insert(t.id, r);
    }

    /// Starts a ticket that is already decided.
    fn decided(&mut self, r: Result<Done>) -> Ticket {
        let t = self.ticket();
        self.finish(t, r);
        t
    }

    pub(crate) fn take_done(&mut self, t: Ticket) -> Option<Result<Done>> {
        self.done.remove(&t.id)
    }

    pub fn is_done(&self, t: Ticket) -> bool {
        self.done.contains_key(&t.id)
    }

    fn request(&mut self, dest: ComponentId, msg: Msg, cont: Cont, out: &mut Outbox<PcTimer>) {
        let corr = self.corr.next();
        self.conts.insert(corr, (dest, cont));
        out.send(msg.into_frame(corr, self.id, dest));
    }

    /// A message nobody answers, or whose answer does not matter.
    fn push(&mut self, dest: ComponentId, msg: Msg, out: &mut Outbox<PcTimer>) {
        let corr = self.corr.next();
        out.send(msg.into_frame(corr, self.id, dest));
    }

    // ----- stub table -----

    pub fn stub(&self, id: u32) -> Option<&StubSocket> {
        self.stubs.get(&id)
    }

    pub fn stubs(&self) -> impl Iterator<Item = &StubSocket> {
        self.stubs.values()
    }

    pub fn open_stubs(&self) -> usize {
        self.stubs.len()
    }

    fn new_stub(&mut self, mode: TransferMode) -> Result<u32> {
        if self.stubs.len() >= self.spec.max_sockets {
            return Err(Error::ResourceExhausted);
        }
        // lowest free id
        let mut id = 0;
        for &k in self.stubs.keys() {
            if k != id {
                break;
            }
            id += 1;
        }
        self.stubs.insert(id, StubSocket::new(id, mode));
        Ok(id)
    }

    fn stub_mut(&mut self, id: u32) -> Result<&mut StubSocket> {
        self.stubs.get_mut(&id).ok_or(Error::BadHandle)
    }

    pub(crate) fn socket(&mut self) -> Result<SocketHandle> {
        let mode = self.default_mode;
        self.new_stub(mode).map(|id| self.handle(id))
    }

    pub(crate) fn set_mode(&mut self, id: u32, mode: TransferMode) -> Result<()> {
        let st = self.stub_mut(id)?;
        if st.mode_locked && st.mode != mode {
            return Err(Error::InvalidState {
                op: "set_mode",
                state: "data transferred",
            });
        }
        st.mode = mode;
        Ok(())
    }

    // ----- socket operations -----

    pub(crate) fn begin_bind(
        &mut self,
        id: u32,
        addr: SocketAddrV4,
        out: &mut Outbox<PcTimer>,
    ) -> Ticket {
        let st = match self.stub_mut(id) {
            Ok(st) => st,
            Err(e) => return self.decided(Err(e)),
        };
        if st.state != SockState::Created || st.route != Route::None {
            let state = st.state.name();
            return self.decided(Err(Error::InvalidState { op: "bind", state }));
        }
        let t = self.ticket();
        if addr.ip().is_unspecified() {
            self.request(
                ComponentId::GNM,
                Msg::AllocNic,
                Cont::BindLookup {
                    stub: id,
                    ticket: t,
                    addr,
                    wildcard: true,
                },
                out,
            );
        } else {
            let msg = Msg::LookupIp { ip: *addr.ip() };
            self.request(
                ComponentId::GNM,
                msg,
                Cont::BindLookup {
                    stub: id,
                    ticket: t,
                    addr,
                    wildcard: false,
                },
                out,
            );
        }
        t
    }

    pub(crate) fn begin_listen(
        &mut self,
        id: u32,
        backlog: u32,
        out: &mut Outbox<PcTimer>,
    ) -> Ticket {
        let st = match self.stub_mut(id) {
            Ok(st) => st,
            Err(e) => return self.decided(Err(e)),
        };
        let (SockState::Bound, Route::Skel { nc, skel }) = (st.state, st.route) else {
            let state = st.state.name();
            return self.decided(Err(Error::InvalidState {
                op: "listen",
                state,
            }));
        };
        let t = self.ticket();
        self.request(
            nc,
            Msg::SkelListen { skel, backlog },
            Cont::Listen {
                stub: id,
                ticket: t,
            },
            out,
        );
        t
    }

    pub(crate) fn begin_accept(&mut self, id: u32) -> Ticket {
        let t = self.ticket();
        let st = match self.stub_mut(id) {
            Ok(st) => st,
            Err(e) => {
                self.finish(t, Err(e));
                return t;
            }
        };
        if st.state != SockState::Listening {
            let state = st.state.name();
            self.finish(
                t,
                Err(Error::InvalidState {
                    op: "accept",
                    state,
                }),
            );
        } else if let Some(child) = st.backlog.pop_front() {
            let h = self.handle(child);
            self.finish(t, Ok(Done::Socket(h)));
        } else {
            st.accept_q.push_back(t);
        }
        t
    }

    pub(crate) fn begin_connect(
        &mut self,
        id: u32,
        addr: SocketAddrV4,
        out: &mut Outbox<PcTimer>,
    ) -> Ticket {
        let st = match self.stub_mut(id) {
            Ok(st) => st,
            Err(e) => return self.decided(Err(e)),
        };
        let state = st.state;
        let route = st.route;
        let meta = SocketMeta::tcp(st.local);
        match (state, route) {
            (SockState::Created, Route::None) => {
                let local_nc = if self.local_fastpath {
                    self.view.lookup(*addr.ip())
                } else {
                    None
                };
                let t = self.ticket();
                self.stubs.get_mut(&id).expect("checked").state = SockState::Connecting;
                if let Some(nc) = local_nc {
                    self.request(
                        nc,
                        Msg::ProxyResolve { addr },
                        Cont::Resolve {
                            stub: id,
                            ticket: t,
                            addr,
                        },
                        out,
                    );
                    return t;
                }
                let mut load: BTreeMap<ComponentId, u64> = BTreeMap::new();
                for nc in self.view.ncomponents() {
                    load.insert(nc, self.routed.get(&nc).copied().unwrap_or(0));
                }
                let Some(nc) = pick_least_loaded(&load, self.last_pick) else {
                    self.stubs.get_mut(&id).expect("checked").state = SockState::Created;
                    self.finish(t, Err(Error::NoRoute));
                    return t;
                };
                self.last_pick = Some(nc);
                *self.routed.entry(nc).or_insert(0) += 1;
                self.stubs.get_mut(&id).expect("checked").routed_nc = Some(nc);
                let msg = Msg::CreateSkel {
                    stub: id,
                    meta,
                    connect_to: Some(addr),
                };
                self.request(
                    nc,
                    msg,
                    Cont::Connect {
                        stub: id,
                        ticket: t,
                        nc,
                        created: true,
                        addr,
                    },
                    out,
                );
                t
            }
            (SockState::Bound, Route::Skel { nc, skel }) => {
                let t = self.ticket();
                self.stubs.get_mut(&id).expect("checked").state = SockState::Connecting;
                let msg = Msg::SkelConnect { skel, addr };
                self.request(
                    nc,
                    msg,
                    Cont::Connect {
                        stub: id,
                        ticket: t,
                        nc,
                        created: false,
                        addr,
                    },
                    out,
                );
                t
            }
            (s, _) => self.decided(Err(Error::InvalidState {
                op: "connect",
                state: s.name(),
            })),
        }
    }

    pub(crate) fn begin_send(
        &mut self,
        id: u32,
        data: Vec<u8>,
        out: &mut Outbox<PcTimer>,
    ) -> Ticket {
        let total = data.len();
        self.enqueue_send(id, SendSrc::Bytes(data), total, out)
    }

    pub(crate) fn begin_send_buffer(
        &mut self,
        id: u32,
        buf: AppBuffer,
        len: usize,
        out: &mut Outbox<PcTimer>,
    ) -> Ticket {
        if let Err(e) = self.check_buffer(buf, 0, len) {
            return self.decided(Err(e));
        }
        self.enqueue_send(id, SendSrc::Buffer { vaddr: buf.vaddr }, len, out)
    }

    fn enqueue_send(
        &mut self,
        id: u32,
        src: SendSrc,
        total: usize,
        out: &mut Outbox<PcTimer>,
    ) -> Ticket {
        let t = self.ticket();
        let st = match self.stub_mut(id) {
            Ok(st) => st,
            Err(e) => {
                self.finish(t, Err(e));
                return t;
            }
        };
        if st.state != SockState::Connected {
            self.finish(t, Err(Error::NotConnected));
            return t;
        }
        st.mode_locked = true;
        st.send_q.push_back(SendOp {
            ticket: t,
            src,
            total,
            departed: 0,
        });
        self.pump_send(id, out);
        t
    }

    pub(crate) fn begin_recv(&mut self, id: u32, max: usize, out: &mut Outbox<PcTimer>) -> Ticket {
        let t = self.ticket();
        let st = match self.stub_mut(id) {
            Ok(st) => st,
            Err(e) => {
                self.finish(t, Err(e));
                return t;
            }
        };
        if st.state != SockState::Connected {
            self.finish(t, Err(Error::NotConnected));
            return t;
        }
        if max == 0 {
            self.finish(t, Ok(Done::Data(Vec::new())));
            return t;
        }
        st.mode_locked = true;
        st.recv_q.push_back(RecvOp { ticket: t, max });
        self.pump_recv(id, out);
        t
    }

    pub(crate) fn begin_close(&mut self, id: u32, out: &mut Outbox<PcTimer>) -> Ticket {
        let t = self.ticket();
        if !self.stubs.contains_key(&id) {
            self.finish(t, Err(Error::BadHandle));
            return t;
        }
        match self.teardown(id, out) {
            Some((nc, skel)) => {
                self.request(nc, Msg::Close { skel }, Cont::Close { ticket: t }, out)
            }
            None => self.finish(t, Ok(Done::Unit)),
        }
        t
    }

    /// Removes stub `id`, interrupting its waiters and telling its peer.
    /// Returns the skeleton the caller still has to close.
    fn teardown(&mut self, id: u32, out: &mut Outbox<PcTimer>) -> Option<(ComponentId, u32)> {
        let mut st = self.stubs.remove(&id)?;
        st.state = SockState::Closed;
        for op in st.send_q.drain(..) {
            self.done.insert(op.ticket.id, Err(Error::Interrupted));
        }
        for op in st.recv_q.drain(..) {
            self.done.insert(op.ticket.id, Err(Error::Interrupted));
        }
        for t in st.accept_q.drain(..) {
            self.done.insert(t.id, Err(Error::Interrupted));
        }
        self.orphan_conts(id, out);
        for child in std::mem::take(&mut st.backlog) {
            if let Some((nc, skel)) = self.teardown(child, out) {
                self.request(nc, Msg::Close { skel }, Cont::Ignore, out);
            }
        }
        for vaddr in [st.tx_vaddr, st.rx_vaddr].into_iter().flatten() {
            self.release_buffer(vaddr, out);
        }
        if let Some(nc) = st.wildcard_nc {
            self.push(ComponentId::GNM, Msg::NicRelease { nc }, out);
        }
        if let Some(nc) = st.routed_nc {
            if let Some(n) = self.routed.get_mut(&nc) {
                *n = n.saturating_sub(1);
            }
        }
        match st.route {
            Route::Skel { nc, skel } => return Some((nc, skel)),
            Route::Pipe { peer } => {
                out.timer(self.cost.pipe_transfer, PcTimer::PipeClose { to: peer })
            }
            Route::Fit { pc, peer } => self.push(pc, Msg::FitClose { dest: peer }, out),
            Route::None => {}
        }
        None
    }

    /// Detaches in-flight requests of a removed stub so their answers
    /// cannot reach a stub that later reuses the id.
    fn orphan_conts(&mut self, id: u32, out: &mut Outbox<PcTimer>) {
        let mine: Vec<u64> = self
            .conts
            .iter()
            .filter(|(_, (_, c))| cont_stub(c) == Some(id))
            .map(|(k, _)| *k)
            .collect();
        for corr in mine {
            let (dest, cont) = self.conts.remove(&corr).expect("listed above");
            if let Some(t) = cont_ticket(&cont) {
                self.done.insert(t.id, Err(Error::Interrupted));
            }
            let replacement = match cont {
                Cont::BindLookup { wildcard: true, .. } => Cont::OrphanNic,
                Cont::BindCreate { nc, .. }
                | Cont::Connect {
                    nc, created: true, ..
                } => Cont::OrphanSkel { nc },
                Cont::BindSkel { nc, skel, .. } => {
                    self.request(nc, Msg::Close { skel }, Cont::Ignore, out);
                    Cont::Ignore
                }
                Cont::FitConnect { pc, .. } => Cont::OrphanFit { pc },
                _ => Cont::Ignore,
            };
            self.conts.insert(corr, (dest, replacement));
        }
    }

    pub fn state(&self, id: u32) -> Option<SockState> {
        self.stubs.get(&id).map(|s| s.state)
    }

    // ----- buffers -----

    fn pick_m(&mut self) -> ComponentId {
        if self.mcs.is_empty() {
            // No memory board: requests fail at routing time.
            return ComponentId::m(0);
        }
        let m = self.mcs[self.next_m % self.mcs.len()];
        self.next_m += 1;
        m
    }

    fn new_buffer(&mut self, len: usize) -> u64 {
        let vaddr = self.next_vaddr;
        let span = (len as u64).max(1).div_ceil(PAGE) * PAGE;
        self.next_vaddr += span;
        let m = self.pick_m();
        self.buffers.insert(
            vaddr,
            BufInfo {
                len,
                region: RegionState::None,
                m,
                freed: false,
            },
        );
        vaddr
    }

    pub(crate) fn alloc_buffer(&mut self, len: usize) -> Result<AppBuffer> {
        if len == 0 {
            return Err(Error::OutOfBounds);
        }
        let vaddr = self.new_buffer(len);
        Ok(AppBuffer {
            pc: self.id.index,
            vaddr,
            len,
        })
    }

    fn check_buffer(&self, buf: AppBuffer, offset: usize, len: usize) -> Result<()> {
        match self.buffers.get(&buf.vaddr) {
            Some(info) if buf.pc == self.id.index && !info.freed => {
                if offset.checked_add(len).is_none_or(|end| end > info.len) {
                    Err(Error::OutOfBounds)
                } else {
                    Ok(())
                }
            }
            _ => Err(Error::BadHandle),
        }
    }

    fn region_is_none(&self, vaddr: u64) -> bool {
        self.buffers
            .get(&vaddr)
            .is_some_and(|b| matches!(b.region, RegionState::None))
    }

    pub(crate) fn begin_buffer_write(
        &mut self,
        buf: AppBuffer,
        offset: usize,
        data: Vec<u8>,
        out: &mut Outbox<PcTimer>,
    ) -> Ticket {
        if let Err(e) = self.check_buffer(buf, offset, data.len()) {
            return self.decided(Err(e));
        }
        if let Some(cached) = self.cache.get_mut_dirty(buf.vaddr) {
            cached[offset..offset + data.len()].copy_from_slice(&data);
            return self.decided(Ok(Done::Unit));
        }
        if self.region_is_none(buf.vaddr) {
            // never written back, so its contents are all zeros
            let mut full = vec![0u8; buf.len];
            full[offset..offset + data.len()].copy_from_slice(&data);
            self.cache_put(buf.vaddr, full, true, out);
            return self.decided(Ok(Done::Unit));
        }
        let t = self.ticket();
        let then = LoadThen::Write {
            ticket: t,
            offset,
            data,
        };
        self.region_step(
            buf.vaddr,
            Step::Read {
                len: buf.len,
                after: After::Load {
                    vaddr: buf.vaddr,
                    then,
                },
            },
            out,
        );
        t
    }

    pub(crate) fn begin_buffer_read(
        &mut self,
        buf: AppBuffer,
        offset: usize,
        len: usize,
        out: &mut Outbox<PcTimer>,
    ) -> Ticket {
        if let Err(e) = self.check_buffer(buf, offset, len) {
            return self.decided(Err(e));
        }
        if let Some(cached) = self.cache.get(buf.vaddr) {
            let data = cached[offset..offset + len].to_vec();
            return self.decided(Ok(Done::Data(data)));
        }
        if self.region_is_none(buf.vaddr) {
            return self.decided(Ok(Done::Data(vec![0; len])));
        }
        let t = self.ticket();
        let then = LoadThen::Read {
            ticket: t,
            offset,
            len,
        };
        self.region_step(
            buf.vaddr,
            Step::Read {
                len: buf.len,
                after: After::Load {
                    vaddr: buf.vaddr,
                    then,
                },
            },
            out,
        );
        t
    }

    /// Writes the buffer back to its mComponent if the cache holds newer
    /// bytes.
    pub(crate) fn begin_cache_flush(
        &mut self,
        buf: AppBuffer,
        out: &mut Outbox<PcTimer>,
    ) -> Ticket {
        if let Err(e) = self.check_buffer(buf, 0, 0) {
            return self.decided(Err(e));
        }
        if !self.cache.is_dirty(buf.vaddr) {
            return self.decided(Ok(Done::Unit));
        }
        let data = self
            .cache
            .peek(buf.vaddr)
            .expect("dirty implies cached")
            .to_vec();
        self.cache.mark_clean(buf.vaddr);
        let t = self.ticket();
        self.region_step(
            buf.vaddr,
            Step::Write {
                data,
                after: After::Ticket(t),
            },
            out,
        );
        t
    }

    /// Brings the buffer into the cache.
    pub(crate) fn begin_cache_load(&mut self, buf: AppBuffer, out: &mut Outbox<PcTimer>) -> Ticket {
        if let Err(e) = self.check_buffer(buf, 0, 0) {
            return self.decided(Err(e));
        }
        if self.cache.get(buf.vaddr).is_some() {
            return self.decided(Ok(Done::Unit));
        }
        if self.region_is_none(buf.vaddr) {
            self.cache_put(buf.vaddr, vec![0; buf.len], false, out);
            return self.decided(Ok(Done::Unit));
        }
        let t = self.ticket();
        let after = After::Load {
            vaddr: buf.vaddr,
            then: LoadThen::Unit(t),
        };
        self.region_step(
            buf.vaddr,
            Step::Read {
                len: buf.len,
                after,
            },
            out,
        );
        t
    }

    pub(crate) fn free_buffer(&mut self, buf: AppBuffer, out: &mut Outbox<PcTimer>) -> Result<()> {
        self.check_buffer(buf, 0, 0)?;
        self.release_buffer(buf.vaddr, out);
        Ok(())
    }

    pub fn cached(&self, buf: AppBuffer) -> bool {
        self.cache.contains(buf.vaddr)
    }

    pub fn region_of(&self, buf: AppBuffer) -> Option<MemRegion> {
        match self.buffers.get(&buf.vaddr)?.region {
            RegionState::Ready(r) => Some(r),
            _ => None,
        }
    }

    fn release_buffer(&mut self, vaddr: u64, out: &mut Outbox<PcTimer>) {
        self.cache.remove(vaddr);
        let Some(info) = self.buffers.get_mut(&vaddr) else {
            return;
        };
        match &mut info.region {
            RegionState::None => {
                self.buffers.remove(&vaddr);
            }
            RegionState::Pending(steps) => {
                steps.clear();
                info.freed = true;
            }
            RegionState::Ready(r) => {
                let r = *r;
                self.buffers.remove(&vaddr);
                self.request(
                    r.owner,
                    Msg::MFree { address: r.address },
                    Cont::Ignore,
                    out,
                );
            }
        }
    }

    /// Installs bytes in the cache and writes dirty victims back.
    fn cache_put(&mut self, vaddr: u64, data: Vec<u8>, dirty: bool, out: &mut Outbox<PcTimer>) {
        for v in self.cache.put(vaddr, data, dirty) {
            if v.dirty && self.buffers.get(&v.vaddr).is_some_and(|b| !b.freed) {
                self.stats.writebacks += 1;
                self.region_step(
                    v.vaddr,
                    Step::Write {
                        data: v.data,
                        after: After::Nothing,
                    },
                    out,
                );
            }
        }
    }

    /// Runs `step` once the buffer at `vaddr` has a region, allocating it
    /// on first use.
    fn region_step(&mut self, vaddr: u64, step: Step, out: &mut Outbox<PcTimer>) {
        let Some(info) = self.buffers.get_mut(&vaddr) else {
            return self.fail_step(step, Error::UseAfterFree, out);
        };
        match &mut info.region {
            RegionState::Ready(r) => {
                let r = *r;
                self.exec_step(r, step, out);
            }
            RegionState::Pending(q) => q.push_back(step),
            RegionState::None => {
                info.region = RegionState::Pending(VecDeque::from([step]));
                let (m, len) = (info.m, info.len as u64);
                self.request(m, Msg::MAlloc { len }, Cont::Alloc { vaddr }, out);
            }
        }
    }

    fn exec_step(&mut self, r: MemRegion, step: Step, out: &mut Outbox<PcTimer>) {
        match step {
            Step::Write { data, after } => {
                let msg = Msg::MWrite {
                    address: r.address,
                    offset: 0,
                    data,
                };
                self.request(r.owner, msg, Cont::Write { after }, out);
            }
            Step::Read { len, after } => {
                let msg = Msg::MRead {
                    address: r.address,
                    offset: 0,
                    len: len as u64,
                };
                self.request(r.owner, msg, Cont::Read { after }, out);
            }
            Step::RecvReq { stub, max } => match self.stubs.get(&stub).map(|s| s.route) {
                Some(Route::Skel { nc, skel }) => {
                    self.request(
                        nc,
                        Msg::RecvReq {
                            skel,
                            region: r,
                            max: max as u64,
                        },
                        Cont::Recv { stub },
                        out,
                    );
                }
                _ => self.fail_recv_head(stub, Error::NotConnected, out),
            },
            Step::Then(after) => self.run_after(after, Ok(None), out),
        }
    }

    fn fail_step(&mut self, step: Step, e: Error, out: &mut Outbox<PcTimer>) {
        match step {
            Step::Write { after, .. } | Step::Read { after, .. } | Step::Then(after) => {
                self.run_after(after, Err(e), out)
            }
            Step::RecvReq { stub, .. } => self.fail_recv_head(stub, e, out),
        }
    }

    fn run_after(&mut self, after: After, res: Result<Option<Vec<u8>>>, out: &mut Outbox<PcTimer>) {
        match after {
            After::Nothing => {}
            After::Ticket(t) => self.finish(t, res.map(|_| Done::Unit)),
            After::Notify { stub, vaddr, len } => {
                let region = match (res, self.buffers.get(&vaddr).map(|b| &b.region)) {
                    (Ok(_), Some(RegionState::Ready(r))) => r.sub(0, len as u64),
                    (Err(e), _) => Err(e),
                    _ => Err(Error::UseAfterFree),
                };
                let Some(Route::Skel { nc, skel }) = self.stubs.get(&stub).map(|s| s.route) else {
                    return;
                };
                match region {
                    Ok(region) => {
                        self.stats.dma_segments += 1;
                        let msg = Msg::SendNotify {
                            skel,
                            region,
                            len: len as u64,
                        };
                        self.request(nc, msg, Cont::Notify { stub, len }, out);
                    }
                    Err(e) => self.fail_send_head(stub, e, out),
                }
            }
            After::RecvInstall { stub } => match res {
                Ok(data) => {
                    let data = data.unwrap_or_default();
                    let Some(st) = self.stubs.get_mut(&stub) else {
                        return;
                    };
                    st.recv_inflight = false;
                    let rx = st.rx_vaddr;
                    let op = st.recv_q.pop_front();
                    if let Some(rx) = rx {
                        self.cache_put(rx, data.clone(), false, out);
                    }
                    if let Some(op) = op {
                        self.finish(op.ticket, Ok(Done::Data(data)));
                    }
                    self.pump_recv(stub, out);
                }
                Err(e) => self.fail_recv_head(stub, e, out),
            },
            After::Load { vaddr, then } => self.finish_load(vaddr, then, res, out),
        }
    }

    fn finish_load(
        &mut self,
        vaddr: u64,
        then: LoadThen,
        res: Result<Option<Vec<u8>>>,
        out: &mut Outbox<PcTimer>,
    ) {
        let data = match res {
            Ok(d) => d.unwrap_or_default(),
            Err(e) => {
                return match then {
                    LoadThen::Unit(t)
                    | LoadThen::Read { ticket: t, .. }
                    | LoadThen::Write { ticket: t, .. } => self.finish(t, Err(e)),
                    LoadThen::Send { stub } => self.fail_send_head(stub, e, out),
                };
            }
        };
        // A newer dirty copy may have been installed while the load was in
        // flight; it wins.
        let current = match self.cache.peek(vaddr) {
            Some(c) => c.to_vec(),
            None => {
                self.cache_put(vaddr, data.clone(), false, out);
                data
            }
        };
        match then {
            LoadThen::Unit(t) => self.finish(t, Ok(Done::Unit)),
            LoadThen::Read {
                ticket,
                offset,
                len,
            } => self.finish(
                ticket,
                Ok(Done::Data(current[offset..offset + len].to_vec())),
            ),
            LoadThen::Write {
                ticket,
                offset,
                data,
            } => {
                let mut full = current;
                full[offset..offset + data.len()].copy_from_slice(&data);
                self.cache_put(vaddr, full, true, out);
                self.finish(ticket, Ok(Done::Unit));
            }
            LoadThen::Send { stub } => {
                let Some(st) = self.stubs.get_mut(&stub) else {
                    return;
                };
                st.send_busy = false;
                if let Some(op) = st.send_q.front_mut() {
                    op.src = SendSrc::Bytes(current[..op.total].to_vec());
                }
                self.pump_send(stub, out);
            }
        }
    }

    // ----- data movement -----

    fn fail_send_head(&mut self, stub: u32, e: Error, out: &mut Outbox<PcTimer>) {
        let Some(st) = self.stubs.get_mut(&stub) else {
            return;
        };
        st.send_busy = false;
        if let Some(op) = st.send_q.pop_front() {
            self.finish(op.ticket, Err(e));
        }
        self.pump_send(stub, out);
    }

    fn fail_recv_head(&mut self, stub: u32, e: Error, out: &mut Outbox<PcTimer>) {
        let Some(st) = self.stubs.get_mut(&stub) else {
            return;
        };
        st.recv_inflight = false;
        if let Some(op) = st.recv_q.pop_front() {
            self.finish(op.ticket, Err(e));
        }
        self.pump_recv(stub, out);
    }

    /// Moves queued send operations of `id` forward as far as the data path
    /// allows.
    fn pump_send(&mut self, id: u32, out: &mut Outbox<PcTimer>) {
        loop {
            let segment = self.segment;
            let Some(st) = self.stubs.get_mut(&id) else {
                return;
            };
            if st.send_busy {
                return;
            }
            let Some(op) = st.send_q.front() else { return };
            if op.departed == op.total {
                let op = st.send_q.pop_front().expect("front exists");
                self.finish(op.ticket, Ok(Done::Sent(op.total)));
                continue;
            }
            let route = st.route;
            let mode = st.mode;
            match (route, mode) {
                (Route::None, _) => {
                    let op = st.send_q.pop_front().expect("front exists");
                    self.finish(op.ticket, Err(Error::NotConnected));
                }
                (Route::Skel { .. }, TransferMode::Dma) => {
                    self.start_dma_segment(id, out);
                    return;
                }
                _ => {
                    if let SendSrc::Buffer { vaddr } = op.src {
                        if !self.resolve_buffer_source(id, vaddr, out) {
                            return;
                        }
                        continue;
                    }
                    let st = self.stubs.get_mut(&id).expect("present");
                    if st.window == 0 {
                        return;
                    }
                    let op = st.send_q.front_mut().expect("front exists");
                    let SendSrc::Bytes(bytes) = &op.src else {
                        unreachable!("resolved above")
                    };
                    let n = segment.min(op.total - op.departed).min(st.window);
                    let seg = bytes[op.departed..op.departed + n].to_vec();
                    op.departed += n;
                    st.window -= n;
                    self.depart(id, route, seg, out);
                }
            }
        }
    }

    /// Puts one windowed segment on its way.
    fn depart(&mut self, id: u32, route: Route, seg: Vec<u8>, out: &mut Outbox<PcTimer>) {
        let n = seg.len();
        match route {
            Route::Skel { nc, skel } => {
                let tx = self.tx_vaddr(id);
                self.cache_put(tx, seg.clone(), false, out);
                self.stats.ddio_segments += 1;
                self.request(
                    nc,
                    Msg::SendInline { skel, data: seg },
                    Cont::Inline { stub: id, len: n },
                    out,
                );
            }
            Route::Pipe { peer } => {
                self.stats.pipe_bytes += n as u64;
                out.timer(
                    self.cost.pipe_transfer,
                    PcTimer::PipeDeliver {
                        to: peer,
                        data: seg,
                    },
                );
            }
            Route::Fit { pc, peer } => {
                self.stats.fit_bytes += n as u64;
                self.push(
                    pc,
                    Msg::FitData {
                        dest: peer,
                        data: seg,
                    },
                    out,
                );
            }
            Route::None => unreachable!("checked by pump_send"),
        }
    }

    /// Replaces a buffer source by its bytes. Returns false when a load had
    /// to be started first.
    fn resolve_buffer_source(&mut self, id: u32, vaddr: u64, out: &mut Outbox<PcTimer>) -> bool {
        let total = self.stubs[&id]
            .send_q
            .front()
            .expect("caller checked")
            .total;
        let bytes = if let Some(c) = self.cache.get(vaddr) {
            Some(c[..total].to_vec())
        } else if self.region_is_none(vaddr) {
            Some(vec![0; total])
        } else {
            None
        };
        let st = self.stubs.get_mut(&id).expect("present");
        match bytes {
            Some(b) => {
                st.send_q.front_mut().expect("present").src = SendSrc::Bytes(b);
                true
            }
            None => {
                st.send_busy = true;
                let len = self.buffers[&vaddr].len;
                let after = After::Load {
                    vaddr,
                    then: LoadThen::Send { stub: id },
                };
                self.region_step(vaddr, Step::Read { len, after }, out);
                false
            }
        }
    }

    fn tx_vaddr(&mut self, id: u32) -> u64 {
        if let Some(v) = self.stubs[&id].tx_vaddr {
            return v;
        }
        let v = self.new_buffer(self.segment);
        self.stubs.get_mut(&id).expect("present").tx_vaddr = Some(v);
        v
    }

    fn rx_vaddr(&mut self, id: u32) -> u64 {
        if let Some(v) = self.stubs[&id].rx_vaddr {
            return v;
        }
        let v = self.new_buffer(self.segment);
        self.stubs.get_mut(&id).expect("present").rx_vaddr = Some(v);
        v
    }

    /// DMA: make the payload visible in disaggregated memory, then tell the
    /// skeleton where it is.
    fn start_dma_segment(&mut self, id: u32, out: &mut Outbox<PcTimer>) {
        let segment = self.segment;
        let st = self.stubs.get_mut(&id).expect("present");
        st.send_busy = true;
        let op = st.send_q.front().expect("caller checked");
        match &op.src {
            SendSrc::Bytes(bytes) => {
                let n = segment.min(op.total - op.departed);
                let seg = bytes[op.departed..op.departed + n].to_vec();
                let tx = self.tx_vaddr(id);
                // Flushed right away, so the cached copy is clean.
                self.cache_put(tx, seg.clone(), false, out);
                let after = After::Notify {
                    stub: id,
                    vaddr: tx,
                    len: n,
                };
                self.region_step(tx, Step::Write { data: seg, after }, out);
            }
            &SendSrc::Buffer { vaddr } => {
                let len = op.total;
                let after = After::Notify {
                    stub: id,
                    vaddr,
                    len,
                };
                if self.cache.is_dirty(vaddr) {
                    let data = self
                        .cache
                        .peek(vaddr)
                        .expect("dirty implies cached")
                        .to_vec();
                    self.cache.mark_clean(vaddr);
                    self.region_step(vaddr, Step::Write { data, after }, out);
                } else if self.region_is_none(vaddr) && !self.cache.contains(vaddr) {
                    let data = vec![0; self.buffers[&vaddr].len];
                    self.region_step(vaddr, Step::Write { data, after }, out);
                } else {
                    self.region_step(vaddr, Step::Then(after), out);
                }
            }
        }
    }

    fn pump_recv(&mut self, id: u32, out: &mut Outbox<PcTimer>) {
        loop {
            let segment = self.segment;
            let Some(st) = self.stubs.get_mut(&id) else {
                return;
            };
            if st.recv_inflight {
                return;
            }
            let Some(op) = st.recv_q.front().copied() else {
                return;
            };
            match st.route {
                Route::None => {
                    st.recv_q.pop_front();
                    self.finish(op.ticket, Err(Error::NotConnected));
                }
                Route::Skel { nc, skel } => {
                    if st.eof {
                        st.recv_q.pop_front();
                        self.finish(op.ticket, Ok(Done::Data(Vec::new())));
                        continue;
                    }
                    st.recv_inflight = true;
                    let max = op.max.min(segment);
                    match st.mode {
                        TransferMode::Ddio => {
                            self.request(
                                nc,
                                Msg::RecvReqDirect {
                                    skel,
                                    max: max as u64,
                                },
                                Cont::RecvDirect { stub: id },
                                out,
                            );
                        }
                        TransferMode::Dma => {
                            let rx = self.rx_vaddr(id);
                            self.region_step(rx, Step::RecvReq { stub: id, max }, out);
                        }
                    }
                    return;
                }
                route @ (Route::Pipe { .. } | Route::Fit { .. }) => {
                    if st.rx_local.is_empty() {
                        if st.eof {
                            st.recv_q.pop_front();
                            self.finish(op.ticket, Ok(Done::Data(Vec::new())));
                            continue;
                        }
                        return;
                    }
                    let n = op.max.min(st.rx_local.len());
                    let data: Vec<u8> = st.rx_local.drain(..n).collect();
                    st.recv_q.pop_front();
                    self.finish(op.ticket, Ok(Done::Data(data)));
                    self.return_credit(route, n, out);
                }
            }
        }
    }

    /// Gives `n` consumed bytes of window back to the sending stub.
    fn return_credit(&mut self, route: Route, n: usize, out: &mut Outbox<PcTimer>) {
        match route {
            Route::Pipe { peer } => {
                if let Some(p) = self.stubs.get_mut(&peer) {
                    p.window += n;
                    self.pump_send(peer, out);
                }
            }
            Route::Fit { pc, peer } => self.push(
                pc,
                Msg::FitCredit {
                    dest: peer,
                    bytes: n as u64,
                },
                out,
            ),
            _ => {}
        }
    }

    fn deliver_local(&mut self, to: u32, data: &[u8], out: &mut Outbox<PcTimer>) {
        if let Some(st) = self.stubs.get_mut(&to) {
            st.rx_local.extend(data);
            self.pump_recv(to, out);
        }
    }

    fn mark_eof(&mut self, to: u32, out: &mut Outbox<PcTimer>) {
        if let Some(st) = self.stubs.get_mut(&to) {
            st.eof = true;
            self.pump_recv(to, out);
        }
    }

    /// Hands a new connected stub to a listener.
    fn deliver_accept(&mut self, listener: u32, child: u32) {
        let h = self.handle(child);
        let st = self.stubs.get_mut(&listener).expect("caller checked");
        match st.accept_q.pop_front() {
            Some(t) => {
                self.finish(t, Ok(Done::Socket(h)));
            }
            None => st.backlog.push_back(child),
        }
    }

    /// Creates the accepting end of a rack-local connection.
    fn accept_local(&mut self, listener: u32, route: Route) -> Result<u32> {
        let (mode, local) = match self.stubs.get(&listener) {
            Some(l) if l.state == SockState::Listening => (l.mode, l.local),
            _ => return Err(Error::ConnRefused),
        };
        let child = self.new_stub(mode)?;
        let window = self.segment;
        let st = self.stubs.get_mut(&child).expect("just created");
        st.state = SockState::Connected;
        st.route = route;
        st.local = local;
        st.window = window;
        self.deliver_accept(listener, child);
        Ok(child)
    }

    fn connected(&mut self, id: u32, route: Route, peer: SocketAddrV4) {
        let window = self.segment;
        if let Some(st) = self.stubs.get_mut(&id) {
            st.state = SockState::Connected;
            st.route = route;
            st.peer = Some(peer);
            st.window = window;
        }
    }

    // ----- frames and timers -----

    pub(crate) fn on_frame(&mut self, f: Frame, out: &mut Outbox<PcTimer>) {
        if f.response {
            let Some((_, cont)) = self.conts.remove(&f.correlation_id) else {
                return;
            };
            return self.resolve(cont, wire::open_reply(&f.payload), out);
        }
        let msg = match Msg::from_frame(&f) {
            Ok(m) => m,
            Err(e) => return out.send(f.reply(wire::err_body(&e))),
        };
        match msg {
            Msg::Ping(b) => out.send(f.reply(wire::ok_body(Writer::default().bytes(&b)))),
            Msg::GnmSync {
                generation,
                entries,
            } => self.view.apply(generation, &entries),
            Msg::SkelAcceptEvt {
                listener_stub,
                skel,
                peer,
            } => {
                let ok = self.stubs.get(&listener_stub).is_some_and(|l| {
                    l.state == SockState::Listening
                        && matches!(l.route, Route::Skel { nc, .. } if nc == f.source)
                });
                let child = if ok {
                    self.accept_local(listener_stub, Route::Skel { nc: f.source, skel })
                        .ok()
                } else {
                    None
                };
                match child {
                    Some(c) => self.stubs.get_mut(&c).expect("just created").peer = Some(peer),
                    None => self.request(f.source, Msg::Close { skel }, Cont::Ignore, out),
                }
            }
            Msg::FitConnect {
                listener,
                connector,
            } => {
                let body = match self.accept_local(
                    listener,
                    Route::Fit {
                        pc: f.source,
                        peer: connector,
                    },
                ) {
                    Ok(child) => wire::ok_body(Writer::default().u32(child)),
                    Err(e) => wire::err_body(&e),
                };
                out.send(f.reply(body));
            }
            Msg::FitData { dest, data } => self.deliver_local(dest, &data, out),
            Msg::FitCredit { dest, bytes } => {
                if let Some(st) = self.stubs.get_mut(&dest) {
                    st.window += bytes as usize;
                    self.pump_send(dest, out);
                }
            }
            Msg::FitClose { dest } => self.mark_eof(dest, out),
            other => out.send(f.reply(wire::err_body(&Error::Protocol(format!(
                "{} cannot serve {}",
                self.id,
                other.op()
            ))))),
        }
    }

    pub(crate) fn on_timer(&mut self, t: PcTimer, out: &mut Outbox<PcTimer>) {
        match t {
            PcTimer::PipeDeliver { to, data } => self.deliver_local(to, &data, out),
            PcTimer::PipeClose { to } => self.mark_eof(to, out),
        }
    }

    /// The request with this correlation id could not be delivered.
    pub(crate) fn fail_call(&mut self, corr: u64, out: &mut Outbox<PcTimer>) {
        if let Some((_, cont)) = self.conts.remove(&corr) {
            self.resolve(cont, Err(Error::ChannelClosed), out);
        }
    }

    /// Fails every request outstanding at `comp`, which has gone away.
    pub(crate) fn fail_component(&mut self, comp: ComponentId, out: &mut Outbox<PcTimer>) {
        let lost: Vec<u64> = self
            .conts
            .iter()
            .filter(|(_, (d, _))| *d == comp)
            .map(|(k, _)| *k)
            .collect();
        for corr in lost {
            self.fail_call(corr, out);
        }
    }

    fn resolve(&mut self, cont: Cont, reply: Result<Reader<'_>>, out: &mut Outbox<PcTimer>) {
        match cont {
            Cont::Ignore => {}
            Cont::BindLookup {
                stub,
                ticket,
                addr,
                wildcard,
            } => {
                let found = reply.and_then(|mut r| {
                    let nc = r.comp()?;
                    let ip = if wildcard { r.ip()? } else { *addr.ip() };
                    Ok((nc, ip))
                });
                match found {
                    Ok((nc, ip)) => {
                        if wildcard {
                            if let Some(st) = self.stubs.get_mut(&stub) {
                                st.wildcard_nc = Some(nc);
                            }
                        }
                        let addr = SocketAddrV4::new(ip, addr.port());
                        let msg = Msg::CreateSkel {
                            stub,
                            meta: SocketMeta::tcp(None),
                            connect_to: None,
                        };
                        self.request(
                            nc,
                            msg,
                            Cont::BindCreate {
                                stub,
                                ticket,
                                nc,
                                addr,
                            },
                            out,
                        );
                    }
                    Err(e) => self.finish(ticket, Err(e)),
                }
            }
            Cont::BindCreate {
                stub,
                ticket,
                nc,
                addr,
            } => match reply.and_then(|mut r| r.u32()) {
                Ok(skel) => self.request(
                    nc,
                    Msg::SkelBind { skel, addr },
                    Cont::BindSkel {
                        stub,
                        ticket,
                        nc,
                        skel,
                    },
                    out,
                ),
                Err(e) => {
                    self.undo_wildcard(stub, out);
                    self.finish(ticket, Err(e));
                }
            },
            Cont::BindSkel {
                stub,
                ticket,
                nc,
                skel,
            } => match reply.and_then(|mut r| r.addr()) {
                Ok(bound) => {
                    if let Some(st) = self.stubs.get_mut(&stub) {
                        st.state = SockState::Bound;
                        st.local = Some(bound);
                        st.route = Route::Skel { nc, skel };
                    }
                    self.finish(ticket, Ok(Done::Unit));
                }
                Err(e) => {
                    self.request(nc, Msg::Close { skel }, Cont::Ignore, out);
                    self.undo_wildcard(stub, out);
                    self.finish(ticket, Err(e));
                }
            },
            Cont::Listen { stub, ticket } => {
                let r = reply.map(|_| {
                    if let Some(st) = self.stubs.get_mut(&stub) {
                        st.state = SockState::Listening;
                    }
                    Done::Unit
                });
                self.finish(ticket, r);
            }
            Cont::Connect {
                stub,
                ticket,
                nc,
                created,
                addr,
            } => {
                let parsed = reply.and_then(|mut r| {
                    if created {
                        let skel = r.u32()?;
                        r.u8()?;
                        Ok((Some(skel), r.addr()?))
                    } else {
                        Ok((None, r.addr()?))
                    }
                });
                match parsed {
                    Ok((skel, local)) => {
                        let route = match (skel, self.stubs.get(&stub).map(|s| s.route)) {
                            (Some(skel), _) => Route::Skel { nc, skel },
                            (None, Some(r)) => r,
                            (None, None) => Route::None,
                        };
                        self.connected(stub, route, addr);
                        if let Some(st) = self.stubs.get_mut(&stub) {
                            st.local = Some(local);
                        }
                        self.finish(ticket, Ok(Done::Unit));
                    }
                    Err(e) => {
                        if let Some(st) = self.stubs.get_mut(&stub) {
                            if created {
                                st.state = SockState::Created;
                                if let Some(n) = st.routed_nc.take() {
                                    if let Some(c) = self.routed.get_mut(&n) {
                                        *c = c.saturating_sub(1);
                                    }
                                }
                            } else {
                                st.state = SockState::Bound;
                            }
                        }
                        self.finish(ticket, Err(e));
                    }
                }
            }
            Cont::Resolve { stub, ticket, addr } => {
                let target = reply.and_then(|mut r| Ok((r.comp()?, r.u32()?)));
                match target {
                    Ok((pc, listener)) if pc == self.id => {
                        let r = self.accept_local(listener, Route::Pipe { peer: stub });
                        match r {
                            Ok(child) => {
                                self.connected(stub, Route::Pipe { peer: child }, addr);
                                self.finish(ticket, Ok(Done::Unit));
                            }
                            Err(e) => {
                                self.reset_connecting(stub);
                                self.finish(ticket, Err(e));
                            }
                        }
                    }
                    Ok((pc, listener)) => {
                        let msg = Msg::FitConnect {
                            listener,
                            connector: stub,
                        };
                        self.request(
                            pc,
                            msg,
                            Cont::FitConnect {
                                stub,
                                ticket,
                                pc,
                                addr,
                            },
                            out,
                        );
                    }
                    Err(e) => {
                        self.reset_connecting(stub);
                        self.finish(ticket, Err(e));
                    }
                }
            }
            Cont::FitConnect {
                stub,
                ticket,
                pc,
                addr,
            } => match reply.and_then(|mut r| r.u32()) {
                Ok(peer) => {
                    self.connected(stub, Route::Fit { pc, peer }, addr);
                    self.finish(ticket, Ok(Done::Unit));
                }
                Err(e) => {
                    self.reset_connecting(stub);
                    self.finish(ticket, Err(e));
                }
            },
            Cont::OrphanNic => {
                if let Ok(nc) = reply.and_then(|mut r| r.comp()) {
                    self.push(ComponentId::GNM, Msg::NicRelease { nc }, out);
                }
            }
            Cont::OrphanSkel { nc } => {
                if let Ok(skel) = reply.and_then(|mut r| r.u32()) {
                    self.request(nc, Msg::Close { skel }, Cont::Ignore, out);
                }
            }
            Cont::OrphanFit { pc } => {
                if let Ok(peer) = reply.and_then(|mut r| r.u32()) {
                    self.push(pc, Msg::FitClose { dest: peer }, out);
                }
            }
            Cont::Alloc { vaddr } => {
                let region = reply.and_then(|mut r| r.region());
                let Some(info) = self.buffers.get_mut(&vaddr) else {
                    return;
                };
                let steps = match std::mem::replace(&mut info.region, RegionState::None) {
                    RegionState::Pending(q) => q,
                    _ => VecDeque::new(),
                };
                match region {
                    Ok(r) if info.freed => {
                        self.buffers.remove(&vaddr);
                        self.request(
                            r.owner,
                            Msg::MFree { address: r.address },
                            Cont::Ignore,
                            out,
                        );
                    }
                    Ok(r) => {
                        info.region = RegionState::Ready(r);
                        for s in steps {
                            self.exec_step(r, s, out);
                        }
                    }
                    Err(e) => {
                        if info.freed {
                            self.buffers.remove(&vaddr);
                        }
                        for s in steps {
                            self.fail_step(s, e.duplicate(), out);
                        }
                    }
                }
            }
            Cont::Write { after } => self.run_after(after, reply.map(|_| None), out),
            Cont::Read { after } => {
                let data = reply.and_then(|mut r| r.bytes()).map(Some);
                self.run_after(after, data, out);
            }
            Cont::Notify { stub, len } => match reply {
                Ok(_) => {
                    let Some(st) = self.stubs.get_mut(&stub) else {
                        return;
                    };
                    st.send_busy = false;
                    if let Some(op) = st.send_q.front_mut() {
                        op.departed += len;
                    }
                    self.pump_send(stub, out);
                }
                Err(e) => self.fail_send_head(stub, e, out),
            },
            Cont::Inline { stub, len } => {
                let Some(st) = self.stubs.get_mut(&stub) else {
                    return;
                };
                st.window += len;
                match reply {
                    Ok(_) => self.pump_send(stub, out),
                    Err(e) => self.fail_send_head(stub, e, out),
                }
            }
            Cont::Recv { stub } => match reply.and_then(|mut r| r.u64()) {
                Ok(0) => {
                    if let Some(st) = self.stubs.get_mut(&stub) {
                        st.eof = true;
                        st.recv_inflight = false;
                        if let Some(op) = st.recv_q.pop_front() {
                            self.finish(op.ticket, Ok(Done::Data(Vec::new())));
                        }
                        self.pump_recv(stub, out);
                    }
                }
                Ok(len) => {
                    let Some(rx) = self.stubs.get(&stub).and_then(|s| s.rx_vaddr) else {
                        return;
                    };
                    self.region_step(
                        rx,
                        Step::Read {
                            len: len as usize,
                            after: After::RecvInstall { stub },
                        },
                        out,
                    );
                }
                Err(e) => self.fail_recv_head(stub, e, out),
            },
            Cont::RecvDirect { stub } => match reply.and_then(|mut r| r.bytes()) {
                Ok(data) => {
                    if data.is_empty() {
                        if let Some(st) = self.stubs.get_mut(&stub) {
                            st.eof = true;
                        }
                    } else {
                        let rx = self.rx_vaddr(stub);
                        self.cache_put(rx, data.clone(), false, out);
                    }
                    let Some(st) = self.stubs.get_mut(&stub) else {
                        return;
                    };
                    st.recv_inflight = false;
                    if let Some(op) = st.recv_q.pop_front() {
                        self.finish(op.ticket, Ok(Done::Data(data)));
                    }
                    self.pump_recv(stub, out);
                }
                Err(e) => self.fail_recv_head(stub, e, out),
            },
            Cont::Close { ticket } => {
                // The stub is gone whatever the board answers.
                self.finish(ticket, Ok(Done::Unit));
            }
        }
    }

    fn reset_connecting(&mut self, stub: u32) {
        if let Some(st) = self.stubs.get_mut(&stub) {
            st.state = SockState::Created;
        }
    }

    fn undo_wildcard(&mut self, stub: u32, out: &mut Outbox<PcTimer>) {
        if let Some(nc) = self.stubs.get_mut(&stub).and_then(|s| s.wildcard_nc.take()) {
            self.push(ComponentId::GNM, Msg::NicRelease { nc }, out);
        }
    }
}

/// Application operation a continuation completes, if any.
fn cont_ticket(c: &Cont) -> Option<Ticket> {
    match c {
        Cont::BindLookup { ticket, .. }
        | Cont::BindCreate { ticket, .. }
        | Cont::BindSkel { ticket, .. }
        | Cont::Listen { ticket, .. }
        | Cont::Connect { ticket, .. }
        | Cont::Resolve { ticket, .. }
        | Cont::FitConnect { ticket, .. } => Some(*ticket),
        _ => None,
    }
}

/// Stub a continuation belongs to, if any.
fn cont_stub(c: &Cont) -> Option<u32> {
    match c {
        Cont::BindLookup { stub, .. }
        | Cont::BindCreate { stub, .. }
        | Cont::BindSkel { stub, .. }
        | Cont::Listen { stub, .. }
        | Cont::Connect { stub, .. }
        | Cont::Resolve { stub, .. }
        | Cont::FitConnect { stub, .. }
        | Cont::Notify { stub, .. }
        | Cont::Inline { stub, .. }
        | Cont::Recv { stub }
        | Cont::RecvDirect { stub } => Some(*stub),
        Cont::Write { after } | Cont::Read { after } => match after {
            After::Notify { stub, .. } | After::RecvInstall { stub } => Some(*stub),
            After::Load {
                then: LoadThen::Send { stub },
                ..
            } => Some(*stub),
            _ => None,
        },
        _ => None,
    }
}
