//! The rack driver: owns every component, the interconnect and the external
//! network, and runs them as one discrete-event simulation.
//!
//! Three event sources feed the loop: pComponent timers, interconnect frame
//! deliveries and network events. The earliest one runs next; at equal times
//! timers go first, then frames, then the network. Under the host-socket
//! transport the same loop is paced by the wall clock.

use std::any::Any;
use std::collections::BTreeMap;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::time::Duration;

use crate::error::{Error, Result};
use crate::gnm::GnmService;
use crate::interconnect::{ComponentId, Frame, HopCounters, Interconnect, Kind};
use crate::mcomponent::MComponent;
use crate::ncomponent::NComponent;
use crate::net::{AppId, HostNet, NetApp, NetEvent, NetStack, Owner, SimNet};
use crate::pcomponent::{
    AppBuffer, Done, PComponent, PcTimer, RouteKind, SockState, SocketHandle, TransferMode,
};
use crate::sched::{Outbox, Ticket};
use crate::time::SimTime;
use crate::topology::{RackTopology, Transport};

const DEFAULT_SEGMENT: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Timer,
    Frame,
    Net,
}

pub struct Rack {
    topo: RackTopology,
    ic: Interconnect,
    gnm: GnmService,
    mcs: Vec<MComponent>,
    ncs: Vec<NComponent>,
    pcs: Vec<PComponent>,
    net: Box<dyn NetStack>,
    apps: Vec<Option<Box<dyn NetApp>>>,
    timers: BTreeMap<(SimTime, u64), (u16, PcTimer)>,
    seq: u64,
}

impl Rack {
    /// Builds the rack and lets every nComponent register with the GNM.
    /// Instrumentation starts from zero once that is done.
    pub fn new(topo: RackTopology) -> Result<Rack> {
        topo.validate()?;
        let ic = Interconnect::new(&topo);
        let mut net: Box<dyn NetStack> = match topo.transport {
            Transport::InProcess => Box::new(SimNet::new(topo.external.clone())),
            Transport::HostSocket => {
                let mut h = HostNet::new();
                for nic in topo.ncomponents.iter().flat_map(|n| &n.nics) {
                    h.map_host(nic.ip, nic.host_ip);
                }
                Box::new(h)
            }
        };
        for nic in topo.ncomponents.iter().flat_map(|n| &n.nics) {
            net.add_host(nic.ip);
        }
        let pc_ids: Vec<ComponentId> = (0..topo.pcomponents.len())
            .map(|i| ComponentId::p(i as u16))
            .collect();
        let m_ids: Vec<ComponentId> = (0..topo.mcomponents.len())
            .map(|i| ComponentId::m(i as u16))
            .collect();
        let segment = topo
            .ncomponents
            .iter()
            .map(|n| n.socket_budget_bytes)
            .min()
            .unwrap_or(DEFAULT_SEGMENT);
        let mcs = topo
            .mcomponents
            .iter()
            .zip(&m_ids)
            .map(|(s, id)| MComponent::new(*id, s.capacity_bytes))
            .collect();
        let ncs = topo
            .ncomponents
            .iter()
            .enumerate()
            .map(|(i, s)| NComponent::new(ComponentId::n(i as u16), s.clone(), topo.cost.clone()))
            .collect();
        let pcs = topo
            .pcomponents
            .iter()
            .zip(&pc_ids)
            .map(|(s, id)| {
                PComponent::new(
                    *id,
                    s.clone(),
                    topo.cost.clone(),
                    segment,
                    topo.local_fastpath,
                    m_ids.clone(),
                )
            })
            .collect();
        let mut rack = Rack {
            gnm: GnmService::new(pc_ids),
            topo,
            ic,
            mcs,
            ncs,
            pcs,
            net,
            apps: Vec::new(),
            timers: BTreeMap::new(),
            seq: 0,
        };
        for i in 0..rack.ncs.len() {
            let mut out = Outbox::new();
            rack.ncs[i].start(&mut out);
            rack.flush(out);
        }
        rack.settle()?;
        for nc in &rack.ncs {
            match nc.registration() {
                Some(Ok(())) => {}
                Some(Err(e)) => {
                    return Err(Error::Config(format!("{} failed to register: {e}", nc.id)))
                }
                None => return Err(Error::Config(format!("{} never registered", nc.id))),
            }
        }
        rack.ic.reset_instrumentation();
        Ok(rack)
    }

    pub fn topology(&self) -> &RackTopology {
        &self.topo
    }

    /// Runs until no component has anything left to do.
    fn settle(&mut self) -> Result<()> {
        while self.step()? {}
        Ok(())
    }

    // ----- event loop -----

    fn wall_paced(&self) -> bool {
        self.topo.transport == Transport::HostSocket
    }

    fn next_source(&self) -> Option<(SimTime, Source)> {
        let mut best: Option<(SimTime, Source)> = None;
        let candidates = [
            (self.timers.keys().next().map(|k| k.0), Source::Timer),
            (self.ic.next_delivery_time(), Source::Frame),
            (self.net.next_event_time(), Source::Net),
        ];
        for (t, s) in candidates {
            if let Some(t) = t {
                // strict comparison keeps the earlier-listed source on ties
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, s));
                }
            }
        }
        best
    }

    /// Runs one event. Returns false when nothing is scheduled.
    pub fn step(&mut self) -> Result<bool> {
        if self.wall_paced() {
            self.net.poll();
            let next = self.next_source();
            // read the clock after peeking: ready host events are stamped
            // with the time of the peek
            let wall = self.net.now();
            self.ic.advance_to(wall);
            match next {
                None => return Ok(false),
                Some((t, _)) if t > wall => {
                    let gap =
                        Duration::from_nanos((t - wall).as_nanos()).min(Duration::from_micros(200));
                    std::thread::sleep(gap);
                    return Ok(true);
                }
                Some(_) => {}
            }
        }
        let Some((t, source)) = self.next_source() else {
            return Ok(false);
        };
        match source {
            Source::Timer => {
                let (key, (pc, timer)) = self.timers.pop_first().expect("peeked");
                debug_assert_eq!(key.0, t);
                self.ic.advance_to(t);
                self.net.advance_to(t);
                let mut out = Outbox::new();
                self.pcs[pc as usize].on_timer(timer, &mut out);
                self.flush_pc(pc, out);
            }
            Source::Frame => {
                let Some(f) = self.ic.pop_delivery() else {
                    return Ok(true);
                };
                self.net.advance_to(self.ic.now());
                self.dispatch_frame(f);
            }
            Source::Net => {
                let Some((owner, ev)) = self.net.pop_event() else {
                    return Ok(true);
                };
                self.ic.advance_to(self.net.now());
                self.dispatch_net(owner, ev);
            }
        }
        Ok(true)
    }

    fn dispatch_frame(&mut self, f: Frame) {
        let idx = f.dest.index as usize;
        match f.dest.kind {
            Kind::Gnm => {
                let mut out = Outbox::new();
                self.gnm.on_frame(f, &mut out);
                self.flush(out);
            }
            Kind::M => {
                let mut out = Outbox::new();
                if let Some(m) = self.mcs.get_mut(idx) {
                    m.on_frame(f, &mut out);
                }
                self.flush(out);
            }
            Kind::N => {
                let mut out = Outbox::new();
                if let Some(n) = self.ncs.get_mut(idx) {
                    n.on_frame(f, &mut out, self.net.as_mut());
                }
                self.flush(out);
            }
            Kind::P => {
                let mut out = Outbox::new();
                if let Some(p) = self.pcs.get_mut(idx) {
                    p.on_frame(f, &mut out);
                }
                self.flush_pc(idx as u16, out);
            }
            Kind::External => {}
        }
    }

    fn dispatch_net(&mut self, owner: Owner, ev: NetEvent) {
        match owner {
            Owner::Nc(i) => {
                let mut out = Outbox::new();
                if let Some(n) = self.ncs.get_mut(i as usize) {
                    n.on_net(ev, &mut out, self.net.as_mut());
                }
                self.flush(out);
            }
            Owner::App(id) => {
                let Some(slot) = self.apps.get_mut(id) else {
                    return;
                };
                let Some(mut app) = slot.take() else { return };
                app.on_event(ev, owner, self.net.as_mut());
                self.apps[id] = Some(app);
            }
        }
    }

    /// Routes frames produced by a GNM, mComponent or nComponent step.
    /// Undeliverable frames are dropped; their senders do not wait on them.
    fn flush(&mut self, out: Outbox<()>) {
        for (f, delay) in out.frames {
            let _ = self.ic.route(f, delay);
        }
    }

    /// Routes a pComponent step's frames and arms its timers. A request
    /// that cannot be delivered fails the operation waiting on it.
    fn flush_pc(&mut self, pc: u16, mut out: Outbox<PcTimer>) {
        loop {
            let now = self.ic.now();
            for (delay, t) in out.timers.drain(..) {
                self.seq += 1;
                self.timers.insert((now + delay, self.seq), (pc, t));
            }
            let mut next = Outbox::new();
            for (f, delay) in out.frames.drain(..) {
                let (corr, request) = (f.correlation_id, !f.response);
                if self.ic.route(f, delay).is_err() && request {
                    self.pcs[pc as usize].fail_call(corr, &mut next);
                }
            }
            if next.frames.is_empty() && next.timers.is_empty() {
                return;
            }
            out = next;
        }
    }

    /// Runs the loop until ticket `t` completes.
    pub fn wait(&mut self, t: Ticket) -> Result<Done> {
        let pc = self.pcs.get_mut(t.pc as usize).ok_or(Error::BadHandle)?;
        if let Some(r) = pc.take_done(t) {
            return r;
        }
        let mut idle_since = None;
        loop {
            let progressed = self.step()?;
            if let Some(r) = self.pcs[t.pc as usize].take_done(t) {
                return r;
            }
            if progressed {
                idle_since = None;
            } else if !self.keep_polling(&mut idle_since) {
                return Err(Error::Stalled);
            }
        }
    }

    /// Steps the loop while `keep_going` holds.
    pub fn run_while(&mut self, mut keep_going: impl FnMut(&Rack) -> bool) -> Result<()> {
        let mut idle_since = None;
        while keep_going(self) {
            if self.step()? {
                idle_since = None;
            } else if !self.keep_polling(&mut idle_since) {
                return Err(Error::Stalled);
            }
        }
        Ok(())
    }

    /// With nothing scheduled, host sockets may still deliver something the
    /// loop cannot see coming; wait for them up to the RPC timeout. The
    /// virtual clock has nothing to wait for.
    fn keep_polling(&self, idle_since: &mut Option<std::time::Instant>) -> bool {
        if !self.wall_paced() {
            return false;
        }
        let patience = Duration::from_nanos(self.topo.cost.rpc_timeout.as_nanos());
        if idle_since
            .get_or_insert_with(std::time::Instant::now)
            .elapsed()
            >= patience
        {
            return false;
        }
        std::thread::sleep(Duration::from_micros(50));
        true
    }

    /// Advances the simulation until virtual time `until`, or until nothing
    /// is left to run.
    pub fn run_until(&mut self, until: SimTime) -> Result<()> {
        while let Some((t, _)) = self.next_source() {
            if t > until {
                break;
            }
            self.step()?;
        }
        self.ic.advance_to(until);
        self.net.advance_to(until);
        Ok(())
    }

    // ----- instrumentation -----

    pub fn now(&self) -> SimTime {
        self.ic.now()
    }

    pub fn elapsed_virtual_time(&self) -> Result<f64> {
        self.ic.elapsed_virtual_time()
    }

    pub fn hop_count(&self, label: &str) -> Result<u64> {
        self.ic.hop_count(label)
    }

    pub fn hops(&self) -> &HopCounters {
        self.ic.hops()
    }

    pub fn reset_instrumentation(&mut self) {
        self.ic.reset_instrumentation();
    }

    // ----- components -----

    pub fn pcomponent(&self, i: u16) -> Option<&PComponent> {
        self.pcs.get(i as usize)
    }

    pub fn mcomponent(&self, i: u16) -> Option<&MComponent> {
        self.mcs.get(i as usize)
    }

    pub fn ncomponent(&self, i: u16) -> Option<&NComponent> {
        self.ncs.get(i as usize)
    }

    pub fn gnm(&self) -> &GnmService {
        &self.gnm
    }

    pub fn net(&self) -> &dyn NetStack {
        self.net.as_ref()
    }

    /// Crashes an nComponent: its channels close, the GNM forgets it, and
    /// every stub operation waiting on it fails.
    pub fn fail_ncomponent(&mut self, i: u16) -> Result<()> {
        let id = ComponentId::n(i);
        let nc = self
            .ncs
            .get_mut(i as usize)
            .ok_or(Error::UnknownComponent(id))?;
        nc.fail(self.net.as_mut());
        self.ic.close_component(id);
        let mut out = Outbox::new();
        self.gnm.force_deregister(id, &mut out);
        self.flush(out);
        for p in 0..self.pcs.len() {
            let mut out = Outbox::new();
            self.pcs[p].fail_component(id, &mut out);
            self.flush_pc(p as u16, out);
        }
        Ok(())
    }

    // ----- external hosts and applications -----

    pub fn add_external_host(&mut self, ip: Ipv4Addr) {
        self.net.add_host(ip);
    }

    /// Starts an application on an external host.
    pub fn spawn_app(&mut self, mut app: Box<dyn NetApp>) -> AppId {
        let id = self.apps.len();
        app.on_start(Owner::App(id), self.net.as_mut());
        self.apps.push(Some(app));
        id
    }

    pub fn app<T: NetApp>(&self, id: AppId) -> Option<&T> {
        let app: &dyn Any = self.apps.get(id)?.as_deref()?;
        app.downcast_ref::<T>()
    }

    pub fn app_mut<T: NetApp>(&mut self, id: AppId) -> Option<&mut T> {
        let app: &mut dyn Any = self.apps.get_mut(id)?.as_deref_mut()?;
        app.downcast_mut::<T>()
    }

    /// Lets an application act outside of an event, for instance to start
    /// a new round of work.
    pub fn with_app<T: NetApp, R>(
        &mut self,
        id: AppId,
        f: impl FnOnce(&mut T, Owner, &mut dyn NetStack) -> R,
    ) -> Option<R> {
        let mut app = self.apps.get_mut(id)?.take()?;
        let r = (app.as_mut() as &mut dyn Any)
            .downcast_mut::<T>()
            .map(|a| f(a, Owner::App(id), self.net.as_mut()));
        self.apps[id] = Some(app);
        r
    }

    // ----- sockets -----

    fn pc(&mut self, pc: u16) -> Result<&mut PComponent> {
        self.pcs.get_mut(pc as usize).ok_or(Error::BadHandle)
    }

    /// Runs one pComponent call that produces frames and timers.
    fn on_pc<R>(
        &mut self,
        pc: u16,
        f: impl FnOnce(&mut PComponent, &mut Outbox<PcTimer>) -> R,
    ) -> Result<R> {
        let mut out = Outbox::new();
        let r = f(self.pc(pc)?, &mut out);
        self.flush_pc(pc, out);
        Ok(r)
    }

    pub fn socket(&mut self, pc: u16) -> Result<SocketHandle> {
        self.pc(pc)?.socket()
    }

    pub fn set_mode(&mut self, h: SocketHandle, mode: TransferMode) -> Result<()> {
        self.pc(h.pc)?.set_mode(h.id, mode)
    }

    /// Mode given to sockets created on `pc` from now on.
    pub fn set_default_mode(&mut self, pc: u16, mode: TransferMode) -> Result<()> {
        self.pc(pc)?.default_mode = mode;
        Ok(())
    }

    pub fn state(&self, h: SocketHandle) -> Option<SockState> {
        self.pcs.get(h.pc as usize)?.state(h.id)
    }

    pub fn route(&self, h: SocketHandle) -> Option<RouteKind> {
        Some(self.pcs.get(h.pc as usize)?.stub(h.id)?.route_kind())
    }

    pub fn local_addr(&self, h: SocketHandle) -> Option<SocketAddrV4> {
        self.pcs.get(h.pc as usize)?.stub(h.id)?.local
    }

    pub fn peer_addr(&self, h: SocketHandle) -> Option<SocketAddrV4> {
        self.pcs.get(h.pc as usize)?.stub(h.id)?.peer
    }

    pub fn begin_bind(&mut self, h: SocketHandle, addr: SocketAddrV4) -> Result<Ticket> {
        self.on_pc(h.pc, |p, out| p.begin_bind(h.id, addr, out))
    }

    pub fn begin_listen(&mut self, h: SocketHandle, backlog: u32) -> Result<Ticket> {
        self.on_pc(h.pc, |p, out| p.begin_listen(h.id, backlog, out))
    }

    pub fn begin_accept(&mut self, h: SocketHandle) -> Result<Ticket> {
        self.on_pc(h.pc, |p, _| p.begin_accept(h.id))
    }

    pub fn begin_connect(&mut self, h: SocketHandle, addr: SocketAddrV4) -> Result<Ticket> {
        self.on_pc(h.pc, |p, out| p.begin_connect(h.id, addr, out))
    }

    pub fn begin_send(&mut self, h: SocketHandle, data: Vec<u8>) -> Result<Ticket> {
        self.on_pc(h.pc, |p, out| p.begin_send(h.id, data, out))
    }

    pub fn begin_send_buffer(
        &mut self,
        h: SocketHandle,
        buf: AppBuffer,
        len: usize,
    ) -> Result<Ticket> {
        self.on_pc(h.pc, |p, out| p.begin_send_buffer(h.id, buf, len, out))
    }

    pub fn begin_recv(&mut self, h: SocketHandle, max: usize) -> Result<Ticket> {
        self.on_pc(h.pc, |p, out| p.begin_recv(h.id, max, out))
    }

    pub fn begin_close(&mut self, h: SocketHandle) -> Result<Ticket> {
        self.on_pc(h.pc, |p, out| p.begin_close(h.id, out))
    }

    pub fn bind(&mut self, h: SocketHandle, addr: SocketAddrV4) -> Result<()> {
        let t = self.begin_bind(h, addr)?;
        self.wait(t).map(|_| ())
    }

    pub fn listen(&mut self, h: SocketHandle, backlog: u32) -> Result<()> {
        let t = self.begin_listen(h, backlog)?;
        self.wait(t).map(|_| ())
    }

    pub fn accept(&mut self, h: SocketHandle) -> Result<SocketHandle> {
        let t = self.begin_accept(h)?;
        match self.wait(t)? {
            Done::Socket(s) => Ok(s),
            other => Err(unexpected("accept", other)),
        }
    }

    pub fn connect(&mut self, h: SocketHandle, addr: SocketAddrV4) -> Result<()> {
        let t = self.begin_connect(h, addr)?;
        self.wait(t).map(|_| ())
    }

    pub fn send(&mut self, h: SocketHandle, data: &[u8]) -> Result<usize> {
        let t = self.begin_send(h, data.to_vec())?;
        match self.wait(t)? {
            Done::Sent(n) => Ok(n),
            other => Err(unexpected("send", other)),
        }
    }

    pub fn send_buffer(&mut self, h: SocketHandle, buf: AppBuffer, len: usize) -> Result<usize> {
        let t = self.begin_send_buffer(h, buf, len)?;
        match self.wait(t)? {
            Done::Sent(n) => Ok(n),
            other => Err(unexpected("send_buffer", other)),
        }
    }

    /// Receives up to `max` bytes; an empty result means the peer closed.
    pub fn recv(&mut self, h: SocketHandle, max: usize) -> Result<Vec<u8>> {
        let t = self.begin_recv(h, max)?;
        match self.wait(t)? {
            Done::Data(d) => Ok(d),
            other => Err(unexpected("recv", other)),
        }
    }

    /// Receives exactly `n` bytes unless the peer closes first.
    pub fn recv_exact(&mut self, h: SocketHandle, n: usize) -> Result<Vec<u8>> {
        let mut got = Vec::with_capacity(n);
        while got.len() < n {
            let chunk = self.recv(h, n - got.len())?;
            if chunk.is_empty() {
                break;
            }
            got.extend(chunk);
        }
        Ok(got)
    }

    pub fn close(&mut self, h: SocketHandle) -> Result<()> {
        let t = self.begin_close(h)?;
        self.wait(t).map(|_| ())
    }

    // ----- buffers and the cache -----

    pub fn alloc_buffer(&mut self, pc: u16, len: usize) -> Result<AppBuffer> {
        self.pc(pc)?.alloc_buffer(len)
    }

    pub fn free_buffer(&mut self, buf: AppBuffer) -> Result<()> {
        self.on_pc(buf.pc, |p, out| p.free_buffer(buf, out))?
    }

    pub fn buffer_write(&mut self, buf: AppBuffer, offset: usize, data: &[u8]) -> Result<()> {
        let t = self.on_pc(buf.pc, |p, out| {
            p.begin_buffer_write(buf, offset, data.to_vec(), out)
        })?;
        self.wait(t).map(|_| ())
    }

    pub fn buffer_read(&mut self, buf: AppBuffer, offset: usize, len: usize) -> Result<Vec<u8>> {
        let t = self.on_pc(buf.pc, |p, out| p.begin_buffer_read(buf, offset, len, out))?;
        match self.wait(t)? {
            Done::Data(d) => Ok(d),
            other => Err(unexpected("buffer_read", other)),
        }
    }

    pub fn cache_flush(&mut self, buf: AppBuffer) -> Result<()> {
        let t = self.on_pc(buf.pc, |p, out| p.begin_cache_flush(buf, out))?;
        self.wait(t).map(|_| ())
    }

    pub fn cache_load(&mut self, buf: AppBuffer) -> Result<()> {
        let t = self.on_pc(buf.pc, |p, out| p.begin_cache_load(buf, out))?;
        self.wait(t).map(|_| ())
    }
}

fn unexpected(op: &str, d: Done) -> Error {
    Error::Protocol(format!("{op} completed with {d:?}"))
}
