//! Rack interconnect: latency/bandwidth-modelled message channels between
//! components, with a virtual clock and per-link frame counters.
//!
//! Delivery time of a frame on one channel direction is
//!
//! ```text
//! depart  = max(now + sender_delay, direction_busy_until)
//! busy    = depart + 8 * payload_len / bandwidth
//! deliver = busy + one_way_latency
//! ```
//!
//! so frames in one direction never overtake each other and every frame
//! observes at least `one_way_latency + 8 * payload_len / bandwidth`.

mod frame;
mod host;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

pub use frame::{ComponentId, Frame, Kind, Op, HEADER_LEN};
use host::HostPipe;

use crate::error::{Error, Result};
use crate::time::{serialization_delay, SimTime};
use crate::topology::{LinkParams, RackTopology, Transport};

/// Handle on a bidirectional link between two components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Channel {
    a: ComponentId,
    b: ComponentId,
    params: LinkParams,
    transport: Transport,
}

impl Channel {
    pub fn endpoints(&self) -> (ComponentId, ComponentId) {
        (self.a, self.b)
    }
    pub fn params(&self) -> LinkParams {
        self.params
    }
    pub fn transport(&self) -> Transport {
        self.transport
    }
    fn connects(&self, x: ComponentId, y: ComponentId) -> bool {
        (self.a == x && self.b == y) || (self.a == y && self.b == x)
    }
}

#[derive(Default)]
struct Direction {
    busy_until: SimTime,
    pipe: Option<HostPipe>,
}

struct ChannelState {
    channel: Channel,
    /// Index 0 carries a -> b, index 1 carries b -> a (a < b).
    dirs: [Direction; 2],
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
struct InFlight {
    at: SimTime,
    seq: u64,
    frame: FrameSlot,
}

// Ordering only looks at (at, seq); seq is unique.
struct FrameSlot(Frame);

impl PartialEq for FrameSlot {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}
impl Eq for FrameSlot {}
impl PartialOrd for FrameSlot {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for FrameSlot {
    fn cmp(&self, _: &Self) -> std::cmp::Ordering {
        std::cmp::Ordering::Equal
    }
}

/// An outstanding request issued with [`Interconnect::begin_call`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingCall {
    pub caller: ComponentId,
    pub correlation_id: u64,
}

/// Frame counters, keyed by directed component pair and by op.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HopCounters {
    pub links: BTreeMap<(ComponentId, ComponentId), u64>,
    pub ops: BTreeMap<(Kind, Kind, Op), u64>,
}

impl HopCounters {
    fn record(&mut self, f: &Frame) {
        *self.links.entry((f.source, f.dest)).or_default() += 1;
        *self
            .ops
            .entry((f.source.kind, f.dest.kind, f.op))
            .or_default() += 1;
    }

    /// Frames sent from any `from`-kind component to any `to`-kind one.
    pub fn directed(&self, from: Kind, to: Kind) -> u64 {
        self.links
            .iter()
            .filter(|((s, d), _)| s.kind == from && d.kind == to)
            .map(|(_, n)| n)
            .sum()
    }

    /// Frames in either direction between the two kinds.
    pub fn between(&self, a: Kind, b: Kind) -> u64 {
        if a == b {
            self.directed(a, a)
        } else {
            self.directed(a, b) + self.directed(b, a)
        }
    }

    pub fn op(&self, from: Kind, to: Kind, op: Op) -> u64 {
        self.ops.get(&(from, to, op)).copied().unwrap_or(0)
    }

    pub fn touching(&self, kind: Kind) -> u64 {
        self.links
            .iter()
            .filter(|((s, d), _)| s.kind == kind || d.kind == kind)
            .map(|(_, n)| n)
            .sum()
    }

    pub fn total(&self) -> u64 {
        self.links.values().sum()
    }

    /// Counters accumulated since `earlier` was taken.
    pub fn since(&self, earlier: &HopCounters) -> HopCounters {
        let mut out = HopCounters::default();
        for (k, v) in &self.links {
            let d = v - earlier.links.get(k).copied().unwrap_or(0);
            if d > 0 {
                out.links.insert(*k, d);
            }
        }
        for (k, v) in &self.ops {
            let d = v - earlier.ops.get(k).copied().unwrap_or(0);
            if d > 0 {
                out.ops.insert(*k, d);
            }
        }
        out
    }

    /// Sum of two sets of counters.
    pub fn plus(&self, other: &HopCounters) -> HopCounters {
        let mut out = self.clone();
        for (k, v) in &other.links {
            *out.links.entry(*k).or_default() += v;
        }
        for (k, v) in &other.ops {
            *out.ops.entry(*k).or_default() += v;
        }
        out
    }

    /// Resolves a label: `"P0->M0"`, `"P->M"`, or `"P->M:M_WRITE"`.
    pub fn lookup(&self, label: &str) -> Result<u64> {
        let (link, op) = match label.split_once(':') {
            Some((l, o)) => (l, Some(o.trim())),
            None => (label, None),
        };
        let (from, to) = link
            .split_once("->")
            .ok_or_else(|| Error::Config(format!("hop label {label:?} is not of the form A->B")))?;
        let (from, to) = (from.trim(), to.trim());
        let kind_of = |s: &str| -> Option<Kind> {
            Some(match s {
                "P" => Kind::P,
                "M" => Kind::M,
                "N" => Kind::N,
                "G" | "GNM" => Kind::Gnm,
                "X" => Kind::External,
                _ => return None,
            })
        };
        match (kind_of(from), kind_of(to), op) {
            (Some(a), Some(b), None) => Ok(self.directed(a, b)),
            (Some(a), Some(b), Some(op)) => {
                let op = Op::ALL
                    .iter()
                    .copied()
                    .find(|o| o.name() == op)
                    .ok_or_else(|| Error::Config(format!("unknown op {op:?} in hop label")))?;
                Ok(self.op(a, b, op))
            }
            (_, _, None) => {
                let a: ComponentId = from.parse()?;
                let b: ComponentId = to.parse()?;
                Ok(self.links.get(&(a, b)).copied().unwrap_or(0))
            }
            _ => Err(Error::Config(format!(
                "op-qualified hop labels take kinds, got {label:?}"
            ))),
        }
    }
}

pub struct Interconnect {
    transport: Transport,
    instrumentation: bool,
    default_link: LinkParams,
    overrides: Vec<(ComponentId, ComponentId, LinkParams)>,
    components: BTreeSet<ComponentId>,
    closed: BTreeSet<ComponentId>,
    channels: BTreeMap<(ComponentId, ComponentId), ChannelState>,
    in_flight: BinaryHeap<Reverse<InFlight>>,
    seq: u64,
    now: SimTime,
    epoch: SimTime,
    hops: HopCounters,
    stash: BTreeMap<(ComponentId, u64), Frame>,
    next_corr: u64,
}

impl Interconnect {
    pub fn new(topo: &RackTopology) -> Interconnect {
        Interconnect {
            transport: topo.transport,
            instrumentation: topo.instrumentation,
            default_link: topo.link,
            overrides: topo
                .overrides
                .iter()
                .map(|o| (o.a, o.b, o.params))
                .collect(),
            components: topo.components().into_iter().collect(),
            closed: BTreeSet::new(),
            channels: BTreeMap::new(),
            in_flight: BinaryHeap::new(),
            seq: 0,
            now: SimTime::ZERO,
            epoch: SimTime::ZERO,
            hops: HopCounters::default(),
            stash: BTreeMap::new(),
            next_corr: 1,
        }
    }

    /// Makes an extra endpoint (for instance a test harness) reachable.
    pub fn add_component(&mut self, id: ComponentId) {
        self.components.insert(id);
    }

    pub fn transport(&self) -> Transport {
        self.transport
    }

    pub fn open_channel(&mut self, a: ComponentId, b: ComponentId) -> Result<Channel> {
        for id in [a, b] {
            if !self.components.contains(&id) {
                return Err(Error::UnknownComponent(id));
            }
        }
        if a == b {
            return Err(Error::InvalidPair(a, b));
        }
        if self.closed.contains(&a) || self.closed.contains(&b) {
            return Err(Error::ChannelClosed);
        }
        let key = if a < b { (a, b) } else { (b, a) };
        if let Some(state) = self.channels.get(&key) {
            return Ok(state.channel);
        }
        let params = self
            .overrides
            .iter()
            .find(|(x, y, _)| (*x == a && *y == b) || (*x == b && *y == a))
            .map(|(_, _, p)| *p)
            .unwrap_or(self.default_link);
        let channel = Channel {
            a: key.0,
            b: key.1,
            params,
            transport: self.transport,
        };
        let mut dirs: [Direction; 2] = Default::default();
        if self.transport == Transport::HostSocket {
            for d in &mut dirs {
                d.pipe = Some(HostPipe::new()?);
            }
        }
        self.channels.insert(key, ChannelState { channel, dirs });
        Ok(channel)
    }

    pub fn send_frame(&mut self, ch: &Channel, f: Frame) -> Result<SimTime> {
        self.send_frame_after(ch, f, SimTime::ZERO)
    }

    /// Sends `f` once the sender has spent `delay` preparing it.
    pub fn send_frame_after(&mut self, ch: &Channel, f: Frame, delay: SimTime) -> Result<SimTime> {
        if !ch.connects(f.source, f.dest) {
            return Err(Error::InvalidPair(f.source, f.dest));
        }
        if self.closed.contains(&f.source) || self.closed.contains(&f.dest) {
            return Err(Error::ChannelClosed);
        }
        let key = (ch.a, ch.b);
        let state = self.channels.get_mut(&key).ok_or(Error::ChannelClosed)?;
        let dir = &mut state.dirs[if f.source == ch.a { 0 } else { 1 }];
        let params = state.channel.params;
        let depart = (self.now + delay).max(dir.busy_until);
        dir.busy_until = depart + serialization_delay(f.payload_len(), params.bandwidth_bps);
        let at = dir.busy_until + params.one_way_latency;
        if let Some(pipe) = &dir.pipe {
            pipe.push(&f);
        }
        self.hops.record(&f);
        self.seq += 1;
        self.in_flight.push(Reverse(InFlight {
            at,
            seq: self.seq,
            frame: FrameSlot(f),
        }));
        Ok(at)
    }

    /// Sends over the channel joining the frame's endpoints, opening it if needed.
    pub fn route(&mut self, f: Frame, delay: SimTime) -> Result<SimTime> {
        let ch = self.open_channel(f.source, f.dest)?;
        self.send_frame_after(&ch, f, delay)
    }

    pub fn next_delivery_time(&self) -> Option<SimTime> {
        self.in_flight.peek().map(|Reverse(f)| f.at)
    }

    /// Advances the clock to the next delivery and returns the frame.
    /// Frames addressed to a closed component are dropped.
    pub fn pop_delivery(&mut self) -> Option<Frame> {
        loop {
            let Reverse(InFlight {
                at,
                frame: FrameSlot(frame),
                ..
            }) = self.in_flight.pop()?;
            self.now = self.now.max(at);
            let frame = match self.pull_from_pipe(&frame) {
                Some(Ok(wire)) => wire,
                Some(Err(_)) | None => frame,
            };
            if self.closed.contains(&frame.dest) {
                continue;
            }
            return Some(frame);
        }
    }

    fn pull_from_pipe(&mut self, f: &Frame) -> Option<Result<Frame>> {
        let key = if f.source < f.dest {
            (f.source, f.dest)
        } else {
            (f.dest, f.source)
        };
        let state = self.channels.get_mut(&key)?;
        let idx = if f.source == state.channel.a { 0 } else { 1 };
        let pipe = state.dirs[idx].pipe.as_mut()?;
        let wire = pipe.pull();
        if let Ok(w) = &wire {
            debug_assert_eq!(w, f, "frame changed crossing the host pipe");
        }
        Some(wire)
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn advance_to(&mut self, t: SimTime) {
        self.now = self.now.max(t);
    }

    /// Microseconds of virtual time since the last instrumentation reset.
    pub fn elapsed_virtual_time(&self) -> Result<f64> {
        if !self.instrumentation {
            return Err(Error::InstrumentationDisabled);
        }
        Ok((self.now - self.epoch).as_micros_f64())
    }

    pub fn hop_count(&self, label: &str) -> Result<u64> {
        if !self.instrumentation {
            return Err(Error::InstrumentationDisabled);
        }
        self.hops.lookup(label)
    }

    pub fn hops(&self) -> &HopCounters {
        &self.hops
    }

    pub fn reset_instrumentation(&mut self) {
        self.hops = HopCounters::default();
        self.epoch = self.now;
    }

    /// Tears down every channel touching `id`; later sends fail with
    /// `ChannelClosed` and frames still in flight towards it are dropped.
    pub fn close_component(&mut self, id: ComponentId) {
        self.closed.insert(id);
        self.channels.retain(|(a, b), _| *a != id && *b != id);
    }

    pub fn is_closed(&self, id: ComponentId) -> bool {
        self.closed.contains(&id)
    }

    pub fn next_correlation_id(&mut self) -> u64 {
        let id = self.next_corr;
        self.next_corr += 1;
        id
    }

    /// Sends a request without waiting for its answer.
    pub fn begin_call(&mut self, ch: &Channel, request: Frame) -> Result<PendingCall> {
        if request.response {
            return Err(Error::Protocol(format!(
                "{} is a response, not a request",
                request.op
            )));
        }
        let call = PendingCall {
            caller: request.source,
            correlation_id: request.correlation_id,
        };
        self.send_frame(ch, request)?;
        Ok(call)
    }

    /// Runs the clock until the response to `call` arrives. Every other
    /// delivered frame is handed to `responder`, whose output is sent back
    /// into the interconnect.
    pub fn wait_call(
        &mut self,
        call: PendingCall,
        timeout: SimTime,
        responder: &mut dyn FnMut(Frame) -> Vec<Frame>,
    ) -> Result<Frame> {
        let deadline = self.now + timeout;
        loop {
            if let Some(f) = self.stash.remove(&(call.caller, call.correlation_id)) {
                return Ok(f);
            }
            match self.next_delivery_time() {
                Some(t) if t <= deadline => {}
                _ => {
                    self.advance_to(deadline);
                    return Err(Error::Timeout);
                }
            }
            let Some(f) = self.pop_delivery() else {
                continue;
            };
            if f.response && self.stash_owner(&f) {
                self.stash.insert((f.dest, f.correlation_id), f);
                continue;
            }
            for reply in responder(f) {
                self.route(reply, SimTime::ZERO)?;
            }
        }
    }

    fn stash_owner(&self, f: &Frame) -> bool {
        // Responses are kept for whoever is (or will be) waiting on them.
        self.components.contains(&f.dest)
    }

    pub fn rpc_call(
        &mut self,
        ch: &Channel,
        request: Frame,
        timeout: SimTime,
        responder: &mut dyn FnMut(Frame) -> Vec<Frame>,
    ) -> Result<Frame> {
        if self.closed.contains(&request.dest) {
            return Err(Error::ChannelClosed);
        }
        let call = self.begin_call(ch, request)?;
        self.wait_call(call, timeout, responder)
    }
}
