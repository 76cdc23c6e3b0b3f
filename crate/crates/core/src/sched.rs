//! Plumbing shared by the component monitors and the rack driver.

use crate::interconnect::Frame;
use crate::time::SimTime;

/// Identifies one application-level operation started on a pComponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ticket {
    pub pc: u16,
    pub id: u64,
}

/// Side effects produced by one monitor step. The driver routes the frames
/// into the interconnect and arms the timers.
#[derive(Debug, Default)]
pub(crate) struct Outbox<T> {
    pub(crate) frames: Vec<(Frame, SimTime)>,
    pub(crate) timers: Vec<(SimTime, T)>,
}

impl<T> Outbox<T> {
    pub(crate) fn new() -> Self {
        Outbox {
            frames: Vec::new(),
            timers: Vec::new(),
        }
    }

    pub(crate) fn send(&mut self, f: Frame) {
        self.frames.push((f, SimTime::ZERO));
    }

    /// Sends once the monitor has spent `work` on the request.
    pub(crate) fn send_after(&mut self, f: Frame, work: SimTime) {
        self.frames.push((f, work));
    }

    pub(crate) fn timer(&mut self, delay: SimTime, t: T) {
        self.timers.push((delay, t));
    }
}

/// Per-component correlation id source.
#[derive(Debug, Default)]
pub(crate) struct CorrIds(u64);

impl CorrIds {
    pub(crate) fn next(&mut self) -> u64 {
        self.0 += 1;
        self.0
    }
}
