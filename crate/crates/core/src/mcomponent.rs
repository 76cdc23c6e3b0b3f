//! Memory board: region allocation plus the read/write service used by
//! exCache flushes and loads and by the dDMA engines.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::interconnect::{ComponentId, Frame};
use crate::sched::Outbox;
use crate::wire::{self, Msg, Writer};

/// A byte range on one memory board. Any sub-range of an allocation is
/// itself a valid region for reads and writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MemRegion {
    pub owner: ComponentId,
    pub address: u64,
    pub length: u64,
}

impl MemRegion {
    pub fn end(&self) -> u64 {
        self.address + self.length
    }

    pub fn sub(&self, offset: u64, length: u64) -> Result<MemRegion> {
        if offset.checked_add(length).is_none_or(|e| e > self.length) {
            return Err(Error::OutOfBounds);
        }
        Ok(MemRegion {
            owner: self.owner,
            address: self.address + offset,
            length,
        })
    }
}

#[derive(Debug)]
struct Allocation {
    length: u64,
    /// Written prefix; bytes past it read as zero.
    data: Vec<u8>,
}

/// Sparse backing store with first-fit, address-ordered allocation.
#[derive(Debug)]
pub struct MemBoard {
    id: ComponentId,
    capacity: u64,
    allocated: u64,
    allocs: BTreeMap<u64, Allocation>,
    freed: BTreeSet<u64>,
}

impl MemBoard {
    pub fn new(id: ComponentId, capacity: u64) -> Self {
        MemBoard {
            id,
            capacity,
            allocated: 0,
            allocs: BTreeMap::new(),
            freed: BTreeSet::new(),
        }
    }

    pub fn id(&self) -> ComponentId {
        self.id
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn allocated_bytes(&self) -> u64 {
        self.allocated
    }

    pub fn regions(&self) -> Vec<MemRegion> {
        self.allocs
            .iter()
            .map(|(a, al)| MemRegion {
                owner: self.id,
                address: *a,
                length: al.length,
            })
            .collect()
    }

    pub fn mem_alloc(&mut self, len: u64) -> Result<MemRegion> {
        if len == 0 {
            return Err(Error::OutOfBounds);
        }
        let mut cursor = 0u64;
        let mut found = None;
        for (addr, a) in &self.allocs {
            if addr - cursor >= len {
                found = Some(cursor);
                break;
            }
            cursor = addr + a.length;
        }
        let address = match found {
            Some(a) => a,
            None if self.capacity.saturating_sub(cursor) >= len => cursor,
            None => return Err(Error::OutOfMemory),
        };
        self.allocs.insert(
            address,
            Allocation {
                length: len,
                data: Vec::new(),
            },
        );
        self.freed.remove(&address);
        self.allocated += len;
        Ok(MemRegion {
            owner: self.id,
            address,
            length: len,
        })
    }

    pub fn mem_free(&mut self, r: &MemRegion) -> Result<()> {
        self.check_owner(r)?;
        match self.allocs.remove(&r.address) {
            Some(a) => {
                self.allocated -= a.length;
                self.freed.insert(r.address);
                Ok(())
            }
            None => Err(self.missing(r.address)),
        }
    }

    pub fn mem_write(&mut self, r: &MemRegion, offset: u64, bytes: &[u8]) -> Result<()> {
        self.check_owner(r)?;
        let sub = r.sub(offset, bytes.len() as u64)?;
        self.write_at(sub.address, bytes)
    }

    pub fn mem_read(&self, r: &MemRegion, offset: u64, len: u64) -> Result<Vec<u8>> {
        self.check_owner(r)?;
        let sub = r.sub(offset, len)?;
        self.read_at(sub.address, len)
    }

    pub(crate) fn write_at(&mut self, address: u64, bytes: &[u8]) -> Result<()> {
        let (start, a) = self.containing_mut(address, bytes.len() as u64)?;
        let lo = (address - start) as usize;
        let hi = lo + bytes.len();
        if a.data.len() < hi {
            a.data.resize(hi, 0);
        }
        a.data[lo..hi].copy_from_slice(bytes);
        Ok(())
    }

    pub(crate) fn read_at(&self, address: u64, len: u64) -> Result<Vec<u8>> {
        let (start, a) = self.containing(address, len)?;
        let lo = (address - start) as usize;
        let mut out = vec![0u8; len as usize];
        if lo < a.data.len() {
            let avail = (a.data.len() - lo).min(len as usize);
            out[..avail].copy_from_slice(&a.data[lo..lo + avail]);
        }
        Ok(out)
    }

    fn check_owner(&self, r: &MemRegion) -> Result<()> {
        if r.owner != self.id {
            return Err(Error::UnknownComponent(r.owner));
        }
        Ok(())
    }

    fn missing(&self, address: u64) -> Error {
        if self.freed.contains(&address) {
            Error::UseAfterFree
        } else {
            Error::OutOfBounds
        }
    }

    fn locate(&self, address: u64, len: u64) -> Result<u64> {
        match self.allocs.range(..=address).next_back() {
            Some((start, a))
                if address < start + a.length || (len == 0 && address == start + a.length) =>
            {
                if address + len > start + a.length {
                    Err(Error::OutOfBounds)
                } else {
                    Ok(*start)
                }
            }
            _ => {
                // An access inside a freed allocation is a use-after-free only
                // when it starts at the freed base; anything else is unknown.
                Err(self.missing(address))
            }
        }
    }

    fn containing(&self, address: u64, len: u64) -> Result<(u64, &Allocation)> {
        let start = self.locate(address, len)?;
        Ok((start, &self.allocs[&start]))
    }

    fn containing_mut(&mut self, address: u64, len: u64) -> Result<(u64, &mut Allocation)> {
        let start = self.locate(address, len)?;
        Ok((start, self.allocs.get_mut(&start).expect("located")))
    }
}

/// Counters of served requests, one per op.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MemStats {
    pub allocs: u64,
    pub writes: u64,
    pub reads: u64,
    pub frees: u64,
    pub bytes_written: u64,
    pub bytes_read: u64,
}

/// The memory board's monitor. Requests are served in arrival order.
pub struct MComponent {
    pub board: MemBoard,
    pub stats: MemStats,
}

impl MComponent {
    pub fn new(id: ComponentId, capacity: u64) -> Self {
        MComponent {
            board: MemBoard::new(id, capacity),
            stats: MemStats::default(),
        }
    }

    pub(crate) fn on_frame(&mut self, f: Frame, out: &mut Outbox<()>) {
        if f.response {
            return;
        }
        let result = Msg::from_frame(&f).and_then(|m| self.serve(m));
        out.send(f.reply(result.unwrap_or_else(|e| wire::err_body(&e))));
    }

    fn serve(&mut self, m: Msg) -> Result<Vec<u8>> {
        let id = self.board.id;
        match m {
            Msg::MAlloc { len } => {
                let r = self.board.mem_alloc(len)?;
                self.stats.allocs += 1;
                Ok(wire::ok_body(Writer::default().region(&r)))
            }
            Msg::MWrite {
                address,
                offset,
                data,
            } => {
                self.board.write_at(address + offset, &data)?;
                self.stats.writes += 1;
                self.stats.bytes_written += data.len() as u64;
                Ok(wire::ok_empty())
            }
            Msg::MRead {
                address,
                offset,
                len,
            } => {
                let data = self.board.read_at(address + offset, len)?;
                self.stats.reads += 1;
                self.stats.bytes_read += len;
                Ok(wire::ok_body(Writer::default().bytes(&data)))
            }
            Msg::MFree { address } => {
                let length = self
                    .board
                    .allocs
                    .get(&address)
                    .map(|a| a.length)
                    .unwrap_or(0);
                self.board.mem_free(&MemRegion {
                    owner: id,
                    address,
                    length,
                })?;
                self.stats.frees += 1;
                Ok(wire::ok_empty())
            }
            other => Err(Error::Protocol(format!("{id} cannot serve {}", other.op()))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn board(cap: u64) -> MemBoard {
        MemBoard::new(ComponentId::m(0), cap)
    }

    #[test]
    fn alloc_write_read() {
        let mut b = board(1 << 20);
        let r = b.mem_alloc(4096).unwrap();
        assert_eq!(r.length, 4096);
        b.mem_write(&r, 0, b"hello").unwrap();
        assert_eq!(b.mem_read(&r, 0, 5).unwrap(), b"hello");
        assert_eq!(b.mem_read(&r, 4090, 6).unwrap(), vec![0; 6]);
        assert!(matches!(b.mem_read(&r, 4090, 7), Err(Error::OutOfBounds)));
    }

    #[test]
    fn capacity_and_lifecycle_errors() {
        let mut b = board(1000);
        assert!(matches!(b.mem_alloc(1001), Err(Error::OutOfMemory)));
        let r = b.mem_alloc(1000).unwrap();
        b.mem_free(&r).unwrap();
        assert!(matches!(b.mem_read(&r, 0, 1), Err(Error::UseAfterFree)));
        assert!(matches!(b.mem_free(&r), Err(Error::UseAfterFree)));
        // freed space is reusable and zeroed
        let r2 = b.mem_alloc(10).unwrap();
        assert_eq!(b.mem_read(&r2, 0, 10).unwrap(), vec![0; 10]);
    }

    #[test]
    fn first_fit_reuses_the_lowest_gap() {
        let mut b = board(100);
        let a = b.mem_alloc(10).unwrap();
        let _b2 = b.mem_alloc(10).unwrap();
        let c = b.mem_alloc(30).unwrap();
        b.mem_free(&a).unwrap();
        b.mem_free(&c).unwrap();
        assert_eq!(b.mem_alloc(5).unwrap().address, 0);
        assert_eq!(b.mem_alloc(20).unwrap().address, 20);
    }

    #[derive(Debug, Clone)]
    enum Step {
        Alloc(u64),
        Free(usize),
        Write(usize, u64, Vec<u8>),
        Read(usize, u64, u64),
    }

    fn step() -> impl Strategy<Value = Step> {
        prop_oneof![
            (1u64..300).prop_map(Step::Alloc),
            any::<usize>().prop_map(Step::Free),
            (
                any::<usize>(),
                0u64..300,
                proptest::collection::vec(any::<u8>(), 0..40)
            )
                .prop_map(|(i, o, d)| Step::Write(i, o, d)),
            (any::<usize>(), 0u64..300, 0u64..40).prop_map(|(i, o, l)| Step::Read(i, o, l)),
        ]
    }

    proptest! {
        // Oracle: one flat byte array spanning the whole capacity.
        #[test]
        fn matches_flat_array_and_never_overlaps(steps in proptest::collection::vec(step(), 1..100)) {
            const CAP: u64 = 4096;
            let mut b = board(CAP);
            let mut flat = vec![0u8; CAP as usize];
            let mut live: Vec<MemRegion> = Vec::new();
            for s in steps {
                match s {
                    Step::Alloc(len) => {
                        if let Ok(r) = b.mem_alloc(len) {
                            prop_assert!(r.end() <= CAP);
                            flat[r.address as usize..r.end() as usize].fill(0);
                            live.push(r);
                        }
                    }
                    Step::Free(i) if !live.is_empty() => {
                        let r = live.remove(i % live.len());
                        b.mem_free(&r).unwrap();
                    }
                    Step::Write(i, off, data) if !live.is_empty() => {
                        let r = live[i % live.len()];
                        let ok = off + data.len() as u64 <= r.length;
                        prop_assert_eq!(b.mem_write(&r, off, &data).is_ok(), ok);
                        if ok {
                            let at = (r.address + off) as usize;
                            flat[at..at + data.len()].copy_from_slice(&data);
                        }
                    }
                    Step::Read(i, off, len) if !live.is_empty() => {
                        let r = live[i % live.len()];
                        match b.mem_read(&r, off, len) {
                            Ok(got) => {
                                let at = (r.address + off) as usize;
                                prop_assert_eq!(&got[..], &flat[at..at + len as usize]);
                            }
                            Err(e) => prop_assert!(matches!(e, Error::OutOfBounds) && off + len > r.length),
                        }
                    }
                    _ => {}
                }
                // brute-force pairwise interval check
                for (i, x) in live.iter().enumerate() {
                    for y in &live[i + 1..] {
                        prop_assert!(x.end() <= y.address || y.end() <= x.address);
                    }
                }
                prop_assert_eq!(b.allocated_bytes(), live.iter().map(|r| r.length).sum::<u64>());
            }
        }
    }
}
