use std::collections::BTreeMap;

/// An entry pushed out of the cache. Dirty victims must be written back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Evicted {
    pub vaddr: u64,
    pub data: Vec<u8>,
    pub dirty: bool,
}

#[derive(Debug, Clone)]
struct Entry {
    data: Vec<u8>,
    dirty: bool,
    stamp: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub dirty_evictions: u64,
}

/// The pComponent's small local memory: an LRU over whole buffers keyed by
/// virtual address.
#[derive(Debug, Clone)]
pub struct ExCache {
    capacity: usize,
    used: usize,
    entries: BTreeMap<u64, Entry>,
    lru: BTreeMap<u64, u64>,
    clock: u64,
    pub stats: CacheStats,
}

impl ExCache {
    pub fn new(capacity: usize) -> Self {
        ExCache {
            capacity,
            used: 0,
            entries: BTreeMap::new(),
            lru: BTreeMap::new(),
            clock: 0,
            stats: CacheStats::default(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn used(&self) -> usize {
        self.used
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, vaddr: u64) -> bool {
        self.entries.contains_key(&vaddr)
    }

    pub fn is_dirty(&self, vaddr: u64) -> bool {
        self.entries.get(&vaddr).is_some_and(|e| e.dirty)
    }

    fn touch(&mut self, vaddr: u64) {
        let e = self
            .entries
            .get_mut(&vaddr)
            .expect("touch of a cached entry");
        self.lru.remove(&e.stamp);
        self.clock += 1;
        e.stamp = self.clock;
        self.lru.insert(self.clock, vaddr);
    }

    /// Installs `data` at `vaddr`, replacing any previous entry, and returns
    /// the victims. An entry larger than the whole cache is returned as its
    /// own victim.
    pub fn put(&mut self, vaddr: u64, data: Vec<u8>, dirty: bool) -> Vec<Evicted> {
        let mut victims = Vec::new();
        // new contents supersede the old ones entirely
        self.remove(vaddr);
        if data.len() > self.capacity {
            self.stats.evictions += 1;
            self.stats.dirty_evictions += dirty as u64;
            victims.push(Evicted { vaddr, data, dirty });
            return victims;
        }
        while self.used + data.len() > self.capacity {
            let (&stamp, &victim) = self.lru.iter().next().expect("used > 0 implies an entry");
            self.lru.remove(&stamp);
            let e = self.entries.remove(&victim).expect("lru and entries agree");
            self.used -= e.data.len();
            self.stats.evictions += 1;
            self.stats.dirty_evictions += e.dirty as u64;
            victims.push(Evicted {
                vaddr: victim,
                data: e.data,
                dirty: e.dirty,
            });
        }
        self.clock += 1;
        self.used += data.len();
        self.lru.insert(self.clock, vaddr);
        self.entries.insert(
            vaddr,
            Entry {
                data,
                dirty,
                stamp: self.clock,
            },
        );
        victims
    }

    /// Looks up `vaddr`, refreshing its recency.
    pub fn get(&mut self, vaddr: u64) -> Option<&[u8]> {
        if self.entries.contains_key(&vaddr) {
            self.stats.hits += 1;
            self.touch(vaddr);
            Some(&self.entries[&vaddr].data)
        } else {
            self.stats.misses += 1;
            None
        }
    }

    /// Mutable access for in-place writes; marks the entry dirty.
    pub fn get_mut_dirty(&mut self, vaddr: u64) -> Option<&mut Vec<u8>> {
        if !self.entries.contains_key(&vaddr) {
            self.stats.misses += 1;
            return None;
        }
        self.stats.hits += 1;
        self.touch(vaddr);
        let e = self.entries.get_mut(&vaddr).expect("checked above");
        e.dirty = true;
        Some(&mut e.data)
    }

    /// Reads without affecting recency or statistics.
    pub fn peek(&self, vaddr: u64) -> Option<&[u8]> {
        self.entries.get(&vaddr).map(|e| &e.data[..])
    }

    pub fn mark_clean(&mut self, vaddr: u64) {
        if let Some(e) = self.entries.get_mut(&vaddr) {
            e.dirty = false;
        }
    }

    pub fn remove(&mut self, vaddr: u64) -> Option<Evicted> {
        let e = self.entries.remove(&vaddr)?;
        self.lru.remove(&e.stamp);
        self.used -= e.data.len();
        Some(Evicted {
            vaddr,
            data: e.data,
            dirty: e.dirty,
        })
    }
}
