//! Global Network Manager: the rack-wide registry of nComponents and the IPs
//! of their NICs.
//!
//! The registry answers IP lookups and hands out nComponents for wildcard
//! binds. pComponents keep a [`GnmView`] replica that the GNM refreshes with a
//! `GNM_SYNC` push after every mutation, so locality tests on the connect path
//! cost no interconnect round trip.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use crate::error::{Error, Result};
use crate::interconnect::{ComponentId, Frame, Kind};
use crate::sched::{CorrIds, Outbox};
use crate::wire::{self, Msg, NicRecord, Writer};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NicDescriptor {
    pub ncomponent: ComponentId,
    pub nic_name: String,
    pub ip: Ipv4Addr,
    pub link_capacity_bps: u64,
}

#[derive(Debug, Clone, Default)]
pub struct GnmRegistry {
    nics: BTreeMap<Ipv4Addr, NicDescriptor>,
    /// Open wildcard-allocated sockets per registered nComponent.
    load: BTreeMap<ComponentId, u64>,
    last_pick: Option<ComponentId>,
    generation: u64,
}

impl GnmRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_ncomponent(&mut self, nc: ComponentId, nics: &[NicDescriptor]) -> Result<()> {
        if nc.kind != Kind::N {
            return Err(Error::UnknownComponent(nc));
        }
        let mut fresh = std::collections::BTreeSet::new();
        for d in nics {
            if self.nics.contains_key(&d.ip) || !fresh.insert(d.ip) {
                return Err(Error::DuplicateIp(d.ip));
            }
        }
        for d in nics {
            self.nics.insert(
                d.ip,
                NicDescriptor {
                    ncomponent: nc,
                    ..d.clone()
                },
            );
        }
        self.load.entry(nc).or_insert(0);
        self.generation += 1;
        Ok(())
    }

    pub fn lookup_ncomponent_by_ip(&self, ip: Ipv4Addr) -> Option<ComponentId> {
        self.nics.get(&ip).map(|d| d.ncomponent)
    }

    pub fn is_rack_local(&self, ip: Ipv4Addr) -> bool {
        self.nics.contains_key(&ip)
    }

    pub fn deregister_ncomponent(&mut self, nc: ComponentId) -> Result<()> {
        if self.load.remove(&nc).is_none() {
            return Err(Error::UnknownComponent(nc));
        }
        self.nics.retain(|_, d| d.ncomponent != nc);
        if self.last_pick == Some(nc) {
            self.last_pick = None;
        }
        self.generation += 1;
        Ok(())
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn nics(&self) -> impl Iterator<Item = &NicDescriptor> {
        self.nics.values()
    }

    pub fn registered(&self) -> impl Iterator<Item = ComponentId> + '_ {
        self.load.keys().copied()
    }

    pub fn load(&self, nc: ComponentId) -> Option<u64> {
        self.load.get(&nc).copied()
    }

    /// Picks the nComponent with the fewest open sockets, rotating among
    /// ties, and charges one socket to it.
    pub fn allocate_nic(&mut self) -> Result<(ComponentId, Ipv4Addr)> {
        let nc = pick_least_loaded(&self.load, self.last_pick).ok_or(Error::ResourceExhausted)?;
        let ip = self
            .nics
            .values()
            .find(|d| d.ncomponent == nc)
            .map(|d| d.ip)
            .ok_or(Error::ResourceExhausted)?;
        *self.load.get_mut(&nc).expect("picked from load map") += 1;
        self.last_pick = Some(nc);
        Ok((nc, ip))
    }

    pub fn release_nic(&mut self, nc: ComponentId) {
        if let Some(n) = self.load.get_mut(&nc) {
            *n = n.saturating_sub(1);
        }
    }

    pub fn snapshot(&self) -> Vec<(Ipv4Addr, ComponentId)> {
        self.nics.values().map(|d| (d.ip, d.ncomponent)).collect()
    }
}

/// Least value wins; among ties the first candidate after `last` (cyclic
/// in key order) wins.
pub(crate) fn pick_least_loaded(
    load: &BTreeMap<ComponentId, u64>,
    last: Option<ComponentId>,
) -> Option<ComponentId> {
    let min = *load.values().min()?;
    let tied: Vec<ComponentId> = load
        .iter()
        .filter(|(_, v)| **v == min)
        .map(|(k, _)| *k)
        .collect();
    let after = last.and_then(|l| tied.iter().copied().find(|c| *c > l));
    Some(after.unwrap_or(tied[0]))
}

/// A pComponent's replica of the registry's IP map.
#[derive(Debug, Clone, Default)]
pub struct GnmView {
    generation: u64,
    map: BTreeMap<Ipv4Addr, ComponentId>,
}

impl GnmView {
    pub fn apply(&mut self, generation: u64, entries: &[(Ipv4Addr, ComponentId)]) {
        if generation < self.generation {
            return;
        }
        self.generation = generation;
        self.map = entries.iter().copied().collect();
    }

    pub fn lookup(&self, ip: Ipv4Addr) -> Option<ComponentId> {
        self.map.get(&ip).copied()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn ncomponents(&self) -> Vec<ComponentId> {
        let mut v: Vec<ComponentId> = self.map.values().copied().collect();
        v.sort();
        v.dedup();
        v
    }

    /// First NIC address of `nc`.
    pub fn ip_of(&self, nc: ComponentId) -> Option<Ipv4Addr> {
        self.map.iter().find(|(_, c)| **c == nc).map(|(ip, _)| *ip)
    }
}

/// The GNM monitor: serves registry requests arriving as frames.
pub struct GnmService {
    registry: GnmRegistry,
    subscribers: Vec<ComponentId>,
    corr: CorrIds,
}

impl GnmService {
    pub fn new(subscribers: Vec<ComponentId>) -> Self {
        GnmService {
            registry: GnmRegistry::new(),
            subscribers,
            corr: CorrIds::default(),
        }
    }

    pub fn registry(&self) -> &GnmRegistry {
        &self.registry
    }

    pub(crate) fn on_frame(&mut self, f: Frame, out: &mut Outbox<()>) {
        if f.response {
            // Sync pushes are one-way; nothing else is requested by the GNM.
            return;
        }
        let msg = match Msg::from_frame(&f) {
            Ok(m) => m,
            Err(e) => return out.send(f.reply(wire::err_body(&e))),
        };
        let mut changed = false;
        let reply = match msg {
            Msg::RegisterNc { nc, nics } => {
                let descs: Vec<NicDescriptor> = nics
                    .into_iter()
                    .map(|n| NicDescriptor {
                        ncomponent: nc,
                        nic_name: n.name,
                        ip: n.ip,
                        link_capacity_bps: n.link_capacity_bps,
                    })
                    .collect();
                changed = true;
                self.registry
                    .register_ncomponent(nc, &descs)
                    .map(|_| wire::ok_empty())
            }
            Msg::LookupIp { ip } => match self.registry.lookup_ncomponent_by_ip(ip) {
                Some(nc) => Ok(wire::ok_body(Writer::default().comp(nc))),
                None => Err(Error::NoSuchIp(ip)),
            },
            Msg::IsLocal { ip } => Ok(wire::ok_body(
                Writer::default().u8(self.registry.is_rack_local(ip) as u8),
            )),
            Msg::DeregisterNc { nc } => {
                changed = true;
                self.registry
                    .deregister_ncomponent(nc)
                    .map(|_| wire::ok_empty())
            }
            Msg::AllocNic => self
                .registry
                .allocate_nic()
                .map(|(nc, ip)| wire::ok_body(Writer::default().comp(nc).ip(ip))),
            Msg::NicRelease { nc } => {
                self.registry.release_nic(nc);
                return;
            }
            other => Err(Error::Protocol(format!("GNM cannot serve {}", other.op()))),
        };
        out.send(f.reply(reply.unwrap_or_else(|e| wire::err_body(&e))));
        if changed {
            self.push_sync(out);
        }
    }

    /// Applies a deregistration decided outside the frame protocol (board
    /// failure) and pushes the new map.
    pub(crate) fn force_deregister(&mut self, nc: ComponentId, out: &mut Outbox<()>) {
        if self.registry.deregister_ncomponent(nc).is_ok() {
            self.push_sync(out);
        }
    }

    fn push_sync(&mut self, out: &mut Outbox<()>) {
        let entries = self.registry.snapshot();
        for &dest in &self.subscribers {
            let msg = Msg::GnmSync {
                generation: self.registry.generation(),
                entries: entries.clone(),
            };
            out.send(msg.into_frame(self.corr.next(), ComponentId::GNM, dest));
        }
    }
}

pub(crate) fn nic_records(nics: &[crate::topology::NicSpec]) -> Vec<NicRecord> {
    nics.iter()
        .map(|n| NicRecord {
            name: n.name.clone(),
            ip: n.ip,
            link_capacity_bps: n.link_capacity_bps,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nic(nc: u16, ip: [u8; 4]) -> NicDescriptor {
        NicDescriptor {
            ncomponent: ComponentId::n(nc),
            nic_name: "eth0".into(),
            ip: Ipv4Addr::from(ip),
            link_capacity_bps: 1_000_000_000,
        }
    }

    #[test]
    fn register_then_lookup() {
        let mut g = GnmRegistry::new();
        g.register_ncomponent(ComponentId::n(0), &[nic(0, [10, 0, 0, 1])])
            .unwrap();
        assert_eq!(
            g.lookup_ncomponent_by_ip(Ipv4Addr::new(10, 0, 0, 1)),
            Some(ComponentId::n(0))
        );
        assert_eq!(g.lookup_ncomponent_by_ip(Ipv4Addr::new(8, 8, 8, 8)), None);
        assert!(!g.is_rack_local(Ipv4Addr::new(8, 8, 8, 8)));
    }

    #[test]
    fn duplicate_ip_reports_the_address() {
        let mut g = GnmRegistry::new();
        g.register_ncomponent(ComponentId::n(0), &[nic(0, [10, 0, 0, 1])])
            .unwrap();
        let err = g
            .register_ncomponent(ComponentId::n(0), &[nic(0, [10, 0, 0, 1])])
            .unwrap_err();
        assert!(matches!(err, Error::DuplicateIp(ip) if ip == Ipv4Addr::new(10, 0, 0, 1)));
        let gen = g.generation();
        // A rejected batch leaves no partial state behind.
        let err = g
            .register_ncomponent(
                ComponentId::n(1),
                &[nic(1, [10, 0, 0, 2]), nic(1, [10, 0, 0, 1])],
            )
            .unwrap_err();
        assert!(matches!(err, Error::DuplicateIp(_)));
        assert_eq!(g.lookup_ncomponent_by_ip(Ipv4Addr::new(10, 0, 0, 2)), None);
        assert_eq!(g.generation(), gen);
    }

    #[test]
    fn two_ncomponents_resolve_distinctly() {
        let mut g = GnmRegistry::new();
        g.register_ncomponent(ComponentId::n(0), &[nic(0, [10, 0, 0, 1])])
            .unwrap();
        g.register_ncomponent(ComponentId::n(1), &[nic(1, [10, 0, 0, 2])])
            .unwrap();
        for d in g.nics().cloned().collect::<Vec<_>>() {
            assert_eq!(g.lookup_ncomponent_by_ip(d.ip), Some(d.ncomponent));
        }
        assert_ne!(
            g.lookup_ncomponent_by_ip(Ipv4Addr::new(10, 0, 0, 1)),
            g.lookup_ncomponent_by_ip(Ipv4Addr::new(10, 0, 0, 2))
        );
    }

    #[test]
    fn deregister_unknown_is_an_error() {
        let mut g = GnmRegistry::new();
        assert!(matches!(
            g.deregister_ncomponent(ComponentId::n(3)),
            Err(Error::UnknownComponent(_))
        ));
        assert!(matches!(
            g.register_ncomponent(ComponentId::p(0), &[nic(0, [1, 1, 1, 1])]),
            Err(Error::UnknownComponent(_))
        ));
    }

    #[test]
    fn allocation_is_least_loaded_with_round_robin_ties() {
        let mut g = GnmRegistry::new();
        for i in 0..3 {
            g.register_ncomponent(ComponentId::n(i), &[nic(i, [10, 0, 0, 1 + i as u8])])
                .unwrap();
        }
        let picks: Vec<u16> = (0..6).map(|_| g.allocate_nic().unwrap().0.index).collect();
        assert_eq!(picks, vec![0, 1, 2, 0, 1, 2]);
        g.release_nic(ComponentId::n(1));
        assert_eq!(g.allocate_nic().unwrap().0, ComponentId::n(1));
    }

    #[derive(Debug, Clone)]
    enum Op {
        Register(u16, Vec<u8>),
        Deregister(u16),
        Lookup(u8),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u16..6, proptest::collection::vec(0u8..24, 1..4))
                .prop_map(|(n, ips)| Op::Register(n, ips)),
            (0u16..6).prop_map(Op::Deregister),
            (0u8..24).prop_map(Op::Lookup),
        ]
    }

    proptest! {
        #[test]
        fn registry_matches_a_flat_model(ops in proptest::collection::vec(op(), 1..200)) {
            let mut g = GnmRegistry::new();
            // oracle: ip -> owner
            let mut model: BTreeMap<u8, u16> = BTreeMap::new();
            let mut gen = 0;
            for op in ops {
                match op {
                    Op::Register(n, ips) => {
                        let descs: Vec<_> = ips.iter().map(|o| nic(n, [10, 9, 0, *o])).collect();
                        let mut uniq = ips.clone();
                        uniq.sort();
                        uniq.dedup();
                        let ok = uniq.len() == ips.len() && ips.iter().all(|o| !model.contains_key(o));
                        prop_assert_eq!(g.register_ncomponent(ComponentId::n(n), &descs).is_ok(), ok);
                        if ok {
                            for o in ips { model.insert(o, n); }
                            gen += 1;
                        }
                    }
                    Op::Deregister(n) => {
                        let had = g.registered().any(|c| c.index == n);
                        prop_assert_eq!(g.deregister_ncomponent(ComponentId::n(n)).is_ok(), had);
                        if had {
                            model.retain(|_, v| *v != n);
                            gen += 1;
                        }
                    }
                    Op::Lookup(o) => {
                        let ip = Ipv4Addr::new(10, 9, 0, o);
                        let got = g.lookup_ncomponent_by_ip(ip);
                        prop_assert_eq!(got, model.get(&o).map(|n| ComponentId::n(*n)));
                        prop_assert_eq!(g.is_rack_local(ip), got.is_some());
                    }
                }
                prop_assert_eq!(g.generation(), gen);
            }
        }
    }

    #[test]
    fn view_ignores_stale_generations() {
        let mut v = GnmView::default();
        v.apply(3, &[(Ipv4Addr::new(10, 0, 0, 1), ComponentId::n(0))]);
        v.apply(2, &[]);
        assert_eq!(
            v.lookup(Ipv4Addr::new(10, 0, 0, 1)),
            Some(ComponentId::n(0))
        );
        assert_eq!(v.ip_of(ComponentId::n(0)), Some(Ipv4Addr::new(10, 0, 0, 1)));
    }
}
