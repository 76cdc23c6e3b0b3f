//! Declarative rack description.
//!
//! Topologies are TOML documents. Every key is optional; a missing key takes
//! the default shown below, which reproduces a two-pComponent, one-mComponent,
//! one-nComponent rack on a 4 us one-way interconnect.
//!
//! ```toml
//! transport = "inprocess"        # or "hostsocket"
//! instrumentation = true
//! local_fastpath = true          # pipe/FIT routes for rack-local peers
//!
//! [link]
//! one_way_latency_us = 4.0
//! bandwidth_bps = 40e9
//!
//! [[link.override]]
//! a = "P0"
//! b = "M0"
//! one_way_latency_us = 2.0
//!
//! [[pcomponent]]
//! excache_bytes = 1073741824
//! max_sockets = 65536
//!
//! [[mcomponent]]
//! capacity_bytes = 8589934592
//!
//! [[ncomponent]]
//! dram_bytes = 1073741824
//! socket_budget_bytes = 1048576
//! max_skeletons = 65536
//! [[ncomponent.nic]]
//! name = "eth0"
//! ip = "10.0.0.1"
//! link_capacity_bps = 1e9
//! host_ip = "127.0.0.1"
//!
//! [external]
//! one_way_latency_us = 25.0
//! bandwidth_bps = 1e9
//! loopback_latency_us = 1.0
//! stack_us = 2.0
//! connect_timeout_ms = 1000
//!
//! [cost]
//! pipe_us = 0.5
//! skeleton_create_us = 2.0
//! rpc_timeout_ms = 1000
//! ```

use std::net::Ipv4Addr;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::interconnect::ComponentId;
use crate::time::SimTime;

pub const TOPOLOGY_ENV: &str = "SPLITNET_TOPOLOGY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    /// Deterministic virtual clock, frames handed over in memory.
    #[default]
    InProcess,
    /// Wall clock pacing, frames pushed through loopback TCP and the
    /// nComponent using host sockets.
    HostSocket,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkParams {
    pub one_way_latency: SimTime,
    pub bandwidth_bps: u64,
}

impl Default for LinkParams {
    fn default() -> Self {
        // 8 us round trip on the rack interconnect, split evenly.
        LinkParams {
            one_way_latency: SimTime::from_micros(4),
            bandwidth_bps: 40_000_000_000,
        }
    }
}

impl LinkParams {
    pub fn round_trip(&self) -> SimTime {
        self.one_way_latency + self.one_way_latency
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkOverride {
    pub a: ComponentId,
    pub b: ComponentId,
    pub params: LinkParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcSpec {
    pub excache_bytes: usize,
    pub max_sockets: usize,
}

impl Default for PcSpec {
    fn default() -> Self {
        PcSpec {
            excache_bytes: 1 << 30,
            max_sockets: 65_536,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McSpec {
    pub capacity_bytes: u64,
}

impl Default for McSpec {
    fn default() -> Self {
        McSpec {
            capacity_bytes: 8 << 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NicSpec {
    pub name: String,
    pub ip: Ipv4Addr,
    pub link_capacity_bps: u64,
    /// Host address the nComponent binds when running over host sockets.
    pub host_ip: Ipv4Addr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NcSpec {
    pub dram_bytes: usize,
    pub socket_budget_bytes: usize,
    pub max_skeletons: usize,
    pub nics: Vec<NicSpec>,
}

impl NcSpec {
    fn with_ip(ip: Ipv4Addr) -> NcSpec {
        NcSpec {
            dram_bytes: 1 << 30,
            socket_budget_bytes: 1 << 20,
            max_skeletons: 65_536,
            nics: vec![NicSpec {
                name: "eth0".into(),
                ip,
                link_capacity_bps: 1_000_000_000,
                host_ip: Ipv4Addr::LOCALHOST,
            }],
        }
    }
}

/// The world outside the rack: one switched network shared by the
/// nComponent NICs and every external host.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalNet {
    pub one_way_latency: SimTime,
    pub bandwidth_bps: u64,
    pub loopback_latency: SimTime,
    /// Per-send protocol stack cost on the sending host.
    pub stack_cost: SimTime,
    pub connect_timeout: SimTime,
}

impl Default for ExternalNet {
    fn default() -> Self {
        ExternalNet {
            one_way_latency: SimTime::from_micros(25),
            bandwidth_bps: 1_000_000_000,
            loopback_latency: SimTime::from_micros(1),
            stack_cost: SimTime::from_micros(2),
            connect_timeout: SimTime::from_millis(1_000),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    /// One pipe hand-off between two stubs of the same pComponent.
    pub pipe_transfer: SimTime,
    /// Proxy work to instantiate a skeleton and its native socket.
    pub skeleton_create: SimTime,
    /// Upper bound on how long a stub waits for a monitor to answer.
    pub rpc_timeout: SimTime,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            pipe_transfer: SimTime(500),
            skeleton_create: SimTime::from_micros(2),
            rpc_timeout: SimTime::from_millis(1_000),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RackTopology {
    pub transport: Transport,
    pub instrumentation: bool,
    pub local_fastpath: bool,
    pub link: LinkParams,
    pub overrides: Vec<LinkOverride>,
    pub pcomponents: Vec<PcSpec>,
    pub mcomponents: Vec<McSpec>,
    pub ncomponents: Vec<NcSpec>,
    pub external: ExternalNet,
    pub cost: CostModel,
}

impl Default for RackTopology {
    fn default() -> Self {
        RackTopology {
            transport: Transport::InProcess,
            instrumentation: true,
            local_fastpath: true,
            link: LinkParams::default(),
            overrides: Vec::new(),
            pcomponents: vec![PcSpec::default(), PcSpec::default()],
            mcomponents: vec![McSpec::default()],
            ncomponents: vec![NcSpec::with_ip(Ipv4Addr::new(10, 0, 0, 1))],
            external: ExternalNet::default(),
            cost: CostModel::default(),
        }
    }
}

impl RackTopology {
    pub fn from_toml_str(src: &str) -> Result<Self> {
        let raw: raw::TopologyFile =
            toml::from_str(src).map_err(|e| Error::Config(e.to_string()))?;
        raw.into_topology()
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml_str(&text)
    }

    /// Loads the file named by `SPLITNET_TOPOLOGY`, or the default rack.
    pub fn from_env() -> Result<Self> {
        match std::env::var_os(TOPOLOGY_ENV) {
            Some(path) => Self::from_path(path),
            None => Ok(Self::default()),
        }
    }

    pub fn with_latency(mut self, one_way: SimTime) -> Self {
        self.link.one_way_latency = one_way;
        self
    }

    pub fn components(&self) -> Vec<ComponentId> {
        let mut ids = Vec::new();
        ids.extend((0..self.pcomponents.len()).map(|i| ComponentId::p(i as u16)));
        ids.extend((0..self.mcomponents.len()).map(|i| ComponentId::m(i as u16)));
        ids.extend((0..self.ncomponents.len()).map(|i| ComponentId::n(i as u16)));
        ids.push(ComponentId::GNM);
        ids
    }

    pub fn contains(&self, id: ComponentId) -> bool {
        use crate::interconnect::Kind;
        let i = id.index as usize;
        match id.kind {
            Kind::P => i < self.pcomponents.len(),
            Kind::M => i < self.mcomponents.len(),
            Kind::N => i < self.ncomponents.len(),
            Kind::Gnm => i == 0,
            Kind::External => false,
        }
    }

    pub fn link_between(&self, a: ComponentId, b: ComponentId) -> LinkParams {
        self.overrides
            .iter()
            .find(|o| (o.a == a && o.b == b) || (o.a == b && o.b == a))
            .map(|o| o.params)
            .unwrap_or(self.link)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pcomponents.is_empty() || self.mcomponents.is_empty() {
            return Err(Error::Config(
                "a rack needs at least one pComponent and one mComponent".into(),
            ));
        }
        if self.pcomponents.len() > 0x0fff
            || self.mcomponents.len() > 0x0fff
            || self.ncomponents.len() > 0x0fff
        {
            return Err(Error::Config("at most 4095 components per kind".into()));
        }
        if self.link.bandwidth_bps == 0 || self.external.bandwidth_bps == 0 {
            return Err(Error::Config("bandwidth must be positive".into()));
        }
        for o in &self.overrides {
            if !self.contains(o.a) || !self.contains(o.b) {
                return Err(Error::Config(format!(
                    "override references unknown component {}-{}",
                    o.a, o.b
                )));
            }
            if o.params.bandwidth_bps == 0 {
                return Err(Error::Config("bandwidth must be positive".into()));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for nc in &self.ncomponents {
            if nc.socket_budget_bytes == 0 || nc.socket_budget_bytes > nc.dram_bytes {
                return Err(Error::Config(
                    "socket budget must be in 1..=dram_bytes".into(),
                ));
            }
            for nic in &nc.nics {
                if !seen.insert(nic.ip) {
                    return Err(Error::Config(format!("duplicate NIC ip {}", nic.ip)));
                }
            }
        }
        Ok(())
    }
}

mod raw {
    use super::*;

    fn t() -> bool {
        true
    }

    fn us(v: f64) -> Result<SimTime> {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::Config(format!(
                "latency must be a non-negative number, got {v}"
            )));
        }
        Ok(SimTime::from_micros_f64(v))
    }

    fn bps(v: f64) -> Result<u64> {
        if !(v.is_finite() && v >= 1.0) {
            return Err(Error::Config(format!(
                "bandwidth must be positive, got {v}"
            )));
        }
        Ok(v as u64)
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub(super) struct TopologyFile {
        #[serde(default)]
        transport: Transport,
        #[serde(default = "t")]
        instrumentation: bool,
        #[serde(default = "t")]
        local_fastpath: bool,
        #[serde(default)]
        link: Option<Link>,
        #[serde(default)]
        pcomponent: Option<Vec<Pc>>,
        #[serde(default)]
        mcomponent: Option<Vec<Mc>>,
        #[serde(default)]
        ncomponent: Option<Vec<Nc>>,
        #[serde(default)]
        external: Option<External>,
        #[serde(default)]
        cost: Option<Cost>,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Link {
        one_way_latency_us: Option<f64>,
        bandwidth_bps: Option<f64>,
        #[serde(default, rename = "override")]
        overrides: Vec<Override>,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Override {
        a: String,
        b: String,
        one_way_latency_us: Option<f64>,
        bandwidth_bps: Option<f64>,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Pc {
        excache_bytes: Option<usize>,
        max_sockets: Option<usize>,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Mc {
        capacity_bytes: Option<u64>,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Nc {
        dram_bytes: Option<usize>,
        socket_budget_bytes: Option<usize>,
        max_skeletons: Option<usize>,
        #[serde(default)]
        nic: Vec<Nic>,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Nic {
        name: Option<String>,
        ip: Ipv4Addr,
        link_capacity_bps: Option<f64>,
        host_ip: Option<Ipv4Addr>,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct External {
        one_way_latency_us: Option<f64>,
        bandwidth_bps: Option<f64>,
        loopback_latency_us: Option<f64>,
        stack_us: Option<f64>,
        connect_timeout_ms: Option<f64>,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Cost {
        pipe_us: Option<f64>,
        skeleton_create_us: Option<f64>,
        rpc_timeout_ms: Option<f64>,
    }

    impl TopologyFile {
        pub(super) fn into_topology(self) -> Result<RackTopology> {
            let d = RackTopology::default();
            let mut link = d.link;
            let mut overrides = Vec::new();
            if let Some(l) = self.link {
                if let Some(v) = l.one_way_latency_us {
                    link.one_way_latency = us(v)?;
                }
                if let Some(v) = l.bandwidth_bps {
                    link.bandwidth_bps = bps(v)?;
                }
                for o in l.overrides {
                    let mut params = link;
                    if let Some(v) = o.one_way_latency_us {
                        params.one_way_latency = us(v)?;
                    }
                    if let Some(v) = o.bandwidth_bps {
                        params.bandwidth_bps = bps(v)?;
                    }
                    overrides.push(LinkOverride {
                        a: o.a.parse()?,
                        b: o.b.parse()?,
                        params,
                    });
                }
            }

            let pcomponents = match self.pcomponent {
                Some(list) => list
                    .into_iter()
                    .map(|p| {
                        let def = PcSpec::default();
                        PcSpec {
                            excache_bytes: p.excache_bytes.unwrap_or(def.excache_bytes),
                            max_sockets: p.max_sockets.unwrap_or(def.max_sockets),
                        }
                    })
                    .collect(),
                None => d.pcomponents,
            };
            let mcomponents = match self.mcomponent {
                Some(list) => list
                    .into_iter()
                    .map(|m| McSpec {
                        capacity_bytes: m
                            .capacity_bytes
                            .unwrap_or(McSpec::default().capacity_bytes),
                    })
                    .collect(),
                None => d.mcomponents,
            };
            let ncomponents = match self.ncomponent {
                Some(list) => {
                    let mut out = Vec::new();
                    for (i, n) in list.into_iter().enumerate() {
                        let def = NcSpec::with_ip(Ipv4Addr::new(10, 0, 0, 1 + i as u8));
                        let nics = if n.nic.is_empty() {
                            def.nics.clone()
                        } else {
                            let mut nics = Vec::new();
                            for (j, nic) in n.nic.into_iter().enumerate() {
                                nics.push(NicSpec {
                                    name: nic.name.unwrap_or_else(|| format!("eth{j}")),
                                    ip: nic.ip,
                                    link_capacity_bps: match nic.link_capacity_bps {
                                        Some(v) => bps(v)?,
                                        None => 1_000_000_000,
                                    },
                                    host_ip: nic.host_ip.unwrap_or(Ipv4Addr::LOCALHOST),
                                });
                            }
                            nics
                        };
                        out.push(NcSpec {
                            dram_bytes: n.dram_bytes.unwrap_or(def.dram_bytes),
                            socket_budget_bytes: n
                                .socket_budget_bytes
                                .unwrap_or(def.socket_budget_bytes),
                            max_skeletons: n.max_skeletons.unwrap_or(def.max_skeletons),
                            nics,
                        });
                    }
                    out
                }
                None => d.ncomponents,
            };

            let mut external = d.external;
            if let Some(e) = self.external {
                if let Some(v) = e.one_way_latency_us {
                    external.one_way_latency = us(v)?;
                }
                if let Some(v) = e.bandwidth_bps {
                    external.bandwidth_bps = bps(v)?;
                }
                if let Some(v) = e.loopback_latency_us {
                    external.loopback_latency = us(v)?;
                }
                if let Some(v) = e.stack_us {
                    external.stack_cost = us(v)?;
                }
                if let Some(v) = e.connect_timeout_ms {
                    external.connect_timeout = us(v * 1_000.0)?;
                }
            }
            let mut cost = d.cost;
            if let Some(c) = self.cost {
                if let Some(v) = c.pipe_us {
                    cost.pipe_transfer = us(v)?;
                }
                if let Some(v) = c.skeleton_create_us {
                    cost.skeleton_create = us(v)?;
                }
                if let Some(v) = c.rpc_timeout_ms {
                    cost.rpc_timeout = us(v * 1_000.0)?;
                }
            }

            let topo = RackTopology {
                transport: self.transport,
                instrumentation: self.instrumentation,
                local_fastpath: self.local_fastpath,
                link,
                overrides,
                pcomponents,
                mcomponents,
                ncomponents,
                external,
                cost,
            };
            topo.validate()?;
            Ok(topo)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default_rack() {
        let topo = RackTopology::from_toml_str("").unwrap();
        assert_eq!(topo, RackTopology::default());
        assert_eq!(topo.link.one_way_latency, SimTime::from_micros(4));
        assert_eq!(topo.link.round_trip(), SimTime::from_micros(8));
        assert_eq!(topo.components().len(), 5);
    }

    #[test]
    fn parses_overrides_and_nics() {
        let src = r#"
            local_fastpath = false
            [link]
            one_way_latency_us = 0
            bandwidth_bps = 1e9
            [[link.override]]
            a = "P0"
            b = "N0"
            one_way_latency_us = 10
            [[pcomponent]]
            excache_bytes = 4096
            [[mcomponent]]
            [[ncomponent]]
            [[ncomponent.nic]]
            ip = "10.1.0.1"
            [[ncomponent.nic]]
            ip = "10.1.0.2"
            [[ncomponent]]
        "#;
        let topo = RackTopology::from_toml_str(src).unwrap();
        assert!(!topo.local_fastpath);
        assert_eq!(topo.pcomponents.len(), 1);
        assert_eq!(topo.pcomponents[0].excache_bytes, 4096);
        assert_eq!(topo.ncomponents[0].nics.len(), 2);
        assert_eq!(topo.ncomponents[1].nics[0].ip, Ipv4Addr::new(10, 0, 0, 2));
        let p0n0 = topo.link_between(ComponentId::n(0), ComponentId::p(0));
        assert_eq!(p0n0.one_way_latency, SimTime::from_micros(10));
        assert_eq!(p0n0.bandwidth_bps, 1_000_000_000);
        assert_eq!(
            topo.link_between(ComponentId::p(0), ComponentId::m(0))
                .one_way_latency,
            SimTime::ZERO
        );
    }

    #[test]
    fn rejects_bad_documents() {
        assert!(RackTopology::from_toml_str("bogus = 1").is_err());
        assert!(RackTopology::from_toml_str("[link]\nbandwidth_bps = 0").is_err());
        assert!(RackTopology::from_toml_str("[link]\none_way_latency_us = -1").is_err());
        let dup = "[[ncomponent]]\n[[ncomponent.nic]]\nip = \"10.0.0.9\"\n[[ncomponent]]\n[[ncomponent.nic]]\nip = \"10.0.0.9\"";
        assert!(RackTopology::from_toml_str(dup).is_err());
    }
}
