//! Benchmark harness: echo latency and throughput, rack-local routes,
//! connection setup and a streaming word count.
//!
//! Every scenario checks payload fidelity as it runs and fails with
//! [`Error::ScenarioFailed`] on the first mismatch, so no numbers come out of
//! a run that moved bytes incorrectly.

pub mod apps;
pub mod stats;
pub mod wordcount;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::interconnect::{HopCounters, Kind};
use crate::pcomponent::{RouteKind, SocketHandle, TransferMode};
use crate::rack::Rack;
use crate::time::SimTime;
use crate::topology::RackTopology;
use apps::{Connector, EchoClient, EchoServer, Listener, NativeMapper, Reducer};
use stats::{mbps, Summary};

/// External host running benchmark clients.
pub const CLIENT_IP: Ipv4Addr = Ipv4Addr::new(192, 168, 1, 10);
/// External host running servers, listeners and the reducer.
pub const SERVER_IP: Ipv4Addr = Ipv4Addr::new(192, 168, 1, 20);

const ECHO_PORT: u16 = 7000;
const LOCAL_PORT: u16 = 7100;
const CONN_PORT: u16 = 9000;
const REDUCE_PORT: u16 = 9100;

pub const CSV_HEADER: &str = "scenario,mode,size_bytes,p50_us,p95_us,p99_us,throughput_mbps,hops_pm,hops_pn,hops_nm,ops_per_sec";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scenario {
    Echo,
    Local,
    ConnSetup,
    WordCount,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Echo => "echo",
            Scenario::Local => "local",
            Scenario::ConnSetup => "conn",
            Scenario::WordCount => "wordcount",
        })
    }
}

/// Where the measured socket lives: a rack stub with either data path, or
/// a plain native socket with no rack in between.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BenchMode {
    Dma,
    Ddio,
    Baseline,
}

impl BenchMode {
    fn transfer(self) -> Option<TransferMode> {
        match self {
            BenchMode::Dma => Some(TransferMode::Dma),
            BenchMode::Ddio => Some(TransferMode::Ddio),
            BenchMode::Baseline => None,
        }
    }
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchMode::Dma => "dma",
            BenchMode::Ddio => "ddio",
            BenchMode::Baseline => "baseline",
        })
    }
}

impl FromStr for BenchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dma" => Ok(BenchMode::Dma),
            "ddio" => Ok(BenchMode::Ddio),
            "baseline" | "linux" | "native" => Ok(BenchMode::Baseline),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub scenario: Scenario,
    /// Ignored by [`Scenario::Local`], which always measures every route.
    pub mode: BenchMode,
    pub sizes: Vec<usize>,
    pub iterations: usize,
    pub warmup: usize,
    pub topology: RackTopology,
    pub corpus_path: Option<PathBuf>,
    pub corpus_bytes: usize,
    /// Corpus bytes mapped per record batch.
    pub batch_bytes: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(scenario: Scenario, mode: BenchMode) -> Self {
        BenchConfig {
            scenario,
            mode,
            sizes: vec![128, 256, 512, 1024, 2048],
            iterations: 100,
            warmup: 5,
            topology: RackTopology::default(),
            corpus_path: None,
            corpus_bytes: 10 << 20,
            batch_bytes: 1 << 20,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return Err(Error::Config("message sizes must be positive".into()));
        }
        if self.batch_bytes == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let needs_rack = self.mode != BenchMode::Baseline || self.scenario == Scenario::Local;
        if needs_rack
            && self
                .topology
                .ncomponents
                .first()
                .is_none_or(|n| n.nics.is_empty())
        {
            return Err(Error::Config(
                "the scenario needs an nComponent with a NIC".into(),
            ));
        }
        if self.scenario == Scenario::Local && self.topology.pcomponents.len() < 2 {
            return Err(Error::Config(
                "the local scenario needs two pComponents".into(),
            ));
        }
        Ok(())
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub scenario: Scenario,
    /// A bench mode, or a route name for the local scenario.
    pub mode: String,
    pub size_bytes: usize,
    pub latency_us: Summary,
    pub throughput_mbps: f64,
    pub hops_pm: u64,
    pub hops_pn: u64,
    pub hops_nm: u64,
    pub ops_per_sec: f64,
    pub elapsed_us: f64,
    /// Every interconnect hop of the measured phase.
    pub hops: HopCounters,
}

impl Row {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.3},{:.3},{:.3},{:.3},{},{},{},{:.3}",
            self.scenario,
            self.mode,
            self.size_bytes,
            self.latency_us.p50,
            self.latency_us.p95,
            self.latency_us.p99,
            self.throughput_mbps,
            self.hops_pm,
            self.hops_pn,
            self.hops_nm,
            self.ops_per_sec
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchResult {
    pub rows: Vec<Row>,
}

impl BenchResult {
    pub fn extend(&mut self, other: BenchResult) {
        self.rows.extend(other.rows);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv());
            s.push('\n');
        }
        s
    }

    pub fn row(&self, scenario: Scenario, mode: &str, size: usize) -> Option<&Row> {
        self.rows
            .iter()
            .find(|r| r.scenario == scenario && r.mode == mode && r.size_bytes == size)
    }

    /// A short human-readable table.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{:<10} {:<11} {:>9} {:>10} {:>10} {:>10} {:>11} {:>7} {:>7} {:>7} {:>12}\n",
            "scenario",
            "mode",
            "bytes",
            "p50_us",
            "p95_us",
            "p99_us",
            "Mb/s",
            "P-M",
            "P-N",
            "N-M",
            "ops/s"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<10} {:<11} {:>9} {:>10.2} {:>10.2} {:>10.2} {:>11.2} {:>7} {:>7} {:>7} {:>12.1}\n",
                r.scenario.to_string(),
                r.mode,
                r.size_bytes,
                r.latency_us.p50,
                r.latency_us.p95,
                r.latency_us.p99,
                r.throughput_mbps,
                r.hops_pm,
                r.hops_pn,
                r.hops_nm,
                r.ops_per_sec
            ));
        }
        s
    }
}

pub fn emit_csv(result: &BenchResult, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(result.to_csv().as_bytes())?;
    Ok(())
}

pub fn run(cfg: &BenchConfig) -> Result<BenchResult> {
    cfg.validate()?;
    match cfg.scenario {
        Scenario::Echo => run_echo(cfg),
        Scenario::Local => run_local(cfg),
        Scenario::ConnSetup => run_conn_setup(cfg),
        Scenario::WordCount => run_wordcount(cfg),
    }
}

fn failed(what: impl Into<String>) -> Error {
    Error::ScenarioFailed(what.into())
}

fn nic_ip(topo: &RackTopology) -> Ipv4Addr {
    topo.ncomponents[0].nics[0].ip
}

fn payload(rng: &mut ChaCha8Rng, len: usize) -> Vec<u8> {
    let mut v = vec![0; len];
    rng.fill_bytes(&mut v);
    v
}

fn secs(us: f64) -> f64 {
    us / 1e6
}

#[allow(clippy::too_many_arguments)]
fn row(
    scenario: Scenario,
    mode: String,
    size: usize,
    samples_us: &[f64],
    bytes: u64,
    ops: u64,
    elapsed_us: f64,
    hops: HopCounters,
) -> Row {
    Row {
        scenario,
        mode,
        size_bytes: size,
        latency_us: Summary::of(samples_us),
        throughput_mbps: mbps(bytes, elapsed_us),
        hops_pm: hops.between(Kind::P, Kind::M),
        hops_pn: hops.between(Kind::P, Kind::N),
        hops_nm: hops.between(Kind::N, Kind::M),
        ops_per_sec: if elapsed_us > 0.0 {
            ops as f64 / secs(elapsed_us)
        } else {
            0.0
        },
        elapsed_us,
        hops,
    }
}

fn app_error(e: &Option<String>) -> Result<()> {
    match e {
        Some(m) => Err(failed(m.clone())),
        None => Ok(()),
    }
}

/// Echo: an external client sends fixed-size messages to a server and
/// times each round trip. The server is a rack stub, or a native socket
/// for the baseline.
pub fn run_echo(cfg: &BenchConfig) -> Result<BenchResult> {
    let mut out = BenchResult::default();
    for &size in &cfg.sizes {
        out.rows.push(echo_once(cfg, size)?);
    }
    Ok(out)
}

fn echo_once(cfg: &BenchConfig, size: usize) -> Result<Row> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ size as u64);
    let total = cfg.warmup + cfg.iterations;
    let messages: Vec<Vec<u8>> = (0..total).map(|_| payload(&mut rng, size)).collect();
    let mut rack = Rack::new(cfg.topology.clone())?;
    rack.add_external_host(CLIENT_IP);

    let client_done = |id| {
        move |r: &Rack| {
            !r.app::<EchoClient>(id)
                .is_some_and(|c| c.is_done() || c.held)
        }
    };
    let (client, started, hops) = match cfg.mode.transfer() {
        None => {
            rack.add_external_host(SERVER_IP);
            let server = SocketAddrV4::new(SERVER_IP, ECHO_PORT);
            let srv = rack.spawn_app(Box::new(EchoServer::new(server)));
            app_error(&rack.app::<EchoServer>(srv).expect("spawned").error)?;
            let client = rack.spawn_app(Box::new(EchoClient::new(
                CLIENT_IP,
                server,
                messages,
                Some(cfg.warmup),
            )));
            rack.run_while(client_done(client))?;
            rack.reset_instrumentation();
            let started = rack.now();
            rack.with_app::<EchoClient, _>(client, |c, _, net| c.resume(net));
            rack.run_while(client_done(client))?;
            (client, started, rack.hops().clone())
        }
        Some(mode) => {
            let server = SocketAddrV4::new(nic_ip(&cfg.topology), ECHO_PORT);
            let listener = rack.socket(0)?;
            rack.set_mode(listener, mode)?;
            rack.bind(listener, server)?;
            rack.listen(listener, 16)?;
            let client = rack.spawn_app(Box::new(EchoClient::new(
                CLIENT_IP,
                server,
                messages,
                Some(cfg.warmup),
            )));
            let conn = rack.accept(listener)?;
            let mut started = rack.now();
            for i in 0..total {
                if i == cfg.warmup {
                    rack.run_while(client_done(client))?;
                    rack.reset_instrumentation();
                    started = rack.now();
                    rack.with_app::<EchoClient, _>(client, |c, _, net| c.resume(net));
                }
                let data = rack.recv_exact(conn, size)?;
                if data.len() != size {
                    app_error(&rack.app::<EchoClient>(client).expect("spawned").error)?;
                    return Err(failed(format!(
                        "server got {} of {size} bytes in round {i}",
                        data.len()
                    )));
                }
                rack.send(conn, &data)?;
            }
            rack.run_while(client_done(client))?;
            let hops = rack.hops().clone();
            rack.close(conn)?;
            rack.close(listener)?;
            (client, started, hops)
        }
    };
    let c = rack.app::<EchoClient>(client).expect("spawned");
    app_error(&c.error)?;
    let finished = c
        .finished_at
        .ok_or_else(|| failed("echo client never finished"))?;
    let rtts = &c.rtts_us[cfg.warmup..];
    let elapsed = (finished - started).as_micros_f64();
    let bytes = (size * cfg.iterations) as u64;
    Ok(row(
        Scenario::Echo,
        cfg.mode.to_string(),
        size,
        rtts,
        bytes,
        cfg.iterations as u64,
        elapsed,
        hops,
    ))
}

/// The stub routes the local scenario measures, fastest first.
pub const LOCAL_ROUTES: [RouteKind; 4] = [
    RouteKind::LocalPipe,
    RouteKind::LocalFit,
    RouteKind::SkelDdio,
    RouteKind::SkelDma,
];

/// Local: two stubs inside the rack ping-pong messages. Pipe and FIT routes
/// come from the local fast path; the skeleton routes are forced by
/// turning it off, so traffic leaves through the nComponent and loops back.
pub fn run_local(cfg: &BenchConfig) -> Result<BenchResult> {
    let mut out = BenchResult::default();
    for &size in &cfg.sizes {
        for route in LOCAL_ROUTES {
            out.rows.push(local_once(cfg, size, route)?);
        }
    }
    Ok(out)
}

/// Moves `msg` from `from` to `to`, with the receive posted first.
pub fn transfer(rack: &mut Rack, from: SocketHandle, to: SocketHandle, msg: &[u8]) -> Result<()> {
    let rt = rack.begin_recv(to, msg.len())?;
    let st = rack.begin_send(from, msg.to_vec())?;
    rack.wait(st)?;
    let mut got = match rack.wait(rt)? {
        crate::pcomponent::Done::Data(d) => d,
        other => return Err(Error::Protocol(format!("recv completed with {other:?}"))),
    };
    while got.len() < msg.len() {
        let more = rack.recv(to, msg.len() - got.len())?;
        if more.is_empty() {
            break;
        }
        got.extend(more);
    }
    if got != msg {
        return Err(failed(format!(
            "{} of {} bytes arrived intact",
            common_prefix(&got, msg),
            msg.len()
        )));
    }
    Ok(())
}

fn common_prefix(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// Builds a connected stub pair on the given route: (server, client).
pub fn local_pair(
    rack: &mut Rack,
    route: RouteKind,
    port: u16,
) -> Result<(SocketHandle, SocketHandle)> {
    let (client_pc, mode) = match route {
        RouteKind::LocalPipe => (0, TransferMode::Dma),
        RouteKind::LocalFit => (1, TransferMode::Dma),
        RouteKind::SkelDdio => (1, TransferMode::Ddio),
        RouteKind::SkelDma | RouteKind::Unrouted => (1, TransferMode::Dma),
    };
    let addr = SocketAddrV4::new(nic_ip(rack.topology()), port);
    let listener = rack.socket(0)?;
    rack.set_mode(listener, mode)?;
    rack.bind(listener, addr)?;
    rack.listen(listener, 16)?;
    let client = rack.socket(client_pc)?;
    rack.set_mode(client, mode)?;
    rack.connect(client, addr)?;
    let server = rack.accept(listener)?;
    rack.close(listener)?;
    for h in [client, server] {
        let got = rack.route(h);
        if got != Some(route) {
            return Err(failed(format!("expected a {route} route, got {got:?}")));
        }
    }
    Ok((server, client))
}

fn local_once(cfg: &BenchConfig, size: usize, route: RouteKind) -> Result<Row> {
    let mut topo = cfg.topology.clone();
    topo.local_fastpath = matches!(route, RouteKind::LocalPipe | RouteKind::LocalFit);
    let mut rack = Rack::new(topo)?;
    let (server, client) = local_pair(&mut rack, route, LOCAL_PORT)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ size as u64);
    let mut rtts = Vec::with_capacity(cfg.iterations);
    let mut started = rack.now();
    for i in 0..cfg.warmup + cfg.iterations {
        if i == cfg.warmup {
            rack.reset_instrumentation();
            started = rack.now();
        }
        let msg = payload(&mut rng, size);
        let t0 = rack.now();
        transfer(&mut rack, client, server, &msg)?;
        transfer(&mut rack, server, client, &msg)?;
        if i >= cfg.warmup {
            rtts.push((rack.now() - t0).as_micros_f64());
        }
    }
    let elapsed = (rack.now() - started).as_micros_f64();
    let hops = rack.hops().clone();
    if matches!(route, RouteKind::LocalPipe | RouteKind::LocalFit)
        && (hops.touching(Kind::N) > 0 || hops.touching(Kind::M) > 0)
    {
        return Err(failed(format!(
            "{route} data path touched an nComponent or mComponent"
        )));
    }
    rack.close(client)?;
    rack.close(server)?;
    let bytes = (2 * size * cfg.iterations) as u64;
    Ok(row(
        Scenario::Local,
        route.to_string(),
        size,
        &rtts,
        bytes,
        cfg.iterations as u64,
        elapsed,
        hops,
    ))
}

/// Connection setup: time from connect to established, against an external
/// listener. The rack's own teardown is checked for leaks.
pub fn run_conn_setup(cfg: &BenchConfig) -> Result<BenchResult> {
    let mut rack = Rack::new(cfg.topology.clone())?;
    rack.add_external_host(SERVER_IP);
    let target = SocketAddrV4::new(SERVER_IP, CONN_PORT);
    let lst = rack.spawn_app(Box::new(Listener::new(target)));
    app_error(&rack.app::<Listener>(lst).expect("spawned").error)?;
    let total = cfg.warmup + cfg.iterations;
    let mut times = Vec::with_capacity(cfg.iterations);
    let mut hops = HopCounters::default();
    let mut busy_us = 0.0;
    match cfg.mode.transfer() {
        None => {
            rack.add_external_host(CLIENT_IP);
            let id = rack.spawn_app(Box::new(Connector::new(CLIENT_IP, target, total)));
            rack.run_while(|r| !r.app::<Connector>(id).is_some_and(|c| c.is_done()))?;
            let c = rack.app::<Connector>(id).expect("spawned");
            app_error(&c.error)?;
            times.extend_from_slice(&c.times_us[cfg.warmup..]);
            busy_us = times.iter().sum();
        }
        Some(mode) => {
            for i in 0..total {
                let s = rack.socket(0)?;
                rack.set_mode(s, mode)?;
                rack.reset_instrumentation();
                let t0 = rack.now();
                rack.connect(s, target)?;
                let dt = (rack.now() - t0).as_micros_f64();
                if i >= cfg.warmup {
                    times.push(dt);
                    busy_us += dt;
                    hops = hops.plus(rack.hops());
                }
                rack.close(s)?;
            }
            rack.run_while(|r| {
                r.app::<Listener>(lst)
                    .is_some_and(|l| l.closed < l.accepted)
            })?;
            let leaked: usize = (0..cfg.topology.ncomponents.len() as u16)
                .filter_map(|i| rack.ncomponent(i))
                .map(|n| n.skeleton_count())
                .sum();
            let open = rack.pcomponent(0).map_or(0, |p| p.open_stubs());
            if leaked > 0 || open > 0 {
                return Err(failed(format!(
                    "{leaked} skeletons and {open} stubs left after {total} connects"
                )));
            }
        }
    }
    let ops = cfg.iterations as u64;
    Ok(BenchResult {
        rows: vec![row(
            Scenario::ConnSetup,
            cfg.mode.to_string(),
            0,
            &times,
            0,
            ops,
            busy_us,
            hops,
        )],
    })
}

/// The corpus a word-count run uses.
pub fn load_corpus(cfg: &BenchConfig) -> Result<Vec<u8>> {
    match &cfg.corpus_path {
        Some(p) => Ok(std::fs::read(p)?),
        None => Ok(wordcount::generate_corpus(
            cfg.corpus_bytes,
            5_000,
            cfg.seed,
        )),
    }
}

/// Word count: a mapper streams `word\tcount` records to an external
/// reducer, which must end up with the reference count.
pub fn run_wordcount(cfg: &BenchConfig) -> Result<BenchResult> {
    let corpus = load_corpus(cfg)?;
    let (row, _) = wordcount_on(cfg, &corpus)?;
    Ok(BenchResult { rows: vec![row] })
}

/// Runs the word count over `corpus` and returns the reducer's table along
/// with the row.
pub fn wordcount_on(cfg: &BenchConfig, corpus: &[u8]) -> Result<(Row, BTreeMap<String, u64>)> {
    let corpus = corpus.to_vec();
    let batches: Vec<(Vec<u8>, u64)> = wordcount::split_batches(&corpus, cfg.batch_bytes)
        .into_iter()
        .map(wordcount::map_batch)
        .collect();
    let words: u64 = batches.iter().map(|b| b.1).sum();
    let mut rack = Rack::new(cfg.topology.clone())?;
    rack.add_external_host(SERVER_IP);
    let reducer_addr = SocketAddrV4::new(SERVER_IP, REDUCE_PORT);
    let red = rack.spawn_app(Box::new(Reducer::new(reducer_addr)));
    app_error(&rack.app::<Reducer>(red).expect("spawned").error)?;
    let started: SimTime = rack.now();
    match cfg.mode.transfer() {
        None => {
            rack.add_external_host(CLIENT_IP);
            let records = batches.into_iter().map(|b| b.0).collect();
            let m = rack.spawn_app(Box::new(NativeMapper::new(
                CLIENT_IP,
                reducer_addr,
                records,
            )));
            rack.run_while(|r| {
                r.app::<Reducer>(red)
                    .is_some_and(|x| x.streams_done == 0 && x.error.is_none())
            })?;
            app_error(&rack.app::<NativeMapper>(m).expect("spawned").error)?;
        }
        Some(mode) => {
            let s = rack.socket(0)?;
            rack.set_mode(s, mode)?;
            rack.connect(s, reducer_addr)?;
            for (records, _) in &batches {
                rack.send(s, records)?;
            }
            rack.close(s)?;
            rack.run_while(|r| {
                r.app::<Reducer>(red)
                    .is_some_and(|x| x.streams_done == 0 && x.error.is_none())
            })?;
        }
    }
    let hops = rack.hops().clone();
    let r = rack.app::<Reducer>(red).expect("spawned");
    app_error(&r.error)?;
    let oracle = wordcount::count_words(&corpus);
    if r.counts != oracle {
        let diff = oracle
            .iter()
            .filter(|(w, n)| r.counts.get(*w) != Some(n))
            .count();
        return Err(failed(format!(
            "{diff} of {} words have the wrong count",
            oracle.len()
        )));
    }
    let finished = r
        .last_eof_at
        .ok_or_else(|| failed("reducer never saw the end of the stream"))?;
    let elapsed = (finished - started).as_micros_f64();
    let size = corpus.len();
    let counts = r.counts.clone();
    Ok((
        row(
            Scenario::WordCount,
            cfg.mode.to_string(),
            size,
            &[elapsed],
            size as u64,
            words,
            elapsed,
            hops,
        ),
        counts,
    ))
}
