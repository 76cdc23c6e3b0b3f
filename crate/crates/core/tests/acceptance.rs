//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::{Ipv4Addr, SocketAddrV4};
use std::time::Instant;

use common::{connected, interleaved, random_bytes, ROUTES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splitnet::bench::apps::Listener;
use splitnet::bench::{self, wordcount, BenchConfig, BenchMode, BenchResult, Scenario};
use splitnet::gnm::{GnmRegistry, GnmView, NicDescriptor};
use splitnet::interconnect::{ComponentId, HopCounters, Kind, Op};
use splitnet::ncomponent::ProxyState;
use splitnet::pcomponent::{RouteKind, TransferMode};
use splitnet::rack::Rack;
use splitnet::time::serialization_delay;
use splitnet::topology::RackTopology;
use splitnet::wire::SocketMeta;

const SEED: u64 = 0x5eed;
const ECHO_SIZES: [usize; 5] = [128, 256, 512, 1024, 2048];

type Verdict = Result<String, String>;

fn check(cond: bool, what: String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what)
    }
}

// ----- criterion 1 -----

fn fidelity() -> Verdict {
    const TRIALS: usize = 1000;
    let mut intact = 0;
    let mut first_failure = None;
    for (i, route) in ROUTES.into_iter().enumerate() {
        let (mut rack, s, c) = connected(route);
        let mut rng = ChaCha8Rng::seed_from_u64(SEED + i as u64);
        for trial in 0..TRIALS {
            let len = rng.gen_range(1..=8192);
            let msg = random_bytes(&mut rng, len);
            let (from, to) = if rng.gen_bool(0.5) { (c, s) } else { (s, c) };
            match interleaved(&mut rack, from, to, &msg, &mut rng) {
                Ok(got) if got == msg => intact += 1,
                Ok(_) => {
                    first_failure.get_or_insert(format!("{route} trial {trial}: bytes differ"));
                }
                Err(e) => {
                    first_failure.get_or_insert(format!("{route} trial {trial}: {e}"));
                    break;
                }
            }
        }
    }
    let total = TRIALS * ROUTES.len();
    match first_failure {
        None => Ok(format!(
            "{intact}/{total} randomized streams byte-identical over dma, ddio, pipe and fit"
        )),
        Some(f) => Err(format!("{intact}/{total} intact; first failure {f}")),
    }
}

// ----- criteria 2 to 6, and the data criterion 9 compares -----

struct Run {
    hop_law: Vec<(String, u64)>,
    echo: BenchResult,
    wide: BenchResult,
    local: BenchResult,
    conn: BenchResult,
}

impl Run {
    /// The hop and latency columns of every row, plus the hop-law counters.
    fn compared_columns(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .hop_law
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        for r in [&self.echo, &self.wide, &self.local, &self.conn]
            .into_iter()
            .flat_map(|b| &b.rows)
        {
            out.push(format!(
                "{},{},{},{:e},{:e},{:e},{},{},{}",
                r.scenario,
                r.mode,
                r.size_bytes,
                r.latency_us.p50,
                r.latency_us.p95,
                r.latency_us.p99,
                r.hops_pm,
                r.hops_pn,
                r.hops_nm
            ));
        }
        out
    }
}

fn cfg(scenario: Scenario, mode: BenchMode, sizes: &[usize], iterations: usize) -> BenchConfig {
    let mut c = BenchConfig::new(scenario, mode);
    c.sizes = sizes.to_vec();
    c.iterations = iterations;
    c.warmup = 5;
    c.seed = SEED;
    c
}

/// N single-message sends from a stub to an external sink, counted after a
/// warmup send and a counter reset.
fn hop_law_counts(mode: TransferMode, n: u64) -> splitnet::Result<HopCounters> {
    let remote = Ipv4Addr::new(192, 168, 1, 20);
    let mut rack = Rack::new(RackTopology::default())?;
    rack.add_external_host(remote);
    rack.spawn_app(Box::new(Listener::new(SocketAddrV4::new(remote, 9))));
    let s = rack.socket(0)?;
    rack.set_mode(s, mode)?;
    rack.connect(s, SocketAddrV4::new(remote, 9))?;
    rack.send(s, &[0; 64])?;
    rack.reset_instrumentation();
    for i in 0..n {
        rack.send(s, &[i as u8; 512])?;
    }
    Ok(rack.hops().clone())
}

fn run_2_to_6() -> splitnet::Result<Run> {
    const N: u64 = 100;
    let dma = hop_law_counts(TransferMode::Dma, N)?;
    let ddio = hop_law_counts(TransferMode::Ddio, N)?;
    let hop_law = vec![
        (
            "dma P->M M_WRITE".to_string(),
            dma.op(Kind::P, Kind::M, Op::M_WRITE),
        ),
        (
            "dma N->M M_READ".to_string(),
            dma.op(Kind::N, Kind::M, Op::M_READ),
        ),
        ("dma total".to_string(), dma.total()),
        ("ddio touching M".to_string(), ddio.touching(Kind::M)),
        ("ddio total".to_string(), ddio.total()),
    ];
    let mut echo = BenchResult::default();
    let mut wide = BenchResult::default();
    let mut conn = BenchResult::default();
    for mode in [BenchMode::Dma, BenchMode::Ddio] {
        echo.extend(bench::run(&cfg(Scenario::Echo, mode, &ECHO_SIZES, 50))?);
        wide.extend(bench::run(&cfg(Scenario::Echo, mode, &[128, 4096], 50))?);
    }
    for mode in [BenchMode::Dma, BenchMode::Ddio, BenchMode::Baseline] {
        conn.extend(bench::run(&cfg(Scenario::ConnSetup, mode, &[1], 50))?);
    }
    let local = bench::run(&cfg(Scenario::Local, BenchMode::Dma, &ECHO_SIZES, 50))?;
    Ok(Run {
        hop_law,
        echo,
        wide,
        local,
        conn,
    })
}

fn hop_law(run: &Run) -> Verdict {
    let get = |k: &str| {
        run.hop_law
            .iter()
            .find(|(n, _)| n == k)
            .map(|(_, v)| *v)
            .unwrap_or(u64::MAX)
    };
    let (w, r, m) = (
        get("dma P->M M_WRITE"),
        get("dma N->M M_READ"),
        get("ddio touching M"),
    );
    let line = format!("N=100: P->M M_WRITE={w}, N->M M_READ={r}, DDIO frames touching M={m}");
    if w == 100 && r == 100 && m == 0 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn p50(
    b: &BenchResult,
    scenario: Scenario,
    mode: &str,
    size: usize,
) -> std::result::Result<f64, String> {
    b.row(scenario, mode, size)
        .map(|r| r.latency_us.p50)
        .ok_or(format!("no {scenario} {mode} row at {size} B"))
}

fn latency_ordering(run: &Run) -> Verdict {
    let gap = RackTopology::default().link.round_trip().as_micros_f64();
    let mut parts = Vec::new();
    let mut bad = Vec::new();
    for size in ECHO_SIZES {
        let dma = p50(&run.echo, Scenario::Echo, "dma", size)?;
        let ddio = p50(&run.echo, Scenario::Echo, "ddio", size)?;
        parts.push(format!("{size}B {ddio:.2}<{dma:.2}"));
        if !(ddio < dma && dma - ddio >= gap) {
            bad.push(size);
        }
    }
    let line = format!("p50 us ddio<dma with gap >= {gap} us: {}", parts.join(", "));
    if bad.is_empty() {
        Ok(line)
    } else {
        Err(format!("{line}; violated at {bad:?}"))
    }
}

fn throughput_convergence(run: &Run) -> Verdict {
    let tp = |mode: &str, size| {
        run.wide
            .row(Scenario::Echo, mode, size)
            .map(|r| r.throughput_mbps)
            .ok_or(format!("no {mode} row at {size}"))
    };
    let small = tp("dma", 128)? / tp("ddio", 128)?;
    let large = tp("dma", 4096)? / tp("ddio", 4096)?;
    let line = format!("dma/ddio throughput ratio {small:.4} at 128 B, {large:.4} at 4096 B");
    if large > small {
        Ok(line)
    } else {
        Err(line)
    }
}

fn local_ordering(run: &Run) -> Verdict {
    let mut parts = Vec::new();
    for size in ECHO_SIZES {
        let v: Vec<f64> = bench::LOCAL_ROUTES
            .iter()
            .map(|r| p50(&run.local, Scenario::Local, &r.to_string(), size))
            .collect::<std::result::Result<_, _>>()?;
        if !(v[0] < v[1] && v[1] < v[2] && v[2] < v[3]) {
            return Err(format!("ordering broken at {size} B: {v:?}"));
        }
        for route in [RouteKind::LocalPipe, RouteKind::LocalFit] {
            let row = run
                .local
                .row(Scenario::Local, &route.to_string(), size)
                .expect("checked above");
            let (n, m) = (row.hops.touching(Kind::N), row.hops.touching(Kind::M));
            if n + m > 0 {
                return Err(format!(
                    "{route} at {size} B sent {n} nComponent and {m} mComponent frames"
                ));
            }
        }
        parts.push(format!(
            "{size}B {:.2}<{:.2}<{:.2}<{:.2}",
            v[0], v[1], v[2], v[3]
        ));
    }
    Ok(format!(
        "p50 us pipe<fit<ddio<dma, pipe/fit with 0 N and 0 M frames: {}",
        parts.join(", ")
    ))
}

/// Payload bytes of the connect request and its reply, from the message
/// layout: request = stub u32, type u8, protocol u8, no-local flag u8,
/// target flag u8, target ip u32 + port u16; reply = status u8, skeleton
/// u32, connected flag u8, local ip u32 + port u16.
const CONNECT_REQUEST_BYTES: usize = 4 + 1 + 1 + 1 + 1 + 6;
const CONNECT_REPLY_BYTES: usize = 1 + 4 + 1 + 6;

fn connection_setup(run: &Run) -> Verdict {
    let topo = RackTopology::default();
    let link = topo.link;
    let constant = topo.cost.skeleton_create
        + serialization_delay(CONNECT_REQUEST_BYTES, link.bandwidth_bps)
        + serialization_delay(CONNECT_REPLY_BYTES, link.bandwidth_bps);
    let expected = (link.round_trip() + constant).as_micros_f64();
    let base = run
        .conn
        .row(Scenario::ConnSetup, "baseline", 0)
        .ok_or("no baseline row")?;
    if base.hops.total() != 0 {
        return Err(format!(
            "baseline connects sent {} rack frames",
            base.hops.total()
        ));
    }
    let mut parts = Vec::new();
    for mode in ["dma", "ddio"] {
        let r = run
            .conn
            .row(Scenario::ConnSetup, mode, 0)
            .ok_or(format!("no {mode} row"))?;
        let n = 50;
        let h = &r.hops;
        let audit = h.total() == 2 * n
            && h.op(Kind::P, Kind::N, Op::CREATE_SKEL) == n
            && h.op(Kind::N, Kind::P, Op::CREATE_SKEL) == n
            && h.touching(Kind::M) == 0
            && h.touching(Kind::Gnm) == 0;
        check(audit, format!("{mode} connect hop audit failed: {h:?}"))?;
        for (q, rack_us, base_us) in [
            ("p50", r.latency_us.p50, base.latency_us.p50),
            ("p99", r.latency_us.p99, base.latency_us.p99),
        ] {
            let overhead = rack_us - base_us;
            check(
                (overhead - expected).abs() < 1e-9,
                format!("{mode} {q} overhead {overhead:.3} us, expected {expected:.3} us"),
            )?;
        }
        parts.push(format!(
            "{mode} {:.3}-{:.3}",
            r.latency_us.p50, base.latency_us.p50
        ));
    }
    Ok(format!(
        "rack-baseline = {:.3} us = RTT {:.0} us + {:.3} us skeleton/serialization, 1 request + 1 reply per connect ({})",
        expected,
        link.round_trip().as_micros_f64(),
        constant.as_micros_f64(),
        parts.join(", ")
    ))
}

// ----- criterion 7 -----

/// Reference count written independently of the library's helpers.
fn oracle_counts(corpus: &[u8]) -> BTreeMap<String, u64> {
    let text = std::str::from_utf8(corpus).expect("generated corpora are ascii");
    let mut h: HashMap<&str, u64> = HashMap::new();
    for w in text.split_whitespace() {
        *h.entry(w).or_default() += 1;
    }
    h.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn word_count() -> Verdict {
    let corpus = wordcount::generate_corpus(10 << 20, 5_000, SEED);
    let oracle = oracle_counts(&corpus);
    let mut times = BTreeMap::new();
    for mode in [BenchMode::Dma, BenchMode::Ddio, BenchMode::Baseline] {
        let c = cfg(Scenario::WordCount, mode, &[1], 1);
        let (row, counts) = bench::wordcount_on(&c, &corpus).map_err(|e| format!("{mode}: {e}"))?;
        check(
            counts == oracle,
            format!("{mode} counts differ from the reference"),
        )?;
        times.insert(mode, row.elapsed_us);
    }
    let (dma, ddio, base) = (
        times[&BenchMode::Dma],
        times[&BenchMode::Ddio],
        times[&BenchMode::Baseline],
    );
    let line = format!(
        "{} distinct words over {} B equal the reference in all modes; time us dma={dma:.1} ddio={ddio:.1} baseline={base:.1}",
        oracle.len(),
        corpus.len()
    );
    if ddio <= dma {
        Ok(line)
    } else {
        Err(line)
    }
}

// ----- criterion 8 -----

fn state_machine() -> Verdict {
    const OPS: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut reg = GnmRegistry::new();
    let mut view = GnmView::default();
    let mut model_ips: BTreeMap<Ipv4Addr, ComponentId> = BTreeMap::new();
    let mut model_load: BTreeMap<ComponentId, u64> = BTreeMap::new();
    let mut proxy = ProxyState::new(Vec::new(), 64, 1 << 10, 1 << 20);
    let mut model_skels: BTreeMap<u32, Option<SocketAddrV4>> = BTreeMap::new();
    let mut model_binds: BTreeMap<SocketAddrV4, u32> = BTreeMap::new();
    let ip = |rng: &mut ChaCha8Rng| Ipv4Addr::new(10, 0, 0, rng.gen_range(1..24));
    let addr = |rng: &mut ChaCha8Rng| {
        SocketAddrV4::new(
            Ipv4Addr::new(10, 0, 0, rng.gen_range(1..4)),
            rng.gen_range(1..12),
        )
    };
    for step in 0..OPS {
        let op = rng.gen_range(0..9);
        let ctx = |what: &str| format!("op {step} ({what})");
        match op {
            0 => {
                let nc = ComponentId::n(rng.gen_range(0..6));
                let ips: Vec<Ipv4Addr> = (0..rng.gen_range(1..3)).map(|_| ip(&mut rng)).collect();
                let descs: Vec<NicDescriptor> = ips
                    .iter()
                    .map(|&ip| NicDescriptor {
                        ncomponent: nc,
                        nic_name: "eth".into(),
                        ip,
                        link_capacity_bps: 1,
                    })
                    .collect();
                let distinct: BTreeSet<_> = ips.iter().collect();
                let clash =
                    distinct.len() != ips.len() || ips.iter().any(|i| model_ips.contains_key(i));
                let got = reg.register_ncomponent(nc, &descs);
                check(got.is_err() == clash, ctx("register"))?;
                if !clash {
                    for i in ips {
                        model_ips.insert(i, nc);
                    }
                    model_load.entry(nc).or_insert(0);
                }
            }
            1 => {
                let nc = ComponentId::n(rng.gen_range(0..6));
                let known = model_load.remove(&nc).is_some();
                check(
                    reg.deregister_ncomponent(nc).is_ok() == known,
                    ctx("deregister"),
                )?;
                model_ips.retain(|_, c| *c != nc);
            }
            2 => {
                let i = ip(&mut rng);
                check(
                    reg.lookup_ncomponent_by_ip(i) == model_ips.get(&i).copied(),
                    ctx("lookup"),
                )?;
            }
            3 => match reg.allocate_nic() {
                Ok((nc, i)) => {
                    let min = model_load.values().min().copied();
                    check(
                        model_load.get(&nc).copied() == min,
                        ctx("allocate picks a least loaded nComponent"),
                    )?;
                    check(
                        model_ips.get(&i) == Some(&nc),
                        ctx("allocate returns an ip of that nComponent"),
                    )?;
                    *model_load.get_mut(&nc).expect("registered") += 1;
                }
                Err(_) => {
                    let any = model_load
                        .keys()
                        .any(|nc| model_ips.values().any(|c| c == nc));
                    check(!any, ctx("allocate fails only with no NIC"))?;
                }
            },
            4 => {
                if let Some(&nc) = model_load
                    .keys()
                    .nth(rng.gen_range(0..model_load.len().max(1)))
                {
                    reg.release_nic(nc);
                    let l = model_load.get_mut(&nc).expect("listed");
                    *l = l.saturating_sub(1);
                }
            }
            5 => {
                let pc = ComponentId::p(rng.gen_range(0..3));
                match proxy.proxy_create_skeleton(SocketMeta::tcp(None), (pc, step as u32)) {
                    Ok(id) => {
                        check(!model_skels.contains_key(&id), ctx("fresh skeleton id"))?;
                        model_skels.insert(id, None);
                    }
                    Err(_) => check(
                        model_skels.len() >= 64,
                        ctx("create fails only at the limit"),
                    )?,
                }
            }
            6 => {
                let a = addr(&mut rng);
                let Some(&id) = model_skels
                    .keys()
                    .nth(rng.gen_range(0..model_skels.len().max(1)))
                else {
                    continue;
                };
                let ok = !model_binds.contains_key(&a) && model_skels[&id].is_none();
                check(proxy.record_binding(id, a).is_ok() == ok, ctx("bind"))?;
                if ok {
                    model_binds.insert(a, id);
                    model_skels.insert(id, Some(a));
                }
            }
            7 => {
                let Some(&id) = model_skels
                    .keys()
                    .nth(rng.gen_range(0..model_skels.len().max(1)))
                else {
                    continue;
                };
                check(proxy.destroy(id).is_some(), ctx("close"))?;
                if let Some(Some(a)) = model_skels.remove(&id) {
                    model_binds.remove(&a);
                }
            }
            _ => {
                let a = addr(&mut rng);
                let expect = model_binds
                    .get(&a)
                    .map(|id| proxy.get(*id).map(|s| s.owner));
                check(
                    proxy.proxy_resolve_binding(a) == expect.flatten(),
                    ctx("resolve"),
                )?;
            }
        }
        // registry function: every ip names exactly the nComponent the model says
        let snapshot = reg.snapshot();
        check(snapshot.len() == model_ips.len(), ctx("registry size"))?;
        for (i, nc) in &snapshot {
            check(model_ips.get(i) == Some(nc), ctx("registry entry"))?;
            check(
                model_load.contains_key(nc),
                ctx("ip of a deregistered nComponent"),
            )?;
        }
        check(
            reg.registered().collect::<Vec<_>>() == model_load.keys().copied().collect::<Vec<_>>(),
            ctx("registered set"),
        )?;
        for (nc, l) in &model_load {
            check(reg.load(*nc) == Some(*l), ctx("load count"))?;
        }
        view.apply(reg.generation(), &snapshot);
        for (i, nc) in &model_ips {
            check(view.lookup(*i) == Some(*nc), ctx("replica agrees"))?;
        }
        // binding consistency
        proxy
            .check_consistency()
            .map_err(|e| format!("{}: {e}", ctx("proxy")))?;
        check(
            proxy.binding_count() == model_binds.len(),
            ctx("binding count"),
        )?;
        check(
            proxy.skeleton_count() == model_skels.len(),
            ctx("skeleton count"),
        )?;
    }
    Ok(format!(
        "{OPS} random registry and proxy operations, invariants held after every one"
    ))
}

// ----- criterion 9 -----

fn determinism(first: &Run) -> Verdict {
    let second = run_2_to_6().map_err(|e| format!("second run failed: {e}"))?;
    let (a, b) = (first.compared_columns(), second.compared_columns());
    if a == b {
        Ok(format!(
            "{} hop and latency records bit-identical across two runs",
            a.len()
        ))
    } else {
        let at = a
            .iter()
            .zip(&b)
            .position(|(x, y)| x != y)
            .unwrap_or(a.len().min(b.len()));
        Err(format!(
            "runs diverge at record {at}: {:?} vs {:?}",
            a.get(at),
            b.get(at)
        ))
    }
}

fn main() {
    let mut failures = 0;
    let mut report = |n: u32, name: &str, secs: f64, v: Verdict| match v {
        Ok(detail) => println!("criterion {n} {name}: PASS ({secs:.1}s) {detail}"),
        Err(detail) => {
            failures += 1;
            println!("criterion {n} {name}: FAIL ({secs:.1}s) {detail}");
        }
    };
    let t = Instant::now();
    let v = fidelity();
    report(1, "fidelity", t.elapsed().as_secs_f64(), v);

    // criteria 2 to 6 share one set of runs
    let t = Instant::now();
    let run = run_2_to_6();
    let elapsed = t.elapsed().as_secs_f64();
    match &run {
        Ok(run) => {
            report(2, "hop law", elapsed, hop_law(run));
            report(3, "latency ordering", elapsed, latency_ordering(run));
            report(
                4,
                "throughput convergence",
                elapsed,
                throughput_convergence(run),
            );
            report(5, "local route ordering", elapsed, local_ordering(run));
            report(6, "connection setup", elapsed, connection_setup(run));
        }
        Err(e) => {
            for (n, name) in [
                (2, "hop law"),
                (3, "latency ordering"),
                (4, "throughput convergence"),
                (5, "local route ordering"),
                (6, "connection setup"),
            ] {
                report(n, name, elapsed, Err(format!("benchmarks failed: {e}")));
            }
        }
    }

    let t = Instant::now();
    let v = word_count();
    report(7, "word count", t.elapsed().as_secs_f64(), v);
    let t = Instant::now();
    let v = state_machine();
    report(
        8,
        "registry and proxy state machine",
        t.elapsed().as_secs_f64(),
        v,
    );
    let t = Instant::now();
    let v = match &run {
        Ok(run) => determinism(run),
        Err(e) => Err(format!("first run failed: {e}")),
    };
    report(9, "determinism", t.elapsed().as_secs_f64() + elapsed, v);

    if failures > 0 {
        println!("acceptance: {failures} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all 9 criteria passed");
}
