mod common;

use std::net::{Ipv4Addr, SocketAddrV4};

use common::{connected, interleaved, random_bytes, ROUTES};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splitnet::bench::apps::{EchoServer, Listener};
use splitnet::interconnect::{Kind, Op};
use splitnet::pcomponent::{RouteKind, SockState, TransferMode};
use splitnet::rack::Rack;
use splitnet::topology::RackTopology;
use splitnet::Error;

const NIC: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 1);
const REMOTE: Ipv4Addr = Ipv4Addr::new(192, 168, 1, 20);

#[test]
fn every_route_carries_bytes_both_ways() {
    for route in ROUTES {
        let (mut rack, s, c) = connected(route);
        assert_eq!(rack.route(s), Some(route));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for len in [1, 100, 4096, 70_000] {
            let m = random_bytes(&mut rng, len);
            assert_eq!(
                interleaved(&mut rack, c, s, &m, &mut rng).unwrap(),
                m,
                "{route} client to server, {len} bytes"
            );
            assert_eq!(
                interleaved(&mut rack, s, c, &m, &mut rng).unwrap(),
                m,
                "{route} server to client, {len} bytes"
            );
        }
    }
}

#[test]
fn close_delivers_eof_after_the_data() {
    for route in ROUTES {
        let (mut rack, s, c) = connected(route);
        rack.send(c, b"last words").unwrap();
        rack.close(c).unwrap();
        assert_eq!(rack.recv_exact(s, 10).unwrap(), b"last words", "{route}");
        assert!(
            rack.recv(s, 10).unwrap().is_empty(),
            "{route} should report end of stream"
        );
        assert_eq!(rack.state(c), None);
        rack.close(s).unwrap();
    }
}

#[test]
fn close_interrupts_a_pending_receive() {
    for route in ROUTES {
        let (mut rack, s, c) = connected(route);
        let t = rack.begin_recv(s, 100).unwrap();
        let closing = rack.begin_close(s).unwrap();
        assert!(matches!(rack.wait(t), Err(Error::Interrupted)), "{route}");
        rack.wait(closing).unwrap();
        rack.close(c).unwrap();
    }
}

#[test]
fn dma_sends_flush_once_and_fetch_once() {
    let (mut rack, s, c) = connected(RouteKind::SkelDma);
    rack.send(c, b"warm").unwrap();
    rack.recv_exact(s, 4).unwrap();
    rack.reset_instrumentation();
    const N: u64 = 25;
    for i in 0..N {
        let m = vec![i as u8; 300];
        rack.send(c, &m).unwrap();
        assert_eq!(rack.recv_exact(s, 300).unwrap(), m);
    }
    let h = rack.hops();
    // the receive side writes into memory too, but from the nComponent
    assert_eq!(h.op(Kind::P, Kind::M, Op::M_WRITE), N);
    assert_eq!(h.op(Kind::N, Kind::M, Op::M_READ), N);
    assert_eq!(h.op(Kind::P, Kind::N, Op::SEND_NOTIFY), N);
    assert_eq!(h.op(Kind::N, Kind::M, Op::M_WRITE), N);
    assert_eq!(h.op(Kind::P, Kind::M, Op::M_READ), N);
    assert_eq!(rack.hop_count("P->M:M_WRITE").unwrap(), N);
}

#[test]
fn ddio_never_touches_memory() {
    let (mut rack, s, c) = connected(RouteKind::SkelDdio);
    rack.send(c, b"warm").unwrap();
    rack.recv_exact(s, 4).unwrap();
    rack.reset_instrumentation();
    for i in 0..25u8 {
        let m = vec![i; 300];
        rack.send(c, &m).unwrap();
        assert_eq!(rack.recv_exact(s, 300).unwrap(), m);
    }
    assert_eq!(rack.hops().touching(Kind::M), 0);
    assert_eq!(rack.hops().op(Kind::P, Kind::N, Op::SEND_INLINE), 25);
}

#[test]
fn local_routes_skip_the_nic_and_memory() {
    for route in [RouteKind::LocalPipe, RouteKind::LocalFit] {
        let (mut rack, s, c) = connected(route);
        rack.reset_instrumentation();
        rack.send(c, &[9; 5000]).unwrap();
        assert_eq!(rack.recv_exact(s, 5000).unwrap(), vec![9; 5000]);
        assert_eq!(rack.hops().touching(Kind::N), 0, "{route}");
        assert_eq!(rack.hops().touching(Kind::M), 0, "{route}");
    }
}

#[test]
fn external_echo_through_a_connected_stub() {
    for mode in [TransferMode::Dma, TransferMode::Ddio] {
        let mut rack = Rack::new(RackTopology::default()).unwrap();
        rack.add_external_host(REMOTE);
        rack.spawn_app(Box::new(EchoServer::new(SocketAddrV4::new(REMOTE, 80))));
        let s = rack.socket(1).unwrap();
        rack.set_mode(s, mode).unwrap();
        rack.connect(s, SocketAddrV4::new(REMOTE, 80)).unwrap();
        assert_eq!(rack.state(s), Some(SockState::Connected));
        assert_eq!(rack.local_addr(s).map(|a| *a.ip()), Some(NIC));
        assert_eq!(rack.peer_addr(s), Some(SocketAddrV4::new(REMOTE, 80)));
        let m: Vec<u8> = (0..3000u32).map(|i| (i * 7) as u8).collect();
        rack.send(s, &m).unwrap();
        assert_eq!(rack.recv_exact(s, m.len()).unwrap(), m);
        rack.close(s).unwrap();
        assert_eq!(rack.ncomponent(0).unwrap().skeleton_count(), 0);
    }
}

#[test]
fn refused_and_unroutable_connects() {
    let mut rack = Rack::new(RackTopology::default()).unwrap();
    rack.add_external_host(REMOTE);
    let s = rack.socket(0).unwrap();
    assert!(matches!(
        rack.connect(s, SocketAddrV4::new(REMOTE, 81)),
        Err(Error::ConnRefused)
    ));
    let s = rack.socket(0).unwrap();
    assert!(matches!(
        rack.connect(s, SocketAddrV4::new(Ipv4Addr::new(172, 16, 0, 1), 1)),
        Err(Error::NoRoute)
    ));
    // a rack-local address with nothing listening
    let s = rack.socket(0).unwrap();
    assert!(matches!(
        rack.connect(s, SocketAddrV4::new(NIC, 4444)),
        Err(Error::ConnRefused)
    ));
    assert_eq!(rack.ncomponent(0).unwrap().skeleton_count(), 0);
}

#[test]
fn binding_rules() {
    let mut rack = Rack::new(RackTopology::default()).unwrap();
    let a = rack.socket(0).unwrap();
    rack.bind(a, SocketAddrV4::new(NIC, 6000)).unwrap();
    let b = rack.socket(1).unwrap();
    assert!(matches!(
        rack.bind(b, SocketAddrV4::new(NIC, 6000)),
        Err(Error::AddrInUse)
    ));
    assert!(matches!(
        rack.bind(b, SocketAddrV4::new(Ipv4Addr::new(10, 9, 9, 9), 1)),
        Err(Error::NoSuchIp(_))
    ));
    rack.bind(b, SocketAddrV4::new(Ipv4Addr::UNSPECIFIED, 0))
        .unwrap();
    let local = rack.local_addr(b).unwrap();
    assert_eq!(*local.ip(), NIC);
    assert_ne!(local.port(), 0);
    rack.close(a).unwrap();
    let c = rack.socket(1).unwrap();
    rack.bind(c, SocketAddrV4::new(NIC, 6000))
        .expect("the port is free again after close");
}

#[test]
fn mode_is_fixed_once_data_moves() {
    let (mut rack, s, c) = connected(RouteKind::SkelDdio);
    rack.set_mode(c, TransferMode::Dma).unwrap();
    rack.send(c, b"x").unwrap();
    rack.recv_exact(s, 1).unwrap();
    assert!(rack.set_mode(c, TransferMode::Ddio).is_err());
}

#[test]
fn listening_stub_accepts_external_clients() {
    let mut rack = Rack::new(RackTopology::default()).unwrap();
    rack.add_external_host(Ipv4Addr::new(192, 168, 1, 10));
    let l = rack.socket(0).unwrap();
    rack.bind(l, SocketAddrV4::new(NIC, 7000)).unwrap();
    rack.listen(l, 4).unwrap();
    let msgs = vec![b"hello rack".to_vec()];
    let id = rack.spawn_app(Box::new(splitnet::bench::apps::EchoClient::new(
        Ipv4Addr::new(192, 168, 1, 10),
        SocketAddrV4::new(NIC, 7000),
        msgs,
        None,
    )));
    let conn = rack.accept(l).unwrap();
    assert_eq!(
        rack.peer_addr(conn).map(|a| *a.ip()),
        Some(Ipv4Addr::new(192, 168, 1, 10))
    );
    let m = rack.recv_exact(conn, 10).unwrap();
    rack.send(conn, &m).unwrap();
    rack.run_while(|r| {
        !r.app::<splitnet::bench::apps::EchoClient>(id)
            .unwrap()
            .is_done()
    })
    .unwrap();
    let c = rack.app::<splitnet::bench::apps::EchoClient>(id).unwrap();
    assert!(c.error.is_none(), "{:?}", c.error);
    assert_eq!(c.completed, 1);
}

#[test]
fn failed_ncomponent_fails_its_sockets() {
    let mut rack = Rack::new(RackTopology::default()).unwrap();
    rack.add_external_host(REMOTE);
    let lid = rack.spawn_app(Box::new(Listener::new(SocketAddrV4::new(REMOTE, 90))));
    let s = rack.socket(0).unwrap();
    rack.connect(s, SocketAddrV4::new(REMOTE, 90)).unwrap();
    let t = rack.begin_recv(s, 10).unwrap();
    rack.fail_ncomponent(0).unwrap();
    assert!(rack.wait(t).is_err());
    assert_eq!(rack.gnm().registry().lookup_ncomponent_by_ip(NIC), None);
    let _ = rack.app::<Listener>(lid);
}

#[test]
fn buffers_round_trip_through_memory_and_the_cache() {
    let mut topo = RackTopology::default();
    topo.pcomponents[0].excache_bytes = 8192;
    let mut rack = Rack::new(topo).unwrap();
    let a = rack.alloc_buffer(0, 4096).unwrap();
    let b = rack.alloc_buffer(0, 4096).unwrap();
    let c = rack.alloc_buffer(0, 4096).unwrap();
    rack.buffer_write(a, 0, &[1; 4096]).unwrap();
    rack.buffer_write(b, 10, b"middle").unwrap();
    // a third buffer pushes the oldest one out to memory
    rack.buffer_write(c, 0, &[3; 4096]).unwrap();
    assert!(!rack.pcomponent(0).unwrap().cached(a));
    assert_eq!(rack.buffer_read(a, 0, 4096).unwrap(), vec![1; 4096]);
    assert_eq!(rack.buffer_read(b, 10, 6).unwrap(), b"middle");
    rack.cache_flush(c).unwrap();
    rack.cache_load(c).unwrap();
    assert_eq!(rack.buffer_read(c, 4090, 6).unwrap(), vec![3; 6]);
    rack.free_buffer(a).unwrap();
    assert!(rack.buffer_read(a, 0, 1).is_err());
}

#[test]
fn buffer_send_moves_cached_bytes() {
    for route in [RouteKind::SkelDma, RouteKind::SkelDdio, RouteKind::LocalFit] {
        let (mut rack, s, c) = connected(route);
        let buf = rack.alloc_buffer(1, 2000).unwrap();
        let m: Vec<u8> = (0..2000u32).map(|i| (i % 251) as u8).collect();
        rack.buffer_write(buf, 0, &m).unwrap();
        let pc = rack.route(c).map(|_| c.pc).unwrap();
        assert_eq!(pc, 1);
        assert_eq!(rack.send_buffer(c, buf, 2000).unwrap(), 2000);
        assert_eq!(rack.recv_exact(s, 2000).unwrap(), m, "{route}");
    }
}
