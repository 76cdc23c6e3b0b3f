//! Randomized invariants of the assembled rack.

mod common;

use std::net::{Ipv4Addr, SocketAddrV4};

use common::{connected, interleaved, random_bytes, ROUTES};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splitnet::bench::apps::Listener;
use splitnet::interconnect::{HopCounters, Kind, Op};
use splitnet::pcomponent::{RouteKind, TransferMode};
use splitnet::rack::Rack;
use splitnet::topology::RackTopology;

fn sends_to_external(mode: TransferMode, sizes: &[usize]) -> HopCounters {
    let remote = Ipv4Addr::new(192, 168, 1, 20);
    let mut rack = Rack::new(RackTopology::default()).unwrap();
    rack.add_external_host(remote);
    rack.spawn_app(Box::new(Listener::new(SocketAddrV4::new(remote, 9))));
    let s = rack.socket(0).unwrap();
    rack.set_mode(s, mode).unwrap();
    rack.connect(s, SocketAddrV4::new(remote, 9)).unwrap();
    // first send allocates the socket's regions
    rack.send(s, &[0; 16]).unwrap();
    rack.reset_instrumentation();
    for &n in sizes {
        rack.send(s, &vec![7; n]).unwrap();
    }
    rack.hops().clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn byte_stream_survives_any_route(route in 0..ROUTES.len(), len in 1usize..4096, seed: u64) {
        let route = ROUTES[route];
        let (mut rack, server, client) = connected(route);
        prop_assert_eq!(rack.route(client), Some(route));
        // count the data path only, not connection setup
        rack.reset_instrumentation();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let msg = random_bytes(&mut rng, len);
        let got = interleaved(&mut rack, client, server, &msg, &mut rng).map_err(TestCaseError::fail)?;
        prop_assert_eq!(got, msg);
        let local = matches!(route, RouteKind::LocalPipe | RouteKind::LocalFit);
        if local {
            prop_assert_eq!(rack.hops().touching(Kind::N), 0);
            prop_assert_eq!(rack.hops().touching(Kind::M), 0);
        }
        if route == RouteKind::SkelDdio {
            prop_assert_eq!(rack.hops().touching(Kind::M), 0);
        }
    }

    #[test]
    fn each_dma_send_is_one_flush_and_one_fetch(sizes in proptest::collection::vec(1usize..2048, 1..16)) {
        let h = sends_to_external(TransferMode::Dma, &sizes);
        let n = sizes.len() as u64;
        prop_assert_eq!(h.op(Kind::P, Kind::M, Op::M_WRITE), n);
        prop_assert_eq!(h.op(Kind::N, Kind::M, Op::M_READ), n);
    }

    #[test]
    fn ddio_sends_never_touch_memory(sizes in proptest::collection::vec(1usize..2048, 1..16)) {
        let h = sends_to_external(TransferMode::Ddio, &sizes);
        prop_assert_eq!(h.touching(Kind::M), 0);
        prop_assert!(h.total() > 0);
    }

    #[test]
    fn identical_runs_are_identical(sizes in proptest::collection::vec(1usize..2048, 1..8)) {
        let a = sends_to_external(TransferMode::Dma, &sizes);
        let b = sends_to_external(TransferMode::Dma, &sizes);
        prop_assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }
}
