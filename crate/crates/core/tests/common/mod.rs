#![allow(dead_code)]

use rand::{Rng, RngCore};
use splitnet::bench::local_pair;
use splitnet::pcomponent::{Done, RouteKind, SocketHandle};
use splitnet::rack::Rack;
use splitnet::topology::RackTopology;

pub const ROUTES: [RouteKind; 4] = [
    RouteKind::SkelDma,
    RouteKind::SkelDdio,
    RouteKind::LocalPipe,
    RouteKind::LocalFit,
];

/// A fresh default rack with a connected stub pair on `route`:
/// (rack, server, client).
pub fn connected(route: RouteKind) -> (Rack, SocketHandle, SocketHandle) {
    let topo = RackTopology {
        local_fastpath: matches!(route, RouteKind::LocalPipe | RouteKind::LocalFit),
        ..Default::default()
    };
    let mut rack = Rack::new(topo).expect("default rack");
    let (s, c) = local_pair(&mut rack, route, 5000).expect("pair");
    (rack, s, c)
}

pub fn random_bytes(rng: &mut impl RngCore, len: usize) -> Vec<u8> {
    let mut v = vec![0; len];
    rng.fill_bytes(&mut v);
    v
}

/// Random cut points splitting `len` into non-empty pieces.
pub fn split_points(rng: &mut impl Rng, len: usize) -> Vec<usize> {
    let pieces = rng.gen_range(1..=len.min(8));
    let mut cuts: Vec<usize> = (0..pieces - 1)
        .map(|_| rng.gen_range(1..len.max(2)))
        .filter(|&c| c < len)
        .collect();
    cuts.sort_unstable();
    cuts.dedup();
    let mut out = Vec::new();
    let mut prev = 0;
    for c in cuts.into_iter().chain([len]) {
        out.push(c - prev);
        prev = c;
    }
    out
}

/// Sends `msg` from `from` to `to` as randomly sized sends interleaved with
/// randomly sized receives posted in random order, and returns the byte
/// stream as received.
pub fn interleaved(
    rack: &mut Rack,
    from: SocketHandle,
    to: SocketHandle,
    msg: &[u8],
    rng: &mut impl Rng,
) -> Result<Vec<u8>, String> {
    let mut sends = Vec::new();
    let mut recvs = Vec::new();
    let mut off = 0;
    let mut budget = msg.len();
    for piece in split_points(rng, msg.len()) {
        // while the posted maxima fit in the message, every posted receive
        // is sure to find a byte
        while budget > 0 && rng.gen_bool(0.5) {
            let max = rng.gen_range(1..=budget);
            budget -= max;
            recvs.push(rack.begin_recv(to, max).map_err(|e| e.to_string())?);
        }
        sends.push(
            rack.begin_send(from, msg[off..off + piece].to_vec())
                .map_err(|e| e.to_string())?,
        );
        off += piece;
    }
    let mut got = Vec::new();
    for t in recvs {
        match rack.wait(t) {
            Ok(Done::Data(d)) => got.extend(d),
            other => return Err(format!("recv completed with {other:?}")),
        }
    }
    for t in sends {
        rack.wait(t).map_err(|e| format!("send failed: {e}"))?;
    }
    while got.len() < msg.len() {
        let more = rack
            .recv(to, rng.gen_range(1..=msg.len()))
            .map_err(|e| e.to_string())?;
        if more.is_empty() {
            return Err(format!(
                "stream ended after {} of {} bytes",
                got.len(),
                msg.len()
            ));
        }
        got.extend(more);
    }
    Ok(got)
}
