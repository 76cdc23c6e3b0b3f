//! Latency summaries.

/// Nearest-rank percentile of an ascending sample set: the smallest value
/// with at least `p` percent of the samples at or below it.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
}

impl Summary {
    pub fn of(samples: &[f64]) -> Summary {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        Summary {
            p50: percentile(&s, 50.0),
            p95: percentile(&s, 95.0),
            p99: percentile(&s, 99.0),
        }
    }
}

/// Megabits per second for `bytes` moved in `elapsed_us` microseconds.
pub fn mbps(bytes: u64, elapsed_us: f64) -> f64 {
    if elapsed_us <= 0.0 {
        return 0.0;
    }
    (bytes as f64 * 8.0) / elapsed_us
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nearest_rank_on_small_sets() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        assert_eq!(percentile(&s, 50.0), 5.0);
        assert_eq!(percentile(&s, 95.0), 10.0);
        assert_eq!(percentile(&[7.0], 99.0), 7.0);
        assert_eq!(percentile(&[], 50.0), 0.0);
    }

    #[test]
    fn throughput_arithmetic() {
        // 1 MB in 8000 us is 1000 Mb/s.
        assert_eq!(mbps(1_000_000, 8_000.0), 1_000.0);
    }

    proptest! {
        #[test]
        fn percentiles_are_monotone_members(v in proptest::collection::vec(0.0f64..1e6, 1..300)) {
            let s = Summary::of(&v);
            prop_assert!(s.p50 <= s.p95 && s.p95 <= s.p99);
            for x in [s.p50, s.p95, s.p99] {
                prop_assert!(v.contains(&x));
            }
        }
    }
}
