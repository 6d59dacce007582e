//! Fragments-per-object statistics, free-space structure and modeled
//! throughput. Throughput figures come from the cost model, not a clock.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::store::{Store, WriteMeter};
use crate::volume::Extent;

/// Maximal runs of physically adjacent clusters, taken in logical order.
pub fn fragments_of(extents: &[Extent]) -> u64 {
    let mut count = 0;
    let mut prev_end = None;
    for e in extents.iter().filter(|e| e.length > 0) {
        if prev_end != Some(e.offset) {
            count += 1;
        }
        prev_end = Some(e.end());
    }
    count
}

/// Nearest-rank percentile of sorted data: element `ceil(p * n) - 1`.
pub fn nearest_rank(sorted: &[u64], p: f64) -> u64 {
    assert!(!sorted.is_empty());
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Reads issued during one reporting interval.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ReadStats {
    pub reads: u64,
    pub bytes: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragReport {
    pub policy: String,
    pub seed: u64,
    pub storage_age: f64,
    pub live_objects: u64,
    pub live_bytes: u64,
    pub frag_mean: f64,
    pub frag_p50: u64,
    pub frag_p99: u64,
    pub frag_max: u64,
    /// Free run length in clusters -> number of runs.
    pub free_runs: BTreeMap<u64, u64>,
    pub free_bytes: u64,
    pub deferred_bytes: u64,
    pub internal_frag_bytes: u64,
    /// Modeled bytes/second reading every live object once.
    pub est_read_throughput: f64,
    /// Modeled bytes/second of writes since the previous report.
    pub est_write_throughput: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampled_reads: Option<ReadStats>,
}

impl FragReport {
    pub fn free_runs_count(&self) -> u64 {
        self.free_runs.values().sum()
    }
}

pub fn build_report(store: &Store, interval: WriteMeter, reads: Option<ReadStats>, seed: u64) -> Result<FragReport> {
    let vol = store.volume();
    let cs = vol.cluster_size();
    let mut frags = Vec::with_capacity(store.len());
    let mut bytes = 0u64;
    let mut seconds = 0.0;
    for r in store.records() {
        frags.push(r.fragments());
        bytes += r.size;
        seconds += vol.read_cost(&r.extents, &store.config().cost);
    }
    frags.sort_unstable();
    let (mean, p50, p99, max) = if frags.is_empty() {
        (0.0, 0, 0, 0)
    } else {
        let sum: u64 = frags.iter().sum();
        (
            sum as f64 / frags.len() as f64,
            nearest_rank(&frags, 0.5),
            nearest_rank(&frags, 0.99),
            *frags.last().unwrap(),
        )
    };
    Ok(FragReport {
        policy: store.config().policy.kind.name().to_string(),
        seed,
        storage_age: store.clock().storage_age()?,
        live_objects: frags.len() as u64,
        live_bytes: store.clock().live_bytes,
        frag_mean: mean,
        frag_p50: p50,
        frag_p99: p99,
        frag_max: max,
        free_runs: vol.free_extent_histogram(),
        free_bytes: vol.free_clusters() * cs,
        deferred_bytes: vol.deferred_clusters() * cs,
        internal_frag_bytes: store.internal_fragmentation_bytes(),
        est_read_throughput: ratio(bytes as f64, seconds),
        est_write_throughput: ratio(interval.bytes as f64, interval.seconds),
        sampled_reads: reads,
    })
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ext(v: &[(u64, u64)]) -> Vec<Extent> {
        v.iter().map(|&(o, l)| Extent::new(o, l)).collect()
    }

    #[test]
    fn fragment_examples() {
        assert_eq!(fragments_of(&ext(&[(0, 10)])), 1);
        assert_eq!(fragments_of(&ext(&[(0, 10), (50, 10)])), 2);
        assert_eq!(fragments_of(&ext(&[(0, 10), (10, 10), (50, 6)])), 2);
        // Physically adjacent but out of logical order is a seek.
        assert_eq!(fragments_of(&ext(&[(10, 10), (0, 10)])), 2);
    }

    #[test]
    fn nearest_rank_examples() {
        let v = [1, 1, 2, 3, 4, 5, 6, 7, 8, 20];
        assert_eq!(nearest_rank(&v, 0.5), 4);
        assert_eq!(nearest_rank(&v, 0.99), 20);
        assert_eq!(nearest_rank(&[9], 0.5), 9);
        assert_eq!(nearest_rank(&[9], 0.0), 9);
    }

    #[test]
    fn report_round_trips_through_json() {
        let r = FragReport {
            policy: "first_fit".into(),
            seed: 3,
            storage_age: 2.0000000000000004,
            live_objects: 10,
            live_bytes: 1 << 20,
            frag_mean: 1.1,
            frag_p50: 1,
            frag_p99: 3,
            frag_max: 3,
            free_runs: [(1, 4), (100, 1)].into_iter().collect(),
            free_bytes: 12345,
            deferred_bytes: 0,
            internal_frag_bytes: 7,
            est_read_throughput: 0.1 + 0.2,
            est_write_throughput: 1.0 / 3.0,
            sampled_reads: Some(ReadStats {
                reads: 2,
                bytes: 8,
                seconds: 1e-9,
            }),
        };
        let back: FragReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn fragments_equal_coalesced_extent_count(
            lens in prop::collection::vec(1u64..5, 1..20),
            gaps in prop::collection::vec(0u64..3, 20),
        ) {
            let mut at = 0;
            let mut v = Vec::new();
            for (l, g) in lens.iter().zip(&gaps) {
                at += g;
                v.push(Extent::new(at, *l));
                at += l;
            }
            prop_assert_eq!(fragments_of(&v), crate::volume::coalesce(&v).len() as u64);
        }
    }
}
