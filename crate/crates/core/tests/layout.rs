use std::collections::BTreeMap;

use agelab::alloc::{AllocPolicy, PolicyKind};
use agelab::store::{Store, StoreConfig};
use agelab::volume::{Extent, ObjectId, Volume};
use agelab::Error;
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Op {
    Put(u64),
    Rewrite(usize, u64),
    Delete(usize),
    Checkpoint,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (1u64..400_000).prop_map(Op::Put),
        4 => (any::<usize>(), 1u64..400_000).prop_map(|(i, s)| Op::Rewrite(i, s)),
        2 => any::<usize>().prop_map(Op::Delete),
        1 => Just(Op::Checkpoint),
    ]
}

fn apply(store: &mut Store, next: &mut u64, op: &Op) -> Result<(), Error> {
    let ids = store.ids();
    let pick = |i: usize| ids[i % ids.len()];
    let r = match *op {
        Op::Put(size) => {
            *next += 1;
            store.put_new(ObjectId(*next), size).map(|_| ())
        }
        Op::Rewrite(i, size) if !ids.is_empty() => store.safe_write(pick(i), size).map(|_| ()),
        Op::Delete(i) if !ids.is_empty() => store.delete(pick(i)),
        Op::Checkpoint => {
            store.checkpoint();
            Ok(())
        }
        _ => Ok(()),
    };
    match r {
        Err(Error::NoSpace { .. }) => Ok(()),
        r => r,
    }
}

/// Naive reconstruction: walk every cluster, collect (offset, cluster) per
/// object, sort by offset, and merge physically adjacent neighbours.
fn naive_layout(vol: &Volume) -> BTreeMap<ObjectId, Vec<Extent>> {
    let mut pieces: BTreeMap<ObjectId, Vec<(u64, u64)>> = BTreeMap::new();
    for c in 0..vol.total_clusters() {
        if let Some(m) = vol.marker(c) {
            pieces.entry(m.object).or_default().push((m.offset, c));
        }
    }
    pieces
        .into_iter()
        .map(|(id, mut v)| {
            v.sort();
            let mut extents: Vec<Extent> = Vec::new();
            for (_, c) in v {
                match extents.last_mut() {
                    Some(e) if e.end() == c => e.length += 1,
                    _ => extents.push(Extent::new(c, 1)),
                }
            }
            (id, extents)
        })
        .collect()
}

fn store(kind: PolicyKind, clusters: u64, wrs: u64) -> Store {
    let vol = Volume::with_default_bands(clusters, 4096).unwrap();
    let mut cfg = StoreConfig::new(AllocPolicy::new(kind));
    cfg.write_request_size = wrs;
    Store::new(vol, cfg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn marker_scan_matches_naive_reconstruction(
        kind in prop::sample::select(PolicyKind::ALL.to_vec()),
        ops in prop::collection::vec(op(), 1..60),
    ) {
        let mut s = store(kind, 2048, 65536);
        let mut next = 0;
        for op in &ops {
            apply(&mut s, &mut next, op).unwrap();
            let scanned = s.scan_layout().unwrap();
            prop_assert_eq!(&scanned, &naive_layout(s.volume()));
            for r in s.records() {
                prop_assert_eq!(&scanned[&r.id], &r.extents);
            }
        }
    }

    #[test]
    fn contiguous_policies_fragment_at_most_once_per_request(
        kind in prop::sample::select(vec![
            PolicyKind::FirstFit, PolicyKind::BestFit, PolicyKind::WorstFit, PolicyKind::Buddy,
        ]),
        wrs_pages in 1u64..40,
        ops in prop::collection::vec(op(), 1..60),
    ) {
        let wrs = wrs_pages * 4096;
        let mut s = store(kind, 2048, wrs);
        let mut next = 0;
        for op in &ops {
            apply(&mut s, &mut next, op).unwrap();
            for r in s.records() {
                prop_assert!(r.fragments() <= r.size.div_ceil(wrs));
            }
        }
    }

    #[test]
    fn hinted_contiguous_writes_are_one_fragment(
        kind in prop::sample::select(vec![PolicyKind::FirstFit, PolicyKind::BestFit, PolicyKind::WorstFit]),
        ops in prop::collection::vec(op(), 1..60),
    ) {
        let vol = Volume::with_default_bands(2048, 4096).unwrap();
        let mut cfg = StoreConfig::new(AllocPolicy::new(kind));
        cfg.size_hint = true;
        let mut s = Store::new(vol, cfg).unwrap();
        let mut next = 0;
        for op in &ops {
            apply(&mut s, &mut next, op).unwrap();
            for r in s.records() {
                prop_assert_eq!(r.fragments(), 1);
            }
        }
    }
}

#[test]
fn tampered_marker_is_reported_as_corruption() {
    let mut s = store(PolicyKind::FirstFit, 256, 65536);
    s.put_new(ObjectId(1), 100_000).unwrap();
    s.put_new(ObjectId(2), 100_000).unwrap();
    let mut snap = agelab::snapshot::Snapshot::capture(&s);
    snap.markers[0].object = ObjectId(2);
    assert!(matches!(snap.scan(), Err(Error::Corruption { .. })));
}
