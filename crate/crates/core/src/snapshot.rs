//! Serialized store state for debugging and offline scanning.
//!
//! Markers are stored run-length encoded: a run covers consecutive
//! clusters of one object version whose logical offsets advance by one
//! cluster each.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{compare_layouts, scan_layout, ObjectRecord, Store};
use crate::volume::{Band, Extent, Marker, ObjectId, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerRun {
    pub start: u64,
    pub length: u64,
    pub object: ObjectId,
    pub generation: u32,
    /// Logical byte offset of the first cluster in the run.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub total_clusters: u64,
    pub cluster_size: u64,
    pub bands: Vec<Band>,
    pub free: Vec<Extent>,
    pub deferred: Vec<Extent>,
    pub markers: Vec<MarkerRun>,
    pub records: Vec<ObjectRecord>,
}

/// Outcome of scanning a snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSummary {
    pub objects: usize,
    pub fragments: u64,
    pub layout_matches_records: bool,
}

impl Snapshot {
    pub fn capture(store: &Store) -> Self {
        let vol = store.volume();
        Snapshot {
            total_clusters: vol.total_clusters(),
            cluster_size: vol.cluster_size(),
            bands: vol.bands().to_vec(),
            free: vol.free_extents().collect(),
            deferred: vol.deferred_extents().to_vec(),
            markers: marker_runs(vol),
            records: store.records().cloned().collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn to_volume(&self) -> Result<Volume> {
        let cs = self.cluster_size;
        let markers = self.markers.iter().flat_map(|r| {
            (0..r.length).map(move |i| {
                (
                    r.start + i,
                    Marker {
                        object: r.object,
                        generation: r.generation,
                        offset: r.offset + i * cs,
                    },
                )
            })
        });
        Volume::from_parts(
            self.total_clusters,
            self.cluster_size,
            self.bands.clone(),
            &self.free,
            &self.deferred,
            markers,
        )
    }

    /// Rebuild the layout from markers and check it against the records.
    /// Marker inconsistencies and disagreements are corruption errors.
    pub fn scan(&self) -> Result<(BTreeMap<ObjectId, Vec<Extent>>, ScanSummary)> {
        let vol = self.to_volume()?;
        let layout = scan_layout(&vol)?;
        compare_layouts(&layout, &self.records)?;
        let summary = ScanSummary {
            objects: layout.len(),
            fragments: layout.values().map(|e| crate::metrics::fragments_of(e)).sum(),
            layout_matches_records: true,
        };
        Ok((layout, summary))
    }
}

fn marker_runs(vol: &Volume) -> Vec<MarkerRun> {
    let cs = vol.cluster_size();
    let mut runs: Vec<MarkerRun> = Vec::new();
    for (c, m) in vol.markers() {
        if let Some(last) = runs.last_mut() {
            if last.start + last.length == c
                && last.object == m.object
                && last.generation == m.generation
                && last.offset + last.length * cs == m.offset
            {
                last.length += 1;
                continue;
            }
        }
        runs.push(MarkerRun {
            start: c,
            length: 1,
            object: m.object,
            generation: m.generation,
            offset: m.offset,
        });
    }
    runs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alloc::{AllocPolicy, PolicyKind};
    use crate::store::StoreConfig;

    fn sample_store() -> Store {
        let vol = Volume::with_default_bands(512, 4096).unwrap();
        let mut s = Store::new(vol, StoreConfig::new(AllocPolicy::new(PolicyKind::NtfsLike))).unwrap();
        for i in 0..8 {
            s.put_new(ObjectId(i), 100_000 + i * 7000).unwrap();
        }
        s.safe_write(ObjectId(3), 150_000).unwrap();
        s.delete(ObjectId(5)).unwrap();
        s
    }

    #[test]
    fn snapshot_round_trips_and_scans_clean() {
        let s = sample_store();
        let snap = Snapshot::capture(&s);
        let json = serde_json::to_string(&snap).unwrap();
        let back: Snapshot = serde_json::from_str(&json).unwrap();
        assert_eq!(back, snap);
        let vol = back.to_volume().unwrap();
        assert_eq!(vol.free_extents().collect::<Vec<_>>(), snap.free);
        let (layout, summary) = back.scan().unwrap();
        assert_eq!(summary.objects, 7);
        assert_eq!(layout, s.scan_layout().unwrap());
    }

    #[test]
    fn tampered_snapshot_is_corrupt() {
        let mut snap = Snapshot::capture(&sample_store());
        snap.records[0].extents[0].offset += 1;
        assert!(matches!(snap.scan(), Err(Error::Corruption { .. })));
    }
}
