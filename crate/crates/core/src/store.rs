//! Object layer over a volume.
//!
//! Objects are written the way a get/put application writes files: either
//! with the final size known up front (one allocation) or as a sequence of
//! appends of `write_request_size` bytes, each allocated as it arrives.
//! Updates are safe writes: the new version is written in full beside the
//! old one, the record is switched to it, and only then are the old
//! clusters released.
//!
//! Every data cluster is tagged with a [`Marker`] (object, version, logical
//! byte offset). One marker per cluster stands in for the 1 KiB marker
//! interval: the marker recorded is the first 1 KiB marker in the cluster.
//! [`scan_layout`] rebuilds every object's layout from these tags alone,
//! which makes it an oracle independent of the object records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::alloc::{apply_relocations, AllocPolicy, Allocator, PolicyKind, Relocation, RobsonTracker};
use crate::error::{Error, Result};
use crate::metrics::fragments_of;
use crate::volume::{coalesce, total_clusters, ClusterState, CostModel, Extent, Marker, ObjectId, ReleaseMode, Volume};
use crate::workload::AgeClock;

/// Byte distance between markers written into object data.
pub const MARKER_INTERVAL: u64 = 1024;
pub const DEFAULT_WRITE_REQUEST_SIZE: u64 = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub id: ObjectId,
    /// Logical size in bytes.
    pub size: u64,
    /// Data clusters in logical order, adjacent extents merged.
    pub extents: Vec<Extent>,
    /// Clusters the policy granted beyond the data (buddy rounding).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reserved: Vec<Extent>,
    /// Number of completed safe writes.
    pub generation: u32,
}

impl ObjectRecord {
    pub fn fragments(&self) -> u64 {
        fragments_of(&self.extents)
    }

    pub fn data_clusters(&self) -> u64 {
        total_clusters(&self.extents)
    }

    pub fn reserved_clusters(&self) -> u64 {
        total_clusters(&self.reserved)
    }

    fn all_extents(&self) -> impl Iterator<Item = &Extent> {
        self.extents.iter().chain(&self.reserved)
    }
}

/// What `checkpoint_every` counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointUnit {
    /// Store operations: put, safe write, delete.
    #[default]
    Operation,
    /// Append calls. Commits then land inside objects being written, the
    /// way a log flushed on its own schedule would.
    WriteRequest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreConfig {
    /// Bytes per append call when the final size is not hinted.
    pub write_request_size: u64,
    /// Pass the final object size to the allocator at creation.
    pub size_hint: bool,
    /// Units between commits of deferred frees.
    pub checkpoint_every: u64,
    pub checkpoint_unit: CheckpointUnit,
    pub policy: AllocPolicy,
    pub cost: CostModel,
}

impl StoreConfig {
    pub fn new(policy: AllocPolicy) -> Self {
        StoreConfig {
            write_request_size: DEFAULT_WRITE_REQUEST_SIZE,
            size_hint: false,
            checkpoint_every: 1,
            checkpoint_unit: CheckpointUnit::Operation,
            policy,
            cost: CostModel::default(),
        }
    }

    pub fn validate(&self, cluster_size: u64) -> Result<()> {
        if self.write_request_size < cluster_size {
            return Err(Error::config(format!(
                "write_request_size {} is smaller than the cluster size {cluster_size}",
                self.write_request_size
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every must be at least 1"));
        }
        self.policy.validate()
    }
}

/// Modeled write-side counters since the store was created.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WriteMeter {
    pub bytes: u64,
    pub seconds: f64,
}

/// Where an injected crash stops a safe write. Step 0 is entry; steps
/// `1..=chunks` follow each data allocation; then the record swap; then
/// the release of the old version.
#[derive(Debug, Clone, Copy)]
struct Crash {
    after: Option<usize>,
    done: usize,
}

impl Crash {
    fn never() -> Self {
        Crash { after: None, done: 0 }
    }

    fn boundary(&mut self) -> Result<()> {
        if self.after == Some(self.done) {
            return Err(Error::Aborted { step: self.done });
        }
        self.done += 1;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Store {
    volume: Volume,
    allocator: Allocator,
    config: StoreConfig,
    records: BTreeMap<ObjectId, ObjectRecord>,
    clock: AgeClock,
    units_since_checkpoint: u64,
    write_head: Option<u64>,
    meter: WriteMeter,
    peak_allocated: u64,
    robson: RobsonTracker,
    cleaner_moved: u64,
}

/// Extents being written by an unfinished put or safe write.
#[derive(Debug, Default)]
struct Pending {
    data: Vec<Extent>,
    reserved: Vec<Extent>,
}

impl Store {
    pub fn new(volume: Volume, config: StoreConfig) -> Result<Self> {
        config.validate(volume.cluster_size())?;
        let allocator = Allocator::new(config.policy)?;
        Ok(Store {
            volume,
            allocator,
            config,
            records: BTreeMap::new(),
            clock: AgeClock::default(),
            units_since_checkpoint: 0,
            write_head: None,
            meter: WriteMeter::default(),
            peak_allocated: 0,
            robson: RobsonTracker::default(),
            cleaner_moved: 0,
        })
    }

    pub fn volume(&self) -> &Volume {
        &self.volume
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn allocator(&self) -> &Allocator {
        &self.allocator
    }

    pub fn clock(&self) -> &AgeClock {
        &self.clock
    }

    pub(crate) fn clock_mut(&mut self) -> &mut AgeClock {
        &mut self.clock
    }

    pub fn records(&self) -> impl Iterator<Item = &ObjectRecord> {
        self.records.values()
    }

    pub fn record(&self, id: ObjectId) -> Option<&ObjectRecord> {
        self.records.get(&id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> Vec<ObjectId> {
        self.records.keys().copied().collect()
    }

    pub fn write_meter(&self) -> WriteMeter {
        self.meter
    }

    /// Highest allocated-cluster count seen after any allocation.
    pub fn peak_allocated_clusters(&self) -> u64 {
        self.peak_allocated
    }

    pub fn reset_peak_allocated(&mut self) {
        self.peak_allocated = self.volume.allocated_clusters();
    }

    pub fn robson(&self) -> &RobsonTracker {
        &self.robson
    }

    /// Clusters copied by the log cleaner so far.
    pub fn cleaner_moved_clusters(&self) -> u64 {
        self.cleaner_moved
    }

    /// Allocated clusters holding no data (buddy rounding), in bytes.
    pub fn internal_fragmentation_bytes(&self) -> u64 {
        let cs = self.volume.cluster_size();
        self.records
            .values()
            .map(|r| r.reserved_clusters() * cs + (r.data_clusters() * cs - r.size))
            .sum()
    }

    fn release_mode(&self) -> ReleaseMode {
        self.config.policy.release_mode
    }

    /// Cluster counts of the successive allocation calls for an object.
    pub fn allocation_plan(&self, size: u64) -> Vec<u64> {
        let cs = self.volume.cluster_size();
        if self.config.size_hint {
            return vec![size.div_ceil(cs)];
        }
        let wrs = self.config.write_request_size;
        let mut plan = Vec::new();
        let mut written = 0u64;
        while written < size {
            let next = (written + wrs).min(size);
            let delta = next.div_ceil(cs) - written.div_ceil(cs);
            if delta > 0 {
                plan.push(delta);
            }
            written = next;
        }
        plan
    }

    /// Number of crash boundaries inside a safe write of `new_size` bytes.
    pub fn safe_write_steps(&self, new_size: u64) -> usize {
        self.allocation_plan(new_size).len() + 3
    }

    /// Allocate through the policy. The log-structured policy gets one
    /// cleaner pass on a miss; relocations are applied to every record and
    /// to the caller's in-flight extents.
    fn grant(&mut self, clusters: u64, pending: &mut Pending) -> Result<Vec<Extent>> {
        let after = pending.data.last().map(Extent::end);
        match self.allocator.alloc_append(&mut self.volume, clusters, after) {
            Err(Error::NoSpace { .. }) if self.config.policy.kind == PolicyKind::LogAppend => {
                let outcome = self.allocator.clean_log(&mut self.volume, clusters)?;
                self.cleaner_moved += outcome.moved;
                if !outcome.relocations.is_empty() {
                    self.relocate(&outcome.relocations, pending);
                }
                self.allocator.alloc(&mut self.volume, clusters)
            }
            other => other,
        }
    }

    fn relocate(&mut self, relocations: &[Relocation], pending: &mut Pending) {
        for r in self.records.values_mut() {
            r.extents = apply_relocations(&r.extents, relocations);
            r.reserved = apply_relocations(&r.reserved, relocations);
        }
        pending.data = apply_relocations(&pending.data, relocations);
        pending.reserved = apply_relocations(&pending.reserved, relocations);
        self.write_head = None;
    }

    /// Write a full version of `id` into fresh clusters. On allocation
    /// failure everything allocated so far is returned to the free set; on
    /// an injected crash the partial state is left as is.
    fn write_version(&mut self, id: ObjectId, generation: u32, size: u64, crash: &mut Crash) -> Result<Pending> {
        let cs = self.volume.cluster_size();
        let mut pending = Pending::default();
        let mut logical = 0u64;
        for clusters in self.allocation_plan(size) {
            let granted = match self.grant(clusters, &mut pending) {
                Ok(g) => g,
                Err(e) => {
                    let mut all = pending.data;
                    all.extend(pending.reserved);
                    self.volume.release(&all, ReleaseMode::Immediate)?;
                    return Err(e);
                }
            };
            self.robson.observe_alloc(&granted, cs);
            let (data, reserved) = split_grant(&granted, clusters);
            for e in &data {
                for c in e.range() {
                    self.volume.set_marker(
                        c,
                        Some(Marker {
                            object: id,
                            generation,
                            offset: logical * cs,
                        }),
                    );
                    logical += 1;
                }
            }
            let (secs, head) = self.volume.write_cost(&data, &self.config.cost, self.write_head);
            self.write_head = head;
            self.meter.seconds += secs;
            self.meter.bytes += total_clusters(&data) * cs;
            pending.data.extend(data);
            pending.data = coalesce(&pending.data);
            pending.reserved.extend(reserved);
            let allocated = self.volume.allocated_clusters();
            self.peak_allocated = self.peak_allocated.max(allocated);
            self.robson.observe_live(allocated * cs);
            self.tick(CheckpointUnit::WriteRequest);
            crash.boundary()?;
        }
        self.robson.observe_object(logical * cs);
        Ok(pending)
    }

    fn tick(&mut self, unit: CheckpointUnit) {
        if unit != self.config.checkpoint_unit {
            return;
        }
        self.units_since_checkpoint += 1;
        if self.units_since_checkpoint >= self.config.checkpoint_every {
            self.checkpoint();
        }
    }

    /// Commit deferred frees now.
    pub fn checkpoint(&mut self) {
        self.volume.checkpoint();
        self.units_since_checkpoint = 0;
    }

    /// Create a new object of `size` bytes.
    pub fn put_new(&mut self, id: ObjectId, size: u64) -> Result<&ObjectRecord> {
        if self.records.contains_key(&id) {
            return Err(Error::Usage(format!("object {id} already exists")));
        }
        if size == 0 {
            return Err(Error::Usage(format!("object {id} has zero size")));
        }
        let pending = self.write_version(id, 0, size, &mut Crash::never())?;
        self.records.insert(
            id,
            ObjectRecord {
                id,
                size,
                extents: pending.data,
                reserved: pending.reserved,
                generation: 0,
            },
        );
        self.clock.live_bytes += size;
        self.clock.bytes_turned_over += size;
        self.tick(CheckpointUnit::Operation);
        Ok(&self.records[&id])
    }

    /// Replace `id` with a new version of `new_size` bytes.
    pub fn safe_write(&mut self, id: ObjectId, new_size: u64) -> Result<&ObjectRecord> {
        self.safe_write_inner(id, new_size, Crash::never())?;
        Ok(&self.records[&id])
    }

    /// Safe write that simulates a crash once `after` step boundaries have
    /// been passed (see [`Store::safe_write_steps`]). Returns
    /// [`Error::Aborted`] when the crash fires, leaving the store exactly
    /// as it was at that instant; call [`Store::recover`] afterwards.
    pub fn safe_write_with_crash(&mut self, id: ObjectId, new_size: u64, after: usize) -> Result<()> {
        self.safe_write_inner(
            id,
            new_size,
            Crash {
                after: Some(after),
                done: 0,
            },
        )
    }

    fn safe_write_inner(&mut self, id: ObjectId, new_size: u64, mut crash: Crash) -> Result<()> {
        let old_gen = self.records.get(&id).ok_or(Error::NotFound(id))?.generation;
        if new_size == 0 {
            return Err(Error::Usage(format!("object {id} rewritten with zero size")));
        }
        crash.boundary()?;
        let new_gen = old_gen + 1;
        let pending = self.write_version(id, new_gen, new_size, &mut crash)?;

        let record = self.records.get_mut(&id).expect("record checked above");
        let old = std::mem::replace(
            record,
            ObjectRecord {
                id,
                size: new_size,
                extents: pending.data,
                reserved: pending.reserved,
                generation: new_gen,
            },
        );
        self.clock.live_bytes = self.clock.live_bytes - old.size + new_size;
        self.clock.bytes_turned_over += new_size;
        crash.boundary()?;

        let old_extents: Vec<Extent> = old.all_extents().copied().collect();
        self.volume.release(&old_extents, self.release_mode())?;
        crash.boundary()?;
        self.tick(CheckpointUnit::Operation);
        Ok(())
    }

    pub fn delete(&mut self, id: ObjectId) -> Result<()> {
        let record = self.records.remove(&id).ok_or(Error::NotFound(id))?;
        let extents: Vec<Extent> = record.all_extents().copied().collect();
        self.volume.release(&extents, self.release_mode())?;
        self.clock.live_bytes -= record.size;
        self.clock.bytes_turned_over += record.size;
        self.tick(CheckpointUnit::Operation);
        Ok(())
    }

    /// Look up an object and its modeled read cost in seconds.
    pub fn get(&self, id: ObjectId) -> Result<(&ObjectRecord, f64)> {
        let record = self.records.get(&id).ok_or(Error::NotFound(id))?;
        Ok((record, self.volume.read_cost(&record.extents, &self.config.cost)))
    }

    /// Modeled read cost of `id`.
    pub fn read_cost(&self, id: ObjectId) -> Result<f64> {
        self.get(id).map(|(_, c)| c)
    }

    /// Layout reconstructed from markers alone.
    pub fn scan_layout(&self) -> Result<BTreeMap<ObjectId, Vec<Extent>>> {
        scan_layout(&self.volume)
    }

    /// Compare the marker scan with the object records.
    pub fn verify_layout(&self) -> Result<()> {
        let scanned = self.scan_layout()?;
        compare_layouts(&scanned, self.records.values())
    }

    /// Crash recovery: any allocated cluster not owned by a record (a
    /// half-written temporary version, or an old version whose release
    /// never happened) is released. Returns the number of clusters
    /// reclaimed. Call [`Store::checkpoint`] afterwards to make them
    /// reusable when the policy defers frees.
    pub fn recover(&mut self) -> Result<u64> {
        let total = self.volume.total_clusters();
        let mut owned = vec![false; total as usize];
        for e in self.records.values().flat_map(ObjectRecord::all_extents) {
            for c in e.range() {
                if owned[c as usize] {
                    return Err(Error::invariant(format!("cluster {c} owned twice")));
                }
                owned[c as usize] = true;
            }
        }
        let mut leaked = Vec::new();
        let mut c = 0;
        while c < total {
            if self.volume.state(c) == ClusterState::Allocated && !owned[c as usize] {
                let start = c;
                while c < total && self.volume.state(c) == ClusterState::Allocated && !owned[c as usize] {
                    c += 1;
                }
                leaked.push(Extent::new(start, c - start));
            } else {
                if owned[c as usize] && self.volume.state(c) != ClusterState::Allocated {
                    return Err(Error::invariant(format!("record owns non-allocated cluster {c}")));
                }
                c += 1;
            }
        }
        let reclaimed = total_clusters(&leaked);
        self.volume.release(&leaked, self.release_mode())?;
        self.write_head = None;
        Ok(reclaimed)
    }

    /// Conservation plus record/volume agreement: every record cluster is
    /// allocated, and allocated clusters are exactly the records' clusters.
    pub fn check_invariants(&self) -> Result<()> {
        self.volume.check_invariants()?;
        let owned: u64 = self
            .records
            .values()
            .map(|r| r.data_clusters() + r.reserved_clusters())
            .sum();
        if owned != self.volume.allocated_clusters() {
            return Err(Error::invariant(format!(
                "records own {owned} clusters but {} are allocated",
                self.volume.allocated_clusters()
            )));
        }
        let cs = self.volume.cluster_size();
        let mut live = 0;
        for r in self.records.values() {
            if r.data_clusters() != r.size.div_ceil(cs) {
                return Err(Error::invariant(format!(
                    "object {} extents do not match its size",
                    r.id
                )));
            }
            if let Some(c) = r
                .all_extents()
                .flat_map(Extent::range)
                .find(|&c| self.volume.state(c) != ClusterState::Allocated)
            {
                return Err(Error::invariant(format!(
                    "object {} owns unallocated cluster {c}",
                    r.id
                )));
            }
            live += r.size;
        }
        if live != self.clock.live_bytes {
            return Err(Error::invariant(format!(
                "live bytes {} disagree with records {live}",
                self.clock.live_bytes
            )));
        }
        Ok(())
    }
}

/// Split a grant into the first `used` clusters (data) and the rest.
fn split_grant(granted: &[Extent], used: u64) -> (Vec<Extent>, Vec<Extent>) {
    let mut data = Vec::new();
    let mut rest = Vec::new();
    let mut need = used;
    for e in granted {
        if need >= e.length {
            data.push(*e);
            need -= e.length;
        } else if need > 0 {
            data.push(Extent::new(e.offset, need));
            rest.push(Extent::new(e.offset + need, e.length - need));
            need = 0;
        } else {
            rest.push(*e);
        }
    }
    (data, rest)
}

/// Rebuild every object's layout from cluster markers only.
///
/// Clusters are grouped by object; within an object, markers must cover
/// logical offsets `0, cs, 2cs, ...` exactly once and carry one version.
/// Physically adjacent clusters with consecutive offsets form one extent.
pub fn scan_layout(volume: &Volume) -> Result<BTreeMap<ObjectId, Vec<Extent>>> {
    let cs = volume.cluster_size();
    let mut by_object: BTreeMap<ObjectId, Vec<(u64, u64, u32)>> = BTreeMap::new();
    for (cluster, m) in volume.markers() {
        if volume.state(cluster) != ClusterState::Allocated {
            return Err(Error::Corruption {
                cluster,
                detail: format!("orphan marker for {} on a free cluster", m.object),
            });
        }
        if m.offset % cs != 0 {
            return Err(Error::Corruption {
                cluster,
                detail: format!("marker offset {} is not cluster aligned", m.offset),
            });
        }
        by_object
            .entry(m.object)
            .or_default()
            .push((m.offset, cluster, m.generation));
    }
    let mut layout = BTreeMap::new();
    for (id, mut tags) in by_object {
        tags.sort_unstable();
        let generation = tags[0].2;
        let mut extents: Vec<Extent> = Vec::new();
        for (i, &(offset, cluster, g)) in tags.iter().enumerate() {
            if g != generation {
                return Err(Error::Corruption {
                    cluster,
                    detail: format!("{id} has markers from versions {generation} and {g}"),
                });
            }
            let expect = i as u64 * cs;
            if offset != expect {
                let detail = if offset < expect {
                    format!("{id} offset {offset} appears twice")
                } else {
                    format!("{id} is missing offset {expect}")
                };
                return Err(Error::Corruption { cluster, detail });
            }
            match extents.last_mut() {
                Some(last) if last.end() == cluster => last.length += 1,
                _ => extents.push(Extent::new(cluster, 1)),
            }
        }
        layout.insert(id, extents);
    }
    Ok(layout)
}

/// First disagreement between a scanned layout and object records.
pub fn compare_layouts<'a>(
    scanned: &BTreeMap<ObjectId, Vec<Extent>>,
    records: impl IntoIterator<Item = &'a ObjectRecord>,
) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for r in records {
        seen.insert(r.id);
        match scanned.get(&r.id) {
            Some(ext) if *ext == r.extents => {}
            Some(ext) => {
                let cluster = ext
                    .iter()
                    .zip(&r.extents)
                    .find(|(a, b)| a != b)
                    .map_or(r.extents.first().map_or(0, |e| e.offset), |(a, _)| a.offset);
                return Err(Error::Corruption {
                    cluster,
                    detail: format!("{} scanned as {:?} but recorded as {:?}", r.id, ext, r.extents),
                });
            }
            None => {
                return Err(Error::Corruption {
                    cluster: r.extents.first().map_or(0, |e| e.offset),
                    detail: format!("{} has no markers", r.id),
                });
            }
        }
    }
    match scanned.iter().find(|(id, _)| !seen.contains(id)) {
        Some((id, ext)) => Err(Error::Corruption {
            cluster: ext[0].offset,
            detail: format!("markers for {id} but no such record"),
        }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alloc::PolicyKind;

    const KB: u64 = 1024;

    fn store_with(kind: PolicyKind, clusters: u64, hint: bool) -> Store {
        let vol = Volume::with_default_bands(clusters, 4096).unwrap();
        let mut cfg = StoreConfig::new(AllocPolicy::new(kind));
        cfg.size_hint = hint;
        Store::new(vol, cfg).unwrap()
    }

    #[test]
    fn unhinted_put_appends_in_request_sized_chunks() {
        let s = store_with(PolicyKind::FirstFit, 1024, false);
        assert_eq!(s.allocation_plan(256 * KB), vec![16, 16, 16, 16]);
        assert_eq!(s.allocation_plan(100 * KB), vec![16, 9]);
    }

    #[test]
    fn plan_handles_requests_that_are_not_cluster_multiples() {
        let vol = Volume::with_default_bands(64, 4096).unwrap();
        let mut cfg = StoreConfig::new(AllocPolicy::new(PolicyKind::FirstFit));
        cfg.write_request_size = 6 * KB;
        let s = Store::new(vol, cfg).unwrap();
        let plan = s.allocation_plan(6 * KB + 1);
        assert_eq!(plan, vec![2]);
        let plan = s.allocation_plan(18 * KB);
        assert_eq!(plan.iter().sum::<u64>(), 5);
    }

    #[test]
    fn hinted_put_is_one_extent() {
        let mut s = store_with(PolicyKind::FirstFit, 1024, true);
        let r = s.put_new(ObjectId(1), 256 * KB).unwrap();
        assert_eq!(r.extents, vec![Extent::new(0, 64)]);
        assert_eq!(r.fragments(), 1);
    }

    #[test]
    fn sub_cluster_object_takes_one_cluster() {
        let mut s = store_with(PolicyKind::FirstFit, 64, false);
        let r = s.put_new(ObjectId(1), KB).unwrap();
        assert_eq!(r.data_clusters(), 1);
        assert_eq!(s.internal_fragmentation_bytes(), 3 * KB);
    }

    #[test]
    fn duplicate_and_unknown_ids() {
        let mut s = store_with(PolicyKind::FirstFit, 64, false);
        s.put_new(ObjectId(1), KB).unwrap();
        assert!(matches!(s.put_new(ObjectId(1), KB), Err(Error::Usage(_))));
        assert!(matches!(s.safe_write(ObjectId(2), KB), Err(Error::NotFound(_))));
        assert!(matches!(s.delete(ObjectId(2)), Err(Error::NotFound(_))));
    }

    #[test]
    fn failed_put_rolls_back() {
        let mut s = store_with(PolicyKind::FirstFit, 64, false);
        s.put_new(ObjectId(1), 200 * KB).unwrap();
        let free_before: Vec<_> = s.volume().free_extents().collect();
        assert!(matches!(s.put_new(ObjectId(2), 100 * KB), Err(Error::NoSpace { .. })));
        assert_eq!(s.volume().free_extents().collect::<Vec<_>>(), free_before);
        assert!(s.record(ObjectId(2)).is_none());
        s.check_invariants().unwrap();
    }

    #[test]
    fn safe_write_without_room_for_two_copies_keeps_old_version() {
        // 10 MiB object on a 16 MiB volume.
        let mut s = store_with(PolicyKind::FirstFit, 4096, true);
        s.put_new(ObjectId(1), 10 << 20).unwrap();
        let before = s.record(ObjectId(1)).unwrap().clone();
        assert!(matches!(
            s.safe_write(ObjectId(1), 10 << 20),
            Err(Error::NoSpace { .. })
        ));
        assert_eq!(s.record(ObjectId(1)).unwrap(), &before);
        s.check_invariants().unwrap();
        s.verify_layout().unwrap();
    }

    #[test]
    fn replacing_each_object_once_is_age_one() {
        let mut s = store_with(PolicyKind::FirstFit, 4096, false);
        for i in 0..10 {
            s.put_new(ObjectId(i), 1 << 20).unwrap();
        }
        s.clock_mut().bytes_turned_over = 0;
        for i in 0..10 {
            s.safe_write(ObjectId(i), 1 << 20).unwrap();
        }
        assert!(s.records().all(|r| r.generation == 1));
        assert_eq!(s.clock().storage_age().unwrap(), 1.0);
    }

    #[test]
    fn peak_during_safe_write_is_live_plus_new() {
        let mut s = store_with(PolicyKind::FirstFit, 4096, false);
        for i in 0..4 {
            s.put_new(ObjectId(i), 1 << 20).unwrap();
        }
        s.reset_peak_allocated();
        let live = s.volume().allocated_clusters();
        s.safe_write(ObjectId(2), 2 << 20).unwrap();
        assert_eq!(s.peak_allocated_clusters(), live + 512);
        assert_eq!(s.volume().allocated_clusters(), live - 256 + 512);
    }

    #[test]
    fn delete_then_get_is_not_found() {
        let mut s = store_with(PolicyKind::FirstFit, 64, false);
        s.put_new(ObjectId(5), 8 * KB).unwrap();
        s.delete(ObjectId(5)).unwrap();
        assert!(matches!(s.get(ObjectId(5)), Err(Error::NotFound(_))));
    }

    #[test]
    fn deleting_everything_frees_everything() {
        let mut s = store_with(PolicyKind::NtfsLike, 1024, false);
        for i in 0..10 {
            s.put_new(ObjectId(i), (i + 1) * 40 * KB).unwrap();
        }
        for i in 0..10 {
            s.delete(ObjectId(i)).unwrap();
        }
        s.checkpoint();
        assert_eq!(s.volume().free_clusters(), 1024);
        assert_eq!(s.volume().free_extents().count(), 1);
        assert_eq!(s.volume().markers().count(), 0);
    }

    #[test]
    fn delete_and_reput_with_best_fit_is_contiguous() {
        let mut s = store_with(PolicyKind::BestFit, 1024, true);
        for i in 0..12 {
            s.put_new(ObjectId(i), 256 * KB).unwrap();
        }
        s.delete(ObjectId(4)).unwrap();
        let r = s.put_new(ObjectId(100), 256 * KB).unwrap();
        assert_eq!(r.fragments(), 1);
        assert_eq!(r.extents, vec![Extent::new(4 * 64, 64)]);
    }

    #[test]
    fn deferred_release_blocks_reuse_until_checkpoint() {
        let vol = Volume::with_default_bands(256, 4096).unwrap();
        let mut cfg = StoreConfig::new(AllocPolicy::new(PolicyKind::FirstFit).release_mode(ReleaseMode::Deferred));
        cfg.checkpoint_every = 100;
        let mut s = Store::new(vol, cfg).unwrap();
        s.put_new(ObjectId(1), 64 * KB).unwrap();
        s.put_new(ObjectId(2), 64 * KB).unwrap();
        s.delete(ObjectId(1)).unwrap();
        let r = s.put_new(ObjectId(3), 64 * KB).unwrap();
        assert_eq!(r.extents, vec![Extent::new(32, 16)]);
        s.checkpoint();
        let r = s.put_new(ObjectId(4), 64 * KB).unwrap();
        assert_eq!(r.extents, vec![Extent::new(0, 16)]);
    }

    #[test]
    fn write_request_commits_land_inside_an_object() {
        // A(16) B(16) C(16) then rewrite A: its old clusters stay deferred
        // until the first append of the next write commits them.
        let vol = Volume::with_default_bands(128, 4096).unwrap();
        let mut cfg = StoreConfig::new(AllocPolicy::new(PolicyKind::FirstFit));
        cfg.checkpoint_unit = CheckpointUnit::WriteRequest;
        let mut s = Store::new(vol, cfg).unwrap();
        for i in 0..3 {
            s.put_new(ObjectId(i), 64 * KB).unwrap();
        }
        s.safe_write(ObjectId(0), 64 * KB).unwrap();
        assert_eq!(s.volume().deferred_clusters(), 16);
        let b = s.safe_write(ObjectId(1), 128 * KB).unwrap().clone();
        assert_eq!(b.extents, vec![Extent::new(64, 16), Extent::new(0, 16)]);
        s.check_invariants().unwrap();
        s.verify_layout().unwrap();
    }

    #[test]
    fn get_cost_matches_hand_computation() {
        let mut s = store_with(PolicyKind::FirstFit, 1024, true);
        let r = s.put_new(ObjectId(1), 1 << 20).unwrap().clone();
        let (_, cost) = s.get(ObjectId(1)).unwrap();
        assert_eq!(r.extents.len(), 1);
        assert!((cost - (0.008 + (1u64 << 20) as f64 / 60e6)).abs() < 1e-12);
    }

    #[test]
    fn two_fragment_cost() {
        // Build: A(8) B(8) C(8); delete B; write D(16) unhinted, 32 KiB
        // requests -> D lands at (8,8) and (24,8).
        let vol = Volume::with_default_bands(64, 4096).unwrap();
        let mut cfg = StoreConfig::new(AllocPolicy::new(PolicyKind::FirstFit));
        cfg.write_request_size = 32 * KB;
        let mut s = Store::new(vol, cfg).unwrap();
        for i in 0..3 {
            s.put_new(ObjectId(i), 32 * KB).unwrap();
        }
        s.delete(ObjectId(1)).unwrap();
        let d = s.put_new(ObjectId(9), 64 * KB).unwrap().clone();
        assert_eq!(d.extents, vec![Extent::new(8, 8), Extent::new(24, 8)]);
        let cost = s.read_cost(ObjectId(9)).unwrap();
        let hand = 2.0 * 0.008 + 16.0 * 4096.0 / 60e6;
        assert!((cost - hand).abs() < 1e-12);
        let contiguous = s.put_new(ObjectId(10), 64 * KB).unwrap().clone();
        assert_eq!(contiguous.fragments(), 1);
        assert!(s.read_cost(ObjectId(9)).unwrap() > s.read_cost(ObjectId(10)).unwrap());
    }

    #[test]
    fn scan_matches_records_single_object() {
        let mut s = store_with(PolicyKind::FirstFit, 128, false);
        s.put_new(ObjectId(3), 100 * KB).unwrap();
        let scan = s.scan_layout().unwrap();
        assert_eq!(scan[&ObjectId(3)], vec![Extent::new(0, 25)]);
        s.verify_layout().unwrap();
    }

    #[test]
    fn scan_detects_gap_duplicate_and_mixed_versions() {
        let mut s = store_with(PolicyKind::FirstFit, 128, true);
        s.put_new(ObjectId(1), 16 * KB).unwrap();
        let mut v = s.volume().clone();
        v.set_marker(2, None);
        assert!(matches!(scan_layout(&v), Err(Error::Corruption { cluster: 3, .. })));

        let mut v = s.volume().clone();
        v.set_marker(2, v.marker(1));
        assert!(matches!(scan_layout(&v), Err(Error::Corruption { cluster: 2, .. })));

        let mut v = s.volume().clone();
        let mut m = v.marker(3).unwrap();
        m.generation = 7;
        v.set_marker(3, Some(m));
        assert!(matches!(scan_layout(&v), Err(Error::Corruption { .. })));
    }

    #[test]
    fn crash_at_every_boundary_recovers_one_version() {
        let mut base = store_with(PolicyKind::NtfsLike, 1024, false);
        for i in 0..6 {
            base.put_new(ObjectId(i), 200 * KB).unwrap();
        }
        let steps = base.safe_write_steps(150 * KB);
        assert_eq!(steps, 6);
        for after in 0..steps {
            let mut s = base.clone();
            let before = s.record(ObjectId(2)).unwrap().clone();
            let res = s.safe_write_with_crash(ObjectId(2), 150 * KB, after);
            let finished = after + 1 == steps;
            if finished {
                assert!(matches!(res, Err(Error::Aborted { .. })) || res.is_ok());
            } else {
                assert!(matches!(res, Err(Error::Aborted { step }) if step == after));
            }
            s.recover().unwrap();
            s.checkpoint();
            let now = s.record(ObjectId(2)).unwrap();
            if after < steps - 2 {
                assert_eq!(now, &before, "crash after step {after}");
            } else {
                assert_eq!(now.generation, before.generation + 1);
                assert_eq!(now.size, 150 * KB);
            }
            s.check_invariants().unwrap();
            s.verify_layout().unwrap();
        }
    }

    #[test]
    fn log_append_store_cleans_when_full() {
        // 200 of 256 clusters live, so each rewrite needs the cleaner.
        let mut s = store_with(PolicyKind::LogAppend, 256, true);
        for i in 0..5 {
            s.put_new(ObjectId(i), 160 * KB).unwrap();
        }
        for round in 0..20 {
            let id = ObjectId((round * 3) % 5);
            s.safe_write(id, 160 * KB).unwrap();
            s.check_invariants().unwrap();
            s.verify_layout().unwrap();
        }
        assert!(s.cleaner_moved_clusters() > 0);
    }

    #[test]
    fn buddy_store_tracks_reserved_clusters() {
        let mut s = store_with(PolicyKind::Buddy, 256, true);
        let r = s.put_new(ObjectId(1), 12 * KB).unwrap().clone();
        assert_eq!(r.extents, vec![Extent::new(0, 3)]);
        assert_eq!(r.reserved, vec![Extent::new(3, 1)]);
        assert_eq!(s.internal_fragmentation_bytes(), 4096);
        s.check_invariants().unwrap();
        s.verify_layout().unwrap();
        s.delete(ObjectId(1)).unwrap();
        assert_eq!(s.volume().free_clusters(), 256);
    }
}
