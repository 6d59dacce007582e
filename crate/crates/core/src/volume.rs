//! The simulated disk.
//!
//! A [`Volume`] is an array of fixed-size clusters. Every cluster is in
//! exactly one of three states: free (part of a coalesced free run that
//! policies may allocate from), deferred (released but unusable until the
//! next [`Volume::checkpoint`]) or allocated. Free runs are indexed three
//! ways so that every policy gets its natural query in logarithmic time:
//! by offset, by `(length, offset)` and through a max-tree over run starts
//! that answers "leftmost run of at least `n` clusters".
//!
//! Each allocated cluster may carry a [`Marker`] naming the object, version
//! and logical byte offset it holds. The store writes markers; the scanner
//! reads them back without consulting object records.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CLUSTER_SIZE: u64 = 4096;
pub const DEFAULT_SEEK_TIME: f64 = 0.008;
pub const DEFAULT_OUTER_RATE: f64 = 60e6;
pub const DEFAULT_INNER_RATE: f64 = 30e6;

/// Opaque object identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectId(pub u64);

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// A contiguous run of clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Extent {
    pub offset: u64,
    pub length: u64,
}

impl Extent {
    pub fn new(offset: u64, length: u64) -> Self {
        debug_assert!(length > 0, "zero-length extent at {offset}");
        Extent { offset, length }
    }

    pub fn end(&self) -> u64 {
        self.offset + self.length
    }

    pub fn range(&self) -> Range<u64> {
        self.offset..self.end()
    }

    pub fn overlaps(&self, other: &Extent) -> bool {
        self.offset < other.end() && other.offset < self.end()
    }
}

impl fmt::Display for Extent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.offset, self.length)
    }
}

/// Total clusters covered by a list of extents.
pub fn total_clusters(extents: &[Extent]) -> u64 {
    extents.iter().map(|e| e.length).sum()
}

/// Merge physically adjacent neighbours, keeping logical order.
pub fn coalesce(extents: &[Extent]) -> Vec<Extent> {
    let mut out: Vec<Extent> = Vec::with_capacity(extents.len());
    for &e in extents {
        match out.last_mut() {
            Some(last) if last.end() == e.offset => last.length += e.length,
            _ => out.push(e),
        }
    }
    out
}

/// A disk zone with its own sequential transfer rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub start_cluster: u64,
    /// Exclusive.
    pub end_cluster: u64,
    /// Bytes per second.
    pub transfer_rate: f64,
}

/// Two equal bands, outer at 60 MB/s and inner at 30 MB/s.
pub fn default_bands(total_clusters: u64) -> Vec<Band> {
    let half = total_clusters / 2;
    if half == 0 {
        return vec![Band {
            start_cluster: 0,
            end_cluster: total_clusters,
            transfer_rate: DEFAULT_OUTER_RATE,
        }];
    }
    vec![
        Band {
            start_cluster: 0,
            end_cluster: half,
            transfer_rate: DEFAULT_OUTER_RATE,
        },
        Band {
            start_cluster: half,
            end_cluster: total_clusters,
            transfer_rate: DEFAULT_INNER_RATE,
        },
    ]
}

/// Seek component of the disk model; transfer rates live on the bands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Seconds charged per non-adjacent extent transition.
    pub seek_time: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            seek_time: DEFAULT_SEEK_TIME,
        }
    }
}

impl CostModel {
    pub fn new(seek_time: f64) -> Result<Self> {
        if !(seek_time > 0.0 && seek_time.is_finite()) {
            return Err(Error::config(format!("seek_time must be > 0, got {seek_time}")));
        }
        Ok(CostModel { seek_time })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReleaseMode {
    /// Freed clusters are reusable right away.
    Immediate,
    /// Freed clusters wait for the next checkpoint.
    Deferred,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ClusterState {
    Free,
    Deferred,
    Allocated,
}

/// Per-cluster tag: which object version owns the cluster and the logical
/// byte offset of the first 1 KiB marker inside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Marker {
    pub object: ObjectId,
    pub generation: u32,
    pub offset: u64,
}

/// Max-tree over cluster offsets: leaf `i` holds the length of the free run
/// starting at `i` (zero elsewhere).
#[derive(Debug, Clone)]
struct RunStartTree {
    leaves: usize,
    tree: Vec<u64>,
}

impl RunStartTree {
    fn new(n: usize) -> Self {
        let leaves = n.next_power_of_two().max(1);
        RunStartTree {
            leaves,
            tree: vec![0; 2 * leaves],
        }
    }

    fn set(&mut self, i: u64, v: u64) {
        let mut p = i as usize + self.leaves;
        self.tree[p] = v;
        p /= 2;
        while p >= 1 {
            let m = self.tree[2 * p].max(self.tree[2 * p + 1]);
            if self.tree[p] == m {
                break;
            }
            self.tree[p] = m;
            p /= 2;
        }
    }

    /// Leftmost index in `[lo, hi)` whose value is at least `need`.
    fn first_at_least(&self, need: u64, lo: u64, hi: u64) -> Option<u64> {
        self.find(1, 0, self.leaves as u64, lo, hi, need)
    }

    fn find(&self, node: usize, nlo: u64, nhi: u64, lo: u64, hi: u64, need: u64) -> Option<u64> {
        if nhi <= lo || hi <= nlo || self.tree[node] < need {
            return None;
        }
        if nhi - nlo == 1 {
            return Some(nlo);
        }
        let mid = (nlo + nhi) / 2;
        self.find(2 * node, nlo, mid, lo, hi, need)
            .or_else(|| self.find(2 * node + 1, mid, nhi, lo, hi, need))
    }
}

#[derive(Debug, Clone)]
pub struct Volume {
    cluster_size: u64,
    total_clusters: u64,
    bands: Vec<Band>,
    state: Vec<ClusterState>,
    free_runs: BTreeMap<u64, u64>,
    by_size: BTreeSet<(u64, u64)>,
    run_starts: RunStartTree,
    deferred: Vec<Extent>,
    markers: Vec<Option<Marker>>,
    free_count: u64,
    deferred_count: u64,
}

fn validate_bands(total_clusters: u64, bands: &[Band]) -> Result<()> {
    if bands.is_empty() {
        return Err(Error::config("at least one band is required"));
    }
    let mut expect = 0;
    let mut prev_rate = f64::INFINITY;
    for (i, b) in bands.iter().enumerate() {
        if b.start_cluster != expect {
            return Err(Error::config(format!(
                "band {i} starts at {} but previous band ends at {expect}",
                b.start_cluster
            )));
        }
        if b.end_cluster <= b.start_cluster {
            return Err(Error::config(format!("band {i} is empty")));
        }
        if !(b.transfer_rate > 0.0 && b.transfer_rate.is_finite()) {
            return Err(Error::config(format!("band {i} has non-positive transfer rate")));
        }
        if b.transfer_rate > prev_rate {
            return Err(Error::config(format!("band {i} is faster than the band outside it")));
        }
        prev_rate = b.transfer_rate;
        expect = b.end_cluster;
    }
    if expect != total_clusters {
        return Err(Error::config(format!(
            "bands cover [0,{expect}) but the volume has {total_clusters} clusters"
        )));
    }
    Ok(())
}

impl Volume {
    pub fn new(total_clusters: u64, cluster_size: u64, bands: Vec<Band>) -> Result<Self> {
        if total_clusters == 0 {
            return Err(Error::config("volume must have at least one cluster"));
        }
        if cluster_size < 1024 {
            return Err(Error::config(format!(
                "cluster_size must be at least 1024 bytes (one marker per cluster), got {cluster_size}"
            )));
        }
        validate_bands(total_clusters, &bands)?;
        let n = usize::try_from(total_clusters).map_err(|_| Error::config("volume too large for this platform"))?;
        let mut vol = Volume {
            cluster_size,
            total_clusters,
            bands,
            state: vec![ClusterState::Free; n],
            free_runs: BTreeMap::new(),
            by_size: BTreeSet::new(),
            run_starts: RunStartTree::new(n),
            deferred: Vec::new(),
            markers: vec![None; n],
            free_count: 0,
            deferred_count: 0,
        };
        vol.index_run(Extent::new(0, total_clusters));
        vol.free_count = total_clusters;
        Ok(vol)
    }

    pub fn with_default_bands(total_clusters: u64, cluster_size: u64) -> Result<Self> {
        Volume::new(total_clusters, cluster_size, default_bands(total_clusters))
    }

    pub fn cluster_size(&self) -> u64 {
        self.cluster_size
    }

    pub fn total_clusters(&self) -> u64 {
        self.total_clusters
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.total_clusters * self.cluster_size
    }

    pub fn bands(&self) -> &[Band] {
        &self.bands
    }

    /// Outermost (fastest) band.
    pub fn outer_band(&self) -> &Band {
        &self.bands[0]
    }

    /// Clusters needed to hold `bytes`.
    pub fn clusters_for(&self, bytes: u64) -> u64 {
        bytes.div_ceil(self.cluster_size)
    }

    pub fn free_clusters(&self) -> u64 {
        self.free_count
    }

    pub fn deferred_clusters(&self) -> u64 {
        self.deferred_count
    }

    pub fn allocated_clusters(&self) -> u64 {
        self.total_clusters - self.free_count - self.deferred_count
    }

    pub fn state(&self, cluster: u64) -> ClusterState {
        self.state[cluster as usize]
    }

    pub fn free_run_count(&self) -> usize {
        self.free_runs.len()
    }

    /// Coalesced free runs in address order.
    pub fn free_extents(&self) -> impl Iterator<Item = Extent> + '_ {
        self.free_runs.iter().map(|(&o, &l)| Extent::new(o, l))
    }

    /// Free runs by decreasing length, lowest offset first among equals.
    pub fn runs_largest_first(&self) -> impl Iterator<Item = Extent> + '_ {
        let mut it = self.by_size.iter().rev().peekable();
        // Reverse iteration yields equal lengths highest-offset first; regroup.
        std::iter::from_fn(move || {
            let &(len, _) = *it.peek()?;
            let mut group = Vec::new();
            while let Some(&&(l, o)) = it.peek() {
                if l != len {
                    break;
                }
                group.push(Extent::new(o, l));
                it.next();
            }
            group.reverse();
            Some(group)
        })
        .flatten()
    }

    pub fn deferred_extents(&self) -> &[Extent] {
        &self.deferred
    }

    pub fn marker(&self, cluster: u64) -> Option<Marker> {
        self.markers[cluster as usize]
    }

    /// All `(cluster, marker)` pairs in address order.
    pub fn markers(&self) -> impl Iterator<Item = (u64, Marker)> + '_ {
        self.markers
            .iter()
            .enumerate()
            .filter_map(|(c, m)| m.map(|m| (c as u64, m)))
    }

    pub fn set_marker(&mut self, cluster: u64, marker: Option<Marker>) {
        self.markers[cluster as usize] = marker;
    }

    /// The free run covering `cluster`, if the cluster is free.
    pub fn free_run_containing(&self, cluster: u64) -> Option<Extent> {
        let (&o, &l) = self.free_runs.range(..=cluster).next_back()?;
        (cluster < o + l).then(|| Extent::new(o, l))
    }

    /// Lowest-offset free run of at least `len` clusters that starts inside
    /// `starts` (first fit).
    pub fn first_fit(&self, len: u64, starts: Range<u64>) -> Option<Extent> {
        let hi = starts.end.min(self.total_clusters);
        let o = self.run_starts.first_at_least(len, starts.start, hi)?;
        Some(Extent::new(o, self.free_runs[&o]))
    }

    /// Smallest free run of at least `len` clusters, lowest offset on ties.
    pub fn best_fit(&self, len: u64) -> Option<Extent> {
        self.by_size.range((len, 0)..).next().map(|&(l, o)| Extent::new(o, l))
    }

    /// Free runs of at least `len` clusters, ordered by `(length, offset)`.
    pub fn runs_at_least(&self, len: u64) -> impl Iterator<Item = Extent> + '_ {
        self.by_size.range((len, 0)..).map(|&(l, o)| Extent::new(o, l))
    }

    /// Lowest free run starting at or after `cluster`.
    pub fn next_free_run(&self, cluster: u64) -> Option<Extent> {
        self.free_runs.range(cluster..).next().map(|(&o, &l)| Extent::new(o, l))
    }

    /// Largest free run, lowest offset on ties.
    pub fn largest_run(&self) -> Option<Extent> {
        let &(len, _) = self.by_size.iter().next_back()?;
        self.best_fit(len)
    }

    fn index_run(&mut self, e: Extent) {
        self.free_runs.insert(e.offset, e.length);
        self.by_size.insert((e.length, e.offset));
        self.run_starts.set(e.offset, e.length);
    }

    fn unindex_run(&mut self, e: Extent) {
        self.free_runs.remove(&e.offset);
        self.by_size.remove(&(e.length, e.offset));
        self.run_starts.set(e.offset, 0);
    }

    /// Add `e` to the free set, merging with free neighbours.
    fn insert_free(&mut self, e: Extent) {
        let mut merged = e;
        if let Some((&o, &l)) = self.free_runs.range(..e.offset).next_back() {
            if o + l == e.offset {
                self.unindex_run(Extent::new(o, l));
                merged = Extent::new(o, l + merged.length);
            }
        }
        if let Some(&l) = self.free_runs.get(&e.end()) {
            self.unindex_run(Extent::new(e.end(), l));
            merged.length += l;
        }
        self.index_run(merged);
        for c in e.range() {
            self.state[c as usize] = ClusterState::Free;
        }
        self.free_count += e.length;
    }

    /// Move a free range to the allocated state.
    ///
    /// Policies decide *where*; this is the single path by which clusters
    /// leave the free set, and it refuses anything not wholly free.
    pub fn claim(&mut self, e: Extent) -> Result<()> {
        if e.length == 0 || e.end() > self.total_clusters {
            return Err(Error::invariant(format!("claim of out-of-range extent {e}")));
        }
        let run = self
            .free_run_containing(e.offset)
            .filter(|r| r.end() >= e.end())
            .ok_or_else(|| Error::invariant(format!("claim of non-free extent {e}")))?;
        self.unindex_run(run);
        if run.offset < e.offset {
            self.index_run(Extent::new(run.offset, e.offset - run.offset));
        }
        if e.end() < run.end() {
            self.index_run(Extent::new(e.end(), run.end() - e.end()));
        }
        for c in e.range() {
            self.state[c as usize] = ClusterState::Allocated;
        }
        self.free_count -= e.length;
        Ok(())
    }

    /// Release allocated extents. Every cluster must currently be
    /// allocated and appear only once; otherwise nothing changes and an
    /// invariant violation is returned. Markers on released clusters are
    /// cleared.
    pub fn release(&mut self, extents: &[Extent], mode: ReleaseMode) -> Result<()> {
        let mut sorted: Vec<Extent> = extents.to_vec();
        sorted.sort_unstable();
        for w in sorted.windows(2) {
            if w[0].overlaps(&w[1]) {
                return Err(Error::invariant(format!(
                    "release list overlaps itself: {} and {}",
                    w[0], w[1]
                )));
            }
        }
        for e in &sorted {
            if e.length == 0 || e.end() > self.total_clusters {
                return Err(Error::invariant(format!("release of out-of-range extent {e}")));
            }
            if let Some(c) = e.range().find(|&c| self.state[c as usize] != ClusterState::Allocated) {
                return Err(Error::invariant(format!(
                    "release of cluster {c} in {e} which is {:?}",
                    self.state[c as usize]
                )));
            }
        }
        for e in extents {
            for c in e.range() {
                self.markers[c as usize] = None;
            }
            match mode {
                ReleaseMode::Immediate => self.insert_free(*e),
                ReleaseMode::Deferred => {
                    for c in e.range() {
                        self.state[c as usize] = ClusterState::Deferred;
                    }
                    self.deferred.push(*e);
                    self.deferred_count += e.length;
                }
            }
        }
        Ok(())
    }

    /// Commit deferred frees: they join the free set, coalesced.
    pub fn checkpoint(&mut self) {
        for e in std::mem::take(&mut self.deferred) {
            self.insert_free(e);
        }
        self.deferred_count = 0;
    }

    /// Slide the allocated extent `src` down onto `dst`, where
    /// `[dst, src.offset)` is exactly one free run. Markers travel with the
    /// data. Afterwards `[dst, dst + len)` is allocated and
    /// `[dst + len, src.end())` is free.
    pub(crate) fn slide_down(&mut self, src: Extent, dst: u64) -> Result<()> {
        let hole = self
            .free_run_containing(dst)
            .filter(|h| h.offset == dst && h.end() == src.offset)
            .ok_or_else(|| Error::invariant(format!("slide of {src} to {dst}: gap is not one free run")))?;
        if let Some(c) = src.range().find(|&c| self.state[c as usize] != ClusterState::Allocated) {
            return Err(Error::invariant(format!("slide source cluster {c} is not allocated")));
        }
        self.unindex_run(hole);
        self.free_count -= hole.length;
        for i in 0..src.length {
            let (from, to) = ((src.offset + i) as usize, (dst + i) as usize);
            self.markers[to] = self.markers[from];
            self.state[to] = ClusterState::Allocated;
        }
        let vacated = Extent::new(dst + src.length, hole.length);
        for c in vacated.range() {
            self.markers[c as usize] = None;
        }
        self.insert_free(vacated);
        Ok(())
    }

    /// Histogram of coalesced free-run lengths (deferred space excluded).
    pub fn free_extent_histogram(&self) -> BTreeMap<u64, u64> {
        let mut hist = BTreeMap::new();
        for &l in self.free_runs.values() {
            *hist.entry(l).or_insert(0) += 1;
        }
        hist
    }

    /// Modeled seconds to read `extents` in order: one seek per
    /// non-adjacent transition (the first extent always seeks) plus the
    /// transfer time of each byte at its band's rate.
    pub fn read_cost(&self, extents: &[Extent], model: &CostModel) -> f64 {
        let mut seconds = 0.0;
        let mut prev_end: Option<u64> = None;
        for e in extents {
            if prev_end != Some(e.offset) {
                seconds += model.seek_time;
            }
            seconds += self.transfer_time(*e);
            prev_end = Some(e.end());
        }
        seconds
    }

    /// Modeled seconds to write `extents` with the head parked at `head`.
    /// Returns the cost and the new head position. Writes that continue
    /// exactly where the head is do not seek.
    pub fn write_cost(&self, extents: &[Extent], model: &CostModel, head: Option<u64>) -> (f64, Option<u64>) {
        let mut seconds = 0.0;
        let mut pos = head;
        for e in extents {
            if pos != Some(e.offset) {
                seconds += model.seek_time;
            }
            seconds += self.transfer_time(*e);
            pos = Some(e.end());
        }
        (seconds, pos)
    }

    fn transfer_time(&self, e: Extent) -> f64 {
        self.bands
            .iter()
            .filter(|b| b.start_cluster < e.end() && e.offset < b.end_cluster)
            .map(|b| {
                let overlap = e.end().min(b.end_cluster) - e.offset.max(b.start_cluster);
                (overlap * self.cluster_size) as f64 / b.transfer_rate
            })
            .sum()
    }

    /// Full consistency check: cluster states agree with the free index and
    /// the deferred list, free runs are maximal, counters add up, and no
    /// marker sits on a non-allocated cluster.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.total_clusters;
        let mut free_seen = 0u64;
        let mut prev_end: Option<u64> = None;
        for (&o, &l) in &self.free_runs {
            if l == 0 || o + l > n {
                return Err(Error::invariant(format!("bad free run ({o},{l})")));
            }
            if let Some(pe) = prev_end {
                if pe > o {
                    return Err(Error::invariant(format!("free runs overlap at {o}")));
                }
                if pe == o {
                    return Err(Error::invariant(format!("free runs not coalesced at {o}")));
                }
            }
            if !self.by_size.contains(&(l, o)) || self.run_starts.tree[self.run_starts.leaves + o as usize] != l {
                return Err(Error::invariant(format!("free run ({o},{l}) missing from an index")));
            }
            if let Some(c) = (o..o + l).find(|&c| self.state[c as usize] != ClusterState::Free) {
                return Err(Error::invariant(format!("cluster {c} in free run is not Free")));
            }
            free_seen += l;
            prev_end = Some(o + l);
        }
        if self.by_size.len() != self.free_runs.len() {
            return Err(Error::invariant("size index out of sync with free runs"));
        }
        let mut deferred_seen = 0u64;
        for e in &self.deferred {
            if let Some(c) = e.range().find(|&c| self.state[c as usize] != ClusterState::Deferred) {
                return Err(Error::invariant(format!(
                    "cluster {c} in deferred list is not Deferred"
                )));
            }
            deferred_seen += e.length;
        }
        let (mut free_state, mut deferred_state, mut alloc_state) = (0u64, 0u64, 0u64);
        for (c, s) in self.state.iter().enumerate() {
            match s {
                ClusterState::Free => free_state += 1,
                ClusterState::Deferred => deferred_state += 1,
                ClusterState::Allocated => alloc_state += 1,
            }
            if *s != ClusterState::Allocated && self.markers[c].is_some() {
                return Err(Error::invariant(format!("marker on non-allocated cluster {c}")));
            }
        }
        if free_state != free_seen || free_seen != self.free_count {
            return Err(Error::invariant(format!(
                "free count mismatch: states {free_state}, runs {free_seen}, counter {}",
                self.free_count
            )));
        }
        if deferred_state != deferred_seen || deferred_seen != self.deferred_count {
            return Err(Error::invariant(format!(
                "deferred count mismatch: states {deferred_state}, list {deferred_seen}, counter {}",
                self.deferred_count
            )));
        }
        if free_seen + deferred_seen + alloc_state != n || alloc_state != self.allocated_clusters() {
            return Err(Error::invariant("free + deferred + allocated != total"));
        }
        Ok(())
    }

    /// Rebuild a volume from serialized parts. Clusters in neither `free`
    /// nor `deferred` are allocated.
    pub fn from_parts(
        total_clusters: u64,
        cluster_size: u64,
        bands: Vec<Band>,
        free: &[Extent],
        deferred: &[Extent],
        markers: impl IntoIterator<Item = (u64, Marker)>,
    ) -> Result<Self> {
        let mut vol = Volume::new(total_clusters, cluster_size, bands)?;
        vol.claim(Extent::new(0, total_clusters))?;
        let mut all: Vec<Extent> = free.iter().chain(deferred).copied().collect();
        all.sort_unstable();
        if let Some(w) = all.windows(2).find(|w| w[0].overlaps(&w[1])) {
            return Err(Error::config(format!("snapshot extents overlap: {} {}", w[0], w[1])));
        }
        vol.release(free, ReleaseMode::Immediate)?;
        vol.release(deferred, ReleaseMode::Deferred)?;
        for (c, m) in markers {
            if c >= total_clusters || vol.state(c) != ClusterState::Allocated {
                return Err(Error::Corruption {
                    cluster: c,
                    detail: "marker on a cluster that is not allocated".into(),
                });
            }
            vol.set_marker(c, Some(m));
        }
        Ok(vol)
    }
}
