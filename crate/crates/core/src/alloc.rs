//! Allocation policies.
//!
//! An [`Allocator`] turns a cluster-count request into an ordered extent
//! list claimed from a [`Volume`]. The extent order is the logical order of
//! the data. Ties are always broken toward the lowest offset.
//!
//! | policy       | contiguous choice                         | split order (fragmenting) |
//! |--------------|-------------------------------------------|---------------------------|
//! | `first_fit`  | lowest run that fits                      | address order             |
//! | `best_fit`   | smallest run that fits                    | decreasing size           |
//! | `worst_fit`  | largest run                               | decreasing size           |
//! | `buddy`      | smallest free aligned power-of-two block  | never splits              |
//! | `ntfs_like`  | outer-band first fit, then run cache      | decreasing size           |
//! | `log_append` | at the log head                           | at the volume wrap        |
//!
//! Fragmenting policies only split when no single run can hold the request.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{ClusterState, Extent, ReleaseMode, Volume};

pub const DEFAULT_NTFS_CACHE_DEPTH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    FirstFit,
    BestFit,
    WorstFit,
    Buddy,
    NtfsLike,
    LogAppend,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::FirstFit,
        PolicyKind::BestFit,
        PolicyKind::WorstFit,
        PolicyKind::Buddy,
        PolicyKind::NtfsLike,
        PolicyKind::LogAppend,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::FirstFit => "first_fit",
            PolicyKind::BestFit => "best_fit",
            PolicyKind::WorstFit => "worst_fit",
            PolicyKind::Buddy => "buddy",
            PolicyKind::NtfsLike => "ntfs_like",
            PolicyKind::LogAppend => "log_append",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown policy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyParams {
    /// Smallest buddy block is `2^buddy_min_order` clusters.
    pub buddy_min_order: u32,
    /// Number of largest free runs kept in the NTFS-like run cache.
    pub ntfs_cache_depth: usize,
    /// NTFS-like: continue an append right after the object's previous
    /// extent when the space there is free, before trying the stages.
    pub ntfs_extend_appends: bool,
}

impl Default for PolicyParams {
    fn default() -> Self {
        PolicyParams {
            buddy_min_order: 0,
            ntfs_cache_depth: DEFAULT_NTFS_CACHE_DEPTH,
            ntfs_extend_appends: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocPolicy {
    pub kind: PolicyKind,
    /// Whether a request may be split across several extents.
    pub fragmenting: bool,
    /// How the store releases old versions and deleted objects.
    pub release_mode: ReleaseMode,
    pub params: PolicyParams,
}

impl AllocPolicy {
    /// The policy with its customary defaults: the classic fits and buddy
    /// are contiguous-only, `ntfs_like` and `log_append` may fragment, and
    /// frees wait for a checkpoint.
    pub fn new(kind: PolicyKind) -> Self {
        AllocPolicy {
            kind,
            fragmenting: matches!(kind, PolicyKind::NtfsLike | PolicyKind::LogAppend),
            release_mode: ReleaseMode::Deferred,
            params: PolicyParams::default(),
        }
    }

    pub fn fragmenting(mut self, yes: bool) -> Self {
        self.fragmenting = yes;
        self
    }

    pub fn release_mode(mut self, mode: ReleaseMode) -> Self {
        self.release_mode = mode;
        self
    }

    pub fn params(mut self, params: PolicyParams) -> Self {
        self.params = params;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == PolicyKind::NtfsLike && self.params.ntfs_cache_depth == 0 {
            return Err(Error::config("ntfs_cache_depth must be at least 1"));
        }
        if self.params.buddy_min_order > 62 {
            return Err(Error::config("buddy_min_order is too large"));
        }
        Ok(())
    }
}

/// One step of a cleaner pass: `from` was slid down to start at `to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relocation {
    pub from: Extent,
    pub to: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CleanOutcome {
    /// Clusters whose contents were copied.
    pub moved: u64,
    /// Moves in the order performed, sorted by `from.offset`.
    pub relocations: Vec<Relocation>,
}

/// Remap an extent list through a cleaner pass, re-coalescing neighbours
/// that became adjacent.
pub fn apply_relocations(extents: &[Extent], relocations: &[Relocation]) -> Vec<Extent> {
    let mapped: Vec<Extent> = extents
        .iter()
        .map(|e| {
            let idx = relocations.partition_point(|r| r.from.offset <= e.offset);
            match idx.checked_sub(1).map(|i| relocations[i]) {
                Some(r) if e.end() <= r.from.end() => Extent::new(r.to + (e.offset - r.from.offset), e.length),
                _ => *e,
            }
        })
        .collect();
    crate::volume::coalesce(&mapped)
}

/// An allocation policy plus the little state some policies keep between
/// calls (the NTFS-like run cache and the log head).
#[derive(Debug, Clone)]
pub struct Allocator {
    policy: AllocPolicy,
    run_cache: Vec<u64>,
    log_head: u64,
}

impl Allocator {
    pub fn new(policy: AllocPolicy) -> Result<Self> {
        policy.validate()?;
        Ok(Allocator {
            policy,
            run_cache: Vec::new(),
            log_head: 0,
        })
    }

    pub fn policy(&self) -> &AllocPolicy {
        &self.policy
    }

    pub fn log_head(&self) -> u64 {
        self.log_head
    }

    /// Offsets currently held by the NTFS-like run cache.
    pub fn cached_runs(&self) -> &[u64] {
        &self.run_cache
    }

    /// Allocate `clusters` clusters. Buddy grants a whole power-of-two
    /// block, which may exceed the request; every other policy grants
    /// exactly `clusters`.
    pub fn alloc(&mut self, vol: &mut Volume, clusters: u64) -> Result<Vec<Extent>> {
        self.alloc_append(vol, clusters, None)
    }

    /// Allocate the next piece of an object whose data so far ends just
    /// before cluster `after`. Only the NTFS-like policy uses the position.
    pub fn alloc_append(&mut self, vol: &mut Volume, clusters: u64, after: Option<u64>) -> Result<Vec<Extent>> {
        if clusters == 0 {
            return Err(Error::Usage("allocation of zero clusters".into()));
        }
        let extents = match self.policy.kind {
            PolicyKind::FirstFit => self.alloc_first_fit(vol, clusters),
            PolicyKind::BestFit => self.alloc_best_fit(vol, clusters),
            PolicyKind::WorstFit => self.alloc_worst_fit(vol, clusters),
            PolicyKind::Buddy => alloc_buddy(vol, clusters, self.policy.params.buddy_min_order),
            PolicyKind::NtfsLike => match after.and_then(|a| self.extend_in_place(vol, clusters, a)) {
                Some(e) => Ok(vec![e]),
                None => self.alloc_ntfs_like(vol, clusters),
            },
            PolicyKind::LogAppend => self.alloc_log_append(vol, clusters),
        }?;
        for e in &extents {
            vol.claim(*e)?;
        }
        Ok(extents)
    }

    fn alloc_first_fit(&self, vol: &Volume, n: u64) -> Result<Vec<Extent>> {
        if let Some(run) = vol.first_fit(n, 0..vol.total_clusters()) {
            return Ok(vec![Extent::new(run.offset, n)]);
        }
        self.split(vol, n, vol.free_extents())
    }

    fn alloc_best_fit(&self, vol: &Volume, n: u64) -> Result<Vec<Extent>> {
        if let Some(run) = vol.best_fit(n) {
            return Ok(vec![Extent::new(run.offset, n)]);
        }
        self.split(vol, n, vol.runs_largest_first())
    }

    fn alloc_worst_fit(&self, vol: &Volume, n: u64) -> Result<Vec<Extent>> {
        if let Some(run) = vol.largest_run().filter(|r| r.length >= n) {
            return Ok(vec![Extent::new(run.offset, n)]);
        }
        self.split(vol, n, vol.runs_largest_first())
    }

    /// Greedy split over `runs` in the given order, when fragmenting.
    fn split(&self, vol: &Volume, n: u64, runs: impl Iterator<Item = Extent>) -> Result<Vec<Extent>> {
        if !self.policy.fragmenting || vol.free_clusters() < n {
            return Err(no_space(vol, n));
        }
        Ok(take_greedy(runs, n))
    }

    /// Three stages: first fit among free runs wholly inside the outer
    /// band; else the smallest run-cache entry that fits (refreshing the
    /// cache once on a miss); else, when fragmenting, greedy from the
    /// largest runs down.
    fn alloc_ntfs_like(&mut self, vol: &Volume, n: u64) -> Result<Vec<Extent>> {
        let outer = *vol.outer_band();
        if let Some(run) = vol
            .first_fit(n, outer.start_cluster..outer.end_cluster)
            .filter(|r| r.end() <= outer.end_cluster)
        {
            return Ok(vec![Extent::new(run.offset, n)]);
        }
        if let Some(e) = self.cache_pick(vol, n) {
            return Ok(vec![e]);
        }
        self.refresh_cache(vol);
        if let Some(e) = self.cache_pick(vol, n) {
            return Ok(vec![e]);
        }
        self.split(vol, n, vol.runs_largest_first())
    }

    fn extend_in_place(&self, vol: &Volume, n: u64, after: u64) -> Option<Extent> {
        if !self.policy.params.ntfs_extend_appends {
            return None;
        }
        let run = vol.free_run_containing(after)?;
        (run.end() - after >= n).then(|| Extent::new(after, n))
    }

    fn refresh_cache(&mut self, vol: &Volume) {
        self.run_cache = vol
            .runs_largest_first()
            .take(self.policy.params.ntfs_cache_depth)
            .map(|r| r.offset)
            .collect();
    }

    /// Smallest cached run that still fits. An entry is the offset of a
    /// free position; its usable length is whatever is free from there to
    /// the end of its run now. Entries that are no longer free are dropped.
    fn cache_pick(&mut self, vol: &Volume, n: u64) -> Option<Extent> {
        self.run_cache.retain(|&o| vol.state(o) == ClusterState::Free);
        let (idx, offset, len) = self
            .run_cache
            .iter()
            .enumerate()
            .filter_map(|(i, &o)| {
                let run = vol.free_run_containing(o)?;
                let len = run.end() - o;
                (len >= n).then_some((i, o, len))
            })
            .min_by_key(|&(_, o, len)| (len, o))?;
        if len > n {
            self.run_cache[idx] = offset + n;
        } else {
            self.run_cache.remove(idx);
        }
        Some(Extent::new(offset, n))
    }

    /// Allocate at the log head, continuing into free space at the start
    /// of the volume when the head run reaches the end. Holes behind the
    /// head are not reused until [`Allocator::clean_log`] slides the head
    /// onto them.
    fn alloc_log_append(&mut self, vol: &Volume, n: u64) -> Result<Vec<Extent>> {
        let total = vol.total_clusters();
        let run_from = |pos: u64| vol.free_run_containing(pos).map(|r| Extent::new(pos, r.end() - pos));
        let head_run = if self.log_head < total {
            run_from(self.log_head)
        } else {
            None
        };

        let mut out = Vec::new();
        match head_run {
            Some(r) if r.length >= n => out.push(Extent::new(r.offset, n)),
            // Live data right after the head: only the cleaner can help.
            Some(r) if r.end() < total => return Err(no_space(vol, n)),
            None if self.log_head < total => return Err(no_space(vol, n)),
            tail => {
                let tail_len = tail.map_or(0, |r| r.length);
                let start = run_from(0).map_or(0, |r| r.length);
                if self.policy.fragmenting && tail_len + start >= n {
                    out.extend(tail);
                    out.push(Extent::new(0, n - tail_len));
                } else if start >= n {
                    out.push(Extent::new(0, n));
                } else {
                    return Err(no_space(vol, n));
                }
            }
        }
        self.log_head = out.last().map_or(self.log_head, |e| e.end());
        Ok(out)
    }

    /// Log cleaner: slide allocated runs down over the lowest free hole
    /// until that hole reaches `target_free_clusters` contiguous clusters
    /// or nothing is left to move. Deferred clusters are pinned in place.
    /// The log head moves to the resulting hole.
    pub fn clean_log(&mut self, vol: &mut Volume, target_free_clusters: u64) -> Result<CleanOutcome> {
        let mut out = CleanOutcome::default();
        let total = vol.total_clusters();
        let mut scan_from = 0;
        let mut last_hole = None;
        while let Some(hole) = vol.next_free_run(scan_from) {
            last_hole = Some(hole.offset);
            if hole.length >= target_free_clusters || hole.end() >= total {
                break;
            }
            let a = hole.end();
            match vol.state(a) {
                ClusterState::Allocated => {
                    let mut b = a;
                    while b < total && vol.state(b) == ClusterState::Allocated {
                        b += 1;
                    }
                    let from = Extent::new(a, b - a);
                    vol.slide_down(from, hole.offset)?;
                    out.moved += from.length;
                    out.relocations.push(Relocation { from, to: hole.offset });
                    scan_from = hole.offset;
                }
                ClusterState::Deferred => {
                    let mut b = a;
                    while b < total && vol.state(b) == ClusterState::Deferred {
                        b += 1;
                    }
                    scan_from = b;
                }
                ClusterState::Free => {
                    return Err(Error::invariant(format!("free run ending at {a} is not maximal")));
                }
            }
        }
        if let Some(h) = last_hole {
            self.log_head = h;
        }
        Ok(out)
    }
}

fn no_space(vol: &Volume, n: u64) -> Error {
    Error::NoSpace {
        requested: n,
        free: vol.free_clusters(),
    }
}

fn take_greedy(runs: impl Iterator<Item = Extent>, n: u64) -> Vec<Extent> {
    let mut need = n;
    let mut out = Vec::new();
    for r in runs {
        let take = r.length.min(need);
        out.push(Extent::new(r.offset, take));
        need -= take;
        if need == 0 {
            break;
        }
    }
    out
}

/// Decompose a free run into maximal aligned power-of-two blocks, as
/// `(order, offset)`. With eager merging this is exactly the content of a
/// binary buddy allocator's free lists for that run.
pub fn buddy_blocks(run: Extent) -> Vec<(u32, u64)> {
    let mut out = Vec::new();
    let mut p = run.offset;
    let end = run.end();
    while p < end {
        let mut order = p.trailing_zeros().min(62);
        while (1u64 << order) > end - p {
            order -= 1;
        }
        out.push((order, p));
        p += 1 << order;
    }
    out
}

/// Binary buddy allocation: round the request up to `2^k` (at least
/// `2^min_order`), take the smallest free block of order `>= k` (lowest
/// offset among equals) and split it down, keeping the lowest half.
pub fn alloc_buddy(vol: &Volume, clusters: u64, min_order: u32) -> Result<Vec<Extent>> {
    let total = vol.total_clusters();
    if !total.is_power_of_two() {
        return Err(Error::config(format!(
            "buddy allocation needs a power-of-two volume, got {total} clusters"
        )));
    }
    let order = clusters.next_power_of_two().trailing_zeros().max(min_order);
    let block = 1u64 << order;
    if block > total {
        return Err(no_space(vol, block));
    }
    vol.runs_at_least(block)
        .flat_map(buddy_blocks)
        .filter(|&(o, _)| o >= order)
        .min()
        .map(|(_, offset)| vec![Extent::new(offset, block)])
        .ok_or_else(|| no_space(vol, block))
}

/// Worst-case tracker for contiguous first fit: peak live bytes `M`,
/// largest object `n` and the allocation high-water mark. First fit never
/// needs more than `M * log2(n)` bytes of address space.
///
/// Sizes are cluster-granular bytes, the unit the allocator works in.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RobsonTracker {
    pub peak_live_bytes: u64,
    pub max_object_bytes: u64,
    pub high_water_bytes: u64,
}

impl RobsonTracker {
    pub fn observe_live(&mut self, live_bytes: u64) {
        self.peak_live_bytes = self.peak_live_bytes.max(live_bytes);
    }

    pub fn observe_object(&mut self, bytes: u64) {
        self.max_object_bytes = self.max_object_bytes.max(bytes);
    }

    pub fn observe_alloc(&mut self, extents: &[Extent], cluster_size: u64) {
        if let Some(end) = extents.iter().map(Extent::end).max() {
            self.high_water_bytes = self.high_water_bytes.max(end * cluster_size);
        }
    }

    /// `M * log2(n)`.
    pub fn bound_bytes(&self) -> f64 {
        if self.max_object_bytes == 0 {
            return 0.0;
        }
        self.peak_live_bytes as f64 * (self.max_object_bytes as f64).log2()
    }

    pub fn holds(&self) -> bool {
        self.high_water_bytes as f64 <= self.bound_bytes()
    }
}
