#![forbid(unsafe_code)]
//! Storage-aging laboratory.
//!
//! Simulates extent allocation on a virtual volume under a get/put workload
//! where every update is a *safe write* (write a full new copy, atomically
//! swap it in, free the old copy). Allocation policies are pluggable and
//! fragmentation is measured as a function of *storage age*: bytes of
//! objects that were ever written since the bulk load, divided by the bytes
//! currently live.
//!
//! The layering, bottom up:
//!
//! 1. [`volume`]: cluster-addressable space, coalesced free runs, deferred
//!    frees, per-cluster markers, banded seek/transfer cost model.
//! 2. [`alloc`]: allocation policies (first/best/worst fit, buddy,
//!    NTFS-like run cache, log-structured append plus cleaner).
//! 3. [`store`]: objects with put/get/delete/safe-write and the marker
//!    scanner used as an independent layout oracle.
//! 4. [`workload`]: seeded bulk load and uniform-random replacement,
//!    clocked by storage age.
//! 5. [`metrics`]: fragments-per-object statistics and modeled throughput.
//! 6. [`harness`]: JSON configs, grids, CSV/JSON output, bundled recipes.

pub mod alloc;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod rng;
pub mod snapshot;
pub mod store;
pub mod volume;
pub mod workload;

pub use alloc::{AllocPolicy, Allocator, PolicyKind, PolicyParams, RobsonTracker};
pub use error::{Error, Result};
pub use metrics::FragReport;
pub use store::{ObjectRecord, Store, StoreConfig};
pub use volume::{Band, ClusterState, CostModel, Extent, Marker, ObjectId, ReleaseMode, Volume};
pub use workload::{AgeClock, SizeDist, WorkloadSpec};
