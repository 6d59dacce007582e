//! Experiment runner: JSON configs, grids, CSV/JSON output and the bundled
//! recipes.
//!
//! A config is one JSON document:
//!
//! ```json
//! {
//!   "name": "example",
//!   "volume": { "total_clusters": 262144, "cluster_size": 4096 },
//!   "store": { "policy": "first_fit", "write_request_size": 65536 },
//!   "workload": {
//!     "n_objects": 3686,
//!     "size_dist": { "kind": "constant", "mean": 262144 },
//!     "target_age": 10, "seed": 1,
//!     "measurement_ages": [0, 2, 4, 6, 8, 10]
//!   },
//!   "outputs": { "csv": "out.csv", "json": "out.json" }
//! }
//! ```
//!
//! Optional keys: `volume.bands` (default two equal halves at 60 and 30
//! MB/s), `volume.seek_time` (0.008 s), `store.fragmenting` and
//! `store.release_mode` (policy defaults), `store.policy_params`,
//! `store.size_hint` (false), `store.checkpoint_every` (1),
//! `store.checkpoint_unit` (`operation` or `write_request`),
//! `workload.read_fraction` (0), `outputs.snapshot`.

use std::fmt;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alloc::{AllocPolicy, PolicyKind, PolicyParams};
use crate::error::{Error, Result};
use crate::metrics::FragReport;
use crate::snapshot::Snapshot;
use crate::store::{CheckpointUnit, Store, StoreConfig, DEFAULT_WRITE_REQUEST_SIZE};
use crate::volume::{default_bands, Band, CostModel, ReleaseMode, Volume, DEFAULT_CLUSTER_SIZE, DEFAULT_SEEK_TIME};
use crate::workload::{SizeDist, SizeKind, Workload, WorkloadSpec};

pub const CSV_HEADER: &str = "cell_key,policy,seed,storage_age,frag_mean,frag_p50,frag_p99,frag_max,free_runs_count,free_bytes,est_read_mbps,est_write_mbps";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeConfig {
    pub total_clusters: u64,
    #[serde(default = "default_cluster_size")]
    pub cluster_size: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bands: Option<Vec<Band>>,
    #[serde(default = "default_seek_time")]
    pub seek_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreSection {
    pub policy: PolicyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fragmenting: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub release_mode: Option<ReleaseMode>,
    #[serde(default)]
    pub policy_params: PolicyParams,
    #[serde(default = "default_write_request_size")]
    pub write_request_size: u64,
    #[serde(default)]
    pub size_hint: bool,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub checkpoint_unit: CheckpointUnit,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub json: Option<PathBuf>,
    /// Written at the end of a run, or at the point a run aborts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub volume: VolumeConfig,
    pub store: StoreSection,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub outputs: Outputs,
}

fn default_cluster_size() -> u64 {
    DEFAULT_CLUSTER_SIZE
}
fn default_seek_time() -> f64 {
    DEFAULT_SEEK_TIME
}
fn default_write_request_size() -> u64 {
    DEFAULT_WRITE_REQUEST_SIZE
}
fn default_checkpoint_every() -> u64 {
    1
}
fn default_name() -> String {
    "run".into()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.volume.total_clusters * self.volume.cluster_size
    }

    /// Expected live bytes over capacity.
    pub fn occupancy(&self) -> f64 {
        self.workload.expected_live_bytes() as f64 / self.capacity_bytes() as f64
    }

    pub fn policy(&self) -> AllocPolicy {
        let s = &self.store;
        let mut p = AllocPolicy::new(s.policy).params(s.policy_params);
        if let Some(f) = s.fragmenting {
            p = p.fragmenting(f);
        }
        if let Some(m) = s.release_mode {
            p = p.release_mode(m);
        }
        p
    }

    pub fn store_config(&self) -> Result<StoreConfig> {
        let mut cfg = StoreConfig::new(self.policy());
        cfg.write_request_size = self.store.write_request_size;
        cfg.size_hint = self.store.size_hint;
        cfg.checkpoint_every = self.store.checkpoint_every;
        cfg.checkpoint_unit = self.store.checkpoint_unit;
        cfg.cost = CostModel::new(self.volume.seek_time)?;
        Ok(cfg)
    }

    pub fn build_volume(&self) -> Result<Volume> {
        let v = &self.volume;
        let bands = v.bands.clone().unwrap_or_else(|| default_bands(v.total_clusters));
        Volume::new(v.total_clusters, v.cluster_size, bands)
    }

    pub fn build_store(&self) -> Result<Store> {
        Store::new(self.build_volume()?, self.store_config()?)
    }

    /// Full validation, including the occupancy check. Runs no simulation.
    pub fn validate(&self) -> Result<()> {
        let vol = self.build_volume()?;
        self.store_config()?.validate(vol.cluster_size())?;
        self.workload.validate()?;
        let required = self.workload.expected_live_bytes();
        if required >= self.capacity_bytes() {
            return Err(Error::Infeasible {
                required,
                available: self.capacity_bytes(),
            });
        }
        Ok(())
    }
}

/// Run a config to completion. On failure the store is returned as it was
/// when the error surfaced, for a diagnostic snapshot.
pub fn execute(cfg: &ExperimentConfig) -> (Result<Vec<FragReport>>, Option<Store>) {
    if let Err(e) = cfg.validate() {
        return (Err(e), None);
    }
    let mut store = match cfg.build_store() {
        Ok(s) => s,
        Err(e) => return (Err(e), None),
    };
    let result = Workload::new(cfg.workload.clone()).and_then(|mut w| {
        w.bulk_load(&mut store)?;
        w.run_to_age(&mut store)
    });
    (result, Some(store))
}

pub fn run(cfg: &ExperimentConfig) -> Result<Vec<FragReport>> {
    execute(cfg).0
}

pub fn csv_rows(cell_key: &str, reports: &[FragReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{},{},{},{},{},{:.6},{:.6}\n",
            cell_key,
            r.policy,
            r.seed,
            r.storage_age,
            r.frag_mean,
            r.frag_p50,
            r.frag_p99,
            r.frag_max,
            r.free_runs_count(),
            r.free_bytes,
            r.est_read_throughput / 1e6,
            r.est_write_throughput / 1e6,
        ));
    }
    out
}

pub fn csv(cell_key: &str, reports: &[FragReport]) -> String {
    format!("{CSV_HEADER}\n{}", csv_rows(cell_key, reports))
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

pub fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    }
}

#[derive(Serialize)]
struct RunDocument<'a> {
    config: &'a ExperimentConfig,
    reports: &'a [FragReport],
}

/// Write the configured CSV/JSON/snapshot outputs for a finished run.
pub fn write_outputs(cfg: &ExperimentConfig, reports: &[FragReport], store: Option<&Store>) -> Result<()> {
    if let Some(p) = &cfg.outputs.csv {
        write_file(p, &csv(&cfg.name, reports))?;
    }
    if let Some(p) = &cfg.outputs.json {
        let doc = RunDocument { config: cfg, reports };
        write_file(p, &to_json(&doc))?;
    }
    write_snapshot(cfg, store)
}

pub fn write_snapshot(cfg: &ExperimentConfig, store: Option<&Store>) -> Result<()> {
    match (&cfg.outputs.snapshot, store) {
        (Some(p), Some(s)) => write_file(p, &to_json(&Snapshot::capture(s))),
        _ => Ok(()),
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Io { .. } => 1,
        Error::Config(_) | Error::Usage(_) | Error::UndefinedAge | Error::NotFound(_) => 2,
        Error::Infeasible { .. } => 3,
        Error::NoSpace { .. } => 4,
        Error::InvariantViolation(_) | Error::Aborted { .. } => 5,
        Error::Corruption { .. } => 6,
        Error::AgingAborted { .. } => unreachable!("root looks through aborts"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentGrid {
    #[serde(default = "default_name")]
    pub name: String,
    pub base: ExperimentConfig,
    #[serde(default)]
    pub policies: Vec<PolicyKind>,
    /// Target live bytes over capacity; sets `n_objects`.
    #[serde(default)]
    pub occupancies: Vec<f64>,
    #[serde(default)]
    pub write_request_sizes: Vec<u64>,
    #[serde(default)]
    pub size_dists: Vec<SizeDist>,
    #[serde(default)]
    pub volume_clusters: Vec<u64>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub outputs: Outputs,
}

/// Identifies a grid cell; output rows are sorted by this key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub volume_clusters: u64,
    pub policy: PolicyKind,
    /// Occupancy in parts per million.
    pub occupancy_ppm: u64,
    pub write_request_size: u64,
    pub size_kind: SizeKind,
    pub size_mean: u64,
    pub size_half_width: u64,
    pub seed: u64,
}

impl CellKey {
    fn of(cfg: &ExperimentConfig) -> Self {
        let d = cfg.workload.size_dist;
        CellKey {
            volume_clusters: cfg.volume.total_clusters,
            policy: cfg.store.policy,
            occupancy_ppm: (cfg.occupancy() * 1e6).round() as u64,
            write_request_size: cfg.store.write_request_size,
            size_kind: d.kind,
            size_mean: d.mean,
            size_half_width: d.half_width,
            seed: cfg.workload.seed,
        }
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.size_kind {
            SizeKind::Constant => "constant",
            SizeKind::Uniform => "uniform",
        };
        write!(
            f,
            "clusters={};policy={};occ={:.4};wrs={};size={}:{}:{};seed={}",
            self.volume_clusters,
            self.policy,
            self.occupancy_ppm as f64 / 1e6,
            self.write_request_size,
            kind,
            self.size_mean,
            self.size_half_width,
            self.seed
        )
    }
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

impl ExperimentGrid {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// Cross product of all override lists, sorted by cell key.
    pub fn expand(&self) -> Result<Vec<(CellKey, ExperimentConfig)>> {
        if self.occupancies.iter().any(|o| !(*o > 0.0 && o.is_finite())) {
            return Err(Error::config("occupancies must be positive"));
        }
        let b = &self.base;
        let mut cells = Vec::new();
        for &clusters in &axis(&self.volume_clusters, b.volume.total_clusters) {
            for &policy in &axis(&self.policies, b.store.policy) {
                for &wrs in &axis(&self.write_request_sizes, b.store.write_request_size) {
                    for &dist in &axis(&self.size_dists, b.workload.size_dist) {
                        let occs: Vec<Option<f64>> = if self.occupancies.is_empty() {
                            vec![None]
                        } else {
                            self.occupancies.iter().copied().map(Some).collect()
                        };
                        for occ in occs {
                            for &seed in &axis(&self.seeds, b.workload.seed) {
                                let mut cfg = b.clone();
                                cfg.volume.total_clusters = clusters;
                                if !self.volume_clusters.is_empty() {
                                    cfg.volume.bands = None;
                                }
                                if policy != b.store.policy {
                                    cfg.store.fragmenting = None;
                                    cfg.store.release_mode = None;
                                }
                                cfg.store.policy = policy;
                                cfg.store.write_request_size = wrs;
                                cfg.workload.size_dist = dist;
                                cfg.workload.seed = seed;
                                if let Some(o) = occ {
                                    let live = o * cfg.capacity_bytes() as f64;
                                    cfg.workload.n_objects = ((live / dist.mean as f64).round() as u64).max(1);
                                }
                                cfg.outputs = Outputs::default();
                                let key = CellKey::of(&cfg);
                                cfg.name = key.to_string();
                                cells.push((key, cfg));
                            }
                        }
                    }
                }
            }
        }
        cells.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = cells.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::config(format!("grid has duplicate cell {}", w[0].0)));
        }
        Ok(cells)
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub key: CellKey,
    pub result: std::result::Result<Vec<FragReport>, CellFailure>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellFailure {
    Error(Error),
    Panic(String),
}

impl fmt::Display for CellFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellFailure::Error(e) => write!(f, "{e}"),
            CellFailure::Panic(msg) => write!(f, "panicked: {msg}"),
        }
    }
}

impl CellFailure {
    pub fn exit_code(&self) -> i32 {
        match self {
            CellFailure::Error(e) => exit_code(e),
            CellFailure::Panic(_) => 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    /// In cell-key order.
    pub cells: Vec<CellResult>,
}

impl GridOutcome {
    pub fn csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for c in &self.cells {
            if let Ok(reports) = &c.result {
                out.push_str(&csv_rows(&c.key.to_string(), reports));
            }
        }
        out
    }

    pub fn failures(&self) -> impl Iterator<Item = (&CellKey, &CellFailure)> {
        self.cells
            .iter()
            .filter_map(|c| c.result.as_ref().err().map(|e| (&c.key, e)))
    }

    pub fn summary(&self) -> String {
        let failed: Vec<String> = self.failures().map(|(k, e)| format!("  {k}: {e}")).collect();
        let mut s = format!("{} cells, {} failed\n", self.cells.len(), failed.len());
        for line in failed {
            s.push_str(&line);
            s.push('\n');
        }
        s
    }
}

#[derive(Serialize)]
struct GridCellDocument<'a> {
    cell_key: String,
    reports: Option<&'a [FragReport]>,
    error: Option<String>,
}

pub fn grid_json(outcome: &GridOutcome) -> String {
    let docs: Vec<GridCellDocument> = outcome
        .cells
        .iter()
        .map(|c| GridCellDocument {
            cell_key: c.key.to_string(),
            reports: c.result.as_ref().ok().map(Vec::as_slice),
            error: c.result.as_ref().err().map(ToString::to_string),
        })
        .collect();
    to_json(&docs)
}

fn run_cell(cfg: &ExperimentConfig) -> std::result::Result<Vec<FragReport>, CellFailure> {
    match catch_unwind(AssertUnwindSafe(|| run(cfg))) {
        Ok(r) => r.map_err(CellFailure::Error),
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            Err(CellFailure::Panic(msg))
        }
    }
}

/// Run every cell on a pool of `parallelism` workers. A failing cell is
/// recorded in its slot and does not stop the others.
pub fn run_grid(grid: &ExperimentGrid, parallelism: usize) -> Result<GridOutcome> {
    let cells = grid.expand()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let results: Vec<_> = pool.install(|| cells.par_iter().map(|(_, cfg)| run_cell(cfg)).collect());
    Ok(GridOutcome {
        cells: cells
            .into_iter()
            .zip(results)
            .map(|((key, _), result)| CellResult { key, result })
            .collect(),
    })
}

pub fn write_grid_outputs(grid: &ExperimentGrid, outcome: &GridOutcome) -> Result<()> {
    if let Some(p) = &grid.outputs.csv {
        write_file(p, &outcome.csv())?;
    }
    if let Some(p) = &grid.outputs.json {
        write_file(p, &grid_json(outcome))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Recipe {
    Experiment(ExperimentConfig),
    Grid(ExperimentGrid),
}

impl Recipe {
    /// A document with a `base` key is a grid.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        if value.get("base").is_some() {
            ExperimentGrid::from_json(text).map(Recipe::Grid)
        } else {
            ExperimentConfig::from_json(text).map(Recipe::Experiment)
        }
    }
}

/// Bundled reproduction recipes as (name, JSON).
pub const RECIPES: &[(&str, &str)] = &[
    ("fig3_smallobjects", include_str!("../configs/fig3_smallobjects.json")),
    ("exact_fit", include_str!("../configs/exact_fit.json")),
    (
        "fig5_size_distribution",
        include_str!("../configs/fig5_size_distribution.json"),
    ),
    ("fig6_volume_size", include_str!("../configs/fig6_volume_size.json")),
    ("policy_comparison", include_str!("../configs/policy_comparison.json")),
    ("write_request_size", include_str!("../configs/write_request_size.json")),
];

pub fn recipe(name: &str) -> Option<Result<Recipe>> {
    RECIPES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| Recipe::from_json(text))
}

/// Resolve a CLI argument: an existing file path, else a bundled recipe.
pub fn load_recipe(arg: &str) -> Result<Recipe> {
    let path = Path::new(arg);
    if path.exists() {
        let text = read_file(path)?;
        return Recipe::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{arg}: {msg}")),
            e => e,
        });
    }
    recipe(arg).unwrap_or_else(|| {
        Err(Error::Io {
            path: arg.into(),
            detail: "no such file or bundled recipe".into(),
        })
    })
}
