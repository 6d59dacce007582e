//! Seeded bulk load and uniform-random replacement, clocked by storage age.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{build_report, FragReport, ReadStats};
use crate::rng::Rng;
use crate::store::{Store, WriteMeter};
use crate::volume::ObjectId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeKind {
    Constant,
    Uniform,
}

/// Object size distribution. Uniform draws are integers in
/// `[mean - half_width, mean + half_width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeDist {
    pub kind: SizeKind,
    pub mean: u64,
    #[serde(default)]
    pub half_width: u64,
}

impl SizeDist {
    pub fn constant(mean: u64) -> Self {
        SizeDist {
            kind: SizeKind::Constant,
            mean,
            half_width: 0,
        }
    }

    pub fn uniform(mean: u64, half_width: u64) -> Self {
        SizeDist {
            kind: SizeKind::Uniform,
            mean,
            half_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean == 0 {
            return Err(Error::config("size_dist.mean must be positive"));
        }
        if self.half_width >= self.mean {
            return Err(Error::config(format!(
                "size_dist.half_width {} must be below the mean {}",
                self.half_width, self.mean
            )));
        }
        Ok(())
    }

    /// Largest size the distribution can produce.
    pub fn max(&self) -> u64 {
        match self.kind {
            SizeKind::Constant => self.mean,
            SizeKind::Uniform => self.mean + self.half_width,
        }
    }

    /// Constant draws consume no random numbers.
    pub fn sample(&self, rng: &mut Rng) -> u64 {
        match self.kind {
            SizeKind::Constant => self.mean,
            SizeKind::Uniform => rng.between(self.mean - self.half_width, self.mean + self.half_width),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeClock {
    /// Bytes of objects inserted, rewritten or deleted since the bulk load.
    pub bytes_turned_over: u64,
    pub live_bytes: u64,
}

impl AgeClock {
    pub fn storage_age(&self) -> Result<f64> {
        if self.live_bytes == 0 {
            return Err(Error::UndefinedAge);
        }
        Ok(self.bytes_turned_over as f64 / self.live_bytes as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub n_objects: u64,
    pub size_dist: SizeDist,
    pub target_age: f64,
    #[serde(default)]
    pub read_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub measurement_ages: Vec<f64>,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_objects == 0 {
            return Err(Error::config("n_objects must be at least 1"));
        }
        self.size_dist.validate()?;
        if !(self.target_age >= 0.0 && self.target_age.is_finite()) {
            return Err(Error::config("target_age must be a finite non-negative number"));
        }
        if !(0.0..1.0).contains(&self.read_fraction) {
            return Err(Error::config("read_fraction must be in [0, 1)"));
        }
        if self.measurement_ages.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(Error::config("measurement_ages must be finite and non-negative"));
        }
        if self.measurement_ages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("measurement_ages must be strictly increasing"));
        }
        Ok(())
    }

    /// Live bytes this workload asks for, by expectation.
    pub fn expected_live_bytes(&self) -> u64 {
        self.n_objects * self.size_dist.mean
    }
}

/// Drives one store through bulk load and aging. Owns the random stream so
/// the sequence of sizes, picks and reads is a function of the seed alone.
#[derive(Debug, Clone)]
pub struct Workload {
    spec: WorkloadSpec,
    rng: Rng,
    next_id: u64,
    safe_writes: u64,
    reads: ReadStats,
    meter_mark: WriteMeter,
}

impl Workload {
    pub fn new(spec: WorkloadSpec) -> Result<Self> {
        spec.validate()?;
        let rng = Rng::new(spec.seed);
        Ok(Workload {
            spec,
            rng,
            next_id: 0,
            safe_writes: 0,
            reads: ReadStats::default(),
            meter_mark: WriteMeter::default(),
        })
    }

    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    pub fn safe_writes(&self) -> u64 {
        self.safe_writes
    }

    /// Populate an empty store. Storage age is 0 afterwards.
    pub fn bulk_load(&mut self, store: &mut Store) -> Result<()> {
        if !store.is_empty() {
            return Err(Error::Usage("bulk load needs an empty store".into()));
        }
        let sizes: Vec<u64> = (0..self.spec.n_objects)
            .map(|_| self.spec.size_dist.sample(&mut self.rng))
            .collect();
        let cs = store.volume().cluster_size();
        let required: u64 = sizes.iter().map(|s| s.div_ceil(cs) * cs).sum();
        let available = store.volume().free_clusters() * cs;
        if required > available {
            return Err(Error::Infeasible { required, available });
        }
        for size in sizes {
            let id = ObjectId(self.next_id);
            self.next_id += 1;
            match store.put_new(id, size) {
                Ok(_) => {}
                Err(Error::NoSpace { .. }) => return Err(Error::Infeasible { required, available }),
                Err(e) => return Err(e),
            }
        }
        store.clock_mut().bytes_turned_over = 0;
        store.checkpoint();
        Ok(())
    }

    fn report(&mut self, store: &Store) -> Result<FragReport> {
        let meter = store.write_meter();
        let interval = WriteMeter {
            bytes: meter.bytes - self.meter_mark.bytes,
            seconds: meter.seconds - self.meter_mark.seconds,
        };
        self.meter_mark = meter;
        let reads = (self.spec.read_fraction > 0.0).then(|| std::mem::take(&mut self.reads));
        build_report(store, interval, reads, self.spec.seed)
    }

    /// Replace uniformly chosen objects until the target age, emitting a
    /// report the first time the age reaches each measurement age.
    pub fn run_to_age(&mut self, store: &mut Store) -> Result<Vec<FragReport>> {
        self.run_to_age_with(store, |_, _| Ok(()))
    }

    /// As [`Workload::run_to_age`], calling `after_write` after every safe
    /// write (for invariant checking in tests).
    pub fn run_to_age_with(
        &mut self,
        store: &mut Store,
        mut after_write: impl FnMut(&Store, u64) -> Result<()>,
    ) -> Result<Vec<FragReport>> {
        let ids = store.ids();
        if ids.is_empty() {
            return Err(Error::Usage("run_to_age before bulk load".into()));
        }
        let mut pending = self.spec.measurement_ages.clone().into_iter().peekable();
        let mut reports = Vec::new();
        let mut age = store.clock().storage_age()?;
        loop {
            while pending.peek().is_some_and(|&m| age >= m) {
                pending.next();
                reports.push(self.report(store)?);
            }
            if age >= self.spec.target_age {
                break;
            }
            while self.rng.chance(self.spec.read_fraction) {
                let id = ids[self.rng.below(ids.len() as u64) as usize];
                let (record, cost) = store.get(id)?;
                self.reads.reads += 1;
                self.reads.bytes += record.size;
                self.reads.seconds += cost;
            }
            let id = ids[self.rng.below(ids.len() as u64) as usize];
            let size = self.spec.size_dist.sample(&mut self.rng);
            if let Err(e) = store.safe_write(id, size) {
                return Err(match e {
                    Error::NoSpace { .. } => Error::AgingAborted {
                        storage_age: age,
                        source: Box::new(e),
                    },
                    e => e,
                });
            }
            self.safe_writes += 1;
            after_write(store, self.safe_writes)?;
            age = store.clock().storage_age()?;
        }
        Ok(reports)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alloc::{AllocPolicy, PolicyKind};
    use crate::store::StoreConfig;
    use crate::volume::Volume;

    const MB: u64 = 1 << 20;

    fn store(clusters: u64, hint: bool) -> Store {
        let mut cfg = StoreConfig::new(AllocPolicy::new(PolicyKind::FirstFit));
        cfg.size_hint = hint;
        Store::new(Volume::with_default_bands(clusters, 4096).unwrap(), cfg).unwrap()
    }

    fn spec(n: u64, dist: SizeDist, target: f64) -> WorkloadSpec {
        WorkloadSpec {
            n_objects: n,
            size_dist: dist,
            target_age: target,
            read_fraction: 0.0,
            seed: 7,
            measurement_ages: vec![],
        }
    }

    #[test]
    fn age_examples() {
        let gb = 1u64 << 30;
        let clock = AgeClock {
            bytes_turned_over: 200 * gb,
            live_bytes: 100 * gb,
        };
        assert_eq!(clock.storage_age().unwrap(), 2.0);
        let clock = AgeClock {
            bytes_turned_over: 0,
            live_bytes: 5,
        };
        assert_eq!(clock.storage_age().unwrap(), 0.0);
        assert_eq!(AgeClock::default().storage_age(), Err(Error::UndefinedAge));
    }

    #[test]
    fn bulk_load_is_age_zero_and_contiguous() {
        let mut s = store(4096, false);
        let mut w = Workload::new(spec(10, SizeDist::constant(MB), 0.0)).unwrap();
        w.bulk_load(&mut s).unwrap();
        assert_eq!(s.clock().storage_age().unwrap(), 0.0);
        assert!(s.records().all(|r| r.fragments() == 1));
    }

    #[test]
    fn infeasible_spec_names_the_shortfall() {
        let mut s = store(256, false);
        let mut w = Workload::new(spec(10, SizeDist::constant(MB), 0.0)).unwrap();
        let err = w.bulk_load(&mut s).unwrap_err();
        assert_eq!(
            err,
            Error::Infeasible {
                required: 10 * MB,
                available: MB
            }
        );
    }

    #[test]
    fn uniform_sizes_are_reproducible() {
        let d = SizeDist::uniform(10 * MB, 5 * MB);
        let draw = || {
            let mut r = Rng::new(99);
            (0..20).map(|_| d.sample(&mut r)).collect::<Vec<_>>()
        };
        let a = draw();
        assert_eq!(a, draw());
        assert!(a.iter().all(|s| (5 * MB..=15 * MB).contains(s)));
    }

    #[test]
    fn target_age_two_is_two_writes_per_object() {
        let mut s = store(8192, false);
        let mut w = Workload::new(spec(10, SizeDist::constant(MB), 2.0)).unwrap();
        w.bulk_load(&mut s).unwrap();
        w.run_to_age(&mut s).unwrap();
        assert_eq!(w.safe_writes(), 20);
        assert_eq!(s.clock().storage_age().unwrap(), 2.0);
    }

    #[test]
    fn target_age_zero_reports_the_loaded_state() {
        let mut s = store(4096, true);
        let mut sp = spec(10, SizeDist::constant(MB), 0.0);
        sp.measurement_ages = vec![0.0];
        let mut w = Workload::new(sp).unwrap();
        w.bulk_load(&mut s).unwrap();
        let reports = w.run_to_age(&mut s).unwrap();
        assert_eq!(w.safe_writes(), 0);
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].storage_age, 0.0);
        assert_eq!(reports[0].frag_mean, 1.0);
    }

    #[test]
    fn constant_age_strictly_increases() {
        let mut s = store(4096, false);
        let mut w = Workload::new(spec(8, SizeDist::constant(300 * 1024), 3.0)).unwrap();
        w.bulk_load(&mut s).unwrap();
        let mut last = 0.0;
        let live = s.clock().live_bytes;
        w.run_to_age_with(&mut s, |st, _| {
            let age = st.clock().storage_age()?;
            assert!(age > last);
            assert_eq!(st.clock().live_bytes, live);
            last = age;
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn degenerate_uniform_matches_constant_sizes() {
        let mut r = Rng::new(1);
        let d = SizeDist::uniform(4096, 0);
        assert!((0..100).all(|_| d.sample(&mut r) == 4096));
    }

    #[test]
    fn validation() {
        assert!(SizeDist::uniform(10, 10).validate().is_err());
        assert!(SizeDist::constant(0).validate().is_err());
        let mut sp = spec(1, SizeDist::constant(1), 1.0);
        sp.read_fraction = 1.0;
        assert!(sp.validate().is_err());
        sp.read_fraction = 0.5;
        sp.measurement_ages = vec![2.0, 1.0];
        assert!(sp.validate().is_err());
    }
}
