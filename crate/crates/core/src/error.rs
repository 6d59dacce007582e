//! Error type shared by every layer of the simulator.

use crate::volume::ObjectId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Malformed volume, store, workload or harness configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Misuse of the object API (duplicate id, zero-sized object, ...).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("object {0} not found")]
    NotFound(ObjectId),

    /// The active policy cannot satisfy a request of `requested` clusters.
    #[error("no space: requested {requested} clusters, {free} free")]
    NoSpace { requested: u64, free: u64 },

    /// Simulator bookkeeping is inconsistent. Runs hitting this must stop.
    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    /// The marker scan found a cluster that does not fit any object layout.
    #[error("marker corruption at cluster {cluster}: {detail}")]
    Corruption { cluster: u64, detail: String },

    #[error("storage age is undefined when no bytes are live")]
    UndefinedAge,

    /// The workload cannot fit on the volume at all.
    #[error("infeasible workload: requires {required} bytes, {available} bytes available")]
    Infeasible { required: u64, available: u64 },

    /// Space ran out while aging an already-loaded store.
    #[error("aging aborted at storage age {storage_age:.4}: {source}")]
    AgingAborted {
        storage_age: f64,
        #[source]
        source: Box<Error>,
    },

    /// A simulated crash injected into a safe write.
    #[error("safe write aborted after step {step}")]
    Aborted { step: usize },

    #[error("i/o error on {path}: {detail}")]
    Io { path: String, detail: String },
}

impl Error {
    pub(crate) fn invariant(msg: impl Into<String>) -> Self {
        Error::InvariantViolation(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Innermost error, looking through [`Error::AgingAborted`].
    pub fn root(&self) -> &Error {
        match self {
            Error::AgingAborted { source, .. } => source.root(),
            other => other,
        }
    }
}
