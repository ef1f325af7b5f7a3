//! Synthetic open-set tasks and the labeled / unlabeled pool.
//!
//! A task fixes the feature matrix, the known/unknown class split, and the
//! test set. A [`PoolState`] tracks which training samples are labeled,
//! still queryable, or were wasted on unknown-class queries; the only way
//! labels enter the pool is through its oracle.

mod csv_io;
mod pool;
mod task;

pub use csv_io::{export_splits, import_samples};
pub use pool::{
    balanced_batches, balanced_ekus_batches, init_pool, EkusBatch, OracleOutcome, PoolState,
};
pub use task::{
    make_task, make_task_from_samples, ClassId, GaussianMixtureSpec, GeneratorSpec, OpenSetTask,
    RingClustersSpec, Sample, SampleId,
};
