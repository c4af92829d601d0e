//! Dataset schema, ingestion, shard storage and moment definitions.

mod csv_io;
mod dataset;
mod moments;
mod scaling;
pub mod shard_file;

pub use csv_io::{export_csv, ingest_csv, read_csv, write_csv, CsvConfig};
pub use dataset::{Block, Dataset, Schema, Shard, UnitRecord, DEFAULT_SHARD_ROWS};
pub use moments::{compute_target_moments, MomentFn, MomentSpec, TargetMoments};
pub use scaling::{fit_scaling, standardize, ColumnScale, ScalingRecord};
pub use shard_file::{read_dataset_dir, read_shard, write_dataset_dir, write_shard};

pub(crate) use moments::add_vecs;
