//! Compressed sparse-trie histogram sort.
//!
//! Keys are counted into a [`FractalHistogram`], a binary trie whose dense
//! upper levels use implicit addressing and tapered bit-packed counters. The
//! sorter splits each key into a bin (its top bits), an in-bin offset and
//! trailing bits, packs the remainder into compact entries, argsorts each bin
//! and streams the sorted keys back out.
//!
//! Modules:
//!
//! * [`histogram`]: the counting trie, order statistics and merge.
//! * [`bins`]: key decomposition, entry packing, per-bin argsort, reconstruction.
//! * [`engine`]: serial and parallel batch streaming on top of the two above.
//! * [`baselines`]: comparison oracle and an instrumented LSB radix sort.
//! * [`metrics`]: traffic/memory model, bandwidth efficiency, unit throughput.
//! * [`dataset`] and [`keyfile`]: reproducible inputs and the on-disk key format.

pub mod baselines;
pub mod bins;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod histogram;
pub mod keyfile;
pub mod metrics;
pub mod packed;

pub use baselines::{lsb_radix_argsort, lsb_radix_sort, oracle_sort, BaselineResult};
pub use bins::{
    bit_reverse, build_bins, decompose_key, reconstruct_all, recompose_key, sort_bin, BinSorter, BinTable, SortPlan,
};
pub use dataset::{DatasetSpec, Distribution};
pub use engine::{
    choose_batch_params, run_parallel, run_serial, BatchConfig, BatchMode, FractalSorter, KeySource, SliceSource,
    SortConfig, SortOutcome, SortStats,
};
pub use error::{HistogramError, KeyFileError, MetricsError, SortError};
pub use histogram::{counter_width, FractalHistogram, HistogramLayout, Slot};
pub use keyfile::{read_key_file, write_key_file, KeyFileHeader, KeyFileReader};
pub use metrics::{bandwidth_efficiency, unit_throughput, CacheModel, RunReport, TrafficMeter};
