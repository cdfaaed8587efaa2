//! Micro-benchmarks for the scalability of parallel algorithms.
//!
//! Five kernels (`find`, `for_each`, `inclusive_scan`, `reduce`, `sort`) run
//! over interchangeable backends, thread counts and problem sizes. The
//! harness times them, the sweep module walks the experiment grid, and the
//! analysis module turns a result set into speedup, efficiency,
//! allocator-impact and crossover-size tables.

pub mod analysis;
pub mod backends;
pub mod datagen;
pub mod element;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod placement;
pub mod report;
pub mod results;
pub mod sweep;

pub use backends::{BackendDescriptor, BackendId, Chunking, ExecutionPolicy, Executor, Primitive};
pub use datagen::{DataSpec, Pattern};
pub use element::{Element, ElementType};
pub use error::{Error, Result};
pub use harness::{Measurement, RunConfig, Stats};
pub use kernels::{Kernel, KernelInstance, KernelRegistry, Outcome, Verification};
pub use placement::{Allocator, PlacementConfig};
pub use results::{PointKey, PointRecord, ResultSet, RunMetadata, SkipReason};
pub use sweep::{SweepConfig, SweepPlan};
