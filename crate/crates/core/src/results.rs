//! Result records shared by the sweep runner, the analysis and the report
//! emitters. A [`ResultSet`] serializes directly as the versioned result
//! file.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backends::BackendId;
use crate::element::ElementType;
use crate::placement::Allocator;

pub const SCHEMA_VERSION: u32 = 1;

/// Identity of one grid point.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PointKey {
    pub kernel: String,
    pub backend: BackendId,
    pub threads: usize,
    pub size: u64,
    pub allocator: Allocator,
    pub element_type: ElementType,
}

impl fmt::Display for PointKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/t{}/n{}/{}/{}",
            self.kernel, self.backend, self.threads, self.size, self.allocator, self.element_type
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    /// The backend lacks the kernel's primitive and fallback was not allowed.
    Unsupported,
    /// The estimated footprint exceeded the memory budget.
    MemoryBudget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    #[serde(flatten)]
    pub key: PointKey,
    pub reps: usize,
    pub durations_ns: Vec<u64>,
    pub median_ns: Option<f64>,
    /// Bytes per second at the median duration.
    pub throughput: Option<f64>,
    pub valid: bool,
    /// Ran on the sequential path instead of the requested backend.
    pub fallback: bool,
    pub skipped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip_reason: Option<SkipReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl PointRecord {
    pub fn skipped(
        key: PointKey,
        reps: usize,
        reason: SkipReason,
        note: impl Into<String>,
    ) -> Self {
        Self {
            key,
            reps,
            durations_ns: Vec::new(),
            median_ns: None,
            throughput: None,
            valid: false,
            fallback: false,
            skipped: true,
            skip_reason: Some(reason),
            note: Some(note.into()),
        }
    }

    /// The median, if the point ran and verified.
    pub fn usable_median(&self) -> Option<f64> {
        if self.valid && !self.skipped {
            self.median_ns
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub machine: String,
    pub logical_cores: usize,
    pub os: String,
    pub artifact_version: String,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub max_threads: usize,
    /// Where `max_threads` came from: `flag`, `env:<VAR>` or `detected`.
    pub max_threads_source: String,
    pub pinned: bool,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl RunMetadata {
    /// Metadata describing the current machine.
    pub fn capture(seed: u64, max_threads: usize, max_threads_source: impl Into<String>) -> Self {
        Self {
            machine: hostname(),
            logical_cores: crate::backends::logical_cores(),
            os: format!("{}-{}", std::env::consts::OS, std::env::consts::ARCH),
            artifact_version: env!("CARGO_PKG_VERSION").to_owned(),
            seed,
            timestamp: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            max_threads,
            max_threads_source: max_threads_source.into(),
            pinned: false,
            warnings: Vec::new(),
        }
    }
}

fn hostname() -> String {
    std::fs::read_to_string("/proc/sys/kernel/hostname")
        .or_else(|_| std::fs::read_to_string("/etc/hostname"))
        .map(|s| s.trim().to_owned())
        .ok()
        .filter(|s| !s.is_empty())
        .or_else(|| std::env::var("HOSTNAME").ok())
        .unwrap_or_else(|| "unknown".to_owned())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultSet {
    pub schema_version: u32,
    pub metadata: RunMetadata,
    pub records: Vec<PointRecord>,
}

impl ResultSet {
    pub fn new(metadata: RunMetadata) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            metadata,
            records: Vec::new(),
        }
    }

    pub fn find(&self, key: &PointKey) -> Option<&PointRecord> {
        self.records.iter().find(|r| &r.key == key)
    }

    /// Keys that occur more than once.
    pub fn duplicate_keys(&self) -> Vec<&PointKey> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .map(|r| &r.key)
            .filter(|k| !seen.insert(*k))
            .collect()
    }

    pub fn verification_failures(&self) -> Vec<&PointRecord> {
        self.records
            .iter()
            .filter(|r| !r.skipped && !r.valid)
            .collect()
    }

    /// Records restricted to one allocator tag.
    pub fn with_allocator(&self, allocator: Allocator) -> ResultSet {
        ResultSet {
            schema_version: self.schema_version,
            metadata: self.metadata.clone(),
            records: self
                .records
                .iter()
                .filter(|r| r.key.allocator == allocator)
                .cloned()
                .collect(),
        }
    }

    pub fn allocators(&self) -> Vec<Allocator> {
        let mut tags: Vec<_> = self.records.iter().map(|r| r.key.allocator).collect();
        tags.sort();
        tags.dedup();
        tags
    }

    pub fn kernels(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.records.iter().map(|r| r.key.kernel.as_str()).collect();
        ids.sort();
        ids.dedup();
        ids
    }
}
