//! Execution policies and the parallel primitives every kernel is built on.
//!
//! Three backends are available:
//!
//! * `seq`: plain sequential loops on the calling thread.
//! * `pool`: a fixed pool of persistent workers with static (or guided)
//!   contiguous chunking, implemented in this crate.
//! * `native`: rayon's work-stealing pool (behind the `native` feature). It
//!   has no parallel prefix scan, so it reports scan as unsupported.

mod merge;
pub mod partition;
pub mod pool;

use std::fmt;
use std::ops::Range;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{Error, Result};
use partition::{static_partition, GuidedChunks, SharedSlice};
use pool::{panic_message, WorkerPool};

/// Elements scanned between checks of the shared "found" flag in `par_find`.
pub const FIND_GRANULE: usize = 4096;

/// Default sequential leaf size of the pool backend's merge sort.
pub const DEFAULT_SORT_CUTOFF: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendId {
    Seq,
    Pool,
    Native,
}

impl BackendId {
    pub const fn name(self) -> &'static str {
        match self {
            Self::Seq => "seq",
            Self::Pool => "pool",
            Self::Native => "native",
        }
    }
}

impl fmt::Display for BackendId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackendId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq" => Ok(Self::Seq),
            "pool" => Ok(Self::Pool),
            "native" => Ok(Self::Native),
            _ => Err(Error::InvalidArgument(format!("unknown backend `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Map,
    Reduce,
    Scan,
    Sort,
    Find,
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Map => "map",
            Self::Reduce => "reduce",
            Self::Scan => "inclusive scan",
            Self::Sort => "sort",
            Self::Find => "find",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Chunking {
    #[default]
    Static,
    Guided,
}

impl FromStr for Chunking {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Self::Static),
            "guided" => Ok(Self::Guided),
            _ => Err(Error::InvalidArgument(format!("unknown chunking `{s}`"))),
        }
    }
}

/// A backend plus a thread budget and the knobs that shape its work split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionPolicy {
    pub backend: BackendId,
    threads: usize,
    pub chunking: Chunking,
    /// No worker is handed fewer elements than this unless the input is
    /// smaller than `min_chunk * threads`.
    pub min_chunk: usize,
    /// Inputs shorter than this run on the sequential path and are flagged
    /// as fallbacks. Zero disables the fallback.
    pub seq_threshold: usize,
    /// Leaf size of the pool backend's merge sort.
    pub sort_cutoff: usize,
    /// Permit more threads than the machine has logical cores.
    pub oversubscribe: bool,
}

impl ExecutionPolicy {
    pub fn new(backend: BackendId, threads: usize) -> Self {
        Self {
            backend,
            threads: if backend == BackendId::Seq {
                1
            } else {
                threads.max(1)
            },
            chunking: Chunking::Static,
            min_chunk: 1,
            seq_threshold: 0,
            sort_cutoff: DEFAULT_SORT_CUTOFF,
            oversubscribe: false,
        }
    }

    pub fn seq() -> Self {
        Self::new(BackendId::Seq, 1)
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn with_chunking(mut self, chunking: Chunking, min_chunk: usize) -> Self {
        self.chunking = chunking;
        self.min_chunk = min_chunk.max(1);
        self
    }

    pub fn with_seq_threshold(mut self, threshold: usize) -> Self {
        self.seq_threshold = threshold;
        self
    }

    pub fn with_sort_cutoff(mut self, cutoff: usize) -> Self {
        self.sort_cutoff = cutoff.max(1);
        self
    }

    pub fn oversubscribed(mut self, allow: bool) -> Self {
        self.oversubscribe = allow;
        self
    }

    /// True when a call over `n` elements is routed to the sequential path.
    pub fn falls_back(&self, n: usize) -> bool {
        self.backend != BackendId::Seq && n < self.seq_threshold
    }
}

/// Static facts about a backend.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BackendDescriptor {
    pub id: BackendId,
    pub name: &'static str,
    pub supports_map: bool,
    pub supports_reduce: bool,
    pub supports_scan: bool,
    pub supports_sort: bool,
    pub supports_find: bool,
    /// Whether buffers may be placed with the first-touch allocator.
    pub first_touch_compatible: bool,
    /// Whether `par_sort` allocates an n-element merge buffer.
    pub sort_needs_scratch: bool,
}

impl BackendDescriptor {
    pub fn supports(&self, primitive: Primitive) -> bool {
        match primitive {
            Primitive::Map => self.supports_map,
            Primitive::Reduce => self.supports_reduce,
            Primitive::Scan => self.supports_scan,
            Primitive::Sort => self.supports_sort,
            Primitive::Find => self.supports_find,
        }
    }
}

pub fn list_backends() -> Vec<BackendDescriptor> {
    let mut all = vec![
        BackendDescriptor {
            id: BackendId::Seq,
            name: "sequential",
            supports_map: true,
            supports_reduce: true,
            supports_scan: true,
            supports_sort: true,
            supports_find: true,
            first_touch_compatible: true,
            sort_needs_scratch: false,
        },
        BackendDescriptor {
            id: BackendId::Pool,
            name: "static thread pool",
            supports_map: true,
            supports_reduce: true,
            supports_scan: true,
            supports_sort: true,
            supports_find: true,
            first_touch_compatible: true,
            sort_needs_scratch: true,
        },
    ];
    #[cfg(feature = "native")]
    all.push(BackendDescriptor {
        id: BackendId::Native,
        name: "rayon work-stealing",
        supports_map: true,
        supports_reduce: true,
        supports_scan: false,
        supports_sort: true,
        supports_find: true,
        first_touch_compatible: true,
        sort_needs_scratch: false,
    });
    all
}

pub fn descriptor(id: BackendId) -> Option<BackendDescriptor> {
    list_backends().into_iter().find(|d| d.id == id)
}

pub fn logical_cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Distinct `(physical id, core id)` pairs in `/proc/cpuinfo`, capped by the
/// logical cores available to this process. Falls back to the logical count
/// when the file is missing or lacks topology fields.
pub fn physical_cores() -> usize {
    let logical = logical_cores();
    std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|text| count_physical_cores(&text))
        .map_or(logical, |cores| cores.min(logical))
}

fn count_physical_cores(cpuinfo: &str) -> Option<usize> {
    let mut cores = std::collections::BTreeSet::new();
    for block in cpuinfo.split("\n\n").filter(|b| !b.trim().is_empty()) {
        let field = |name: &str| {
            block.lines().find_map(|line| {
                let (key, value) = line.split_once(':')?;
                (key.trim() == name).then(|| value.trim().to_owned())
            })
        };
        cores.insert((field("physical id")?, field("core id")?));
    }
    (!cores.is_empty()).then_some(cores.len())
}

enum Runtime {
    Seq,
    Pool(WorkerPool),
    #[cfg(feature = "native")]
    Native(rayon::ThreadPool),
}

/// A policy bound to a live runtime. Building one spawns the workers, so it
/// happens before any timing starts; the same executor is reused for every
/// repetition of a benchmark point.
pub struct Executor {
    policy: ExecutionPolicy,
    descriptor: BackendDescriptor,
    runtime: Runtime,
}

impl fmt::Debug for Executor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Executor")
            .field("policy", &self.policy)
            .finish()
    }
}

impl Executor {
    pub fn new(policy: ExecutionPolicy) -> Result<Self> {
        let descriptor = descriptor(policy.backend).ok_or_else(|| {
            Error::InvalidArgument(format!("backend `{}` is not compiled in", policy.backend))
        })?;
        let cores = logical_cores();
        if policy.threads > cores && !policy.oversubscribe {
            return Err(Error::InvalidArgument(format!(
                "{} threads requested but only {cores} logical cores are available",
                policy.threads
            )));
        }
        let runtime = match policy.backend {
            BackendId::Seq => Runtime::Seq,
            BackendId::Pool => Runtime::Pool(WorkerPool::new(policy.threads)?),
            #[cfg(feature = "native")]
            BackendId::Native => Runtime::Native(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(policy.threads)
                    .thread_name(|k| format!("scalebench-native-{k}"))
                    .build()
                    .map_err(|e| Error::Resource(e.to_string()))?,
            ),
            #[cfg(not(feature = "native"))]
            BackendId::Native => unreachable!("descriptor lookup rejects native"),
        };
        Ok(Self {
            policy,
            descriptor,
            runtime,
        })
    }

    /// Convenience for the sequential executor, which cannot fail to build.
    pub fn sequential() -> Self {
        Self::new(ExecutionPolicy::seq()).expect("sequential executor")
    }

    pub fn policy(&self) -> &ExecutionPolicy {
        &self.policy
    }

    pub fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    pub fn threads(&self) -> usize {
        self.policy.threads
    }

    /// Peak number of pool workers simultaneously running kernel work.
    /// Only tracked for the pool backend.
    pub fn high_water_mark(&self) -> Option<usize> {
        match &self.runtime {
            Runtime::Pool(pool) => Some(pool.high_water_mark()),
            _ => None,
        }
    }

    fn require(&self, primitive: Primitive) -> Result<()> {
        if self.descriptor.supports(primitive) {
            Ok(())
        } else {
            Err(Error::Unsupported {
                backend: self.policy.backend,
                primitive,
            })
        }
    }

    fn sequential_path(&self, n: usize) -> bool {
        matches!(self.runtime, Runtime::Seq) || self.policy.falls_back(n)
    }

    /// Runs `f(worker_index)` once on each worker. The sequential backend
    /// runs it on the calling thread as worker 0.
    pub fn on_each_worker<F>(&self, f: F) -> Result<()>
    where
        F: Fn(usize) + Sync,
    {
        match &self.runtime {
            Runtime::Seq => guarded(|| f(0)),
            Runtime::Pool(pool) => pool.broadcast(f),
            #[cfg(feature = "native")]
            Runtime::Native(pool) => guarded(|| {
                pool.broadcast(|ctx| f(ctx.index()));
            }),
        }
    }

    /// Splits `0..n` with [`static_partition`] and runs `f(worker, range)`
    /// with worker k owning the k-th contiguous range.
    pub fn for_each_static_chunk<F>(&self, n: usize, f: F) -> Result<()>
    where
        F: Fn(usize, Range<usize>) + Sync,
    {
        if matches!(self.runtime, Runtime::Seq) {
            return if n == 0 {
                Ok(())
            } else {
                guarded(|| f(0, 0..n))
            };
        }
        let parts = static_partition(n, self.threads(), self.policy.min_chunk);
        self.on_each_worker(|k| {
            if let Some(range) = parts.get(k) {
                f(k, range.clone());
            }
        })
    }

    /// `data[i] = f(data[i])` for every element, in any order.
    pub fn par_map<T, F>(&self, data: &mut [T], f: F) -> Result<()>
    where
        T: Copy + Send + Sync,
        F: Fn(T) -> T + Sync,
    {
        self.require(Primitive::Map)?;
        let n = data.len();
        if self.sequential_path(n) {
            return guarded(|| data.iter_mut().for_each(|x| *x = f(*x)));
        }
        match &self.runtime {
            Runtime::Pool(pool) => {
                let shared = SharedSlice::new(data);
                self.pool_ranges(pool, n, |range| {
                    let chunk = unsafe { shared.range_mut(range) };
                    chunk.iter_mut().for_each(|x| *x = f(*x));
                })
            }
            #[cfg(feature = "native")]
            Runtime::Native(pool) => {
                use rayon::prelude::*;
                let min_len = self.policy.min_chunk;
                guarded(|| {
                    pool.install(|| {
                        data.par_iter_mut()
                            .with_min_len(min_len)
                            .for_each(|x| *x = f(*x))
                    })
                })
            }
            Runtime::Seq => unreachable!(),
        }
    }

    /// Folds `data` with an associative, commutative `op`; `identity` for
    /// empty input.
    pub fn par_reduce<T, Op>(&self, data: &[T], identity: T, op: Op) -> Result<T>
    where
        T: Copy + Send + Sync,
        Op: Fn(T, T) -> T + Sync,
    {
        self.require(Primitive::Reduce)?;
        let n = data.len();
        if self.sequential_path(n) {
            return guarded(|| data.iter().fold(identity, |acc, &x| op(acc, x)));
        }
        match &self.runtime {
            Runtime::Pool(pool) => {
                let partials: Mutex<Vec<(usize, T)>> = Mutex::new(Vec::new());
                match self.policy.chunking {
                    Chunking::Static => {
                        let parts = static_partition(n, pool.threads(), self.policy.min_chunk);
                        pool.broadcast(|k| {
                            if let Some(range) = parts.get(k) {
                                let acc = data[range.clone()]
                                    .iter()
                                    .fold(identity, |acc, &x| op(acc, x));
                                lock(&partials).push((k, acc));
                            }
                        })?;
                    }
                    Chunking::Guided => {
                        let chunks = GuidedChunks::new(n, pool.threads(), self.policy.min_chunk);
                        pool.broadcast(|k| {
                            let mut acc = identity;
                            while let Some(range) = chunks.grab() {
                                acc = data[range].iter().fold(acc, |acc, &x| op(acc, x));
                            }
                            lock(&partials).push((k, acc));
                        })?;
                    }
                }
                let mut partials = partials.into_inner().unwrap_or_else(|e| e.into_inner());
                partials.sort_by_key(|p| p.0);
                Ok(partials
                    .into_iter()
                    .fold(identity, |acc, (_, x)| op(acc, x)))
            }
            #[cfg(feature = "native")]
            Runtime::Native(pool) => {
                use rayon::prelude::*;
                let min_len = self.policy.min_chunk;
                guarded(|| {
                    pool.install(|| {
                        data.par_iter()
                            .with_min_len(min_len)
                            .copied()
                            .reduce(|| identity, &op)
                    })
                })
            }
            Runtime::Seq => unreachable!(),
        }
    }

    /// `output[i] = input[0] + … + input[i]` using [`Element::combine`].
    ///
    /// The pool backend uses the three-phase block scan: each worker scans
    /// its block, the block totals are scanned sequentially, then every block
    /// but the first adds its carried-in offset.
    pub fn par_inclusive_scan<T: Element>(&self, input: &[T], output: &mut [T]) -> Result<()> {
        self.require(Primitive::Scan)?;
        if input.len() != output.len() {
            return Err(Error::InvalidArgument(format!(
                "scan output has length {} but input has length {}",
                output.len(),
                input.len()
            )));
        }
        let n = input.len();
        if self.sequential_path(n) {
            return guarded(|| sequential_scan(input, output));
        }
        let Runtime::Pool(pool) = &self.runtime else {
            unreachable!("only the pool backend reports scan support");
        };
        let parts = static_partition(n, pool.threads(), self.policy.min_chunk);
        let totals: Mutex<Vec<T>> = Mutex::new(vec![T::zero(); parts.len()]);
        let out = SharedSlice::new(output);
        pool.broadcast(|k| {
            if let Some(range) = parts.get(k) {
                let dst = unsafe { out.range_mut(range.clone()) };
                sequential_scan(&input[range.clone()], dst);
                lock(&totals)[k] = dst[dst.len() - 1];
            }
        })?;
        let totals = totals.into_inner().unwrap_or_else(|e| e.into_inner());
        let mut offsets = Vec::with_capacity(parts.len());
        let mut carry = T::zero();
        for total in totals {
            offsets.push(carry);
            carry = carry.combine(total);
        }
        pool.broadcast(|k| {
            if k == 0 {
                return;
            }
            if let Some(range) = parts.get(k) {
                let dst = unsafe { out.range_mut(range.clone()) };
                let offset = offsets[k];
                dst.iter_mut().for_each(|x| *x = offset.combine(*x));
            }
        })
    }

    /// Sorts ascending in place.
    pub fn par_sort<T: Element>(&self, data: &mut [T]) -> Result<()> {
        self.require(Primitive::Sort)?;
        if self.sequential_path(data.len()) {
            return guarded(|| data.sort_unstable_by(T::total_cmp));
        }
        match &self.runtime {
            Runtime::Pool(pool) => merge::pool_merge_sort(pool, data, self.policy.sort_cutoff),
            #[cfg(feature = "native")]
            Runtime::Native(pool) => {
                use rayon::prelude::*;
                guarded(|| pool.install(|| data.par_sort_unstable_by(T::total_cmp)))
            }
            Runtime::Seq => unreachable!(),
        }
    }

    /// Some index holding `target`, if any. Parallel searches stop early:
    /// workers poll a shared flag every [`FIND_GRANULE`] elements and the
    /// first worker to hit publishes its index.
    pub fn par_find<T>(&self, data: &[T], target: T) -> Result<Option<usize>>
    where
        T: Copy + PartialEq + Send + Sync,
    {
        self.require(Primitive::Find)?;
        let n = data.len();
        if self.sequential_path(n) {
            return guarded(|| data.iter().position(|&x| x == target));
        }
        match &self.runtime {
            Runtime::Pool(pool) => {
                const NOT_FOUND: usize = usize::MAX;
                let found = AtomicUsize::new(NOT_FOUND);
                let parts = static_partition(n, pool.threads(), self.policy.min_chunk);
                pool.broadcast(|k| {
                    let Some(range) = parts.get(k) else { return };
                    let mut start = range.start;
                    while start < range.end {
                        if found.load(Ordering::Relaxed) != NOT_FOUND {
                            return;
                        }
                        let end = (start + FIND_GRANULE).min(range.end);
                        if let Some(pos) = data[start..end].iter().position(|&x| x == target) {
                            let _ = found.compare_exchange(
                                NOT_FOUND,
                                start + pos,
                                Ordering::AcqRel,
                                Ordering::Relaxed,
                            );
                            return;
                        }
                        start = end;
                    }
                })?;
                let idx = found.into_inner();
                Ok((idx != NOT_FOUND).then_some(idx))
            }
            #[cfg(feature = "native")]
            Runtime::Native(pool) => {
                use rayon::prelude::*;
                let min_len = self.policy.min_chunk;
                guarded(|| {
                    pool.install(|| {
                        data.par_iter()
                            .with_min_len(min_len)
                            .position_any(|&x| x == target)
                    })
                })
            }
            Runtime::Seq => unreachable!(),
        }
    }

    fn pool_ranges<F>(&self, pool: &WorkerPool, n: usize, f: F) -> Result<()>
    where
        F: Fn(Range<usize>) + Sync,
    {
        match self.policy.chunking {
            Chunking::Static => {
                let parts = static_partition(n, pool.threads(), self.policy.min_chunk);
                pool.broadcast(|k| {
                    if let Some(range) = parts.get(k) {
                        f(range.clone());
                    }
                })
            }
            Chunking::Guided => {
                let chunks = GuidedChunks::new(n, pool.threads(), self.policy.min_chunk);
                pool.broadcast(|_| {
                    while let Some(range) = chunks.grab() {
                        f(range);
                    }
                })
            }
        }
    }
}

fn sequential_scan<T: Element>(input: &[T], output: &mut [T]) {
    let mut acc = T::zero();
    for (dst, &x) in output.iter_mut().zip(input) {
        acc = acc.combine(x);
        *dst = acc;
    }
}

fn guarded<R>(f: impl FnOnce() -> R) -> Result<R> {
    catch_unwind(AssertUnwindSafe(f)).map_err(|p| Error::Execution(panic_message(&*p)))
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}
