//! The experiment grid: {kernel × backend × threads × size × allocator}.

use serde::{Deserialize, Serialize};

use crate::backends::{
    self, BackendDescriptor, BackendId, Chunking, ExecutionPolicy, Executor, Primitive,
    DEFAULT_SORT_CUTOFF,
};
use crate::datagen::MAX_ELEMENTS;
use crate::error::{Error, Result};
use crate::harness::{self, RunConfig, DEFAULT_REPS, DEFAULT_WARMUPS};
use crate::kernels::{Kernel, KernelRegistry, Verification, BUILTIN_KERNELS};
use crate::placement::{self, Allocator};
use crate::results::{PointKey, PointRecord, ResultSet, RunMetadata, SkipReason};

pub const DEFAULT_MIN_EXP: u32 = 3;
pub const DEFAULT_MAX_EXP: u32 = 30;
const MAX_EXP_LIMIT: u32 = MAX_ELEMENTS.trailing_zeros();

/// Backend tuning applied to every point of a sweep.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tuning {
    pub chunking: Chunking,
    pub min_chunk: usize,
    pub seq_threshold: usize,
    pub sort_cutoff: usize,
}

impl Default for Tuning {
    fn default() -> Self {
        Self {
            chunking: Chunking::Static,
            min_chunk: 1,
            seq_threshold: 0,
            sort_cutoff: DEFAULT_SORT_CUTOFF,
        }
    }
}

impl Tuning {
    pub fn policy(
        &self,
        backend: BackendId,
        threads: usize,
        oversubscribe: bool,
    ) -> ExecutionPolicy {
        ExecutionPolicy::new(backend, threads)
            .with_chunking(self.chunking, self.min_chunk)
            .with_seq_threshold(self.seq_threshold)
            .with_sort_cutoff(self.sort_cutoff)
            .oversubscribed(oversubscribe)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub kernels: Vec<String>,
    pub backends: Vec<BackendId>,
    pub max_threads: usize,
    pub max_threads_source: String,
    pub min_exp: u32,
    pub max_exp: u32,
    pub allocators: Vec<Allocator>,
    pub seed: u64,
    pub reps: usize,
    pub warmups: usize,
    /// Points whose estimated footprint exceeds this many bytes are skipped.
    pub memory_budget: u64,
    pub tuning: Tuning,
    /// Allow thread counts above the logical core count.
    pub oversubscribe: bool,
    /// Run points whose backend lacks the kernel's primitive on the
    /// sequential path (flagged as fallback) instead of skipping them.
    pub fallback_unsupported: bool,
    pub pin: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            kernels: BUILTIN_KERNELS.iter().map(|s| (*s).to_owned()).collect(),
            backends: backends::list_backends()
                .into_iter()
                .map(|d| d.id)
                .collect(),
            max_threads: backends::logical_cores(),
            max_threads_source: "detected".to_owned(),
            min_exp: DEFAULT_MIN_EXP,
            max_exp: DEFAULT_MAX_EXP,
            allocators: vec![Allocator::FirstTouch],
            seed: 42,
            reps: DEFAULT_REPS,
            warmups: DEFAULT_WARMUPS,
            memory_budget: default_memory_budget(),
            tuning: Tuning::default(),
            oversubscribe: false,
            fallback_unsupported: false,
            pin: false,
        }
    }
}

/// Physical memory in bytes, if the platform reports it.
pub fn physical_memory() -> Option<u64> {
    #[cfg(unix)]
    {
        // SAFETY: sysconf has no preconditions.
        let (pages, page_size) = unsafe {
            (
                libc::sysconf(libc::_SC_PHYS_PAGES),
                libc::sysconf(libc::_SC_PAGESIZE),
            )
        };
        if pages > 0 && page_size > 0 {
            return Some(pages as u64 * page_size as u64);
        }
    }
    None
}

/// 75% of physical memory; 4 GiB when unknown.
pub fn default_memory_budget() -> u64 {
    physical_memory().map_or(4 << 30, |bytes| bytes / 4 * 3)
}

/// `{1, 2, 4, …, 2^⌊log₂ P⌋} ∪ {P}`.
pub fn thread_grid(max_threads: usize) -> Vec<usize> {
    let mut grid: Vec<usize> = std::iter::successors(Some(1usize), |&t| t.checked_mul(2))
        .take_while(|&t| t <= max_threads)
        .collect();
    if grid.last() != Some(&max_threads) && max_threads > 0 {
        grid.push(max_threads);
    }
    grid
}

/// A validated sweep: the config plus its derived thread grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub config: SweepConfig,
    pub thread_grid: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanPoint {
    pub kernel: String,
    pub backend: BackendId,
    pub threads: usize,
    pub size_exp: u32,
    pub allocator: Allocator,
}

impl PlanPoint {
    pub fn size(&self) -> usize {
        1usize << self.size_exp
    }
}

pub fn build_plan(config: &SweepConfig) -> Result<SweepPlan> {
    let mut problems = Vec::new();
    if config.kernels.is_empty() {
        problems.push("no kernels selected".to_owned());
    }
    if has_duplicates(&config.kernels) {
        problems.push("kernel list contains duplicates".to_owned());
    }
    if config.backends.is_empty() {
        problems.push("no backends selected".to_owned());
    }
    if has_duplicates(&config.backends) {
        problems.push("backend list contains duplicates".to_owned());
    }
    if config.allocators.is_empty() {
        problems.push("no allocators selected".to_owned());
    }
    if has_duplicates(&config.allocators) {
        problems.push("allocator list contains duplicates".to_owned());
    }
    if config.max_threads == 0 {
        problems.push("max threads must be at least 1".to_owned());
    }
    if config.min_exp > config.max_exp {
        problems.push(format!(
            "min exponent {} exceeds max exponent {}",
            config.min_exp, config.max_exp
        ));
    }
    if config.max_exp > MAX_EXP_LIMIT {
        problems.push(format!(
            "max exponent {} exceeds the supported limit {MAX_EXP_LIMIT}",
            config.max_exp
        ));
    }
    if config.reps == 0 {
        problems.push("reps must be at least 1".to_owned());
    }
    if !problems.is_empty() {
        return Err(Error::PlanValidation(problems));
    }
    Ok(SweepPlan {
        thread_grid: thread_grid(config.max_threads),
        config: config.clone(),
    })
}

fn has_duplicates<T: PartialEq>(items: &[T]) -> bool {
    items
        .iter()
        .enumerate()
        .any(|(i, a)| items[..i].contains(a))
}

impl SweepPlan {
    pub fn sizes(&self) -> Vec<usize> {
        (self.config.min_exp..=self.config.max_exp)
            .map(|k| 1usize << k)
            .collect()
    }

    /// Thread counts used for `backend`: the sequential backend only ever
    /// runs with one thread.
    pub fn threads_for(&self, backend: BackendId) -> &[usize] {
        if backend == BackendId::Seq {
            &self.thread_grid[..1]
        } else {
            &self.thread_grid
        }
    }

    /// Every point in execution order: kernel, backend, size ascending,
    /// threads ascending, then allocator.
    pub fn points(&self) -> Vec<PlanPoint> {
        let c = &self.config;
        let mut points = Vec::new();
        for kernel in &c.kernels {
            for &backend in &c.backends {
                for size_exp in c.min_exp..=c.max_exp {
                    for &threads in self.threads_for(backend) {
                        for &allocator in &c.allocators {
                            points.push(PlanPoint {
                                kernel: kernel.clone(),
                                backend,
                                threads,
                                size_exp,
                                allocator,
                            });
                        }
                    }
                }
            }
        }
        points
    }

    pub fn cardinality(&self) -> usize {
        let c = &self.config;
        let per_kernel: usize = c.backends.iter().map(|&b| self.threads_for(b).len()).sum();
        c.kernels.len() * per_kernel * (c.max_exp - c.min_exp + 1) as usize * c.allocators.len()
    }

    /// Checks that every kernel and backend the plan names is available.
    pub fn validate_against(&self, registry: &KernelRegistry) -> Result<()> {
        let mut problems = Vec::new();
        for kernel in &self.config.kernels {
            if registry.get(kernel).is_none() {
                problems.push(format!(
                    "unknown kernel `{kernel}` (registered: {})",
                    registry.ids().join(", ")
                ));
            }
        }
        for &backend in &self.config.backends {
            if backends::descriptor(backend).is_none() {
                problems.push(format!("backend `{backend}` is not compiled in"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::PlanValidation(problems))
        }
    }
}

/// Bytes a point needs: the input, auxiliary arrays, and a merge buffer when
/// the backend's sort uses one.
pub fn estimate_memory(kernel: &dyn Kernel, backend: &BackendDescriptor, n: usize) -> u64 {
    let array = n as u64 * kernel.default_element().size() as u64;
    let mut arrays = 1 + kernel.auxiliary_arrays() as u64;
    if kernel.primitive() == Primitive::Sort && backend.sort_needs_scratch {
        arrays += 1;
    }
    array * arrays
}

/// Runs every point of the plan in order. Per-point failures are recorded
/// and never abort the sweep; only plan validation is fatal.
pub fn execute_plan(plan: &SweepPlan, registry: &KernelRegistry) -> Result<ResultSet> {
    execute_plan_with(plan, registry, |_| {})
}

pub fn execute_plan_with(
    plan: &SweepPlan,
    registry: &KernelRegistry,
    mut on_record: impl FnMut(&PointRecord),
) -> Result<ResultSet> {
    plan.validate_against(registry)?;
    let mut results = ResultSet::new(new_metadata(plan));
    results.metadata.pinned = plan.config.pin;
    for point in plan.points() {
        let outcome = execute_point(plan, &point, registry)?;
        if !outcome.warnings.is_empty() {
            results.metadata.pinned = false;
            results.metadata.warnings.extend(outcome.warnings);
        }
        on_record(&outcome.record);
        results.records.push(outcome.record);
    }
    Ok(results)
}

pub fn new_metadata(plan: &SweepPlan) -> RunMetadata {
    RunMetadata::capture(
        plan.config.seed,
        plan.config.max_threads,
        plan.config.max_threads_source.clone(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointOutcome {
    pub record: PointRecord,
    pub warnings: Vec<String>,
}

/// Runs one point. Errors only if the point names an unknown kernel or
/// backend; everything else becomes a flagged record.
pub fn execute_point(
    plan: &SweepPlan,
    point: &PlanPoint,
    registry: &KernelRegistry,
) -> Result<PointOutcome> {
    let cfg = &plan.config;
    let kernel = registry
        .get(&point.kernel)
        .ok_or_else(|| Error::PlanValidation(vec![format!("unknown kernel `{}`", point.kernel)]))?;
    let descriptor = backends::descriptor(point.backend).ok_or_else(|| {
        Error::PlanValidation(vec![format!(
            "backend `{}` is not compiled in",
            point.backend
        )])
    })?;
    let element = kernel.default_element();
    let n = point.size();
    let key = PointKey {
        kernel: point.kernel.clone(),
        backend: point.backend,
        threads: point.threads,
        size: n as u64,
        allocator: point.allocator,
        element_type: element,
    };
    let mut warnings = Vec::new();
    let mut notes = Vec::new();

    let (run_backend, run_threads, forced_fallback) = if descriptor.supports(kernel.primitive()) {
        (point.backend, point.threads, false)
    } else if cfg.fallback_unsupported {
        notes.push(format!(
            "{} lacks {}; ran sequentially",
            point.backend,
            kernel.primitive()
        ));
        (BackendId::Seq, 1, true)
    } else {
        let note = format!("{} does not support {}", point.backend, kernel.primitive());
        return Ok(PointOutcome {
            record: PointRecord::skipped(key, cfg.reps, SkipReason::Unsupported, note),
            warnings,
        });
    };

    let needed = estimate_memory(&*kernel, &descriptor, n);
    if needed > cfg.memory_budget {
        let note = format!("needs {needed} bytes, budget is {}", cfg.memory_budget);
        return Ok(PointOutcome {
            record: PointRecord::skipped(key, cfg.reps, SkipReason::MemoryBudget, note),
            warnings,
        });
    }

    let allocator = point.allocator.effective_for(&descriptor);
    if allocator != point.allocator {
        notes.push(format!(
            "{} is incompatible with {}; used {allocator}",
            point.backend, point.allocator
        ));
    }

    let policy = cfg
        .tuning
        .policy(run_backend, run_threads, cfg.oversubscribe);
    let run = RunConfig {
        reps: cfg.reps,
        warmups: cfg.warmups,
        allocator,
        seed: cfg.seed,
        element: Some(element),
    };
    let measured = Executor::new(policy).and_then(|exec| {
        if cfg.pin && run_backend != BackendId::Seq {
            let report = placement::pin_workers(&exec);
            warnings.extend(report.warnings);
        }
        harness::run_point(&*kernel, &exec, n, &run)
    });

    let record = match measured {
        Ok(m) => {
            if let Some(failure) = &m.failure {
                notes.push(format!("verification failed: {failure}"));
            }
            let median_ns = harness::median(&m.durations_ns);
            PointRecord {
                key,
                reps: cfg.reps,
                throughput: median_ns.map(|med| harness::throughput(m.bytes_per_iteration, med)),
                median_ns,
                durations_ns: m.durations_ns,
                valid: m.valid,
                fallback: forced_fallback || m.fallback,
                skipped: false,
                skip_reason: None,
                note: join_notes(notes),
            }
        }
        Err(e) => {
            notes.push(format!("execution error: {e}"));
            PointRecord {
                key,
                reps: cfg.reps,
                durations_ns: Vec::new(),
                median_ns: None,
                throughput: None,
                valid: false,
                fallback: forced_fallback,
                skipped: false,
                skip_reason: None,
                note: join_notes(notes),
            }
        }
    };
    Ok(PointOutcome { record, warnings })
}

fn join_notes(notes: Vec<String>) -> Option<String> {
    (!notes.is_empty()).then(|| notes.join("; "))
}

/// Result of an untimed oracle check of one plan point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PointCheck {
    Passed,
    Failed(String),
    Skipped(SkipReason),
}

/// Runs a point once and verifies it without timing, applying the same
/// support, fallback and memory-budget rules as [`execute_point`].
pub fn check_point(
    plan: &SweepPlan,
    point: &PlanPoint,
    registry: &KernelRegistry,
) -> Result<PointCheck> {
    let cfg = &plan.config;
    let kernel = registry
        .get(&point.kernel)
        .ok_or_else(|| Error::PlanValidation(vec![format!("unknown kernel `{}`", point.kernel)]))?;
    let descriptor = backends::descriptor(point.backend).ok_or_else(|| {
        Error::PlanValidation(vec![format!(
            "backend `{}` is not compiled in",
            point.backend
        )])
    })?;
    let (backend, threads) = if descriptor.supports(kernel.primitive()) {
        (point.backend, point.threads)
    } else if cfg.fallback_unsupported {
        (BackendId::Seq, 1)
    } else {
        return Ok(PointCheck::Skipped(SkipReason::Unsupported));
    };
    let n = point.size();
    if estimate_memory(&*kernel, &descriptor, n) > cfg.memory_budget {
        return Ok(PointCheck::Skipped(SkipReason::MemoryBudget));
    }
    let run = RunConfig {
        reps: 1,
        warmups: 0,
        allocator: point.allocator.effective_for(&descriptor),
        seed: cfg.seed,
        element: Some(kernel.default_element()),
    };
    let verdict = Executor::new(cfg.tuning.policy(backend, threads, cfg.oversubscribe))
        .and_then(|exec| harness::verify_point(&*kernel, &exec, n, &run));
    Ok(match verdict {
        Ok(Verification::Pass) => PointCheck::Passed,
        Ok(Verification::Fail(why)) => PointCheck::Failed(why),
        Err(e) => PointCheck::Failed(e.to_string()),
    })
}

pub fn verify_plan_with(
    plan: &SweepPlan,
    registry: &KernelRegistry,
    mut on_check: impl FnMut(&PlanPoint, &PointCheck),
) -> Result<Vec<(PlanPoint, PointCheck)>> {
    plan.validate_against(registry)?;
    plan.points()
        .into_iter()
        .map(|point| {
            let check = check_point(plan, &point, registry)?;
            on_check(&point, &check);
            Ok((point, check))
        })
        .collect()
}
