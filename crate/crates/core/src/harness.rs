//! Timing, warm-up, repetition and summary statistics for one benchmark
//! point.
//!
//! Each repetition times exactly one kernel invocation; per-repetition setup
//! (target redraws, re-shuffles) runs before the clock starts.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::backends::{BackendId, Executor};
use crate::element::ElementType;
use crate::error::{Error, Result};
use crate::kernels::{InstanceParams, Kernel, Verification};
use crate::placement::Allocator;

pub const DEFAULT_REPS: usize = 10;
pub const DEFAULT_WARMUPS: usize = 1;

/// Source of monotonic timestamps. Swappable so tests can observe exactly
/// which work falls inside the timed region.
pub trait Clock {
    fn now(&self) -> Duration;
}

#[derive(Debug)]
pub struct MonotonicClock {
    origin: Instant,
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
}

/// Runs `setup`, then times `body` alone.
pub fn time_once<S, B>(setup: S, body: B) -> Result<Duration>
where
    S: FnOnce() -> Result<()>,
    B: FnOnce() -> Result<()>,
{
    time_once_with(&MonotonicClock::default(), setup, body)
}

pub fn time_once_with<C, S, B>(clock: &C, setup: S, body: B) -> Result<Duration>
where
    C: Clock + ?Sized,
    S: FnOnce() -> Result<()>,
    B: FnOnce() -> Result<()>,
{
    setup()?;
    let start = clock.now();
    body()?;
    let end = clock.now();
    Ok(end.saturating_sub(start))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunConfig {
    pub reps: usize,
    pub warmups: usize,
    pub allocator: Allocator,
    pub seed: u64,
    /// Overrides the kernel's default element type.
    pub element: Option<ElementType>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            reps: DEFAULT_REPS,
            warmups: DEFAULT_WARMUPS,
            allocator: Allocator::FirstTouch,
            seed: 0,
            element: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub kernel: String,
    pub backend: BackendId,
    pub threads: usize,
    pub n: usize,
    pub allocator: Allocator,
    pub element: ElementType,
    /// One wall-clock duration per timed repetition, in nanoseconds (≥ 1).
    pub durations_ns: Vec<u64>,
    pub bytes_per_iteration: u64,
    pub valid: bool,
    pub fallback: bool,
    pub failure: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub median_ns: f64,
    pub min_ns: u64,
    pub max_ns: u64,
    pub throughput_bytes_per_s: f64,
}

/// Median of the values: the middle element for odd counts, the mean of the
/// two middle elements for even counts.
pub fn median(values: &[u64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let mid = sorted.len() / 2;
    Some(if sorted.len() % 2 == 1 {
        sorted[mid] as f64
    } else {
        (sorted[mid - 1] as f64 + sorted[mid] as f64) / 2.0
    })
}

pub fn throughput(bytes: u64, median_ns: f64) -> f64 {
    bytes as f64 / (median_ns * 1e-9)
}

pub fn summarize(m: &Measurement) -> Result<Stats> {
    if !m.valid {
        return Err(Error::InvalidArgument(format!(
            "cannot summarize invalid measurement of `{}`",
            m.kernel
        )));
    }
    let median_ns = median(&m.durations_ns).ok_or_else(|| {
        Error::InvalidArgument(format!("measurement of `{}` has no repetitions", m.kernel))
    })?;
    Ok(Stats {
        median_ns,
        min_ns: *m.durations_ns.iter().min().expect("non-empty"),
        max_ns: *m.durations_ns.iter().max().expect("non-empty"),
        throughput_bytes_per_s: throughput(m.bytes_per_iteration, median_ns),
    })
}

fn instance_params(kernel: &dyn Kernel, n: usize, cfg: &RunConfig) -> Result<InstanceParams> {
    let element = cfg.element.unwrap_or_else(|| kernel.default_element());
    if !kernel.supports_element(element) {
        return Err(Error::InvalidArgument(format!(
            "kernel `{}` does not support {element} elements",
            kernel.id()
        )));
    }
    Ok(InstanceParams {
        n,
        element,
        seed: cfg.seed,
        allocator: cfg.allocator,
    })
}

/// Runs the verifier once on a fresh instance, without timing.
pub fn verify_point(
    kernel: &dyn Kernel,
    exec: &Executor,
    n: usize,
    cfg: &RunConfig,
) -> Result<Verification> {
    let params = instance_params(kernel, n, cfg)?;
    let mut instance = kernel.prepare(exec, &params)?;
    instance.refresh(exec, 0)?;
    instance.run(exec)?;
    Ok(instance.verify())
}

/// Measures one benchmark point with the monotonic clock.
pub fn run_point(
    kernel: &dyn Kernel,
    exec: &Executor,
    n: usize,
    cfg: &RunConfig,
) -> Result<Measurement> {
    run_point_with_clock(&MonotonicClock::default(), kernel, exec, n, cfg)
}

/// Generates the input, runs and verifies the kernel once (untimed), then
/// performs `warmups` discarded and `reps` timed executions.
///
/// A failed verification does not abort: the measurement is returned with
/// `valid = false`. Execution errors are returned as errors.
pub fn run_point_with_clock<C: Clock + ?Sized>(
    clock: &C,
    kernel: &dyn Kernel,
    exec: &Executor,
    n: usize,
    cfg: &RunConfig,
) -> Result<Measurement> {
    if cfg.reps == 0 {
        return Err(Error::InvalidArgument("reps must be at least 1".into()));
    }
    let params = instance_params(kernel, n, cfg)?;
    let mut instance = kernel.prepare(exec, &params)?;

    let mut repetition = 0u64;
    instance.refresh(exec, repetition)?;
    instance.run(exec)?;
    let verdict = instance.verify();

    for _ in 0..cfg.warmups {
        repetition += 1;
        instance.refresh(exec, repetition)?;
        instance.run(exec)?;
    }

    let mut durations_ns = Vec::with_capacity(cfg.reps);
    for _ in 0..cfg.reps {
        repetition += 1;
        instance.refresh(exec, repetition)?;
        let start = clock.now();
        instance.run(exec)?;
        let elapsed = clock.now().saturating_sub(start);
        durations_ns.push((elapsed.as_nanos() as u64).max(1));
    }

    let (valid, failure) = match verdict {
        Verification::Pass => (true, None),
        Verification::Fail(msg) => (false, Some(msg)),
    };
    Ok(Measurement {
        kernel: kernel.id().to_owned(),
        backend: exec.policy().backend,
        threads: exec.threads(),
        n,
        allocator: cfg.allocator,
        element: params.element,
        durations_ns,
        bytes_per_iteration: kernel.bytes_per_iteration(n, params.element.size()),
        valid,
        fallback: exec.policy().falls_back(n),
        failure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::Primitive;
    use crate::kernels::{KernelInstance, KernelRegistry, Outcome};
    use proptest::prelude::*;
    use std::cell::Cell;
    use std::sync::atomic::{AtomicU64, Ordering};
    use std::sync::Arc;

    fn measurement(durations_ns: Vec<u64>, bytes: u64) -> Measurement {
        Measurement {
            kernel: "reduce".into(),
            backend: BackendId::Seq,
            threads: 1,
            n: 8,
            allocator: Allocator::FirstTouch,
            element: ElementType::Int32,
            durations_ns,
            bytes_per_iteration: bytes,
            valid: true,
            fallback: false,
            failure: None,
        }
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3, 1, 2]), Some(2.0));
        assert_eq!(median(&[4, 1, 3, 2]), Some(2.5));
        assert_eq!(median(&[5_000_000; 10]), Some(5_000_000.0));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn summarize_examples() {
        let ms = 1_000_000;
        let s = summarize(&measurement(vec![3 * ms, ms, 2 * ms], 0)).unwrap();
        assert_eq!(s.median_ns, 2e6);
        assert_eq!((s.min_ns, s.max_ns), (ms, 3 * ms));

        let s = summarize(&measurement(vec![ms], 4 << 20)).unwrap();
        assert!((s.throughput_bytes_per_s - 4.194304e9).abs() < 1e-3);

        let mut bad = measurement(vec![ms], 0);
        bad.valid = false;
        assert!(summarize(&bad).is_err());
        assert!(summarize(&measurement(vec![], 0)).is_err());
    }

    #[test]
    fn sleep_is_timed() {
        let d = time_once(
            || Ok(()),
            || {
                std::thread::sleep(Duration::from_millis(10));
                Ok(())
            },
        )
        .unwrap();
        assert!(
            d >= Duration::from_millis(9) && d <= Duration::from_millis(50),
            "{d:?}"
        );
    }

    #[test]
    fn setup_is_not_timed() {
        let noop = time_once(|| Ok(()), || Ok(())).unwrap();
        assert!(noop < Duration::from_millis(1));
        let d = time_once(
            || {
                std::thread::sleep(Duration::from_millis(20));
                Ok(())
            },
            || Ok(()),
        )
        .unwrap();
        assert!(d < Duration::from_millis(1), "{d:?}");
    }

    #[test]
    fn body_errors_propagate() {
        let err = time_once(|| Ok(()), || Err(Error::Execution("nope".into()))).unwrap_err();
        assert!(matches!(err, Error::Execution(_)));
    }

    /// A clock that only moves when the instrumented kernel advances it.
    #[derive(Default)]
    struct FakeClock(Arc<AtomicU64>);

    impl Clock for FakeClock {
        fn now(&self) -> Duration {
            Duration::from_nanos(self.0.load(Ordering::SeqCst))
        }
    }

    struct Instrumented {
        clock: Arc<AtomicU64>,
        pass: bool,
    }

    struct InstrumentedInstance {
        clock: Arc<AtomicU64>,
        pass: bool,
        runs: Cell<u32>,
    }

    impl Kernel for Instrumented {
        fn id(&self) -> &str {
            "instrumented"
        }
        fn primitive(&self) -> Primitive {
            Primitive::Map
        }
        fn default_element(&self) -> ElementType {
            ElementType::Int32
        }
        fn supports_element(&self, _: ElementType) -> bool {
            true
        }
        fn prepare(&self, _: &Executor, _: &InstanceParams) -> Result<Box<dyn KernelInstance>> {
            // Generation is expensive and must never be observed.
            self.clock.fetch_add(7_000_000_000, Ordering::SeqCst);
            Ok(Box::new(InstrumentedInstance {
                clock: Arc::clone(&self.clock),
                pass: self.pass,
                runs: Cell::new(0),
            }))
        }
    }

    impl KernelInstance for InstrumentedInstance {
        fn refresh(&mut self, _: &Executor, _: u64) -> Result<()> {
            self.clock.fetch_add(1_000_000_000, Ordering::SeqCst);
            Ok(())
        }
        fn run(&mut self, _: &Executor) -> Result<()> {
            self.runs.set(self.runs.get() + 1);
            self.clock.fetch_add(1_000_000, Ordering::SeqCst);
            Ok(())
        }
        fn verify(&self) -> Verification {
            if self.pass {
                Verification::Pass
            } else {
                Verification::Fail("instrumented failure".into())
            }
        }
        fn outcome(&self) -> Outcome {
            Outcome::NotRun
        }
    }

    #[test]
    fn refresh_never_inside_timed_region() {
        let clock = FakeClock::default();
        let kernel = Instrumented {
            clock: Arc::clone(&clock.0),
            pass: true,
        };
        let seq = Executor::sequential();
        let cfg = RunConfig {
            reps: 10,
            warmups: 3,
            ..RunConfig::default()
        };
        let m = run_point_with_clock(&clock, &kernel, &seq, 8, &cfg).unwrap();
        assert_eq!(m.durations_ns, vec![1_000_000; 10]);
        assert!(m.valid);
    }

    #[test]
    fn failing_verifier_marks_invalid() {
        let clock = FakeClock::default();
        let kernel = Instrumented {
            clock: Arc::clone(&clock.0),
            pass: false,
        };
        let seq = Executor::sequential();
        let m = run_point_with_clock(&clock, &kernel, &seq, 8, &RunConfig::default()).unwrap();
        assert!(!m.valid);
        assert_eq!(m.failure.as_deref(), Some("instrumented failure"));
        assert_eq!(m.durations_ns.len(), DEFAULT_REPS);
        assert!(summarize(&m).is_err());
    }

    #[test]
    fn repetition_counts() {
        let reg = KernelRegistry::builtin();
        let seq = Executor::sequential();
        let reduce = reg.get("reduce").unwrap();
        let m = run_point(&*reduce, &seq, 1 << 10, &RunConfig::default()).unwrap();
        assert_eq!(m.durations_ns.len(), 10);
        assert!(m.durations_ns.iter().all(|&d| d > 0));
        assert!(m.valid);
        assert_eq!(m.bytes_per_iteration, 4 << 10);

        let one = RunConfig {
            reps: 1,
            warmups: 0,
            ..RunConfig::default()
        };
        let m = run_point(&*reduce, &seq, 16, &one).unwrap();
        assert_eq!(m.durations_ns.len(), 1);

        let zero = RunConfig {
            reps: 0,
            ..RunConfig::default()
        };
        assert!(run_point(&*reduce, &seq, 16, &zero).is_err());
    }

    #[test]
    fn verify_point_runs_builtins() {
        let reg = KernelRegistry::builtin();
        let seq = Executor::sequential();
        for id in reg.ids() {
            let k = reg.get(id).unwrap();
            assert!(
                verify_point(&*k, &seq, 100, &RunConfig::default())
                    .unwrap()
                    .passed(),
                "{id}"
            );
        }
        let find = reg.get("find").unwrap();
        let floats = RunConfig {
            element: Some(ElementType::Float64),
            ..RunConfig::default()
        };
        assert!(verify_point(&*find, &seq, 8, &floats).is_err());
    }

    proptest! {
        #[test]
        fn median_is_permutation_invariant(mut values in proptest::collection::vec(1u64..1_000_000, 1..40), seed in any::<u64>()) {
            let before = median(&values);
            crate::datagen::shuffle(&mut values, seed, 0);
            prop_assert_eq!(median(&values), before);
        }

        #[test]
        fn median_bounded_by_extremes(values in proptest::collection::vec(1u64..1_000_000, 1..40)) {
            let s = summarize(&measurement(values.clone(), 1)).unwrap();
            prop_assert!(s.min_ns as f64 <= s.median_ns && s.median_ns <= s.max_ns as f64);
        }

        #[test]
        fn single_value_median(v in 1u64..u32::MAX as u64) {
            prop_assert_eq!(median(&[v]), Some(v as f64));
        }
    }
}
