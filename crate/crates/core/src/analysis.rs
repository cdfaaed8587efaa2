//! Derived tables over a [`ResultSet`]: fixed-baseline speedups, parallel
//! efficiency and its threshold, allocator A/B deltas, and crossover sizes.
//!
//! Two baselines are in play. Speedup divides the sequential backend's
//! one-thread median by a point's median, so it can exceed the core count.
//! Efficiency divides a backend's own one-thread median by `p` times its
//! `p`-thread median.
//!
//! Every function reads medians only, so scaling all durations by a
//! constant leaves every output unchanged. Invalid or skipped points show up
//! as `None` gaps rather than errors.

use std::collections::{BTreeMap, BTreeSet};

use crate::backends::BackendId;
use crate::element::ElementType;
use crate::error::{Error, Result};
use crate::placement::Allocator;
use crate::results::{PointKey, PointRecord, ResultSet};

pub const DEFAULT_EFFICIENCY_THRESHOLD: f64 = 0.70;

fn matching<'a>(
    results: &'a ResultSet,
    kernel: &'a str,
    size: u64,
    allocator: Allocator,
) -> impl Iterator<Item = &'a PointRecord> + 'a {
    results.records.iter().filter(move |r| {
        r.key.kernel == kernel && r.key.size == size && r.key.allocator == allocator
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeedupRow {
    pub backend: BackendId,
    pub threads: usize,
    pub speedup: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeedupTable {
    pub kernel: String,
    pub size: u64,
    pub allocator: Allocator,
    pub baseline_median_ns: f64,
    pub rows: Vec<SpeedupRow>,
}

impl SpeedupTable {
    pub fn get(&self, backend: BackendId, threads: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.backend == backend && r.threads == threads)
            .and_then(|r| r.speedup)
    }
}

/// Speedup of every `(backend, threads)` point against the sequential
/// one-thread point of the same kernel, size and allocator.
pub fn speedup_table(
    results: &ResultSet,
    kernel: &str,
    size: u64,
    allocator: Allocator,
) -> Result<SpeedupTable> {
    let baseline = matching(results, kernel, size, allocator)
        .find(|r| r.key.backend == BackendId::Seq && r.key.threads == 1)
        .and_then(PointRecord::usable_median)
        .ok_or_else(|| {
            Error::Analysis(format!(
                "missing valid baseline point {kernel}/seq/t1/n{size}/{allocator}"
            ))
        })?;
    let mut rows: Vec<SpeedupRow> = matching(results, kernel, size, allocator)
        .map(|r| SpeedupRow {
            backend: r.key.backend,
            threads: r.key.threads,
            speedup: r.usable_median().map(|m| baseline / m),
        })
        .collect();
    rows.sort_by_key(|r| (r.backend, r.threads));
    Ok(SpeedupTable {
        kernel: kernel.to_owned(),
        size,
        allocator,
        baseline_median_ns: baseline,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EfficiencyRecord {
    pub backend: BackendId,
    /// `(threads, E(threads))`, ascending by threads.
    pub efficiencies: Vec<(usize, Option<f64>)>,
    /// Largest thread count with `E ≥ threshold`.
    pub threshold_threads: Option<usize>,
}

/// `T(1) / (p · T(p))`.
pub fn efficiency(t1: f64, threads: usize, tp: f64) -> f64 {
    t1 / (threads as f64 * tp)
}

pub fn efficiency_for_backend(
    results: &ResultSet,
    kernel: &str,
    size: u64,
    allocator: Allocator,
    backend: BackendId,
    threshold: f64,
) -> Result<EfficiencyRecord> {
    let mut points: Vec<&PointRecord> = matching(results, kernel, size, allocator)
        .filter(|r| r.key.backend == backend)
        .collect();
    points.sort_by_key(|r| r.key.threads);
    let t1 = points
        .iter()
        .find(|r| r.key.threads == 1)
        .and_then(|r| r.usable_median())
        .ok_or_else(|| {
            Error::Analysis(format!(
                "missing valid one-thread point {kernel}/{backend}/t1/n{size}/{allocator}"
            ))
        })?;
    let efficiencies: Vec<(usize, Option<f64>)> = points
        .iter()
        .map(|r| {
            (
                r.key.threads,
                r.usable_median()
                    .map(|tp| efficiency(t1, r.key.threads, tp)),
            )
        })
        .collect();
    let threshold_threads = efficiencies
        .iter()
        .filter(|(_, e)| e.is_some_and(|e| e >= threshold))
        .map(|(p, _)| *p)
        .max();
    Ok(EfficiencyRecord {
        backend,
        efficiencies,
        threshold_threads,
    })
}

/// One [`EfficiencyRecord`] per backend present for this kernel and size.
pub fn efficiency_threshold(
    results: &ResultSet,
    kernel: &str,
    size: u64,
    allocator: Allocator,
    threshold: f64,
) -> Result<Vec<EfficiencyRecord>> {
    let backends: BTreeSet<BackendId> = matching(results, kernel, size, allocator)
        .map(|r| r.key.backend)
        .collect();
    backends
        .into_iter()
        .map(|b| efficiency_for_backend(results, kernel, size, allocator, b, threshold))
        .collect()
}

/// Grid identity with the allocator tag dropped.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ComparisonKey {
    pub kernel: String,
    pub backend: BackendId,
    pub threads: usize,
    pub size: u64,
    pub element_type: ElementType,
}

impl From<&PointKey> for ComparisonKey {
    fn from(k: &PointKey) -> Self {
        Self {
            kernel: k.kernel.clone(),
            backend: k.backend,
            threads: k.threads,
            size: k.size,
            element_type: k.element_type,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AllocatorDelta {
    pub key: ComparisonKey,
    /// `100 · (T_default / T_first_touch − 1)`; negative when first-touch is
    /// slower.
    pub percent: Option<f64>,
}

pub fn allocator_percent(default_ns: f64, first_touch_ns: f64) -> f64 {
    100.0 * (default_ns / first_touch_ns - 1.0)
}

pub fn allocator_comparison(
    default_results: &ResultSet,
    first_touch_results: &ResultSet,
) -> Result<Vec<AllocatorDelta>> {
    let index = |rs: &ResultSet| -> BTreeMap<ComparisonKey, Option<f64>> {
        rs.records
            .iter()
            .map(|r| (ComparisonKey::from(&r.key), r.usable_median()))
            .collect()
    };
    let defaults = index(default_results);
    let touched = index(first_touch_results);
    let unmatched: Vec<String> = defaults
        .keys()
        .filter(|k| !touched.contains_key(*k))
        .map(|k| {
            format!(
                "{}/{}/t{}/n{} only in default run",
                k.kernel, k.backend, k.threads, k.size
            )
        })
        .chain(
            touched
                .keys()
                .filter(|k| !defaults.contains_key(*k))
                .map(|k| {
                    format!(
                        "{}/{}/t{}/n{} only in first-touch run",
                        k.kernel, k.backend, k.threads, k.size
                    )
                }),
        )
        .collect();
    if !unmatched.is_empty() {
        const SHOWN: usize = 10;
        let mut listed = unmatched[..unmatched.len().min(SHOWN)].join(", ");
        if unmatched.len() > SHOWN {
            listed += &format!(" and {} more", unmatched.len() - SHOWN);
        }
        return Err(Error::Analysis(format!("allocator grids differ: {listed}")));
    }
    Ok(defaults
        .into_iter()
        .map(|(key, d)| {
            let percent = match (d, touched[&key]) {
                (Some(d), Some(f)) => Some(allocator_percent(d, f)),
                _ => None,
            };
            AllocatorDelta { key, percent }
        })
        .collect())
}

/// Smallest size from which `backend` at its largest measured thread count
/// beats the sequential baseline at every larger measured size. `None` if it
/// is not faster at the largest measured size.
pub fn sweet_spot(
    results: &ResultSet,
    kernel: &str,
    backend: BackendId,
    allocator: Allocator,
) -> Result<Option<u64>> {
    let of_kernel = |b: BackendId| {
        results.records.iter().filter(move |r| {
            r.key.kernel == kernel && r.key.allocator == allocator && r.key.backend == b
        })
    };
    let seq: BTreeMap<u64, Option<f64>> = of_kernel(BackendId::Seq)
        .filter(|r| r.key.threads == 1)
        .map(|r| (r.key.size, r.usable_median()))
        .collect();
    let max_threads = of_kernel(backend)
        .map(|r| r.key.threads)
        .max()
        .ok_or_else(|| Error::Analysis(format!("no {backend} points for {kernel}/{allocator}")))?;
    let par: BTreeMap<u64, Option<f64>> = of_kernel(backend)
        .filter(|r| r.key.threads == max_threads)
        .map(|r| (r.key.size, r.usable_median()))
        .collect();
    if seq.is_empty() {
        return Err(Error::Analysis(format!(
            "no sequential points for {kernel}/{allocator}"
        )));
    }
    let missing: Vec<String> = seq
        .keys()
        .filter(|s| !par.contains_key(s))
        .map(|s| format!("{backend}/n{s}"))
        .chain(
            par.keys()
                .filter(|s| !seq.contains_key(s))
                .map(|s| format!("seq/n{s}")),
        )
        .collect();
    if !missing.is_empty() {
        return Err(Error::Analysis(format!(
            "incomplete size sweep for {kernel}: missing {}",
            missing.join(", ")
        )));
    }

    let mut spot = None;
    for (&size, &seq_ns) in seq.iter().rev() {
        let (Some(seq_ns), Some(par_ns)) = (seq_ns, par[&size]) else {
            continue;
        };
        if par_ns < seq_ns {
            spot = Some(size);
        } else {
            break;
        }
    }
    Ok(spot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::results::{RunMetadata, SCHEMA_VERSION};

    fn record(
        kernel: &str,
        backend: BackendId,
        threads: usize,
        size: u64,
        ns: Option<f64>,
    ) -> PointRecord {
        PointRecord {
            key: PointKey {
                kernel: kernel.into(),
                backend,
                threads,
                size,
                allocator: Allocator::FirstTouch,
                element_type: ElementType::Int32,
            },
            reps: 1,
            durations_ns: ns.map(|n| vec![n as u64]).unwrap_or_default(),
            median_ns: ns,
            throughput: None,
            valid: ns.is_some(),
            fallback: false,
            skipped: false,
            skip_reason: None,
            note: None,
        }
    }

    fn set(records: Vec<PointRecord>) -> ResultSet {
        ResultSet {
            schema_version: SCHEMA_VERSION,
            metadata: RunMetadata::capture(0, 8, "test"),
            records,
        }
    }

    #[test]
    fn speedup_examples() {
        let rs = set(vec![
            record("reduce", BackendId::Seq, 1, 8, Some(9.54e9)),
            record("reduce", BackendId::Pool, 1, 8, Some(1.0e9)),
            record("reduce", BackendId::Pool, 2, 8, None),
        ]);
        let t = speedup_table(&rs, "reduce", 8, Allocator::FirstTouch).unwrap();
        assert!((t.get(BackendId::Pool, 1).unwrap() - 9.54).abs() < 1e-12);
        assert_eq!(t.get(BackendId::Seq, 1), Some(1.0));
        assert_eq!(t.get(BackendId::Pool, 2), None);

        let rs = set(vec![
            record("reduce", BackendId::Seq, 1, 8, Some(1.0)),
            record("reduce", BackendId::Pool, 2, 8, Some(0.5)),
            record("reduce", BackendId::Native, 2, 8, Some(2.0)),
        ]);
        let t = speedup_table(&rs, "reduce", 8, Allocator::FirstTouch).unwrap();
        assert_eq!(t.get(BackendId::Pool, 2), Some(2.0));
        assert_eq!(t.get(BackendId::Native, 2), Some(0.5));
    }

    #[test]
    fn speedup_needs_baseline() {
        let rs = set(vec![record("reduce", BackendId::Pool, 1, 8, Some(1.0))]);
        let err = speedup_table(&rs, "reduce", 8, Allocator::FirstTouch).unwrap_err();
        assert!(err.to_string().contains("reduce/seq/t1/n8"), "{err}");
    }

    #[test]
    fn efficiency_examples() {
        let series = |times: &[(usize, f64)]| {
            set(times
                .iter()
                .map(|&(p, t)| record("sort", BackendId::Pool, p, 64, Some(t)))
                .collect())
        };
        let rs = series(&[(1, 100.0), (2, 60.0), (4, 35.0), (8, 30.0)]);
        let e = efficiency_for_backend(
            &rs,
            "sort",
            64,
            Allocator::FirstTouch,
            BackendId::Pool,
            0.70,
        )
        .unwrap();
        assert_eq!(e.threshold_threads, Some(4));
        assert_eq!(e.efficiencies[0].1, Some(1.0));

        let rs = series(&[(1, 100.0), (2, 50.0), (4, 25.0), (8, 12.5)]);
        let e = efficiency_threshold(&rs, "sort", 64, Allocator::FirstTouch, 0.70).unwrap();
        assert_eq!(e[0].threshold_threads, Some(8));

        let rs = series(&[(1, 100.0), (2, 100.0), (4, 100.0)]);
        let e = efficiency_threshold(&rs, "sort", 64, Allocator::FirstTouch, 0.70).unwrap();
        assert_eq!(e[0].threshold_threads, Some(1));

        // Exactly 0.70 counts.
        let rs = series(&[(1, 70.0), (2, 50.0)]);
        let e = efficiency_threshold(&rs, "sort", 64, Allocator::FirstTouch, 0.70).unwrap();
        assert_eq!(e[0].efficiencies[1].1, Some(0.7));
        assert_eq!(e[0].threshold_threads, Some(2));
    }

    #[test]
    fn efficiency_needs_one_thread_point() {
        let rs = set(vec![record("sort", BackendId::Pool, 2, 64, Some(1.0))]);
        assert!(efficiency_threshold(&rs, "sort", 64, Allocator::FirstTouch, 0.7).is_err());
    }

    #[test]
    fn allocator_examples() {
        assert!((allocator_percent(2.94, 1.0) - 194.0).abs() < 1e-9);
        assert_eq!(allocator_percent(1.0, 1.0), 0.0);
        assert!((allocator_percent(0.87, 1.0) + 13.0).abs() < 1e-9);

        let a = set(vec![record("reduce", BackendId::Pool, 4, 8, Some(2.94))]);
        let mut b = a.clone();
        b.records[0].key.allocator = Allocator::Default;
        b.records[0].median_ns = Some(2.94);
        let mut f = a.clone();
        f.records[0].median_ns = Some(1.0);
        let deltas = allocator_comparison(&b, &f).unwrap();
        assert_eq!(deltas.len(), 1);
        assert!((deltas[0].percent.unwrap() - 194.0).abs() < 1e-9);

        let extra = set(vec![
            record("reduce", BackendId::Pool, 4, 8, Some(1.0)),
            record("reduce", BackendId::Pool, 8, 8, Some(1.0)),
        ]);
        let err = allocator_comparison(&b, &extra).unwrap_err();
        assert!(
            err.to_string()
                .contains("reduce/pool/t8/n8 only in first-touch run"),
            "{err}"
        );
    }

    fn crossover(seq: &[(u64, f64)], par: &[(u64, f64)]) -> ResultSet {
        set(seq
            .iter()
            .map(|&(s, t)| record("find", BackendId::Seq, 1, s, Some(t)))
            .chain(
                par.iter()
                    .map(|&(s, t)| record("find", BackendId::Pool, 8, s, Some(t))),
            )
            .chain(
                par.iter()
                    .map(|&(s, _)| record("find", BackendId::Pool, 1, s, Some(1e12))),
            )
            .collect())
    }

    #[test]
    fn sweet_spot_examples() {
        let sizes: Vec<u64> = (10..=20).map(|k| 1 << k).collect();
        let seq: Vec<_> = sizes.iter().map(|&s| (s, 100.0)).collect();
        let faster_from_16: Vec<_> = sizes
            .iter()
            .map(|&s| (s, if s >= 1 << 16 { 50.0 } else { 200.0 }))
            .collect();
        let rs = crossover(&seq, &faster_from_16);
        assert_eq!(
            sweet_spot(&rs, "find", BackendId::Pool, Allocator::FirstTouch).unwrap(),
            Some(1 << 16)
        );

        let never: Vec<_> = sizes.iter().map(|&s| (s, 200.0)).collect();
        let rs = crossover(&seq, &never);
        assert_eq!(
            sweet_spot(&rs, "find", BackendId::Pool, Allocator::FirstTouch).unwrap(),
            None
        );

        let wobbly: Vec<_> = sizes
            .iter()
            .map(|&s| {
                let fast = s == 1 << 10 || s >= 1 << 16;
                (s, if fast { 50.0 } else { 200.0 })
            })
            .collect();
        let rs = crossover(&seq, &wobbly);
        assert_eq!(
            sweet_spot(&rs, "find", BackendId::Pool, Allocator::FirstTouch).unwrap(),
            Some(1 << 16)
        );
    }

    #[test]
    fn sweet_spot_requires_complete_sweep() {
        let rs = crossover(&[(8, 1.0), (16, 1.0)], &[(8, 1.0)]);
        assert!(sweet_spot(&rs, "find", BackendId::Pool, Allocator::FirstTouch).is_err());
        let rs = crossover(&[], &[(8, 1.0)]);
        assert!(sweet_spot(&rs, "find", BackendId::Pool, Allocator::FirstTouch).is_err());
    }
}
