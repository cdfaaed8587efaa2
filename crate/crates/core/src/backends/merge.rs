//! Parallel merge sort for the pool backend.
//!
//! Workers first sort contiguous blocks of at least `cutoff` elements, then
//! runs are merged pairwise round by round. Each pairwise merge is split by
//! output position (merge path / co-ranking) so every round keeps all
//! workers busy, not just one per pair.

use std::cmp::Ordering;
use std::ops::Range;

use super::partition::{static_partition, SharedSlice};
use super::pool::WorkerPool;
use crate::element::Element;
use crate::error::Result;

pub(crate) fn pool_merge_sort<T: Element>(
    pool: &WorkerPool,
    data: &mut [T],
    cutoff: usize,
) -> Result<()> {
    let n = data.len();
    let workers = pool.threads();
    let blocks = static_partition(n, workers, cutoff.max(1));
    if blocks.len() <= 1 {
        // Below the cutoff the sort is a single sequential leaf, still run
        // on a pool worker so the measurement includes dispatch.
        let shared = SharedSlice::new(data);
        return pool.broadcast(|k| {
            if k == 0 {
                let slice = unsafe { shared.range_mut(0..n) };
                slice.sort_unstable_by(T::total_cmp);
            }
        });
    }

    {
        let shared = SharedSlice::new(data);
        pool.broadcast(|k| {
            if let Some(range) = blocks.get(k) {
                let block = unsafe { shared.range_mut(range.clone()) };
                block.sort_unstable_by(T::total_cmp);
            }
        })?;
    }

    let mut scratch = vec![T::zero(); n];
    let mut runs = blocks;
    let mut in_data = true;
    while runs.len() > 1 {
        let tasks = plan_round(&runs, n, workers);
        {
            let (src, dst): (&[T], &mut [T]) = if in_data {
                (&*data, &mut scratch)
            } else {
                (&scratch, &mut *data)
            };
            let out = SharedSlice::new(dst);
            pool.broadcast(|k| {
                for task in tasks.iter().skip(k).step_by(workers) {
                    let dst = unsafe { out.range_mut(task.output.clone()) };
                    task.execute(src, dst);
                }
            })?;
        }
        runs = runs
            .chunks(2)
            .map(|pair| pair[0].start..pair[pair.len() - 1].end)
            .collect();
        in_data = !in_data;
    }

    if !in_data {
        let parts = static_partition(n, workers, 1);
        let out = SharedSlice::new(data);
        let src = &scratch;
        pool.broadcast(|k| {
            if let Some(range) = parts.get(k) {
                let dst = unsafe { out.range_mut(range.clone()) };
                dst.copy_from_slice(&src[range.clone()]);
            }
        })?;
    }
    Ok(())
}

/// One slice of one pairwise merge: produce `output` (absolute positions)
/// from `left` and `right` (absolute positions of the two sorted runs).
#[derive(Debug, Clone)]
struct MergeTask {
    left: Range<usize>,
    right: Range<usize>,
    output: Range<usize>,
}

impl MergeTask {
    fn execute<T: Element>(&self, src: &[T], dst: &mut [T]) {
        let a = &src[self.left.clone()];
        let b = &src[self.right.clone()];
        let base = self.left.start;
        let lo = self.output.start - base;
        let hi = self.output.end - base;
        let i_lo = co_rank(lo, a, b);
        let i_hi = co_rank(hi, a, b);
        merge_into(&a[i_lo..i_hi], &b[lo - i_lo..hi - i_hi], dst);
    }
}

fn plan_round(runs: &[Range<usize>], n: usize, workers: usize) -> Vec<MergeTask> {
    let target = n.div_ceil(workers).max(1);
    let mut tasks = Vec::new();
    for pair in runs.chunks(2) {
        let (left, right) = match pair {
            [l, r] => (l.clone(), r.clone()),
            [l] => (l.clone(), l.end..l.end),
            _ => unreachable!(),
        };
        let start = left.start;
        let end = right.end;
        let pieces = (end - start).div_ceil(target).max(1);
        for range in static_partition(end - start, pieces, 1) {
            tasks.push(MergeTask {
                left: left.clone(),
                right: right.clone(),
                output: start + range.start..start + range.end,
            });
        }
    }
    tasks
}

/// Number of elements taken from `a` among the first `k` outputs of a
/// stable merge of `a` and `b` (ties go to `a`).
pub(crate) fn co_rank<T: Element>(k: usize, a: &[T], b: &[T]) -> usize {
    let mut lo = k.saturating_sub(b.len());
    let mut hi = k.min(a.len());
    while lo < hi {
        let i = lo + (hi - lo) / 2;
        let j = k - i;
        if j > 0 && i < a.len() && a[i].total_cmp(&b[j - 1]) != Ordering::Greater {
            lo = i + 1;
        } else {
            hi = i;
        }
    }
    lo
}

fn merge_into<T: Element>(a: &[T], b: &[T], dst: &mut [T]) {
    debug_assert_eq!(a.len() + b.len(), dst.len());
    let (mut i, mut j) = (0, 0);
    for slot in dst.iter_mut() {
        if j >= b.len() || (i < a.len() && a[i].total_cmp(&b[j]) != Ordering::Greater) {
            *slot = a[i];
            i += 1;
        } else {
            *slot = b[j];
            j += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_co_rank(k: usize, a: &[i32], b: &[i32]) -> usize {
        let mut tagged: Vec<(i32, u8, usize)> = a
            .iter()
            .enumerate()
            .map(|(i, &v)| (v, 0, i))
            .chain(b.iter().enumerate().map(|(i, &v)| (v, 1, i)))
            .collect();
        tagged.sort();
        tagged[..k].iter().filter(|t| t.1 == 0).count()
    }

    proptest! {
        #[test]
        fn co_rank_matches_stable_merge(
            mut a in proptest::collection::vec(0i32..20, 0..40),
            mut b in proptest::collection::vec(0i32..20, 0..40),
            frac in 0.0f64..=1.0,
        ) {
            a.sort();
            b.sort();
            let k = ((a.len() + b.len()) as f64 * frac) as usize;
            prop_assert_eq!(co_rank(k, &a, &b), brute_co_rank(k, &a, &b));
        }

        #[test]
        fn pool_sort_sorts(data in proptest::collection::vec(any::<i32>(), 0..3000), threads in 1usize..6, cutoff in 1usize..300) {
            let pool = WorkerPool::new(threads).unwrap();
            let mut got = data.clone();
            pool_merge_sort(&pool, &mut got, cutoff).unwrap();
            let mut want = data;
            want.sort();
            prop_assert_eq!(got, want);
        }
    }
}
