//! Work partitioning shared by the pool backend and the first-touch allocator.

use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};

/// Splits `0..n` into at most `workers` contiguous, balanced ranges.
///
/// Range sizes differ by at most one. When `n < min_chunk * workers` fewer
/// ranges are produced so that every range still holds at least `min_chunk`
/// elements (a single range when `n < min_chunk`). Returns no ranges for
/// `n == 0`.
pub fn static_partition(n: usize, workers: usize, min_chunk: usize) -> Vec<Range<usize>> {
    if n == 0 {
        return Vec::new();
    }
    let parts = workers.max(1).min((n / min_chunk.max(1)).max(1));
    let base = n / parts;
    let extra = n % parts;
    let mut ranges = Vec::with_capacity(parts);
    let mut start = 0;
    for k in 0..parts {
        let len = base + usize::from(k < extra);
        ranges.push(start..start + len);
        start += len;
    }
    debug_assert_eq!(start, n);
    ranges
}

/// Hands out shrinking chunks from a shared cursor: each grab takes half of
/// the per-worker remainder, but never less than `min_chunk`.
#[derive(Debug)]
pub struct GuidedChunks {
    next: AtomicUsize,
    len: usize,
    workers: usize,
    min_chunk: usize,
}

impl GuidedChunks {
    pub fn new(len: usize, workers: usize, min_chunk: usize) -> Self {
        Self {
            next: AtomicUsize::new(0),
            len,
            workers: workers.max(1),
            min_chunk: min_chunk.max(1),
        }
    }

    pub fn grab(&self) -> Option<Range<usize>> {
        let mut current = self.next.load(Ordering::Relaxed);
        loop {
            if current >= self.len {
                return None;
            }
            let remaining = self.len - current;
            let size = (remaining / (2 * self.workers))
                .max(self.min_chunk)
                .min(remaining);
            match self.next.compare_exchange_weak(
                current,
                current + size,
                Ordering::Relaxed,
                Ordering::Relaxed,
            ) {
                Ok(_) => return Some(current..current + size),
                Err(actual) => current = actual,
            }
        }
    }
}

/// Shares a mutable slice across workers that write provably disjoint ranges.
pub(crate) struct SharedSlice<T> {
    ptr: *mut T,
    len: usize,
}

unsafe impl<T: Send> Send for SharedSlice<T> {}
unsafe impl<T: Send> Sync for SharedSlice<T> {}

impl<T> SharedSlice<T> {
    pub(crate) fn new(slice: &mut [T]) -> Self {
        Self {
            ptr: slice.as_mut_ptr(),
            len: slice.len(),
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.len
    }

    /// # Safety
    /// No two live borrows returned by this method may overlap, and the
    /// originating slice must outlive them.
    #[allow(clippy::mut_from_ref)]
    pub(crate) unsafe fn range_mut(&self, range: Range<usize>) -> &mut [T] {
        assert!(range.start <= range.end && range.end <= self.len);
        std::slice::from_raw_parts_mut(self.ptr.add(range.start), range.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn balanced_split() {
        assert_eq!(static_partition(10, 4, 1), vec![0..3, 3..6, 6..8, 8..10]);
        assert_eq!(static_partition(8, 4, 1), vec![0..2, 2..4, 4..6, 6..8]);
        assert_eq!(static_partition(3, 4, 1), vec![0..1, 1..2, 2..3]);
        assert!(static_partition(0, 4, 1).is_empty());
    }

    #[test]
    fn min_chunk_limits_parts() {
        assert_eq!(static_partition(10, 4, 4), vec![0..5, 5..10]);
        assert_eq!(static_partition(3, 4, 4), vec![0..3]);
    }

    #[test]
    fn guided_covers_everything() {
        let g = GuidedChunks::new(1000, 4, 8);
        let mut covered = 0;
        let mut last_end = 0;
        while let Some(r) = g.grab() {
            assert_eq!(r.start, last_end);
            last_end = r.end;
            covered += r.len();
        }
        assert_eq!(covered, 1000);
    }

    proptest! {
        #[test]
        fn partition_is_exact(n in 0usize..5000, workers in 1usize..70, min_chunk in 1usize..200) {
            let parts = static_partition(n, workers, min_chunk);
            prop_assert!(parts.len() <= workers);
            let mut next = 0;
            for r in &parts {
                prop_assert_eq!(r.start, next);
                prop_assert!(!r.is_empty());
                next = r.end;
            }
            prop_assert_eq!(next, n);
            if n >= min_chunk * workers {
                prop_assert_eq!(parts.len(), workers);
                for r in &parts {
                    prop_assert!(r.len() >= min_chunk);
                }
            }
        }
    }
}
