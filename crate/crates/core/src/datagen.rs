//! Deterministic input generation and checksums.
//!
//! All randomness comes from ChaCha8 seeded with `seed_from_u64(seed)`; the
//! repetition number selects the ChaCha stream. ChaCha is counter-based and
//! its output is fixed across platforms, so every input is reproducible
//! bit-for-bit from `(seed, repetition)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::partition::SharedSlice;
use crate::backends::Executor;
use crate::element::{Element, ElementType};
use crate::error::{Error, Result};
use crate::placement::{Allocator, Buffer};

/// Largest supported problem size. Increment values up to 2^30 are exact in
/// every element type.
pub const MAX_ELEMENTS: usize = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Increment,
    ShuffledPermutation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DataSpec {
    pub n: usize,
    pub element: ElementType,
    pub seed: u64,
    pub pattern: Pattern,
}

impl DataSpec {
    pub fn increment(n: usize, element: ElementType) -> Self {
        Self {
            n,
            element,
            seed: 0,
            pattern: Pattern::Increment,
        }
    }

    pub fn shuffled(n: usize, element: ElementType, seed: u64) -> Self {
        Self {
            n,
            element,
            seed,
            pattern: Pattern::ShuffledPermutation,
        }
    }

    fn check<T: Element>(&self, pattern: Pattern) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidSpec("n must be at least 1".into()));
        }
        if self.n > MAX_ELEMENTS {
            return Err(Error::InvalidSpec(format!("n = {} exceeds 2^30", self.n)));
        }
        if self.pattern != pattern {
            return Err(Error::InvalidSpec(format!(
                "expected pattern {pattern:?}, spec has {:?}",
                self.pattern
            )));
        }
        if self.element != T::TYPE {
            return Err(Error::InvalidSpec(format!(
                "spec element {} does not match buffer type {}",
                self.element,
                T::TYPE
            )));
        }
        Ok(())
    }
}

/// The generator for one `(seed, stream)` pair.
pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `[1, 2, …, n]`, written in parallel by the executor's workers into memory
/// obtained from `allocator`.
pub fn generate_increment<T: Element>(
    spec: &DataSpec,
    exec: &Executor,
    allocator: Allocator,
) -> Result<Buffer<T>> {
    spec.check::<T>(Pattern::Increment)?;
    Buffer::from_fn(exec, allocator, spec.n, |i| {
        T::from_u64_wrapping(i as u64 + 1)
    })
}

/// A permutation of `[1, …, n]`. Memory is placed and filled in parallel,
/// then Fisher–Yates shuffled sequentially with stream 0 of `spec.seed`.
pub fn generate_shuffled<T: Element>(
    spec: &DataSpec,
    exec: &Executor,
    allocator: Allocator,
) -> Result<Buffer<T>> {
    spec.check::<T>(Pattern::ShuffledPermutation)?;
    let mut buf = Buffer::from_fn(exec, allocator, spec.n, |i| {
        T::from_u64_wrapping(i as u64 + 1)
    })?;
    shuffle(&mut buf, spec.seed, 0);
    Ok(buf)
}

/// Overwrites `data` with `[1, …, n]` in parallel and shuffles it with the
/// given stream. Used to re-randomize sort inputs between repetitions.
pub fn reshuffle<T: Element>(
    exec: &Executor,
    data: &mut [T],
    seed: u64,
    stream: u64,
) -> Result<()> {
    {
        let shared = SharedSlice::new(data);
        exec.for_each_static_chunk(shared.len(), |_, range| {
            let start = range.start;
            // SAFETY: static chunks are disjoint.
            let chunk = unsafe { shared.range_mut(range) };
            for (offset, x) in chunk.iter_mut().enumerate() {
                *x = T::from_u64_wrapping((start + offset) as u64 + 1);
            }
        })?;
    }
    shuffle(data, seed, stream);
    Ok(())
}

/// In-place Fisher–Yates (Durstenfeld) shuffle.
pub fn shuffle<T>(data: &mut [T], seed: u64, stream: u64) {
    let mut rng = rng(seed, stream);
    for i in (1..data.len()).rev() {
        let j = rng.gen_range(0..=i);
        data.swap(i, j);
    }
}

/// A value drawn uniformly from `[1, n]` for repetition `stream`.
pub fn draw_target(seed: u64, stream: u64, n: usize) -> u64 {
    rng(seed, stream).gen_range(1..=n as u64)
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over the raw element bytes, in order.
pub fn checksum<T: Element>(data: &[T]) -> u64 {
    // SAFETY: every `Element` is a primitive without padding.
    let bytes = unsafe {
        std::slice::from_raw_parts(data.as_ptr().cast::<u8>(), std::mem::size_of_val(data))
    };
    checksum_bytes(bytes)
}

pub fn checksum_bytes(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}
