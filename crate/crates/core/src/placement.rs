//! Memory placement: first-touch parallel allocation and worker pinning.
//!
//! On Linux a page is backed by memory on the NUMA node of the thread that
//! first writes it. [`first_touch_allocate`] has the benchmark's own workers
//! write the first byte of every object over the same static chunks the
//! kernels later use, so each worker's pages land next to it.

use std::alloc::{self, Layout};
use std::fmt;
use std::ops::{Deref, DerefMut, Range};
use std::ptr::NonNull;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::backends::{BackendDescriptor, ExecutionPolicy, Executor};
use crate::element::Element;
use crate::error::{Error, Result};

const ALIGN: usize = 64;

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Allocator {
    #[default]
    FirstTouch,
    Default,
}

impl Allocator {
    pub const fn name(self) -> &'static str {
        match self {
            Self::FirstTouch => "first_touch",
            Self::Default => "default",
        }
    }

    /// The allocator actually used for `requested` on a backend. Backends
    /// that declare themselves incompatible with first-touch placement get
    /// the default allocator.
    pub fn effective_for(self, backend: &BackendDescriptor) -> Allocator {
        match self {
            Self::FirstTouch if !backend.first_touch_compatible => Self::Default,
            other => other,
        }
    }
}

impl fmt::Display for Allocator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Allocator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first_touch" => Ok(Self::FirstTouch),
            "default" => Ok(Self::Default),
            _ => Err(Error::InvalidArgument(format!("unknown allocator `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlacementConfig {
    pub first_touch: bool,
    pub pin_threads: bool,
    pub touch_policy: ExecutionPolicy,
}

impl PlacementConfig {
    /// First-touch on, pinning off, touching with the benchmark's own policy.
    pub fn for_policy(policy: &ExecutionPolicy) -> Self {
        Self {
            first_touch: true,
            pin_threads: false,
            touch_policy: policy.clone(),
        }
    }

    pub fn allocator(&self) -> Allocator {
        if self.first_touch {
            Allocator::FirstTouch
        } else {
            Allocator::Default
        }
    }
}

/// An owned, 64-byte aligned, possibly uninitialized allocation of exactly
/// `count * element_size` bytes.
pub struct RawBuffer {
    ptr: NonNull<u8>,
    layout: Layout,
    count: usize,
    element_size: usize,
    first_touched: bool,
}

// Plain owned memory.
unsafe impl Send for RawBuffer {}
unsafe impl Sync for RawBuffer {}

impl RawBuffer {
    fn allocate(count: usize, element_size: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidArgument("allocation of zero objects".into()));
        }
        if element_size == 0 {
            return Err(Error::InvalidArgument("zero-sized objects".into()));
        }
        let bytes = count
            .checked_mul(element_size)
            .ok_or_else(|| Error::Resource(format!("{count} x {element_size} bytes overflows")))?;
        let layout = Layout::from_size_align(bytes, ALIGN)
            .map_err(|e| Error::Resource(format!("{bytes} bytes: {e}")))?;
        // SAFETY: layout has non-zero size.
        let ptr = unsafe { alloc::alloc(layout) };
        let ptr = NonNull::new(ptr)
            .ok_or_else(|| Error::Resource(format!("out of memory allocating {bytes} bytes")))?;
        Ok(Self {
            ptr,
            layout,
            count,
            element_size,
            first_touched: false,
        })
    }

    pub fn len_bytes(&self) -> usize {
        self.layout.size()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn element_size(&self) -> usize {
        self.element_size
    }

    pub fn as_ptr(&self) -> *const u8 {
        self.ptr.as_ptr()
    }

    pub fn as_mut_ptr(&mut self) -> *mut u8 {
        self.ptr.as_ptr()
    }

    /// The first byte of every object, or `None` if the buffer was not
    /// produced by [`first_touch_allocate`] (its bytes may be uninitialized).
    pub fn touched_bytes(&self) -> Option<Vec<u8>> {
        self.first_touched.then(|| {
            (0..self.count)
                // SAFETY: in bounds, and written by the first-touch pass.
                .map(|i| unsafe { self.ptr.as_ptr().add(i * self.element_size).read() })
                .collect()
        })
    }
}

impl Drop for RawBuffer {
    fn drop(&mut self) {
        // SAFETY: allocated with this layout in `allocate`.
        unsafe { alloc::dealloc(self.ptr.as_ptr(), self.layout) }
    }
}

impl fmt::Debug for RawBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RawBuffer")
            .field("count", &self.count)
            .field("element_size", &self.element_size)
            .field("first_touched", &self.first_touched)
            .finish()
    }
}

/// Contiguous range of objects touched by one worker.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TouchRange {
    pub worker: usize,
    pub objects: Range<usize>,
}

/// Plain allocation with no touching.
pub fn default_allocate(count: usize, element_size: usize) -> Result<RawBuffer> {
    RawBuffer::allocate(count, element_size)
}

/// Allocates `count` objects and has the executor's workers zero the first
/// byte of each object, worker k over the k-th contiguous static chunk.
pub fn first_touch_allocate(
    count: usize,
    element_size: usize,
    exec: &Executor,
) -> Result<RawBuffer> {
    first_touch_inner(count, element_size, exec, None)
}

/// [`first_touch_allocate`] that also reports which worker touched what.
pub fn first_touch_allocate_traced(
    count: usize,
    element_size: usize,
    exec: &Executor,
) -> Result<(RawBuffer, Vec<TouchRange>)> {
    let trace = Mutex::new(Vec::new());
    let buf = first_touch_inner(count, element_size, exec, Some(&trace))?;
    let mut ranges = trace.into_inner().unwrap_or_else(|e| e.into_inner());
    ranges.sort_by_key(|r: &TouchRange| r.objects.start);
    Ok((buf, ranges))
}

fn first_touch_inner(
    count: usize,
    element_size: usize,
    exec: &Executor,
    trace: Option<&Mutex<Vec<TouchRange>>>,
) -> Result<RawBuffer> {
    let mut buf = RawBuffer::allocate(count, element_size)?;
    let base = SendPtr(buf.as_mut_ptr());
    exec.for_each_static_chunk(count, |worker, objects| {
        let base = &base;
        for i in objects.clone() {
            // SAFETY: i < count, chunks are disjoint.
            unsafe { base.get().add(i * element_size).write_volatile(0) };
        }
        if let Some(trace) = trace {
            trace
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .push(TouchRange { worker, objects });
        }
    })?;
    buf.first_touched = true;
    Ok(buf)
}

struct SendPtr(*mut u8);
unsafe impl Sync for SendPtr {}

impl SendPtr {
    fn get(&self) -> *mut u8 {
        self.0
    }
}

/// Allocates with `allocator`, touching with `exec` for first-touch.
pub fn allocate(
    allocator: Allocator,
    count: usize,
    element_size: usize,
    exec: &Executor,
) -> Result<RawBuffer> {
    match allocator {
        Allocator::FirstTouch => first_touch_allocate(count, element_size, exec),
        Allocator::Default => default_allocate(count, element_size),
    }
}

/// A fully initialized typed array living in a [`RawBuffer`].
pub struct Buffer<T: Element> {
    raw: RawBuffer,
    len: usize,
    allocator: Allocator,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Element> Buffer<T> {
    /// Allocates `n` elements and writes `init(i)` to slot i in parallel,
    /// each worker filling its own static chunk.
    pub fn from_fn(
        exec: &Executor,
        allocator: Allocator,
        n: usize,
        init: impl Fn(usize) -> T + Sync,
    ) -> Result<Self> {
        let mut raw = allocate(allocator, n, std::mem::size_of::<T>(), exec)?;
        let base = SendPtr(raw.as_mut_ptr());
        exec.for_each_static_chunk(n, |_, range| {
            let base = base.get().cast::<T>();
            for i in range {
                // SAFETY: in bounds, aligned (64-byte base), chunks disjoint.
                unsafe { base.add(i).write(init(i)) };
            }
        })?;
        Ok(Self {
            raw,
            len: n,
            allocator,
            _marker: std::marker::PhantomData,
        })
    }

    pub fn allocator(&self) -> Allocator {
        self.allocator
    }

    pub fn raw(&self) -> &RawBuffer {
        &self.raw
    }
}

impl<T: Element> Deref for Buffer<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        // SAFETY: every slot was written in `from_fn`.
        unsafe { std::slice::from_raw_parts(self.raw.as_ptr().cast::<T>(), self.len) }
    }
}

impl<T: Element> DerefMut for Buffer<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        // SAFETY: as above, and we hold the only reference.
        unsafe { std::slice::from_raw_parts_mut(self.raw.as_mut_ptr().cast::<T>(), self.len) }
    }
}

impl<T: Element> fmt::Debug for Buffer<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Buffer")
            .field("len", &self.len)
            .field("allocator", &self.allocator)
            .finish()
    }
}

/// Outcome of [`pin_workers`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PinReport {
    pub pinned: bool,
    /// CPU each worker reports running on after pinning, indexed by worker.
    pub cpus: Vec<Option<usize>>,
    pub warnings: Vec<String>,
}

/// Binds worker k to logical CPU k (compact order). Failures are recorded
/// as warnings and never abort the run.
pub fn pin_workers(exec: &Executor) -> PinReport {
    let threads = exec.threads();
    let results: Mutex<Vec<(usize, std::result::Result<usize, String>)>> = Mutex::new(Vec::new());
    let outcome = exec.on_each_worker(|k| {
        let r = affinity::pin_current_thread(k);
        results
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push((k, r));
    });
    let mut report = PinReport {
        pinned: true,
        cpus: vec![None; threads],
        warnings: Vec::new(),
    };
    if let Err(e) = outcome {
        report.pinned = false;
        report.warnings.push(format!("pinning failed: {e}"));
        return report;
    }
    let mut results = results.into_inner().unwrap_or_else(|e| e.into_inner());
    results.sort_by_key(|r| r.0);
    for (k, r) in results {
        match r {
            Ok(cpu) => report.cpus[k] = Some(cpu),
            Err(msg) => {
                report.pinned = false;
                report.warnings.push(format!("worker {k}: {msg}"));
            }
        }
    }
    report
}

#[cfg(target_os = "linux")]
mod affinity {
    /// Pins the calling thread to `cpu` and reads the mask back.
    pub(super) fn pin_current_thread(cpu: usize) -> Result<usize, String> {
        if cpu >= libc::CPU_SETSIZE as usize {
            return Err(format!("cpu {cpu} beyond CPU_SETSIZE"));
        }
        // SAFETY: cpu_set_t is plain data; calls operate on the current thread.
        unsafe {
            let mut set: libc::cpu_set_t = std::mem::zeroed();
            libc::CPU_SET(cpu, &mut set);
            if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
                return Err(format!(
                    "sched_setaffinity(cpu {cpu}): {}",
                    std::io::Error::last_os_error()
                ));
            }
            let mut back: libc::cpu_set_t = std::mem::zeroed();
            if libc::sched_getaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &mut back) != 0 {
                return Err(format!(
                    "sched_getaffinity: {}",
                    std::io::Error::last_os_error()
                ));
            }
            let bound: Vec<usize> = (0..libc::CPU_SETSIZE as usize)
                .filter(|&c| libc::CPU_ISSET(c, &back))
                .collect();
            match bound.as_slice() {
                [only] => Ok(*only),
                other => Err(format!("affinity mask reads back as {other:?}")),
            }
        }
    }
}

#[cfg(not(target_os = "linux"))]
mod affinity {
    pub(super) fn pin_current_thread(_cpu: usize) -> Result<usize, String> {
        Err("thread pinning is not supported on this platform".into())
    }
}
