//! A fixed-size pool of persistent worker threads with a blocking broadcast.

use std::any::Any;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;

use crate::error::{Error, Result};

type Job = dyn Fn(usize) + Sync;

#[derive(Clone, Copy)]
struct JobPtr(*const Job);

// The pointee is only dereferenced while `broadcast` is blocked waiting for
// every worker to finish, so it outlives all uses.
unsafe impl Send for JobPtr {}

struct State {
    epoch: u64,
    job: Option<JobPtr>,
    remaining: usize,
    panics: Vec<String>,
    shutdown: bool,
}

struct Shared {
    state: Mutex<State>,
    work: Condvar,
    done: Condvar,
    active: AtomicUsize,
    high_water: AtomicUsize,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// Exactly `threads` workers, spawned once and parked between jobs.
pub struct WorkerPool {
    shared: Arc<Shared>,
    handles: Vec<JoinHandle<()>>,
    submit: Mutex<()>,
}

impl WorkerPool {
    pub fn new(threads: usize) -> Result<Self> {
        if threads == 0 {
            return Err(Error::InvalidArgument(
                "worker pool needs at least one thread".into(),
            ));
        }
        let shared = Arc::new(Shared {
            state: Mutex::new(State {
                epoch: 0,
                job: None,
                remaining: 0,
                panics: Vec::new(),
                shutdown: false,
            }),
            work: Condvar::new(),
            done: Condvar::new(),
            active: AtomicUsize::new(0),
            high_water: AtomicUsize::new(0),
        });
        let mut pool = Self {
            shared,
            handles: Vec::with_capacity(threads),
            submit: Mutex::new(()),
        };
        for index in 0..threads {
            let shared = Arc::clone(&pool.shared);
            let handle = std::thread::Builder::new()
                .name(format!("scalebench-worker-{index}"))
                .spawn(move || worker_loop(&shared, index))
                .map_err(|e| Error::Resource(format!("spawning worker {index}: {e}")))?;
            pool.handles.push(handle);
        }
        Ok(pool)
    }

    pub fn threads(&self) -> usize {
        self.handles.len()
    }

    /// Runs `job(worker_index)` once on every worker and blocks until all of
    /// them have returned. Panics inside the job are collected and reported
    /// as a single execution error.
    pub fn broadcast<F>(&self, job: F) -> Result<()>
    where
        F: Fn(usize) + Sync,
    {
        let _submit = self.submit.lock().unwrap_or_else(|e| e.into_inner());
        let job_ref: &(dyn Fn(usize) + Sync + '_) = &job;
        // SAFETY: erases the borrow's lifetime; we do not return before
        // `remaining` drops to zero, i.e. before the last use of the pointer.
        let ptr: *const Job =
            unsafe { std::mem::transmute::<&(dyn Fn(usize) + Sync + '_), &'static Job>(job_ref) };

        let mut state = self.shared.lock();
        state.job = Some(JobPtr(ptr));
        state.remaining = self.handles.len();
        state.panics.clear();
        state.epoch += 1;
        self.shared.work.notify_all();
        while state.remaining > 0 {
            state = self
                .shared
                .done
                .wait(state)
                .unwrap_or_else(|e| e.into_inner());
        }
        state.job = None;
        let panics = std::mem::take(&mut state.panics);
        drop(state);

        if panics.is_empty() {
            Ok(())
        } else {
            Err(Error::Execution(panics.join("; ")))
        }
    }

    /// The largest number of workers ever observed inside a job at once.
    pub fn high_water_mark(&self) -> usize {
        self.shared.high_water.load(Ordering::SeqCst)
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        self.shared.lock().shutdown = true;
        self.shared.work.notify_all();
        for handle in self.handles.drain(..) {
            let _ = handle.join();
        }
    }
}

fn worker_loop(shared: &Shared, index: usize) {
    let mut seen = 0;
    loop {
        let job = {
            let mut state = shared.lock();
            while state.epoch == seen && !state.shutdown {
                state = shared.work.wait(state).unwrap_or_else(|e| e.into_inner());
            }
            if state.shutdown {
                return;
            }
            seen = state.epoch;
            state.job.expect("job published with epoch")
        };

        let now_active = shared.active.fetch_add(1, Ordering::SeqCst) + 1;
        shared.high_water.fetch_max(now_active, Ordering::SeqCst);
        // SAFETY: see `JobPtr`.
        let outcome = catch_unwind(AssertUnwindSafe(|| unsafe { (*job.0)(index) }));
        shared.active.fetch_sub(1, Ordering::SeqCst);

        let mut state = shared.lock();
        if let Err(payload) = outcome {
            state.panics.push(format!(
                "worker {index} panicked: {}",
                panic_message(&*payload)
            ));
        }
        state.remaining -= 1;
        if state.remaining == 0 {
            shared.done.notify_all();
        }
    }
}

pub(crate) fn panic_message(payload: &(dyn Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_owned()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".to_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_worker_runs_once() {
        let pool = WorkerPool::new(4).unwrap();
        let hits: Vec<AtomicUsize> = (0..4).map(|_| AtomicUsize::new(0)).collect();
        for _ in 0..25 {
            pool.broadcast(|k| {
                hits[k].fetch_add(1, Ordering::Relaxed);
            })
            .unwrap();
        }
        for h in &hits {
            assert_eq!(h.load(Ordering::Relaxed), 25);
        }
        assert!(pool.high_water_mark() <= 4);
    }

    #[test]
    fn panics_become_errors_and_pool_survives() {
        let pool = WorkerPool::new(3).unwrap();
        let err = pool
            .broadcast(|k| {
                if k == 1 {
                    panic!("boom");
                }
            })
            .unwrap_err();
        assert!(err.to_string().contains("worker 1 panicked: boom"), "{err}");
        let count = AtomicUsize::new(0);
        pool.broadcast(|_| {
            count.fetch_add(1, Ordering::Relaxed);
        })
        .unwrap();
        assert_eq!(count.load(Ordering::Relaxed), 3);
    }

    #[test]
    fn zero_threads_rejected() {
        assert!(WorkerPool::new(0).is_err());
    }
}
