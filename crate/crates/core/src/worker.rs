//! Per-worker state.
//!
//! The state a dispatch needs is split along the concurrency boundary the
//! watchdog imposes: [`WorkerShared`] holds the fields a watchdog tick may
//! read or write concurrently (exec flag, program start time, dispatch and
//! termination generations) with acquire/release atomics; [`WorkerLane`]
//! holds everything else (cleanup registry, shadow stack usage, lock flag,
//! saved context) and is only ever touched by the thread currently driving
//! the worker.

use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::flag::FlagCell;
use crate::resource::{CleanupRecord, RecordKind};

/// Worker fields shared with the watchdog.
#[derive(Debug)]
pub struct WorkerShared {
    worker_id: usize,
    flag: FlagCell,
    /// Monotonic ns (host epoch) at which the current dispatch started.
    prog_start_ns: AtomicU64,
    /// Generation counter, bumped at every dispatch start. Generation 0
    /// means "never dispatched".
    dispatch_seq: AtomicU64,
    /// Generation for which termination has been requested; equal to
    /// `dispatch_seq` iff the current dispatch must be unwound.
    term_seq: AtomicU64,
    /// Extension currently dispatching, if any.
    current_extension: Mutex<Option<String>>,
}

impl WorkerShared {
    pub(crate) fn new(worker_id: usize) -> Arc<Self> {
        Arc::new(Self {
            worker_id,
            flag: FlagCell::new(),
            prog_start_ns: AtomicU64::new(0),
            dispatch_seq: AtomicU64::new(0),
            term_seq: AtomicU64::new(0),
            current_extension: Mutex::new(None),
        })
    }

    pub fn worker_id(&self) -> usize {
        self.worker_id
    }

    pub fn flag(&self) -> &FlagCell {
        &self.flag
    }

    pub fn prog_start_ns(&self) -> u64 {
        self.prog_start_ns.load(Ordering::Acquire)
    }

    pub fn dispatch_seq(&self) -> u64 {
        self.dispatch_seq.load(Ordering::Acquire)
    }

    pub fn current_extension(&self) -> Option<String> {
        self.current_extension.lock().clone()
    }

    /// True iff the watchdog has requested termination of the dispatch
    /// currently running. Checked at every preemption point.
    pub fn termination_requested(&self) -> bool {
        let seq = self.dispatch_seq.load(Ordering::Acquire);
        seq != 0 && self.term_seq.load(Ordering::Acquire) == seq
    }

    /// Marks the current dispatch for termination. Returns false when that
    /// dispatch was already marked (the watchdog fires at most once per
    /// dispatch).
    pub(crate) fn request_termination(&self) -> bool {
        let seq = self.dispatch_seq.load(Ordering::Acquire);
        if seq == 0 {
            return false;
        }
        self.term_seq.swap(seq, Ordering::AcqRel) != seq
    }

    pub(crate) fn begin_dispatch(&self, extension_id: &str, now_ns: u64) -> u64 {
        let seq = self.dispatch_seq.fetch_add(1, Ordering::AcqRel) + 1;
        *self.current_extension.lock() = Some(extension_id.to_string());
        self.prog_start_ns.store(now_ns, Ordering::Release);
        self.flag.begin_dispatch();
        seq
    }

    pub(crate) fn end_dispatch(&self) {
        self.flag.end_dispatch();
        *self.current_extension.lock() = None;
        self.prog_start_ns.store(0, Ordering::Release);
    }
}

/// Worker fields owned by the dispatching thread.
///
/// `shadow_stack_usage` is the framework-maintained account of extension
/// stack consumption; `registry` is the per-worker LIFO cleanup buffer.
#[derive(Debug)]
pub struct WorkerLane {
    shared: Arc<WorkerShared>,
    shadow_stack_usage: Cell<u64>,
    lock_held: Cell<bool>,
    saved_context: Cell<Option<u64>>,
    in_panic_path: Cell<bool>,
    next_seq: Cell<u64>,
    registry: RefCell<Vec<CleanupRecord>>,
    registry_high_water: Cell<usize>,
    release_trace: RefCell<Vec<(RecordKind, u64)>>,
}

impl WorkerLane {
    pub(crate) fn new(shared: Arc<WorkerShared>) -> Self {
        Self {
            shared,
            shadow_stack_usage: Cell::new(0),
            lock_held: Cell::new(false),
            saved_context: Cell::new(None),
            in_panic_path: Cell::new(false),
            next_seq: Cell::new(0),
            registry: RefCell::new(Vec::new()),
            registry_high_water: Cell::new(0),
            release_trace: RefCell::new(Vec::new()),
        }
    }

    pub fn shared(&self) -> &Arc<WorkerShared> {
        &self.shared
    }

    pub fn worker_id(&self) -> usize {
        self.shared.worker_id()
    }

    pub fn shadow_stack_usage(&self) -> u64 {
        self.shadow_stack_usage.get()
    }

    pub fn lock_held(&self) -> bool {
        self.lock_held.get()
    }

    pub(crate) fn set_lock_held(&self, held: bool) {
        self.lock_held.set(held);
    }

    pub fn registry_len(&self) -> usize {
        self.registry.borrow().len()
    }

    /// Largest registry depth seen since the last reset; benchmarks report
    /// this.
    pub fn registry_high_water(&self) -> usize {
        self.registry_high_water.get()
    }

    pub fn reset_high_water(&self) {
        self.registry_high_water.set(0);
    }

    pub fn saved_context(&self) -> Option<u64> {
        self.saved_context.get()
    }

    pub(crate) fn begin_dispatch(&self, extension_id: &str, entry_frame: u64, now_ns: u64) {
        debug_assert!(self.registry.borrow().is_empty(), "registry not drained");
        let seq = self.shared.begin_dispatch(extension_id, now_ns);
        // The opaque token standing for the pre-dispatch continuation: the
        // dispatch generation doubles as the unwind-boundary identity.
        self.saved_context.set(Some(seq));
        self.shadow_stack_usage.set(entry_frame);
        self.lock_held.set(false);
        self.release_trace.borrow_mut().clear();
    }

    /// Restores the saved context: stack accounting and registry are reset
    /// as if the extension had returned, and the worker goes idle.
    pub(crate) fn restore_context(&self) {
        debug_assert!(self.registry.borrow().is_empty(), "registry not drained");
        self.shadow_stack_usage.set(0);
        self.lock_held.set(false);
        self.saved_context.set(None);
        self.shared.end_dispatch();
    }

    fn bump_seq(&self) -> u64 {
        let seq = self.next_seq.get() + 1;
        self.next_seq.set(seq);
        seq
    }

    /// Pushes a record onto the cleanup registry and returns its sequence
    /// number. The panic path never allocates records.
    pub(crate) fn record_resource(&self, kind: RecordKind, release: Box<dyn FnOnce()>) -> u64 {
        assert!(
            !self.in_panic_path.get(),
            "panic path allocated a cleanup record (framework bug)"
        );
        let seq = self.bump_seq();
        let mut registry = self.registry.borrow_mut();
        registry.push(CleanupRecord {
            kind,
            seq,
            release: Some(release),
        });
        if registry.len() > self.registry_high_water.get() {
            self.registry_high_water.set(registry.len());
        }
        seq
    }

    /// Pops the top record, which must carry `seq` (stack discipline), and
    /// runs its release action.
    pub(crate) fn pop_resource(&self, seq: u64) {
        let record = {
            let mut registry = self.registry.borrow_mut();
            let record = registry
                .pop()
                .expect("pop from an empty cleanup registry (framework bug)");
            assert_eq!(
                record.seq, seq,
                "pop mismatch: expected top record {seq}, found {} (framework bug)",
                record.seq
            );
            record
        };
        if let Some(release) = record.release {
            release();
        }
    }

    /// Drains the registry in LIFO order, running every release action.
    /// Returns the number of records released. Infallible: must not panic,
    /// must not take locks, must not allocate records.
    pub(crate) fn release_all(&self) -> usize {
        let mut released = 0;
        loop {
            let record = self.registry.borrow_mut().pop();
            let Some(mut record) = record else { break };
            if let Some(release) = record.release.take() {
                release();
            }
            self.release_trace
                .borrow_mut()
                .push((record.kind, record.seq));
            released += 1;
        }
        self.lock_held.set(false);
        released
    }

    pub(crate) fn set_in_panic_path(&self, on: bool) {
        self.in_panic_path.set(on);
    }

    pub fn in_panic_path(&self) -> bool {
        self.in_panic_path.get()
    }

    /// Release order of the most recent panic cleanup, `(kind, acquisition
    /// seq)` in the order releases ran.
    pub fn release_trace(&self) -> Vec<(RecordKind, u64)> {
        self.release_trace.borrow().clone()
    }

    pub(crate) fn add_stack(&self, frame_bytes: u64) {
        self.shadow_stack_usage
            .set(self.shadow_stack_usage.get() + frame_bytes);
    }

    pub(crate) fn sub_stack(&self, frame_bytes: u64) {
        self.shadow_stack_usage
            .set(self.shadow_stack_usage.get().saturating_sub(frame_bytes));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_is_lifo_and_release_all_drains() {
        let lane = WorkerLane::new(WorkerShared::new(0));
        let a = lane.record_resource(RecordKind::Lock("a".into()), Box::new(|| {}));
        let b = lane.record_resource(
            RecordKind::MapValueRef {
                map_id: "m".into(),
                key: vec![1],
            },
            Box::new(|| {}),
        );
        assert_eq!(lane.registry_len(), 2);
        assert_eq!(lane.registry_high_water(), 2);
        assert_eq!(lane.release_all(), 2);
        assert_eq!(lane.registry_len(), 0);
        let trace = lane.release_trace();
        assert_eq!(trace[0].1, b, "last acquired releases first");
        assert_eq!(trace[1].1, a);
    }

    #[test]
    #[should_panic(expected = "pop mismatch")]
    fn pop_out_of_order_asserts() {
        let lane = WorkerLane::new(WorkerShared::new(0));
        let a = lane.record_resource(RecordKind::Lock("a".into()), Box::new(|| {}));
        let _b = lane.record_resource(RecordKind::Lock("b".into()), Box::new(|| {}));
        lane.pop_resource(a);
    }

    #[test]
    fn balanced_push_pop_leaves_registry_empty() {
        let lane = WorkerLane::new(WorkerShared::new(0));
        for _ in 0..1000 {
            let seq = lane.record_resource(RecordKind::Refcount("o".into()), Box::new(|| {}));
            lane.pop_resource(seq);
        }
        assert_eq!(lane.registry_len(), 0);
        assert_eq!(lane.registry_high_water(), 1);
    }

    #[test]
    fn termination_request_is_once_per_dispatch() {
        let shared = WorkerShared::new(1);
        assert!(!shared.request_termination(), "no dispatch yet");
        shared.begin_dispatch("e", 5);
        assert!(shared.request_termination());
        assert!(!shared.request_termination(), "second request collapses");
        assert!(shared.termination_requested());
        shared.end_dispatch();
        shared.begin_dispatch("e", 9);
        assert!(
            !shared.termination_requested(),
            "request does not leak into the next dispatch"
        );
        shared.end_dispatch();
    }
}
