//! The dispatch path: context setup, the extension-facing helper surface,
//! and the panic path.
//!
//! A dispatch pins an extension to a worker lane, accounts its entry frame,
//! stamps the start time, raises the exec flag, and calls the entry inside
//! an unwind boundary. Returning normally restores the lane. Any panic in
//! extension code or raised by a safety check lands back here: the panic
//! path drains the cleanup registry (LIFO), appends one ring-buffer record,
//! restores the lane as if the extension had returned, and the extension is
//! crash-stopped before the dispatch reports `Panicked`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use crate::extension::Verdict;
use crate::host::{Host, HostError, LoadedExt};
use crate::map::MapError;
use crate::panic::{self, PanicReason, PanicRecord};
use crate::resource::{LockGuard, MapValueGuard, RecordKind, RefGuard};
use crate::typed::{transmute_checked, TypeDescriptor, TypedView};
use crate::view::{BoundedView, PacketBuf};
use crate::worker::WorkerLane;

/// How one dispatch ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DispatchOutcome {
    Returned(Verdict),
    /// The dispatch panicked; the verdict is the program kind's default
    /// error verdict.
    Panicked(PanicRecord, Verdict),
}

impl DispatchOutcome {
    pub fn verdict(&self) -> Verdict {
        match self {
            DispatchOutcome::Returned(v) => *v,
            DispatchOutcome::Panicked(_, v) => *v,
        }
    }

    pub fn panicked(&self) -> Option<&PanicRecord> {
        match self {
            DispatchOutcome::Panicked(rec, _) => Some(rec),
            DispatchOutcome::Returned(_) => None,
        }
    }
}

/// Loop control for [`ExtContext::repeat`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopFlow {
    Continue,
    Break,
}

/// The context handed to an extension entry. Every interaction with host
/// state (maps, locks, statics, the packet) goes through it; helpers wrap
/// themselves in the exec-flag protocol and record acquired resources.
pub struct ExtContext<'a> {
    host: &'a Host,
    lane: &'a WorkerLane,
    ext: &'a LoadedExt,
    packet: Option<PacketBuf>,
}

impl<'a> ExtContext<'a> {
    pub fn worker_id(&self) -> usize {
        self.lane.worker_id()
    }

    pub fn extension_id(&self) -> &str {
        self.ext.extension_id()
    }

    /// The packet frame for packet-ingress programs.
    pub fn packet(&self) -> BoundedView {
        self.packet
            .as_ref()
            .expect("no packet in this dispatch (framework misuse)")
            .view()
    }

    pub fn has_packet(&self) -> bool {
        self.packet.is_some()
    }

    /// Grows or shrinks the packet frame (a helper; zero-fills on grow).
    /// Views taken before a shrink go stale.
    pub fn resize_packet(&self, new_len: usize) {
        let buf = self
            .packet
            .as_ref()
            .expect("no packet in this dispatch (framework misuse)");
        self.in_helper(|| buf.resize(new_len));
    }

    /// Raises a `Terminated` panic if the watchdog has marked this
    /// dispatch. Every preemption point funnels through here.
    fn check_preempt(&self) {
        if self.lane.shared().termination_requested() {
            panic::raise(
                PanicReason::Terminated,
                "termination requested by the watchdog",
            );
        }
    }

    /// Runs `f` as a helper: flag 1→2 on entry; on exit either 2→1 or,
    /// when termination was requested meanwhile, the panic path.
    pub fn in_helper<R>(&self, f: impl FnOnce() -> R) -> R {
        self.helper_enter();
        let result = f();
        self.helper_exit();
        result
    }

    fn helper_enter(&self) {
        // A helper call is an extension-level call site, so it doubles as a
        // preemption point.
        self.check_preempt();
        self.lane.shared().flag().helper_enter();
    }

    fn helper_exit(&self) {
        let flag = self.lane.shared().flag();
        if !flag.try_helper_exit() {
            // The watchdog moved the flag to TerminationRequested while the
            // helper ran; honor it now.
            panic::raise(
                PanicReason::Terminated,
                "termination deferred during helper call",
            );
        }
        if self.lane.shared().termination_requested() {
            panic::raise(
                PanicReason::Terminated,
                "termination requested during helper call",
            );
        }
    }

    /// A framework-provided test helper that stalls inside helper context.
    pub fn stall_in_helper(&self, dur: Duration) {
        self.in_helper(|| std::thread::sleep(dur));
    }

    /// Framework iteration combinator; the loop's preemption point. Returns
    /// the number of completed iterations.
    pub fn repeat(&self, mut body: impl FnMut(u64) -> LoopFlow) -> u64 {
        let mut i = 0u64;
        loop {
            self.check_preempt();
            match body(i) {
                LoopFlow::Continue => i += 1,
                LoopFlow::Break => return i + 1,
            }
        }
    }

    /// Runtime stack check before an extension-level call: panics
    /// `StackOverflowCheck` if the callee's frame would push usage past the
    /// extension threshold, otherwise accounts the frame until the returned
    /// guard drops.
    pub fn enter_frame(&self, frame_bytes: u64) -> FrameGuard<'_> {
        self.check_preempt();
        let usage = self.lane.shadow_stack_usage();
        let threshold = self.host.config().stack_threshold_bytes();
        if usage + frame_bytes > threshold {
            panic::raise(
                PanicReason::StackOverflowCheck,
                format!(
                    "stack check: {usage} + {frame_bytes} bytes exceeds the {threshold}-byte threshold"
                ),
            );
        }
        self.lane.add_stack(frame_bytes);
        FrameGuard {
            lane: self.lane,
            frame_bytes,
        }
    }

    /// Explicit extension panic through the framework surface.
    pub fn explicit_panic(&self, message: &str) -> ! {
        panic::raise(PanicReason::ExplicitPanic, message.to_string())
    }

    fn attached_map(&self, map_id: &str) -> &Arc<crate::map::SharedMap> {
        self.ext.attached_map(map_id).unwrap_or_else(|| {
            panic!(
                "extension {} is not attached to map {map_id} (framework misuse)",
                self.ext.extension_id()
            )
        })
    }

    /// Looks `key` up in an attached map. A hit returns a value guard,
    /// recorded in the cleanup registry, granting access to exactly the
    /// map's declared value size.
    pub fn map_lookup(&self, map_id: &str, key: &[u8]) -> Option<MapValueGuard<'_>> {
        let map = self.attached_map(map_id);
        self.in_helper(|| {
            map.lookup(self.lane.worker_id(), key).map(|cell| {
                let held = Arc::clone(&cell);
                let seq = self.lane.record_resource(
                    RecordKind::MapValueRef {
                        map_id: map_id.to_string(),
                        key: key.to_vec(),
                    },
                    Box::new(move || drop(held)),
                );
                MapValueGuard::new(self.lane, seq, cell)
            })
        })
    }

    /// Inserts or overwrites `key` in an attached map.
    pub fn map_update(&self, map_id: &str, key: &[u8], value: &[u8]) -> Result<(), MapError> {
        let map = self.attached_map(map_id);
        self.in_helper(|| map.update(self.lane.worker_id(), key, value))
    }

    /// Deletes `key` from an attached map; returns whether it existed.
    /// Storage is reclaimed only after all live value guards drop.
    pub fn map_delete(&self, map_id: &str, key: &[u8]) -> bool {
        let map = self.attached_map(map_id);
        self.in_helper(|| map.delete(self.lane.worker_id(), key))
    }

    /// Acquires a host spinlock. A worker may hold at most one lock: a
    /// second acquire raises `DoubleLock` (and the panic path releases the
    /// first).
    pub fn acquire_spinlock(&self, lock_id: &str) -> LockGuard<'_> {
        let cell = self.host.spinlock(lock_id);
        self.in_helper(|| {
            if self.lane.lock_held() {
                panic::raise(
                    PanicReason::DoubleLock,
                    format!("acquire of {lock_id} while already holding a lock"),
                );
            }
            let worker_id = self.lane.worker_id();
            cell.lock(worker_id);
            self.lane.set_lock_held(true);
            let release_cell = Arc::clone(&cell);
            let seq = self.lane.record_resource(
                RecordKind::Lock(lock_id.to_string()),
                Box::new(move || release_cell.unlock(worker_id)),
            );
            LockGuard::new(self.lane, seq, lock_id.to_string())
        })
    }

    /// Takes a reference on a host demo object; the guard (or the panic
    /// path) gives it back.
    pub fn ref_acquire(&self, object_id: &str) -> RefGuard<'_> {
        let object = self.host.ref_object(object_id);
        self.in_helper(|| {
            object.acquire();
            let release_obj = Arc::clone(&object);
            let seq = self.lane.record_resource(
                RecordKind::Refcount(object_id.to_string()),
                Box::new(move || release_obj.release()),
            );
            RefGuard::new(self.lane, seq, object)
        })
    }

    /// Resolves a host-global atomic static once; reads and adds on the
    /// handle are direct, with no helper wrapping.
    pub fn static_handle(&self, var_id: &str) -> Result<Arc<std::sync::atomic::AtomicI64>, HostError> {
        self.host.atomic_static(var_id)
    }

    pub fn static_read(&self, var_id: &str) -> Result<i64, HostError> {
        Ok(self.static_handle(var_id)?.load(Ordering::SeqCst))
    }

    /// Adds `delta` and returns the new value.
    pub fn static_add(&self, var_id: &str, delta: i64) -> Result<i64, HostError> {
        Ok(self.static_handle(var_id)?.fetch_add(delta, Ordering::SeqCst) + delta)
    }

    /// A registered record layout, by id.
    pub fn descriptor(&self, type_id: &str) -> Arc<TypeDescriptor> {
        self.host
            .descriptors()
            .get(type_id)
            .unwrap_or_else(|| panic!("descriptor {type_id} is not registered (framework misuse)"))
    }

    /// Casts the head of `view` to a registered layout; panics
    /// `TransmuteViolation` if the record does not fit.
    pub fn transmute(&self, view: &BoundedView, type_id: &str) -> TypedView {
        transmute_checked(view, &self.descriptor(type_id))
    }
}

/// Accounts one extension-level call frame; releases on drop.
pub struct FrameGuard<'a> {
    lane: &'a WorkerLane,
    frame_bytes: u64,
}

impl Drop for FrameGuard<'_> {
    fn drop(&mut self) {
        if !std::thread::panicking() {
            self.lane.sub_stack(self.frame_bytes);
        }
    }
}

/// Executes `ext` on `lane`. Called with the lane checked out.
pub(crate) fn run_dispatch(
    host: &Host,
    lane: &WorkerLane,
    ext: Arc<LoadedExt>,
    packet: Option<PacketBuf>,
) -> DispatchOutcome {
    lane.begin_dispatch(ext.extension_id(), ext.entry_frame_bytes(), host.now_ns());
    let scope = panic::enter_dispatch_scope(Arc::clone(lane.shared()));
    let ctx = ExtContext {
        host,
        lane,
        ext: &ext,
        packet,
    };
    let entry = ext.entry();
    let result = catch_unwind(AssertUnwindSafe(|| entry(&ctx)));
    drop(scope);
    match result {
        Ok(verdict) => {
            debug_assert_eq!(lane.registry_len(), 0, "guards cannot outlive the entry");
            lane.restore_context();
            ext.dispatch_done();
            DispatchOutcome::Returned(verdict)
        }
        Err(payload) => {
            let (reason, message) = match panic::classify_payload(payload) {
                Some(rm) => rm,
                None => {
                    // A payload that is neither the host signal nor a plain
                    // panic message: the unwinding machinery is in a state
                    // the framework does not understand. Stop hard.
                    eprintln!(
                        "fatal: foreign panic payload reached the dispatcher on worker {}",
                        lane.worker_id()
                    );
                    std::process::abort();
                }
            };
            let record = panic_path(host, lane, &ext, reason, message);
            lane.restore_context();
            ext.dispatch_done();
            // Crash-stop: the panicked extension (already quarantined) and
            // every extension sharing its maps are unloaded. Runs after the
            // panic path so the cleanup itself stays lock-free.
            host.crash_stop(ext.extension_id());
            DispatchOutcome::Panicked(record, ext.program_kind().panicked_default())
        }
    }
}

/// The panic handler: releases recorded resources in LIFO order, appends
/// exactly one ring-buffer record, and quarantines the extension.
/// Infallible by construction: takes no locks, allocates no records, cannot
/// itself panic.
fn panic_path(
    host: &Host,
    lane: &WorkerLane,
    ext: &LoadedExt,
    reason: PanicReason,
    message: String,
) -> PanicRecord {
    lane.set_in_panic_path(true);
    lane.release_all();
    let record = PanicRecord {
        extension_id: ext.extension_id().to_string(),
        worker_id: lane.worker_id(),
        reason,
        message,
        timestamp_ns: host.now_ns(),
    };
    host.ring().append(record.clone());
    ext.quarantine();
    lane.set_in_panic_path(false);
    record
}
