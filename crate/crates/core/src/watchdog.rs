//! Per-worker watchdog timers and the termination protocol.
//!
//! One timer per worker, armed for the host's lifetime and re-armed every
//! period, so the extension hot path never touches timer setup. A tick
//! compares the running dispatch's start time against the termination
//! timeout and acts by the tristate protocol: interrupt extension code,
//! defer while a helper or the panic handler runs, and never fire twice for
//! one dispatch.
//!
//! Interruption of extension code is cooperative here: a tick marks the
//! dispatch and the mark is honored at the next preemption point (any
//! extension-level call site or framework loop iteration), which diverts
//! the worker into the panic path. See `docs/termination.md` for how this
//! stands in for a hardware-timer register overwrite and for what it
//! demands of looping extensions.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use crate::flag::ExecFlag;
use crate::worker::WorkerShared;

/// What a single watchdog tick did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TickAction {
    /// Nothing to do: worker idle, dispatch within budget, or termination
    /// already requested.
    None,
    /// The dispatch ran over while in extension code; it was marked for
    /// unwinding and the next preemption point takes the panic path.
    ForcedUnwind,
    /// The dispatch ran over while in a helper or the panic handler;
    /// termination is deferred to helper exit (flag 2 → 3).
    Deferred,
}

/// One recorded tick, for trace audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TickEvent {
    pub at_ns: u64,
    pub worker_id: usize,
    /// Flag observed at the start of the tick; `None` = idle.
    pub flag_seen: Option<ExecFlag>,
    pub action: TickAction,
}

/// One watchdog tick over `shared`, at monotonic time `now_ns`.
pub fn tick(shared: &WorkerShared, now_ns: u64, termination_timeout: Duration) -> TickAction {
    let seq = shared.dispatch_seq();
    let Some(flag) = shared.flag().load() else {
        return TickAction::None;
    };
    let started = shared.prog_start_ns();
    if started == 0 {
        // Raced with dispatch teardown.
        return TickAction::None;
    }
    let elapsed = now_ns.saturating_sub(started);
    if elapsed <= termination_timeout.as_nanos() as u64 {
        return TickAction::None;
    }
    // Re-check that the dispatch we measured is still the one running; a
    // stale mark would otherwise target a finished dispatch (harmless but
    // noisy).
    if shared.dispatch_seq() != seq {
        return TickAction::None;
    }
    match flag {
        ExecFlag::ExtensionCode => {
            if shared.request_termination() {
                TickAction::ForcedUnwind
            } else {
                TickAction::None
            }
        }
        ExecFlag::HelperOrPanic => {
            if shared.flag().request_termination_in_helper() {
                shared.request_termination();
                TickAction::Deferred
            } else {
                TickAction::None
            }
        }
        ExecFlag::TerminationRequested => TickAction::None,
    }
}

/// The armed timers: one thread per worker plus their event logs.
pub(crate) struct WatchdogSet {
    stop: Arc<AtomicBool>,
    handles: Vec<JoinHandle<()>>,
    events: Vec<Arc<Mutex<Vec<TickEvent>>>>,
    record_idle: Arc<AtomicBool>,
}

impl WatchdogSet {
    /// Spawns one periodic timer per worker. Timers stay armed until
    /// [`WatchdogSet::disarm`], even while workers are idle.
    pub(crate) fn arm(
        workers: &[Arc<WorkerShared>],
        epoch: Instant,
        period: Duration,
        termination_timeout: Duration,
    ) -> WatchdogSet {
        let stop = Arc::new(AtomicBool::new(false));
        let record_idle = Arc::new(AtomicBool::new(false));
        let mut handles = Vec::with_capacity(workers.len());
        let mut events = Vec::with_capacity(workers.len());
        for shared in workers {
            let shared = Arc::clone(shared);
            let stop = Arc::clone(&stop);
            let record_idle = Arc::clone(&record_idle);
            let log = Arc::new(Mutex::new(Vec::new()));
            events.push(Arc::clone(&log));
            let handle = std::thread::Builder::new()
                .name(format!("watchdog-{}", shared.worker_id()))
                .spawn(move || loop {
                    std::thread::sleep(period);
                    if stop.load(Ordering::Acquire) {
                        break;
                    }
                    let now_ns = epoch.elapsed().as_nanos() as u64;
                    let flag_seen = shared.flag().load();
                    let action = tick(&shared, now_ns, termination_timeout);
                    if action != TickAction::None || record_idle.load(Ordering::Relaxed) {
                        log.lock().push(TickEvent {
                            at_ns: now_ns,
                            worker_id: shared.worker_id(),
                            flag_seen,
                            action,
                        });
                    }
                })
                .expect("spawn watchdog thread");
            handles.push(handle);
        }
        WatchdogSet {
            stop,
            handles,
            events,
            record_idle,
        }
    }

    /// Stops the timers and waits for in-flight ticks to finish.
    pub(crate) fn disarm(self) -> Vec<Vec<TickEvent>> {
        self.stop.store(true, Ordering::Release);
        for handle in self.handles {
            let _ = handle.join();
        }
        self.events.iter().map(|log| log.lock().clone()).collect()
    }

    /// When set, `None` ticks are recorded too (idle soak audits).
    pub(crate) fn set_record_idle(&self, on: bool) {
        self.record_idle.store(on, Ordering::Relaxed);
    }

    pub(crate) fn events(&self, worker_id: usize) -> Vec<TickEvent> {
        self.events
            .get(worker_id)
            .map(|log| log.lock().clone())
            .unwrap_or_default()
    }

    pub(crate) fn all_events(&self) -> Vec<TickEvent> {
        let mut all: Vec<TickEvent> = self
            .events
            .iter()
            .flat_map(|log| log.lock().clone())
            .collect();
        all.sort_by_key(|e| e.at_ns);
        all
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idle_worker_ticks_to_none() {
        let shared = WorkerShared::new(0);
        assert_eq!(tick(&shared, 1_000_000_000, Duration::from_millis(10)), TickAction::None);
    }

    #[test]
    fn extension_over_budget_is_marked_once() {
        let shared = WorkerShared::new(0);
        shared.begin_dispatch("e", 1_000);
        let late = 1_000 + 20_000_000;
        assert_eq!(
            tick(&shared, late, Duration::from_millis(10)),
            TickAction::ForcedUnwind
        );
        assert!(shared.termination_requested());
        assert_eq!(
            tick(&shared, late + 1, Duration::from_millis(10)),
            TickAction::None,
            "never fires twice for one dispatch"
        );
        shared.end_dispatch();
    }

    #[test]
    fn within_budget_is_none() {
        let shared = WorkerShared::new(0);
        shared.begin_dispatch("e", 1_000);
        assert_eq!(
            tick(&shared, 1_000 + 9_999_999, Duration::from_millis(10)),
            TickAction::None
        );
        shared.end_dispatch();
    }

    #[test]
    fn helper_defers_and_flag_moves_to_three() {
        let shared = WorkerShared::new(0);
        shared.begin_dispatch("e", 1_000);
        shared.flag().helper_enter();
        let late = 1_000 + 20_000_000;
        assert_eq!(
            tick(&shared, late, Duration::from_millis(10)),
            TickAction::Deferred
        );
        assert_eq!(shared.flag().load(), Some(ExecFlag::TerminationRequested));
        assert_eq!(
            tick(&shared, late + 1, Duration::from_millis(10)),
            TickAction::None,
            "flag already at 3"
        );
        shared.end_dispatch();
    }
}
