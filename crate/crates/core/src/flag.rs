//! Per-worker tristate execution flag.
//!
//! The flag tracks where a dispatch currently executes so the watchdog
//! knows whether it may interrupt:
//!
//!   1 — extension code           (interruptible)
//!   2 — helper or panic handler  (termination must be deferred)
//!   3 — termination requested    (helper exit runs the panic path)
//!
//! Legal transitions are `1→2` (helper entry or panic entry), `2→1`
//! (helper exit with no termination pending), `2→3` (watchdog firing while
//! in a helper), and `3→2` (panic entry on helper exit). The cell also
//! holds an `Idle` state for workers with no extension running; moves in
//! and out of `Idle` are dispatch setup/teardown, not protocol transitions,
//! and are excluded from the audit trace.

use std::sync::atomic::{AtomicBool, AtomicU8, Ordering};

use parking_lot::Mutex;

/// Execution state of a worker that is running an extension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ExecFlag {
    ExtensionCode = 1,
    HelperOrPanic = 2,
    TerminationRequested = 3,
}

impl ExecFlag {
    pub fn from_raw(raw: u8) -> Option<ExecFlag> {
        match raw {
            1 => Some(ExecFlag::ExtensionCode),
            2 => Some(ExecFlag::HelperOrPanic),
            3 => Some(ExecFlag::TerminationRequested),
            _ => None,
        }
    }
}

/// One observed flag transition, `(from, to)`.
pub type FlagTransition = (ExecFlag, ExecFlag);

/// Returns true iff `t` is one of the four legal protocol transitions.
pub fn transition_is_legal(t: FlagTransition) -> bool {
    use ExecFlag::*;
    matches!(
        t,
        (ExtensionCode, HelperOrPanic)
            | (HelperOrPanic, ExtensionCode)
            | (HelperOrPanic, TerminationRequested)
            | (TerminationRequested, HelperOrPanic)
    )
}

const IDLE: u8 = 0;

/// Atomic cell holding the flag. Writes on the worker lane use release
/// ordering; the watchdog reads with acquire ordering.
#[derive(Debug)]
pub struct FlagCell {
    raw: AtomicU8,
    trace_on: AtomicBool,
    trace: Mutex<Vec<FlagTransition>>,
}

impl Default for FlagCell {
    fn default() -> Self {
        Self::new()
    }
}

impl FlagCell {
    pub fn new() -> Self {
        Self {
            raw: AtomicU8::new(IDLE),
            trace_on: AtomicBool::new(false),
            trace: Mutex::new(Vec::new()),
        }
    }

    /// Current flag, or `None` when the worker is idle.
    pub fn load(&self) -> Option<ExecFlag> {
        ExecFlag::from_raw(self.raw.load(Ordering::Acquire))
    }

    /// Dispatch setup: idle → extension code.
    pub(crate) fn begin_dispatch(&self) {
        let prev = self
            .raw
            .swap(ExecFlag::ExtensionCode as u8, Ordering::Release);
        debug_assert_eq!(prev, IDLE, "dispatch started on a non-idle worker");
    }

    /// Dispatch teardown: any state → idle.
    pub(crate) fn end_dispatch(&self) {
        self.raw.store(IDLE, Ordering::Release);
    }

    /// Helper entry: 1 → 2. Panics on an illegal starting state, which is a
    /// framework bug (e.g. a nested helper).
    pub(crate) fn helper_enter(&self) {
        self.transition(ExecFlag::ExtensionCode, ExecFlag::HelperOrPanic)
            .expect("illegal flag transition: helper entry outside extension code");
    }

    /// Helper exit with no termination pending: 2 → 1. Returns false when
    /// the flag is not 2 — the watchdog deferred a termination into this
    /// helper, and the caller must take the panic path instead.
    pub(crate) fn try_helper_exit(&self) -> bool {
        self.transition(ExecFlag::HelperOrPanic, ExecFlag::ExtensionCode)
            .is_ok()
    }

    /// Watchdog deferral: 2 → 3. Returns false if the flag was not 2.
    pub(crate) fn request_termination_in_helper(&self) -> bool {
        self.transition(ExecFlag::HelperOrPanic, ExecFlag::TerminationRequested)
            .is_ok()
    }

    /// Panic entry. From 1 this is the `1→2` transition; from 3 it is the
    /// `3→2` move onto the panic path. From 2 the flag is already where the
    /// panic handler needs it (a panic raised inside a helper), so nothing
    /// is recorded.
    pub(crate) fn panic_entry(&self) {
        if self
            .transition(ExecFlag::ExtensionCode, ExecFlag::HelperOrPanic)
            .is_ok()
        {
            return;
        }
        let _ = self.transition(ExecFlag::TerminationRequested, ExecFlag::HelperOrPanic);
    }

    fn transition(&self, from: ExecFlag, to: ExecFlag) -> Result<(), u8> {
        self.raw
            .compare_exchange(from as u8, to as u8, Ordering::AcqRel, Ordering::Acquire)
            .map(|_| {
                if self.trace_on.load(Ordering::Relaxed) {
                    self.trace.lock().push((from, to));
                }
            })
    }

    /// Enables transition tracing (tests and audits; off by default).
    pub fn set_trace(&self, on: bool) {
        self.trace_on.store(on, Ordering::Relaxed);
    }

    /// Drains and returns the recorded transitions.
    pub fn take_trace(&self) -> Vec<FlagTransition> {
        std::mem::take(&mut self.trace.lock())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legal_transition_set_is_exactly_four() {
        use ExecFlag::*;
        let all = [ExtensionCode, HelperOrPanic, TerminationRequested];
        let mut legal = Vec::new();
        for from in all {
            for to in all {
                if transition_is_legal((from, to)) {
                    legal.push((from, to));
                }
            }
        }
        assert_eq!(
            legal,
            vec![
                (ExtensionCode, HelperOrPanic),
                (HelperOrPanic, ExtensionCode),
                (HelperOrPanic, TerminationRequested),
                (TerminationRequested, HelperOrPanic),
            ]
        );
    }

    #[test]
    fn helper_round_trip_traces_legal_moves() {
        let cell = FlagCell::new();
        cell.set_trace(true);
        cell.begin_dispatch();
        cell.helper_enter();
        assert!(cell.try_helper_exit());
        cell.end_dispatch();
        let trace = cell.take_trace();
        assert!(trace.iter().all(|&t| transition_is_legal(t)));
        assert_eq!(trace.len(), 2);
        assert_eq!(cell.load(), None);
    }

    #[test]
    fn deferred_termination_path() {
        let cell = FlagCell::new();
        cell.begin_dispatch();
        cell.helper_enter();
        assert!(cell.request_termination_in_helper());
        assert_eq!(cell.load(), Some(ExecFlag::TerminationRequested));
        // Second request is a no-op.
        assert!(!cell.request_termination_in_helper());
        // Helper exit observes state 3 and enters the panic path.
        cell.panic_entry();
        assert_eq!(cell.load(), Some(ExecFlag::HelperOrPanic));
        cell.end_dispatch();
    }

    #[test]
    fn panic_entry_is_idempotent_inside_helper() {
        let cell = FlagCell::new();
        cell.set_trace(true);
        cell.begin_dispatch();
        cell.helper_enter();
        cell.panic_entry();
        assert_eq!(cell.load(), Some(ExecFlag::HelperOrPanic));
        let trace = cell.take_trace();
        // Only the helper entry is recorded; the panic entry from state 2
        // records nothing.
        assert_eq!(
            trace,
            vec![(ExecFlag::ExtensionCode, ExecFlag::HelperOrPanic)]
        );
    }
}
