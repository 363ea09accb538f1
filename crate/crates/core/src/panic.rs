//! Extension panic signal, panic records, and the process-wide panic hook.
//!
//! Safety checks inside the host (bounds checks, stack checks, the one-lock
//! rule, termination) never return errors to extension code: they raise a
//! Rust panic carrying an [`UnwindSignal`] payload, which unwinds to the
//! dispatcher boundary where the cleanup path runs. Extensions may also
//! panic through ordinary `panic!`; the dispatcher converts string payloads
//! into [`PanicReason::ExplicitPanic`].

use std::any::Any;
use std::cell::RefCell;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Once};

use crate::worker::WorkerShared;

/// Why an extension dispatch panicked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PanicReason {
    OutOfBounds,
    StackOverflowCheck,
    DoubleLock,
    Terminated,
    ExplicitPanic,
    TransmuteViolation,
}

impl fmt::Display for PanicReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PanicReason::OutOfBounds => "OutOfBounds",
            PanicReason::StackOverflowCheck => "StackOverflowCheck",
            PanicReason::DoubleLock => "DoubleLock",
            PanicReason::Terminated => "Terminated",
            PanicReason::ExplicitPanic => "ExplicitPanic",
            PanicReason::TransmuteViolation => "TransmuteViolation",
        };
        f.write_str(s)
    }
}

/// One entry in the host ring buffer, appended exactly once per panic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanicRecord {
    pub extension_id: String,
    pub worker_id: usize,
    pub reason: PanicReason,
    pub message: String,
    /// Monotonic nanoseconds since host start.
    pub timestamp_ns: u64,
}

impl PanicRecord {
    /// The `host log` line format: `ts=<ns> worker=<id> ext=<id> reason=<enum> msg=<string>`.
    pub fn log_line(&self) -> String {
        format!(
            "ts={} worker={} ext={} reason={} msg={}",
            self.timestamp_ns, self.worker_id, self.extension_id, self.reason, self.message
        )
    }

    /// Parses a line produced by [`PanicRecord::log_line`].
    pub fn parse_log_line(line: &str) -> Option<PanicRecord> {
        let rest = line.strip_prefix("ts=")?;
        let (ts, rest) = rest.split_once(" worker=")?;
        let (worker, rest) = rest.split_once(" ext=")?;
        let (ext, rest) = rest.split_once(" reason=")?;
        let (reason, msg) = rest.split_once(" msg=")?;
        let reason = match reason {
            "OutOfBounds" => PanicReason::OutOfBounds,
            "StackOverflowCheck" => PanicReason::StackOverflowCheck,
            "DoubleLock" => PanicReason::DoubleLock,
            "Terminated" => PanicReason::Terminated,
            "ExplicitPanic" => PanicReason::ExplicitPanic,
            "TransmuteViolation" => PanicReason::TransmuteViolation,
            _ => return None,
        };
        Some(PanicRecord {
            extension_id: ext.to_string(),
            worker_id: worker.parse().ok()?,
            reason,
            message: msg.to_string(),
            timestamp_ns: ts.parse().ok()?,
        })
    }
}

/// The payload carried by a host-raised panic, from the raise site to the
/// dispatcher boundary.
#[derive(Debug, Clone)]
pub struct UnwindSignal {
    pub reason: PanicReason,
    pub message: String,
}

thread_local! {
    // The worker lane currently dispatching on this thread, if any. Consulted
    // by the panic hook so that the flag moves to HelperOrPanic at panic
    // entry, before any unwinding happens.
    static CURRENT_WORKER: RefCell<Option<Arc<WorkerShared>>> = const { RefCell::new(None) };
}

/// Marks `shared` as the worker dispatching on the current thread for the
/// duration of the returned guard.
pub(crate) fn enter_dispatch_scope(shared: Arc<WorkerShared>) -> DispatchScope {
    CURRENT_WORKER.with(|c| *c.borrow_mut() = Some(shared));
    DispatchScope
}

pub(crate) struct DispatchScope;

impl Drop for DispatchScope {
    fn drop(&mut self) {
        CURRENT_WORKER.with(|c| *c.borrow_mut() = None);
    }
}

/// Raises an extension panic. Never returns.
///
/// Sets the exec flag to HelperOrPanic first (panic entry), so a watchdog
/// tick that lands during unwinding defers instead of interrupting.
pub fn raise(reason: PanicReason, message: impl Into<String>) -> ! {
    let message = message.into();
    CURRENT_WORKER.with(|c| {
        if let Some(shared) = c.borrow().as_ref() {
            shared.flag().panic_entry();
        }
    });
    std::panic::panic_any(UnwindSignal { reason, message })
}

/// Interprets a payload caught by `catch_unwind` at the dispatcher boundary.
///
/// Host-raised signals keep their reason; plain `panic!` payloads from
/// extension code become [`PanicReason::ExplicitPanic`]. Anything else is
/// not a panic the framework knows how to convert and is reported as a
/// framework bug by the caller.
pub(crate) fn classify_payload(payload: Box<dyn Any + Send>) -> Option<(PanicReason, String)> {
    let payload = match payload.downcast::<UnwindSignal>() {
        Ok(sig) => return Some((sig.reason, sig.message)),
        Err(other) => other,
    };
    let payload = match payload.downcast::<String>() {
        Ok(msg) => return Some((PanicReason::ExplicitPanic, *msg)),
        Err(other) => other,
    };
    match payload.downcast::<&'static str>() {
        Ok(msg) => Some((PanicReason::ExplicitPanic, msg.to_string())),
        Err(_) => None,
    }
}

static HOOK_INSTALL: Once = Once::new();
static SUPPRESSED: AtomicUsize = AtomicUsize::new(0);

/// Installs the process-wide panic hook once. `Host::new` calls this;
/// harnesses that drive views or typed casts outside a host (e.g. fuzzers)
/// may call it directly.
///
/// For panics raised while a worker is dispatching, the hook records panic
/// entry on the worker flag and stays quiet (the dispatcher turns the panic
/// into a ring-buffer record; printing ten thousand backtraces during a
/// panic storm would drown the log). Panics outside any dispatch go to the
/// previous hook unchanged, except host-raised signals, which are always
/// quiet.
pub fn install_hook() {
    HOOK_INSTALL.call_once(|| {
        let previous = std::panic::take_hook();
        std::panic::set_hook(Box::new(move |info| {
            let in_dispatch = CURRENT_WORKER.with(|c| {
                if let Some(shared) = c.borrow().as_ref() {
                    shared.flag().panic_entry();
                    true
                } else {
                    false
                }
            });
            let is_signal = info.payload().is::<UnwindSignal>();
            if in_dispatch || is_signal {
                SUPPRESSED.fetch_add(1, Ordering::Relaxed);
            } else {
                previous(info);
            }
        }));
    });
}

/// Number of panics the hook has silenced; test diagnostics only.
pub fn suppressed_panics() -> usize {
    SUPPRESSED.load(Ordering::Relaxed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_line_round_trips() {
        let rec = PanicRecord {
            extension_id: "bmc".to_string(),
            worker_id: 3,
            reason: PanicReason::OutOfBounds,
            message: "read 251 beyond 250".to_string(),
            timestamp_ns: 123456789,
        };
        let line = rec.log_line();
        assert_eq!(
            line,
            "ts=123456789 worker=3 ext=bmc reason=OutOfBounds msg=read 251 beyond 250"
        );
        assert_eq!(PanicRecord::parse_log_line(&line).unwrap(), rec);
    }

    #[test]
    fn classify_prefers_signal_payload() {
        let sig: Box<dyn Any + Send> = Box::new(UnwindSignal {
            reason: PanicReason::DoubleLock,
            message: "second acquire".into(),
        });
        assert_eq!(
            classify_payload(sig),
            Some((PanicReason::DoubleLock, "second acquire".to_string()))
        );
        let plain: Box<dyn Any + Send> = Box::new("boom");
        assert_eq!(
            classify_payload(plain),
            Some((PanicReason::ExplicitPanic, "boom".to_string()))
        );
        let odd: Box<dyn Any + Send> = Box::new(17u32);
        assert_eq!(classify_payload(odd), None);
    }
}
