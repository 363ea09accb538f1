//! User-space host for sandboxed extensions.
//!
//! Extensions are plain Rust closures loaded together with a manifest that
//! declares their callgraph, frame sizes and maps. The host enforces the
//! same properties an in-kernel extension runtime would: a safe-subset lint
//! on declared language features, static or runtime stack bounds, RAII
//! resource cleanup on panic, watchdog-driven termination, and a helper
//! interface (maps, locks, bounded byte views, checked casts) that is the
//! only way an extension touches shared state.
//!
//! The crate is organized around the dispatch path: [`host::Host`] owns the
//! registries, [`dispatch`] runs one extension on one worker lane, and
//! [`watchdog`] ticks each lane from its own timer thread.

#![forbid(unsafe_code)]

pub mod config;
pub mod dispatch;
pub mod extension;
pub mod flag;
pub mod host;
pub mod loader;
pub mod manifest;
pub mod map;
pub mod panic;
pub mod resource;
pub mod ringbuf;
pub mod typed;
pub mod view;
pub mod watchdog;
pub mod worker;

pub use config::HostConfig;
pub use dispatch::{DispatchOutcome, ExtContext, LoopFlow};
pub use extension::{EntryFn, ExtensionHandle, ProgramKind, Verdict};
pub use host::{Host, HostError, LoadError, Worker};
pub use loader::{LintReport, LintVerdict, LoaderError, StackMode};
pub use manifest::{CallEdge, CallGraph, CallNode, EdgeKind, ExtensionManifest};
pub use map::{MapError, MapKind, MapSpec};
pub use panic::{PanicReason, PanicRecord};
pub use view::{BoundedView, PacketBuf};
