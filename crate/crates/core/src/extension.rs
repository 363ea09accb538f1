//! Extension entry points, verdicts, and handles.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dispatch::ExtContext;
use crate::loader::StackMode;

/// Where the extension attaches, and therefore what its verdict means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProgramKind {
    PacketIngress,
    TraceEvent,
}

impl ProgramKind {
    /// The verdict the host reports for a panicked dispatch.
    pub fn panicked_default(self) -> Verdict {
        match self {
            ProgramKind::PacketIngress => Verdict::Drop,
            ProgramKind::TraceEvent => Verdict::Code(-1),
        }
    }
}

/// What an extension tells the host to do with the triggering event.
/// Packet-ingress programs return `Pass`/`Drop`/`Tx`; trace-event programs
/// return an integer code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    Pass,
    Drop,
    Tx,
    Code(i64),
}

/// The executable hook of an extension: a function over the dispatch
/// context. All interaction with host state goes through the context.
pub type EntryFn = Arc<dyn Fn(&ExtContext<'_>) -> Verdict + Send + Sync>;

/// Public result of loading an extension: its identity, how its stack is
/// checked, and the maps it is bound to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtensionHandle {
    pub extension_id: String,
    pub program_kind: ProgramKind,
    pub stack_mode: StackMode,
    pub attached_maps: Vec<String>,
}
