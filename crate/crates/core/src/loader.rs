//! Manifest admission: safe-subset lint, frame limits, stack-mode
//! classification, and the static worst-case stack bound.
//!
//! An extension with no indirect calls and no recursion gets a static
//! bound: the maximum root-to-leaf frame sum over its callgraph, which must
//! fit the extension-code stack threshold. Anything with unknown edges or
//! cycles falls back to runtime stack checks at every extension-level
//! call.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::config::HostConfig;
use crate::manifest::{CallGraph, ExtensionManifest};

/// The nine language features extensions may not use.
pub const FORBIDDEN_FEATURES: [&str; 9] = [
    "unsafe-code",
    "mem-forget",
    "manually-drop",
    "forget-intrinsic",
    "std-library",
    "dynamic-allocation",
    "floating-point",
    "simd",
    "abort-intrinsic",
];

fn forbidden_reason(feature: &str) -> &'static str {
    match feature {
        "unsafe-code" => "unsafe code bypasses the compiler's safety checks",
        "mem-forget" => "defeats automatic lifetime management and leaks resources",
        "manually-drop" => "defeats automatic lifetime management and leaks resources",
        "forget-intrinsic" => "defeats automatic lifetime management and leaks resources",
        "std-library" => "unavailable in the extension environment",
        "dynamic-allocation" => "unavailable in the extension environment",
        "floating-point" => "unavailable in the extension execution context",
        "simd" => "unavailable in the extension execution context",
        "abort-intrinsic" => "raises an invalid instruction",
        _ => "forbidden feature",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LintVerdict {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LintViolation {
    pub feature: String,
    pub reason: String,
}

/// Result of linting a manifest's declared feature flags. Rejected iff
/// `violations` is nonempty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LintReport {
    pub verdict: LintVerdict,
    pub violations: Vec<LintViolation>,
}

impl LintReport {
    pub fn accepted(&self) -> bool {
        self.verdict == LintVerdict::Accepted
    }
}

/// Lints the manifest's feature flags against the forbidden set. Pure:
/// rejection is a value, not an error. Each offending feature is listed
/// once, in forbidden-set order.
pub fn lint_manifest(manifest: &ExtensionManifest) -> LintReport {
    let declared: HashSet<&str> = manifest.feature_flags.iter().map(|s| s.as_str()).collect();
    let violations: Vec<LintViolation> = FORBIDDEN_FEATURES
        .iter()
        .filter(|f| declared.contains(**f))
        .map(|f| LintViolation {
            feature: f.to_string(),
            reason: forbidden_reason(f).to_string(),
        })
        .collect();
    let verdict = if violations.is_empty() {
        LintVerdict::Accepted
    } else {
        LintVerdict::Rejected
    };
    LintReport {
        verdict,
        violations,
    }
}

/// How an admitted extension's stack safety is enforced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackMode {
    /// Worst-case usage computed at load time; no runtime checks needed.
    StaticallyBounded(u64),
    /// Unknown edges or recursion: usage is checked before every
    /// extension-level call.
    RuntimeChecked,
}

/// Stack-analysis failures that reject the extension at load time.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LoaderError {
    #[error("function {function_id} uses {frame_bytes} bytes of frame, over the {limit}-byte limit")]
    FrameTooLarge {
        function_id: String,
        frame_bytes: u64,
        limit: u64,
    },
    #[error("static stack bound {bound} exceeds the {threshold}-byte extension threshold")]
    BoundExceeded { bound: u64, threshold: u64 },
    #[error("callgraph contains a cycle")]
    CyclicGraph,
    #[error("callgraph contains an indirect edge")]
    IndirectEdge,
    #[error("entry symbol {entry} is not a callgraph node")]
    UnknownEntry { entry: String },
}

/// Verifies every frame fits the per-function limit (inclusive). Reports
/// the first offender in node order.
pub fn check_frame_limits(cg: &CallGraph, cfg: &HostConfig) -> Result<(), LoaderError> {
    let limit = cfg.per_function_frame_limit;
    for node in &cg.nodes {
        if node.frame_bytes > limit {
            return Err(LoaderError::FrameTooLarge {
                function_id: node.function_id.clone(),
                frame_bytes: node.frame_bytes,
                limit,
            });
        }
    }
    Ok(())
}

/// True iff the resolved edges of `cg` contain a directed cycle.
pub fn has_cycle(cg: &CallGraph) -> bool {
    #[derive(Clone, Copy, PartialEq)]
    enum Color {
        White,
        Gray,
        Black,
    }
    let ids: Vec<&str> = cg.nodes.iter().map(|n| n.function_id.as_str()).collect();
    let mut color: HashMap<&str, Color> = ids.iter().map(|&id| (id, Color::White)).collect();

    fn visit<'a>(
        cg: &'a CallGraph,
        id: &'a str,
        color: &mut HashMap<&'a str, Color>,
    ) -> bool {
        color.insert(id, Color::Gray);
        for callee in cg.callees(id) {
            match color.get(callee) {
                Some(Color::Gray) => return true,
                Some(Color::White) => {
                    if visit(cg, callee, color) {
                        return true;
                    }
                }
                _ => {}
            }
        }
        color.insert(id, Color::Black);
        false
    }

    for id in ids {
        if color[id] == Color::White && visit(cg, id, &mut color) {
            return true;
        }
    }
    false
}

/// Worst-case stack usage from `entry`: the maximum over all call paths of
/// the frame-size sum along the path.
///
/// Requires an acyclic graph with no indirect edges. Nodes unreachable from
/// the entry do not contribute (a warning is logged).
pub fn compute_static_bound(cg: &CallGraph, entry: &str) -> Result<u64, LoaderError> {
    if cg.has_indirect_edges() {
        return Err(LoaderError::IndirectEdge);
    }
    if has_cycle(cg) {
        return Err(LoaderError::CyclicGraph);
    }
    if cg.node(entry).is_none() {
        return Err(LoaderError::UnknownEntry {
            entry: entry.to_string(),
        });
    }

    fn bound<'a>(cg: &'a CallGraph, id: &'a str, memo: &mut HashMap<&'a str, u64>) -> u64 {
        if let Some(&b) = memo.get(id) {
            return b;
        }
        let frame = cg.node(id).map(|n| n.frame_bytes).unwrap_or(0);
        let deepest_callee = cg
            .callees(id)
            .map(|callee| bound(cg, callee, memo))
            .max()
            .unwrap_or(0);
        let b = frame + deepest_callee;
        memo.insert(id, b);
        b
    }

    let mut memo = HashMap::new();
    let total = bound(cg, entry, &mut memo);
    let reachable = memo.len();
    if reachable < cg.nodes.len() {
        log::warn!(
            "callgraph: {} of {} nodes unreachable from {entry}; ignored for the static bound",
            cg.nodes.len() - reachable,
            cg.nodes.len()
        );
    }
    Ok(total)
}

/// Chooses between static and runtime stack checks.
///
/// Frames are checked first. A graph with any indirect edge or any cycle is
/// `RuntimeChecked` (an indirect edge with a declared callee set still
/// counts: there is no partial-resolution scheme). Otherwise the static
/// bound must fit the extension threshold or the extension is rejected.
pub fn classify_stack_mode(
    cg: &CallGraph,
    entry: &str,
    cfg: &HostConfig,
) -> Result<StackMode, LoaderError> {
    check_frame_limits(cg, cfg)?;
    if cg.node(entry).is_none() {
        return Err(LoaderError::UnknownEntry {
            entry: entry.to_string(),
        });
    }
    if cg.has_indirect_edges() || has_cycle(cg) {
        return Ok(StackMode::RuntimeChecked);
    }
    let bound = compute_static_bound(cg, entry)?;
    let threshold = cfg.stack_threshold_bytes();
    if bound > threshold {
        return Err(LoaderError::BoundExceeded { bound, threshold });
    }
    Ok(StackMode::StaticallyBounded(bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extension::ProgramKind;
    use crate::manifest::{single_function_manifest, CallEdge, CallNode, EdgeKind};

    fn graph(nodes: &[(&str, u64)], edges: &[(&str, &str, EdgeKind)]) -> CallGraph {
        CallGraph {
            nodes: nodes
                .iter()
                .map(|(id, frame)| CallNode {
                    function_id: id.to_string(),
                    frame_bytes: *frame,
                    calls_helper: false,
                })
                .collect(),
            edges: edges
                .iter()
                .map(|(a, b, kind)| CallEdge {
                    caller: a.to_string(),
                    callee: Some(b.to_string()),
                    kind: *kind,
                })
                .collect(),
        }
    }

    // Exhaustive root-to-leaf path enumeration; the independent check for
    // the longest-path computation.
    fn brute_force_bound(cg: &CallGraph, entry: &str) -> u64 {
        fn walk(cg: &CallGraph, id: &str, acc: u64, best: &mut u64) {
            let acc = acc + cg.node(id).map(|n| n.frame_bytes).unwrap_or(0);
            *best = (*best).max(acc);
            for callee in cg.callees(id) {
                walk(cg, callee, acc, best);
            }
        }
        let mut best = 0;
        walk(cg, entry, 0, &mut best);
        best
    }

    #[test]
    fn lint_accepts_empty_flags() {
        let m = single_function_manifest("e", ProgramKind::PacketIngress, "f", 0);
        let report = lint_manifest(&m);
        assert!(report.accepted());
        assert!(report.violations.is_empty());
    }

    #[test]
    fn lint_rejects_each_forbidden_feature() {
        for feature in FORBIDDEN_FEATURES {
            let mut m = single_function_manifest("e", ProgramKind::PacketIngress, "f", 0);
            m.feature_flags = vec![feature.to_string()];
            let report = lint_manifest(&m);
            assert_eq!(report.verdict, LintVerdict::Rejected);
            assert_eq!(report.violations.len(), 1);
            assert_eq!(report.violations[0].feature, feature);
        }
    }

    #[test]
    fn lint_lists_each_feature_once_and_ignores_unknown_flags() {
        let mut m = single_function_manifest("e", ProgramKind::PacketIngress, "f", 0);
        m.feature_flags = vec![
            "floating-point".into(),
            "simd".into(),
            "floating-point".into(),
            "iterator-combinators".into(),
        ];
        let report = lint_manifest(&m);
        assert_eq!(report.verdict, LintVerdict::Rejected);
        let feats: Vec<&str> = report.violations.iter().map(|v| v.feature.as_str()).collect();
        assert_eq!(feats, vec!["floating-point", "simd"]);
    }

    #[test]
    fn linear_chain_bound() {
        // Brute-force enumeration over A(512)->B(256)->C(128): one path,
        // sum 896.
        let cg = graph(
            &[("A", 512), ("B", 256), ("C", 128)],
            &[
                ("A", "B", EdgeKind::Direct),
                ("B", "C", EdgeKind::Direct),
            ],
        );
        assert_eq!(brute_force_bound(&cg, "A"), 896);
        assert_eq!(compute_static_bound(&cg, "A").unwrap(), 896);
        let cfg = HostConfig::default();
        assert_eq!(
            classify_stack_mode(&cg, "A", &cfg).unwrap(),
            StackMode::StaticallyBounded(896)
        );
    }

    #[test]
    fn diamond_takes_the_heavier_arm() {
        let cg = graph(
            &[("A", 100), ("B", 300), ("C", 200), ("D", 50)],
            &[
                ("A", "B", EdgeKind::Direct),
                ("A", "C", EdgeKind::Direct),
                ("B", "D", EdgeKind::Direct),
                ("C", "D", EdgeKind::Direct),
            ],
        );
        assert_eq!(brute_force_bound(&cg, "A"), 450);
        assert_eq!(compute_static_bound(&cg, "A").unwrap(), 450);
    }

    #[test]
    fn empty_frame_entry_is_zero() {
        let cg = graph(&[("A", 0)], &[]);
        assert_eq!(compute_static_bound(&cg, "A").unwrap(), 0);
    }

    #[test]
    fn self_edge_forces_runtime_checks() {
        let cg = graph(&[("A", 64)], &[("A", "A", EdgeKind::Direct)]);
        assert!(has_cycle(&cg));
        let cfg = HostConfig::default();
        assert_eq!(
            classify_stack_mode(&cg, "A", &cfg).unwrap(),
            StackMode::RuntimeChecked
        );
        assert_eq!(
            compute_static_bound(&cg, "A"),
            Err(LoaderError::CyclicGraph)
        );
    }

    #[test]
    fn resolved_indirect_edge_still_forces_runtime_checks() {
        let cg = graph(
            &[("A", 64), ("B", 64)],
            &[("A", "B", EdgeKind::Indirect)],
        );
        let cfg = HostConfig::default();
        assert_eq!(
            classify_stack_mode(&cg, "A", &cfg).unwrap(),
            StackMode::RuntimeChecked
        );
    }

    #[test]
    fn frame_limit_is_inclusive() {
        let cfg = HostConfig::default();
        let ok = graph(&[("A", 4096)], &[]);
        assert!(check_frame_limits(&ok, &cfg).is_ok());
        let over = graph(&[("A", 4097)], &[]);
        assert_eq!(
            check_frame_limits(&over, &cfg),
            Err(LoaderError::FrameTooLarge {
                function_id: "A".into(),
                frame_bytes: 4097,
                limit: 4096
            })
        );
        let way_over = graph(&[("ok", 128), ("big", 8192)], &[]);
        assert!(matches!(
            check_frame_limits(&way_over, &cfg),
            Err(LoaderError::FrameTooLarge { ref function_id, .. }) if function_id == "big"
        ));
    }

    #[test]
    fn boundary_bound_is_accepted_inclusively() {
        // Four one-page frames against a four-page threshold: exactly at
        // the boundary, accepted.
        let cg = graph(
            &[("A", 4096), ("B", 4096), ("C", 4096), ("D", 4096)],
            &[
                ("A", "B", EdgeKind::Direct),
                ("B", "C", EdgeKind::Direct),
                ("C", "D", EdgeKind::Direct),
            ],
        );
        let cfg = HostConfig::default();
        assert_eq!(brute_force_bound(&cg, "A"), 16384);
        assert_eq!(
            classify_stack_mode(&cg, "A", &cfg).unwrap(),
            StackMode::StaticallyBounded(16384)
        );
    }

    #[test]
    fn bound_over_threshold_rejects() {
        let cg = graph(
            &[("A", 4096), ("B", 4096), ("C", 4096), ("D", 4096), ("E", 64)],
            &[
                ("A", "B", EdgeKind::Direct),
                ("B", "C", EdgeKind::Direct),
                ("C", "D", EdgeKind::Direct),
                ("D", "E", EdgeKind::Direct),
            ],
        );
        let cfg = HostConfig::default();
        assert_eq!(
            classify_stack_mode(&cg, "A", &cfg),
            Err(LoaderError::BoundExceeded {
                bound: 16448,
                threshold: 16384
            })
        );
    }

    #[test]
    fn random_dags_match_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = rng.gen_range(1..=12);
            let mut nodes = Vec::new();
            for i in 0..n {
                nodes.push((format!("f{i}"), rng.gen_range(0..=4096u64)));
            }
            let mut edges = Vec::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    if rng.gen_bool(0.3) {
                        edges.push((format!("f{i}"), format!("f{j}")));
                    }
                }
            }
            let cg = CallGraph {
                nodes: nodes
                    .iter()
                    .map(|(id, f)| CallNode {
                        function_id: id.clone(),
                        frame_bytes: *f,
                        calls_helper: false,
                    })
                    .collect(),
                edges: edges
                    .iter()
                    .map(|(a, b)| CallEdge {
                        caller: a.clone(),
                        callee: Some(b.clone()),
                        kind: EdgeKind::Direct,
                    })
                    .collect(),
            };
            assert!(!has_cycle(&cg), "forward edges cannot cycle");
            assert_eq!(
                compute_static_bound(&cg, "f0").unwrap(),
                brute_force_bound(&cg, "f0")
            );
        }
    }
}
