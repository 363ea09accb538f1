//! Extension manifests: the loader's declared input.
//!
//! A manifest replaces what a compiler toolchain would otherwise hand the
//! loader: the feature flags the source uses, the static callgraph with
//! per-function frame sizes, the maps the extension binds, and the entry
//! symbol. The on-disk form is TOML; see `docs/manifest-schema.md`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extension::ProgramKind;
use crate::map::{MapSpec, MapSpecError};

/// One function in the callgraph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallNode {
    pub function_id: String,
    pub frame_bytes: u64,
    #[serde(default)]
    pub calls_helper: bool,
}

/// Call edge kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeKind {
    Direct,
    Indirect,
}

/// One edge in the callgraph. Indirect edges may omit the callee when the
/// target set is unknown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallEdge {
    pub caller: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub callee: Option<String>,
    pub kind: EdgeKind,
}

/// The static callgraph of an extension.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallGraph {
    #[serde(default)]
    pub nodes: Vec<CallNode>,
    #[serde(default)]
    pub edges: Vec<CallEdge>,
}

impl CallGraph {
    pub fn node(&self, function_id: &str) -> Option<&CallNode> {
        self.nodes.iter().find(|n| n.function_id == function_id)
    }

    pub fn has_indirect_edges(&self) -> bool {
        self.edges.iter().any(|e| e.kind == EdgeKind::Indirect)
    }

    /// Direct successors of `function_id` along resolved edges.
    pub fn callees<'a>(&'a self, function_id: &'a str) -> impl Iterator<Item = &'a str> {
        self.edges
            .iter()
            .filter(move |e| e.caller == function_id)
            .filter_map(|e| e.callee.as_deref())
    }
}

/// Everything the loader needs to admit an extension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtensionManifest {
    pub extension_id: String,
    pub program_kind: ProgramKind,
    /// Language features the source uses, linted against the forbidden set.
    #[serde(default)]
    pub feature_flags: Vec<String>,
    pub entry_symbol: String,
    #[serde(default)]
    pub callgraph: CallGraph,
    #[serde(default, rename = "maps")]
    pub declared_maps: Vec<MapSpec>,
}

/// Structural manifest problems, found before any policy check runs.
#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("extension_id must be nonempty")]
    EmptyId,
    #[error("entry symbol {entry} is not a callgraph node")]
    EntryNotInGraph { entry: String },
    #[error("callgraph has no nodes")]
    EmptyGraph,
    #[error("duplicate callgraph node {function_id}")]
    DuplicateNode { function_id: String },
    #[error("edge references unknown function {function_id}")]
    UnknownEdgeEndpoint { function_id: String },
    #[error("direct edge from {caller} has no callee")]
    DirectEdgeWithoutCallee { caller: String },
    #[error("duplicate map declaration {map_id}")]
    DuplicateMap { map_id: String },
    #[error(transparent)]
    Map(#[from] MapSpecError),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: Box<toml::de::Error>,
    },
}

impl ExtensionManifest {
    /// Checks the structural invariants: nonempty id, entry present, edge
    /// endpoints resolve, maps well-formed.
    pub fn validate(&self) -> Result<(), ManifestError> {
        if self.extension_id.is_empty() {
            return Err(ManifestError::EmptyId);
        }
        if self.callgraph.nodes.is_empty() {
            return Err(ManifestError::EmptyGraph);
        }
        for (i, node) in self.callgraph.nodes.iter().enumerate() {
            if self.callgraph.nodes[..i]
                .iter()
                .any(|n| n.function_id == node.function_id)
            {
                return Err(ManifestError::DuplicateNode {
                    function_id: node.function_id.clone(),
                });
            }
        }
        if self.callgraph.node(&self.entry_symbol).is_none() {
            return Err(ManifestError::EntryNotInGraph {
                entry: self.entry_symbol.clone(),
            });
        }
        for edge in &self.callgraph.edges {
            if self.callgraph.node(&edge.caller).is_none() {
                return Err(ManifestError::UnknownEdgeEndpoint {
                    function_id: edge.caller.clone(),
                });
            }
            match (&edge.callee, edge.kind) {
                (Some(callee), _) => {
                    if self.callgraph.node(callee).is_none() {
                        return Err(ManifestError::UnknownEdgeEndpoint {
                            function_id: callee.clone(),
                        });
                    }
                }
                (None, EdgeKind::Direct) => {
                    return Err(ManifestError::DirectEdgeWithoutCallee {
                        caller: edge.caller.clone(),
                    });
                }
                // An indirect edge with no callee marks an unknown target.
                (None, EdgeKind::Indirect) => {}
            }
        }
        for (i, spec) in self.declared_maps.iter().enumerate() {
            spec.validate()?;
            if self.declared_maps[..i].iter().any(|m| m.map_id == spec.map_id) {
                return Err(ManifestError::DuplicateMap {
                    map_id: spec.map_id.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ManifestError> {
        let manifest: ExtensionManifest =
            toml::from_str(text).map_err(|e| ManifestError::Parse {
                path: "<inline>".to_string(),
                source: Box::new(e),
            })?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ManifestError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let manifest: ExtensionManifest =
            toml::from_str(&text).map_err(|e| ManifestError::Parse {
                path: path.display().to_string(),
                source: Box::new(e),
            })?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Convenience builder for tests and built-in extensions.
pub fn single_function_manifest(
    extension_id: &str,
    kind: ProgramKind,
    entry: &str,
    frame_bytes: u64,
) -> ExtensionManifest {
    ExtensionManifest {
        extension_id: extension_id.to_string(),
        program_kind: kind,
        feature_flags: Vec::new(),
        entry_symbol: entry.to_string(),
        callgraph: CallGraph {
            nodes: vec![CallNode {
                function_id: entry.to_string(),
                frame_bytes,
                calls_helper: true,
            }],
            edges: Vec::new(),
        },
        declared_maps: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::MapKind;

    const SAMPLE: &str = r#"
extension_id = "demo"
program_kind = "packet-ingress"
entry_symbol = "main"
feature_flags = []

[[callgraph.nodes]]
function_id = "main"
frame_bytes = 512
calls_helper = true

[[callgraph.nodes]]
function_id = "helper_fn"
frame_bytes = 256

[[callgraph.edges]]
caller = "main"
callee = "helper_fn"
kind = "direct"

[[maps]]
map_id = "cache"
kind = "array"
key_bytes = 4
value_bytes = 64
max_entries = 16
"#;

    #[test]
    fn toml_round_trip() {
        let m = ExtensionManifest::from_toml_str(SAMPLE).unwrap();
        assert_eq!(m.extension_id, "demo");
        assert_eq!(m.callgraph.nodes.len(), 2);
        assert_eq!(m.declared_maps[0].kind, MapKind::Array);
        let re = ExtensionManifest::from_toml_str(&m.to_toml_string()).unwrap();
        assert_eq!(m, re);
    }

    #[test]
    fn entry_must_exist() {
        let m = single_function_manifest("x", ProgramKind::TraceEvent, "main", 0);
        let mut bad = m.clone();
        bad.entry_symbol = "nope".into();
        assert!(matches!(
            bad.validate(),
            Err(ManifestError::EntryNotInGraph { entry }) if entry == "nope"
        ));
        assert!(m.validate().is_ok());
    }

    #[test]
    fn unresolved_indirect_edge_is_allowed() {
        let mut m = single_function_manifest("x", ProgramKind::TraceEvent, "main", 0);
        m.callgraph.edges.push(CallEdge {
            caller: "main".into(),
            callee: None,
            kind: EdgeKind::Indirect,
        });
        assert!(m.validate().is_ok());
        m.callgraph.edges.push(CallEdge {
            caller: "main".into(),
            callee: None,
            kind: EdgeKind::Direct,
        });
        assert!(matches!(
            m.validate(),
            Err(ManifestError::DirectEdgeWithoutCallee { .. })
        ));
    }

    #[test]
    fn edges_must_resolve() {
        let mut m = single_function_manifest("x", ProgramKind::TraceEvent, "main", 0);
        m.callgraph.edges.push(CallEdge {
            caller: "main".into(),
            callee: Some("ghost".into()),
            kind: EdgeKind::Direct,
        });
        assert!(matches!(
            m.validate(),
            Err(ManifestError::UnknownEdgeEndpoint { function_id }) if function_id == "ghost"
        ));
    }
}
