//! An in-datapath memcached-style cache built as a host extension, plus the
//! synthetic packet tooling around it.
//!
//! The extension serves GET hits straight from a shared array map and
//! invalidates entries when a SET passes by; everything else passes through
//! to the (stand-in) server. A deliberately faulty variant exists for
//! resilience testing.

#![forbid(unsafe_code)]

pub mod extension;
pub mod packet;
pub mod store;
pub mod workload;

pub use extension::{
    egress_fill, hash_key, load, manifest, read_stats, BmcConfig, BmcStats, Counter,
};
pub use store::RefStore;
pub use workload::{generate, nth_key, to_frames, Request, WorkloadSpec};
