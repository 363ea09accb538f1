//! The cache extension: serve GET hits from an in-datapath cache, drop
//! entries on SET, count everything.
//!
//! The whole cache is one loaded extension — parsing, lookup, reply
//! rewriting and invalidation live in a single program with no cross-stage
//! state. A second entry point (`faulty`) carries a deliberate off-by-one
//! in the invalidation scan for resilience testing: it reads one byte past
//! the declared key window, which the bounds check turns into a panic on
//! maximal keys.

use std::sync::Arc;

use exthost_core::host::Host;
use exthost_core::manifest::{CallEdge, CallNode, EdgeKind};
use exthost_core::typed::FieldDecl;
use exthost_core::view::BoundedView;
use exthost_core::{
    CallGraph, EntryFn, ExtContext, ExtensionHandle, ExtensionManifest, LoadError, MapKind,
    MapSpec, ProgramKind, Verdict,
};

use crate::packet::{
    ETHERTYPE_IPV4, FRAME_HDR_OFF, IPPROTO_UDP, IP_LEN, IP_OFF, MAX_KEY_LEN, PAYLOAD_OFF, UDP_LEN,
    UDP_OFF,
};

/// Cache geometry and identity of one loaded cache extension.
#[derive(Debug, Clone)]
pub struct BmcConfig {
    pub extension_id: String,
    /// Direct-mapped cache slots.
    pub entries: u32,
    /// Largest cached reply payload; bigger replies are not cached.
    pub max_data: u32,
    /// Seed for the 32-bit key hash.
    pub hash_seed: u32,
    /// UDP port the extension answers on.
    pub port: u16,
}

impl Default for BmcConfig {
    fn default() -> Self {
        Self {
            extension_id: "bmc".to_string(),
            entries: 4096,
            max_data: 1024,
            hash_seed: 0,
            port: crate::packet::MEMCACHED_PORT,
        }
    }
}

impl BmcConfig {
    pub fn cache_map_id(&self) -> String {
        format!("{}_cache", self.extension_id)
    }

    pub fn stats_map_id(&self) -> String {
        format!("{}_stats", self.extension_id)
    }

    pub fn entry_value_bytes(&self) -> u32 {
        ENTRY_DATA_OFF as u32 + self.max_data
    }
}

// Cache entry layout inside the array-map value.
const ENTRY_VALID_OFF: usize = 0;
const ENTRY_HASH_OFF: usize = 1;
const ENTRY_KEY_LEN_OFF: usize = 5;
const ENTRY_KEY_OFF: usize = 9;
const ENTRY_DATA_LEN_OFF: usize = ENTRY_KEY_OFF + MAX_KEY_LEN; // 259
const ENTRY_DATA_OFF: usize = ENTRY_DATA_LEN_OFF + 4; // 263

/// Statistics counter slots in the per-worker stats map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Counter {
    GetRecv = 0,
    SetRecv = 1,
    Hit = 2,
    Miss = 3,
    Invalidation = 4,
    Drop = 5,
}

const COUNTERS: u32 = 6;

/// Seeded 32-bit FNV-1a; the cache's key hash.
pub fn hash_key(seed: u32, key: &[u8]) -> u32 {
    let mut hash = 0x811c_9dc5u32 ^ seed;
    for &b in key {
        hash ^= b as u32;
        hash = hash.wrapping_mul(0x0100_0193);
    }
    hash
}

/// Aggregated counters, summed across worker lanes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BmcStats {
    pub get_recv: u64,
    pub set_recv: u64,
    pub hit: u64,
    pub miss: u64,
    pub invalidation: u64,
    pub drop: u64,
}

/// The manifest a cache extension loads under: one program, a handful of
/// direct internal calls, the shared cache map and the per-worker stats
/// map.
pub fn manifest(cfg: &BmcConfig, faulty: bool) -> ExtensionManifest {
    let entry = if faulty { "cache_ingress_faulty" } else { "cache_ingress" };
    let node = |id: &str, frame: u64, helper: bool| CallNode {
        function_id: id.to_string(),
        frame_bytes: frame,
        calls_helper: helper,
    };
    let edge = |a: &str, b: &str| CallEdge {
        caller: a.to_string(),
        callee: Some(b.to_string()),
        kind: EdgeKind::Direct,
    };
    ExtensionManifest {
        extension_id: cfg.extension_id.clone(),
        program_kind: ProgramKind::PacketIngress,
        feature_flags: Vec::new(),
        entry_symbol: entry.to_string(),
        callgraph: CallGraph {
            nodes: vec![
                node(entry, 768, true),
                node("parse_headers", 256, false),
                node("serve_get", 1024, true),
                node("invalidate_cache", 1024, true),
            ],
            edges: vec![
                edge(entry, "parse_headers"),
                edge(entry, "serve_get"),
                edge(entry, "invalidate_cache"),
            ],
        },
        declared_maps: vec![
            MapSpec {
                map_id: cfg.cache_map_id(),
                kind: MapKind::Array,
                key_bytes: 4,
                value_bytes: cfg.entry_value_bytes(),
                max_entries: cfg.entries,
            },
            MapSpec {
                map_id: cfg.stats_map_id(),
                kind: MapKind::PerWorker,
                key_bytes: 4,
                value_bytes: 8,
                max_entries: COUNTERS,
            },
        ],
    }
}

fn register_descriptors(host: &Host) {
    let reg = host.descriptors();
    if reg.get("eth_hdr").is_some() {
        return; // a cache extension was loaded before on this host
    }
    reg.register(
        "eth_hdr",
        14,
        &[
            FieldDecl::reserved(0, 12),
            FieldDecl::scalar("ethertype", 12, "u16"),
        ],
    )
    .expect("eth_hdr layout");
    reg.register(
        "ipv4_hdr",
        20,
        &[
            FieldDecl::scalar("ver_ihl", 0, "u8"),
            FieldDecl::scalar("tos", 1, "u8"),
            FieldDecl::scalar("total_len", 2, "u16"),
            FieldDecl::scalar("ident", 4, "u16"),
            FieldDecl::scalar("frag", 6, "u16"),
            FieldDecl::scalar("ttl", 8, "u8"),
            FieldDecl::scalar("protocol", 9, "u8"),
            FieldDecl::scalar("checksum", 10, "u16"),
            FieldDecl::scalar("src", 12, "u32"),
            FieldDecl::scalar("dst", 16, "u32"),
        ],
    )
    .expect("ipv4_hdr layout");
    reg.register(
        "udp_hdr",
        8,
        &[
            FieldDecl::scalar("src_port", 0, "u16"),
            FieldDecl::scalar("dst_port", 2, "u16"),
            FieldDecl::scalar("length", 4, "u16"),
            FieldDecl::scalar("checksum", 6, "u16"),
        ],
    )
    .expect("udp_hdr layout");
    reg.register(
        "frame_hdr",
        8,
        &[
            FieldDecl::scalar("request_id", 0, "u16"),
            FieldDecl::scalar("sequence", 2, "u16"),
            FieldDecl::scalar("total_dgrams", 4, "u16"),
            FieldDecl::scalar("reserved", 6, "u16"),
        ],
    )
    .expect("frame_hdr layout");
}

/// Loads the cache extension (correct or faulty variant) onto `host`.
pub fn load(host: &Host, cfg: &BmcConfig, faulty: bool) -> Result<ExtensionHandle, LoadError> {
    register_descriptors(host);
    host.load_extension(manifest(cfg, faulty), entry(cfg.clone(), faulty))
}

/// Builds the entry hook without loading it.
pub fn entry(cfg: BmcConfig, faulty: bool) -> EntryFn {
    Arc::new(move |ctx: &ExtContext<'_>| ingress(ctx, &cfg, faulty))
}

fn bump(ctx: &ExtContext<'_>, cfg: &BmcConfig, counter: Counter) {
    let key = (counter as u32).to_le_bytes();
    if let Some(guard) = ctx.map_lookup(&cfg.stats_map_id(), &key) {
        guard.with_write(|bytes| {
            let v = u64::from_le_bytes(bytes[0..8].try_into().expect("u64 counter"));
            bytes[0..8].copy_from_slice(&(v + 1).to_le_bytes());
        });
    }
}

/// Scans the key window for the terminator. Returns the key length, or
/// `None` for a key that runs off the packet. A window-filling key with the
/// terminator beyond the window is a maximal key.
fn scan_key(window: &BoundedView) -> Option<usize> {
    let len = window.with_bytes(|bytes| {
        bytes
            .iter()
            .position(|&b| b == b' ' || b == b'\r')
    });
    match len {
        Some(n) => Some(n),
        None if window.len() == MAX_KEY_LEN => Some(MAX_KEY_LEN),
        None => None,
    }
}

fn ingress(ctx: &ExtContext<'_>, cfg: &BmcConfig, faulty: bool) -> Verdict {
    let pkt = ctx.packet();
    if pkt.len() < PAYLOAD_OFF {
        return Verdict::Pass; // runt frame, not ours
    }
    let eth = ctx.transmute(&pkt, "eth_hdr");
    if eth.get("ethertype") as u16 != ETHERTYPE_IPV4 {
        return Verdict::Pass;
    }
    let ip = ctx.transmute(&pkt.subview(IP_OFF, pkt.len() - IP_OFF), "ipv4_hdr");
    if ip.get("protocol") as u8 != IPPROTO_UDP {
        return Verdict::Pass;
    }
    let udp = ctx.transmute(&pkt.subview(UDP_OFF, pkt.len() - UDP_OFF), "udp_hdr");
    if udp.get("dst_port") as u16 != cfg.port {
        return Verdict::Pass;
    }
    // The UDP length claims how much payload follows; a frame shorter than
    // its own claim is truncated.
    let claimed = udp.get("length") as usize;
    if claimed < UDP_LEN + crate::packet::FRAME_HDR_LEN
        || UDP_OFF + claimed > pkt.len()
    {
        bump(ctx, cfg, Counter::Drop);
        return Verdict::Pass;
    }
    let payload_len = claimed - UDP_LEN - crate::packet::FRAME_HDR_LEN;
    if payload_len == 0 {
        bump(ctx, cfg, Counter::Drop);
        return Verdict::Pass;
    }
    let payload = pkt.subview(PAYLOAD_OFF, payload_len);

    if payload.len() >= 4 && payload.read(0, 4) == b"get " {
        serve_get(ctx, cfg, &payload)
    } else if payload.len() >= 4 && payload.read(0, 4) == b"set " {
        bump(ctx, cfg, Counter::SetRecv);
        invalidate_cache(ctx, cfg, &payload, faulty);
        Verdict::Pass
    } else {
        Verdict::Pass // not a command the cache handles
    }
}

fn serve_get(ctx: &ExtContext<'_>, cfg: &BmcConfig, payload: &BoundedView) -> Verdict {
    bump(ctx, cfg, Counter::GetRecv);
    let rem = payload.len() - 4;
    if rem == 0 {
        bump(ctx, cfg, Counter::Drop);
        return Verdict::Pass;
    }
    let window = payload.subview(4, rem.min(MAX_KEY_LEN));
    let Some(key_len) = scan_key(&window) else {
        bump(ctx, cfg, Counter::Drop);
        return Verdict::Pass;
    };
    if key_len == 0 {
        bump(ctx, cfg, Counter::Drop);
        return Verdict::Pass;
    }
    let key = window.read(0, key_len);
    let hash = hash_key(cfg.hash_seed, &key);
    let index = hash % cfg.entries;

    let cached: Option<Vec<u8>> = ctx
        .map_lookup(&cfg.cache_map_id(), &index.to_le_bytes())
        .and_then(|guard| {
            guard.with_read(|entry| {
                if entry[ENTRY_VALID_OFF] == 0 {
                    return None;
                }
                let stored_hash =
                    u32::from_le_bytes(entry[ENTRY_HASH_OFF..ENTRY_HASH_OFF + 4].try_into().unwrap());
                let stored_key_len = u32::from_le_bytes(
                    entry[ENTRY_KEY_LEN_OFF..ENTRY_KEY_LEN_OFF + 4].try_into().unwrap(),
                ) as usize;
                // Byte-compare the key: hash equality alone would serve
                // false hits on collisions.
                if stored_hash != hash
                    || stored_key_len != key.len()
                    || entry[ENTRY_KEY_OFF..ENTRY_KEY_OFF + stored_key_len] != key[..]
                {
                    return None;
                }
                let data_len = u32::from_le_bytes(
                    entry[ENTRY_DATA_LEN_OFF..ENTRY_DATA_LEN_OFF + 4].try_into().unwrap(),
                ) as usize;
                Some(entry[ENTRY_DATA_OFF..ENTRY_DATA_OFF + data_len].to_vec())
            })
        });

    match cached {
        Some(reply) => {
            bump(ctx, cfg, Counter::Hit);
            rewrite_into_reply(ctx, &reply);
            Verdict::Tx
        }
        None => {
            bump(ctx, cfg, Counter::Miss);
            Verdict::Pass
        }
    }
}

/// Turns the request frame into the reply frame in place: swap addresses,
/// echo the request id, install the cached payload, fix the lengths.
fn rewrite_into_reply(ctx: &ExtContext<'_>, reply: &[u8]) {
    let pkt = ctx.packet();
    let dst_mac = pkt.read(0, 6);
    let src_mac = pkt.read(6, 6);
    let ip = ctx.transmute(&pkt.subview(IP_OFF, pkt.len() - IP_OFF), "ipv4_hdr");
    let (src_ip, dst_ip) = (ip.get("src"), ip.get("dst"));
    let udp = ctx.transmute(&pkt.subview(UDP_OFF, pkt.len() - UDP_OFF), "udp_hdr");
    let (src_port, dst_port) = (udp.get("src_port"), udp.get("dst_port"));

    ctx.resize_packet(PAYLOAD_OFF + reply.len());
    let pkt = ctx.packet();
    pkt.write(0, &src_mac);
    pkt.write(6, &dst_mac);

    let udp_total = (UDP_LEN + crate::packet::FRAME_HDR_LEN + reply.len()) as u64;
    let ip = ctx.transmute(&pkt.subview(IP_OFF, pkt.len() - IP_OFF), "ipv4_hdr");
    ip.set("total_len", IP_LEN as u64 + udp_total);
    ip.set("src", dst_ip);
    ip.set("dst", src_ip);
    ip.set("checksum", 0);

    let udp = ctx.transmute(&pkt.subview(UDP_OFF, pkt.len() - UDP_OFF), "udp_hdr");
    udp.set("src_port", dst_port);
    udp.set("dst_port", src_port);
    udp.set("length", udp_total);
    udp.set("checksum", 0);

    let fh = ctx.transmute(&pkt.subview(FRAME_HDR_OFF, pkt.len() - FRAME_HDR_OFF), "frame_hdr");
    fh.set("sequence", 0);
    fh.set("total_dgrams", 1);

    pkt.write(PAYLOAD_OFF, reply);
}

fn invalidate_cache(ctx: &ExtContext<'_>, cfg: &BmcConfig, payload: &BoundedView, faulty: bool) {
    let rem = payload.len() - 4;
    if rem == 0 {
        bump(ctx, cfg, Counter::Drop);
        return;
    }
    let window = payload.subview(4, rem.min(MAX_KEY_LEN));
    let Some(key_len) = scan_key(&window) else {
        bump(ctx, cfg, Counter::Drop);
        return;
    };
    if key_len == 0 {
        bump(ctx, cfg, Counter::Drop);
        return;
    }
    if faulty {
        // Off-by-one: "verify" the terminator by reading the byte after the
        // key inside the key window. For a maximal key that byte is one
        // past the window and the bounds check fires.
        let _terminator = window.read_u8(key_len);
    }
    let key = window.read(0, key_len);
    let hash = hash_key(cfg.hash_seed, &key);
    let index = hash % cfg.entries;

    let invalidated = ctx
        .map_lookup(&cfg.cache_map_id(), &index.to_le_bytes())
        .map(|guard| {
            guard.with_write(|entry| {
                if entry[ENTRY_VALID_OFF] == 0 {
                    return false;
                }
                let stored_hash =
                    u32::from_le_bytes(entry[ENTRY_HASH_OFF..ENTRY_HASH_OFF + 4].try_into().unwrap());
                let stored_key_len = u32::from_le_bytes(
                    entry[ENTRY_KEY_LEN_OFF..ENTRY_KEY_LEN_OFF + 4].try_into().unwrap(),
                ) as usize;
                if stored_hash != hash
                    || stored_key_len != key.len()
                    || entry[ENTRY_KEY_OFF..ENTRY_KEY_OFF + stored_key_len] != key[..]
                {
                    return false;
                }
                entry[ENTRY_VALID_OFF] = 0;
                true
            })
        })
        .unwrap_or(false);
    if invalidated {
        bump(ctx, cfg, Counter::Invalidation);
    }
}

/// The egress program's effect: cache a well-formed reply under `key`.
/// Oversized replies are skipped. Returns whether the entry was cached.
pub fn egress_fill(host: &Host, cfg: &BmcConfig, key: &[u8], reply: &[u8]) -> bool {
    if reply.len() > cfg.max_data as usize || key.len() > MAX_KEY_LEN || key.is_empty() {
        return false;
    }
    let Some(map) = host.map(&cfg.cache_map_id()) else {
        return false;
    };
    let hash = hash_key(cfg.hash_seed, key);
    let index = hash % cfg.entries;
    let mut entry = vec![0u8; cfg.entry_value_bytes() as usize];
    entry[ENTRY_VALID_OFF] = 1;
    entry[ENTRY_HASH_OFF..ENTRY_HASH_OFF + 4].copy_from_slice(&hash.to_le_bytes());
    entry[ENTRY_KEY_LEN_OFF..ENTRY_KEY_LEN_OFF + 4]
        .copy_from_slice(&(key.len() as u32).to_le_bytes());
    entry[ENTRY_KEY_OFF..ENTRY_KEY_OFF + key.len()].copy_from_slice(key);
    entry[ENTRY_DATA_LEN_OFF..ENTRY_DATA_LEN_OFF + 4]
        .copy_from_slice(&(reply.len() as u32).to_le_bytes());
    entry[ENTRY_DATA_OFF..ENTRY_DATA_OFF + reply.len()].copy_from_slice(reply);
    map.update(0, &index.to_le_bytes(), &entry).is_ok()
}

/// Reads the aggregated statistics off the per-worker stats map.
pub fn read_stats(host: &Host, cfg: &BmcConfig) -> BmcStats {
    let Some(map) = host.map(&cfg.stats_map_id()) else {
        return BmcStats::default();
    };
    let read = |c: Counter| map.sum_per_worker_u64(c as u32, 0);
    BmcStats {
        get_recv: read(Counter::GetRecv),
        set_recv: read(Counter::SetRecv),
        hit: read(Counter::Hit),
        miss: read(Counter::Miss),
        invalidation: read(Counter::Invalidation),
        drop: read(Counter::Drop),
    }
}
