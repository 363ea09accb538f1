//! Deterministic synthetic workload generation (`bmcgen`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::packet::{build_get_packet, build_set_packet, MAX_KEY_LEN};

/// Parameters of a generated workload.
#[derive(Debug, Clone)]
pub struct WorkloadSpec {
    /// Size of the key population.
    pub keys: u32,
    /// Fraction of requests that are GETs (the rest are SETs).
    pub get_ratio: f64,
    pub seed: u64,
    /// Number of requests.
    pub count: u64,
    /// Payload bytes stored under each key (SETs pick a size up to this).
    pub max_value_len: usize,
    /// Fraction of SETs that use a maximal-length key; the faulty variant
    /// panics exactly on those.
    pub max_key_ratio: f64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            keys: 1000,
            get_ratio: 0.9,
            seed: 1,
            count: 10_000,
            max_value_len: 64,
            max_key_ratio: 0.0,
        }
    }
}

/// One request, before framing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Get { key: Vec<u8> },
    Set { key: Vec<u8>, flags: u32, data: Vec<u8> },
}

impl Request {
    pub fn key(&self) -> &[u8] {
        match self {
            Request::Get { key } => key,
            Request::Set { key, .. } => key,
        }
    }

    /// Frames the request, stamping `request_id`.
    pub fn to_frame(&self, request_id: u16) -> Vec<u8> {
        match self {
            Request::Get { key } => build_get_packet(request_id, key),
            Request::Set { key, flags, data } => build_set_packet(request_id, key, *flags, data),
        }
    }
}

/// The key for index `i` of the population; `maximal` stretches it to the
/// longest supported length.
pub fn nth_key(i: u32, maximal: bool) -> Vec<u8> {
    let base = format!("key-{i:08}");
    if !maximal {
        return base.into_bytes();
    }
    let mut key = base.into_bytes();
    key.resize(MAX_KEY_LEN, b'x');
    key
}

/// Generates `spec.count` requests, deterministically from `spec.seed`.
pub fn generate(spec: &WorkloadSpec) -> Vec<Request> {
    assert!(spec.keys > 0, "key population must be nonempty");
    assert!(
        (0.0..=1.0).contains(&spec.get_ratio),
        "get_ratio must be within [0, 1]"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut requests = Vec::with_capacity(spec.count as usize);
    for _ in 0..spec.count {
        let idx = rng.gen_range(0..spec.keys);
        if rng.gen_bool(spec.get_ratio) {
            requests.push(Request::Get {
                key: nth_key(idx, false),
            });
        } else {
            let maximal = spec.max_key_ratio > 0.0 && rng.gen_bool(spec.max_key_ratio);
            let len = rng.gen_range(1..=spec.max_value_len.max(1));
            let mut data = vec![0u8; len];
            rng.fill(&mut data[..]);
            // Keep payloads on the text-safe side of the protocol.
            for b in &mut data {
                *b = b'a' + (*b % 26);
            }
            requests.push(Request::Set {
                key: nth_key(idx, maximal),
                flags: rng.gen_range(0..16),
                data,
            });
        }
    }
    requests
}

/// Frames a request list into a packet trace, request ids running from 0.
pub fn to_frames(requests: &[Request]) -> Vec<Vec<u8>> {
    requests
        .iter()
        .enumerate()
        .map(|(i, r)| r.to_frame(i as u16))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = WorkloadSpec {
            count: 500,
            ..WorkloadSpec::default()
        };
        assert_eq!(generate(&spec), generate(&spec));
        let other = WorkloadSpec {
            seed: 2,
            ..spec.clone()
        };
        assert_ne!(generate(&spec), generate(&other));
    }

    #[test]
    fn get_ratio_one_generates_only_gets() {
        let spec = WorkloadSpec {
            get_ratio: 1.0,
            count: 200,
            ..WorkloadSpec::default()
        };
        assert!(generate(&spec)
            .iter()
            .all(|r| matches!(r, Request::Get { .. })));
    }

    #[test]
    fn maximal_keys_have_max_length() {
        let key = nth_key(3, true);
        assert_eq!(key.len(), MAX_KEY_LEN);
        assert!(key.starts_with(b"key-00000003"));
    }
}
