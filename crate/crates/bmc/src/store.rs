//! Host-side reference store: the stand-in for the user-space server
//! behind the cache.
//!
//! The simulation consults it on every `Pass` verdict — a GET miss is
//! answered from here (and the reply fed back to the cache, playing the
//! egress program), a SET lands here.

use std::collections::HashMap;

use crate::packet::encode_value_reply;

/// Key → (flags, data).
#[derive(Debug, Default, Clone)]
pub struct RefStore {
    items: HashMap<Vec<u8>, (u32, Vec<u8>)>,
}

impl RefStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &[u8], flags: u32, data: &[u8]) {
        self.items.insert(key.to_vec(), (flags, data.to_vec()));
    }

    pub fn get(&self, key: &[u8]) -> Option<(u32, &[u8])> {
        self.items.get(key).map(|(f, d)| (*f, d.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// The reply payload the server would send for a GET of `key`.
    pub fn reply_for(&self, key: &[u8]) -> Option<Vec<u8>> {
        self.get(key)
            .map(|(flags, data)| encode_value_reply(key, flags, data))
    }
}
