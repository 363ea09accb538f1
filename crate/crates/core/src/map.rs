//! Shared key-value maps: the state extensions may keep across dispatches.
//!
//! Three kinds, mirroring the usual extension-map menagerie: `array`
//! (index-addressed, preallocated and zero-initialized), `hash` (open
//! addressing, bounded capacity, deterministic seeded hash), and
//! `per-worker` (an array per lane, no cross-worker contention). Maps are
//! internally synchronized and linearizable per operation. Values are
//! reference-counted cells so a delete can never free memory a worker still
//! holds a guard over; reclamation happens when the last guard drops.

use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Map kind, as declared in manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapKind {
    Array,
    Hash,
    PerWorker,
}

/// Declared shape of a map. Extensions sharing a `map_id` must declare
/// identical specs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapSpec {
    pub map_id: String,
    pub kind: MapKind,
    pub key_bytes: u32,
    pub value_bytes: u32,
    pub max_entries: u32,
}

/// A structurally invalid map spec.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum MapSpecError {
    #[error("map_id must be nonempty")]
    EmptyId,
    #[error("map {map_id}: max_entries must be at least 1")]
    NoEntries { map_id: String },
    #[error("map {map_id}: value_bytes must be at least 1")]
    EmptyValue { map_id: String },
    #[error("map {map_id}: {kind:?} maps are index-addressed and need key_bytes = 4, got {key_bytes}")]
    BadIndexKey {
        map_id: String,
        kind: MapKind,
        key_bytes: u32,
    },
    #[error("map {map_id}: key_bytes must be at least 1")]
    EmptyKey { map_id: String },
}

impl MapSpec {
    pub fn validate(&self) -> Result<(), MapSpecError> {
        if self.map_id.is_empty() {
            return Err(MapSpecError::EmptyId);
        }
        if self.max_entries == 0 {
            return Err(MapSpecError::NoEntries {
                map_id: self.map_id.clone(),
            });
        }
        if self.value_bytes == 0 {
            return Err(MapSpecError::EmptyValue {
                map_id: self.map_id.clone(),
            });
        }
        match self.kind {
            MapKind::Array | MapKind::PerWorker => {
                if self.key_bytes != 4 {
                    return Err(MapSpecError::BadIndexKey {
                        map_id: self.map_id.clone(),
                        kind: self.kind,
                        key_bytes: self.key_bytes,
                    });
                }
            }
            MapKind::Hash => {
                if self.key_bytes == 0 {
                    return Err(MapSpecError::EmptyKey {
                        map_id: self.map_id.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Map operation failure, returned (not panicked) to the caller.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum MapError {
    #[error("map {map_id} is full ({max_entries} entries)")]
    Full { map_id: String, max_entries: u32 },
    #[error("map {map_id}: index {index} out of range ({max_entries} entries)")]
    OutOfRange {
        map_id: String,
        index: u32,
        max_entries: u32,
    },
}

/// One value's storage. Shared between the map and any live guards; the
/// allocation is reclaimed when the last `Arc` drops.
#[derive(Debug)]
pub struct ValueCell {
    data: RwLock<Box<[u8]>>,
}

impl ValueCell {
    fn zeroed(len: usize) -> Arc<Self> {
        Arc::new(Self {
            data: RwLock::new(vec![0u8; len].into_boxed_slice()),
        })
    }

    pub fn with_read<R>(&self, f: impl FnOnce(&[u8]) -> R) -> R {
        f(&self.data.read())
    }

    pub fn with_write<R>(&self, f: impl FnOnce(&mut [u8]) -> R) -> R {
        f(&mut self.data.write())
    }

    pub fn read_to_vec(&self) -> Vec<u8> {
        self.data.read().to_vec()
    }

    fn overwrite(&self, bytes: &[u8]) {
        let mut data = self.data.write();
        debug_assert_eq!(data.len(), bytes.len());
        data.copy_from_slice(bytes);
    }
}

#[derive(Debug)]
enum Slot {
    Empty,
    Tombstone,
    Full { key: Box<[u8]>, cell: Arc<ValueCell> },
}

/// Open-addressing table with linear probing and tombstones. The physical
/// table is kept at least twice `max_entries` so probe chains terminate.
#[derive(Debug)]
struct HashTable {
    slots: Vec<Slot>,
    len: u32,
    seed: u64,
}

impl HashTable {
    fn new(max_entries: u32, seed: u64) -> Self {
        let cap = (max_entries as usize * 2).next_power_of_two().max(8);
        let mut slots = Vec::with_capacity(cap);
        slots.resize_with(cap, || Slot::Empty);
        Self {
            slots,
            len: 0,
            seed,
        }
    }

    fn probe_start(&self, key: &[u8]) -> usize {
        (fnv1a64(self.seed, key) as usize) & (self.slots.len() - 1)
    }

    fn find(&self, key: &[u8]) -> Option<usize> {
        let mask = self.slots.len() - 1;
        let mut i = self.probe_start(key);
        loop {
            match &self.slots[i] {
                Slot::Empty => return None,
                Slot::Tombstone => {}
                Slot::Full { key: k, .. } if k.as_ref() == key => return Some(i),
                Slot::Full { .. } => {}
            }
            i = (i + 1) & mask;
        }
    }

    fn insert_slot(&self, key: &[u8]) -> usize {
        let mask = self.slots.len() - 1;
        let mut i = self.probe_start(key);
        loop {
            match &self.slots[i] {
                Slot::Empty | Slot::Tombstone => return i,
                Slot::Full { .. } => i = (i + 1) & mask,
            }
        }
    }
}

#[derive(Debug)]
enum MapInner {
    Array { slots: Vec<Arc<ValueCell>> },
    Hash { table: Mutex<HashTable> },
    PerWorker { lanes: Vec<Vec<Arc<ValueCell>>> },
}

/// A shared map instance, created by the host on first declaration.
#[derive(Debug)]
pub struct SharedMap {
    spec: MapSpec,
    inner: MapInner,
}

impl SharedMap {
    pub(crate) fn create(spec: MapSpec, num_workers: usize, hash_seed: u64) -> Arc<SharedMap> {
        let value_len = spec.value_bytes as usize;
        let entries = spec.max_entries as usize;
        let inner = match spec.kind {
            MapKind::Array => MapInner::Array {
                slots: (0..entries).map(|_| ValueCell::zeroed(value_len)).collect(),
            },
            MapKind::Hash => MapInner::Hash {
                table: Mutex::new(HashTable::new(spec.max_entries, hash_seed)),
            },
            MapKind::PerWorker => MapInner::PerWorker {
                lanes: (0..num_workers)
                    .map(|_| (0..entries).map(|_| ValueCell::zeroed(value_len)).collect())
                    .collect(),
            },
        };
        Arc::new(SharedMap { spec, inner })
    }

    pub fn spec(&self) -> &MapSpec {
        &self.spec
    }

    fn check_key(&self, key: &[u8]) {
        assert_eq!(
            key.len(),
            self.spec.key_bytes as usize,
            "map {}: key size mismatch (framework misuse)",
            self.spec.map_id
        );
    }

    fn index(&self, key: &[u8]) -> u32 {
        u32::from_le_bytes(key.try_into().expect("index keys are 4 bytes"))
    }

    /// Looks up `key`; a hit returns the value cell. Array and per-worker
    /// slots within range always hit (they are preallocated and zeroed).
    pub fn lookup(&self, worker_id: usize, key: &[u8]) -> Option<Arc<ValueCell>> {
        self.check_key(key);
        match &self.inner {
            MapInner::Array { slots } => {
                let idx = self.index(key);
                slots.get(idx as usize).cloned()
            }
            MapInner::Hash { table } => {
                let table = table.lock();
                table.find(key).map(|i| match &table.slots[i] {
                    Slot::Full { cell, .. } => Arc::clone(cell),
                    _ => unreachable!("find returned a non-full slot"),
                })
            }
            MapInner::PerWorker { lanes } => {
                let idx = self.index(key);
                lanes[worker_id].get(idx as usize).cloned()
            }
        }
    }

    /// Inserts or overwrites `key`. Hash maps at capacity reject new keys
    /// with [`MapError::Full`]; overwrites always succeed.
    pub fn update(&self, worker_id: usize, key: &[u8], value: &[u8]) -> Result<(), MapError> {
        self.check_key(key);
        assert_eq!(
            value.len(),
            self.spec.value_bytes as usize,
            "map {}: value size mismatch (framework misuse)",
            self.spec.map_id
        );
        match &self.inner {
            MapInner::Array { slots } => {
                let idx = self.index(key);
                let cell = slots.get(idx as usize).ok_or(MapError::OutOfRange {
                    map_id: self.spec.map_id.clone(),
                    index: idx,
                    max_entries: self.spec.max_entries,
                })?;
                cell.overwrite(value);
                Ok(())
            }
            MapInner::Hash { table } => {
                let mut table = table.lock();
                if let Some(i) = table.find(key) {
                    match &table.slots[i] {
                        Slot::Full { cell, .. } => cell.overwrite(value),
                        _ => unreachable!("find returned a non-full slot"),
                    }
                    return Ok(());
                }
                if table.len >= self.spec.max_entries {
                    return Err(MapError::Full {
                        map_id: self.spec.map_id.clone(),
                        max_entries: self.spec.max_entries,
                    });
                }
                let i = table.insert_slot(key);
                let cell = ValueCell::zeroed(value.len());
                cell.overwrite(value);
                table.slots[i] = Slot::Full {
                    key: key.to_vec().into_boxed_slice(),
                    cell,
                };
                table.len += 1;
                Ok(())
            }
            MapInner::PerWorker { lanes } => {
                let idx = self.index(key);
                let cell =
                    lanes[worker_id]
                        .get(idx as usize)
                        .ok_or(MapError::OutOfRange {
                            map_id: self.spec.map_id.clone(),
                            index: idx,
                            max_entries: self.spec.max_entries,
                        })?;
                cell.overwrite(value);
                Ok(())
            }
        }
    }

    /// Deletes `key`, returning whether it existed. Hash maps drop the
    /// entry (storage outlives live guards via the cell's refcount); array
    /// and per-worker maps zero the slot in place.
    pub fn delete(&self, worker_id: usize, key: &[u8]) -> bool {
        self.check_key(key);
        match &self.inner {
            MapInner::Array { slots } => {
                let idx = self.index(key);
                match slots.get(idx as usize) {
                    Some(cell) => {
                        cell.with_write(|b| b.fill(0));
                        true
                    }
                    None => false,
                }
            }
            MapInner::Hash { table } => {
                let mut table = table.lock();
                match table.find(key) {
                    Some(i) => {
                        table.slots[i] = Slot::Tombstone;
                        table.len -= 1;
                        true
                    }
                    None => false,
                }
            }
            MapInner::PerWorker { lanes } => {
                let idx = self.index(key);
                match lanes[worker_id].get(idx as usize) {
                    Some(cell) => {
                        cell.with_write(|b| b.fill(0));
                        true
                    }
                    None => false,
                }
            }
        }
    }

    /// Number of live entries (hash) or fixed capacity (array kinds).
    pub fn len(&self, worker_id: usize) -> usize {
        match &self.inner {
            MapInner::Array { slots } => slots.len(),
            MapInner::Hash { table } => table.lock().len as usize,
            MapInner::PerWorker { lanes } => lanes[worker_id].len(),
        }
    }

    pub fn is_empty(&self, worker_id: usize) -> bool {
        self.len(worker_id) == 0
    }

    /// Sums a little-endian u64 at `offset` in every lane's slot `index`;
    /// how per-worker counters are read host-side.
    pub fn sum_per_worker_u64(&self, index: u32, offset: usize) -> u64 {
        match &self.inner {
            MapInner::PerWorker { lanes } => lanes
                .iter()
                .filter_map(|lane| lane.get(index as usize))
                .map(|cell| {
                    cell.with_read(|b| {
                        u64::from_le_bytes(b[offset..offset + 8].try_into().expect("8 bytes"))
                    })
                })
                .sum(),
            _ => panic!(
                "map {} is not per-worker (framework misuse)",
                self.spec.map_id
            ),
        }
    }
}

/// Seeded FNV-1a over `bytes`; the deterministic hash behind hash maps.
pub fn fnv1a64(seed: u64, bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn hash_spec(max: u32) -> MapSpec {
        MapSpec {
            map_id: "h".into(),
            kind: MapKind::Hash,
            key_bytes: 8,
            value_bytes: 4,
            max_entries: max,
        }
    }

    #[test]
    fn array_slots_prezeroed_and_bounded() {
        let spec = MapSpec {
            map_id: "a".into(),
            kind: MapKind::Array,
            key_bytes: 4,
            value_bytes: 8,
            max_entries: 4,
        };
        let map = SharedMap::create(spec, 1, 0);
        let hit = map.lookup(0, &3u32.to_le_bytes()).unwrap();
        assert_eq!(hit.read_to_vec(), vec![0u8; 8]);
        assert!(map.lookup(0, &4u32.to_le_bytes()).is_none());
        assert!(matches!(
            map.update(0, &9u32.to_le_bytes(), &[1u8; 8]),
            Err(MapError::OutOfRange { index: 9, .. })
        ));
    }

    #[test]
    fn hash_full_rejects_new_keys_but_not_overwrites() {
        let map = SharedMap::create(hash_spec(2), 1, 7);
        map.update(0, &1u64.to_le_bytes(), &[1; 4]).unwrap();
        map.update(0, &2u64.to_le_bytes(), &[2; 4]).unwrap();
        assert!(matches!(
            map.update(0, &3u64.to_le_bytes(), &[3; 4]),
            Err(MapError::Full { .. })
        ));
        map.update(0, &2u64.to_le_bytes(), &[9; 4]).unwrap();
        assert_eq!(
            map.lookup(0, &2u64.to_le_bytes()).unwrap().read_to_vec(),
            vec![9; 4]
        );
    }

    #[test]
    fn deleted_value_survives_while_held() {
        let map = SharedMap::create(hash_spec(8), 1, 7);
        let key = 5u64.to_le_bytes();
        map.update(0, &key, &[7; 4]).unwrap();
        let held = map.lookup(0, &key).unwrap();
        let weak = Arc::downgrade(&held);
        assert!(map.delete(0, &key));
        assert!(map.lookup(0, &key).is_none());
        assert_eq!(held.read_to_vec(), vec![7; 4]);
        drop(held);
        assert!(weak.upgrade().is_none(), "storage reclaimed on last drop");
    }

    #[test]
    fn per_worker_lanes_are_independent_and_summable() {
        let spec = MapSpec {
            map_id: "pw".into(),
            kind: MapKind::PerWorker,
            key_bytes: 4,
            value_bytes: 8,
            max_entries: 2,
        };
        let map = SharedMap::create(spec, 3, 0);
        for w in 0..3 {
            map.update(w, &0u32.to_le_bytes(), &((w as u64 + 1) * 10).to_le_bytes())
                .unwrap();
        }
        assert_eq!(map.sum_per_worker_u64(0, 0), 60);
        assert_eq!(
            map.lookup(1, &0u32.to_le_bytes()).unwrap().read_to_vec(),
            20u64.to_le_bytes().to_vec()
        );
    }

    // Model check: random op sequences against a BTreeMap reference.
    #[test]
    fn hash_map_matches_reference_model() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let map = SharedMap::create(hash_spec(32), 1, 99);
        let mut model: BTreeMap<u64, [u8; 4]> = BTreeMap::new();
        for _ in 0..10_000 {
            let key: u64 = rng.gen_range(0..64);
            let kb = key.to_le_bytes();
            match rng.gen_range(0..3) {
                0 => {
                    let got = map.lookup(0, &kb).map(|c| c.read_to_vec());
                    let want = model.get(&key).map(|v| v.to_vec());
                    assert_eq!(got, want, "lookup {key}");
                }
                1 => {
                    let val = [rng.gen::<u8>(); 4];
                    let res = map.update(0, &kb, &val);
                    if model.contains_key(&key) || model.len() < 32 {
                        assert!(res.is_ok());
                        model.insert(key, val);
                    } else {
                        assert!(matches!(res, Err(MapError::Full { .. })));
                    }
                }
                _ => {
                    let got = map.delete(0, &kb);
                    let want = model.remove(&key).is_some();
                    assert_eq!(got, want, "delete {key}");
                }
            }
        }
    }
}
