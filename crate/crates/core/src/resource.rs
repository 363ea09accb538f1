//! Acquired-resource tracking: guards, spinlocks, refcounted objects.
//!
//! Every resource an extension acquires through a helper is pushed onto the
//! worker's cleanup registry together with a release action bound at
//! acquisition time. On the normal path the guard's finalizer pops its own
//! record and runs the release; on a panic the guards stand down and the
//! panic path drains the whole registry in LIFO order instead, so cleanup
//! never depends on unwinding reaching any particular frame.

use std::fmt;
use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};
use std::sync::Arc;

use crate::map::ValueCell;
use crate::worker::WorkerLane;

/// What a cleanup record stands for; carried in traces and audits.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum RecordKind {
    Lock(String),
    MapValueRef { map_id: String, key: Vec<u8> },
    Refcount(String),
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecordKind::Lock(id) => write!(f, "lock:{id}"),
            RecordKind::MapValueRef { map_id, .. } => write!(f, "mapref:{map_id}"),
            RecordKind::Refcount(id) => write!(f, "ref:{id}"),
        }
    }
}

/// One acquired resource plus its release action. Records are pushed at
/// acquisition and popped exactly once: by the owning guard on the normal
/// path, or by `release_all` on the panic path.
pub struct CleanupRecord {
    pub(crate) kind: RecordKind,
    pub(crate) seq: u64,
    pub(crate) release: Option<Box<dyn FnOnce()>>,
}

impl fmt::Debug for CleanupRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CleanupRecord")
            .field("kind", &self.kind)
            .field("seq", &self.seq)
            .finish()
    }
}

/// A host-global spinlock extensions can acquire by id.
///
/// State is either unlocked or owned by a worker; only the owning worker
/// (or its panic path) may release it.
#[derive(Debug)]
pub struct SpinlockCell {
    lock_id: String,
    // 0 = unlocked, otherwise worker_id + 1.
    state: AtomicU64,
}

const SPINS_BEFORE_YIELD: u32 = 64;

impl SpinlockCell {
    pub fn new(lock_id: &str) -> Arc<Self> {
        Arc::new(Self {
            lock_id: lock_id.to_string(),
            state: AtomicU64::new(0),
        })
    }

    pub fn lock_id(&self) -> &str {
        &self.lock_id
    }

    pub fn is_unlocked(&self) -> bool {
        self.state.load(Ordering::Acquire) == 0
    }

    pub fn holder(&self) -> Option<usize> {
        match self.state.load(Ordering::Acquire) {
            0 => None,
            w => Some((w - 1) as usize),
        }
    }

    /// Spins until the lock is held by `worker_id`. Yields the lane every
    /// few iterations so a contended simulated host stays responsive.
    pub fn lock(&self, worker_id: usize) {
        let tag = worker_id as u64 + 1;
        let mut spins = 0u32;
        while self
            .state
            .compare_exchange_weak(0, tag, Ordering::Acquire, Ordering::Relaxed)
            .is_err()
        {
            spins += 1;
            if spins % SPINS_BEFORE_YIELD == 0 {
                std::thread::yield_now();
            } else {
                std::hint::spin_loop();
            }
        }
    }

    /// Releases the lock; caller must be the holder.
    pub fn unlock(&self, worker_id: usize) {
        let tag = worker_id as u64 + 1;
        let prev = self
            .state
            .compare_exchange(tag, 0, Ordering::Release, Ordering::Relaxed);
        debug_assert!(prev.is_ok(), "lock {} released by non-holder", self.lock_id);
    }
}

/// A refcounted demo object; acquire/release must balance across any
/// dispatch, panicked or not.
#[derive(Debug)]
pub struct RefObject {
    object_id: String,
    count: AtomicI64,
}

impl RefObject {
    pub fn new(object_id: &str) -> Arc<Self> {
        Arc::new(Self {
            object_id: object_id.to_string(),
            count: AtomicI64::new(0),
        })
    }

    pub fn object_id(&self) -> &str {
        &self.object_id
    }

    pub fn count(&self) -> i64 {
        self.count.load(Ordering::Acquire)
    }

    pub(crate) fn acquire(&self) {
        self.count.fetch_add(1, Ordering::AcqRel);
    }

    pub(crate) fn release(&self) {
        self.count.fetch_sub(1, Ordering::AcqRel);
    }
}

// Guards stand down while a panic is unwinding: the panic path owns cleanup
// then, draining the registry LIFO. Running releases from guard finalizers
// during unwinding would double-release and would make cleanup order depend
// on stack shape.
fn normal_path() -> bool {
    !std::thread::panicking()
}

/// Guard for a held spinlock. Dropping it releases the lock and pops its
/// registry record.
pub struct LockGuard<'a> {
    lane: &'a WorkerLane,
    seq: u64,
    lock_id: String,
}

impl<'a> LockGuard<'a> {
    pub(crate) fn new(lane: &'a WorkerLane, seq: u64, lock_id: String) -> Self {
        Self { lane, seq, lock_id }
    }

    pub fn lock_id(&self) -> &str {
        &self.lock_id
    }

    /// Acquisition sequence number, for release-order audits.
    pub fn seq(&self) -> u64 {
        self.seq
    }
}

impl Drop for LockGuard<'_> {
    fn drop(&mut self) {
        if normal_path() {
            self.lane.pop_resource(self.seq);
            self.lane.set_lock_held(false);
        }
    }
}

/// Guard over a map value, recorded in the cleanup registry. Grants access
/// to exactly the map's declared value size; the underlying storage cannot
/// be reclaimed while the guard lives.
pub struct MapValueGuard<'a> {
    lane: &'a WorkerLane,
    seq: u64,
    cell: Arc<ValueCell>,
}

impl<'a> MapValueGuard<'a> {
    pub(crate) fn new(lane: &'a WorkerLane, seq: u64, cell: Arc<ValueCell>) -> Self {
        Self { lane, seq, cell }
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn with_read<R>(&self, f: impl FnOnce(&[u8]) -> R) -> R {
        self.cell.with_read(f)
    }

    pub fn with_write<R>(&self, f: impl FnOnce(&mut [u8]) -> R) -> R {
        self.cell.with_write(f)
    }

    pub fn read_to_vec(&self) -> Vec<u8> {
        self.cell.read_to_vec()
    }
}

impl Drop for MapValueGuard<'_> {
    fn drop(&mut self) {
        if normal_path() {
            self.lane.pop_resource(self.seq);
        }
    }
}

/// Guard over an acquired refcount.
pub struct RefGuard<'a> {
    lane: &'a WorkerLane,
    seq: u64,
    object: Arc<RefObject>,
}

impl<'a> RefGuard<'a> {
    pub(crate) fn new(lane: &'a WorkerLane, seq: u64, object: Arc<RefObject>) -> Self {
        Self { lane, seq, object }
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn object_id(&self) -> &str {
        self.object.object_id()
    }
}

impl Drop for RefGuard<'_> {
    fn drop(&mut self) {
        if normal_path() {
            self.lane.pop_resource(self.seq);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spinlock_hand_off_between_workers() {
        let lock = SpinlockCell::new("l0");
        lock.lock(0);
        assert_eq!(lock.holder(), Some(0));
        let contender = {
            let lock = Arc::clone(&lock);
            std::thread::spawn(move || {
                lock.lock(1);
                lock.unlock(1);
            })
        };
        std::thread::sleep(std::time::Duration::from_millis(5));
        lock.unlock(0);
        contender.join().unwrap();
        assert!(lock.is_unlocked());
    }

    #[test]
    fn refcount_balances() {
        let obj = RefObject::new("o");
        obj.acquire();
        obj.acquire();
        assert_eq!(obj.count(), 2);
        obj.release();
        obj.release();
        assert_eq!(obj.count(), 0);
    }
}
