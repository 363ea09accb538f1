//! Host ring buffer for panic records.

use parking_lot::Mutex;

use crate::panic::PanicRecord;

/// Append-only log of panic records, one per panic.
///
/// Unbounded at desk scale; the in-kernel analogue is the kernel ring
/// buffer, which overwrites. Readers get snapshots, never references.
#[derive(Debug, Default)]
pub struct RingBuffer {
    records: Mutex<Vec<PanicRecord>>,
}

impl RingBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&self, record: PanicRecord) {
        self.records.lock().push(record);
    }

    pub fn len(&self) -> usize {
        self.records.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Snapshot of all records in append order.
    pub fn snapshot(&self) -> Vec<PanicRecord> {
        self.records.lock().clone()
    }

    /// Records appended after index `from`, for incremental readers.
    pub fn since(&self, from: usize) -> Vec<PanicRecord> {
        let records = self.records.lock();
        records.get(from..).map(|s| s.to_vec()).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panic::PanicReason;

    fn rec(ts: u64) -> PanicRecord {
        PanicRecord {
            extension_id: "e".into(),
            worker_id: 0,
            reason: PanicReason::ExplicitPanic,
            message: String::new(),
            timestamp_ns: ts,
        }
    }

    #[test]
    fn append_order_preserved() {
        let ring = RingBuffer::new();
        ring.append(rec(1));
        ring.append(rec(2));
        ring.append(rec(3));
        let ts: Vec<u64> = ring.snapshot().iter().map(|r| r.timestamp_ns).collect();
        assert_eq!(ts, vec![1, 2, 3]);
        assert_eq!(ring.since(2).len(), 1);
        assert_eq!(ring.since(9).len(), 0);
    }
}
