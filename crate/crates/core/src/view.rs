//! Length-carrying byte windows with dynamic bounds checks.
//!
//! A [`BoundedView`] is the only way extension code touches packet or data
//! bytes. Every access is checked against the view's length before the
//! backing storage is touched; a violation raises an
//! [`crate::panic::PanicReason::OutOfBounds`] panic that unwinds to the
//! dispatcher. Views are confined to the dispatching worker.

use std::cell::RefCell;
use std::rc::Rc;

use crate::panic::{raise, PanicReason};

/// Shared handle to a mutable byte buffer, typically one packet frame.
///
/// The harness keeps a clone so mutations made by the extension (e.g. a
/// rewritten reply) stay visible after dispatch.
#[derive(Debug, Clone)]
pub struct PacketBuf {
    data: Rc<RefCell<Vec<u8>>>,
}

impl PacketBuf {
    pub fn new(bytes: Vec<u8>) -> Self {
        Self {
            data: Rc::new(RefCell::new(bytes)),
        }
    }

    pub fn len(&self) -> usize {
        self.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Full-length view over the current contents.
    pub fn view(&self) -> BoundedView {
        BoundedView {
            data: Rc::clone(&self.data),
            offset: 0,
            len: self.len(),
        }
    }

    /// Copies the current contents out.
    pub fn to_vec(&self) -> Vec<u8> {
        self.data.borrow().clone()
    }

    /// Grows or shrinks the frame, zero-filling new bytes. Views taken
    /// before a shrink become stale and raise `OutOfBounds` on access.
    pub fn resize(&self, new_len: usize) {
        self.data.borrow_mut().resize(new_len, 0);
    }
}

impl From<&[u8]> for PacketBuf {
    fn from(bytes: &[u8]) -> Self {
        PacketBuf::new(bytes.to_vec())
    }
}

/// A byte window `[offset, offset + len)` over a [`PacketBuf`].
#[derive(Debug, Clone)]
pub struct BoundedView {
    data: Rc<RefCell<Vec<u8>>>,
    offset: usize,
    len: usize,
}

impl BoundedView {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Checks `[at, at + want)` against the window, then against the
    /// backing buffer (stale views after a shrink fail here). Returns the
    /// absolute start offset.
    fn check(&self, at: usize, want: usize, op: &str) -> usize {
        let end = at.checked_add(want).unwrap_or(usize::MAX);
        if end > self.len {
            raise(
                PanicReason::OutOfBounds,
                format!("{op} of {want} bytes at {at} beyond view length {}", self.len),
            );
        }
        let abs = self.offset + at;
        if self.offset + self.len > self.data.borrow().len() {
            raise(
                PanicReason::OutOfBounds,
                format!("{op} through a stale view: backing buffer shrank"),
            );
        }
        abs
    }

    /// Reads `len` bytes starting at `offset`; panics `OutOfBounds` past
    /// the window.
    pub fn read(&self, offset: usize, len: usize) -> Vec<u8> {
        let abs = self.check(offset, len, "read");
        self.data.borrow()[abs..abs + len].to_vec()
    }

    /// Writes `bytes` starting at `offset`; panics `OutOfBounds` past the
    /// window.
    pub fn write(&self, offset: usize, bytes: &[u8]) {
        let abs = self.check(offset, bytes.len(), "write");
        self.data.borrow_mut()[abs..abs + bytes.len()].copy_from_slice(bytes);
    }

    pub fn read_u8(&self, offset: usize) -> u8 {
        let abs = self.check(offset, 1, "read");
        self.data.borrow()[abs]
    }

    pub fn write_u8(&self, offset: usize, value: u8) {
        let abs = self.check(offset, 1, "write");
        self.data.borrow_mut()[abs] = value;
    }

    pub fn read_u16(&self, offset: usize) -> u16 {
        let b = self.read(offset, 2);
        u16::from_le_bytes([b[0], b[1]])
    }

    pub fn write_u16(&self, offset: usize, value: u16) {
        self.write(offset, &value.to_le_bytes());
    }

    pub fn read_u32(&self, offset: usize) -> u32 {
        let b = self.read(offset, 4);
        u32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }

    pub fn write_u32(&self, offset: usize, value: u32) {
        self.write(offset, &value.to_le_bytes());
    }

    pub fn read_u64(&self, offset: usize) -> u64 {
        let b = self.read(offset, 8);
        u64::from_le_bytes(b.try_into().expect("read returned 8 bytes"))
    }

    pub fn write_u64(&self, offset: usize, value: u64) {
        self.write(offset, &value.to_le_bytes());
    }

    /// A narrower window `[offset, offset + len)` inside this one. The
    /// subview carries its own length; accesses through it are checked
    /// against that length.
    pub fn subview(&self, offset: usize, len: usize) -> BoundedView {
        self.check(offset, len, "subview");
        BoundedView {
            data: Rc::clone(&self.data),
            offset: self.offset + offset,
            len,
        }
    }

    /// Runs `f` over the window's bytes without copying.
    pub fn with_bytes<R>(&self, f: impl FnOnce(&[u8]) -> R) -> R {
        let abs = self.check(0, self.len, "read");
        f(&self.data.borrow()[abs..abs + self.len])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panic::UnwindSignal;

    fn catch_reason(f: impl FnOnce()) -> Option<PanicReason> {
        crate::panic::install_hook();
        let err = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).err()?;
        err.downcast::<UnwindSignal>().ok().map(|s| s.reason)
    }

    #[test]
    fn exact_fit_read_ok() {
        let buf = PacketBuf::new(vec![7u8; 64]);
        let v = buf.view();
        assert_eq!(v.read(0, 64).len(), 64);
    }

    #[test]
    fn read_past_end_panics_out_of_bounds() {
        let buf = PacketBuf::new(vec![0u8; 64]);
        let v = buf.view();
        assert_eq!(
            catch_reason(move || {
                v.read(60, 8);
            }),
            Some(PanicReason::OutOfBounds)
        );
    }

    #[test]
    fn subview_offsets_rebase() {
        let buf = PacketBuf::new((0..32).collect());
        let v = buf.view().subview(8, 16);
        assert_eq!(v.read_u8(15), 23);
        assert_eq!(
            catch_reason(move || {
                v.read_u8(16);
            }),
            Some(PanicReason::OutOfBounds)
        );
    }

    #[test]
    fn offset_overflow_is_out_of_bounds_not_wraparound() {
        let buf = PacketBuf::new(vec![0u8; 16]);
        let v = buf.view();
        assert_eq!(
            catch_reason(move || {
                v.read(usize::MAX - 2, 8);
            }),
            Some(PanicReason::OutOfBounds)
        );
    }

    #[test]
    fn words_round_trip_little_endian() {
        let buf = PacketBuf::new(vec![0u8; 16]);
        let v = buf.view();
        v.write_u32(4, 0xAABBCCDD);
        assert_eq!(v.read(4, 4), vec![0xDD, 0xCC, 0xBB, 0xAA]);
        assert_eq!(v.read_u32(4), 0xAABBCCDD);
        v.write_u16(0, 0x1122);
        assert_eq!(v.read_u16(0), 0x1122);
        v.write_u64(8, u64::MAX - 5);
        assert_eq!(v.read_u64(8), u64::MAX - 5);
    }

    #[test]
    fn stale_view_after_shrink_panics() {
        let buf = PacketBuf::new(vec![0u8; 64]);
        let v = buf.view();
        buf.resize(16);
        assert_eq!(
            catch_reason(move || {
                v.read_u8(40);
            }),
            Some(PanicReason::OutOfBounds)
        );
    }
}
