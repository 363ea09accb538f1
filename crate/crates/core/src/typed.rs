//! Registry-gated reinterpretation of raw bytes as typed records.
//!
//! Extensions may view a byte window as a record type, but only for layouts
//! the framework has registered: all-scalar field lists with no implicit
//! padding and no pointer-like kinds, so a cast can at worst produce a
//! logical error, never an unsafe access. Descriptor construction is sealed
//! behind [`DescriptorRegistry::register`]; a cast checks that the record
//! fits the window before any byte is touched.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

use crate::panic::{raise, PanicReason};
use crate::view::BoundedView;

/// Scalar field kinds allowed in registered layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarKind {
    U8,
    U16,
    U32,
    U64,
    I8,
    I16,
    I32,
    I64,
}

impl ScalarKind {
    pub fn width(self) -> u64 {
        match self {
            ScalarKind::U8 | ScalarKind::I8 => 1,
            ScalarKind::U16 | ScalarKind::I16 => 2,
            ScalarKind::U32 | ScalarKind::I32 => 4,
            ScalarKind::U64 | ScalarKind::I64 => 8,
        }
    }

    pub fn parse(name: &str) -> Option<ScalarKind> {
        Some(match name {
            "u8" => ScalarKind::U8,
            "u16" => ScalarKind::U16,
            "u32" => ScalarKind::U32,
            "u64" => ScalarKind::U64,
            "i8" => ScalarKind::I8,
            "i16" => ScalarKind::I16,
            "i32" => ScalarKind::I32,
            "i64" => ScalarKind::I64,
            _ => return None,
        })
    }

    pub fn is_signed(self) -> bool {
        matches!(
            self,
            ScalarKind::I8 | ScalarKind::I16 | ScalarKind::I32 | ScalarKind::I64
        )
    }
}

/// One field in a layout declaration. `kind` is a scalar name (`"u8"` ..
/// `"i64"`) or `"reserved"`, which declares an inaccessible gap of
/// `reserved_bytes`.
#[derive(Debug, Clone)]
pub struct FieldDecl {
    pub name: String,
    pub offset: u64,
    pub kind: String,
    pub reserved_bytes: u64,
}

impl FieldDecl {
    pub fn scalar(name: &str, offset: u64, kind: &str) -> Self {
        Self {
            name: name.to_string(),
            offset,
            kind: kind.to_string(),
            reserved_bytes: 0,
        }
    }

    pub fn reserved(offset: u64, bytes: u64) -> Self {
        Self {
            name: format!("_reserved_{offset}"),
            offset,
            kind: "reserved".to_string(),
            reserved_bytes: bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum FieldKind {
    Scalar(ScalarKind),
    Reserved { bytes: u64 },
}

#[derive(Debug, Clone)]
struct Field {
    name: String,
    offset: u64,
    kind: FieldKind,
}

impl Field {
    fn width(&self) -> u64 {
        match self.kind {
            FieldKind::Scalar(k) => k.width(),
            FieldKind::Reserved { bytes } => bytes,
        }
    }
}

/// A validated record layout. Only obtainable from a
/// [`DescriptorRegistry`], never constructed by extension code.
#[derive(Debug)]
pub struct TypeDescriptor {
    type_id: String,
    total_bytes: u64,
    fields: Vec<Field>,
}

impl TypeDescriptor {
    pub fn type_id(&self) -> &str {
        &self.type_id
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_bytes
    }

    fn field(&self, name: &str) -> Option<&Field> {
        self.fields.iter().find(|f| f.name == name)
    }
}

impl fmt::Display for TypeDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} bytes)", self.type_id, self.total_bytes)
    }
}

/// Rejection of a layout at registration time.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum DescriptorError {
    #[error("field {field}: kind {kind:?} is not a safe scalar")]
    NonScalarField { field: String, kind: String },
    #[error("field {field} at {offset} overlaps the previous field (or fields are unsorted)")]
    Overlap { field: String, offset: u64 },
    #[error("implicit padding before field {field} at {offset}: declare the gap as reserved")]
    ImplicitPadding { field: String, offset: u64 },
    #[error("layout covers {covered} bytes but total_bytes is {total}")]
    CoverageMismatch { covered: u64, total: u64 },
    #[error("reserved field {field} must have a positive byte count")]
    EmptyReserved { field: String },
    #[error("duplicate field name {field}")]
    DuplicateField { field: String },
    #[error("type {type_id} is already registered")]
    DuplicateType { type_id: String },
    #[error("type id must be nonempty")]
    EmptyTypeId,
}

/// The framework-sealed set of castable layouts.
#[derive(Debug, Default)]
pub struct DescriptorRegistry {
    types: Mutex<HashMap<String, Arc<TypeDescriptor>>>,
}

impl DescriptorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Validates and registers a layout. Fields must be sorted by offset,
    /// non-overlapping, all-scalar (or explicitly reserved), and must cover
    /// `total_bytes` exactly.
    pub fn register(
        &self,
        type_id: &str,
        total_bytes: u64,
        decls: &[FieldDecl],
    ) -> Result<Arc<TypeDescriptor>, DescriptorError> {
        if type_id.is_empty() {
            return Err(DescriptorError::EmptyTypeId);
        }
        let mut fields = Vec::with_capacity(decls.len());
        let mut cursor = 0u64;
        for decl in decls {
            let kind = if decl.kind == "reserved" {
                if decl.reserved_bytes == 0 {
                    return Err(DescriptorError::EmptyReserved {
                        field: decl.name.clone(),
                    });
                }
                FieldKind::Reserved {
                    bytes: decl.reserved_bytes,
                }
            } else {
                match ScalarKind::parse(&decl.kind) {
                    Some(k) => FieldKind::Scalar(k),
                    None => {
                        return Err(DescriptorError::NonScalarField {
                            field: decl.name.clone(),
                            kind: decl.kind.clone(),
                        })
                    }
                }
            };
            if decl.offset < cursor {
                return Err(DescriptorError::Overlap {
                    field: decl.name.clone(),
                    offset: decl.offset,
                });
            }
            if decl.offset > cursor {
                return Err(DescriptorError::ImplicitPadding {
                    field: decl.name.clone(),
                    offset: decl.offset,
                });
            }
            let field = Field {
                name: decl.name.clone(),
                offset: decl.offset,
                kind,
            };
            cursor = cursor
                .checked_add(field.width())
                .ok_or(DescriptorError::CoverageMismatch {
                    covered: u64::MAX,
                    total: total_bytes,
                })?;
            if fields
                .iter()
                .any(|f: &Field| f.name == field.name)
            {
                return Err(DescriptorError::DuplicateField { field: field.name });
            }
            fields.push(field);
        }
        if cursor != total_bytes {
            return Err(DescriptorError::CoverageMismatch {
                covered: cursor,
                total: total_bytes,
            });
        }
        let desc = Arc::new(TypeDescriptor {
            type_id: type_id.to_string(),
            total_bytes,
            fields,
        });
        let mut types = self.types.lock();
        if types.contains_key(type_id) {
            return Err(DescriptorError::DuplicateType {
                type_id: type_id.to_string(),
            });
        }
        types.insert(type_id.to_string(), Arc::clone(&desc));
        Ok(desc)
    }

    pub fn get(&self, type_id: &str) -> Option<Arc<TypeDescriptor>> {
        self.types.lock().get(type_id).cloned()
    }
}

/// A typed window produced by a successful checked cast. Field accessors
/// move exactly the field's declared width, little-endian.
#[derive(Debug, Clone)]
pub struct TypedView {
    view: BoundedView,
    desc: Arc<TypeDescriptor>,
}

impl TypedView {
    pub fn descriptor(&self) -> &TypeDescriptor {
        &self.desc
    }

    fn scalar_field(&self, name: &str) -> (u64, ScalarKind) {
        let field = self.desc.field(name).unwrap_or_else(|| {
            panic!("no field {name} in descriptor {}", self.desc.type_id)
        });
        match field.kind {
            FieldKind::Scalar(k) => (field.offset, k),
            FieldKind::Reserved { .. } => {
                panic!("field {name} in {} is reserved", self.desc.type_id)
            }
        }
    }

    /// Reads a field as raw little-endian bits, zero-extended to 64.
    pub fn get(&self, name: &str) -> u64 {
        let (offset, kind) = self.scalar_field(name);
        let at = offset as usize;
        match kind.width() {
            1 => self.view.read_u8(at) as u64,
            2 => self.view.read_u16(at) as u64,
            4 => self.view.read_u32(at) as u64,
            _ => self.view.read_u64(at),
        }
    }

    /// Reads a field sign-extended to i64 (unsigned kinds zero-extend).
    pub fn get_i(&self, name: &str) -> i64 {
        let (_, kind) = self.scalar_field(name);
        let raw = self.get(name);
        if !kind.is_signed() {
            return raw as i64;
        }
        match kind.width() {
            1 => raw as u8 as i8 as i64,
            2 => raw as u16 as i16 as i64,
            4 => raw as u32 as i32 as i64,
            _ => raw as i64,
        }
    }

    /// Writes a field, truncating `value` to the field width.
    pub fn set(&self, name: &str, value: u64) {
        let (offset, kind) = self.scalar_field(name);
        let at = offset as usize;
        match kind.width() {
            1 => self.view.write_u8(at, value as u8),
            2 => self.view.write_u16(at, value as u16),
            4 => self.view.write_u32(at, value as u32),
            _ => self.view.write_u64(at, value),
        }
    }
}

/// Casts the head of `view` to the registered layout `desc`.
///
/// Succeeds iff the record fits the window (`total_bytes <= view.len()`);
/// otherwise raises a `TransmuteViolation` panic before touching storage.
pub fn transmute_checked(view: &BoundedView, desc: &Arc<TypeDescriptor>) -> TypedView {
    if desc.total_bytes > view.len() as u64 {
        raise(
            PanicReason::TransmuteViolation,
            format!(
                "type {} needs {} bytes, view has {}",
                desc.type_id,
                desc.total_bytes,
                view.len()
            ),
        );
    }
    TypedView {
        view: view.subview(0, desc.total_bytes as usize),
        desc: Arc::clone(desc),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panic::UnwindSignal;
    use crate::view::PacketBuf;

    fn registry_with_header() -> (DescriptorRegistry, Arc<TypeDescriptor>) {
        let reg = DescriptorRegistry::new();
        let desc = reg
            .register(
                "hdr",
                8,
                &[
                    FieldDecl::scalar("a", 0, "u32"),
                    FieldDecl::scalar("b", 4, "u16"),
                    FieldDecl::scalar("c", 6, "u16"),
                ],
            )
            .unwrap();
        (reg, desc)
    }

    fn catch_reason(f: impl FnOnce()) -> Option<PanicReason> {
        crate::panic::install_hook();
        let err = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).err()?;
        err.downcast::<UnwindSignal>().ok().map(|s| s.reason)
    }

    #[test]
    fn cast_fits_and_reads_fields() {
        let (_reg, desc) = registry_with_header();
        let buf = PacketBuf::new(vec![0x01, 0x02, 0x03, 0x04, 0x05, 0x06, 0x07, 0x08]);
        let t = transmute_checked(&buf.view(), &desc);
        assert_eq!(t.get("a"), 0x04030201);
        assert_eq!(t.get("b"), 0x0605);
        assert_eq!(t.get("c"), 0x0807);
        t.set("b", 0xBEEF);
        assert_eq!(t.get("b"), 0xBEEF);
    }

    #[test]
    fn cast_too_small_panics_transmute_violation() {
        let (_reg, desc) = registry_with_header();
        let buf = PacketBuf::new(vec![0u8; 6]);
        assert_eq!(
            catch_reason(move || {
                transmute_checked(&buf.view(), &desc);
            }),
            Some(PanicReason::TransmuteViolation)
        );
    }

    #[test]
    fn pointer_like_kind_rejected_at_registration() {
        let reg = DescriptorRegistry::new();
        let err = reg
            .register("bad", 8, &[FieldDecl::scalar("p", 0, "handle")])
            .unwrap_err();
        assert_eq!(
            err,
            DescriptorError::NonScalarField {
                field: "p".into(),
                kind: "handle".into()
            }
        );
    }

    #[test]
    fn implicit_padding_rejected_reserved_accepted() {
        let reg = DescriptorRegistry::new();
        let gap = reg.register(
            "gapped",
            8,
            &[
                FieldDecl::scalar("a", 0, "u8"),
                FieldDecl::scalar("b", 4, "u32"),
            ],
        );
        assert!(matches!(gap, Err(DescriptorError::ImplicitPadding { .. })));
        let ok = reg.register(
            "padded",
            8,
            &[
                FieldDecl::scalar("a", 0, "u8"),
                FieldDecl::reserved(1, 3),
                FieldDecl::scalar("b", 4, "u32"),
            ],
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn coverage_must_match_total() {
        let reg = DescriptorRegistry::new();
        let err = reg
            .register("short", 8, &[FieldDecl::scalar("a", 0, "u32")])
            .unwrap_err();
        assert_eq!(
            err,
            DescriptorError::CoverageMismatch {
                covered: 4,
                total: 8
            }
        );
    }

    #[test]
    fn overlap_rejected() {
        let reg = DescriptorRegistry::new();
        let err = reg
            .register(
                "ovl",
                6,
                &[
                    FieldDecl::scalar("a", 0, "u32"),
                    FieldDecl::scalar("b", 2, "u32"),
                ],
            )
            .unwrap_err();
        assert!(matches!(err, DescriptorError::Overlap { .. }));
    }

    #[test]
    fn signed_fields_sign_extend() {
        let reg = DescriptorRegistry::new();
        let desc = reg
            .register("s", 2, &[FieldDecl::scalar("x", 0, "i16")])
            .unwrap();
        let buf = PacketBuf::new(vec![0xFE, 0xFF]);
        let t = transmute_checked(&buf.view(), &desc);
        assert_eq!(t.get_i("x"), -2);
        assert_eq!(t.get("x"), 0xFFFE);
    }
}
