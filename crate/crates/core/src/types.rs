//! The C-like type algebra: fundamental types, addresses, functions, arrays,
//! records (struct/class/union) and the `FREE` sentinel.
//!
//! Types live in a [`TypeUniverse`] arena and are interned, so two
//! [`TypeId`]s are equal exactly when the types are equivalent: records by
//! tag, anonymous records by layout, everything else structurally.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

/// Size in bytes of every address (pointer) type.
pub const ADDRESS_SIZE: u64 = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TypeModelError {
    #[error("unknown type `{0}`")]
    UnknownType(String),
    #[error("type `{container}` has no member `{member}`")]
    UnknownMember { container: String, member: String },
    #[error("`{0}` is not a struct, class or union")]
    NotARecord(String),
    #[error("zero-length array of `{0}`")]
    ZeroLengthArray(String),
    #[error("member `{member}` of `{container}` spans {lo}..{hi}, outside 0..{size}")]
    MemberOutOfExtent { container: String, member: String, lo: u64, hi: u64, size: u64 },
    #[error("members `{a}` and `{b}` of `{container}` overlap")]
    OverlappingMembers { container: String, a: String, b: String },
    #[error("union `{container}` member `{member}` must sit at offset 0")]
    UnionOffset { container: String, member: String },
    #[error("`{0}` is already defined")]
    Redefinition(String),
    #[error("`{0}` is incomplete")]
    Incomplete(String),
    #[error("flexible array member `{0}` must be the last member of a struct")]
    MisplacedFlexibleArray(String),
    #[error("type `{0}` has zero size")]
    ZeroSized(String),
}

/// Index of a type inside its [`TypeUniverse`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TypeId(pub u32);

impl TypeId {
    /// The deallocated-memory type. Always slot 0 of every universe, so a
    /// zeroed META header reads back as `FREE`.
    pub const FREE: TypeId = TypeId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RecordKind {
    Struct,
    Class,
    Union,
}

impl RecordKind {
    pub fn keyword(self) -> &'static str {
        match self {
            RecordKind::Struct => "struct",
            RecordKind::Class => "class",
            RecordKind::Union => "union",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub name: String,
    pub ty: TypeId,
    pub offset: u64,
    /// Base-class sub-object lowered to an embedded member.
    pub is_base: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub kind: RecordKind,
    pub tag: Option<String>,
    pub fields: Vec<Field>,
    /// Index of the flexible array member, stored as `U member[1]`.
    pub fam: Option<usize>,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TypeKind {
    Fundamental { name: String },
    AddressOf(TypeId),
    Function(String),
    Array { elem: TypeId, len: u64 },
    Record(Record),
    Free,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypeDesc {
    pub kind: TypeKind,
    pub size: u64,
    pub align: u64,
}

impl TypeDesc {
    pub fn is_address(&self) -> bool {
        matches!(self.kind, TypeKind::AddressOf(_))
    }

    pub fn as_record(&self) -> Option<&Record> {
        match &self.kind {
            TypeKind::Record(r) => Some(r),
            _ => None,
        }
    }
}

/// Flexible-array-member geometry of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FamInfo {
    pub field: usize,
    pub offset: u64,
    pub elem: TypeId,
    pub elem_size: u64,
}

/// Fundamental type sizes for one universe.
#[derive(Debug, Clone)]
pub struct UniverseConfig {
    pub fundamentals: Vec<(String, u64)>,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        let f = |n: &str, s: u64| (n.to_string(), s);
        UniverseConfig {
            fundamentals: vec![
                f("void", 1),
                f("char", 1),
                f("signed char", 1),
                f("unsigned char", 1),
                f("bool", 1),
                f("short", 2),
                f("unsigned short", 2),
                f("int", 4),
                f("unsigned int", 4),
                f("long", 8),
                f("unsigned long", 8),
                f("long long", 8),
                f("unsigned long long", 8),
                f("float", 4),
                f("double", 8),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum TypeKey {
    Fundamental(String),
    AddressOf(TypeId),
    Function(String),
    Array(TypeId, u64),
    Tagged(String),
    Anonymous(RecordKind, u64, Vec<(u64, TypeId)>),
}

/// A member as written in a declaration, before layout.
#[derive(Debug, Clone)]
pub struct MemberDecl {
    pub name: String,
    pub ty: TypeId,
    pub offset: Option<u64>,
    /// `U name[]` flexible array member; `ty` is the element type `U`.
    pub flexible: bool,
}

/// A struct/class/union declaration.
#[derive(Debug, Clone)]
pub struct RecordDecl {
    pub kind: RecordKind,
    pub tag: Option<String>,
    /// Base classes, lowered to leading embedded members.
    pub bases: Vec<(TypeId, Option<u64>)>,
    pub members: Vec<MemberDecl>,
    pub size: Option<u64>,
}

impl RecordDecl {
    pub fn new(kind: RecordKind, tag: Option<&str>) -> Self {
        RecordDecl { kind, tag: tag.map(str::to_string), bases: Vec::new(), members: Vec::new(), size: None }
    }

    pub fn member(mut self, name: &str, ty: TypeId) -> Self {
        self.members.push(MemberDecl { name: name.into(), ty, offset: None, flexible: false });
        self
    }

    pub fn member_at(mut self, name: &str, ty: TypeId, offset: u64) -> Self {
        self.members.push(MemberDecl { name: name.into(), ty, offset: Some(offset), flexible: false });
        self
    }

    pub fn flexible(mut self, name: &str, elem: TypeId) -> Self {
        self.members.push(MemberDecl { name: name.into(), ty: elem, offset: None, flexible: true });
        self
    }

    pub fn base(mut self, ty: TypeId) -> Self {
        self.bases.push((ty, None));
        self
    }

    pub fn with_size(mut self, size: u64) -> Self {
        self.size = Some(size);
        self
    }
}

fn align_up(v: u64, a: u64) -> u64 {
    if a <= 1 {
        v
    } else {
        v.div_ceil(a) * a
    }
}

#[derive(Debug, Clone)]
pub struct TypeUniverse {
    types: Vec<TypeDesc>,
    index: HashMap<TypeKey, TypeId>,
}

impl Default for TypeUniverse {
    fn default() -> Self {
        Self::new()
    }
}

impl TypeUniverse {
    pub fn new() -> Self {
        Self::with_config(&UniverseConfig::default())
    }

    pub fn with_config(config: &UniverseConfig) -> Self {
        let mut u = TypeUniverse { types: Vec::new(), index: HashMap::new() };
        u.types.push(TypeDesc { kind: TypeKind::Free, size: 0, align: 1 });
        for (name, size) in &config.fundamentals {
            let id = TypeId(u.types.len() as u32);
            u.types.push(TypeDesc {
                kind: TypeKind::Fundamental { name: name.clone() },
                size: *size,
                align: (*size).max(1),
            });
            u.index.insert(TypeKey::Fundamental(name.clone()), id);
        }
        u
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = TypeId> {
        (0..self.types.len() as u32).map(TypeId)
    }

    pub fn get(&self, id: TypeId) -> &TypeDesc {
        &self.types[id.index()]
    }

    pub fn size_of(&self, id: TypeId) -> u64 {
        self.types[id.index()].size
    }

    pub fn align_of(&self, id: TypeId) -> u64 {
        self.types[id.index()].align
    }

    pub fn fundamental(&self, name: &str) -> Result<TypeId, TypeModelError> {
        self.index
            .get(&TypeKey::Fundamental(name.to_string()))
            .copied()
            .ok_or_else(|| TypeModelError::UnknownType(name.to_string()))
    }

    fn builtin(&self, name: &str) -> TypeId {
        self.fundamental(name).expect("builtin fundamental type")
    }

    pub fn int(&self) -> TypeId {
        self.builtin("int")
    }

    pub fn char(&self) -> TypeId {
        self.builtin("char")
    }

    pub fn float(&self) -> TypeId {
        self.builtin("float")
    }

    pub fn double(&self) -> TypeId {
        self.builtin("double")
    }

    pub fn long(&self) -> TypeId {
        self.builtin("long")
    }

    pub fn void(&self) -> TypeId {
        self.builtin("void")
    }

    fn intern(&mut self, key: TypeKey, desc: TypeDesc) -> TypeId {
        if let Some(id) = self.index.get(&key) {
            return *id;
        }
        let id = TypeId(self.types.len() as u32);
        self.types.push(desc);
        self.index.insert(key, id);
        id
    }

    pub fn address_of(&mut self, target: TypeId) -> TypeId {
        self.intern(
            TypeKey::AddressOf(target),
            TypeDesc { kind: TypeKind::AddressOf(target), size: ADDRESS_SIZE, align: ADDRESS_SIZE },
        )
    }

    /// Looks up `target *` without creating it.
    pub fn find_address_of(&self, target: TypeId) -> Option<TypeId> {
        self.index.get(&TypeKey::AddressOf(target)).copied()
    }

    /// The generic address type `void *`.
    pub fn void_ptr(&mut self) -> TypeId {
        let v = self.void();
        self.address_of(v)
    }

    pub fn function(&mut self, signature: &str) -> TypeId {
        self.intern(
            TypeKey::Function(signature.to_string()),
            TypeDesc { kind: TypeKind::Function(signature.to_string()), size: 1, align: 1 },
        )
    }

    pub fn array(&mut self, elem: TypeId, len: u64) -> Result<TypeId, TypeModelError> {
        let e = self.get(elem);
        if len == 0 {
            return Err(TypeModelError::ZeroLengthArray(self.name(elem)));
        }
        if matches!(e.kind, TypeKind::Free) || e.size == 0 {
            return Err(TypeModelError::ZeroSized(self.name(elem)));
        }
        if let TypeKind::Record(r) = &e.kind {
            if !r.complete {
                return Err(TypeModelError::Incomplete(self.name(elem)));
            }
        }
        let (size, align) = (e.size * len, e.align);
        Ok(self.intern(TypeKey::Array(elem, len), TypeDesc { kind: TypeKind::Array { elem, len }, size, align }))
    }

    pub fn tagged(&self, tag: &str) -> Option<TypeId> {
        self.index.get(&TypeKey::Tagged(tag.to_string())).copied()
    }

    /// Forward-declares a tagged record so that self-referential members
    /// (`struct node *next`) can name it before its definition.
    pub fn declare_record(&mut self, kind: RecordKind, tag: &str) -> TypeId {
        self.intern(
            TypeKey::Tagged(tag.to_string()),
            TypeDesc {
                kind: TypeKind::Record(Record {
                    kind,
                    tag: Some(tag.to_string()),
                    fields: Vec::new(),
                    fam: None,
                    complete: false,
                }),
                size: 0,
                align: 1,
            },
        )
    }

    /// Lays out and registers a record. Members without an explicit offset
    /// are placed at the next naturally aligned offset; without `@size` the
    /// total is rounded up to the maximum member alignment. Flexible array
    /// members are stored as a one-element array and the record carries a
    /// FAM marker.
    pub fn natural_layout(&mut self, decl: &RecordDecl) -> Result<TypeId, TypeModelError> {
        let display = decl.tag.clone().unwrap_or_else(|| format!("<anonymous {}>", decl.kind.keyword()));
        let mut fields = Vec::new();
        let mut cursor = 0u64;
        let mut max_align = 1u64;
        let mut fam = None;

        let mut place = |ty: TypeId, explicit: Option<u64>, u: &Self| -> u64 {
            let a = u.align_of(ty);
            max_align = max_align.max(a);
            let off = match (decl.kind, explicit) {
                (_, Some(o)) => o,
                (RecordKind::Union, None) => 0,
                (_, None) => align_up(cursor, a),
            };
            cursor = cursor.max(off + u.size_of(ty));
            off
        };

        for (base, explicit) in &decl.bases {
            self.require_complete(*base)?;
            let off = place(*base, *explicit, self);
            let name = self.name(*base);
            fields.push(Field { name, ty: *base, offset: off, is_base: true });
        }
        for (i, m) in decl.members.iter().enumerate() {
            if m.flexible {
                if i + 1 != decl.members.len() || decl.kind == RecordKind::Union {
                    return Err(TypeModelError::MisplacedFlexibleArray(m.name.clone()));
                }
                self.require_complete(m.ty)?;
                let arr = self.array(m.ty, 1)?;
                let off = place(arr, m.offset, self);
                fam = Some(fields.len());
                fields.push(Field { name: m.name.clone(), ty: arr, offset: off, is_base: false });
            } else {
                self.require_complete(m.ty)?;
                let off = place(m.ty, m.offset, self);
                fields.push(Field { name: m.name.clone(), ty: m.ty, offset: off, is_base: false });
            }
        }
        let size = match decl.size {
            Some(s) => s,
            None if fam.is_some() => cursor,
            None => align_up(cursor, max_align),
        };
        if size == 0 {
            return Err(TypeModelError::ZeroSized(display));
        }
        self.validate_record(&display, decl.kind, &fields, size)?;

        let record = Record { kind: decl.kind, tag: decl.tag.clone(), fields, fam, complete: true };
        let desc = TypeDesc { kind: TypeKind::Record(record), size, align: max_align };
        match &decl.tag {
            Some(tag) => {
                let id = self.declare_record(decl.kind, tag);
                let slot = &mut self.types[id.index()];
                if slot.as_record().is_some_and(|r| r.complete) {
                    return Err(TypeModelError::Redefinition(tag.clone()));
                }
                *slot = desc;
                Ok(id)
            }
            None => {
                let r = desc.as_record().expect("record");
                let key = TypeKey::Anonymous(decl.kind, size, r.fields.iter().map(|f| (f.offset, f.ty)).collect());
                Ok(self.intern(key, desc))
            }
        }
    }

    fn require_complete(&self, ty: TypeId) -> Result<(), TypeModelError> {
        let d = self.get(ty);
        match &d.kind {
            TypeKind::Record(r) if !r.complete => Err(TypeModelError::Incomplete(self.name(ty))),
            TypeKind::Free => Err(TypeModelError::ZeroSized("FREE".into())),
            _ => Ok(()),
        }
    }

    fn validate_record(
        &self,
        display: &str,
        kind: RecordKind,
        fields: &[Field],
        size: u64,
    ) -> Result<(), TypeModelError> {
        for f in fields {
            let hi = f.offset + self.size_of(f.ty);
            if hi > size {
                return Err(TypeModelError::MemberOutOfExtent {
                    container: display.to_string(),
                    member: f.name.clone(),
                    lo: f.offset,
                    hi,
                    size,
                });
            }
            if kind == RecordKind::Union && f.offset != 0 {
                return Err(TypeModelError::UnionOffset { container: display.to_string(), member: f.name.clone() });
            }
        }
        if kind != RecordKind::Union {
            let mut spans: Vec<(u64, u64, &str)> =
                fields.iter().map(|f| (f.offset, f.offset + self.size_of(f.ty), f.name.as_str())).collect();
            spans.sort();
            for w in spans.windows(2) {
                if w[1].0 < w[0].1 {
                    return Err(TypeModelError::OverlappingMembers {
                        container: display.to_string(),
                        a: w[0].2.to_string(),
                        b: w[1].2.to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn offset_of(&self, container: TypeId, member: &str) -> Result<u64, TypeModelError> {
        self.field(container, member).map(|(_, f)| f.offset)
    }

    pub fn field(&self, container: TypeId, member: &str) -> Result<(usize, &Field), TypeModelError> {
        let r = self.get(container).as_record().ok_or_else(|| TypeModelError::NotARecord(self.name(container)))?;
        r.fields.iter().enumerate().find(|(_, f)| f.name == member).ok_or_else(|| TypeModelError::UnknownMember {
            container: self.name(container),
            member: member.to_string(),
        })
    }

    pub fn fam(&self, ty: TypeId) -> Option<FamInfo> {
        let r = self.get(ty).as_record()?;
        let idx = r.fam?;
        let f = &r.fields[idx];
        let elem = self.array_elem(f.ty)?;
        Some(FamInfo { field: idx, offset: f.offset, elem, elem_size: self.size_of(elem) })
    }

    pub fn pointee(&self, ty: TypeId) -> Option<TypeId> {
        match self.get(ty).kind {
            TypeKind::AddressOf(t) => Some(t),
            _ => None,
        }
    }

    pub fn array_elem(&self, ty: TypeId) -> Option<TypeId> {
        match self.get(ty).kind {
            TypeKind::Array { elem, .. } => Some(elem),
            _ => None,
        }
    }

    pub fn is_address(&self, ty: TypeId) -> bool {
        self.get(ty).is_address()
    }

    pub fn is_void_ptr(&self, ty: TypeId) -> bool {
        self.pointee(ty) == Some(self.void())
    }

    /// Equivalence of two types of this universe.
    pub fn types_equal(&self, a: TypeId, b: TypeId) -> bool {
        types_equal_across(self, a, self, b)
    }

    /// Display name, C-style: `int`, `char *`, `int[3]`, `S`, `FREE`.
    pub fn name(&self, id: TypeId) -> String {
        let d = self.get(id);
        match &d.kind {
            TypeKind::Free => "FREE".to_string(),
            TypeKind::Fundamental { name } => name.clone(),
            TypeKind::AddressOf(t) => {
                let inner = self.name(*t);
                if inner.ends_with('*') {
                    format!("{inner}*")
                } else {
                    format!("{inner} *")
                }
            }
            TypeKind::Function(sig) => format!("fn<{sig}>"),
            TypeKind::Array { elem, len } => format!("{}[{len}]", self.name(*elem)),
            TypeKind::Record(r) => match &r.tag {
                Some(t) => t.clone(),
                None => {
                    let fields: Vec<String> =
                        r.fields.iter().map(|f| format!("{}@{}", self.name(f.ty), f.offset)).collect();
                    format!("{} {{{}}}", r.kind.keyword(), fields.join(","))
                }
            },
        }
    }
}

/// Type equivalence, possibly across two universes: tagged records compare
/// by tag, anonymous records by kind, size and member layout, arrays by
/// element and length, addresses by target.
pub fn types_equal_across(ua: &TypeUniverse, a: TypeId, ub: &TypeUniverse, b: TypeId) -> bool {
    let (da, db) = (ua.get(a), ub.get(b));
    match (&da.kind, &db.kind) {
        (TypeKind::Free, TypeKind::Free) => true,
        (TypeKind::Fundamental { name: x }, TypeKind::Fundamental { name: y }) => x == y && da.size == db.size,
        (TypeKind::AddressOf(x), TypeKind::AddressOf(y)) => types_equal_across(ua, *x, ub, *y),
        (TypeKind::Function(x), TypeKind::Function(y)) => x == y,
        (TypeKind::Array { elem: x, len: n }, TypeKind::Array { elem: y, len: m }) => {
            n == m && types_equal_across(ua, *x, ub, *y)
        }
        (TypeKind::Record(x), TypeKind::Record(y)) => match (&x.tag, &y.tag) {
            (Some(s), Some(t)) => s == t,
            (None, None) => {
                x.kind == y.kind
                    && da.size == db.size
                    && x.fields.len() == y.fields.len()
                    && x.fields
                        .iter()
                        .zip(&y.fields)
                        .all(|(f, g)| f.offset == g.offset && types_equal_across(ua, f.ty, ub, g.ty))
            }
            _ => false,
        },
        _ => false,
    }
}

impl fmt::Display for TypeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::paper_t;

    #[test]
    fn fundamental_sizes() {
        let u = TypeUniverse::new();
        assert_eq!(u.size_of(u.int()), 4);
        assert_eq!(u.size_of(u.char()), 1);
        assert_eq!(u.size_of(u.double()), 8);
        assert_eq!(u.size_of(TypeId::FREE), 0);
    }

    #[test]
    fn paper_struct_sizes_and_offsets() {
        let mut u = TypeUniverse::new();
        let (s, t) = paper_t(&mut u);
        assert_eq!(u.size_of(s), 20);
        assert_eq!(u.size_of(t), 24);
        assert_eq!(u.offset_of(t, "t").unwrap(), 4);
        assert_eq!(u.offset_of(t, "f").unwrap(), 0);
        assert_eq!(u.offset_of(s, "s").unwrap(), 12);
        assert!(matches!(u.offset_of(t, "nope"), Err(TypeModelError::UnknownMember { .. })));
    }

    #[test]
    fn natural_packing() {
        let mut u = TypeUniverse::new();
        let ab = u
            .natural_layout(&RecordDecl::new(RecordKind::Struct, None).member("a", u.int()).member("b", u.int()))
            .unwrap();
        assert_eq!(u.offset_of(ab, "b").unwrap(), 4);
        assert_eq!(u.size_of(ab), 8);
        let ci = u
            .natural_layout(&RecordDecl::new(RecordKind::Struct, None).member("c", u.char()).member("i", u.int()))
            .unwrap();
        assert_eq!(u.offset_of(ci, "c").unwrap(), 0);
        assert_eq!(u.offset_of(ci, "i").unwrap(), 4);
        assert_eq!(u.size_of(ci), 8);
    }

    #[test]
    fn union_members_at_zero() {
        let mut u = TypeUniverse::new();
        let un = u
            .natural_layout(&RecordDecl::new(RecordKind::Union, Some("U")).member("i", u.int()).member("d", u.double()))
            .unwrap();
        assert_eq!(u.offset_of(un, "i").unwrap(), 0);
        assert_eq!(u.offset_of(un, "d").unwrap(), 0);
        assert_eq!(u.size_of(un), 8);
        let bad = RecordDecl::new(RecordKind::Union, Some("V")).member_at("i", u.int(), 4).with_size(8);
        assert!(matches!(u.natural_layout(&bad), Err(TypeModelError::UnionOffset { .. })));
    }

    #[test]
    fn rejects_bad_extents() {
        let mut u = TypeUniverse::new();
        let too_big = RecordDecl::new(RecordKind::Struct, Some("X")).member_at("a", u.int(), 6).with_size(8);
        assert!(matches!(u.natural_layout(&too_big), Err(TypeModelError::MemberOutOfExtent { .. })));
        let overlap = RecordDecl::new(RecordKind::Struct, Some("Y"))
            .member_at("a", u.int(), 0)
            .member_at("b", u.int(), 2)
            .with_size(8);
        assert!(matches!(u.natural_layout(&overlap), Err(TypeModelError::OverlappingMembers { .. })));
        assert!(matches!(u.array(u.int(), 0), Err(TypeModelError::ZeroLengthArray(_))));
    }

    #[test]
    fn class_bases_become_members() {
        let mut u = TypeUniverse::new();
        let base = u.natural_layout(&RecordDecl::new(RecordKind::Class, Some("Base")).member("x", u.int())).unwrap();
        let derived = u
            .natural_layout(&RecordDecl::new(RecordKind::Class, Some("Derived")).base(base).member("y", u.int()))
            .unwrap();
        let r = u.get(derived).as_record().unwrap();
        assert!(r.fields[0].is_base);
        assert_eq!(r.fields[0].ty, base);
        assert_eq!(r.fields[0].offset, 0);
        assert_eq!(u.offset_of(derived, "y").unwrap(), 4);
    }

    #[test]
    fn flexible_array_lowering() {
        let mut u = TypeUniverse::new();
        let msg = u
            .natural_layout(
                &RecordDecl::new(RecordKind::Struct, Some("Msg")).member("len", u.int()).flexible("data", u.int()),
            )
            .unwrap();
        assert_eq!(u.size_of(msg), 8);
        let fam = u.fam(msg).unwrap();
        assert_eq!(fam.offset, 4);
        assert_eq!(fam.elem_size, 4);
        let bad = RecordDecl::new(RecordKind::Struct, Some("Bad")).flexible("d", u.int()).member("x", u.int());
        assert!(matches!(u.natural_layout(&bad), Err(TypeModelError::MisplacedFlexibleArray(_))));
    }

    #[test]
    fn equality_by_tag_and_layout() {
        let mut u = TypeUniverse::new();
        let base = u
            .natural_layout(
                &RecordDecl::new(RecordKind::Struct, Some("Base")).member("x", u.int()).member("y", u.float()),
            )
            .unwrap();
        let derived = u
            .natural_layout(
                &RecordDecl::new(RecordKind::Struct, Some("Derived"))
                    .member("x", u.int())
                    .member("y", u.float())
                    .member("z", u.char()),
            )
            .unwrap();
        assert!(!u.types_equal(base, derived));

        let a = u
            .natural_layout(&RecordDecl::new(RecordKind::Struct, None).member_at("p", u.int(), 0).member_at(
                "q",
                u.int(),
                4,
            ))
            .unwrap();
        let b = u
            .natural_layout(&RecordDecl::new(RecordKind::Struct, None).member_at("m", u.int(), 0).member_at(
                "n",
                u.int(),
                4,
            ))
            .unwrap();
        assert_eq!(a, b);
        assert!(u.types_equal(a, b));

        let mut v = TypeUniverse::new();
        let (_, t1) = paper_t(&mut u);
        let (_, t2) = paper_t(&mut v);
        assert!(types_equal_across(&u, t1, &v, t2));
    }

    #[test]
    fn redefinition_rejected() {
        let mut u = TypeUniverse::new();
        u.natural_layout(&RecordDecl::new(RecordKind::Struct, Some("R")).member("x", u.int())).unwrap();
        let again = RecordDecl::new(RecordKind::Struct, Some("R")).member("y", u.int());
        assert!(matches!(u.natural_layout(&again), Err(TypeModelError::Redefinition(_))));
    }

    #[test]
    fn names() {
        let mut u = TypeUniverse::new();
        let (_, t) = paper_t(&mut u);
        let cp = u.address_of(u.char());
        let cpp = u.address_of(cp);
        let i3 = u.array(u.int(), 3).unwrap();
        assert_eq!(u.name(cp), "char *");
        assert_eq!(u.name(cpp), "char **");
        assert_eq!(u.name(i3), "int[3]");
        assert_eq!(u.name(t), "T");
        assert_eq!(u.name(TypeId::FREE), "FREE");
    }
}
