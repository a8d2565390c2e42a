//! Layout hash tables: the finite encoding of the layout relation used by
//! the runtime, plus per-type meta data.
//!
//! A table for type `T` maps `(S, k)`, for every sub-object type `S` and
//! every offset `0 <= k <= sizeof(T)`, to the bounds of the preferred
//! matching sub-object relative to `k`. Lookups normalize larger offsets
//! back into that range and fall back to the `char[]` and `void *`
//! coercions when no exact entry exists.

use std::cmp::Reverse;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::layout::{layout_candidates, match_keys, Candidate, SubObject};
use crate::lowfat::AbsBounds;
use crate::types::{FamInfo, TypeId, TypeKind, TypeUniverse};

/// Sub-object bounds relative to the queried offset. `i64::MIN` / `i64::MAX`
/// stand for an unbounded side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelBounds {
    pub lo: i64,
    pub hi: i64,
}

impl RelBounds {
    pub const WIDE: RelBounds = RelBounds { lo: i64::MIN, hi: i64::MAX };

    pub fn new(lo: i64, hi: i64) -> Self {
        RelBounds { lo, hi }
    }

    pub fn is_wide(&self) -> bool {
        *self == Self::WIDE
    }

    /// Width used for tie-breaking; unbounded sides saturate.
    pub fn width(&self) -> u64 {
        (self.hi as i128 - self.lo as i128).min(u64::MAX as i128) as u64
    }

    /// Makes the bounds absolute around `addr`.
    pub fn absolute(&self, addr: u64) -> AbsBounds {
        let lo =
            if self.lo == i64::MIN { 0 } else { (addr as i128 + self.lo as i128).clamp(0, u64::MAX as i128) as u64 };
        let hi = if self.hi == i64::MAX {
            u64::MAX
        } else {
            (addr as i128 + self.hi as i128).clamp(0, u64::MAX as i128) as u64
        };
        AbsBounds::new(lo, hi.max(lo))
    }
}

impl fmt::Display for RelBounds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side = |v: i64, neg: bool| -> String {
            match (v, neg) {
                (i64::MIN, _) => "-inf".into(),
                (i64::MAX, _) => "inf".into(),
                _ => v.to_string(),
            }
        };
        write!(f, "{}..{}", side(self.lo, true), side(self.hi, false))
    }
}

/// How a lookup was satisfied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchKind {
    Exact,
    /// A `char[]` sub-object accepted as `S[]`.
    CharBuffer,
    /// `void *` accepted as `T *`, or any address as `void *`.
    Address,
    /// Any object viewed through `char[]`.
    ByteView,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Entry {
    pub bounds: RelBounds,
    pub sub: SubObject,
    /// The sub-object is the flexible array member: its upper bound is the
    /// end of the allocation and its lower bound depends on the true offset.
    pub flexible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Match {
    pub bounds: RelBounds,
    pub sub: SubObject,
    pub kind: MatchKind,
}

/// Tie-break order: non-end matches before end matches, then wider bounds,
/// then shallower nesting, then earlier members.
fn rank(u: &TypeUniverse, c: &Candidate) -> (bool, Reverse<u64>, usize, Vec<u32>) {
    let width = if c.path.is_empty() { u64::MAX } else { u.size_of(c.sub.ty) };
    (c.is_end, Reverse(width), c.depth(), c.path.clone())
}

#[derive(Debug, Clone)]
pub struct LayoutTable {
    owner: TypeId,
    size: u64,
    fam: Option<FamInfo>,
    char_ty: TypeId,
    void_ptr: Option<TypeId>,
    entries: HashMap<(TypeId, u64), Entry>,
    /// Best address-typed sub-object per offset, for `void *` queries.
    any_address: HashMap<u64, Entry>,
}

impl LayoutTable {
    pub fn build(u: &TypeUniverse, owner: TypeId) -> LayoutTable {
        let size = u.size_of(owner);
        let fam = u.fam(owner);
        let mut best: HashMap<(TypeId, u64), Candidate> = HashMap::new();
        let mut best_addr: HashMap<u64, Candidate> = HashMap::new();

        let better = |u: &TypeUniverse, new: &Candidate, old: &Candidate| rank(u, new) < rank(u, old);

        for k in 0..=size {
            for c in layout_candidates(u, owner, k as i64) {
                for key in match_keys(u, c.sub.ty) {
                    match best.get(&(key, k)) {
                        Some(old) if !better(u, &c, old) => {}
                        _ => {
                            best.insert((key, k), c.clone());
                        }
                    }
                    if u.is_address(key) {
                        match best_addr.get(&k) {
                            Some(old) if !better(u, &c, old) => {}
                            _ => {
                                best_addr.insert(k, c.clone());
                            }
                        }
                    }
                }
            }
        }

        let to_entry = |key: TypeId, k: u64, c: &Candidate| -> Entry {
            let flexible = fam.is_some_and(|f| c.path.len() == 1 && c.path[0] as usize == f.field);
            let bounds = if c.path.is_empty() && key == owner && k == 0 {
                RelBounds::WIDE
            } else if flexible {
                RelBounds::new(-(c.sub.delta as i64), i64::MAX)
            } else {
                let d = c.sub.delta as i64;
                RelBounds::new(-d, u.size_of(c.sub.ty) as i64 - d)
            };
            Entry { bounds, sub: c.sub, flexible }
        };

        let entries = best.iter().map(|(&(key, k), c)| ((key, k), to_entry(key, k, c))).collect();
        let any_address = best_addr.iter().map(|(&k, c)| (k, to_entry(c.sub.ty, k, c))).collect();

        LayoutTable { owner, size, fam, char_ty: u.char(), void_ptr: u.find_address_of(u.void()), entries, any_address }
    }

    pub fn owner(&self) -> TypeId {
        self.owner
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Exact entry for `(S, k)`, `k` already in `0..=sizeof(T)`.
    pub fn entry(&self, sub: TypeId, k: u64) -> Option<&Entry> {
        self.entries.get(&(sub, k))
    }

    /// All entries, sorted by offset and then sub-object type.
    pub fn entries(&self) -> Vec<(TypeId, u64, Entry)> {
        let mut v: Vec<_> = self.entries.iter().map(|(&(s, k), e)| (s, k, *e)).collect();
        v.sort_by_key(|(s, k, _)| (*k, *s));
        v
    }

    /// Maps an offset into the allocation back into `0..=sizeof(T)`.
    ///
    /// An offset exactly at an element boundary inside a multi-element
    /// allocation is treated as the start of the next element rather than
    /// the end of the previous one.
    pub fn normalize(&self, k: u64, alloc_size: u64) -> u64 {
        if let Some(f) = self.fam {
            let base = f.offset;
            return if k > base { (k - base) % f.elem_size + base } else { k };
        }
        let size = self.size;
        if k < size {
            k
        } else if k == size {
            if alloc_size > size {
                0
            } else {
                size
            }
        } else {
            k % size
        }
    }

    fn resolve(&self, e: &Entry, k: u64, kind: MatchKind) -> Match {
        let bounds = match (e.flexible, self.fam) {
            (true, Some(f)) => RelBounds::new(f.offset as i64 - k as i64, i64::MAX),
            _ => e.bounds,
        };
        Match { bounds, sub: e.sub, kind }
    }

    /// Looks up the bounds of the sub-object of type `S` (queried as the
    /// incomplete `S[]`) at offset `k` of an allocation of `alloc_size`
    /// bytes. `None` means a type mismatch.
    pub fn lookup(&self, u: &TypeUniverse, query: TypeId, k: i64, alloc_size: u64) -> Option<Match> {
        if k < 0 {
            return None;
        }
        let k = k as u64;
        let kn = self.normalize(k, alloc_size);
        if let Some(e) = self.entries.get(&(query, kn)) {
            return Some(self.resolve(e, k, MatchKind::Exact));
        }
        if query != self.char_ty {
            if let Some(e) = self.entries.get(&(self.char_ty, kn)) {
                return Some(self.resolve(e, k, MatchKind::CharBuffer));
            }
        }
        if u.is_address(query) {
            let coerced = if Some(query) == self.void_ptr {
                self.any_address.get(&kn)
            } else {
                self.void_ptr.and_then(|v| self.entries.get(&(v, kn)))
            };
            if let Some(e) = coerced {
                return Some(self.resolve(e, k, MatchKind::Address));
            }
        }
        if query == self.char_ty {
            return Some(Match {
                bounds: RelBounds::WIDE,
                sub: SubObject::new(self.owner, 0),
                kind: MatchKind::ByteView,
            });
        }
        None
    }
}

/// Per-type meta data: the incomplete type `T[]`, its element size, a
/// display name and its layout table.
#[derive(Debug, Clone)]
pub struct TypeMeta {
    pub id: TypeId,
    pub size: u64,
    pub name: String,
    pub table: Arc<LayoutTable>,
}

/// One [`TypeMeta`] per distinct type of a universe.
#[derive(Debug, Clone)]
pub struct TypeRegistry {
    universe: Arc<TypeUniverse>,
    metas: Vec<Option<TypeMeta>>,
}

impl TypeRegistry {
    pub fn build(universe: Arc<TypeUniverse>) -> Self {
        let metas = universe
            .ids()
            .map(|id| {
                let d = universe.get(id);
                let complete = match &d.kind {
                    TypeKind::Free => false,
                    TypeKind::Record(r) => r.complete,
                    _ => true,
                };
                (complete && d.size > 0).then(|| TypeMeta {
                    id,
                    size: d.size,
                    name: universe.name(id),
                    table: Arc::new(LayoutTable::build(&universe, id)),
                })
            })
            .collect();
        TypeRegistry { universe, metas }
    }

    pub fn universe(&self) -> &TypeUniverse {
        &self.universe
    }

    pub fn universe_arc(&self) -> &Arc<TypeUniverse> {
        &self.universe
    }

    pub fn meta(&self, id: TypeId) -> Option<&TypeMeta> {
        self.metas.get(id.index()).and_then(Option::as_ref)
    }

    pub fn name(&self, id: TypeId) -> String {
        if id.index() < self.metas.len() {
            self.universe.name(id)
        } else {
            format!("<unknown type {}>", id.0)
        }
    }

    /// Layout-table lookup for dynamic type `t`; `FREE` and unknown types
    /// match nothing.
    pub fn lookup(&self, t: TypeId, query: TypeId, k: i64, alloc_size: u64) -> Option<Match> {
        self.meta(t)?.table.lookup(&self.universe, query, k, alloc_size)
    }
}
