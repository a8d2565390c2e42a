//! The layout relation: which sub-objects an interior address `base + k`
//! points into, and how far it sits from each sub-object's start.

use std::collections::BTreeSet;

use crate::lowfat::AbsBounds;
use crate::types::{TypeId, TypeKind, TypeUniverse};

/// A sub-object of type `ty` whose base lies `delta` bytes before the
/// queried address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubObject {
    pub ty: TypeId,
    pub delta: u64,
}

impl SubObject {
    pub fn new(ty: TypeId, delta: u64) -> Self {
        SubObject { ty, delta }
    }
}

/// A layout match together with how it was reached, for tie-breaking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub sub: SubObject,
    /// Member/element indices from the top-level object; empty for the
    /// top-level object itself.
    pub path: Vec<u32>,
    /// Matched as a one-past-the-end address.
    pub is_end: bool,
}

impl Candidate {
    pub fn depth(&self) -> usize {
        self.path.len()
    }
}

/// `layout(t, k)`: the set of sub-objects pointed to by `base + k` for an
/// object of type `t`.
pub fn layout(u: &TypeUniverse, t: TypeId, k: i64) -> BTreeSet<SubObject> {
    layout_candidates(u, t, k).into_iter().map(|c| c.sub).collect()
}

/// Like [`layout`], but keeps every derivation with its path.
pub fn layout_candidates(u: &TypeUniverse, t: TypeId, k: i64) -> Vec<Candidate> {
    let mut out = Vec::new();
    if t == TypeId::FREE {
        out.push(Candidate { sub: SubObject::new(TypeId::FREE, 0), path: Vec::new(), is_end: false });
        return out;
    }
    if k < 0 {
        return out;
    }
    let mut path = Vec::new();
    collect(u, t, k as u64, &mut path, &mut out);
    out
}

fn collect(u: &TypeUniverse, t: TypeId, k: u64, path: &mut Vec<u32>, out: &mut Vec<Candidate>) {
    let desc = u.get(t);
    let size = desc.size;
    if k == 0 {
        out.push(Candidate { sub: SubObject::new(t, 0), path: path.clone(), is_end: size == 0 });
    }
    if k == size && size > 0 {
        out.push(Candidate { sub: SubObject::new(t, size), path: path.clone(), is_end: true });
    }
    // Interior rules only fire strictly inside the object.
    if k >= size {
        return;
    }
    match &desc.kind {
        TypeKind::Array { elem, .. } => {
            let es = u.size_of(*elem);
            let idx = k / es;
            let rem = k % es;
            if rem == 0 && k > 0 {
                // Array self-match at an element boundary.
                out.push(Candidate { sub: SubObject::new(t, k), path: path.clone(), is_end: false });
                // One past the end of the previous element.
                path.push((idx - 1) as u32);
                collect(u, *elem, es, path, out);
                path.pop();
            }
            path.push(idx as u32);
            collect(u, *elem, rem, path, out);
            path.pop();
        }
        TypeKind::Record(r) => {
            for (i, f) in r.fields.iter().enumerate() {
                if k < f.offset {
                    continue;
                }
                let local = k - f.offset;
                if local <= u.size_of(f.ty) {
                    path.push(i as u32);
                    collect(u, f.ty, local, path, out);
                    path.pop();
                }
            }
        }
        _ => {}
    }
}

/// Absolute sub-object bounds `[addr - delta, addr - delta + sizeof(U)]`.
pub fn type_bounds(u: &TypeUniverse, addr: u64, sub: SubObject) -> AbsBounds {
    let lo = addr.saturating_sub(sub.delta);
    AbsBounds::new(lo, lo.saturating_add(u.size_of(sub.ty)))
}

/// The key a sub-object is filed under for lookups against an incomplete
/// `S[]`: itself, and for arrays `E[N]` also the element type `E`.
pub fn match_keys(u: &TypeUniverse, ty: TypeId) -> impl Iterator<Item = TypeId> {
    std::iter::once(ty).chain(u.array_elem(ty))
}

/// Whether a sub-object of type `sub` satisfies an incomplete query `S[]`.
pub fn matches_incomplete(u: &TypeUniverse, sub: TypeId, query: TypeId) -> bool {
    match_keys(u, sub).any(|k| k == query)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::paper_t;

    fn set(items: &[(TypeId, u64)]) -> BTreeSet<SubObject> {
        items.iter().map(|&(t, d)| SubObject::new(t, d)).collect()
    }

    #[test]
    fn int_layout() {
        let u = TypeUniverse::new();
        let int = u.int();
        assert_eq!(layout(&u, int, 0), set(&[(int, 0)]));
        assert_eq!(layout(&u, int, 4), set(&[(int, 4)]));
        assert!(layout(&u, int, 2).is_empty());
        assert!(layout(&u, int, -1).is_empty());
    }

    #[test]
    fn free_absorbs_every_offset() {
        let u = TypeUniverse::new();
        for k in [0, 1, 37, 4096] {
            assert_eq!(layout(&u, TypeId::FREE, k), set(&[(TypeId::FREE, 0)]));
        }
    }

    #[test]
    fn paper_struct_layout() {
        let mut u = TypeUniverse::new();
        let (s, t) = paper_t(&mut u);
        let int = u.int();
        let int3 = u.array(int, 3).unwrap();
        let float = u.float();
        assert_eq!(layout(&u, t, 4), set(&[(s, 0), (int3, 0), (int, 0), (float, 4)]));
        assert_eq!(layout(&u, t, 12), set(&[(int3, 8), (int, 0), (int, 4)]));
        assert!(layout(&u, t, 100).is_empty());
    }

    #[test]
    fn bounds_helper() {
        let mut u = TypeUniverse::new();
        let int = u.int();
        let int3 = u.array(int, 3).unwrap();
        let (_, t) = paper_t(&mut u);
        let p = 0x1000;
        assert_eq!(type_bounds(&u, p + 12, SubObject::new(int3, 8)), AbsBounds::new(p + 4, p + 16));
        assert_eq!(type_bounds(&u, p, SubObject::new(t, 0)), AbsBounds::new(p, p + 24));
        assert!(layout(&u, t, 8).contains(&SubObject::new(int, 4)));
        assert_eq!(type_bounds(&u, p + 8, SubObject::new(int, 4)), AbsBounds::new(p + 4, p + 8));
    }

    #[test]
    fn candidates_mark_ends() {
        let mut u = TypeUniverse::new();
        let (_, t) = paper_t(&mut u);
        let c = layout_candidates(&u, t, 24);
        assert!(c.iter().all(|c| c.is_end));
        assert!(c.iter().any(|c| c.sub == SubObject::new(t, 24) && c.path.is_empty()));
    }
}
