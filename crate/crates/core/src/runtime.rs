//! The typed-allocation runtime: META headers, typed malloc/free, type and
//! bounds checks.
//!
//! Every allocation is prefixed by a META header holding the allocation
//! type and requested size:
//!
//! ```text
//! base            base + META_SIZE             + size
//! | type | size   | object ...                  | (pad)
//! ```

use std::sync::Arc;

use crate::layout::SubObject;
use crate::lowfat::{AbsBounds, AddressSpace, FrameId, HeapError};
use crate::report::{ErrorKind, Reporter, SanError, Site};
use crate::table::TypeRegistry;
use crate::types::TypeId;

/// Default size of the META header: two 8-byte words.
pub const META_SIZE: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetaHeader {
    pub ty: TypeId,
    pub size: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    /// A load or store of `width` bytes.
    Access,
    /// The address leaves local computation; only membership is required.
    Escape,
}

/// Where an address points, as seen through its META header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resolved {
    pub base: u64,
    pub meta: MetaHeader,
    /// Offset from the object base (just past META); negative inside META.
    pub k: i64,
}

impl Resolved {
    pub fn object_base(&self, meta_size: u64) -> u64 {
        self.base + meta_size
    }
}

#[derive(Debug)]
pub struct Runtime {
    pub space: AddressSpace,
    registry: Arc<TypeRegistry>,
    reporter: Arc<Reporter>,
    meta_size: u64,
}

impl Runtime {
    pub fn new(space: AddressSpace, registry: Arc<TypeRegistry>, reporter: Arc<Reporter>) -> Self {
        Self::with_meta_size(space, registry, reporter, META_SIZE)
    }

    pub fn with_meta_size(
        space: AddressSpace,
        registry: Arc<TypeRegistry>,
        reporter: Arc<Reporter>,
        meta_size: u64,
    ) -> Self {
        assert!(meta_size >= 16, "META needs room for two words");
        Runtime { space, registry, reporter, meta_size }
    }

    pub fn registry(&self) -> &TypeRegistry {
        &self.registry
    }

    pub fn reporter(&self) -> &Reporter {
        &self.reporter
    }

    pub fn meta_size(&self) -> u64 {
        self.meta_size
    }

    pub fn read_meta(&self, base: u64) -> MetaHeader {
        let ty = self.space.load(base, 8).unwrap_or(0);
        let size = self.space.load(base + 8, 8).unwrap_or(0);
        MetaHeader { ty: TypeId(u32::try_from(ty).unwrap_or(u32::MAX)), size }
    }

    fn write_meta(&mut self, base: u64, meta: MetaHeader) -> Result<(), HeapError> {
        self.space.store(base, 8, meta.ty.0 as u64)?;
        self.space.store(base + 8, 8, meta.size)
    }

    /// META of the allocation containing `addr`; `None` for legacy memory.
    pub fn resolve(&self, addr: u64) -> Option<Resolved> {
        let base = self.space.lf_base(addr)?;
        let meta = self.read_meta(base);
        let k = addr.wrapping_sub(base + self.meta_size) as i64;
        Some(Resolved { base, meta, k })
    }

    fn place(&mut self, base: u64, size: u64, ty: TypeId) -> Result<u64, HeapError> {
        if !self.space.is_managed(base) {
            return Ok(base);
        }
        self.write_meta(base, MetaHeader { ty, size })?;
        Ok(base + self.meta_size)
    }

    /// Allocates `size` bytes bound to dynamic type `ty[]`. One spare byte
    /// keeps the one-past-the-end address inside the same slot.
    pub fn type_malloc(&mut self, size: u64, ty: TypeId) -> Result<u64, HeapError> {
        let base = self.space.lf_alloc(self.meta_size + size + 1)?;
        self.place(base, size, ty)
    }

    /// Stack allocation tied to `frame`.
    pub fn type_alloca(&mut self, frame: FrameId, size: u64, ty: TypeId) -> Result<u64, HeapError> {
        let base = self.space.stack_alloc(frame, self.meta_size + size + 1)?;
        self.place(base, size, ty)
    }

    /// Retypes every object of `frame` to `FREE` and releases the frame.
    pub fn release_frame(&mut self, frame: FrameId) -> Result<(), HeapError> {
        for base in self.space.frame_objects(frame)? {
            if self.space.is_managed(base) {
                let size = self.read_meta(base).size;
                self.write_meta(base, MetaHeader { ty: TypeId::FREE, size })?;
            }
        }
        self.space.stack_release(frame).map(|_| ())
    }

    fn diagnose(&self, kind: ErrorKind, static_type: &str, dynamic_type: String, offset: i64, site: &Site) -> bool {
        self.reporter.report(SanError {
            kind,
            static_type: static_type.to_string(),
            dynamic_type,
            offset,
            site: site.clone(),
        })
    }

    fn dynamic_name(&self, ty: TypeId) -> String {
        self.registry.name(ty)
    }

    /// Frees an object. Double frees and frees of legacy or interior
    /// addresses are reported, not propagated.
    pub fn type_free(&mut self, addr: u64, site: &Site) -> Result<(), HeapError> {
        let Some(r) = self.resolve(addr) else {
            self.diagnose(ErrorKind::TypeError, "free", "legacy".into(), 0, site);
            return Ok(());
        };
        if r.k != 0 {
            self.diagnose(ErrorKind::TypeError, "free", self.dynamic_name(r.meta.ty), r.k, site);
            return Ok(());
        }
        if r.meta.ty == TypeId::FREE {
            self.diagnose(ErrorKind::DoubleFree, "free", self.dynamic_name(TypeId::FREE), 0, site);
            return Ok(());
        }
        self.write_meta(r.base, MetaHeader { ty: TypeId::FREE, size: r.meta.size })?;
        self.space.lf_free(r.base)
    }

    /// Checks that `addr` points to a sub-object of type `s` (matched as
    /// `s[]`) and returns its bounds. Mismatches are reported and answered
    /// with wide bounds.
    pub fn type_check(&self, addr: u64, s: TypeId, site: &Site) -> AbsBounds {
        let Some(r) = self.resolve(addr) else {
            self.reporter.count_type_check(true);
            return AbsBounds::WIDE;
        };
        self.reporter.count_type_check(false);
        match self.registry.lookup(r.meta.ty, s, r.k, r.meta.size) {
            Some(m) => {
                let bptr = r.object_base(self.meta_size);
                let alloc = AbsBounds::new(bptr, bptr + r.meta.size);
                bounds_narrow(alloc, m.bounds.absolute(addr))
            }
            None => {
                let kind = if r.meta.ty == TypeId::FREE { ErrorKind::UseAfterFree } else { ErrorKind::TypeError };
                self.diagnose(kind, &self.registry.name(s), self.dynamic_name(r.meta.ty), r.k, site);
                AbsBounds::WIDE
            }
        }
    }

    /// The matching sub-object itself, without reporting; used by tests and
    /// tools.
    pub fn match_sub_object(&self, addr: u64, s: TypeId) -> Option<SubObject> {
        let r = self.resolve(addr)?;
        self.registry.lookup(r.meta.ty, s, r.k, r.meta.size).map(|m| m.sub)
    }

    /// Allocation bounds, without a type check. Freed objects get empty
    /// bounds so every access through them fails.
    pub fn bounds_get(&self, addr: u64) -> AbsBounds {
        let Some(r) = self.resolve(addr) else {
            return AbsBounds::WIDE;
        };
        let bptr = r.object_base(self.meta_size);
        if r.meta.ty == TypeId::FREE {
            AbsBounds::empty_at(bptr)
        } else {
            AbsBounds::new(bptr, bptr + r.meta.size)
        }
    }

    /// Reports a bounds error unless `[addr, addr + width]` (for accesses)
    /// or `addr` (for escapes) lies within `b`. Returns whether the check
    /// passed.
    pub fn bounds_check(
        &self,
        addr: u64,
        width: u64,
        b: AbsBounds,
        kind: CheckKind,
        static_type: &str,
        site: &Site,
    ) -> bool {
        self.reporter.count_bounds_check();
        let ok = match kind {
            CheckKind::Access => b.contains_range(addr, width),
            CheckKind::Escape => b.contains(addr),
        };
        if !ok {
            let (dynamic, k) = match self.resolve(addr) {
                Some(r) => (self.dynamic_name(r.meta.ty), r.k),
                None => ("legacy".to_string(), 0),
            };
            self.diagnose(ErrorKind::BoundsError, static_type, dynamic, k, site);
        }
        ok
    }
}

/// Interval intersection of the current bounds and a sub-object's extent.
pub fn bounds_narrow(b: AbsBounds, sub: AbsBounds) -> AbsBounds {
    b.intersect(sub)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::paper_t;
    use crate::lowfat::SpaceConfig;
    use crate::report::ReportMode;
    use crate::types::TypeUniverse;

    fn runtime(u: TypeUniverse) -> Runtime {
        let reg = Arc::new(TypeRegistry::build(Arc::new(u)));
        let space = AddressSpace::new(&SpaceConfig::default()).unwrap();
        Runtime::new(space, reg, Arc::new(Reporter::new(ReportMode::LogAll)))
    }

    fn site() -> Site {
        Site::new("t.ir", 1)
    }

    #[test]
    fn malloc_writes_meta() {
        let mut u = TypeUniverse::new();
        let (_, t) = paper_t(&mut u);
        let mut rt = runtime(u);
        let p = rt.type_malloc(24, t).unwrap();
        let base = rt.space.lf_base(p).unwrap();
        assert_eq!(base + 16, p);
        assert_eq!(rt.read_meta(p - 16), MetaHeader { ty: t, size: 24 });
    }

    #[test]
    fn paper_type_check() {
        let mut u = TypeUniverse::new();
        let (_, t) = paper_t(&mut u);
        let mut rt = runtime(u);
        let (int, double) = (rt.registry().universe().int(), rt.registry().universe().double());
        let p = rt.type_malloc(24, t).unwrap();
        assert_eq!(rt.type_check(p + 12, int, &site()), AbsBounds::new(p + 4, p + 16));
        assert_eq!(rt.reporter().error_count(), 0);
        assert_eq!(rt.type_check(p + 12, double, &site()), AbsBounds::WIDE);
        let b = rt.reporter().buckets();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].kind, ErrorKind::TypeError);
        assert_eq!(b[0].offset, 12);
    }

    #[test]
    fn int_array_check() {
        let u = TypeUniverse::new();
        let (int, float) = (u.int(), u.float());
        let mut rt = runtime(u);
        let p = rt.type_malloc(400, int).unwrap();
        assert_eq!(rt.type_check(p, int, &site()), AbsBounds::new(p, p + 400));
        assert_eq!(rt.type_check(p + 40, int, &site()), AbsBounds::new(p, p + 400));
        assert_eq!(rt.reporter().error_count(), 0);
        rt.type_check(p, float, &site());
        assert_eq!(rt.reporter().error_count(), 1);
    }

    #[test]
    fn legacy_check_is_wide_and_counted() {
        let u = TypeUniverse::new();
        let int = u.int();
        let mut rt = runtime(u);
        let q = rt.space.legacy_alloc(64).unwrap();
        assert_eq!(rt.type_check(q, int, &site()), AbsBounds::WIDE);
        assert_eq!(rt.reporter().error_count(), 0);
        assert_eq!(rt.reporter().counters().legacy_checks, 1);
    }

    #[test]
    fn free_then_check_and_double_free() {
        let u = TypeUniverse::new();
        let int = u.int();
        let mut rt = runtime(u);
        let p = rt.type_malloc(16, int).unwrap();
        rt.type_free(p, &site()).unwrap();
        for k in [0, 4, 8] {
            rt.type_check(p + k, int, &site());
        }
        rt.type_free(p, &site()).unwrap();
        let kinds: Vec<_> = rt.reporter().buckets().iter().map(|b| (b.kind, b.count)).collect();
        assert_eq!(
            kinds,
            vec![
                (ErrorKind::UseAfterFree, 1),
                (ErrorKind::UseAfterFree, 1),
                (ErrorKind::UseAfterFree, 1),
                (ErrorKind::DoubleFree, 1)
            ]
        );
        assert_eq!(rt.bounds_get(p), AbsBounds::empty_at(p));
    }

    #[test]
    fn reuse_after_free_at_other_type() {
        let u = TypeUniverse::new();
        let (int, float) = (u.int(), u.float());
        let mut rt = runtime(u);
        let p = rt.type_malloc(16, int).unwrap();
        rt.type_free(p, &site()).unwrap();
        let q = rt.type_malloc(16, float).unwrap();
        assert_eq!(p, q);
        rt.type_check(p, int, &site());
        let b = rt.reporter().buckets();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].kind, ErrorKind::TypeError);
        assert_eq!(b[0].dynamic_type, "float");
    }

    #[test]
    fn bad_frees_are_diagnosed() {
        let u = TypeUniverse::new();
        let int = u.int();
        let mut rt = runtime(u);
        let p = rt.type_malloc(16, int).unwrap();
        rt.type_free(p + 4, &site()).unwrap();
        let q = rt.space.legacy_alloc(8).unwrap();
        rt.type_free(q, &site()).unwrap();
        let b = rt.reporter().buckets();
        assert!(b.iter().all(|b| b.kind == ErrorKind::TypeError));
        assert_eq!(b.len(), 2);
        // p is still live.
        assert_eq!(rt.type_check(p, int, &site()), AbsBounds::new(p, p + 16));
    }

    #[test]
    fn checks_inside_meta_are_type_errors() {
        let u = TypeUniverse::new();
        let int = u.int();
        let mut rt = runtime(u);
        let p = rt.type_malloc(16, int).unwrap();
        rt.type_check(p - 8, int, &site());
        assert_eq!(rt.reporter().buckets()[0].offset, -8);
    }

    #[test]
    fn bounds_checks() {
        let u = TypeUniverse::new();
        let int = u.int();
        let mut rt = runtime(u);
        let p = rt.type_malloc(24, int).unwrap();
        let b = AbsBounds::new(p + 4, p + 16);
        assert!(rt.bounds_check(p + 12, 4, b, CheckKind::Access, "int", &site()));
        assert!(!rt.bounds_check(p + 16, 4, b, CheckKind::Access, "int", &site()));
        assert!(rt.bounds_check(p + 16, 0, b, CheckKind::Escape, "int", &site()));
        assert!(!rt.bounds_check(p, 4, b, CheckKind::Access, "int", &site()));
        assert_eq!(rt.reporter().counters().bounds_checks, 4);
        assert_eq!(rt.reporter().buckets().len(), 2);
    }

    #[test]
    fn narrowing() {
        let p = 0x1000;
        assert_eq!(
            bounds_narrow(AbsBounds::new(p, p + 24), AbsBounds::new(p + 4, p + 16)),
            AbsBounds::new(p + 4, p + 16)
        );
        assert_eq!(bounds_narrow(AbsBounds::WIDE, AbsBounds::new(p, p + 4)), AbsBounds::new(p, p + 4));
        assert_eq!(
            bounds_narrow(AbsBounds::new(p, p + 8), AbsBounds::new(p + 4, p + 16)),
            AbsBounds::new(p + 4, p + 8)
        );
    }

    #[test]
    fn stack_objects_become_free() {
        let u = TypeUniverse::new();
        let int = u.int();
        let mut rt = runtime(u);
        let f = rt.space.push_frame();
        let p = rt.type_alloca(f, 4, int).unwrap();
        assert_eq!(rt.type_check(p, int, &site()), AbsBounds::new(p, p + 4));
        rt.release_frame(f).unwrap();
        rt.type_check(p, int, &site());
        assert_eq!(rt.reporter().buckets()[0].kind, ErrorKind::UseAfterFree);
    }
}
