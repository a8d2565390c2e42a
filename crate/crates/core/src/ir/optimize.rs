//! Removal of checks that can never fail or that repeat an earlier check.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::instrument::Checked;
use super::{forward, AllocSize, Facts, Function, Instr, Op, Operand, Program, Reg};
use crate::types::{TypeId, TypeUniverse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptConfig {
    /// Type checks after identity casts and upcasts.
    pub identity_casts: bool,
    /// Bounds checks repeated on an unchanged address and bounds.
    pub subsumed_bounds: bool,
    /// Narrowing that cannot shrink the bounds.
    pub redundant_narrow: bool,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig { identity_casts: true, subsumed_bounds: true, redundant_narrow: true }
    }
}

impl OptConfig {
    pub fn none() -> Self {
        OptConfig { identity_casts: false, subsumed_bounds: false, redundant_narrow: false }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptStats {
    pub type_checks_removed: usize,
    pub bounds_checks_removed: usize,
    pub narrows_removed: usize,
}

impl OptStats {
    pub fn total(&self) -> usize {
        self.type_checks_removed + self.bounds_checks_removed + self.narrows_removed
    }
}

/// Rewrites an instrumented program in place.
pub fn optimize(program: &mut Program, cfg: &OptConfig) -> OptStats {
    let mut stats = OptStats::default();
    let u = &program.universe;
    for f in &mut program.functions {
        if cfg.identity_casts {
            stats.type_checks_removed += cast_checks(u, f);
        }
        if cfg.subsumed_bounds {
            stats.bounds_checks_removed += subsumed_bounds(f);
        }
        if cfg.redundant_narrow {
            stats.narrows_removed += redundant_narrows(u, f);
        }
    }
    stats
}

/// Offset-0 base class path from `derived` down to `base`.
fn is_prefix_base(u: &TypeUniverse, derived: TypeId, base: TypeId) -> bool {
    if derived == base {
        return true;
    }
    let Some(rec) = u.get(derived).as_record() else {
        return false;
    };
    rec.fields.iter().any(|f| f.is_base && f.offset == 0 && is_prefix_base(u, f.ty, base))
}

fn cast_checks(u: &TypeUniverse, f: &mut Function) -> usize {
    fn go(u: &TypeUniverse, f: &Function, body: &mut [Instr], removed: &mut usize) {
        let mut cast: Option<(Reg, Reg)> = None;
        for i in body.iter_mut() {
            match &mut i.op {
                Op::If { then_body, else_body, .. } => {
                    go(u, f, then_body, removed);
                    go(u, f, else_body, removed);
                }
                Op::While { cond_body, body, .. } => {
                    go(u, f, cond_body, removed);
                    go(u, f, body, removed);
                }
                Op::CheckType { addr, ty } => {
                    if let Some((dst, src)) = cast.filter(|(d, _)| d == addr) {
                        let from = u.pointee(f.reg_ty(src));
                        if from == Some(*ty) {
                            i.op = Op::BoundsCopy { dst, src };
                            *removed += 1;
                        } else if from.is_some_and(|d| is_prefix_base(u, d, *ty)) {
                            i.op = Op::Narrow { dst, src, size: Some(u.size_of(*ty)) };
                            *removed += 1;
                        }
                    }
                }
                _ => {}
            }
            cast = match &i.op {
                Op::Cast { dst, src: Operand::Reg(s), .. } if f.bounded.contains(s) && dst != s => Some((*dst, *s)),
                _ => None,
            };
        }
    }
    let mut removed = 0;
    let mut body = std::mem::take(&mut f.body);
    go(u, f, &mut body, &mut removed);
    f.body = body;
    removed
}

fn subsumed_bounds(f: &mut Function) -> usize {
    let mut removed = 0;
    let mut facts = Checked::default();
    forward(&mut f.body, &mut facts, &mut |i: &mut Instr, s: &mut Checked| {
        if let Op::CheckBounds { addr, width, .. } = &i.op {
            if s.0.get(addr).is_some_and(|w| w >= width) {
                removed += 1;
                return false;
            }
        }
        // Attribution of a failure depends on the object's current type.
        if matches!(i.op, Op::Free { .. } | Op::Call { .. }) {
            s.0.clear();
        }
        s.apply(i);
        true
    });
    removed
}

/// For each register, an upper bound `e` such that its bounds lie within
/// `[value, value + e]`, and pairs of registers known to hold equal values.
#[derive(Debug, Clone, Default)]
struct Extents {
    extent: BTreeMap<Reg, u64>,
    same: BTreeMap<Reg, Reg>,
}

impl Extents {
    fn kill_value(&mut self, r: Reg) {
        self.extent.remove(&r);
        self.same.retain(|a, b| *a != r && *b != r);
    }
}

impl Facts for Extents {
    fn kill(&mut self, r: Reg) {
        self.kill_value(r);
    }

    fn meet(&mut self, other: &Self) {
        self.extent.retain(|r, e| match other.extent.get(r) {
            Some(o) => {
                *e = (*e).max(*o);
                true
            }
            None => false,
        });
        self.same.retain(|a, b| other.same.get(a) == Some(b));
    }
}

fn redundant_narrows(u: &TypeUniverse, f: &mut Function) -> usize {
    let mut removed = 0;
    let mut facts = Extents::default();
    let mut last_alloc: Option<(Reg, u64)> = None;
    forward(&mut f.body, &mut facts, &mut |i: &mut Instr, s: &mut Extents| {
        let alloc = last_alloc.take();
        match i.op.clone() {
            Op::AllocHeap { dst, ty, size } => {
                s.kill_value(dst);
                let elem = ty.map_or(1, |t| u.size_of(t));
                last_alloc = match size {
                    AllocSize::Elems(Operand::Int(1)) => Some((dst, elem)),
                    AllocSize::Bytes(Operand::Int(n)) if n >= 0 => Some((dst, n as u64)),
                    _ => None,
                };
            }
            Op::AllocStack { dst, ty, count } => {
                s.kill_value(dst);
                last_alloc = Some((dst, u.size_of(ty) * count));
            }
            Op::BoundsGet { addr } => {
                s.extent.remove(&addr);
                if let Some((r, e)) = alloc.filter(|(r, _)| *r == addr) {
                    s.extent.insert(r, e);
                }
            }
            Op::FieldAddr { dst, src, offset, .. } => {
                s.kill_value(dst);
                if offset == 0 && dst != src {
                    s.same.insert(dst, src);
                }
            }
            Op::Copy { dst, src: Operand::Reg(src) } => {
                s.kill_value(dst);
                if dst != src {
                    s.same.insert(dst, src);
                }
            }
            Op::Narrow { dst, src, size } => {
                let equal = s.same.get(&dst) == Some(&src);
                let within = match (s.extent.get(&src), size) {
                    (Some(e), Some(sz)) => *e <= sz,
                    _ => false,
                };
                let src_extent = s.extent.get(&src).copied();
                s.extent.remove(&dst);
                if equal && within {
                    i.op = Op::BoundsCopy { dst, src };
                    removed += 1;
                    if let Some(e) = src_extent {
                        s.extent.insert(dst, e);
                    }
                } else if let Some(sz) = size {
                    s.extent.insert(dst, src_extent.map_or(sz, |e| e.min(sz)).min(sz));
                }
            }
            Op::BoundsCopy { dst, src } => {
                let e = s.extent.get(&src).copied();
                s.extent.remove(&dst);
                if let Some(e) = e.filter(|_| s.same.get(&dst) == Some(&src)) {
                    s.extent.insert(dst, e);
                }
            }
            _ => {
                if let Some(d) = i.def() {
                    s.kill_value(d);
                }
                if let Some(d) = i.bounds_def() {
                    s.extent.remove(&d);
                }
            }
        }
        true
    });
    removed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{instrument, parse_program, Variant};

    fn prepared(src: &str) -> Program {
        instrument(&parse_program("t.ir", src).unwrap(), Variant::Full)
    }

    #[test]
    fn identity_cast_check_removed() {
        let src = "fn f(p: *int) -> int { let q = (int *) p; let a = *q; let b = *p; let r0 = a + b; return r0; }";
        let mut p = prepared(src);
        let before = p.static_checks().type_checks;
        let s =
            optimize(&mut p, &OptConfig { subsumed_bounds: false, redundant_narrow: false, ..OptConfig::default() });
        assert_eq!(s.type_checks_removed, 1);
        assert_eq!(p.static_checks().type_checks, before - 1);
    }

    #[test]
    fn upcast_becomes_narrow() {
        let src = "struct B { int x; }; struct D : B { int y; };
fn f(d: *D) -> int { let b = (B *) d; let x = b->x; let r0 = x + d->y; return r0; }";
        let mut p = prepared(src);
        let s =
            optimize(&mut p, &OptConfig { subsumed_bounds: false, redundant_narrow: false, ..OptConfig::default() });
        assert_eq!(s.type_checks_removed, 1);
        let f = p.function("f").unwrap();
        assert!(f.walk().iter().any(|i| matches!(i.op, Op::Narrow { size: Some(4), .. })));
    }

    #[test]
    fn downcast_keeps_check() {
        let src = "struct B { int x; }; struct D : B { int y; };
fn f(b: *B) -> int { let d = (D *) b; let y = d->y; let r0 = y + b->x; return r0; }";
        let mut p = prepared(src);
        assert_eq!(optimize(&mut p, &OptConfig::default()).type_checks_removed, 0);
    }

    #[test]
    fn repeated_load_check_removed() {
        let src = "fn f(p: *int) -> int { let a = *p; let b = *p; let r0 = a + b; return r0; }";
        let mut p = prepared(src);
        assert_eq!(p.static_checks().bounds_checks, 2);
        let s = optimize(&mut p, &OptConfig::default());
        assert_eq!(s.bounds_checks_removed, 1);
        assert_eq!(p.static_checks().bounds_checks, 1);
        crate::ir::audit_guarding(&p).unwrap();
    }

    #[test]
    fn wider_check_does_not_cover_after_redefinition() {
        let src = "fn f(p: *int) -> int { let a = *p; p = p + 4; let b = *p; let r0 = a + b; return r0; }";
        let mut p = prepared(src);
        assert_eq!(optimize(&mut p, &OptConfig::default()).bounds_checks_removed, 0);
    }

    #[test]
    fn branch_checks_meet() {
        let src = "fn f(p: *int, c: int) -> int {
    let a: int = 0;
    if (c) { a = *p; } else { a = 1; }
    let z = *p;
    let r0 = a + z; return r0;
}";
        let mut p = prepared(src);
        assert_eq!(optimize(&mut p, &OptConfig::default()).bounds_checks_removed, 0);
        let src = "fn f(p: *int, c: int) -> int {
    let a: int = 0;
    if (c) { a = *p; } else { let t = *p; a = t + 1; }
    let z = *p;
    let r0 = a + z; return r0;
}";
        let mut p = prepared(src);
        assert_eq!(optimize(&mut p, &OptConfig::default()).bounds_checks_removed, 1);
    }

    #[test]
    fn sole_field_narrow_removed() {
        let src = "struct W { int v; };
fn main() -> int { let w = new W; w->v = 3; return w->v; }";
        let mut p = prepared(src);
        assert_eq!(p.static_checks().narrows, 2);
        let s = optimize(&mut p, &OptConfig::default());
        assert_eq!(s.narrows_removed, 2);
        crate::ir::audit_guarding(&p).unwrap();
    }

    #[test]
    fn wider_object_keeps_narrow() {
        let src = "struct A { int v; int w; };
fn main() -> int { let a = new A; a->v = 3; return a->v; }";
        let mut p = prepared(src);
        assert_eq!(optimize(&mut p, &OptConfig::default()).narrows_removed, 0);
    }

    #[test]
    fn disabled_config_changes_nothing() {
        let src = "fn f(p: *int) -> int { let q = (int *) p; let a = *q; let b = *q; let r0 = a + b; return r0; }";
        let mut p = prepared(src);
        let before = p.clone();
        assert_eq!(optimize(&mut p, &OptConfig::none()).total(), 0);
        assert_eq!(p.functions, before.functions);
    }
}
