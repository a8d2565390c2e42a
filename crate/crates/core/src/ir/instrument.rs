//! The check instrumentation schema.
//!
//! | form                         | inserted                                   |
//! |------------------------------|--------------------------------------------|
//! | address parameter `p`        | `p.b = type_check(p, T[])` at entry        |
//! | `q = f(..)` returning `T *`  | `q.b = type_check(q, T[])`                 |
//! | `q = *p` loading a `T *`     | `q.b = type_check(q, T[])`                 |
//! | `q = (T *) x`                | `q.b = type_check(q, T[])`                 |
//! | `q = &p->f`                  | `q.b = narrow(p.b, q, sizeof(f))`          |
//! | `q = p + k`, `q = p`         | `q.b = p.b`                                |
//! | `*p`, `p` escapes            | `bounds_check(p, width, p.b)`              |
//!
//! Only addresses that are dereferenced, directly or through derived
//! addresses, are instrumented.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{forward, Facts, Function, Instr, Op, Operand, Program, Reg};
use crate::runtime::CheckKind;
use crate::types::{TypeId, TypeUniverse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Type checks, sub-object narrowing and bounds checks.
    #[default]
    Full,
    /// Allocation bounds only: type checks become `bounds_get`, no narrowing.
    Bounds,
    /// Type checks on every cast, nothing else.
    Type,
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Variant::Full),
            "bounds" => Ok(Variant::Bounds),
            "type" => Ok(Variant::Type),
            _ => Err(format!("unknown variant `{s}` (expected full, bounds or type)")),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::Bounds => "bounds",
            Variant::Type => "type",
        })
    }
}

/// Returns an instrumented copy of `program`.
pub fn instrument(program: &Program, variant: Variant) -> Program {
    let mut out = program.clone();
    for f in &mut out.functions {
        match variant {
            Variant::Type => instrument_casts(&out.universe, f),
            _ => instrument_function(&out.universe, f, variant),
        }
    }
    out
}

fn checkable(u: &TypeUniverse, ty: TypeId) -> Option<TypeId> {
    u.pointee(ty).filter(|&p| p != u.void())
}

/// Address registers whose value is dereferenced, directly or through a
/// derived address.
pub fn used_addresses(u: &TypeUniverse, f: &Function) -> BTreeSet<Reg> {
    let instrs = f.walk();
    let mut used = BTreeSet::new();
    for i in &instrs {
        if let Op::Load { addr, .. } | Op::Store { addr, .. } = &i.op {
            used.insert(*addr);
        }
    }
    loop {
        let before = used.len();
        for i in &instrs {
            match &i.op {
                Op::FieldAddr { dst, src, .. }
                | Op::IndexAddr { dst, src, .. }
                | Op::Copy { dst, src: Operand::Reg(src) }
                    if used.contains(dst) =>
                {
                    used.insert(*src);
                }
                _ => {}
            }
        }
        if used.len() == before {
            break;
        }
    }
    used.retain(|r| checkable(u, f.reg_ty(*r)).is_some());
    used
}

struct Ctx<'a> {
    u: &'a TypeUniverse,
    f: &'a Function,
    bounded: &'a BTreeSet<Reg>,
    variant: Variant,
}

impl Ctx<'_> {
    fn has(&self, r: Reg) -> bool {
        self.bounded.contains(&r)
    }

    fn pointee(&self, r: Reg) -> TypeId {
        checkable(self.u, self.f.reg_ty(r)).expect("bounded registers are addresses")
    }

    fn check_type(&self, r: Reg) -> Op {
        match self.variant {
            Variant::Bounds => Op::BoundsGet { addr: r },
            _ => Op::CheckType { addr: r, ty: self.pointee(r) },
        }
    }

    fn escape(&self, v: &Operand, line: u32, out: &mut Vec<Instr>) {
        if let Operand::Reg(r) = v {
            if self.has(*r) {
                out.push(Instr::new(
                    Op::CheckBounds { addr: *r, width: 0, kind: CheckKind::Escape, ty: self.pointee(*r) },
                    line,
                ));
            }
        }
    }

    fn access(&self, addr: Reg, ty: TypeId, line: u32, out: &mut Vec<Instr>) {
        if self.has(addr) {
            let width = self.u.size_of(ty);
            out.push(Instr::new(Op::CheckBounds { addr, width, kind: CheckKind::Access, ty }, line));
        }
    }

    fn body(&self, body: Vec<Instr>) -> Vec<Instr> {
        let mut out = Vec::with_capacity(body.len() * 2);
        for mut i in body {
            let line = i.line;
            let mut after = None;
            match &mut i.op {
                Op::If { then_body, else_body, .. } => {
                    *then_body = self.body(std::mem::take(then_body));
                    *else_body = self.body(std::mem::take(else_body));
                }
                Op::While { cond_body, body, .. } => {
                    *cond_body = self.body(std::mem::take(cond_body));
                    *body = self.body(std::mem::take(body));
                }
                Op::Load { dst, addr, ty } => {
                    self.access(*addr, *ty, line, &mut out);
                    if self.has(*dst) {
                        after = Some(self.check_type(*dst));
                    }
                }
                Op::Store { addr, val, ty } => {
                    self.escape(val, line, &mut out);
                    self.access(*addr, *ty, line, &mut out);
                }
                Op::Call { dst, args, .. } => {
                    for a in args.iter() {
                        self.escape(a, line, &mut out);
                    }
                    if let Some(d) = dst.filter(|d| self.has(*d)) {
                        after = Some(self.check_type(d));
                    }
                }
                Op::Return { val: Some(v) } => self.escape(v, line, &mut out),
                Op::Cast { dst, .. } | Op::Copy { dst, src: Operand::Int(_) | Operand::Float(_) } if self.has(*dst) => {
                    after = Some(self.check_type(*dst));
                }
                Op::AllocHeap { dst, .. } | Op::AllocStack { dst, .. } | Op::AllocLegacy { dst, .. }
                    if self.has(*dst) =>
                {
                    after = Some(Op::BoundsGet { addr: *dst });
                }
                Op::FieldAddr { dst, src, size, .. } if self.has(*dst) => {
                    after = Some(match self.variant {
                        Variant::Bounds => Op::BoundsCopy { dst: *dst, src: *src },
                        _ => Op::Narrow { dst: *dst, src: *src, size: *size },
                    });
                }
                Op::IndexAddr { dst, src, .. } | Op::Copy { dst, src: Operand::Reg(src) }
                    if self.has(*dst) && dst != src =>
                {
                    after = Some(Op::BoundsCopy { dst: *dst, src: *src });
                }
                _ => {}
            }
            out.push(i);
            if let Some(op) = after {
                out.push(Instr::new(op, line));
            }
        }
        out
    }
}

fn instrument_function(u: &TypeUniverse, f: &mut Function, variant: Variant) {
    let bounded = used_addresses(u, f);
    let body = std::mem::take(&mut f.body);
    let mut new_body = Vec::new();
    {
        let cx = Ctx { u, f, bounded: &bounded, variant };
        for &p in &f.params {
            if cx.has(p) {
                new_body.push(Instr::new(cx.check_type(p), f.line));
            }
        }
        new_body.extend(cx.body(body));
    }
    f.body = new_body;
    f.bounded = bounded;
}

fn instrument_casts(u: &TypeUniverse, f: &mut Function) {
    fn go(u: &TypeUniverse, f: &Function, body: Vec<Instr>) -> Vec<Instr> {
        let mut out = Vec::with_capacity(body.len());
        for mut i in body {
            let line = i.line;
            let mut after = None;
            match &mut i.op {
                Op::If { then_body, else_body, .. } => {
                    *then_body = go(u, f, std::mem::take(then_body));
                    *else_body = go(u, f, std::mem::take(else_body));
                }
                Op::While { cond_body, body, .. } => {
                    *cond_body = go(u, f, std::mem::take(cond_body));
                    *body = go(u, f, std::mem::take(body));
                }
                Op::Cast { dst, .. } => {
                    if let Some(t) = checkable(u, f.reg_ty(*dst)) {
                        after = Some(Op::CheckType { addr: *dst, ty: t });
                    }
                }
                _ => {}
            }
            out.push(i);
            if let Some(op) = after {
                out.push(Instr::new(op, line));
            }
        }
        out
    }
    let body = std::mem::take(&mut f.body);
    f.body = go(u, f, body);
    f.bounded.clear();
}

/// Widest access checked on each address since its last redefinition.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub(crate) struct Checked(pub BTreeMap<Reg, u64>);

impl Facts for Checked {
    fn kill(&mut self, r: Reg) {
        self.0.remove(&r);
    }

    fn meet(&mut self, other: &Self) {
        self.0.retain(|r, w| match other.0.get(r) {
            Some(o) => {
                *w = (*w).min(*o);
                true
            }
            None => false,
        });
    }
}

impl Checked {
    /// Effect of a non-structured instruction.
    pub(crate) fn apply(&mut self, i: &Instr) {
        if let Op::CheckBounds { addr, width, .. } = &i.op {
            let w = self.0.entry(*addr).or_insert(*width);
            *w = (*w).max(*width);
        }
        if let Some(d) = i.def() {
            self.kill(d);
        }
        if let Some(d) = i.bounds_def() {
            self.kill(d);
        }
    }
}

/// Verifies that every load and store is preceded, on every path, by a
/// bounds check of at least its width on the same address value.
pub fn audit_guarding(program: &Program) -> Result<(), String> {
    let mut problems = Vec::new();
    for f in &program.functions {
        let mut body = f.body.clone();
        let mut facts = Checked::default();
        forward(&mut body, &mut facts, &mut |i: &mut Instr, s: &mut Checked| {
            let need = match &i.op {
                Op::Load { addr, ty, .. } | Op::Store { addr, ty, .. } => Some((*addr, program.universe.size_of(*ty))),
                _ => None,
            };
            if let Some((addr, width)) = need {
                if s.0.get(&addr).is_none_or(|w| *w < width) {
                    problems.push(format!("{}:{}: unguarded access through `{}`", f.name, i.line, f.reg_name(addr)));
                }
            }
            s.apply(i);
            true
        });
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(problems.join("\n"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;

    pub const LIST: &str = "struct node { int val; struct node *next; };
fn length(xs: *node) -> int {
    let n: int = 0;
    while (xs != null) {
        xs = xs->next;
        n = n + 1;
    }
    return n;
}
fn sum(a: *int, len: int) -> int {
    let s: int = 0;
    let i: int = 0;
    while (i < len) {
        s = s + a[i];
        i = i + 1;
    }
    return s;
}
fn only_cast(v: *void) -> *int {
    let p = (int *) v;
    return p;
}
";

    fn counts(p: &Program, name: &str) -> (usize, usize) {
        let f = p.function(name).unwrap();
        let w = f.walk();
        let tc = w.iter().filter(|i| matches!(i.op, Op::CheckType { .. })).count();
        let bc = w.iter().filter(|i| matches!(i.op, Op::CheckBounds { .. })).count();
        (tc, bc)
    }

    #[test]
    fn sum_and_length_static_checks() {
        let p = instrument(&parse_program("t.ir", LIST).unwrap(), Variant::Full);
        assert_eq!(counts(&p, "sum"), (1, 1));
        // Entry check plus one per loaded `next`.
        assert_eq!(counts(&p, "length"), (2, 1));
        // A cast that is never dereferenced attracts nothing.
        assert_eq!(counts(&p, "only_cast"), (0, 0));
        audit_guarding(&p).unwrap();
    }

    #[test]
    fn entry_check_comes_first() {
        let p = instrument(&parse_program("t.ir", LIST).unwrap(), Variant::Full);
        let f = p.function("sum").unwrap();
        assert!(matches!(f.body[0].op, Op::CheckType { addr, .. } if addr == f.params[0]));
    }

    #[test]
    fn bounds_variant_uses_bounds_get() {
        let p = instrument(&parse_program("t.ir", LIST).unwrap(), Variant::Bounds);
        let s = p.static_checks();
        assert_eq!(s.type_checks, 0);
        assert_eq!(s.narrows, 0);
        assert!(s.bounds_gets >= 3);
        audit_guarding(&p).unwrap();
    }

    #[test]
    fn type_variant_checks_every_cast() {
        let p = instrument(&parse_program("t.ir", LIST).unwrap(), Variant::Type);
        let s = p.static_checks();
        assert_eq!((s.type_checks, s.bounds_checks), (1, 0));
        assert_eq!(counts(&p, "only_cast"), (1, 0));
    }

    #[test]
    fn uninstrumented_fails_audit() {
        let p = parse_program("t.ir", LIST).unwrap();
        let err = audit_guarding(&p).unwrap_err();
        assert!(err.contains("sum"));
    }

    #[test]
    fn narrowing_on_field_address() {
        let src = "struct account { int number[8]; float balance; };
fn main() { let a = new account; a->balance = 1.0; }";
        let p = instrument(&parse_program("t.ir", src).unwrap(), Variant::Full);
        let s = p.static_checks();
        assert_eq!((s.type_checks, s.bounds_gets, s.narrows, s.bounds_checks), (0, 1, 1, 1));
    }
}
