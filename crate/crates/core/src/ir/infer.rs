//! Binds untyped `malloc` results to the type of their first use.

use std::collections::BTreeSet;

use super::{Function, Op, Operand, Program, Reg};
use crate::types::{TypeId, TypeUniverse};

/// Gives every `malloc(n)` without an explicit type the static type of the
/// first load, store or member selection through its result (or a copy,
/// cast or offset of it), scanning forward in program order. Results that
/// are never used that way become `char[]`.
pub fn infer_malloc_types(program: &mut Program) {
    let char_ty = program.universe.char();
    for f in &mut program.functions {
        let n = f.walk().len();
        for at in 0..n {
            let (dst, untyped) = match &f.walk()[at].op {
                Op::AllocHeap { dst, ty: None, .. } => (*dst, true),
                _ => (Reg(0), false),
            };
            if !untyped {
                continue;
            }
            let ty = first_use(&program.universe, f, at, dst).unwrap_or(char_ty);
            set_type(f, at, ty);
        }
    }
}

fn first_use(u: &TypeUniverse, f: &Function, at: usize, root: Reg) -> Option<TypeId> {
    let mut aliases = BTreeSet::from([root]);
    for i in f.walk().into_iter().skip(at + 1) {
        let pointee = |r: &Reg| u.pointee(f.reg_ty(*r));
        match &i.op {
            Op::Load { addr, .. } | Op::Store { addr, .. } if aliases.contains(addr) => return pointee(addr),
            Op::FieldAddr { src, record, .. } if aliases.contains(src) => return Some(*record),
            Op::IndexAddr { dst, src, .. } if aliases.contains(src) => {
                aliases.insert(*dst);
            }
            Op::Copy { dst, src: Operand::Reg(s) } | Op::Cast { dst, src: Operand::Reg(s), .. }
                if aliases.contains(s) =>
            {
                aliases.insert(*dst);
            }
            _ => {
                if let Some(d) = i.def() {
                    aliases.remove(&d);
                }
            }
        }
        if aliases.is_empty() {
            return None;
        }
    }
    None
}

fn set_type(f: &mut Function, at: usize, ty: TypeId) {
    fn go(body: &mut [super::Instr], idx: &mut usize, at: usize, ty: TypeId) -> bool {
        for i in body {
            if *idx == at {
                if let Op::AllocHeap { ty: t, .. } = &mut i.op {
                    *t = Some(ty);
                }
                return true;
            }
            *idx += 1;
            let done = match &mut i.op {
                Op::If { then_body, else_body, .. } => go(then_body, idx, at, ty) || go(else_body, idx, at, ty),
                Op::While { cond_body, body, .. } => go(cond_body, idx, at, ty) || go(body, idx, at, ty),
                _ => false,
            };
            if done {
                return true;
            }
        }
        false
    }
    let mut idx = 0;
    go(&mut f.body, &mut idx, at, ty);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;

    fn alloc_types(src: &str) -> Vec<Option<String>> {
        let mut p = parse_program("t.ir", src).unwrap();
        infer_malloc_types(&mut p);
        p.functions[0]
            .walk()
            .iter()
            .filter_map(|i| match &i.op {
                Op::AllocHeap { ty, .. } => Some(ty.map(|t| p.universe.name(t))),
                _ => None,
            })
            .collect()
    }

    const T: &str = "struct S { int a[3] @0; char *s @12; } @size(20);\nstruct T { float f; S t; };\n";

    #[test]
    fn first_member_use_binds_record() {
        let src = format!("{T}fn main() -> int {{ let r: *T = malloc(sizeof(T)); r->f = 1.0; return 0; }}");
        assert_eq!(alloc_types(&src), vec![Some("T".into())]);
    }

    #[test]
    fn unused_defaults_to_char() {
        assert_eq!(alloc_types("fn main() { let v = malloc(64); }"), vec![Some("char".into())]);
    }

    #[test]
    fn new_and_explicit_are_untouched() {
        let src =
            format!("{T}fn main() {{ let q = new T; let b = malloc<int>(8); let c: *float = (float *) b; *c = 1.0; }}");
        assert_eq!(alloc_types(&src), vec![Some("T".into()), Some("int".into())]);
    }

    #[test]
    fn use_through_cast_and_offset() {
        let src = "fn main() { let v = malloc(64); let p = (double *) v; let q = p + 8; *q = 2.0; }";
        assert_eq!(alloc_types(src), vec![Some("double".into())]);
    }
}
