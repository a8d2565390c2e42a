//! Text form of functions, including check instructions.

use std::fmt::Write;

use super::{AllocSize, Function, Instr, Op, Operand, Program, UnOp};
use crate::runtime::CheckKind;
use crate::types::TypeUniverse;

/// Every function of `program`, one statement per line.
pub fn print_program(program: &Program) -> String {
    let mut out = String::new();
    for (n, f) in program.functions.iter().enumerate() {
        if n > 0 {
            out.push('\n');
        }
        out.push_str(&print_function(&program.universe, f));
    }
    out
}

pub fn print_function(u: &TypeUniverse, f: &Function) -> String {
    let params: Vec<String> = f.params.iter().map(|&p| format!("{}: {}", f.reg_name(p), u.name(f.reg_ty(p)))).collect();
    let mut out = format!("fn {}({})", f.name, params.join(", "));
    if let Some(r) = f.ret {
        let _ = write!(out, " -> {}", u.name(r));
    }
    out.push_str(" {\n");
    Printer { u, f, out: &mut out }.body(&f.body, 1);
    out.push_str("}\n");
    out
}

struct Printer<'a> {
    u: &'a TypeUniverse,
    f: &'a Function,
    out: &'a mut String,
}

impl Printer<'_> {
    fn v(&self, o: &Operand) -> String {
        match o {
            Operand::Reg(r) => self.f.reg_name(*r).to_string(),
            Operand::Int(i) => i.to_string(),
            Operand::Float(x) => format!("{x:?}"),
        }
    }

    fn line(&mut self, depth: usize, s: &str) {
        for _ in 0..depth {
            self.out.push_str("    ");
        }
        self.out.push_str(s);
        self.out.push('\n');
    }

    fn body(&mut self, body: &[Instr], depth: usize) {
        for i in body {
            self.instr(i, depth);
        }
    }

    fn instr(&mut self, i: &Instr, depth: usize) {
        let n = |r| self.f.reg_name(r).to_string();
        let t = |t| self.u.name(t);
        let s = match &i.op {
            Op::Copy { dst, src } => format!("{} = {};", n(*dst), self.v(src)),
            Op::Unary { dst, op, src } => {
                let sym = if *op == UnOp::Neg { "-" } else { "!" };
                format!("{} = {sym}{};", n(*dst), self.v(src))
            }
            Op::Binary { dst, op, lhs, rhs } => {
                format!("{} = {} {} {};", n(*dst), self.v(lhs), op.symbol(), self.v(rhs))
            }
            Op::AllocHeap { dst, ty, size } => {
                let ty = ty.map_or_else(|| "?".to_string(), t);
                match size {
                    AllocSize::Elems(c) => format!("{} = new {ty}[{}];", n(*dst), self.v(c)),
                    AllocSize::Bytes(b) => format!("{} = malloc<{ty}>({});", n(*dst), self.v(b)),
                }
            }
            Op::AllocStack { dst, ty, count } => format!("{} = alloca {}[{count}];", n(*dst), t(*ty)),
            Op::AllocLegacy { dst, size } => format!("{} = ext_alloc({});", n(*dst), self.v(size)),
            Op::Free { src } => format!("free({});", self.v(src)),
            Op::Load { dst, addr, .. } => format!("{} = *{};", n(*dst), n(*addr)),
            Op::Store { addr, val, .. } => format!("*{} = {};", n(*addr), self.v(val)),
            Op::FieldAddr { dst, src, record, field, .. } => {
                let name = self.u.get(*record).as_record().map_or("?", |r| r.fields[*field].name.as_str());
                format!("{} = &{}->{name};", n(*dst), n(*src))
            }
            Op::IndexAddr { dst, src, index, scale: 1 } => format!("{} = {} + {};", n(*dst), n(*src), self.v(index)),
            Op::IndexAddr { dst, src, index, scale } => {
                format!("{} = {} + {} * {scale};", n(*dst), n(*src), self.v(index))
            }
            Op::Cast { dst, src, ty } => format!("{} = ({}) {};", n(*dst), t(*ty), self.v(src)),
            Op::Call { dst, func, args } => {
                let args: Vec<String> = args.iter().map(|a| self.v(a)).collect();
                match dst {
                    Some(d) => format!("{} = {func}({});", n(*d), args.join(", ")),
                    None => format!("{func}({});", args.join(", ")),
                }
            }
            Op::Return { val: Some(v) } => format!("return {};", self.v(v)),
            Op::Return { val: None } => "return;".to_string(),
            Op::If { cond, then_body, else_body } => {
                self.line(depth, &format!("if ({}) {{", self.v(cond)));
                self.body(then_body, depth + 1);
                if !else_body.is_empty() {
                    self.line(depth, "} else {");
                    self.body(else_body, depth + 1);
                }
                "}".to_string()
            }
            Op::While { cond_body, cond, body } => {
                self.line(depth, "loop {");
                self.body(cond_body, depth + 1);
                self.line(depth + 1, &format!("if (!{}) break;", self.v(cond)));
                self.body(body, depth + 1);
                "}".to_string()
            }
            Op::CheckType { addr, ty } => format!("{a}.b = type_check({a}, {}[]);", t(*ty), a = n(*addr)),
            Op::BoundsGet { addr } => format!("{a}.b = bounds_get({a});", a = n(*addr)),
            Op::Narrow { dst, src, size } => {
                let size = size.map_or_else(|| "inf".to_string(), |s| s.to_string());
                format!("{d}.b = bounds_narrow({}.b, {d}, {size});", n(*src), d = n(*dst))
            }
            Op::BoundsCopy { dst, src } => format!("{}.b = {}.b;", n(*dst), n(*src)),
            Op::CheckBounds { addr, width, kind: CheckKind::Access, .. } => {
                format!("bounds_check({a}, {width}, {a}.b);", a = n(*addr))
            }
            Op::CheckBounds { addr, kind: CheckKind::Escape, .. } => {
                format!("bounds_check_escape({a}, {a}.b);", a = n(*addr))
            }
        };
        self.line(depth, &s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{instrument, parse_program, Variant};

    #[test]
    fn instrumented_sum_text() {
        let src = "fn sum(a: *int, len: int) -> int {
    let s: int = 0;
    let i: int = 0;
    while (i < len) { s = s + a[i]; i = i + 1; }
    return s;
}";
        let p = instrument(&parse_program("t.ir", src).unwrap(), Variant::Full);
        let text = print_program(&p);
        assert!(text.starts_with("fn sum(a: int *, len: int) -> int {\n    a.b = type_check(a, int[]);\n"), "{text}");
        assert!(text.contains("bounds_check($"), "{text}");
        assert!(text.contains("loop {"));
    }
}
