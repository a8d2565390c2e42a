//! A small three-address IR for C-like programs, its instrumentation pass,
//! check-removal optimizations and interpreter.

pub mod infer;
pub mod instrument;
pub mod interp;
mod lexer;
pub mod optimize;
pub mod parse;
pub mod print;

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::runtime::CheckKind;
use crate::types::{TypeId, TypeUniverse};

pub use infer::infer_malloc_types;
pub use instrument::{audit_guarding, instrument, Variant};
pub use interp::{interpret, InterpConfig};
pub use optimize::{optimize, OptConfig, OptStats};
pub use parse::{parse_program, parse_types};
pub use print::print_program;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{line}:{col}: {msg}")]
pub struct ParseError {
    pub line: u32,
    pub col: u32,
    pub msg: String,
}

impl ParseError {
    pub fn new(line: u32, col: u32, msg: impl Into<String>) -> Self {
        ParseError { line, col, msg: msg.into() }
    }
}

/// Register index within its function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Reg(pub u32);

impl Reg {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegInfo {
    pub name: String,
    pub ty: TypeId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Operand {
    Reg(Reg),
    Int(i64),
    Float(f64),
}

impl Operand {
    pub fn reg(self) -> Option<Reg> {
        match self {
            Operand::Reg(r) => Some(r),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    LogicAnd,
    LogicOr,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Rem => "%",
            BinOp::And => "&",
            BinOp::Or => "|",
            BinOp::Xor => "^",
            BinOp::Shl => "<<",
            BinOp::Shr => ">>",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::LogicAnd => "&&",
            BinOp::LogicOr => "||",
        }
    }

    pub fn from_symbol(s: &str) -> Option<BinOp> {
        use BinOp::*;
        [Add, Sub, Mul, Div, Rem, And, Or, Xor, Shl, Shr, Eq, Ne, Lt, Le, Gt, Ge, LogicAnd, LogicOr]
            .into_iter()
            .find(|op| op.symbol() == s)
    }

    pub fn is_comparison(self) -> bool {
        matches!(self, BinOp::Eq | BinOp::Ne | BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnOp {
    Neg,
    Not,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AllocSize {
    /// `new T` / `new T[n]`: a number of elements.
    Elems(Operand),
    /// `malloc(n)`: a number of bytes.
    Bytes(Operand),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Copy {
        dst: Reg,
        src: Operand,
    },
    Unary {
        dst: Reg,
        op: UnOp,
        src: Operand,
    },
    Binary {
        dst: Reg,
        op: BinOp,
        lhs: Operand,
        rhs: Operand,
    },
    /// Heap allocation; `ty` is the element type, `None` until inferred.
    AllocHeap {
        dst: Reg,
        ty: Option<TypeId>,
        size: AllocSize,
    },
    AllocStack {
        dst: Reg,
        ty: TypeId,
        count: u64,
    },
    /// Memory from outside the instrumented world.
    AllocLegacy {
        dst: Reg,
        size: Operand,
    },
    Free {
        src: Operand,
    },
    Load {
        dst: Reg,
        addr: Reg,
        ty: TypeId,
    },
    Store {
        addr: Reg,
        val: Operand,
        ty: TypeId,
    },
    /// `dst = &src->field`; `size` is `None` for a flexible array member.
    FieldAddr {
        dst: Reg,
        src: Reg,
        record: TypeId,
        field: usize,
        offset: u64,
        size: Option<u64>,
    },
    /// `dst = src + index * scale`, in bytes.
    IndexAddr {
        dst: Reg,
        src: Reg,
        index: Operand,
        scale: u64,
    },
    Cast {
        dst: Reg,
        src: Operand,
        ty: TypeId,
    },
    Call {
        dst: Option<Reg>,
        func: String,
        args: Vec<Operand>,
    },
    Return {
        val: Option<Operand>,
    },
    If {
        cond: Operand,
        then_body: Vec<Instr>,
        else_body: Vec<Instr>,
    },
    /// `cond_body` recomputes `cond` before every iteration.
    While {
        cond_body: Vec<Instr>,
        cond: Operand,
        body: Vec<Instr>,
    },

    /// Bounds of `addr` from its META header and layout (`addr.b`).
    CheckType {
        addr: Reg,
        ty: TypeId,
    },
    /// Allocation bounds of `addr` without a type check.
    BoundsGet {
        addr: Reg,
    },
    /// `dst.b = narrow(src.b, [dst, dst + size])`; unbounded above when
    /// `size` is `None`.
    Narrow {
        dst: Reg,
        src: Reg,
        size: Option<u64>,
    },
    BoundsCopy {
        dst: Reg,
        src: Reg,
    },
    CheckBounds {
        addr: Reg,
        width: u64,
        kind: CheckKind,
        ty: TypeId,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instr {
    pub op: Op,
    pub line: u32,
}

impl Instr {
    pub fn new(op: Op, line: u32) -> Self {
        Instr { op, line }
    }

    /// The register this instruction assigns, if any.
    pub fn def(&self) -> Option<Reg> {
        match &self.op {
            Op::Copy { dst, .. }
            | Op::Unary { dst, .. }
            | Op::Binary { dst, .. }
            | Op::AllocHeap { dst, .. }
            | Op::AllocStack { dst, .. }
            | Op::AllocLegacy { dst, .. }
            | Op::Load { dst, .. }
            | Op::FieldAddr { dst, .. }
            | Op::IndexAddr { dst, .. }
            | Op::Cast { dst, .. } => Some(*dst),
            Op::Call { dst, .. } => *dst,
            _ => None,
        }
    }

    /// The register whose bounds slot this instruction assigns, if any.
    pub fn bounds_def(&self) -> Option<Reg> {
        match &self.op {
            Op::CheckType { addr, .. } | Op::BoundsGet { addr } => Some(*addr),
            Op::Narrow { dst, .. } | Op::BoundsCopy { dst, .. } => Some(*dst),
            _ => None,
        }
    }

    pub fn is_check(&self) -> bool {
        matches!(
            self.op,
            Op::CheckType { .. }
                | Op::BoundsGet { .. }
                | Op::Narrow { .. }
                | Op::BoundsCopy { .. }
                | Op::CheckBounds { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Function {
    pub name: String,
    pub params: Vec<Reg>,
    pub ret: Option<TypeId>,
    pub regs: Vec<RegInfo>,
    pub body: Vec<Instr>,
    pub line: u32,
    /// Registers that carry bounds after instrumentation.
    pub bounded: BTreeSet<Reg>,
}

impl Function {
    pub fn reg_ty(&self, r: Reg) -> TypeId {
        self.regs[r.index()].ty
    }

    pub fn reg_name(&self, r: Reg) -> &str {
        &self.regs[r.index()].name
    }

    /// Every instruction, nested ones included, in program order.
    pub fn walk(&self) -> Vec<&Instr> {
        fn go<'a>(body: &'a [Instr], out: &mut Vec<&'a Instr>) {
            for i in body {
                out.push(i);
                match &i.op {
                    Op::If { then_body, else_body, .. } => {
                        go(then_body, out);
                        go(else_body, out);
                    }
                    Op::While { cond_body, body, .. } => {
                        go(cond_body, out);
                        go(body, out);
                    }
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        go(&self.body, &mut out);
        out
    }
}

#[derive(Debug, Clone)]
pub struct Program {
    pub file: String,
    pub universe: TypeUniverse,
    pub functions: Vec<Function>,
}

impl Program {
    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    /// Number of check instructions of each kind, statically.
    pub fn static_checks(&self) -> StaticCounts {
        let mut c = StaticCounts::default();
        for f in &self.functions {
            for i in f.walk() {
                match i.op {
                    Op::CheckType { .. } => c.type_checks += 1,
                    Op::BoundsGet { .. } => c.bounds_gets += 1,
                    Op::Narrow { .. } => c.narrows += 1,
                    Op::BoundsCopy { .. } => c.copies += 1,
                    Op::CheckBounds { .. } => c.bounds_checks += 1,
                    _ => {}
                }
            }
        }
        c
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StaticCounts {
    pub type_checks: usize,
    pub bounds_gets: usize,
    pub narrows: usize,
    pub copies: usize,
    pub bounds_checks: usize,
}

impl fmt::Display for StaticCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "type_check={} bounds_get={} narrow={} copy={} bounds_check={}",
            self.type_checks, self.bounds_gets, self.narrows, self.copies, self.bounds_checks
        )
    }
}

/// Facts for a forward pass over structured code.
pub(crate) trait Facts: Clone {
    /// Forgets everything known about register `r` or its bounds.
    fn kill(&mut self, r: Reg);
    /// Keeps what holds on both incoming paths.
    fn meet(&mut self, other: &Self);
}

/// Registers assigned (value or bounds) anywhere in `bodies`.
pub(crate) fn defs_in(bodies: &[&[Instr]]) -> BTreeSet<Reg> {
    fn go(body: &[Instr], out: &mut BTreeSet<Reg>) {
        for i in body {
            out.extend(i.def());
            out.extend(i.bounds_def());
            match &i.op {
                Op::If { then_body, else_body, .. } => {
                    go(then_body, out);
                    go(else_body, out);
                }
                Op::While { cond_body, body, .. } => {
                    go(cond_body, out);
                    go(body, out);
                }
                _ => {}
            }
        }
    }
    let mut out = BTreeSet::new();
    for b in bodies {
        go(b, &mut out);
    }
    out
}

/// Runs `visit` over every straight-line instruction in execution order,
/// merging facts at joins and killing loop-assigned registers at loop
/// heads. `visit` applies the instruction's effect to the facts and returns
/// whether to keep the instruction.
pub(crate) fn forward<S: Facts>(body: &mut Vec<Instr>, s: &mut S, visit: &mut impl FnMut(&mut Instr, &mut S) -> bool) {
    let mut out = Vec::with_capacity(body.len());
    for mut i in body.drain(..) {
        match &mut i.op {
            Op::If { then_body, else_body, .. } => {
                let mut a = s.clone();
                forward(then_body, &mut a, visit);
                let mut b = s.clone();
                forward(else_body, &mut b, visit);
                a.meet(&b);
                *s = a;
            }
            Op::While { cond_body, body, .. } => {
                for r in defs_in(&[cond_body, body]) {
                    s.kill(r);
                }
                forward(cond_body, s, visit);
                let mut inner = s.clone();
                forward(body, &mut inner, visit);
            }
            _ => {
                if !visit(&mut i, s) {
                    continue;
                }
            }
        }
        out.push(i);
    }
    *body = out;
}
