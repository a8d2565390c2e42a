//! Interpreter executing IR programs over a simulated address space.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::parse::is_float;
use super::{AllocSize, BinOp, Function, Instr, Op, Operand, Program, Reg, UnOp};
use crate::lowfat::{AbsBounds, AddressSpace, FrameId, SpaceConfig};
use crate::report::{Counters, ExecReport, HaltReason, ReportMode, Reporter, Site, Value};
use crate::runtime::{bounds_narrow, Runtime, META_SIZE};
use crate::table::TypeRegistry;
use crate::types::{TypeId, TypeKind, TypeUniverse};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpConfig {
    pub space: SpaceConfig,
    pub mode: ReportMode,
    /// Instructions executed before the run is abandoned.
    pub step_limit: u64,
    /// Maximum call depth.
    pub max_depth: u32,
    pub meta_size: u64,
}

impl Default for InterpConfig {
    fn default() -> Self {
        InterpConfig {
            space: SpaceConfig::default(),
            mode: ReportMode::LogAll,
            step_limit: 10_000_000,
            max_depth: 256,
            meta_size: META_SIZE,
        }
    }
}

enum Stop {
    Halt,
    Fault(String),
}

type Exec<T> = Result<T, Stop>;

fn fault<T>(msg: impl Into<String>) -> Exec<T> {
    Err(Stop::Fault(msg.into()))
}

enum Flow {
    Next,
    Return(Option<Value>),
}

struct Frame {
    regs: Vec<Value>,
    bounds: Vec<AbsBounds>,
    stack: Option<FrameId>,
}

struct Machine<'p> {
    prog: &'p Program,
    funcs: HashMap<&'p str, &'p Function>,
    rt: Runtime,
    reporter: Arc<Reporter>,
    steps: u64,
    depth: u32,
    step_limit: u64,
    max_depth: u32,
    per_fn: BTreeMap<String, Counters>,
}

/// Runs `main` of `program` and reports what happened. `variant` is only
/// recorded in the report.
pub fn interpret(program: &Program, cfg: &InterpConfig, variant: &str) -> ExecReport {
    let reporter = Arc::new(Reporter::new(cfg.mode));
    let mut report = ExecReport {
        schema: ExecReport::SCHEMA,
        program: program.file.clone(),
        variant: variant.to_string(),
        mode: cfg.mode.to_string(),
        halted_by: HaltReason::Completed,
        return_value: None,
        counters: Counters::default(),
        functions: BTreeMap::new(),
        buckets: Vec::new(),
        log: Vec::new(),
        memory_digest: String::new(),
    };
    let space = match AddressSpace::new(&cfg.space) {
        Ok(s) => s,
        Err(e) => {
            report.halted_by = HaltReason::Fault(e.to_string());
            return report;
        }
    };
    let registry = Arc::new(TypeRegistry::build(Arc::new(program.universe.clone())));
    let rt = Runtime::with_meta_size(space, registry, reporter.clone(), cfg.meta_size);
    let mut m = Machine {
        prog: program,
        funcs: program.functions.iter().map(|f| (f.name.as_str(), f)).collect(),
        rt,
        reporter: reporter.clone(),
        steps: 0,
        depth: 0,
        step_limit: cfg.step_limit,
        max_depth: cfg.max_depth,
        per_fn: BTreeMap::new(),
    };
    let result = match m.funcs.get("main") {
        None => fault("no `main` function"),
        Some(f) if !f.params.is_empty() => fault("`main` must not take parameters"),
        Some(f) => m.call(f, Vec::new()),
    };
    match result {
        Ok(v) => report.return_value = v,
        Err(Stop::Halt) => report.halted_by = HaltReason::AbortAfterN,
        Err(Stop::Fault(msg)) => report.halted_by = HaltReason::Fault(msg),
    }
    report.counters = reporter.counters();
    report.functions = m.per_fn;
    report.buckets = reporter.buckets();
    report.log = reporter.log();
    report.memory_digest = m.rt.space.digest().iter().map(|b| format!("{b:02x}")).collect();
    report
}

fn truthy(v: Value) -> bool {
    match v {
        Value::Int(i) => i != 0,
        Value::Float(f) => f != 0.0,
    }
}

fn unsigned(u: &TypeUniverse, t: TypeId) -> bool {
    match &u.get(t).kind {
        TypeKind::Fundamental { name } => name.starts_with("unsigned") || name == "bool",
        _ => true,
    }
}

/// `v` as a value of type `t`.
fn convert(u: &TypeUniverse, v: Value, t: TypeId) -> Value {
    if is_float(u, t) {
        let f = v.as_float();
        return Value::Float(if u.size_of(t) == 4 { f as f32 as f64 } else { f });
    }
    let i = v.as_int();
    let size = u.size_of(t);
    if u.is_address(t) || !(1..8).contains(&size) {
        return Value::Int(i);
    }
    let shift = 64 - 8 * size as u32;
    if unsigned(u, t) {
        Value::Int(((i as u64) << shift >> shift) as i64)
    } else {
        Value::Int((i << shift) >> shift)
    }
}

fn to_bits(u: &TypeUniverse, v: Value, t: TypeId) -> u64 {
    match convert(u, v, t) {
        Value::Float(f) if u.size_of(t) == 4 => (f as f32).to_bits() as u64,
        Value::Float(f) => f.to_bits(),
        Value::Int(i) => i as u64,
    }
}

fn from_bits(u: &TypeUniverse, raw: u64, t: TypeId) -> Value {
    if is_float(u, t) {
        if u.size_of(t) == 4 {
            Value::Float(f32::from_bits(raw as u32) as f64)
        } else {
            Value::Float(f64::from_bits(raw))
        }
    } else {
        convert(u, Value::Int(raw as i64), t)
    }
}

fn binary(op: BinOp, a: Value, b: Value, float: bool) -> Exec<Value> {
    use BinOp::*;
    if matches!(op, LogicAnd | LogicOr) {
        let r = if op == LogicAnd { truthy(a) && truthy(b) } else { truthy(a) || truthy(b) };
        return Ok(Value::Int(r as i64));
    }
    let any_float = matches!(a, Value::Float(_)) || matches!(b, Value::Float(_));
    if op.is_comparison() {
        let r = if any_float {
            let (x, y) = (a.as_float(), b.as_float());
            match op {
                Eq => x == y,
                Ne => x != y,
                Lt => x < y,
                Le => x <= y,
                Gt => x > y,
                _ => x >= y,
            }
        } else {
            let (x, y) = (a.as_int(), b.as_int());
            match op {
                Eq => x == y,
                Ne => x != y,
                Lt => x < y,
                Le => x <= y,
                Gt => x > y,
                _ => x >= y,
            }
        };
        return Ok(Value::Int(r as i64));
    }
    if float {
        let (x, y) = (a.as_float(), b.as_float());
        return Ok(Value::Float(match op {
            Add => x + y,
            Sub => x - y,
            Mul => x * y,
            Div => x / y,
            Rem => x % y,
            _ => return fault(format!("`{}` on floating-point operands", op.symbol())),
        }));
    }
    let (x, y) = (a.as_int(), b.as_int());
    Ok(Value::Int(match op {
        Add => x.wrapping_add(y),
        Sub => x.wrapping_sub(y),
        Mul => x.wrapping_mul(y),
        Div | Rem if y == 0 => return fault("integer division by zero"),
        Div => x.wrapping_div(y),
        Rem => x.wrapping_rem(y),
        And => x & y,
        Or => x | y,
        Xor => x ^ y,
        Shl => x.wrapping_shl(y as u32),
        Shr => x.wrapping_shr(y as u32),
        _ => unreachable!("handled above"),
    }))
}

impl<'p> Machine<'p> {
    fn u(&self) -> &'p TypeUniverse {
        &self.prog.universe
    }

    fn call(&mut self, f: &'p Function, args: Vec<Value>) -> Exec<Option<Value>> {
        if self.depth >= self.max_depth {
            return fault(format!("call depth limit {} exceeded in `{}`", self.max_depth, f.name));
        }
        self.depth += 1;
        let mut fr = Frame {
            regs: f
                .regs
                .iter()
                .map(|r| if is_float(self.u(), r.ty) { Value::Float(0.0) } else { Value::Int(0) })
                .collect(),
            bounds: vec![AbsBounds::WIDE; f.regs.len()],
            stack: None,
        };
        for (&p, a) in f.params.iter().zip(args) {
            fr.regs[p.index()] = convert(self.u(), a, f.reg_ty(p));
        }
        let flow = self.exec(f, &mut fr, &f.body);
        self.depth -= 1;
        if let Some(id) = fr.stack {
            if let Err(e) = self.rt.release_frame(id) {
                return fault(e.to_string());
            }
        }
        match flow? {
            Flow::Return(v) => Ok(v.map(|v| match f.ret {
                Some(t) => convert(self.u(), v, t),
                None => v,
            })),
            Flow::Next => Ok(None),
        }
    }

    fn val(&self, fr: &Frame, o: &Operand) -> Value {
        match o {
            Operand::Reg(r) => fr.regs[r.index()],
            Operand::Int(i) => Value::Int(*i),
            Operand::Float(x) => Value::Float(*x),
        }
    }

    fn addr(&self, fr: &Frame, r: Reg) -> u64 {
        fr.regs[r.index()].as_int() as u64
    }

    fn set(&self, f: &Function, fr: &mut Frame, r: Reg, v: Value) {
        fr.regs[r.index()] = convert(self.u(), v, f.reg_ty(r));
    }

    fn site(&self, i: &Instr) -> Site {
        Site::new(self.prog.file.clone(), i.line)
    }

    fn exec(&mut self, f: &'p Function, fr: &mut Frame, body: &'p [Instr]) -> Exec<Flow> {
        for i in body {
            self.steps += 1;
            if self.steps > self.step_limit {
                return fault(format!("step limit {} exceeded", self.step_limit));
            }
            if i.is_check() {
                let before = self.reporter.counters();
                self.check(f, fr, i);
                let after = self.reporter.counters();
                let c = self.per_fn.entry(f.name.clone()).or_default();
                c.type_checks += after.type_checks - before.type_checks;
                c.bounds_checks += after.bounds_checks - before.bounds_checks;
                c.legacy_checks += after.legacy_checks - before.legacy_checks;
                if self.reporter.halted() {
                    return Err(Stop::Halt);
                }
                continue;
            }
            if let Flow::Return(v) = self.step(f, fr, i)? {
                return Ok(Flow::Return(v));
            }
        }
        Ok(Flow::Next)
    }

    fn check(&mut self, f: &Function, fr: &mut Frame, i: &Instr) {
        let u = self.u();
        match &i.op {
            Op::CheckType { addr, ty } => {
                fr.bounds[addr.index()] = self.rt.type_check(self.addr(fr, *addr), *ty, &self.site(i));
            }
            Op::BoundsGet { addr } => {
                fr.bounds[addr.index()] = self.rt.bounds_get(self.addr(fr, *addr));
            }
            Op::Narrow { dst, src, size } => {
                let lo = self.addr(fr, *dst);
                let hi = size.map_or(u64::MAX, |s| lo.saturating_add(s));
                fr.bounds[dst.index()] = bounds_narrow(fr.bounds[src.index()], AbsBounds::new(lo, hi));
            }
            Op::BoundsCopy { dst, src } => {
                fr.bounds[dst.index()] = fr.bounds[src.index()];
            }
            Op::CheckBounds { addr, width, kind, ty } => {
                let b = fr.bounds[addr.index()];
                self.rt.bounds_check(self.addr(fr, *addr), *width, b, *kind, &u.name(*ty), &self.site(i));
            }
            _ => unreachable!("not a check: {:?} in {}", i.op, f.name),
        }
    }

    fn step(&mut self, f: &'p Function, fr: &mut Frame, i: &'p Instr) -> Exec<Flow> {
        let u = self.u();
        match &i.op {
            Op::Copy { dst, src } => {
                let v = self.val(fr, src);
                self.set(f, fr, *dst, v);
            }
            Op::Unary { dst, op, src } => {
                let v = self.val(fr, src);
                let r = match (op, v) {
                    (UnOp::Neg, Value::Int(x)) => Value::Int(x.wrapping_neg()),
                    (UnOp::Neg, Value::Float(x)) => Value::Float(-x),
                    (UnOp::Not, v) => Value::Int(!truthy(v) as i64),
                };
                self.set(f, fr, *dst, r);
            }
            Op::Binary { dst, op, lhs, rhs } => {
                let (a, b) = (self.val(fr, lhs), self.val(fr, rhs));
                let r = binary(*op, a, b, is_float(u, f.reg_ty(*dst)))?;
                self.set(f, fr, *dst, r);
            }
            Op::AllocHeap { dst, ty, size } => {
                let ty = ty.unwrap_or_else(|| u.char());
                let bytes = match size {
                    AllocSize::Elems(n) => self.val(fr, n).as_int().checked_mul(u.size_of(ty) as i64),
                    AllocSize::Bytes(n) => Some(self.val(fr, n).as_int()),
                };
                let Some(bytes) = bytes.filter(|b| *b >= 0) else {
                    return fault(format!("{}:{}: bad allocation size", self.prog.file, i.line));
                };
                match self.rt.type_malloc(bytes as u64, ty) {
                    Ok(a) => self.set(f, fr, *dst, Value::Int(a as i64)),
                    Err(e) => return fault(format!("{}:{}: {e}", self.prog.file, i.line)),
                }
            }
            Op::AllocStack { dst, ty, count } => {
                let id = *fr.stack.get_or_insert_with(|| self.rt.space.push_frame());
                match self.rt.type_alloca(id, u.size_of(*ty) * count, *ty) {
                    Ok(a) => self.set(f, fr, *dst, Value::Int(a as i64)),
                    Err(e) => return fault(format!("{}:{}: {e}", self.prog.file, i.line)),
                }
            }
            Op::AllocLegacy { dst, size } => {
                let n = self.val(fr, size).as_int();
                if n < 0 {
                    return fault(format!("{}:{}: bad allocation size", self.prog.file, i.line));
                }
                match self.rt.space.legacy_alloc(n as u64) {
                    Ok(a) => self.set(f, fr, *dst, Value::Int(a as i64)),
                    Err(e) => return fault(format!("{}:{}: {e}", self.prog.file, i.line)),
                }
            }
            Op::Free { src } => {
                let a = self.val(fr, src).as_int() as u64;
                if a != 0 {
                    if let Err(e) = self.rt.type_free(a, &self.site(i)) {
                        return fault(format!("{}:{}: {e}", self.prog.file, i.line));
                    }
                    if self.reporter.halted() {
                        return Err(Stop::Halt);
                    }
                }
            }
            Op::Load { dst, addr, ty } => {
                let a = self.addr(fr, *addr);
                match self.rt.space.load(a, u.size_of(*ty)) {
                    Ok(raw) => {
                        let v = from_bits(u, raw, *ty);
                        self.set(f, fr, *dst, v);
                    }
                    Err(e) => return fault(format!("{}:{}: {e}", self.prog.file, i.line)),
                }
            }
            Op::Store { addr, val, ty } => {
                let a = self.addr(fr, *addr);
                let bits = to_bits(u, self.val(fr, val), *ty);
                if let Err(e) = self.rt.space.store(a, u.size_of(*ty), bits) {
                    return fault(format!("{}:{}: {e}", self.prog.file, i.line));
                }
            }
            Op::FieldAddr { dst, src, offset, .. } => {
                let a = self.addr(fr, *src).wrapping_add(*offset);
                self.set(f, fr, *dst, Value::Int(a as i64));
            }
            Op::IndexAddr { dst, src, index, scale } => {
                let k = self.val(fr, index).as_int().wrapping_mul(*scale as i64);
                let a = self.addr(fr, *src).wrapping_add(k as u64);
                self.set(f, fr, *dst, Value::Int(a as i64));
            }
            Op::Cast { dst, src, .. } => {
                let v = self.val(fr, src);
                self.set(f, fr, *dst, v);
            }
            Op::Call { dst, func, args } => {
                let Some(&callee) = self.funcs.get(func.as_str()) else {
                    return fault(format!("unknown function `{func}`"));
                };
                let vals = args.iter().map(|a| self.val(fr, a)).collect();
                let r = self.call(callee, vals)?;
                if let (Some(d), Some(v)) = (dst, r) {
                    self.set(f, fr, *d, v);
                }
            }
            Op::Return { val } => {
                return Ok(Flow::Return(val.as_ref().map(|v| self.val(fr, v))));
            }
            Op::If { cond, then_body, else_body } => {
                let body = if truthy(self.val(fr, cond)) { then_body } else { else_body };
                return self.exec(f, fr, body);
            }
            Op::While { cond_body, cond, body } => loop {
                self.steps += 1;
                if self.steps > self.step_limit {
                    return fault(format!("step limit {} exceeded", self.step_limit));
                }
                if let Flow::Return(v) = self.exec(f, fr, cond_body)? {
                    return Ok(Flow::Return(v));
                }
                if !truthy(self.val(fr, cond)) {
                    break;
                }
                if let Flow::Return(v) = self.exec(f, fr, body)? {
                    return Ok(Flow::Return(v));
                }
            },
            _ => unreachable!("checks are handled by the caller"),
        }
        Ok(Flow::Next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{instrument, parse_program, Variant};
    use crate::report::ErrorKind;

    fn run(src: &str, variant: Option<Variant>) -> ExecReport {
        let mut p = parse_program("t.ir", src).unwrap();
        crate::ir::infer_malloc_types(&mut p);
        let p = match variant {
            Some(v) => instrument(&p, v),
            None => p,
        };
        interpret(&p, &InterpConfig::default(), "test")
    }

    #[test]
    fn arithmetic_and_loops() {
        let src = "fn main() -> int {
    let i: int = 0;
    let s: int = 0;
    while (i < 10) { s = s + i; i = i + 1; }
    if (s == 45) { return 1; } else { return 0; }
}";
        let r = run(src, None);
        assert_eq!(r.halted_by, HaltReason::Completed);
        assert_eq!(r.return_value, Some(Value::Int(1)));
    }

    #[test]
    fn float_and_narrow_integer_storage() {
        let src = "fn main() -> int {
    let p = new float;
    *p = 1.1;
    let c = new char;
    *c = 300;
    let f = *p;
    let d: double = f;
    let x = *c;
    if (d == 1.1) { return 99; }
    return x;
}";
        // 1.1 stored as a float no longer compares equal to the double literal.
        assert_eq!(run(src, None).return_value, Some(Value::Int(44)));
    }

    #[test]
    fn calls_and_recursion() {
        let src = "fn fact(n: int) -> int {
    if (n <= 1) { return 1; }
    let m = n - 1;
    let r = fact(m);
    let s = r * n;
    return s;
}
fn main() -> int { let v = fact(10); return v; }";
        assert_eq!(run(src, None).return_value, Some(Value::Int(3628800)));
    }

    #[test]
    fn depth_and_step_limits_fault() {
        let src = "fn f(n: int) -> int { let r = f(n); return r; }\nfn main() -> int { let v = f(1); return v; }";
        assert!(matches!(run(src, None).halted_by, HaltReason::Fault(m) if m.contains("depth")));
        let src = "fn main() { while (1) { } }";
        let r = run(src, None);
        assert!(matches!(&r.halted_by, HaltReason::Fault(m) if m.contains("step")));
        assert_eq!(r.exit_code(), 2);
    }

    #[test]
    fn division_by_zero_faults() {
        let src = "fn main() -> int { let z: int = 0; let v = 1 / z; return v; }";
        assert!(matches!(run(src, None).halted_by, HaltReason::Fault(_)));
    }

    #[test]
    fn overflow_detected_under_full_only() {
        let src = "struct account { int number[8]; float balance; };
fn main() {
    let a = new account;
    let i: int = 0;
    while (i <= 8) { a->number[i] = 7; i = i + 1; }
}";
        let r = run(src, Some(Variant::Full));
        assert_eq!(r.buckets.len(), 1);
        let b = &r.buckets[0];
        assert_eq!(
            (b.kind, b.static_type.as_str(), b.dynamic_type.as_str(), b.offset),
            (ErrorKind::BoundsError, "int", "account", 32)
        );
        assert!(run(src, Some(Variant::Bounds)).buckets.is_empty());
        assert!(run(src, None).buckets.is_empty());
    }

    #[test]
    fn stack_objects_die_with_their_frame() {
        let src = "fn leak() -> *int { let p = alloca int; *p = 5; return p; }
fn main() -> int { let q = leak(); let v = *q; return v; }";
        let r = run(src, Some(Variant::Full));
        assert_eq!(r.buckets.len(), 1);
        assert_eq!(r.buckets[0].kind, ErrorKind::UseAfterFree);
    }

    #[test]
    fn abort_mode_stops_at_first_error() {
        let src = "fn main() { let p = new int; free(p); free(p); free(p); }";
        let mut p = parse_program("t.ir", src).unwrap();
        crate::ir::infer_malloc_types(&mut p);
        let cfg = InterpConfig { mode: ReportMode::AbortAfter(1), ..InterpConfig::default() };
        let r = interpret(&instrument(&p, Variant::Full), &cfg, "full");
        assert_eq!(r.halted_by, HaltReason::AbortAfterN);
        assert_eq!(r.exit_code(), 1);
        assert_eq!(r.log.len(), 1);
    }

    #[test]
    fn instrumentation_preserves_results() {
        let src = "struct node { int val; struct node *next; };
fn main() -> int {
    let head: *node = null;
    let i: int = 0;
    while (i < 5) { let n = new node; n->val = i; n->next = head; head = n; i = i + 1; }
    let s: int = 0;
    while (head != null) { s = s + head->val; head = head->next; }
    return s;
}";
        let raw = run(src, None);
        let full = run(src, Some(Variant::Full));
        assert!(full.buckets.is_empty());
        assert_eq!(raw.return_value, Some(Value::Int(10)));
        assert_eq!(raw.return_value, full.return_value);
        assert_eq!(raw.memory_digest, full.memory_digest);
        assert!(full.counters.type_checks > 0);
        assert_eq!(raw.counters, Counters::default());
    }
}
