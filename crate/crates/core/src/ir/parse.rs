//! Parser for type declarations and IR functions.
//!
//! ```text
//! struct node { int val; struct node *next; };
//! struct S { int a[3] @0; char *s @12; } @size(20);
//!
//! fn length(xs: *node) -> int {
//!     let n: int = 0;
//!     while (xs != null) { xs = xs->next; n = n + 1; }
//!     return n;
//! }
//! ```

use std::collections::HashMap;

use super::lexer::{tokenize, Tok, Token};
use super::{AllocSize, BinOp, Function, Instr, Op, Operand, ParseError, Program, Reg, RegInfo, UnOp};
use crate::types::{RecordDecl, RecordKind, TypeId, TypeKind, TypeModelError, TypeUniverse};

type PResult<T> = Result<T, ParseError>;

const KEYWORDS: &[&str] = &[
    "fn",
    "let",
    "if",
    "else",
    "while",
    "return",
    "free",
    "new",
    "malloc",
    "alloca",
    "ext_alloc",
    "null",
    "sizeof",
    "struct",
    "class",
    "union",
    "enum",
];

const SCALAR_WORDS: &[&str] = &["unsigned", "signed", "long", "short", "int", "char"];

/// Parses a program: type declarations and functions, in any order.
pub fn parse_program(file: &str, src: &str) -> PResult<Program> {
    let mut p = Parser::new(src)?;
    let mut headers = Vec::new();
    while !p.at_eof() {
        if p.peek_ident("fn") {
            headers.push(p.fn_header()?);
        } else {
            p.declaration()?;
        }
    }
    let sigs: HashMap<String, Sig> = headers.iter().map(|h| (h.name.clone(), h.sig.clone())).collect();
    let mut seen = HashMap::new();
    for h in &headers {
        if seen.insert(h.name.clone(), ()).is_some() {
            return Err(ParseError::new(h.line, 1, format!("function `{}` defined twice", h.name)));
        }
    }
    let mut functions = Vec::new();
    for h in headers {
        functions.push(p.fn_body(h, &sigs)?);
    }
    Ok(Program { file: file.to_string(), universe: p.u, functions })
}

/// Parses a file of type declarations only.
pub fn parse_types(src: &str) -> PResult<TypeUniverse> {
    let prog = parse_program("<types>", src)?;
    if let Some(f) = prog.functions.first() {
        return Err(ParseError::new(f.line, 1, "functions are not allowed in a type file"));
    }
    Ok(prog.universe)
}

/// Resolves a type expression such as `int[3]` or `struct S *` against a
/// universe, creating derived types as needed.
pub fn resolve_type(u: &mut TypeUniverse, text: &str) -> PResult<TypeId> {
    let mut p = Parser::new(text)?;
    p.u = std::mem::take(u);
    let r = p.type_expr().and_then(|t| {
        let mut t = t;
        while p.eat("[") {
            let n = p.int_lit()?;
            p.expect("]")?;
            t = p.arr(t, n as u64)?;
        }
        if p.at_eof() {
            Ok(t)
        } else {
            Err(p.err("trailing input after type"))
        }
    });
    *u = std::mem::take(&mut p.u);
    r
}

#[derive(Debug, Clone)]
struct Sig {
    params: Vec<TypeId>,
    ret: Option<TypeId>,
}

#[derive(Debug)]
struct FnHeader {
    name: String,
    params: Vec<(String, TypeId)>,
    sig: Sig,
    body: (usize, usize),
    line: u32,
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    u: TypeUniverse,
    aliases: HashMap<String, TypeId>,
    consts: HashMap<String, i64>,
}

/// A storage location reached through an access path.
struct Place {
    addr: Reg,
    ty: TypeId,
}

enum PathEnd {
    Reg(Reg),
    Place(Place),
}

struct FnCtx<'a> {
    regs: Vec<RegInfo>,
    names: HashMap<String, Reg>,
    out: Vec<Vec<Instr>>,
    tmp: u32,
    sigs: &'a HashMap<String, Sig>,
    ret: Option<TypeId>,
}

impl FnCtx<'_> {
    fn new_reg(&mut self, name: &str, ty: TypeId) -> Reg {
        let r = Reg(self.regs.len() as u32);
        self.regs.push(RegInfo { name: name.to_string(), ty });
        self.names.insert(name.to_string(), r);
        r
    }

    fn temp(&mut self, ty: TypeId) -> Reg {
        self.tmp += 1;
        let r = Reg(self.regs.len() as u32);
        self.regs.push(RegInfo { name: format!("${}", self.tmp), ty });
        r
    }

    fn emit(&mut self, op: Op, line: u32) {
        self.out.last_mut().expect("open block").push(Instr::new(op, line));
    }

    fn ty(&self, r: Reg) -> TypeId {
        self.regs[r.index()].ty
    }
}

fn type_err(line: u32, col: u32, e: TypeModelError) -> ParseError {
    ParseError::new(line, col, e.to_string())
}

impl Parser {
    fn new(src: &str) -> PResult<Self> {
        let mut u = TypeUniverse::new();
        u.void_ptr();
        Ok(Parser { toks: tokenize(src)?, pos: 0, u, aliases: HashMap::new(), consts: HashMap::new() })
    }

    fn tok(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn peek_at(&self, n: usize) -> &Tok {
        &self.toks[(self.pos + n).min(self.toks.len() - 1)].tok
    }

    fn at_eof(&self) -> bool {
        self.tok().tok == Tok::Eof
    }

    fn err(&self, msg: impl Into<String>) -> ParseError {
        let t = self.tok();
        ParseError::new(t.line, t.col, msg)
    }

    fn line(&self) -> u32 {
        self.tok().line
    }

    fn bump(&mut self) -> Tok {
        let t = self.tok().tok.clone();
        if t != Tok::Eof {
            self.pos += 1;
        }
        t
    }

    fn is(&self, p: &str) -> bool {
        matches!(&self.tok().tok, Tok::Punct(q) if *q == p)
    }

    fn eat(&mut self, p: &str) -> bool {
        if self.is(p) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, p: &str) -> PResult<()> {
        if self.eat(p) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{p}`, found {}", self.tok().tok)))
        }
    }

    fn peek_ident(&self, s: &str) -> bool {
        matches!(&self.tok().tok, Tok::Ident(i) if i == s)
    }

    fn eat_ident(&mut self, s: &str) -> bool {
        if self.peek_ident(s) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn ident(&mut self) -> PResult<String> {
        match self.tok().tok.clone() {
            Tok::Ident(s) if !KEYWORDS.contains(&s.as_str()) => {
                self.pos += 1;
                Ok(s)
            }
            t => Err(self.err(format!("expected identifier, found {t}"))),
        }
    }

    fn int_lit(&mut self) -> PResult<i64> {
        let neg = self.eat("-");
        match self.bump() {
            Tok::Int(v) => Ok(if neg { -v } else { v }),
            t => {
                self.pos -= 1;
                Err(self.err(format!("expected integer, found {t}")))
            }
        }
    }

    fn tyerr<T>(&self, r: Result<T, TypeModelError>) -> PResult<T> {
        let (l, c) = (self.tok().line, self.tok().col);
        r.map_err(|e| type_err(l, c, e))
    }

    fn arr(&mut self, elem: TypeId, n: u64) -> PResult<TypeId> {
        let r = self.u.array(elem, n);
        self.tyerr(r)
    }

    // ---- types ----

    fn starts_type(&self) -> bool {
        match &self.tok().tok {
            Tok::Punct("*") => true,
            Tok::Ident(s) => {
                matches!(
                    s.as_str(),
                    "struct" | "class" | "union" | "enum" | "fn" | "void" | "float" | "double" | "bool"
                ) || SCALAR_WORDS.contains(&s.as_str())
                    || self.aliases.contains_key(s)
                    || self.u.tagged(s).is_some()
            }
            _ => false,
        }
    }

    /// `*`-prefixed or `*`-suffixed type without array suffixes.
    fn type_expr(&mut self) -> PResult<TypeId> {
        let mut stars = 0;
        while self.eat("*") {
            stars += 1;
        }
        let mut t = self.base_type()?;
        while self.eat("*") {
            stars += 1;
        }
        for _ in 0..stars {
            t = self.u.address_of(t);
        }
        Ok(t)
    }

    fn base_type(&mut self) -> PResult<TypeId> {
        let line = self.line();
        let col = self.tok().col;
        let Tok::Ident(word) = self.tok().tok.clone() else {
            return Err(self.err(format!("expected a type, found {}", self.tok().tok)));
        };
        if SCALAR_WORDS.contains(&word.as_str()) {
            let mut words = Vec::new();
            while let Tok::Ident(w) = &self.tok().tok {
                if !SCALAR_WORDS.contains(&w.as_str()) {
                    break;
                }
                words.push(w.clone());
                self.pos += 1;
            }
            let name = normalize_scalar(&words);
            return self.u.fundamental(&name).map_err(|e| type_err(line, col, e));
        }
        self.pos += 1;
        match word.as_str() {
            "struct" | "class" | "union" => {
                let tag = self.ident()?;
                self.u.tagged(&tag).ok_or_else(|| ParseError::new(line, col, format!("unknown type `{tag}`")))
            }
            "enum" => {
                let tag = self.ident()?;
                self.aliases
                    .get(&tag)
                    .copied()
                    .ok_or_else(|| ParseError::new(line, col, format!("unknown enum `{tag}`")))
            }
            "fn" => Ok(self.u.function("generic")),
            _ => {
                if let Some(t) = self.aliases.get(&word) {
                    return Ok(*t);
                }
                if let Some(t) = self.u.tagged(&word) {
                    return Ok(t);
                }
                self.u.fundamental(&word).map_err(|e| type_err(line, col, e))
            }
        }
    }

    // ---- declarations ----

    fn declaration(&mut self) -> PResult<()> {
        let kw = match &self.tok().tok {
            Tok::Ident(s) => s.clone(),
            t => return Err(self.err(format!("expected a declaration or `fn`, found {t}"))),
        };
        match kw.as_str() {
            "struct" | "class" | "union" => {
                self.pos += 1;
                let kind = record_kind(&kw);
                let tag = self.ident()?;
                if self.eat(";") {
                    self.u.declare_record(kind, &tag);
                    return Ok(());
                }
                self.record_body(kind, Some(tag))?;
                self.expect(";")
            }
            "enum" => {
                self.pos += 1;
                let tag = self.ident()?;
                self.expect("{")?;
                let mut next = 0i64;
                while !self.eat("}") {
                    let name = self.ident()?;
                    if self.eat("=") {
                        next = self.int_lit()?;
                    }
                    self.consts.insert(name, next);
                    next += 1;
                    if !self.eat(",") {
                        self.expect("}")?;
                        break;
                    }
                }
                let int = self.u.int();
                self.aliases.insert(tag, int);
                self.expect(";")
            }
            "typedef" => {
                self.pos += 1;
                let mut t = self.type_expr()?;
                let name = self.ident()?;
                while self.eat("[") {
                    let n = self.int_lit()?;
                    self.expect("]")?;
                    t = self.arr(t, n as u64)?;
                }
                self.aliases.insert(name, t);
                self.expect(";")
            }
            _ => Err(self.err(format!("expected a declaration or `fn`, found `{kw}`"))),
        }
    }

    /// `[: bases] { members } [@size(N)]`, after the tag.
    fn record_body(&mut self, kind: RecordKind, tag: Option<String>) -> PResult<TypeId> {
        let line = self.line();
        if let Some(t) = &tag {
            self.u.declare_record(kind, t);
        }
        let mut decl = RecordDecl::new(kind, tag.as_deref());
        if self.eat(":") {
            loop {
                self.eat_ident("public");
                let b = self.base_type()?;
                let off = if self.eat("@") { Some(self.int_lit()? as u64) } else { None };
                decl.bases.push((b, off));
                if !self.eat(",") {
                    break;
                }
            }
        }
        self.expect("{")?;
        while !self.eat("}") {
            self.member(&mut decl)?;
        }
        if self.eat("@") {
            if !self.eat_ident("size") {
                return Err(self.err("expected `size` after `@`"));
            }
            self.expect("(")?;
            decl.size = Some(self.int_lit()? as u64);
            self.expect(")")?;
        }
        self.u.natural_layout(&decl).map_err(|e| type_err(line, 1, e))
    }

    fn member(&mut self, decl: &mut RecordDecl) -> PResult<()> {
        let base = if matches!(&self.tok().tok, Tok::Ident(s) if matches!(s.as_str(), "struct" | "union" | "class"))
            && matches!(self.peek_at(1), Tok::Punct("{"))
        {
            let Tok::Ident(kw) = self.bump() else { unreachable!() };
            self.record_body(record_kind(&kw), None)?
        } else {
            self.type_expr()?
        };
        loop {
            let mut t = base;
            while self.eat("*") {
                t = self.u.address_of(t);
            }
            let name = self.ident()?;
            let mut dims = Vec::new();
            let mut flexible = false;
            while self.eat("[") {
                if self.eat("]") {
                    if !dims.is_empty() || flexible {
                        return Err(self.err("only the outermost array dimension may be empty"));
                    }
                    flexible = true;
                    continue;
                }
                let n = self.int_lit()?;
                if n <= 0 {
                    return Err(self.err("array length must be positive"));
                }
                dims.push(n as u64);
                self.expect("]")?;
            }
            for &n in dims.iter().rev() {
                t = self.arr(t, n)?;
            }
            let offset = if self.eat("@") { Some(self.int_lit()? as u64) } else { None };
            decl.members.push(crate::types::MemberDecl { name, ty: t, offset, flexible });
            if !self.eat(",") {
                break;
            }
        }
        self.expect(";")
    }

    // ---- functions ----

    fn fn_header(&mut self) -> PResult<FnHeader> {
        let line = self.line();
        self.bump();
        let name = self.ident()?;
        self.expect("(")?;
        let mut params = Vec::new();
        while !self.eat(")") {
            let pname = self.ident()?;
            self.expect(":")?;
            let t = self.type_expr()?;
            params.push((pname, t));
            if !self.eat(",") {
                self.expect(")")?;
                break;
            }
        }
        let ret = if self.eat("->") {
            let t = self.type_expr()?;
            (t != self.u.void()).then_some(t)
        } else {
            None
        };
        if !self.is("{") {
            return Err(self.err("expected function body"));
        }
        let start = self.pos;
        let mut depth = 0;
        loop {
            match self.bump() {
                Tok::Punct("{") => depth += 1,
                Tok::Punct("}") => {
                    depth -= 1;
                    if depth == 0 {
                        break;
                    }
                }
                Tok::Eof => return Err(self.err("unterminated function body")),
                _ => {}
            }
        }
        let sig = Sig { params: params.iter().map(|p| p.1).collect(), ret };
        Ok(FnHeader { name, params, sig, body: (start, self.pos), line })
    }

    fn fn_body(&mut self, h: FnHeader, sigs: &HashMap<String, Sig>) -> PResult<Function> {
        let saved = self.pos;
        self.pos = h.body.0;
        let mut cx =
            FnCtx { regs: Vec::new(), names: HashMap::new(), out: vec![Vec::new()], tmp: 0, sigs, ret: h.sig.ret };
        let mut params = Vec::new();
        for (n, t) in &h.params {
            if cx.names.contains_key(n) {
                return Err(ParseError::new(h.line, 1, format!("duplicate parameter `{n}`")));
            }
            params.push(cx.new_reg(n, *t));
        }
        self.expect("{")?;
        while !self.eat("}") {
            self.stmt(&mut cx)?;
        }
        debug_assert_eq!(self.pos, h.body.1);
        self.pos = saved;
        let body = cx.out.pop().expect("body block");
        Ok(Function {
            name: h.name,
            params,
            ret: h.sig.ret,
            regs: cx.regs,
            body,
            line: h.line,
            bounded: Default::default(),
        })
    }

    fn block(&mut self, cx: &mut FnCtx) -> PResult<Vec<Instr>> {
        self.expect("{")?;
        cx.out.push(Vec::new());
        while !self.eat("}") {
            self.stmt(cx)?;
        }
        Ok(cx.out.pop().expect("block"))
    }

    fn stmt(&mut self, cx: &mut FnCtx) -> PResult<()> {
        let line = self.line();
        if self.eat_ident("let") {
            let name = self.ident()?;
            if cx.names.contains_key(&name) {
                return Err(self.err(format!("`{name}` is already defined")));
            }
            let ty = if self.eat(":") { Some(self.type_expr()?) } else { None };
            if self.eat(";") {
                let Some(t) = ty else {
                    return Err(self.err(format!("`{name}` needs a type or an initializer")));
                };
                let r = cx.new_reg(&name, t);
                let op = if self.u.is_address(t) {
                    Op::Cast { dst: r, src: Operand::Int(0), ty: t }
                } else {
                    Op::Copy { dst: r, src: self.zero(t) }
                };
                cx.emit(op, line);
                return Ok(());
            }
            self.expect("=")?;
            self.assign_new(cx, &name, ty, line)?;
            return self.expect(";");
        }
        if self.eat_ident("if") {
            return self.if_stmt(cx, line);
        }
        if self.eat_ident("while") {
            self.expect("(")?;
            cx.out.push(Vec::new());
            let cond = self.cond(cx)?;
            let cond_body = cx.out.pop().expect("cond block");
            self.expect(")")?;
            let body = self.block(cx)?;
            cx.emit(Op::While { cond_body, cond, body }, line);
            return Ok(());
        }
        if self.eat_ident("return") {
            let val = if self.is(";") {
                None
            } else {
                let (v, t) = self.value(cx)?;
                let Some(rt) = cx.ret else {
                    return Err(self.err("returning a value from a function without a result type"));
                };
                Some(self.coerce(cx, v, t, rt, line)?)
            };
            if val.is_none() && cx.ret.is_some() {
                return Err(self.err("missing return value"));
            }
            cx.emit(Op::Return { val }, line);
            return self.expect(";");
        }
        if self.eat_ident("free") {
            self.expect("(")?;
            let (v, t) = self.value(cx)?;
            if !self.u.is_address(t) {
                return Err(self.err("free of a non-address"));
            }
            self.expect(")")?;
            cx.emit(Op::Free { src: v }, line);
            return self.expect(";");
        }
        if self.eat("*") {
            let name = self.ident()?;
            let p = self.lookup(cx, &name)?;
            let place = self.deref_place(cx, p)?;
            self.expect("=")?;
            self.store_rhs(cx, place, line)?;
            return self.expect(";");
        }
        let name = self.ident()?;
        if self.is("(") && !cx.names.contains_key(&name) {
            self.call(cx, &name, None, line)?;
            return self.expect(";");
        }
        if !cx.names.contains_key(&name) {
            self.expect("=")?;
            self.assign_new(cx, &name, None, line)?;
            return self.expect(";");
        }
        let start = self.lookup(cx, &name)?;
        match self.path(cx, start)? {
            PathEnd::Reg(r) => {
                self.expect("=")?;
                self.assign_existing(cx, r, line)?;
            }
            PathEnd::Place(place) => {
                self.expect("=")?;
                self.store_rhs(cx, place, line)?;
            }
        }
        self.expect(";")
    }

    fn if_stmt(&mut self, cx: &mut FnCtx, line: u32) -> PResult<()> {
        self.expect("(")?;
        let cond = self.cond(cx)?;
        self.expect(")")?;
        let then_body = self.block(cx)?;
        let else_body = if self.eat_ident("else") {
            if self.peek_ident("if") {
                let l = self.line();
                self.bump();
                cx.out.push(Vec::new());
                self.if_stmt(cx, l)?;
                cx.out.pop().expect("else block")
            } else {
                self.block(cx)?
            }
        } else {
            Vec::new()
        };
        cx.emit(Op::If { cond, then_body, else_body }, line);
        Ok(())
    }

    fn cond(&mut self, cx: &mut FnCtx) -> PResult<Operand> {
        let line = self.line();
        let (a, ta) = self.value(cx)?;
        let Some(op) = self.binop() else {
            return Ok(a);
        };
        let (b, _) = self.value(cx)?;
        let int = self.u.int();
        let t = if op.is_comparison() { int } else { ta };
        let dst = cx.temp(t);
        cx.emit(Op::Binary { dst, op, lhs: a, rhs: b }, line);
        Ok(Operand::Reg(dst))
    }

    fn binop(&mut self) -> Option<BinOp> {
        let Tok::Punct(p) = self.tok().tok else { return None };
        let op = BinOp::from_symbol(p)?;
        self.pos += 1;
        Some(op)
    }

    fn zero(&self, t: TypeId) -> Operand {
        if is_float(&self.u, t) {
            Operand::Float(0.0)
        } else {
            Operand::Int(0)
        }
    }

    fn lookup(&self, cx: &FnCtx, name: &str) -> PResult<Reg> {
        cx.names.get(name).copied().ok_or_else(|| self.err(format!("undefined variable `{name}`")))
    }

    fn operand_type(&self, cx: &FnCtx, v: Operand) -> Option<TypeId> {
        match v {
            Operand::Reg(r) => Some(cx.ty(r)),
            Operand::Int(_) => None,
            Operand::Float(_) => Some(self.u.double()),
        }
    }

    /// An operand, loading through access paths as needed. The second
    /// component is the static type, with `void *` standing in for `null`.
    fn value(&mut self, cx: &mut FnCtx) -> PResult<(Operand, TypeId)> {
        let line = self.line();
        match self.tok().tok.clone() {
            Tok::Int(v) => {
                self.pos += 1;
                Ok((Operand::Int(v), self.u.int()))
            }
            Tok::Float(v) => {
                self.pos += 1;
                Ok((Operand::Float(v), self.u.double()))
            }
            Tok::Punct("-") if matches!(self.peek_at(1), Tok::Int(_) | Tok::Float(_)) => {
                self.pos += 1;
                match self.bump() {
                    Tok::Int(v) => Ok((Operand::Int(-v), self.u.int())),
                    Tok::Float(v) => Ok((Operand::Float(-v), self.u.double())),
                    _ => unreachable!(),
                }
            }
            Tok::Ident(s) if s == "null" => {
                self.pos += 1;
                Ok((Operand::Int(0), self.u.void_ptr()))
            }
            Tok::Ident(s) if s == "sizeof" => {
                self.pos += 1;
                self.expect("(")?;
                let mut t = self.type_expr()?;
                while self.eat("[") {
                    let n = self.int_lit()?;
                    self.expect("]")?;
                    t = self.arr(t, n as u64)?;
                }
                self.expect(")")?;
                Ok((Operand::Int(self.u.size_of(t) as i64), self.u.long()))
            }
            Tok::Ident(s) if self.consts.contains_key(&s) && !cx.names.contains_key(&s) => {
                self.pos += 1;
                Ok((Operand::Int(self.consts[&s]), self.u.int()))
            }
            Tok::Ident(s) => {
                self.pos += 1;
                let r = self.lookup(cx, &s).map_err(|mut e| {
                    e.line = line;
                    e
                })?;
                match self.path(cx, r)? {
                    PathEnd::Reg(r) => Ok((Operand::Reg(r), cx.ty(r))),
                    PathEnd::Place(p) => {
                        let dst = cx.temp(p.ty);
                        self.load(cx, dst, p, line)?;
                        Ok((Operand::Reg(dst), cx.ty(dst)))
                    }
                }
            }
            t => Err(self.err(format!("expected a value, found {t}"))),
        }
    }

    fn load(&mut self, cx: &mut FnCtx, dst: Reg, p: Place, line: u32) -> PResult<()> {
        self.check_scalar(p.ty)?;
        cx.emit(Op::Load { dst, addr: p.addr, ty: p.ty }, line);
        Ok(())
    }

    fn check_scalar(&self, t: TypeId) -> PResult<()> {
        let d = self.u.get(t);
        let ok =
            matches!(d.kind, TypeKind::Fundamental { .. } | TypeKind::AddressOf(_)) && matches!(d.size, 1 | 2 | 4 | 8);
        if ok && t != self.u.void() {
            Ok(())
        } else {
            Err(self.err(format!("cannot load or store a value of type `{}`", self.u.name(t))))
        }
    }

    /// Follows `->f`, `.f` and `[i]` selectors from register `r`.
    fn path(&mut self, cx: &mut FnCtx, r: Reg) -> PResult<PathEnd> {
        let mut cur: Option<Place> = None;
        loop {
            let line = self.line();
            if self.eat("->") {
                let addr = match cur.take() {
                    None => r,
                    Some(p) => {
                        let t = cx.temp(p.ty);
                        self.load(cx, t, p, line)?;
                        t
                    }
                };
                let place = self.deref_place(cx, addr)?;
                let f = self.ident()?;
                cur = Some(self.field(cx, place, &f, line)?);
            } else if self.eat(".") {
                let Some(place) = cur.take() else {
                    return Err(self.err("`.` needs a record location; use `->` on addresses"));
                };
                let f = self.ident()?;
                cur = Some(self.field(cx, place, &f, line)?);
            } else if self.eat("[") {
                let (idx, it) = self.value(cx)?;
                if self.u.is_address(it) || is_float(&self.u, it) {
                    return Err(self.err("array index must be an integer"));
                }
                self.expect("]")?;
                let (base, elem) = match cur.take() {
                    None => {
                        let p = self.deref_place(cx, r)?;
                        (p.addr, p.ty)
                    }
                    Some(p) => match self.u.array_elem(p.ty) {
                        Some(e) => (p.addr, e),
                        None if self.u.is_address(p.ty) => {
                            let t = cx.temp(p.ty);
                            let pointee = self.u.pointee(p.ty).expect("address");
                            self.load(cx, t, p, line)?;
                            (t, pointee)
                        }
                        None => return Err(self.err(format!("cannot index a `{}`", self.u.name(p.ty)))),
                    },
                };
                let ptr = self.u.address_of(elem);
                let dst = cx.temp(ptr);
                cx.emit(Op::IndexAddr { dst, src: base, index: idx, scale: self.u.size_of(elem) }, line);
                cur = Some(Place { addr: dst, ty: elem });
            } else {
                return Ok(match cur {
                    None => PathEnd::Reg(r),
                    Some(p) => PathEnd::Place(p),
                });
            }
        }
    }

    fn deref_place(&self, cx: &FnCtx, r: Reg) -> PResult<Place> {
        let t = cx.ty(r);
        match self.u.pointee(t) {
            Some(p) if p != self.u.void() => Ok(Place { addr: r, ty: p }),
            _ => {
                Err(self.err(format!("cannot dereference `{}` of type `{}`", cx.regs[r.index()].name, self.u.name(t))))
            }
        }
    }

    fn field(&mut self, cx: &mut FnCtx, place: Place, name: &str, line: u32) -> PResult<Place> {
        let rec = place.ty;
        if self.u.field(rec, name).is_err() {
            // Inherited members are reached through their base sub-object.
            if let Some(base) = inherited_via(&self.u, rec, name) {
                let bname = self.u.get(rec).as_record().expect("record").fields[base].name.clone();
                let inner = self.field(cx, place, &bname, line)?;
                return self.field(cx, inner, name, line);
            }
        }
        let (idx, f) = {
            let r = self.u.field(rec, name);
            let (i, f) = self.tyerr(r)?;
            (i, f.clone())
        };
        let fam = self.u.fam(rec).is_some_and(|fi| fi.field == idx);
        let ptr = self.u.address_of(f.ty);
        let dst = cx.temp(ptr);
        let size = (!fam).then(|| self.u.size_of(f.ty));
        cx.emit(Op::FieldAddr { dst, src: place.addr, record: rec, field: idx, offset: f.offset, size }, line);
        Ok(Place { addr: dst, ty: f.ty })
    }

    /// Converts `v` of type `from` for use as type `to`, inserting a cast for
    /// `void *` conversions.
    fn coerce(&mut self, cx: &mut FnCtx, v: Operand, from: TypeId, to: TypeId, line: u32) -> PResult<Operand> {
        let (fa, ta) = (self.u.is_address(from), self.u.is_address(to));
        if from == to || (!fa && !ta) {
            return Ok(v);
        }
        if ta && (fa && (self.u.is_void_ptr(from) || self.u.is_void_ptr(to))) {
            if matches!(v, Operand::Int(0)) || self.u.is_void_ptr(to) {
                return Ok(v);
            }
            let dst = cx.temp(to);
            cx.emit(Op::Cast { dst, src: v, ty: to }, line);
            return Ok(Operand::Reg(dst));
        }
        Err(self.err(format!("type mismatch: `{}` used as `{}`; add a cast", self.u.name(from), self.u.name(to))))
    }

    fn store_rhs(&mut self, cx: &mut FnCtx, place: Place, line: u32) -> PResult<()> {
        self.check_scalar(place.ty)?;
        let t = cx.temp(place.ty);
        let v = match self.rhs(cx, Some(t), place.ty, line)? {
            Some(v) => v,
            None => Operand::Reg(t),
        };
        cx.emit(Op::Store { addr: place.addr, val: v, ty: place.ty }, line);
        Ok(())
    }

    fn assign_new(&mut self, cx: &mut FnCtx, name: &str, ann: Option<TypeId>, line: u32) -> PResult<()> {
        // Find the natural result type first by parsing into a placeholder.
        let placeholder = self.u.void();
        let r = cx.new_reg(name, ann.unwrap_or(placeholder));
        let save = (self.pos, cx.out.last().map_or(0, Vec::len), cx.regs.len(), cx.tmp);
        if ann.is_some() {
            if let Some(v) = self.rhs(cx, Some(r), cx.ty(r), line)? {
                cx.emit(Op::Copy { dst: r, src: v }, line);
            }
            return Ok(());
        }
        let t = self.rhs_type(cx, r, line)?;
        // Reparse with the resolved type.
        self.pos = save.0;
        cx.out.last_mut().expect("block").truncate(save.1);
        cx.regs.truncate(save.2);
        cx.tmp = save.3;
        cx.regs[r.index()].ty = t;
        if let Some(v) = self.rhs(cx, Some(r), t, line)? {
            cx.emit(Op::Copy { dst: r, src: v }, line);
        }
        Ok(())
    }

    fn rhs_type(&mut self, cx: &mut FnCtx, r: Reg, line: u32) -> PResult<TypeId> {
        let probe = cx.temp(self.u.void());
        let placeholder = self.u.void();
        cx.regs[r.index()].ty = placeholder;
        match self.rhs(cx, Some(probe), placeholder, line)? {
            None => {
                let t = cx.ty(probe);
                if t == self.u.void() {
                    return Err(self.err("cannot infer the type of this expression; annotate it"));
                }
                Ok(t)
            }
            Some(v) => match self.operand_type(cx, v) {
                Some(t) if t == self.u.void_ptr() && matches!(v, Operand::Int(0)) => {
                    Err(ParseError::new(line, 1, "cannot infer the type of `null`; annotate it"))
                }
                Some(t) => Ok(t),
                None => Ok(self.u.int()),
            },
        }
    }

    fn assign_existing(&mut self, cx: &mut FnCtx, r: Reg, line: u32) -> PResult<()> {
        let t = cx.ty(r);
        if let Some(v) = self.rhs(cx, Some(r), t, line)? {
            cx.emit(Op::Copy { dst: r, src: v }, line);
        }
        Ok(())
    }

    /// Parses a right-hand side writing `dst` of type `want`. Returns an
    /// operand when the value still has to be copied into `dst`.
    ///
    /// When `want` is `void` the caller only probes for the natural type,
    /// which is recorded on `dst`.
    fn rhs(&mut self, cx: &mut FnCtx, dst: Option<Reg>, want: TypeId, line: u32) -> PResult<Option<Operand>> {
        let dst = dst.expect("destination");
        let probing = want == self.u.void();
        let set = |cx: &mut FnCtx, t: TypeId| {
            if probing {
                cx.regs[dst.index()].ty = t;
            }
        };
        let check = |p: &Self, got: TypeId| -> PResult<()> {
            if probing {
                Ok(())
            } else {
                p.compatible(got, want)
            }
        };

        if self.eat_ident("new") {
            let mut t = self.type_expr()?;
            let count = if self.eat("[") {
                let (n, _) = self.value(cx)?;
                self.expect("]")?;
                n
            } else {
                Operand::Int(1)
            };
            if let Some(e) = self.u.array_elem(t) {
                if count != Operand::Int(1) {
                    return Err(self.err("`new` of an array type takes no count"));
                }
                let n = self.u.size_of(t) / self.u.size_of(e);
                t = e;
                let ptr = self.u.address_of(t);
                set(cx, ptr);
                self.alloc_result(cx, dst, ptr, want, probing)?;
                cx.emit(Op::AllocHeap { dst, ty: Some(t), size: AllocSize::Elems(Operand::Int(n as i64)) }, line);
                return Ok(None);
            }
            let ptr = self.u.address_of(t);
            set(cx, ptr);
            self.alloc_result(cx, dst, ptr, want, probing)?;
            cx.emit(Op::AllocHeap { dst, ty: Some(t), size: AllocSize::Elems(count) }, line);
            return Ok(None);
        }
        if self.eat_ident("malloc") {
            let ty = if self.eat("<") {
                let t = self.type_expr()?;
                self.expect(">")?;
                Some(t)
            } else {
                None
            };
            self.expect("(")?;
            let (n, _) = self.value(cx)?;
            self.expect(")")?;
            let natural = match ty {
                Some(t) => self.u.address_of(t),
                None => self.u.void_ptr(),
            };
            set(cx, natural);
            if !probing && !self.u.is_address(want) {
                return Err(self.err("allocation assigned to a non-address"));
            }
            if !probing && ty.is_some() && natural != want && !self.u.is_void_ptr(want) {
                return Err(self.err(format!(
                    "type mismatch: `{}` assigned to `{}`",
                    self.u.name(natural),
                    self.u.name(want)
                )));
            }
            cx.emit(Op::AllocHeap { dst, ty, size: AllocSize::Bytes(n) }, line);
            return Ok(None);
        }
        if self.eat_ident("alloca") {
            let mut t = self.type_expr()?;
            let mut count = 1;
            if self.eat("[") {
                count = self.int_lit()?;
                self.expect("]")?;
                if count <= 0 {
                    return Err(self.err("alloca count must be positive"));
                }
            }
            if let Some(e) = self.u.array_elem(t) {
                count *= (self.u.size_of(t) / self.u.size_of(e)) as i64;
                t = e;
            }
            let ptr = self.u.address_of(t);
            set(cx, ptr);
            self.alloc_result(cx, dst, ptr, want, probing)?;
            cx.emit(Op::AllocStack { dst, ty: t, count: count as u64 }, line);
            return Ok(None);
        }
        if self.eat_ident("ext_alloc") {
            self.expect("(")?;
            let (n, _) = self.value(cx)?;
            self.expect(")")?;
            let vp = self.u.void_ptr();
            set(cx, vp);
            if !probing && !self.u.is_address(want) {
                return Err(self.err("allocation assigned to a non-address"));
            }
            cx.emit(Op::AllocLegacy { dst, size: n }, line);
            return Ok(None);
        }
        if self.is("(") && {
            let save = self.pos;
            self.pos += 1;
            let r = self.starts_type();
            self.pos = save;
            r
        } {
            self.expect("(")?;
            let t = self.type_expr()?;
            self.expect(")")?;
            let (v, _) = self.value(cx)?;
            set(cx, t);
            check(self, t)?;
            cx.emit(Op::Cast { dst, src: v, ty: t }, line);
            return Ok(None);
        }
        if self.eat("*") {
            let name = self.ident()?;
            let p = self.lookup(cx, &name)?;
            let place = self.deref_place(cx, p)?;
            set(cx, place.ty);
            if !probing {
                self.compatible(place.ty, want)?;
            }
            if probing || place.ty == want {
                self.load(cx, dst, place, line)?;
                return Ok(None);
            }
            let t = cx.temp(place.ty);
            self.load(cx, t, place, line)?;
            return Ok(Some(Operand::Reg(t)));
        }
        if self.eat("&") {
            let name = self.ident()?;
            let r = self.lookup(cx, &name)?;
            let PathEnd::Place(p) = self.path(cx, r)? else {
                return Err(self.err("`&` needs a field or element selector"));
            };
            let t = cx.ty(p.addr);
            set(cx, t);
            check(self, t)?;
            // Retarget the address computation at `dst`.
            let last = cx.out.last_mut().expect("block").last_mut().expect("address instr");
            match &mut last.op {
                Op::FieldAddr { dst: d, .. } | Op::IndexAddr { dst: d, .. } if *d == p.addr => *d = dst,
                _ => return Ok(Some(Operand::Reg(p.addr))),
            }
            return Ok(None);
        }
        if self.is("-") && !matches!(self.peek_at(1), Tok::Int(_) | Tok::Float(_)) || self.is("!") {
            let op = if self.eat("-") {
                UnOp::Neg
            } else {
                self.bump();
                UnOp::Not
            };
            let (v, t) = self.value(cx)?;
            let rt = if op == UnOp::Not { self.u.int() } else { t };
            set(cx, rt);
            if !probing {
                self.compatible(rt, want)?;
            }
            cx.emit(Op::Unary { dst, op, src: v }, line);
            return Ok(None);
        }
        if let Tok::Ident(name) = self.tok().tok.clone() {
            if matches!(self.peek_at(1), Tok::Punct("("))
                && !cx.names.contains_key(&name)
                && !KEYWORDS.contains(&name.as_str())
            {
                self.pos += 1;
                let rt = cx.sigs.get(&name).and_then(|s| s.ret);
                let Some(rt) = rt else {
                    return Err(self.err(format!("`{name}` does not return a value")));
                };
                set(cx, rt);
                if !probing && rt != want {
                    if self.u.is_address(rt) || self.u.is_address(want) {
                        check(self, rt)?;
                    }
                    let t = cx.temp(rt);
                    self.call(cx, &name, Some(t), line)?;
                    return Ok(Some(Operand::Reg(t)));
                }
                self.call(cx, &name, Some(dst), line)?;
                return Ok(None);
            }
        }

        let (a, ta) = self.value(cx)?;
        let Some(op) = self.binop() else {
            // Plain copy.
            if probing {
                return Ok(Some(a));
            }
            if let Operand::Reg(t) = a {
                if ta == want && self.retarget(cx, t, dst) {
                    return Ok(None);
                }
            }
            if self.u.is_address(want) && matches!(a, Operand::Int(0)) && ta == self.u.void_ptr() {
                cx.emit(Op::Cast { dst, src: a, ty: want }, line);
                return Ok(None);
            }
            if matches!(a, Operand::Int(_)) && !self.u.is_address(want) {
                return Ok(Some(a));
            }
            let v = self.coerce(cx, a, ta, want, line)?;
            return Ok(Some(v));
        };
        let (b, tb) = self.value(cx)?;
        let a_addr = self.u.is_address(ta) && !matches!(a, Operand::Int(0));
        if a_addr && matches!(op, BinOp::Add | BinOp::Sub) && !self.u.is_address(tb) {
            // Byte offset from an address.
            let index = match (op, b) {
                (BinOp::Add, b) => b,
                (BinOp::Sub, Operand::Int(k)) => Operand::Int(-k),
                (BinOp::Sub, b) => {
                    let t = cx.temp(tb);
                    cx.emit(Op::Unary { dst: t, op: UnOp::Neg, src: b }, line);
                    Operand::Reg(t)
                }
                _ => unreachable!(),
            };
            let Operand::Reg(src) = a else { unreachable!() };
            set(cx, ta);
            check(self, ta)?;
            cx.emit(Op::IndexAddr { dst, src, index, scale: 1 }, line);
            return Ok(None);
        }
        let rt = if op.is_comparison() || matches!(op, BinOp::LogicAnd | BinOp::LogicOr) {
            self.u.int()
        } else if self.u.is_address(ta) || self.u.is_address(tb) {
            return Err(self.err("arithmetic on addresses is limited to `p + k` and `p - k`"));
        } else if is_float(&self.u, ta) {
            ta
        } else if is_float(&self.u, tb) {
            tb
        } else {
            ta
        };
        set(cx, rt);
        if !probing {
            self.compatible(rt, want)?;
        }
        cx.emit(Op::Binary { dst, op, lhs: a, rhs: b }, line);
        Ok(None)
    }

    /// Makes the instruction that just defined temporary `t` write `dst`
    /// instead.
    fn retarget(&self, cx: &mut FnCtx, t: Reg, dst: Reg) -> bool {
        if !cx.regs[t.index()].name.starts_with('$') {
            return false;
        }
        let Some(last) = cx.out.last_mut().and_then(|b| b.last_mut()) else {
            return false;
        };
        match &mut last.op {
            Op::Load { dst: d, .. }
            | Op::FieldAddr { dst: d, .. }
            | Op::IndexAddr { dst: d, .. }
            | Op::Cast { dst: d, .. }
            | Op::Binary { dst: d, .. }
                if *d == t =>
            {
                *d = dst;
                true
            }
            Op::Call { dst: Some(d), .. } if *d == t => {
                *d = dst;
                true
            }
            _ => false,
        }
    }

    fn alloc_result(&self, _cx: &FnCtx, _dst: Reg, got: TypeId, want: TypeId, probing: bool) -> PResult<()> {
        if probing || got == want || self.u.is_void_ptr(want) {
            Ok(())
        } else {
            Err(self.err(format!("type mismatch: `{}` assigned to `{}`", self.u.name(got), self.u.name(want))))
        }
    }

    /// Numeric values convert freely; addresses need identical types.
    fn compatible(&self, got: TypeId, want: TypeId) -> PResult<()> {
        let (ga, wa) = (self.u.is_address(got), self.u.is_address(want));
        if got == want || (!ga && !wa) {
            Ok(())
        } else {
            Err(self.err(format!(
                "type mismatch: `{}` assigned to `{}`; add a cast",
                self.u.name(got),
                self.u.name(want)
            )))
        }
    }

    fn call(&mut self, cx: &mut FnCtx, name: &str, dst: Option<Reg>, line: u32) -> PResult<()> {
        let Some(sig) = cx.sigs.get(name).cloned() else {
            return Err(self.err(format!("unknown function `{name}`")));
        };
        self.expect("(")?;
        let mut args = Vec::new();
        while !self.eat(")") {
            let (v, t) = self.value(cx)?;
            let Some(&pt) = sig.params.get(args.len()) else {
                return Err(self.err(format!("too many arguments to `{name}`")));
            };
            let v = if t == self.u.void_ptr() && matches!(v, Operand::Int(0)) {
                v
            } else {
                self.coerce(cx, v, t, pt, line)?
            };
            args.push(v);
            if !self.eat(",") {
                self.expect(")")?;
                break;
            }
        }
        if args.len() != sig.params.len() {
            return Err(self.err(format!("`{name}` takes {} arguments, got {}", sig.params.len(), args.len())));
        }
        cx.emit(Op::Call { dst, func: name.to_string(), args }, line);
        Ok(())
    }
}

/// The base field of `rec` through which member `name` is inherited.
fn inherited_via(u: &TypeUniverse, rec: TypeId, name: &str) -> Option<usize> {
    let r = u.get(rec).as_record()?;
    r.fields.iter().position(|f| f.is_base && (u.field(f.ty, name).is_ok() || inherited_via(u, f.ty, name).is_some()))
}

fn record_kind(kw: &str) -> RecordKind {
    match kw {
        "class" => RecordKind::Class,
        "union" => RecordKind::Union,
        _ => RecordKind::Struct,
    }
}

fn normalize_scalar(words: &[String]) -> String {
    let has = |w: &str| words.iter().any(|x| x == w);
    let longs = words.iter().filter(|w| *w == "long").count();
    let base = if has("char") {
        "char"
    } else if has("short") {
        "short"
    } else if longs >= 2 {
        "long long"
    } else if longs == 1 {
        "long"
    } else {
        "int"
    };
    if has("unsigned") {
        format!("unsigned {base}")
    } else if has("signed") && base == "char" {
        "signed char".to_string()
    } else {
        base.to_string()
    }
}

pub(crate) fn is_float(u: &TypeUniverse, t: TypeId) -> bool {
    matches!(&u.get(t).kind, TypeKind::Fundamental { name } if name == "float" || name == "double")
}
