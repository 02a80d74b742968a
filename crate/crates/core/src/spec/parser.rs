use std::collections::HashMap;

use super::expr::{BinOp, Expr, ExprType, UnOp};
use super::{
    ArrayDecl, ArrayInit, Constraint, Dtype, InputSpec, Location, ScalarDecl, SpecError, TuningDecl, ValueSet,
};

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Int(u64),
    Float(f64),
    Sym(&'static str),
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    col: usize,
}

const SYMBOLS: &[&str] = &[
    "..=", "==", "!=", "<=", ">=", "&&", "||", "{", "}", "(", ")", ",", ":", "<", ">", "+", "-", "*", "/", "%", "!",
    ".",
];

fn lex_line(line: &str, lineno: usize) -> Result<Vec<Token>, SpecError> {
    let bytes = line.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let err = |col: usize, message: String| SpecError::Syntax {
        loc: Some(Location { line: lineno, col }),
        message,
    };
    while i < bytes.len() {
        let c = bytes[i];
        let col = i + 1;
        if c == b'#' {
            break;
        }
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Token { tok: Tok::Ident(line[start..i].to_owned()), col });
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            let mut is_float = false;
            if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
                is_float = true;
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    is_float = true;
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &line[start..i];
            let tok = if is_float {
                Tok::Float(text.parse().map_err(|_| err(col, format!("bad number `{text}`")))?)
            } else {
                Tok::Int(text.parse().map_err(|_| err(col, format!("integer literal `{text}` out of range")))?)
            };
            out.push(Token { tok, col });
            continue;
        }
        match SYMBOLS.iter().find(|s| line[i..].starts_with(**s)) {
            Some(s) => {
                out.push(Token { tok: Tok::Sym(s), col });
                i += s.len();
            }
            None => return Err(err(col, format!("unexpected character `{}`", line[i..].chars().next().unwrap()))),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    toks: &'a [Token],
    pos: usize,
    line: usize,
    eol_col: usize,
}

impl<'a> Cursor<'a> {
    fn loc(&self) -> Location {
        let col = self.toks.get(self.pos).map(|t| t.col).unwrap_or(self.eol_col);
        Location { line: self.line, col }
    }

    fn syntax(&self, message: impl Into<String>) -> SpecError {
        SpecError::Syntax { loc: Some(self.loc()), message: message.into() }
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    fn next(&mut self) -> Option<&Tok> {
        let t = self.toks.get(self.pos).map(|t| &t.tok);
        self.pos += 1;
        t
    }

    fn at_sym(&self, s: &str) -> bool {
        matches!(self.peek(), Some(Tok::Sym(x)) if *x == s)
    }

    fn at_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Ident(x)) if x == kw)
    }

    fn expect_sym(&mut self, s: &str) -> Result<(), SpecError> {
        if self.at_sym(s) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.syntax(format!("expected `{s}`")))
        }
    }

    fn expect_kw(&mut self, kw: &str) -> Result<(), SpecError> {
        if self.at_kw(kw) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.syntax(format!("expected `{kw}`")))
        }
    }

    fn ident(&mut self) -> Result<String, SpecError> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => Err(self.syntax("expected an identifier")),
        }
    }

    fn finish(&self) -> Result<(), SpecError> {
        if self.pos < self.toks.len() {
            Err(self.syntax("unexpected trailing tokens"))
        } else {
            Ok(())
        }
    }

    fn expr(&mut self) -> Result<Expr, SpecError> {
        self.binary(1)
    }

    fn binary(&mut self, min_prec: u8) -> Result<Expr, SpecError> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.peek_binop() {
            let p = op.precedence();
            if p < min_prec {
                break;
            }
            self.pos += 1;
            let rhs = self.binary(p + 1)?;
            lhs = Expr::bin(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn peek_binop(&self) -> Option<BinOp> {
        let Some(Tok::Sym(s)) = self.peek() else { return None };
        Some(match *s {
            "+" => BinOp::Add,
            "-" => BinOp::Sub,
            "*" => BinOp::Mul,
            "/" => BinOp::Div,
            "%" => BinOp::Rem,
            "==" => BinOp::Eq,
            "!=" => BinOp::Ne,
            "<" => BinOp::Lt,
            "<=" => BinOp::Le,
            ">" => BinOp::Gt,
            ">=" => BinOp::Ge,
            "&&" => BinOp::And,
            "||" => BinOp::Or,
            _ => return None,
        })
    }

    fn unary(&mut self) -> Result<Expr, SpecError> {
        if self.at_sym("-") {
            self.pos += 1;
            return Ok(Expr::Unary(UnOp::Neg, Box::new(self.unary()?)));
        }
        if self.at_sym("!") {
            self.pos += 1;
            return Ok(Expr::Unary(UnOp::Not, Box::new(self.unary()?)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, SpecError> {
        let here = self.syntax("expected an expression");
        match self.next().cloned() {
            Some(Tok::Int(v)) => i64::try_from(v)
                .map(Expr::Int)
                .map_err(|_| here_with(here, "integer literal out of range")),
            Some(Tok::Float(v)) => Ok(Expr::Float(v)),
            Some(Tok::Ident(name)) => match name.as_str() {
                "true" => Ok(Expr::Bool(true)),
                "false" => Ok(Expr::Bool(false)),
                _ => {
                    if self.at_sym(".") {
                        self.pos += 1;
                        let attr = self.ident()?;
                        if attr != "size" {
                            return Err(self.syntax(format!("unknown attribute `.{attr}`; only `.size` exists")));
                        }
                        Ok(Expr::Size(name))
                    } else {
                        Ok(Expr::Name(name))
                    }
                }
            },
            Some(Tok::Sym("(")) => {
                let e = self.expr()?;
                self.expect_sym(")")?;
                Ok(e)
            }
            _ => Err(here),
        }
    }

    fn value_set(&mut self) -> Result<ValueSet, SpecError> {
        if self.at_sym("{") {
            self.pos += 1;
            let mut items = Vec::new();
            if !self.at_sym("}") {
                loop {
                    items.push(self.expr()?);
                    if self.at_sym(",") {
                        self.pos += 1;
                        continue;
                    }
                    break;
                }
            }
            self.expect_sym("}")?;
            if items.is_empty() {
                return Err(SpecError::Value { loc: Some(self.loc()), message: "empty value set".into() });
            }
            return Ok(ValueSet::Explicit(items));
        }
        if self.at_kw("range") {
            self.pos += 1;
            self.expect_sym("(")?;
            let start = self.expr()?;
            self.expect_sym(",")?;
            let stop = self.expr()?;
            let step = if self.at_sym(",") {
                self.pos += 1;
                self.expr()?
            } else {
                Expr::Int(1)
            };
            self.expect_sym(")")?;
            return Ok(ValueSet::Range { start, stop, step });
        }
        if self.at_kw("pow2") {
            self.pos += 1;
            self.expect_sym("(")?;
            let lo = self.expr()?;
            self.expect_sym("..=")?;
            let hi = self.expr()?;
            self.expect_sym(")")?;
            return Ok(ValueSet::Pow2 { lo, hi });
        }
        Err(self.syntax("expected a value set: `{...}`, `range(...)` or `pow2(lo..=hi)`"))
    }

    fn init(&mut self) -> Result<ArrayInit, SpecError> {
        let kw = self.ident()?;
        match kw.as_str() {
            "zeros" => Ok(ArrayInit::Zeros),
            "ones" => Ok(ArrayInit::Ones),
            "random" => {
                self.expect_sym("(")?;
                let seed = match self.next() {
                    Some(Tok::Int(v)) => *v,
                    _ => return Err(self.syntax("expected an integer seed")),
                };
                self.expect_sym(")")?;
                Ok(ArrayInit::Random { seed })
            }
            other => Err(self.syntax(format!("unknown initializer `{other}`"))),
        }
    }
}

fn here_with(e: SpecError, msg: &str) -> SpecError {
    match e {
        SpecError::Syntax { loc, .. } => SpecError::Syntax { loc, message: msg.into() },
        other => other,
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Scalar(Dtype),
    Array,
    Tuning,
}

/// Parse and validate a specification source.
pub fn parse_spec(source: &str) -> Result<InputSpec, SpecError> {
    let mut spec = InputSpec::default();
    let mut declared: HashMap<String, Kind> = HashMap::new();
    let mut pending_constraints: Vec<(Expr, Location)> = Vec::new();

    for (idx, raw) in source.lines().enumerate() {
        let lineno = idx + 1;
        let toks = lex_line(raw, lineno)?;
        if toks.is_empty() {
            continue;
        }
        let mut c = Cursor { toks: &toks, pos: 0, line: lineno, eol_col: raw.len() + 1 };
        let start = c.loc();
        let head = c.ident()?;
        match head.as_str() {
            "input" | "output" => {
                let name_loc = c.loc();
                let name = c.ident()?;
                check_new(&declared, &name, name_loc)?;
                c.expect_sym(":")?;
                if c.at_kw("array") {
                    c.pos += 1;
                    c.expect_sym("<")?;
                    let dt_loc = c.loc();
                    let dt = c.ident()?;
                    let elem_dtype = Dtype::parse(&dt)
                        .ok_or_else(|| SpecError::Type { loc: Some(dt_loc), message: format!("unknown dtype `{dt}`") })?;
                    c.expect_sym(">")?;
                    c.expect_kw("size")?;
                    c.expect_kw("in")?;
                    let set_loc = c.loc();
                    let sizes = c.value_set()?;
                    let init = if c.at_kw("init") {
                        c.pos += 1;
                        c.init()?
                    } else if head == "output" {
                        ArrayInit::Zeros
                    } else {
                        return Err(c.syntax("input arrays need an `init` clause"));
                    };
                    c.finish()?;
                    for e in sizes.exprs() {
                        e.infer(&|r| match r {
                            Expr::Name(n) => match declared.get(n) {
                                Some(Kind::Scalar(Dtype::I32)) => Some(ExprType::Int),
                                Some(Kind::Scalar(_)) => Some(ExprType::Float),
                                _ => None,
                            },
                            _ => None,
                        })
                        .and_then(|t| {
                            if t == ExprType::Int {
                                Ok(())
                            } else {
                                Err(SpecError::ty("array sizes must be integer expressions".into()))
                            }
                        })
                        .map_err(|e| size_ref_error(e, &declared).located(set_loc))?;
                    }
                    if sizes.is_constant() {
                        let n = sizes.eval_ints(&Default::default()).map_err(|e| e.located(set_loc))?;
                        if n.is_empty() || n[0] <= 0 {
                            return Err(SpecError::Value {
                                loc: Some(set_loc),
                                message: "array sizes must be strictly positive".into(),
                            });
                        }
                    }
                    declared.insert(name.clone(), Kind::Array);
                    spec.arrays.push(ArrayDecl { name, elem_dtype, sizes, init, is_output: head == "output" });
                } else {
                    if head == "output" {
                        return Err(c.syntax("only arrays can be outputs"));
                    }
                    let dt_loc = c.loc();
                    let dt = c.ident()?;
                    let dtype = Dtype::parse(&dt)
                        .ok_or_else(|| SpecError::Type { loc: Some(dt_loc), message: format!("unknown dtype `{dt}`") })?;
                    c.expect_kw("in")?;
                    let set_loc = c.loc();
                    let values = c.value_set()?;
                    c.finish()?;
                    if !values.is_constant() {
                        return Err(SpecError::Name {
                            loc: Some(set_loc),
                            message: format!("value set of scalar `{name}` must not reference names"),
                        });
                    }
                    let decl = ScalarDecl { name: name.clone(), dtype, values };
                    if dtype == Dtype::I32 {
                        for e in decl.values.exprs() {
                            if e.infer(&|_| None).map_err(|e| e.located(set_loc))? != ExprType::Int {
                                return Err(SpecError::Type {
                                    loc: Some(set_loc),
                                    message: format!("`{name}` is i32 but its value set holds non-integers"),
                                });
                            }
                        }
                    }
                    decl.evaluate().map_err(|e| e.located(set_loc))?;
                    declared.insert(name, Kind::Scalar(dtype));
                    spec.scalars.push(decl);
                }
            }
            "tune" => {
                let name_loc = c.loc();
                let name = c.ident()?;
                check_new(&declared, &name, name_loc)?;
                c.expect_sym(":")?;
                let dt_loc = c.loc();
                let dt = c.ident()?;
                if Dtype::parse(&dt) != Some(Dtype::I32) {
                    return Err(SpecError::Type {
                        loc: Some(dt_loc),
                        message: format!("tuning parameters are i32, found `{dt}`"),
                    });
                }
                c.expect_kw("in")?;
                let set_loc = c.loc();
                let values = c.value_set()?;
                c.finish()?;
                if !values.is_constant() {
                    return Err(SpecError::Name {
                        loc: Some(set_loc),
                        message: format!("value set of tuning parameter `{name}` must not reference names"),
                    });
                }
                for e in values.exprs() {
                    if e.infer(&|_| None).map_err(|e| e.located(set_loc))? != ExprType::Int {
                        return Err(SpecError::Type {
                            loc: Some(set_loc),
                            message: format!("tuning parameter `{name}` takes integer values"),
                        });
                    }
                }
                let decl = TuningDecl { name: name.clone(), values };
                decl.evaluate().map_err(|e| e.located(set_loc))?;
                declared.insert(name, Kind::Tuning);
                spec.tuning.push(decl);
            }
            "constraint" => {
                let expr_loc = c.loc();
                let expr = c.expr()?;
                c.finish()?;
                pending_constraints.push((expr, expr_loc));
            }
            other => {
                return Err(SpecError::Syntax {
                    loc: Some(start),
                    message: format!("unknown declaration `{other}`"),
                })
            }
        }
    }

    if spec.scalars.is_empty() && spec.arrays.is_empty() && spec.tuning.is_empty() {
        return Err(SpecError::Syntax { loc: None, message: "empty specification".into() });
    }

    for (expr, loc) in pending_constraints {
        let ty = expr
            .infer(&|r| match r {
                Expr::Name(n) => match declared.get(n) {
                    Some(Kind::Scalar(Dtype::I32)) | Some(Kind::Tuning) => Some(ExprType::Int),
                    Some(Kind::Scalar(_)) => Some(ExprType::Float),
                    _ => None,
                },
                Expr::Size(a) => matches!(declared.get(a), Some(Kind::Array)).then_some(ExprType::Int),
                _ => None,
            })
            .map_err(|e| e.located(loc))?;
        if ty != ExprType::Bool {
            return Err(SpecError::Type { loc: Some(loc), message: "constraints must be boolean".into() });
        }
        spec.constraints.push(Constraint { expr });
    }
    Ok(spec)
}

/// Parse a single standalone expression (no declarations).
pub fn parse_expr(source: &str) -> Result<Expr, SpecError> {
    let toks = lex_line(source, 1)?;
    let mut c = Cursor { toks: &toks, pos: 0, line: 1, eol_col: source.len() + 1 };
    let e = c.expr()?;
    c.finish()?;
    Ok(e)
}

fn check_new(declared: &HashMap<String, Kind>, name: &str, loc: Location) -> Result<(), SpecError> {
    if declared.contains_key(name) {
        return Err(SpecError::Name { loc: Some(loc), message: format!("duplicate declaration of `{name}`") });
    }
    if matches!(name, "true" | "false" | "size" | "range" | "pow2" | "init" | "in" | "array") {
        return Err(SpecError::Name { loc: Some(loc), message: format!("`{name}` is a reserved word") });
    }
    Ok(())
}

// Sizes may only mention scalars declared earlier; give a clearer message when
// the name exists but is a tuning parameter or array.
fn size_ref_error(e: SpecError, declared: &HashMap<String, Kind>) -> SpecError {
    if let SpecError::Name { loc, message } = &e {
        if let Some(n) = message.strip_prefix("undeclared name `").and_then(|m| m.strip_suffix('`')) {
            match declared.get(n) {
                Some(Kind::Tuning) => {
                    return SpecError::Name {
                        loc: *loc,
                        message: format!("array sizes cannot depend on tuning parameter `{n}`"),
                    }
                }
                Some(Kind::Array) => {
                    return SpecError::Name { loc: *loc, message: format!("`{n}` is an array, not a scalar") }
                }
                _ => {}
            }
        }
    }
    e
}
