//! Integer/boolean expressions shared by array sizes and constraints.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::SpecError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    And,
    Or,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Rem => "%",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::And => "&&",
            BinOp::Or => "||",
        }
    }

    /// Binding strength; higher binds tighter.
    pub fn precedence(self) -> u8 {
        match self {
            BinOp::Or => 1,
            BinOp::And => 2,
            BinOp::Eq | BinOp::Ne => 3,
            BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => 4,
            BinOp::Add | BinOp::Sub => 5,
            BinOp::Mul | BinOp::Div | BinOp::Rem => 6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnOp {
    Neg,
    Not,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Int(i64),
    Float(f64),
    Bool(bool),
    Name(String),
    /// `<array>.size`
    Size(String),
    Unary(UnOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Value {
    Int(i64),
    Bool(bool),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExprType {
    Int,
    Float,
    Bool,
}

/// Name bindings for evaluation. Array sizes live under `<name>.size`.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    values: HashMap<String, i64>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, name: &str, value: i64) {
        self.values.insert(name.to_owned(), value);
    }

    pub fn set_size(&mut self, array: &str, size: i64) {
        self.values.insert(format!("{array}.size"), size);
    }

    pub fn remove(&mut self, name: &str) {
        self.values.remove(name);
    }

    pub fn get(&self, name: &str) -> Option<i64> {
        self.values.get(name).copied()
    }
}

impl<S: AsRef<str>> FromIterator<(S, i64)> for Bindings {
    fn from_iter<I: IntoIterator<Item = (S, i64)>>(iter: I) -> Self {
        let mut b = Bindings::new();
        for (k, v) in iter {
            b.set(k.as_ref(), v);
        }
        b
    }
}

impl Expr {
    pub fn name(n: &str) -> Self {
        Expr::Name(n.to_owned())
    }

    pub fn bin(op: BinOp, lhs: Expr, rhs: Expr) -> Self {
        Expr::Binary(op, Box::new(lhs), Box::new(rhs))
    }

    /// Visit every referenced identifier (`Name` and `Size`).
    pub fn for_each_ref(&self, f: &mut impl FnMut(&Expr)) {
        match self {
            Expr::Name(_) | Expr::Size(_) => f(self),
            Expr::Unary(_, e) => e.for_each_ref(f),
            Expr::Binary(_, l, r) => {
                l.for_each_ref(f);
                r.for_each_ref(f);
            }
            Expr::Int(_) | Expr::Float(_) | Expr::Bool(_) => {}
        }
    }

    pub fn references(&self, name: &str) -> bool {
        let mut hit = false;
        self.for_each_ref(&mut |e| {
            if let Expr::Name(n) = e {
                hit |= n == name;
            }
        });
        hit
    }

    pub fn is_constant(&self) -> bool {
        let mut c = true;
        self.for_each_ref(&mut |_| c = false);
        c
    }

    pub fn eval(&self, env: &Bindings) -> Result<Value, SpecError> {
        match self {
            Expr::Int(v) => Ok(Value::Int(*v)),
            Expr::Bool(b) => Ok(Value::Bool(*b)),
            Expr::Float(_) => Err(SpecError::ty(
                "floating-point literal in integer expression".into(),
            )),
            Expr::Name(n) => env
                .get(n)
                .map(Value::Int)
                .ok_or_else(|| SpecError::UnboundName(n.clone())),
            Expr::Size(a) => env
                .get(&format!("{a}.size"))
                .map(Value::Int)
                .ok_or_else(|| SpecError::UnboundName(format!("{a}.size"))),
            Expr::Unary(UnOp::Neg, e) => match e.eval(env)? {
                Value::Int(v) => v
                    .checked_neg()
                    .map(Value::Int)
                    .ok_or_else(|| SpecError::Evaluation("integer overflow".into())),
                Value::Bool(_) => Err(SpecError::ty("cannot negate a boolean".into())),
            },
            Expr::Unary(UnOp::Not, e) => match e.eval(env)? {
                Value::Bool(b) => Ok(Value::Bool(!b)),
                Value::Int(_) => Err(SpecError::ty("`!` applied to an integer".into())),
            },
            Expr::Binary(op, l, r) => {
                // short-circuit logical operators
                if matches!(op, BinOp::And | BinOp::Or) {
                    let lv = expect_bool(l.eval(env)?)?;
                    return match (op, lv) {
                        (BinOp::And, false) => Ok(Value::Bool(false)),
                        (BinOp::Or, true) => Ok(Value::Bool(true)),
                        _ => Ok(Value::Bool(expect_bool(r.eval(env)?)?)),
                    };
                }
                let lv = l.eval(env)?;
                let rv = r.eval(env)?;
                apply_binary(*op, lv, rv)
            }
        }
    }

    pub fn eval_int(&self, env: &Bindings) -> Result<i64, SpecError> {
        match self.eval(env)? {
            Value::Int(v) => Ok(v),
            Value::Bool(_) => Err(SpecError::ty("expected an integer expression".into())),
        }
    }

    pub fn eval_bool(&self, env: &Bindings) -> Result<bool, SpecError> {
        expect_bool(self.eval(env)?)
    }

    /// Static type of the expression given the type of each free name.
    pub fn infer(&self, lookup: &impl Fn(&Expr) -> Option<ExprType>) -> Result<ExprType, SpecError> {
        match self {
            Expr::Int(_) => Ok(ExprType::Int),
            Expr::Float(_) => Ok(ExprType::Float),
            Expr::Bool(_) => Ok(ExprType::Bool),
            Expr::Name(n) => lookup(self).ok_or_else(|| SpecError::name(format!("undeclared name `{n}`"))),
            Expr::Size(a) => lookup(self).ok_or_else(|| SpecError::name(format!("undeclared array `{a}`"))),
            Expr::Unary(UnOp::Neg, e) => match e.infer(lookup)? {
                t @ (ExprType::Int | ExprType::Float) => Ok(t),
                ExprType::Bool => Err(SpecError::ty("cannot negate a boolean".into())),
            },
            Expr::Unary(UnOp::Not, e) => match e.infer(lookup)? {
                ExprType::Bool => Ok(ExprType::Bool),
                _ => Err(SpecError::ty("`!` requires a boolean operand".into())),
            },
            Expr::Binary(op, l, r) => {
                let (lt, rt) = (l.infer(lookup)?, r.infer(lookup)?);
                match op {
                    BinOp::And | BinOp::Or => {
                        if lt == ExprType::Bool && rt == ExprType::Bool {
                            Ok(ExprType::Bool)
                        } else {
                            Err(SpecError::ty(format!("`{}` requires boolean operands", op.symbol())))
                        }
                    }
                    BinOp::Eq | BinOp::Ne => {
                        if lt == rt && lt != ExprType::Float {
                            Ok(ExprType::Bool)
                        } else {
                            Err(SpecError::ty(format!("cannot compare {lt:?} with {rt:?}")))
                        }
                    }
                    BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => {
                        if lt == ExprType::Int && rt == ExprType::Int {
                            Ok(ExprType::Bool)
                        } else {
                            Err(SpecError::ty(format!("`{}` requires integer operands", op.symbol())))
                        }
                    }
                    _ => {
                        if lt == ExprType::Int && rt == ExprType::Int {
                            Ok(ExprType::Int)
                        } else {
                            Err(SpecError::ty(format!("`{}` requires integer operands", op.symbol())))
                        }
                    }
                }
            }
        }
    }
}

fn expect_bool(v: Value) -> Result<bool, SpecError> {
    match v {
        Value::Bool(b) => Ok(b),
        Value::Int(_) => Err(SpecError::ty("expected a boolean expression".into())),
    }
}

fn apply_binary(op: BinOp, lv: Value, rv: Value) -> Result<Value, SpecError> {
    use Value::*;
    let overflow = || SpecError::Evaluation("integer overflow".into());
    match (lv, rv) {
        (Int(a), Int(b)) => Ok(match op {
            BinOp::Add => Int(a.checked_add(b).ok_or_else(overflow)?),
            BinOp::Sub => Int(a.checked_sub(b).ok_or_else(overflow)?),
            BinOp::Mul => Int(a.checked_mul(b).ok_or_else(overflow)?),
            BinOp::Div => {
                if b == 0 {
                    return Err(SpecError::DivisionByZero);
                }
                Int(a.checked_div(b).ok_or_else(overflow)?)
            }
            BinOp::Rem => {
                if b == 0 {
                    return Err(SpecError::DivisionByZero);
                }
                Int(a.checked_rem(b).ok_or_else(overflow)?)
            }
            BinOp::Eq => Bool(a == b),
            BinOp::Ne => Bool(a != b),
            BinOp::Lt => Bool(a < b),
            BinOp::Le => Bool(a <= b),
            BinOp::Gt => Bool(a > b),
            BinOp::Ge => Bool(a >= b),
            BinOp::And | BinOp::Or => unreachable!("handled by short-circuit path"),
        }),
        (Bool(a), Bool(b)) => match op {
            BinOp::Eq => Ok(Bool(a == b)),
            BinOp::Ne => Ok(Bool(a != b)),
            _ => Err(SpecError::ty(format!("`{}` is not defined on booleans", op.symbol()))),
        },
        _ => Err(SpecError::ty(format!("mixed operand types for `{}`", op.symbol()))),
    }
}

/// Evaluate an integer expression against plain name bindings.
pub fn evaluate_int_expr(expr: &Expr, bindings: &Bindings) -> Result<i64, SpecError> {
    expr.eval_int(bindings)
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_expr(f, self, 0)
    }
}

fn write_expr(f: &mut fmt::Formatter<'_>, e: &Expr, min_prec: u8) -> fmt::Result {
    match e {
        Expr::Int(v) => write!(f, "{v}"),
        Expr::Float(v) => write!(f, "{v:?}"),
        Expr::Bool(b) => write!(f, "{b}"),
        Expr::Name(n) => f.write_str(n),
        Expr::Size(a) => write!(f, "{a}.size"),
        Expr::Unary(op, inner) => {
            f.write_str(match op {
                UnOp::Neg => "-",
                UnOp::Not => "!",
            })?;
            write_expr(f, inner, 7)
        }
        Expr::Binary(op, l, r) => {
            let p = op.precedence();
            let paren = p < min_prec;
            if paren {
                f.write_str("(")?;
            }
            write_expr(f, l, p)?;
            write!(f, " {} ", op.symbol())?;
            // left-associative: equal precedence on the right needs parentheses
            write_expr(f, r, p + 1)?;
            if paren {
                f.write_str(")")?;
            }
            Ok(())
        }
    }
}
