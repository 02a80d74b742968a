//! The kernel input/tuning specification language.
//!
//! A specification is a line-oriented list of declarations:
//!
//! ```text
//! input n: i32 in {2048, 4096}
//! input A: array<f32> size in {n*n} init random(7)
//! output C: array<f32> size in {n*n} init zeros
//! tune BLOCK_X: i32 in pow2(1..=1024)
//! constraint BLOCK_X * BLOCK_Y <= 1024
//! ```
//!
//! Value sets are explicit (`{a, b}`), half-open ranges (`range(start, stop, step)`)
//! or inclusive power-of-two ranges (`pow2(lo..=hi)`). `#` starts a comment.

mod enumerate;
pub mod expr;
mod parser;

use std::cmp::Ordering;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use enumerate::{enumerate_execution_params, enumerate_input_keys, sample_execution_params, sample_indices};
pub use expr::{evaluate_int_expr, BinOp, Bindings, Expr, UnOp};
pub use parser::{parse_expr, parse_spec};

/// Upper bound on the number of values a single range may produce.
pub const MAX_SET_LEN: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Location {
    pub line: usize,
    pub col: usize,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

fn at(loc: &Option<Location>) -> String {
    loc.map(|l| format!(" at {l}")).unwrap_or_default()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("syntax error{}: {message}", at(.loc))]
    Syntax { loc: Option<Location>, message: String },
    #[error("name error{}: {message}", at(.loc))]
    Name { loc: Option<Location>, message: String },
    #[error("type error{}: {message}", at(.loc))]
    Type { loc: Option<Location>, message: String },
    #[error("invalid value set{}: {message}", at(.loc))]
    Value { loc: Option<Location>, message: String },
    #[error("division by zero")]
    DivisionByZero,
    #[error("unbound name `{0}`")]
    UnboundName(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
}

impl SpecError {
    pub(crate) fn ty(message: String) -> Self {
        SpecError::Type { loc: None, message }
    }

    pub(crate) fn name(message: String) -> Self {
        SpecError::Name { loc: None, message }
    }

    pub(crate) fn value(message: String) -> Self {
        SpecError::Value { loc: None, message }
    }

    /// Attach a source location if the error does not carry one yet.
    pub(crate) fn located(self, l: Location) -> Self {
        match self {
            SpecError::Syntax { loc: None, message } => SpecError::Syntax { loc: Some(l), message },
            SpecError::Name { loc: None, message } => SpecError::Name { loc: Some(l), message },
            SpecError::Type { loc: None, message } => SpecError::Type { loc: Some(l), message },
            SpecError::Value { loc: None, message } => SpecError::Value { loc: Some(l), message },
            other => other,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    I32,
    F32,
    F16,
}

impl Dtype {
    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::I32 => "i32",
            Dtype::F32 => "f32",
            Dtype::F16 => "f16",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "i32" | "int" => Some(Dtype::I32),
            "f32" => Some(Dtype::F32),
            "f16" => Some(Dtype::F16),
            _ => None,
        }
    }

    /// Element width in the raw output buffers.
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::I32 | Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ValueSet {
    Explicit(Vec<Expr>),
    /// Half-open `[start, stop)` with a nonzero step.
    Range { start: Expr, stop: Expr, step: Expr },
    /// Powers of two within `[lo, hi]`.
    Pow2 { lo: Expr, hi: Expr },
}

impl ValueSet {
    /// Integer values, ascending and duplicate-free.
    pub fn eval_ints(&self, env: &Bindings) -> Result<Vec<i64>, SpecError> {
        let mut out = match self {
            ValueSet::Explicit(items) => items.iter().map(|e| e.eval_int(env)).collect::<Result<Vec<_>, _>>()?,
            ValueSet::Range { start, stop, step } => {
                let (a, b, s) = (start.eval_int(env)?, stop.eval_int(env)?, step.eval_int(env)?);
                if s == 0 {
                    return Err(SpecError::value("range step must be nonzero".into()));
                }
                let mut v = Vec::new();
                let mut x = a;
                while (s > 0 && x < b) || (s < 0 && x > b) {
                    v.push(x);
                    if v.len() > MAX_SET_LEN {
                        return Err(SpecError::value("range too large".into()));
                    }
                    x = match x.checked_add(s) {
                        Some(x) => x,
                        None => break,
                    };
                }
                v
            }
            ValueSet::Pow2 { lo, hi } => {
                let (lo, hi) = (lo.eval_int(env)?, hi.eval_int(env)?);
                (0..63).map(|e| 1i64 << e).filter(|p| *p >= lo && *p <= hi).collect()
            }
        };
        let before = out.len();
        out.sort_unstable();
        out.dedup();
        if out.len() != before && matches!(self, ValueSet::Explicit(_)) {
            return Err(SpecError::value("duplicate value in set".into()));
        }
        Ok(out)
    }

    fn is_constant(&self) -> bool {
        self.exprs().iter().all(|e| e.is_constant())
    }

    pub fn exprs(&self) -> Vec<&Expr> {
        match self {
            ValueSet::Explicit(v) => v.iter().collect(),
            ValueSet::Range { start, stop, step } => vec![start, stop, step],
            ValueSet::Pow2 { lo, hi } => vec![lo, hi],
        }
    }
}

impl fmt::Display for ValueSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValueSet::Explicit(items) => {
                f.write_str("{")?;
                for (i, e) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{e}")?;
                }
                f.write_str("}")
            }
            ValueSet::Range { start, stop, step } => write!(f, "range({start}, {stop}, {step})"),
            ValueSet::Pow2 { lo, hi } => write!(f, "pow2({lo}..={hi})"),
        }
    }
}

/// A concrete scalar input value. `F16` holds an IEEE binary16 bit pattern.
/// Equality and hashing are bitwise.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarValue {
    I32(i32),
    F32(f32),
    F16(u16),
}

impl ScalarValue {
    fn bits(&self) -> (u8, u64) {
        match self {
            ScalarValue::I32(v) => (0, *v as u32 as u64),
            ScalarValue::F32(v) => (1, v.to_bits() as u64),
            ScalarValue::F16(b) => (2, *b as u64),
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            ScalarValue::I32(v) => Some(*v as i64),
            _ => None,
        }
    }

    /// Widened numeric value; f16 goes through binary32.
    pub fn as_f64(&self) -> f64 {
        match self {
            ScalarValue::I32(v) => *v as f64,
            ScalarValue::F32(v) => *v as f64,
            ScalarValue::F16(b) => half::f16::from_bits(*b).to_f32() as f64,
        }
    }

    pub fn total_cmp(&self, other: &Self) -> Ordering {
        self.as_f64().total_cmp(&other.as_f64())
    }
}

impl fmt::Display for ScalarValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarValue::I32(v) => write!(f, "{v}"),
            ScalarValue::F32(v) => write!(f, "{v:?}"),
            ScalarValue::F16(b) => write!(f, "{:?}", half::f16::from_bits(*b).to_f32()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarDecl {
    pub name: String,
    pub dtype: Dtype,
    pub values: ValueSet,
}

impl ScalarDecl {
    /// Evaluated values, ascending and duplicate-free.
    pub fn evaluate(&self) -> Result<Vec<ScalarValue>, SpecError> {
        let env = Bindings::new();
        let mut vals = match self.dtype {
            Dtype::I32 => self
                .values
                .eval_ints(&env)?
                .into_iter()
                .map(|v| {
                    i32::try_from(v)
                        .map(ScalarValue::I32)
                        .map_err(|_| SpecError::ty(format!("{v} does not fit in i32")))
                })
                .collect::<Result<Vec<_>, _>>()?,
            Dtype::F32 | Dtype::F16 => {
                let ValueSet::Explicit(items) = &self.values else {
                    return Err(SpecError::ty(format!(
                        "`{}`: floating-point scalars take an explicit value set",
                        self.name
                    )));
                };
                items
                    .iter()
                    .map(|e| {
                        let x = const_float(e)?;
                        Ok(match self.dtype {
                            Dtype::F32 => ScalarValue::F32(x as f32),
                            _ => ScalarValue::F16(half::f16::from_f32(x as f32).to_bits()),
                        })
                    })
                    .collect::<Result<Vec<_>, SpecError>>()?
            }
        };
        let before = vals.len();
        vals.sort_by(|a, b| a.total_cmp(b));
        vals.dedup_by(|a, b| a.total_cmp(b) == Ordering::Equal);
        if vals.len() != before {
            return Err(SpecError::value(format!("`{}`: duplicate value in set", self.name)));
        }
        if vals.is_empty() {
            return Err(SpecError::value(format!("`{}`: empty value set", self.name)));
        }
        Ok(vals)
    }
}

fn const_float(e: &Expr) -> Result<f64, SpecError> {
    match e {
        Expr::Int(v) => Ok(*v as f64),
        Expr::Float(v) => Ok(*v),
        Expr::Unary(UnOp::Neg, inner) => Ok(-const_float(inner)?),
        _ => Err(SpecError::ty("expected a numeric literal".into())),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ArrayInit {
    Zeros,
    Ones,
    Random { seed: u64 },
}

impl fmt::Display for ArrayInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArrayInit::Zeros => f.write_str("zeros"),
            ArrayInit::Ones => f.write_str("ones"),
            ArrayInit::Random { seed } => write!(f, "random({seed})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayDecl {
    pub name: String,
    pub elem_dtype: Dtype,
    /// Candidate element counts; may reference previously declared scalars.
    pub sizes: ValueSet,
    pub init: ArrayInit,
    pub is_output: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningDecl {
    pub name: String,
    pub values: ValueSet,
}

impl TuningDecl {
    pub fn new(name: &str, values: ValueSet) -> Self {
        Self { name: name.to_owned(), values }
    }

    pub fn evaluate(&self) -> Result<Vec<i64>, SpecError> {
        let v = self.values.eval_ints(&Bindings::new())?;
        if v.is_empty() {
            return Err(SpecError::value(format!("`{}`: empty value set", self.name)));
        }
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub expr: Expr,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub scalars: Vec<ScalarDecl>,
    pub arrays: Vec<ArrayDecl>,
    pub tuning: Vec<TuningDecl>,
    pub constraints: Vec<Constraint>,
}

impl InputSpec {
    pub fn tuning_names(&self) -> impl Iterator<Item = &str> {
        self.tuning.iter().map(|t| t.name.as_str())
    }

    pub fn is_declared(&self, name: &str) -> bool {
        self.scalars.iter().any(|s| s.name == name)
            || self.arrays.iter().any(|a| a.name == name)
            || self.tuning.iter().any(|t| t.name == name)
    }

    pub fn outputs(&self) -> impl Iterator<Item = &ArrayDecl> {
        self.arrays.iter().filter(|a| a.is_output)
    }

    pub fn array(&self, name: &str) -> Option<&ArrayDecl> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Add a tuning declaration; the name must be new.
    pub fn add_tuning(&mut self, decl: TuningDecl) -> Result<(), SpecError> {
        if self.is_declared(&decl.name) {
            return Err(SpecError::name(format!("`{}` is already declared", decl.name)));
        }
        decl.evaluate()?;
        self.tuning.push(decl);
        Ok(())
    }

    /// Drop a tuning declaration together with every constraint mentioning it.
    pub fn remove_tuning(&mut self, name: &str) {
        self.tuning.retain(|t| t.name != name);
        self.constraints.retain(|c| !c.expr.references(name));
    }

    /// The printed, re-parseable form.
    pub fn print(&self) -> String {
        print_spec(self)
    }

    /// Printed form of the scalar and array declarations only; two specs with the
    /// same signature share an input-key space.
    pub fn input_signature(&self) -> String {
        let reduced = InputSpec {
            scalars: self.scalars.clone(),
            arrays: self.arrays.clone(),
            ..Default::default()
        };
        print_spec(&reduced)
    }
}

pub fn print_spec(spec: &InputSpec) -> String {
    let mut out = String::new();
    for s in &spec.scalars {
        out.push_str(&format!("input {}: {} in {}\n", s.name, s.dtype, s.values));
    }
    for a in &spec.arrays {
        let kw = if a.is_output { "output" } else { "input" };
        out.push_str(&format!(
            "{kw} {}: array<{}> size in {} init {}\n",
            a.name, a.elem_dtype, a.sizes, a.init
        ));
    }
    for t in &spec.tuning {
        out.push_str(&format!("tune {}: i32 in {}\n", t.name, t.values));
    }
    for c in &spec.constraints {
        out.push_str(&format!("constraint {}\n", c.expr));
    }
    out
}

impl fmt::Display for InputSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print_spec(self))
    }
}

impl PartialEq for ScalarValue {
    fn eq(&self, other: &Self) -> bool {
        self.bits() == other.bits()
    }
}

impl Eq for ScalarValue {}

impl std::hash::Hash for ScalarValue {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.bits().hash(state);
    }
}

/// The scalar values and array sizes of an execution point; tuning excluded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputKey {
    pub scalars: IndexMap<String, ScalarValue>,
    pub array_sizes: IndexMap<String, u64>,
}

impl std::hash::Hash for InputKey {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        for (k, v) in &self.scalars {
            k.hash(state);
            v.hash(state);
        }
        for (k, v) in &self.array_sizes {
            k.hash(state);
            v.hash(state);
        }
    }
}

impl InputKey {
    /// Short stable hash used for on-disk layout.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_string().as_bytes());
        hex::encode(&digest[..8])
    }
}

impl fmt::Display for InputKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (k, v) in &self.scalars {
            if !first {
                f.write_str(",")?;
            }
            first = false;
            write!(f, "{k}={v}")?;
        }
        for (k, v) in &self.array_sizes {
            if !first {
                f.write_str(",")?;
            }
            first = false;
            write!(f, "{k}.size={v}")?;
        }
        Ok(())
    }
}

/// One full instantiation of scalar inputs, array sizes and tuning values.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionParams {
    pub scalar_values: IndexMap<String, ScalarValue>,
    pub array_sizes: IndexMap<String, u64>,
    pub tuning_values: IndexMap<String, i64>,
}

impl ExecutionParams {
    pub fn input_key(&self) -> InputKey {
        InputKey {
            scalars: self.scalar_values.clone(),
            array_sizes: self.array_sizes.clone(),
        }
    }

    /// Integer bindings visible to size expressions and constraints.
    pub fn bindings(&self) -> Bindings {
        let mut b = Bindings::new();
        for (k, v) in &self.scalar_values {
            if let Some(i) = v.as_int() {
                b.set(k, i);
            }
        }
        for (k, v) in &self.array_sizes {
            b.set_size(k, *v as i64);
        }
        for (k, v) in &self.tuning_values {
            b.set(k, *v);
        }
        b
    }

    pub fn satisfies(&self, spec: &InputSpec) -> Result<bool, SpecError> {
        let env = self.bindings();
        for c in &spec.constraints {
            if !c.expr.eval_bool(&env)? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn tuning_label(&self) -> String {
        self.tuning_values
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl fmt::Display for ExecutionParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.input_key())?;
        if !self.tuning_values.is_empty() {
            write!(f, ";{}", self.tuning_label())?;
        }
        Ok(())
    }
}
