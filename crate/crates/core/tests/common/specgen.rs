//! Random small specifications with an independent nested-loop oracle.
//!
//! The generator keeps a structured description next to the source text. The
//! oracle computes value sets and constraint truth from that description
//! without going through the parser or the expression evaluator.

use peak_core::spec::ExecutionParams;
use proptest::prelude::*;

#[derive(Clone, Debug)]
pub enum GenSet {
    /// Distinct values, in source order.
    Explicit(Vec<i64>),
    Range { start: i64, stop: i64, step: i64 },
    Pow2 { lo: i64, hi: i64 },
}

impl GenSet {
    pub fn values(&self) -> Vec<i64> {
        let mut v = match self {
            GenSet::Explicit(items) => items.clone(),
            GenSet::Range { start, stop, step } => {
                let mut out = Vec::new();
                let mut x = *start;
                while x < *stop {
                    out.push(x);
                    x += step;
                }
                out
            }
            GenSet::Pow2 { lo, hi } => {
                let mut out = Vec::new();
                let mut p = 1;
                while p <= *hi {
                    if p >= *lo {
                        out.push(p);
                    }
                    p *= 2;
                }
                out
            }
        };
        v.sort();
        v
    }

    pub fn source(&self) -> String {
        match self {
            GenSet::Explicit(items) => {
                format!("{{{}}}", items.iter().map(i64::to_string).collect::<Vec<_>>().join(", "))
            }
            GenSet::Range { start, stop, step } => format!("range({start}, {stop}, {step})"),
            GenSet::Pow2 { lo, hi } => format!("pow2({lo}..={hi})"),
        }
    }
}

/// One candidate array size.
#[derive(Clone, Debug)]
pub enum GenSize {
    Const(i64),
    /// `k * s<i>`
    Scaled { scalar: usize, k: i64 },
    /// `s<i> * s<i>`
    Square(usize),
}

#[derive(Clone, Debug)]
pub struct GenArray {
    pub output: bool,
    pub sizes: Vec<GenSize>,
}

/// A variable a constraint may mention.
#[derive(Clone, Copy, Debug)]
pub enum Var {
    Scalar(usize),
    Size(usize),
    Tune(usize),
}

#[derive(Clone, Copy, Debug)]
pub enum Term {
    Var(Var),
    Prod(Var, Var),
    Sum(Var, Var),
    Rem(Var, Var),
}

#[derive(Clone, Copy, Debug)]
pub enum Cmp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

#[derive(Clone, Debug)]
pub struct GenConstraint {
    pub term: Term,
    pub cmp: Cmp,
    pub bound: i64,
}

#[derive(Clone, Debug)]
pub struct GenSpec {
    pub scalars: Vec<GenSet>,
    pub arrays: Vec<GenArray>,
    pub tuning: Vec<GenSet>,
    pub constraints: Vec<GenConstraint>,
}

/// A point as plain name/value lists: scalars, array sizes, tuning.
pub type Point = (Vec<(String, i64)>, Vec<(String, i64)>, Vec<(String, i64)>);

fn var_src(v: Var) -> String {
    match v {
        Var::Scalar(i) => format!("s{i}"),
        Var::Size(i) => format!("a{i}.size"),
        Var::Tune(i) => format!("t{i}"),
    }
}

fn size_src(s: &GenSize) -> String {
    match s {
        GenSize::Const(c) => c.to_string(),
        GenSize::Scaled { scalar, k } => format!("{k} * s{scalar}"),
        GenSize::Square(i) => format!("s{i} * s{i}"),
    }
}

impl GenSpec {
    pub fn source(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.scalars.iter().enumerate() {
            out.push_str(&format!("input s{i}: i32 in {}\n", s.source()));
        }
        for (i, a) in self.arrays.iter().enumerate() {
            let kw = if a.output { "output" } else { "input" };
            let sizes = a.sizes.iter().map(size_src).collect::<Vec<_>>().join(", ");
            out.push_str(&format!("{kw} a{i}: array<f32> size in {{{sizes}}} init zeros\n"));
        }
        for (i, t) in self.tuning.iter().enumerate() {
            out.push_str(&format!("tune t{i}: i32 in {}\n", t.source()));
        }
        for c in &self.constraints {
            let term = match c.term {
                Term::Var(v) => var_src(v),
                Term::Prod(a, b) => format!("{} * {}", var_src(a), var_src(b)),
                Term::Sum(a, b) => format!("{} + {}", var_src(a), var_src(b)),
                Term::Rem(a, b) => format!("{} % {}", var_src(a), var_src(b)),
            };
            let op = match c.cmp {
                Cmp::Lt => "<",
                Cmp::Le => "<=",
                Cmp::Gt => ">",
                Cmp::Ge => ">=",
                Cmp::Eq => "==",
                Cmp::Ne => "!=",
            };
            out.push_str(&format!("constraint {term} {op} {}\n", c.bound));
        }
        out
    }

    /// Every valid point by plain nested loops.
    pub fn oracle(&self) -> Vec<Point> {
        let scalar_sets: Vec<Vec<i64>> = self.scalars.iter().map(GenSet::values).collect();
        let tuning_sets: Vec<Vec<i64>> = self.tuning.iter().map(GenSet::values).collect();
        let mut out = Vec::new();
        for s in product(&scalar_sets) {
            let mut size_sets = Vec::new();
            for a in &self.arrays {
                let mut sizes: Vec<i64> = a
                    .sizes
                    .iter()
                    .map(|z| match z {
                        GenSize::Const(c) => *c,
                        GenSize::Scaled { scalar, k } => k * s[*scalar],
                        GenSize::Square(i) => s[*i] * s[*i],
                    })
                    .collect();
                sizes.sort();
                size_sets.push(sizes);
            }
            for z in product(&size_sets) {
                for t in product(&tuning_sets) {
                    let val = |v: Var| match v {
                        Var::Scalar(i) => s[i],
                        Var::Size(i) => z[i],
                        Var::Tune(i) => t[i],
                    };
                    let ok = self.constraints.iter().all(|c| {
                        let x = match c.term {
                            Term::Var(v) => val(v),
                            Term::Prod(a, b) => val(a) * val(b),
                            Term::Sum(a, b) => val(a) + val(b),
                            Term::Rem(a, b) => val(a) % val(b),
                        };
                        match c.cmp {
                            Cmp::Lt => x < c.bound,
                            Cmp::Le => x <= c.bound,
                            Cmp::Gt => x > c.bound,
                            Cmp::Ge => x >= c.bound,
                            Cmp::Eq => x == c.bound,
                            Cmp::Ne => x != c.bound,
                        }
                    });
                    if ok {
                        let named = |p: char, v: &[i64]| v.iter().enumerate().map(|(i, x)| (format!("{p}{i}"), *x)).collect();
                        out.push((named('s', &s), named('a', &z), named('t', &t)));
                    }
                }
            }
        }
        out
    }
}

/// Cartesian product, last list varying fastest.
fn product(sets: &[Vec<i64>]) -> Vec<Vec<i64>> {
    let mut out = vec![Vec::new()];
    for set in sets {
        let mut next = Vec::new();
        for prefix in &out {
            for v in set {
                let mut p = prefix.clone();
                p.push(*v);
                next.push(p);
            }
        }
        out = next;
    }
    out
}

pub fn as_point(p: &ExecutionParams) -> Point {
    (
        p.scalar_values.iter().map(|(k, v)| (k.clone(), v.as_int().unwrap())).collect(),
        p.array_sizes.iter().map(|(k, v)| (k.clone(), *v as i64)).collect(),
        p.tuning_values.iter().map(|(k, v)| (k.clone(), *v)).collect(),
    )
}

fn gen_set() -> impl Strategy<Value = GenSet> {
    prop_oneof![
        prop::collection::btree_set(1i64..40, 1..4)
            .prop_flat_map(|s| Just(s.into_iter().collect::<Vec<_>>()).prop_shuffle())
            .prop_map(GenSet::Explicit),
        (1i64..20, 1i64..12, 1i64..5).prop_map(|(start, len, step)| GenSet::Range { start, stop: start + len, step }),
        (1i64..5, 0i64..40).prop_map(|(lo, extra)| GenSet::Pow2 { lo, hi: 2 * lo + extra }),
    ]
}

fn gen_var(scalars: usize, arrays: usize, tuning: usize) -> BoxedStrategy<Var> {
    let mut options: Vec<BoxedStrategy<Var>> = Vec::new();
    if scalars > 0 {
        options.push((0..scalars).prop_map(Var::Scalar).boxed());
    }
    if arrays > 0 {
        options.push((0..arrays).prop_map(Var::Size).boxed());
    }
    if tuning > 0 {
        options.push((0..tuning).prop_map(Var::Tune).boxed());
    }
    proptest::strategy::Union::new(options).boxed()
}

fn gen_constraint(scalars: usize, arrays: usize, tuning: usize) -> impl Strategy<Value = GenConstraint> {
    let v = gen_var(scalars, arrays, tuning);
    let term = prop_oneof![
        v.clone().prop_map(Term::Var),
        (v.clone(), v.clone()).prop_map(|(a, b)| Term::Prod(a, b)),
        (v.clone(), v.clone()).prop_map(|(a, b)| Term::Sum(a, b)),
        (v.clone(), v).prop_map(|(a, b)| Term::Rem(a, b)),
    ];
    let cmp = prop_oneof![Just(Cmp::Lt), Just(Cmp::Le), Just(Cmp::Gt), Just(Cmp::Ge), Just(Cmp::Eq), Just(Cmp::Ne)];
    (term, cmp, 0i64..200).prop_map(|(term, cmp, bound)| GenConstraint { term, cmp, bound })
}

/// Candidate sizes are distinct constants or one scalar-dependent size, so
/// they never collide.
fn gen_array(scalars: usize) -> BoxedStrategy<GenArray> {
    let constants = prop::collection::btree_set(1i64..64, 1..3)
        .prop_flat_map(|s| Just(s.into_iter().map(GenSize::Const).collect::<Vec<_>>()).prop_shuffle());
    let sizes = if scalars == 0 {
        constants.boxed()
    } else {
        prop_oneof![
            constants,
            (0..scalars, 1i64..4).prop_map(|(scalar, k)| vec![GenSize::Scaled { scalar, k }]),
            (0..scalars).prop_map(|i| vec![GenSize::Square(i)]),
        ]
        .boxed()
    };
    (any::<bool>(), sizes).prop_map(|(output, sizes)| GenArray { output, sizes }).boxed()
}

/// Small nonempty specs: up to two scalars, arrays and tuning parameters each,
/// and up to three constraints over whatever was declared.
pub fn gen_spec() -> impl Strategy<Value = GenSpec> {
    let counts = (0usize..3, 0usize..3, 0usize..3).prop_filter("empty specs are rejected", |(s, a, t)| s + a + t > 0);
    counts.prop_flat_map(|(ns, na, nt)| {
        let constraints = prop::collection::vec(gen_constraint(ns, na, nt), 0..4);
        (
            prop::collection::vec(gen_set(), ns),
            prop::collection::vec(gen_array(ns), na),
            prop::collection::vec(gen_set(), nt),
            constraints,
        )
            .prop_map(|(scalars, arrays, tuning, constraints)| GenSpec { scalars, arrays, tuning, constraints })
    })
}
