use std::collections::BTreeSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::expr::Bindings;
use super::{ExecutionParams, InputKey, InputSpec, ScalarValue, SpecError};

enum Dim<'a> {
    Scalar(&'a str, Vec<ScalarValue>),
    Array(usize),
    Tuning(&'a str, Vec<i64>),
}

/// Every valid execution point: the product of scalar values, array sizes and
/// tuning values, filtered by the constraints. Declaration order; values
/// ascending; the last declaration varies fastest.
pub fn enumerate_execution_params(spec: &InputSpec) -> Result<Vec<ExecutionParams>, SpecError> {
    let mut dims = Vec::new();
    for s in &spec.scalars {
        dims.push(Dim::Scalar(&s.name, s.evaluate()?));
    }
    for i in 0..spec.arrays.len() {
        dims.push(Dim::Array(i));
    }
    for t in &spec.tuning {
        dims.push(Dim::Tuning(&t.name, t.evaluate()?));
    }

    // Each constraint is checked as soon as the last dimension it mentions is bound.
    let dim_index = |name: &str, is_size: bool| -> usize {
        let s = spec.scalars.len();
        let a = spec.arrays.len();
        if is_size {
            return s + spec.arrays.iter().position(|d| d.name == name).unwrap_or(0);
        }
        if let Some(i) = spec.scalars.iter().position(|d| d.name == name) {
            return i;
        }
        s + a + spec.tuning.iter().position(|d| d.name == name).unwrap_or(0)
    };
    let mut checks: Vec<Vec<usize>> = vec![Vec::new(); dims.len() + 1];
    for (ci, c) in spec.constraints.iter().enumerate() {
        let mut depth = 0usize;
        c.expr.for_each_ref(&mut |r| {
            let d = match r {
                super::Expr::Name(n) => dim_index(n, false) + 1,
                super::Expr::Size(a) => dim_index(a, true) + 1,
                _ => 0,
            };
            depth = depth.max(d);
        });
        checks[depth].push(ci);
    }

    let mut out = Vec::new();
    let mut cur = ExecutionParams::default();
    let mut env = Bindings::new();
    if passes(spec, &checks[0], &env)? {
        walk(spec, &dims, &checks, 0, &mut cur, &mut env, &mut out)?;
    }
    Ok(out)
}

fn passes(spec: &InputSpec, idx: &[usize], env: &Bindings) -> Result<bool, SpecError> {
    for &i in idx {
        if !spec.constraints[i].expr.eval_bool(env)? {
            return Ok(false);
        }
    }
    Ok(true)
}

fn walk(
    spec: &InputSpec,
    dims: &[Dim<'_>],
    checks: &[Vec<usize>],
    level: usize,
    cur: &mut ExecutionParams,
    env: &mut Bindings,
    out: &mut Vec<ExecutionParams>,
) -> Result<(), SpecError> {
    if level == dims.len() {
        out.push(cur.clone());
        return Ok(());
    }
    match &dims[level] {
        Dim::Scalar(name, values) => {
            for v in values {
                cur.scalar_values.insert((*name).to_owned(), *v);
                if let Some(i) = v.as_int() {
                    env.set(name, i);
                }
                if passes(spec, &checks[level + 1], env)? {
                    walk(spec, dims, checks, level + 1, cur, env, out)?;
                }
            }
            cur.scalar_values.shift_remove(*name);
            env.remove(name);
        }
        Dim::Array(i) => {
            let decl = &spec.arrays[*i];
            let sizes = decl.sizes.eval_ints(env)?;
            if sizes.is_empty() {
                return Err(SpecError::Evaluation(format!("array `{}` has no candidate size", decl.name)));
            }
            let key = format!("{}.size", decl.name);
            for s in sizes {
                if s <= 0 {
                    return Err(SpecError::Evaluation(format!(
                        "array `{}` evaluates to non-positive size {s}",
                        decl.name
                    )));
                }
                cur.array_sizes.insert(decl.name.clone(), s as u64);
                env.set(&key, s);
                if passes(spec, &checks[level + 1], env)? {
                    walk(spec, dims, checks, level + 1, cur, env, out)?;
                }
            }
            cur.array_sizes.shift_remove(&decl.name);
            env.remove(&key);
        }
        Dim::Tuning(name, values) => {
            for v in values {
                cur.tuning_values.insert((*name).to_owned(), *v);
                env.set(name, *v);
                if passes(spec, &checks[level + 1], env)? {
                    walk(spec, dims, checks, level + 1, cur, env, out)?;
                }
            }
            cur.tuning_values.shift_remove(*name);
            env.remove(name);
        }
    }
    Ok(())
}

/// Distinct input keys in enumeration order, each paired with its first valid
/// execution point (the lowest tuning values that satisfy the constraints).
pub fn enumerate_input_keys(spec: &InputSpec) -> Result<Vec<ExecutionParams>, SpecError> {
    let all = enumerate_execution_params(spec)?;
    let mut seen: Vec<InputKey> = Vec::new();
    let mut out = Vec::new();
    for p in all {
        let k = p.input_key();
        if !seen.contains(&k) {
            seen.push(k);
            out.push(p);
        }
    }
    Ok(out)
}

/// Coverage-first sampling without replacement over `entries`.
///
/// For every scalar, an entry at its minimum and at its maximum is taken first
/// (while budget remains); the rest is filled uniformly. Returned indices are
/// ascending.
pub fn sample_indices(spec: &InputSpec, entries: &[ExecutionParams], budget: usize, seed: u64) -> Vec<usize> {
    if budget >= entries.len() {
        return (0..entries.len()).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = BTreeSet::new();
    for s in &spec.scalars {
        let values: Vec<ScalarValue> = entries.iter().filter_map(|e| e.scalar_values.get(&s.name).copied()).collect();
        let Some(min) = values.iter().copied().min_by(|a, b| a.total_cmp(b)) else { continue };
        let max = values.iter().copied().max_by(|a, b| a.total_cmp(b)).unwrap_or(min);
        let targets = if min == max { vec![min] } else { vec![min, max] };
        for target in targets {
            if chosen.len() >= budget {
                break;
            }
            let hit = |i: &usize| entries[*i].scalar_values.get(&s.name) == Some(&target);
            if chosen.iter().any(hit) {
                continue;
            }
            let cands: Vec<usize> = (0..entries.len()).filter(|i| hit(i) && !chosen.contains(i)).collect();
            if !cands.is_empty() {
                chosen.insert(cands[rng.random_range(0..cands.len())]);
            }
        }
    }
    let rest: Vec<usize> = (0..entries.len()).filter(|i| !chosen.contains(i)).collect();
    let need = budget - chosen.len();
    for j in index::sample(&mut rng, rest.len(), need) {
        chosen.insert(rest[j]);
    }
    chosen.into_iter().collect()
}

/// `min(budget, |space|)` distinct valid execution points, reproducible from `seed`.
pub fn sample_execution_params(spec: &InputSpec, budget: usize, seed: u64) -> Result<Vec<ExecutionParams>, SpecError> {
    let budget = budget.max(1);
    let all = enumerate_execution_params(spec)?;
    Ok(sample_indices(spec, &all, budget, seed).into_iter().map(|i| all[i].clone()).collect())
}
