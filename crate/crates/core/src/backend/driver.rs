//! Driver table generation and program rendering.

use std::collections::HashMap;
use std::fmt::Write as _;

use super::{BackendDescriptor, BackendError, TimingPolicy};
use crate::context::KernelContext;
use crate::spec::{ArrayInit, Dtype, ExecutionParams, InputSpec, ScalarValue};
use crate::template::render;

fn dtype_code(d: Dtype) -> &'static str {
    match d {
        Dtype::I32 => "PEAK_I32",
        Dtype::F32 => "PEAK_F32",
        Dtype::F16 => "PEAK_F16",
    }
}

fn scalar_literal(v: &ScalarValue) -> String {
    match v {
        ScalarValue::I32(i) => i.to_string(),
        ScalarValue::F32(f) => format!("{f:e}f"),
        ScalarValue::F16(b) => format!("{:e}f", half::f16::from_bits(*b).to_f32()),
    }
}

fn check_params(spec: &InputSpec, params: &ExecutionParams) -> Result<(), BackendError> {
    let missing = |what: &str, name: &str| Err(BackendError::BadParams(format!("no value for {what} `{name}`")));
    for s in &spec.scalars {
        if !params.scalar_values.contains_key(&s.name) {
            return missing("scalar", &s.name);
        }
    }
    for a in &spec.arrays {
        if !params.array_sizes.contains_key(&a.name) {
            return missing("array", &a.name);
        }
    }
    for t in &spec.tuning {
        if !params.tuning_values.contains_key(&t.name) {
            return missing("tuning parameter", &t.name);
        }
    }
    Ok(())
}

/// The generated table section: timing counts, the capture flag, one
/// `PEAK_ARRAYS` entry per array `PEAK_X_(name, ctype, count, dtype, init, seed,
/// is_output)`, and `PEAK_HOST_CALL(F)` invoking `host_launch` with every array
/// (through `F`) followed by every scalar, both in declaration order.
pub fn generate_tables(
    desc: &BackendDescriptor,
    spec: &InputSpec,
    params: &ExecutionParams,
    policy: &TimingPolicy,
    capture_outputs: bool,
) -> Result<String, BackendError> {
    check_params(spec, params)?;
    let mut out = String::new();
    writeln!(out, "#define PEAK_WARMUP {}", policy.warmup_runs).unwrap();
    writeln!(out, "#define PEAK_MEASURED {}", policy.measured_runs.max(1)).unwrap();
    writeln!(out, "#define PEAK_CAPTURE {}", u8::from(capture_outputs)).unwrap();
    let mut rows = Vec::new();
    for a in &spec.arrays {
        let ctype =
            desc.types.get(&a.elem_dtype).ok_or_else(|| BackendError::UnsupportedDtype(a.elem_dtype, desc.id.clone()))?;
        let (kind, seed) = match a.init {
            ArrayInit::Zeros => ("PEAK_INIT_ZEROS", 0),
            ArrayInit::Ones => ("PEAK_INIT_ONES", 0),
            ArrayInit::Random { seed } => ("PEAK_INIT_RANDOM", seed),
        };
        rows.push(format!(
            "    PEAK_X_({}, {}, {}ULL, {}, {}, {}ULL, {})",
            a.name,
            ctype,
            params.array_sizes[&a.name],
            dtype_code(a.elem_dtype),
            kind,
            seed,
            u8::from(a.is_output)
        ));
    }
    if rows.is_empty() {
        out.push_str("#define PEAK_ARRAYS(PEAK_X_)\n");
    } else {
        out.push_str("#define PEAK_ARRAYS(PEAK_X_) \\\n");
        out.push_str(&rows.join(" \\\n"));
        out.push('\n');
    }
    let mut args: Vec<String> = spec.arrays.iter().map(|a| format!("PEAK_ARG_FN_({})", a.name)).collect();
    for s in &spec.scalars {
        if !desc.types.contains_key(&s.dtype) {
            return Err(BackendError::UnsupportedDtype(s.dtype, desc.id.clone()));
        }
        args.push(scalar_literal(&params.scalar_values[&s.name]));
    }
    writeln!(out, "#define PEAK_HOST_CALL(PEAK_ARG_FN_) host_launch({})", args.join(", ")).unwrap();
    Ok(out)
}

pub(super) fn render_program(
    desc: &BackendDescriptor,
    template: &str,
    ctx: &KernelContext,
    params: &ExecutionParams,
    policy: &TimingPolicy,
    capture_outputs: bool,
) -> Result<String, BackendError> {
    if ctx.backend() != desc.id {
        return Err(BackendError::BackendMismatch { ctx: ctx.backend().to_owned(), backend: desc.id.clone() });
    }
    let tables = generate_tables(desc, ctx.spec(), params, policy, capture_outputs)?;
    let regions = ctx.substitute_tuning(params)?;
    let vars: HashMap<&str, String> = HashMap::from([
        ("macros", regions.macros),
        ("device", regions.device),
        ("host", regions.host),
        ("tables", tables),
        ("kernel_name", ctx.kernel_name().to_owned()),
        ("max_threads", desc.max_threads_per_block.to_string()),
        ("max_shared_bytes", desc.max_shared_bytes.to_string()),
        ("warp_size", desc.warp_size.to_string()),
    ]);
    Ok(render(template, &vars)?)
}
