#![allow(dead_code)]

pub mod specgen;

use std::path::PathBuf;

use peak_core::backend::BackendRegistry;
use peak_core::context::KernelContext;
use peak_core::spec::parse_spec;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn catalog_dir() -> PathBuf {
    repo_root().join("catalog")
}

pub fn seed_dir() -> PathBuf {
    catalog_dir().join("examples/matmul-cpu")
}

pub fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("peak-build-cache")
}

pub fn registry() -> BackendRegistry {
    BackendRegistry::builtin_with_cache(&cache_dir())
}

pub fn seed_ctx() -> KernelContext {
    KernelContext::read_bundle(&seed_dir()).unwrap()
}

pub const NAIVE_DEVICE: &str = "__global__ void matmul(const float* A, const float* B, float* C, int n) {
    int row = blockIdx.y * blockDim.y + threadIdx.y;
    int col = blockIdx.x * blockDim.x + threadIdx.x;
    if (row >= n || col >= n) return;
    float acc = 0.0f;
    for (int k = 0; k < n; ++k) acc += A[row * n + k] * B[k * n + col];
    C[row * n + col] = acc;
}
";

pub const NAIVE_HOST: &str = "void host_launch(float* A, float* B, float* C, int n) {
    dim3 block = dim3_make(@TUNE(BLOCK_X), @TUNE(BLOCK_Y), 1);
    dim3 grid = dim3_make((n + block.x - 1) / block.x, (n + block.y - 1) / block.y, 1);
    PEAK_LAUNCH(matmul, grid, block, A, B, C, n);
}
";

pub fn matmul_spec(sizes: &str, max_block: u32, max_threads: u32) -> String {
    format!(
        "input n: i32 in {{{sizes}}}
input A: array<f32> size in {{n * n}} init random(1)
input B: array<f32> size in {{n * n}} init random(2)
output C: array<f32> size in {{n * n}} init zeros
tune BLOCK_X: i32 in pow2(1..={max_block})
tune BLOCK_Y: i32 in pow2(1..={max_block})
constraint BLOCK_X * BLOCK_Y <= {max_threads}
"
    )
}

pub fn matmul_ctx(device: &str, host: &str, macros: &str, spec: &str) -> KernelContext {
    KernelContext::new(device, host, macros, parse_spec(spec).unwrap(), "cpu-ref", "matmul").unwrap()
}

/// Row-major n×n product accumulated in f32 in ascending k, the same order as
/// the naive kernel.
pub fn matmul_oracle(a: &[f32], b: &[f32], n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0f32;
            for k in 0..n {
                acc += a[i * n + k] * b[k * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

pub fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

pub fn within(got: f32, want: f32, abs: f32, rel: f32) -> bool {
    (got - want).abs() <= abs + rel * want.abs()
}

/// Shared-memory tiled matmul in the blockwise launch idiom.
pub const TILED_MACROS: &str = "#define BM @TUNE(BLOCK_Y)
#define BN @TUNE(BLOCK_X)
#define BK @TUNE(TILE_K_SIZE)
";

pub const TILED_DEVICE: &str = "__global__ void matmul(const float* A, const float* B, float* C, int n) {
    PEAK_SHARED(float, As, BM * BK);
    PEAK_SHARED(float, Bs, BK * BN);
    PEAK_PRIVATE(float, acc, 1);
    PEAK_FOR_EACH_THREAD { PEAK_P(acc)[0] = 0.0f; }
    for (int k0 = 0; k0 < n; k0 += BK) {
        PEAK_FOR_EACH_THREAD {
            for (int i = PEAK_TID; i < BM * BK; i += BM * BN) {
                int r = blockIdx.y * BM + i / BK, c = k0 + i % BK;
                As[i] = (r < n && c < n) ? A[r * n + c] : 0.0f;
            }
            for (int i = PEAK_TID; i < BK * BN; i += BM * BN) {
                int r = k0 + i / BN, c = blockIdx.x * BN + i % BN;
                Bs[i] = (r < n && c < n) ? B[r * n + c] : 0.0f;
            }
        }
        PEAK_BARRIER();
        PEAK_FOR_EACH_THREAD {
            float part = 0.0f;
            for (int kk = 0; kk < BK; ++kk) part += As[threadIdx.y * BK + kk] * Bs[kk * BN + threadIdx.x];
            PEAK_P(acc)[0] += part;
        }
        PEAK_BARRIER();
    }
    PEAK_FOR_EACH_THREAD {
        int row = blockIdx.y * BM + threadIdx.y, col = blockIdx.x * BN + threadIdx.x;
        if (row < n && col < n) C[row * n + col] = PEAK_P(acc)[0];
    }
}
";

pub const TILED_HOST: &str = "void host_launch(float* A, float* B, float* C, int n) {
    dim3 block = dim3_make(BN, BM, 1);
    dim3 grid = dim3_make((n + BN - 1) / BN, (n + BM - 1) / BM, 1);
    PEAK_LAUNCH_BLOCKWISE(matmul, grid, block, A, B, C, n);
}
";

pub const PLANTED_DEVICE: &str = "__global__ void planted(float* out, int n) {
    int i = blockIdx.x * blockDim.x + threadIdx.x;
    if (i < n) out[i] = (float)i;
}
";

/// A context whose reported launch time is `time_expr` (a C expression over
/// `@TUNE(..)` placeholders) and whose block width is `block`.
pub fn planted_ctx(tuning: &str, block: &str, time_expr: &str) -> KernelContext {
    let host = format!(
        "static volatile int peak_dummy_;
void host_launch(float* out, int n) {{
    for (int i = 0; i < {time_expr}; ++i) peak_dummy_ += i;
    dim3 block = dim3_make({block}, 1, 1);
    dim3 grid = dim3_make((n + block.x - 1) / block.x, 1, 1);
    PEAK_LAUNCH(planted, grid, block, out, n);
    peak_planted_time_ms({time_expr});
}}
"
    );
    let spec = format!("input n: i32 in {{64}}\noutput out: array<f32> size in {{n}}\n{tuning}");
    KernelContext::new(PLANTED_DEVICE, &host, "", parse_spec(&spec).unwrap(), "cpu-ref", "planted").unwrap()
}

/// Monotone landscape: `T` in 1..=max, time 0.5 + 0.25*T ms.
pub fn monotone_ctx(max: i64) -> KernelContext {
    planted_ctx(&format!("tune T: i32 in range(1, {})\n", max + 1), "32", "(0.5 + 0.25 * @TUNE(T))")
}

pub fn monotone_time(t: i64) -> f64 {
    0.5 + 0.25 * t as f64
}

/// Distinct cheap context number `i`: a planted kernel whose reported time is
/// `i + 1` ms. Nothing is compiled until it is run.
pub fn numbered_ctx(i: usize) -> KernelContext {
    planted_ctx("tune B: i32 in {32}\n", "@TUNE(B)", &format!("{}.0", i + 1))
}

/// A context whose single launch reports `ms` milliseconds.
pub fn timed_ctx(ms: f64) -> KernelContext {
    planted_ctx("tune B: i32 in {32}\n", "@TUNE(B)", &format!("{ms:?}"))
}
