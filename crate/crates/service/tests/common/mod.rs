#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use peak_service::config::{LlmSettings, SessionConfig};
use peak_service::session::SeedFiles;

pub fn catalog_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../catalog")
}

pub fn seed_dir() -> PathBuf {
    catalog_dir().join("examples/matmul-cpu")
}

pub fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("peak-build-cache")
}

pub fn seed_files() -> SeedFiles {
    let d = seed_dir();
    SeedFiles { spec: d.join("spec.pspec"), device: d.join("device.src"), host: d.join("host.src"), macros: Some(d.join("macros.src")) }
}

/// Mock-backed configuration with the given `bundle:variant` overrides.
pub fn mock_config(variants: &[&str]) -> SessionConfig {
    let llm = LlmSettings::Mock {
        fixtures: catalog_dir().join("mock/cpu-ref"),
        variants: variants.iter().map(|v| v.to_string()).collect(),
    };
    let mut c = SessionConfig::new("cpu-ref", llm, catalog_dir().join("transformations"));
    c.build_cache = Some(cache_dir());
    c
}

pub fn peak(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_peak"))
        .arg("--root")
        .arg(root)
        .args(args)
        .env_remove("PEAK_ROOT")
        .output()
        .expect("run peak")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// `peak init` the matmul seed under `root` with the given config file.
pub fn cli_init(root: &Path, config: Option<&SessionConfig>) -> Output {
    let d = seed_dir();
    let s = |p: PathBuf| p.to_string_lossy().into_owned();
    let mut args = vec![
        "init".to_owned(),
        s(d.join("spec.pspec")),
        s(d.join("device.src")),
        s(d.join("host.src")),
        s(d.join("macros.src")),
    ];
    match config {
        Some(c) => {
            let path = root.with_extension("config.json");
            std::fs::write(&path, serde_json::to_vec(c).unwrap()).unwrap();
            args.extend(["--config".into(), s(path)]);
        }
        None => args.extend([
            "--catalog".into(),
            s(catalog_dir().join("transformations")),
            "--mock".into(),
            s(catalog_dir().join("mock/cpu-ref")),
            "--build-cache".into(),
            s(cache_dir()),
        ]),
    }
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    peak(root, &args)
}

pub fn error_code(o: &Output) -> Option<String> {
    stderr(o).lines().find_map(|l| l.strip_prefix("PEAK_ERROR ").map(|r| r.split(' ').next().unwrap_or("").to_owned()))
}
