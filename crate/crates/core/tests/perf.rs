mod common;

use std::sync::Arc;

use indexmap::IndexMap;
use peak_core::backend::TimingPolicy;
use peak_core::perf::{
    default_input_key, speedup, FlopsModel, MeasureFn, Measurement, PerfError, PerfEvaluator, PerfQuery, RankedPoint,
    Strategy, TuneJob, TunerPlugin, TunerRegistry,
};

use common::*;

fn fast() -> TimingPolicy {
    TimingPolicy::new(0, 1)
}

fn ranking_oracle(points: &[(IndexMap<String, i64>, f64)]) -> Vec<RankedPoint> {
    // Selection by repeated minimum: first index wins among equal times.
    let mut left: Vec<(IndexMap<String, i64>, f64)> = points.to_vec();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut m = 0;
        for i in 1..left.len() {
            if left[i].1 < left[m].1 {
                m = i;
            }
        }
        let (tuning, t) = left.remove(m);
        out.push(RankedPoint { tuning, mean_time_ms: t });
    }
    out
}

#[test]
fn planted_optimum_exhaustive() {
    let reg = registry();
    let backend = reg.get("cpu-ref").unwrap();
    let tuners = TunerRegistry::new();
    let eval = PerfEvaluator::new(backend.as_ref(), &tuners);
    let ctx = monotone_ctx(8);
    let key = default_input_key(ctx.spec()).unwrap().unwrap();
    for _ in 0..3 {
        let r = eval.evaluate(&ctx, &PerfQuery::exhaustive(key.clone()).with_policy(fast()), None).unwrap();
        assert_eq!(r.best.tuning["T"], 1);
        assert_eq!(r.best.mean_time_ms, monotone_time(1));
        let ts: Vec<i64> = r.top_k.iter().map(|p| p.tuning["T"]).collect();
        assert_eq!(ts, (1..=8).collect::<Vec<_>>());
        assert_eq!((r.attempted, r.evaluated, r.pruned_invalid), (8, 8, 0));
        assert_eq!(r.best, r.top_k[0]);
    }
}

#[test]
fn top_k_is_sorted_prefix_with_enumeration_tiebreak() {
    let reg = registry();
    let backend = reg.get("cpu-ref").unwrap();
    let tuners = TunerRegistry::new();
    let eval = PerfEvaluator::new(backend.as_ref(), &tuners);
    let ctx = planted_ctx(
        "tune A: i32 in range(1, 21)\ntune B: i32 in range(1, 17)\n",
        "32",
        "(1.0 + ((@TUNE(A) * 37 + @TUNE(B) * 11) % 23) * 0.5)",
    );
    let key = default_input_key(ctx.spec()).unwrap().unwrap();
    let r = eval.evaluate(&ctx, &PerfQuery::exhaustive(key).with_policy(fast()).with_keep_top(128), None).unwrap();
    assert_eq!(r.attempted, 320);
    assert_eq!(r.top_k.len(), 128);

    let mut expected = Vec::new();
    for a in 1..=20i64 {
        for b in 1..=16i64 {
            let t = 1.0 + ((a * 37 + b * 11) % 23) as f64 * 0.5;
            expected.push(([("A".to_owned(), a), ("B".to_owned(), b)].into_iter().collect(), t));
        }
    }
    let oracle = ranking_oracle(&expected);
    assert_eq!(r.ranking(), oracle);
    assert_eq!(r.top_k, oracle[..128].to_vec());

    let csv = r.to_csv().unwrap();
    assert_eq!(csv.lines().next(), Some("A,B,mean_ms"));
    assert_eq!(csv.lines().count(), 321);
}

#[test]
fn fully_invalid_space() {
    let reg = registry();
    let backend = reg.get("cpu-ref").unwrap();
    let tuners = TunerRegistry::new();
    let eval = PerfEvaluator::new(backend.as_ref(), &tuners);
    let ctx = planted_ctx("tune BLOCK: i32 in {2048, 4096}\n", "@TUNE(BLOCK)", "1.0");
    let key = default_input_key(ctx.spec()).unwrap().unwrap();
    let err = eval.evaluate(&ctx, &PerfQuery::exhaustive(key).with_policy(fast()), None).unwrap_err();
    assert!(matches!(err, PerfError::NoValidConfiguration(ref m) if m.contains("2 invalid_config")), "{err}");
}

#[test]
fn invalid_points_are_pruned_and_counted() {
    let reg = registry();
    let backend = reg.get("cpu-ref").unwrap();
    let tuners = TunerRegistry::new();
    let eval = PerfEvaluator::new(backend.as_ref(), &tuners);
    let ctx = planted_ctx("tune BLOCK: i32 in {512, 1024, 2048}\n", "@TUNE(BLOCK)", "(4096.0 / @TUNE(BLOCK))");
    let key = default_input_key(ctx.spec()).unwrap().unwrap();
    let flops = FlopsModel::new("2*n*n*n").unwrap();
    let r = eval.evaluate(&ctx, &PerfQuery::exhaustive(key).with_policy(fast()).with_confirm_best(2), Some(&flops)).unwrap();
    assert_eq!((r.attempted, r.evaluated, r.pruned_invalid), (3, 2, 1));
    assert_eq!(r.best.tuning["BLOCK"], 1024);
    assert_eq!(r.flops_per_run, Some(2 * 64 * 64 * 64));
    let g = r.best_gflops.unwrap();
    let back = g * (r.best.mean_time_ms / 1e3) * 1e9;
    assert!((back - (2 * 64 * 64 * 64) as f64).abs() < 1e-6, "{back}");
    let c = r.confirmed.clone().unwrap();
    assert_eq!(c.run_means_ms, vec![4.0, 4.0]);

    let json = serde_json::to_string(&r).unwrap();
    let back: peak_core::perf::PerfReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
    assert_eq!(speedup(&r, &back).unwrap(), 1.0);
}

#[test]
fn random_strategy_never_beats_exhaustive() {
    let reg = registry();
    let backend = reg.get("cpu-ref").unwrap();
    let tuners = TunerRegistry::new();
    let eval = PerfEvaluator::new(backend.as_ref(), &tuners);
    let ctx = monotone_ctx(16);
    let key = default_input_key(ctx.spec()).unwrap().unwrap();
    let full = eval.evaluate(&ctx, &PerfQuery::exhaustive(key.clone()).with_policy(fast()), None).unwrap();
    for seed in 0..4 {
        let q = PerfQuery::new(key.clone(), Strategy::Random { budget: 5, seed }).with_policy(fast());
        let r = eval.evaluate(&ctx, &q, None).unwrap();
        assert_eq!(r.attempted, 5);
        assert!(full.best.mean_time_ms <= r.best.mean_time_ms);
        let again = eval.evaluate(&ctx, &q, None).unwrap();
        assert_eq!(again.points.iter().map(|p| &p.tuning).collect::<Vec<_>>(), r.points.iter().map(|p| &p.tuning).collect::<Vec<_>>());
    }
}

#[test]
fn random_search_saturates_and_sweep_improves_with_budget() {
    let reg = registry();
    let backend = reg.get("cpu-ref").unwrap();
    let tuners = TunerRegistry::new();
    let eval = PerfEvaluator::new(backend.as_ref(), &tuners);
    let ctx = monotone_ctx(64);
    let key = default_input_key(ctx.spec()).unwrap().unwrap();

    let q = PerfQuery::new(key.clone(), Strategy::Tuner { plugin: "random-search".into(), iteration_budget: 64, repeats: 2, seed: 3 })
        .with_policy(fast());
    let r = eval.evaluate(&ctx, &q, None).unwrap();
    assert_eq!(r.best.tuning["T"], 1);
    let d = r.distribution.unwrap();
    assert_eq!((d.min_ms, d.max_ms, d.repeats), (monotone_time(1), monotone_time(1), 2));

    let rows = eval.tuner_sweep(&ctx, &key, "random-search", &[10, 50], 5, fast(), 100).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].mean_ms <= rows[0].mean_ms, "{rows:?}");
    assert!(rows.iter().all(|r| r.min_ms <= r.mean_ms && r.mean_ms <= r.max_ms && r.repeats == 5));

    let one = eval.tuner_sweep(&ctx, &key, "random-search", &[7], 1, fast(), 5).unwrap();
    assert_eq!(one[0].min_ms, one[0].mean_ms);
    assert_eq!(one[0].mean_ms, one[0].max_ms);

    let ex = eval.tuner_sweep(&ctx, &key, "exhaustive", &[64], 3, fast(), 0).unwrap();
    assert_eq!(ex[0].max_ms, monotone_time(1));
}

/// Proposes an out-of-domain value, a constraint violation, then a valid point.
struct Rogue;

impl TunerPlugin for Rogue {
    fn id(&self) -> &str {
        "rogue"
    }

    fn tune(&self, _job: &TuneJob, measure: &mut MeasureFn<'_>) -> Result<Option<IndexMap<String, i64>>, String> {
        let p = |a: i64, b: i64| -> IndexMap<String, i64> { [("A".to_owned(), a), ("B".to_owned(), b)].into_iter().collect() };
        assert_eq!(measure(&p(3, 1)), Measurement::Invalid);
        assert_eq!(measure(&p(4, 4)), Measurement::Invalid);
        assert_eq!(measure(&[("A".to_owned(), 1)].into_iter().collect()), Measurement::Invalid);
        assert!(matches!(measure(&p(2, 1)), Measurement::TimeMs(_)));
        assert_eq!(measure(&p(1, 1)), Measurement::BudgetExhausted);
        Ok(Some(p(2, 1)))
    }
}

#[test]
fn domain_guard_rejects_without_executing() {
    let reg = registry();
    let backend = reg.get("cpu-ref").unwrap();
    let mut tuners = TunerRegistry::new();
    tuners.register(Arc::new(Rogue)).unwrap();
    assert!(matches!(tuners.register(Arc::new(Rogue)), Err(PerfError::DuplicatePlugin(_))));
    let eval = PerfEvaluator::new(backend.as_ref(), &tuners);
    let ctx = planted_ctx(
        "tune A: i32 in {1, 2, 4}\ntune B: i32 in {1, 4}\nconstraint A * B <= 8\n",
        "32",
        "(1.0 * @TUNE(A) * @TUNE(B))",
    );
    let key = default_input_key(ctx.spec()).unwrap().unwrap();
    let q = PerfQuery::new(key, Strategy::Tuner { plugin: "rogue".into(), iteration_budget: 1, repeats: 1, seed: 0 }).with_policy(fast());
    let r = eval.evaluate(&ctx, &q, None).unwrap();
    assert_eq!(r.attempted, 1);
    assert_eq!(r.best.mean_time_ms, 2.0);
}

struct Broken;

impl TunerPlugin for Broken {
    fn id(&self) -> &str {
        "broken"
    }

    fn tune(&self, job: &TuneJob, measure: &mut MeasureFn<'_>) -> Result<Option<IndexMap<String, i64>>, String> {
        if job.seed % 2 == 1 {
            return Err("odd seed".into());
        }
        let p = job.raw_point(0);
        measure(&p);
        Ok(Some(p))
    }
}

#[test]
fn failed_repeats_are_excluded_and_counted() {
    let reg = registry();
    let backend = reg.get("cpu-ref").unwrap();
    let mut tuners = TunerRegistry::new();
    tuners.register(Arc::new(Broken)).unwrap();
    let eval = PerfEvaluator::new(backend.as_ref(), &tuners);
    let ctx = monotone_ctx(4);
    let key = default_input_key(ctx.spec()).unwrap().unwrap();
    let rows = eval.tuner_sweep(&ctx, &key, "broken", &[2], 4, fast(), 0).unwrap();
    assert_eq!((rows[0].repeats, rows[0].failed_repeats), (2, 2));
    assert!(matches!(eval.tuner_sweep(&ctx, &key, "nope", &[2], 1, fast(), 0), Err(PerfError::UnknownPlugin(_))));
}

#[test]
fn external_tuner_over_stdio() {
    if std::process::Command::new("python3").arg("--version").output().is_err() {
        eprintln!("python3 not available; skipping");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("tuner.py");
    std::fs::write(
        &script,
        r#"import json, sys
job = json.loads(sys.stdin.readline())["job"]
best, best_t = None, None
for v in reversed(job["params"][0]["values"]):
    print(json.dumps({"measure": {job["params"][0]["name"]: v}}), flush=True)
    reply = json.loads(sys.stdin.readline())
    if reply.get("exhausted"):
        break
    if "time_ms" in reply and (best_t is None or reply["time_ms"] < best_t):
        best, best_t = {job["params"][0]["name"]: v}, reply["time_ms"]
print(json.dumps({"best": best}), flush=True)
"#,
    )
    .unwrap();
    let manifest = dir.path().join("tuner.json");
    std::fs::write(&manifest, format!(r#"{{"id": "py-desc", "command": "python3 {}"}}"#, script.display())).unwrap();

    let reg = registry();
    let backend = reg.get("cpu-ref").unwrap();
    let mut tuners = TunerRegistry::new();
    tuners.load_manifest(&manifest).unwrap();
    let eval = PerfEvaluator::new(backend.as_ref(), &tuners);
    let ctx = monotone_ctx(8);
    let key = default_input_key(ctx.spec()).unwrap().unwrap();
    let q = PerfQuery::new(key, Strategy::Tuner { plugin: "py-desc".into(), iteration_budget: 3, repeats: 1, seed: 0 }).with_policy(fast());
    let r = eval.evaluate(&ctx, &q, None).unwrap();
    assert_eq!(r.attempted, 3);
    assert_eq!(r.best.tuning["T"], 6);
}
