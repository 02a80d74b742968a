mod common;

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use common::*;
use http_body_util::BodyExt;
use peak_service::api::{router, AppState};
use peak_service::config::SessionConfig;
use peak_service::jobs::{JobState, Jobs, JOURNAL_FILE};
use peak_service::session::{Access, Session};
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

struct Api {
    _tmp: TempDir,
    root: std::path::PathBuf,
    jobs: Arc<Jobs>,
    app: Router,
}

fn start(root: &Path) -> (Arc<Jobs>, Router) {
    let session = Arc::new(Session::open(root, Access::Write).unwrap());
    let jobs = Jobs::start(session.clone()).unwrap();
    (jobs.clone(), router(AppState { session, jobs }))
}

fn api(config: SessionConfig) -> Api {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("w");
    drop(Session::init(&root, config, &seed_files()).unwrap());
    let (jobs, app) = start(&root);
    Api { _tmp: tmp, root, jobs, app }
}

impl Api {
    async fn call(&self, method: Method, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", "application/json")
            .body(body.map_or_else(Body::empty, |b| Body::from(b.to_owned())))
            .unwrap();
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
        (status, value)
    }

    async fn get(&self, uri: &str) -> (StatusCode, Value) {
        self.call(Method::GET, uri, None).await
    }

    async fn post(&self, uri: &str, body: &str) -> (StatusCode, Value) {
        self.call(Method::POST, uri, Some(body)).await
    }

    /// Submit and block until the job is terminal.
    async fn run_job(&self, uri: &str, body: &str) -> Value {
        let (status, accepted) = self.post(uri, body).await;
        assert_eq!(status, StatusCode::ACCEPTED, "{accepted}");
        let id = accepted["job_id"].as_u64().unwrap();
        assert_eq!(accepted["status_url"], format!("/api/jobs/{id}"));
        let job = self.jobs.wait(id, Duration::from_secs(120)).unwrap();
        assert!(job.state.is_terminal());
        let (status, job) = self.get(&format!("/api/jobs/{id}")).await;
        assert_eq!(status, StatusCode::OK);
        job
    }
}

#[tokio::test]
async fn transform_job_adds_a_checkpoint() {
    let a = api(mock_config(&[]));
    let (_, list) = a.get("/api/checkpoints").await;
    assert_eq!(list["checkpoints"].as_array().unwrap().len(), 1);
    let seed = list["refs"]["seed"].as_str().unwrap().to_owned();

    let job = a.run_job("/api/checkpoints/seed/transform", r#"{"name":"refactor"}"#).await;
    assert_eq!(job["state"], "done", "{job}");
    assert_eq!(job["spec"]["kind"], "transform");
    let link = job["result_link"].as_str().unwrap().to_owned();

    let (status, detail) = a.get(&link).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(detail["checkpoint"]["parent"], seed.as_str());
    assert_eq!(detail["checkpoint"]["transformation_name"], "refactor");
    assert_eq!(detail["validation"]["verdict"], "pass");
    assert!(detail["perf"].is_null());
    let child = detail["checkpoint"]["id"].as_str().unwrap().to_owned();

    let (_, list) = a.get("/api/checkpoints").await;
    assert_eq!(list["checkpoints"].as_array().unwrap().len(), 2);
    assert_eq!(list["edges"], json!([{ "parent": seed, "child": child }]));

    let (status, region) = a.get(&format!("/api/checkpoints/{}/region/macros", &child[..10])).await;
    assert_eq!(status, StatusCode::OK);
    assert!(region["text"].as_str().unwrap().contains("GLOBAL_ROW"));

    let (_, jobs) = a.get("/api/jobs").await;
    assert_eq!(jobs.as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn evaluate_job_records_perf_and_feeds_the_trajectory() {
    let a = api(mock_config(&[]));
    let (_, t) = a.get("/api/trajectory?tip=seed").await;
    assert_eq!(t["code"], "MISSING_PERF_DATA");

    let body = r#"{"strategy":{"kind":"random","budget":3,"seed":5},"input":"n=16"}"#;
    let job = a.run_job("/api/checkpoints/seed/evaluate", body).await;
    assert_eq!(job["state"], "done", "{job}");
    assert_eq!(job["result"]["evaluated"], 3);

    let (_, detail) = a.get("/api/checkpoints/seed").await;
    assert_eq!(detail["perf"]["evaluated"], 3);
    assert_eq!(detail["refs"], json!(["seed"]));

    let (status, t) = a.get("/api/trajectory?tip=seed&reference_ms=1.0").await;
    assert_eq!(status, StatusCode::OK, "{t}");
    let steps = t["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 1);
    assert_eq!(steps[0]["cumulative_speedup"], 1.0);
    assert!(steps[0]["percent_of_reference"].as_f64().unwrap() > 0.0);

    // An empty body evaluates with the session default.
    let job = a.run_job("/api/checkpoints/seed/evaluate", "").await;
    assert_eq!(job["state"], "done", "{job}");
}

#[tokio::test]
async fn failed_transform_job_commits_nothing() {
    let a = api(mock_config(&["refactor:wrong-result"]));
    let job = a.run_job("/api/checkpoints/seed/transform", r#"{"name":"refactor"}"#).await;
    assert_eq!(job["state"], "failed");
    assert_eq!(job["error"]["code"], "TRANSFORM_FAILED");
    assert_eq!(job["result"]["outcome"]["status"], "exhausted_retries");
    assert!(job["result_link"].is_null());
    let (_, list) = a.get("/api/checkpoints").await;
    assert_eq!(list["checkpoints"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let a = api(mock_config(&[]));
    let cases = [
        (Method::GET, "/api/checkpoints/abcdef", None, StatusCode::NOT_FOUND, "UNKNOWN_CHECKPOINT"),
        (Method::GET, "/api/checkpoints/seed/region/kernel", None, StatusCode::UNPROCESSABLE_ENTITY, "INVALID_ARGUMENT"),
        (Method::GET, "/api/jobs/99", None, StatusCode::NOT_FOUND, "UNKNOWN_JOB"),
        (Method::GET, "/api/jobs/x", None, StatusCode::UNPROCESSABLE_ENTITY, "INVALID_ARGUMENT"),
        (Method::GET, "/api/nowhere", None, StatusCode::NOT_FOUND, "NOT_FOUND"),
        (Method::POST, "/api/checkpoints/seed/transform", Some("{"), StatusCode::UNPROCESSABLE_ENTITY, "INVALID_ARGUMENT"),
        (Method::POST, "/api/checkpoints/seed/transform", Some(r#"{"nme":"refactor"}"#), StatusCode::UNPROCESSABLE_ENTITY, "INVALID_ARGUMENT"),
        (Method::POST, "/api/checkpoints/seed/transform", Some(r#"{"name":"nope"}"#), StatusCode::NOT_FOUND, "UNKNOWN_TRANSFORMATION"),
        (Method::POST, "/api/checkpoints/ffff/transform", Some(r#"{"name":"refactor"}"#), StatusCode::NOT_FOUND, "UNKNOWN_CHECKPOINT"),
        (Method::POST, "/api/checkpoints/seed/evaluate", Some(r#"{"strategy":{"kind":"annealing"}}"#), StatusCode::UNPROCESSABLE_ENTITY, "INVALID_ARGUMENT"),
        (Method::POST, "/api/refs", Some(r#"{"name":"has space","id":"seed"}"#), StatusCode::UNPROCESSABLE_ENTITY, "INVALID_ARGUMENT"),
        (Method::GET, "/api/diff?a=seed", None, StatusCode::UNPROCESSABLE_ENTITY, "INVALID_ARGUMENT"),
        (Method::GET, "/api/trajectory?tip=seed&reference_ms=fast", None, StatusCode::UNPROCESSABLE_ENTITY, "INVALID_ARGUMENT"),
    ];
    for (method, uri, body, status, code) in cases {
        let (got, value) = a.call(method, uri, body).await;
        assert_eq!(got, status, "{uri}: {value}");
        assert_eq!(value["code"], code, "{uri}");
        assert!(value["message"].as_str().is_some_and(|m| !m.is_empty()));
    }
    // Rejected requests never become jobs.
    assert_eq!(a.get("/api/jobs").await.1, json!([]));
}

#[tokio::test]
async fn diff_refs_and_catalog() {
    let a = api(mock_config(&[]));
    let (status, d) = a.get("/api/diff?a=seed&b=seed").await;
    assert_eq!(status, StatusCode::OK);
    assert!(d["regions"].as_array().unwrap().iter().all(|r| r["unified"] == ""));
    assert_eq!(d["spec"], "");

    let (status, set) = a.post("/api/refs", r#"{"name":"baseline","id":"seed"}"#).await;
    assert_eq!(status, StatusCode::OK);
    let (_, refs) = a.get("/api/refs").await;
    assert_eq!(refs["baseline"], set["id"]);
    assert_eq!(refs["seed"], set["id"]);
    let (status, _) = a.get("/api/checkpoints/baseline").await;
    assert_eq!(status, StatusCode::OK);

    let (_, catalog) = a.get("/api/transformations").await;
    let catalog = catalog.as_array().unwrap();
    assert_eq!(catalog.len(), 14);
    let tb = catalog.iter().find(|t| t["name"] == "tb-tiling").unwrap();
    assert_eq!(tb["supported"], true);
    assert_eq!(tb["new_tuning"], json!(["TILE_K_SIZE"]));
    assert!(catalog.iter().any(|t| t["supported"] == false));
}

#[tokio::test]
async fn journal_replay_marks_unfinished_jobs_interrupted() {
    let a = api(mock_config(&[]));
    let done = a.run_job("/api/checkpoints/seed/transform", r#"{"name":"refactor"}"#).await;
    assert_eq!(done["state"], "done");
    a.jobs.shutdown();
    let Api { _tmp, root, app, jobs } = a;
    drop(app);
    drop(jobs);

    // Simulate a crash while job 2 was running, plus a torn final line.
    let mut running = done.clone();
    running["id"] = json!(2);
    running["state"] = json!("running");
    running["finished_at"] = Value::Null;
    running["result"] = Value::Null;
    running["result_link"] = Value::Null;
    let mut journal = std::fs::read_to_string(root.join(JOURNAL_FILE)).unwrap();
    journal.push_str(&format!("{running}\n{{\"id\":3,\"sta"));
    std::fs::write(root.join(JOURNAL_FILE), journal).unwrap();

    let deadline = std::time::Instant::now() + Duration::from_secs(10);
    let (jobs, app) = loop {
        // The previous worker releases the writer lock once it sees the queue close.
        match Session::open(&root, Access::Write) {
            Ok(s) => {
                drop(s);
                break start(&root);
            }
            Err(_) if std::time::Instant::now() < deadline => std::thread::sleep(Duration::from_millis(20)),
            Err(e) => panic!("{e}"),
        }
    };
    let again = Api { _tmp, root, jobs, app };
    let (_, j1) = again.get("/api/jobs/1").await;
    assert_eq!(j1["state"], "done");
    let j2 = again.jobs.get(2).unwrap();
    assert_eq!(j2.state, JobState::Failed);
    assert_eq!(j2.error.unwrap().code, "INTERRUPTED");

    let (status, accepted) = again.post("/api/checkpoints/seed/evaluate", r#"{"strategy":{"kind":"random","budget":1,"seed":0}}"#).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(accepted["job_id"], 3);
}

#[tokio::test]
async fn cli_and_api_produce_identical_artifacts() {
    let a = api(mock_config(&[]));
    let job = a.run_job("/api/checkpoints/seed/transform", r#"{"name":"refactor"}"#).await;
    let id = job["result"]["checkpoint"]["id"].as_str().unwrap().to_owned();

    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("w");
    assert!(cli_init(&root, Some(&mock_config(&[]))).status.success());
    let o = peak(&root, &["transform", "seed", "refactor"]);
    assert!(o.status.success(), "{}", stderr(&o));

    for file in ["context.bin", "validation.json"] {
        let via_api = std::fs::read(a.root.join("checkpoints").join(&id).join(file)).unwrap();
        let via_cli = std::fs::read(root.join("checkpoints").join(&id).join(file)).unwrap();
        assert!(via_api == via_cli, "{file} differs");
    }
}
