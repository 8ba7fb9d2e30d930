use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use chrono::TimeDelta;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use jobwatch_core::adapter::{AccountingRecord, JobStatus};
use jobwatch_core::analytics::parse_rules;
use jobwatch_core::connection::keystore::MIN_ITERATIONS;
use jobwatch_core::gateway::{GatewayConfig, LimiterConfig};
use jobwatch_core::poller::PollConfig;
use jobwatch_core::sim::SimConfig;
use jobwatch_core::stack::SimStack;
use jobwatch_core::store::JobRecord;
use jobwatch_server::api::AnalyticsSettings;
use jobwatch_server::auth::{
    sign_assertion, token_digest, AssertionClaims, AssertionProvider, Authenticator, LocalTokenProvider,
    SessionStore,
};
use jobwatch_server::{router, AppState};

const SECRET: &[u8] = b"bridge secret";
const SESSION_TTL: i64 = 3600;

struct Harness {
    sim: Arc<SimStack>,
    app: Router,
    _dir: tempfile::TempDir,
}

fn token_of(user: &str) -> String {
    format!("token-of-{user}")
}

fn harness(threshold: u32) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let gateway = GatewayConfig {
        limiter: LimiterConfig {
            threshold,
            ..LimiterConfig::default()
        },
        ..GatewayConfig::default()
    };
    let sim = SimConfig {
        queue_delay: (1, 1),
        run_duration: (600, 600),
        failure_rate: 0.0,
        warning_rate: 0.0,
        ..SimConfig::default()
    };
    let sim = Arc::new(SimStack::new(sim, gateway, PollConfig::default(), dir.path(), MIN_ITERATIONS, &[]).unwrap());
    let digests: BTreeMap<String, String> = ["alice", "bob", "root"]
        .iter()
        .map(|u| (u.to_string(), hex::encode(token_digest(&token_of(u)))))
        .collect();
    let auth = Authenticator::default()
        .with(LocalTokenProvider::from_hex(&digests).unwrap())
        .with(AssertionProvider::new(SECRET.to_vec(), TimeDelta::seconds(300)));
    let rules = parse_rules(
        r#"
[[rules]]
name = "tool"
pattern = '^(?P<tool>[a-z]+)_(?P<reads>[0-9]+)$'
captures = { tool = "tool", reads = "reads" }
numericKeys = ["reads"]
"#,
    )
    .unwrap();
    let state = AppState::for_sim(sim.clone(), auth, SessionStore::new(TimeDelta::seconds(SESSION_TTL)))
        .with_admins(["root".to_string()])
        .with_analytics(AnalyticsSettings {
            rules,
            ..AnalyticsSettings::default()
        });
    Harness {
        app: router(Arc::new(state)),
        sim,
        _dir: dir,
    }
}

impl Harness {
    async fn call(&self, method: Method, uri: &str, auth: Option<&str>, body: Option<Value>) -> (StatusCode, Value, Option<String>) {
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(a) = auth {
            req = req.header(header::AUTHORIZATION, a);
        }
        let req = match body {
            Some(b) => req
                .header(header::CONTENT_TYPE, "application/json")
                .body(Body::from(b.to_string())),
            None => req.body(Body::empty()),
        }
        .unwrap();
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let retry = resp
            .headers()
            .get(header::RETRY_AFTER)
            .map(|v| v.to_str().unwrap().to_string());
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap()
        };
        (status, value, retry)
    }

    async fn login(&self, user: &str) -> String {
        let (status, body, _) = self
            .call(
                Method::POST,
                "/auth/login",
                None,
                Some(json!({"method": "local", "user": user, "token": token_of(user)})),
            )
            .await;
        assert_eq!(status, StatusCode::OK, "{body}");
        format!("Bearer {}", body["token"].as_str().unwrap())
    }

    async fn get(&self, uri: &str, auth: &str) -> (StatusCode, Value) {
        let (s, v, _) = self.call(Method::GET, uri, Some(auth), None).await;
        (s, v)
    }

    async fn submit(&self, auth: &str, name: &str) -> u64 {
        let (status, body, _) = self.call(Method::POST, "/jobs", Some(auth), Some(spec(name, 1))).await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
        body["jobId"].as_u64().unwrap()
    }

    fn log_len(&self) -> usize {
        self.sim.sim.lock().command_log().len()
    }

}

fn spec(name: &str, cores: u32) -> Value {
    json!({
        "jobName": name,
        "scriptPath": format!("/home/alice/{name}.sh"),
        "sourceDirectory": "/home/alice/run",
        "memoryRequested": "4G",
        "cores": cores,
        "parallel": cores > 1,
    })
}

#[tokio::test]
async fn unauthenticated_requests_never_reach_the_cluster() {
    let h = harness(10);
    let expired = {
        let (_, body, _) = h
            .call(
                Method::POST,
                "/auth/login",
                None,
                Some(json!({"method": "local", "user": "alice", "token": token_of("alice")})),
            )
            .await;
        format!("Bearer {}", body["token"].as_str().unwrap())
    };
    h.sim.advance(SESSION_TTL as u64);

    let routes: &[(Method, &str)] = &[
        (Method::GET, "/jobs"),
        (Method::GET, "/jobs?user=alice&status=Running"),
        (Method::GET, "/jobs?user=bob"),
        (Method::POST, "/jobs"),
        (Method::POST, "/jobs/refresh"),
        (Method::POST, "/auth/logout"),
        (Method::GET, "/jobs/101"),
        (Method::GET, "/jobs/0"),
        (Method::GET, "/jobs/18446744073709551615"),
        (Method::GET, "/jobs/abc"),
        (Method::DELETE, "/jobs/101"),
        (Method::DELETE, "/jobs/-1"),
        (Method::GET, "/jobs/101/output"),
        (Method::GET, "/jobs/101/output?lines=10"),
        (Method::GET, "/jobs/101/output?lines=0"),
        (Method::GET, "/jobs/101/logs"),
        (Method::GET, "/predict?tool=bwa&reads=10&metric=elapsed"),
        (Method::GET, "/predict"),
        (Method::GET, "/diagnostics"),
    ];
    let headers = [
        None,
        Some(String::new()),
        Some("Bearer ".to_string()),
        Some("Bearer not-a-token".to_string()),
        Some(format!("Basic {}", token_of("alice"))),
        Some(token_of("alice")),
        Some(expired.clone()),
    ];
    let bodies = [None, Some(spec("x", 1)), Some(json!({"junk": true}))];
    let mut checked = 0;
    for (method, uri) in routes {
        for auth in &headers {
            for body in &bodies {
                let (status, err, _) = h.call(method.clone(), uri, auth.as_deref(), body.clone()).await;
                assert_eq!(status, StatusCode::UNAUTHORIZED, "{method} {uri} {auth:?}");
                assert_eq!(err["stage"], "Auth");
                checked += 1;
            }
        }
    }
    assert_eq!(checked, routes.len() * headers.len() * bodies.len());
    assert_eq!(h.log_len(), 0);
    assert!(h.sim.gateway().metrics().is_empty());
}

#[tokio::test]
async fn login_issues_distinct_expiring_sessions() {
    let h = harness(10);
    let creds = json!({"method": "local", "user": "alice", "token": token_of("alice")});
    let (s1, a, _) = h.call(Method::POST, "/auth/login", None, Some(creds.clone())).await;
    let (s2, b, _) = h.call(Method::POST, "/auth/login", None, Some(creds)).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_ne!(a["token"], b["token"]);
    assert!(a["token"].as_str().unwrap().len() >= 32);
    assert!(a["expiresAt"].as_str().unwrap() > a["issuedAt"].as_str().unwrap());
    assert_eq!(a["principal"], "alice");
    assert_eq!(a["keyBound"], true);

    let wrong = json!({"method": "local", "user": "alice", "token": "guess"});
    let (status, err, _) = h.call(Method::POST, "/auth/login", None, Some(wrong)).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    assert_eq!(err["stage"], "Auth");

    let now = h.sim.now().timestamp();
    let claims = AssertionClaims {
        sub: "carol".into(),
        iat: now,
        exp: now + 60,
    };
    let assertion = sign_assertion(SECRET, &claims);
    let (status, session, _) = h
        .call(Method::POST, "/auth/login", None, Some(json!({"method": "assertion", "assertion": assertion})))
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(session["principal"], "carol");
    let forged = sign_assertion(b"other", &claims);
    let (status, _, _) = h
        .call(Method::POST, "/auth/login", None, Some(json!({"method": "assertion", "assertion": forged})))
        .await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);

    let (status, _, _) = h
        .call(Method::POST, "/auth/login", None, Some(json!({"method": "oauth", "code": "x"})))
        .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let token = format!("Bearer {}", session["token"].as_str().unwrap());
    let (status, _, _) = h.call(Method::POST, "/auth/logout", Some(&token), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    assert_eq!(h.get("/jobs", &token).await.0, StatusCode::UNAUTHORIZED);
}

#[tokio::test]
async fn unconfigured_login_method_is_unavailable() {
    let h = harness(10);
    let dir = tempfile::tempdir().unwrap();
    let sim = Arc::new(
        SimStack::new(SimConfig::default(), GatewayConfig::default(), PollConfig::default(), dir.path(), MIN_ITERATIONS, &[])
            .unwrap(),
    );
    let state = AppState::for_sim(sim, Authenticator::default(), SessionStore::new(TimeDelta::seconds(60)));
    let app = router(Arc::new(state));
    let req = Request::post("/auth/login")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(json!({"method": "local", "user": "a", "token": "b"}).to_string()))
        .unwrap();
    assert_eq!(app.oneshot(req).await.unwrap().status(), StatusCode::SERVICE_UNAVAILABLE);
    drop(h);
}

#[tokio::test]
async fn listings_are_scoped_to_the_caller() {
    let h = harness(20);
    let alice = h.login("alice").await;
    let bob = h.login("bob").await;
    let root = h.login("root").await;
    let a1 = h.submit(&alice, "a1").await;
    let a2 = h.submit(&alice, "a2").await;
    let b1 = h.submit(&bob, "b1").await;

    let ids = |v: &Value| -> Vec<u64> {
        let mut ids: Vec<u64> = v["jobs"].as_array().unwrap().iter().map(|j| j["jobId"].as_u64().unwrap()).collect();
        ids.sort();
        ids
    };
    let (status, list) = h.get("/jobs", &alice).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ids(&list), [a1, a2]);
    assert!(list["jobs"].as_array().unwrap().iter().all(|j| j["user"] == "alice"));
    assert_eq!(ids(&h.get("/jobs", &bob).await.1), [b1]);
    assert_eq!(ids(&h.get("/jobs", &root).await.1), [a1, a2, b1]);
    assert_eq!(ids(&h.get("/jobs?user=bob", &root).await.1), [b1]);

    let (status, err) = h.get("/jobs?user=bob", &alice).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    assert_eq!(err["stage"], "Auth");
    assert_eq!(h.get(&format!("/jobs/{b1}"), &alice).await.0, StatusCode::FORBIDDEN);
    assert_eq!(h.get(&format!("/jobs/{b1}/output"), &alice).await.0, StatusCode::FORBIDDEN);
    let before = h.log_len();
    let (status, _, _) = h.call(Method::DELETE, &format!("/jobs/{b1}"), Some(&alice), None).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    assert_eq!(h.log_len(), before);

    h.sim.advance(5);
    let (status, list) = h.get("/jobs?status=Running", &alice).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ids(&list), [a1, a2]);
    assert!(ids(&h.get("/jobs?status=1,Completed", &alice).await.1).is_empty());
    assert_eq!(h.get("/jobs?status=Sleeping", &alice).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn submit_then_get_and_cancel() {
    let h = harness(20);
    let alice = h.login("alice").await;
    let (status, body, _) = h.call(Method::POST, "/jobs", Some(&alice), Some(spec("align", 4))).await;
    assert_eq!(status, StatusCode::CREATED);
    let id = body["jobId"].as_u64().unwrap();
    assert!(id > 0);
    assert_eq!(body["record"]["jobId"].as_u64(), Some(id));
    assert_eq!(body["record"]["user"], "alice");
    assert_eq!(h.sim.sim.lock().job(id).unwrap().owner, "alice");

    let (status, got) = h.get(&format!("/jobs/{id}"), &alice).await;
    assert_eq!(status, StatusCode::OK, "{got}");
    assert_eq!(got["record"]["jobId"].as_u64(), Some(id));
    assert_eq!(got["detail"]["jobId"].as_u64(), Some(id));
    assert_eq!(got["record"]["cores"], 4);

    let (status, cancelled, _) = h.call(Method::DELETE, &format!("/jobs/{id}"), Some(&alice), None).await;
    assert_eq!(status, StatusCode::OK, "{cancelled}");
    assert_eq!(cancelled["record"]["status"], "Deleted");
    assert_eq!(h.sim.sim.lock().job(id).unwrap().state, JobStatus::Deleted);

    assert_eq!(h.get("/jobs/999999", &alice).await.0, StatusCode::NOT_FOUND);
    assert_eq!(h.get("/jobs/abc", &alice).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(h.get("/nowhere", &alice).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn invalid_spec_is_rejected_before_any_cluster_traffic() {
    let h = harness(20);
    let alice = h.login("alice").await;
    let before = h.log_len();
    let (status, err, _) = h.call(Method::POST, "/jobs", Some(&alice), Some(spec("zero", 0))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["stage"], "Render");
    let (status, err, _) = h.call(Method::POST, "/jobs", Some(&alice), Some(json!({"jobName": 3}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["stage"], "Request");
    assert_eq!(h.log_len(), before);
}

#[tokio::test]
async fn throttled_submit_reports_retry_after_without_traffic() {
    let h = harness(2);
    let alice = h.login("alice").await;
    h.submit(&alice, "one").await;
    h.submit(&alice, "two").await;
    let before = h.log_len();
    let (status, err, retry) = h.call(Method::POST, "/jobs", Some(&alice), Some(spec("three", 1))).await;
    assert_eq!(status, StatusCode::TOO_MANY_REQUESTS);
    assert_eq!(err["stage"], "Gateway");
    // First violation: the base backoff of one second.
    let base = LimiterConfig::default().backoff_base;
    assert_eq!(err["retryAfter"].as_f64(), Some(base.num_milliseconds() as f64 / 1000.0));
    assert_eq!(retry.as_deref(), Some("1"));
    let (_, err, _) = h.call(Method::POST, "/jobs", Some(&alice), Some(spec("four", 1))).await;
    assert_eq!(err["retryAfter"].as_f64(), Some(2.0));
    assert_eq!(h.log_len(), before);
}

fn numbered_lines(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("output line {i:03}")).collect()
}

#[tokio::test]
async fn detail_view_tails_output_and_collects_log_findings() {
    let h = harness(20);
    let alice = h.login("alice").await;
    let id = h.submit(&alice, "variant").await;
    let record = h.sim.store().get_job(id).unwrap();
    let error_path = h.sim.store().error_path(id).unwrap().unwrap();
    let lines = numbered_lines(500);
    {
        let mut sim = h.sim.sim.lock();
        sim.write_file(record.path.clone(), "#!/bin/sh\necho variant calling\n");
        sim.write_file(record.outpath.clone(), lines.iter().map(|l| format!("{l}\n")).collect::<String>());
        sim.write_file(error_path.clone(), "loading\nWARNING: low memory\nretrying\nError: segfault\n");
    }

    let admits_before = h.sim.gateway().metrics().get("alice").map_or(0, |m| m.admits);
    let (status, view) = h.get(&format!("/jobs/{id}/output?lines=10"), &alice).await;
    assert_eq!(status, StatusCode::OK, "{view}");
    let admits_after = h.sim.gateway().metrics()["alice"].admits;
    assert_eq!(admits_after - admits_before, 2);

    let tail: Vec<String> = view["outputTail"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| l.as_str().unwrap().to_string())
        .collect();
    assert_eq!(tail, lines[490..]);
    let key = h.sim.key_for("alice").unwrap();
    let via_manager = h.sim.gateway().connections().tail_file(&key, &record.outpath, 10).await.unwrap();
    assert_eq!(tail, via_manager);

    assert_eq!(view["scriptContent"], "#!/bin/sh\necho variant calling\n");
    assert_eq!(view["scriptName"], "variant.sh");
    assert_eq!(view["record"]["jobId"].as_u64(), Some(id));
    assert_eq!(
        view["logFindings"],
        json!([
            {"severity": "Warning", "line": 2, "text": "WARNING: low memory"},
            {"severity": "Error", "line": 4, "text": "Error: segfault"},
        ])
    );

    let (status, logs) = h.get(&format!("/jobs/{id}/logs"), &alice).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(logs["findings"], view["logFindings"]);

    h.sim.sim.lock().write_file(error_path, "");
    h.sim.advance(61);
    let (_, logs) = h.get(&format!("/jobs/{id}/logs"), &alice).await;
    assert_eq!(logs["findings"], json!([]));

    let before = h.log_len();
    assert_eq!(h.get(&format!("/jobs/{id}/output?lines=0"), &alice).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(h.get(&format!("/jobs/{id}/output?lines=x"), &alice).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(h.log_len(), before);
}

#[tokio::test]
async fn missing_output_files_are_reported_per_file() {
    let h = harness(20);
    let alice = h.login("alice").await;
    let id = h.submit(&alice, "fresh").await;
    let (status, view) = h.get(&format!("/jobs/{id}/output"), &alice).await;
    assert_eq!(status, StatusCode::OK, "{view}");
    assert!(view["scriptError"].as_str().is_some());
    assert!(view["outputError"].as_str().is_some());
    assert_eq!(view["outputTail"], json!([]));
}

#[tokio::test]
async fn refresh_polls_only_the_caller() {
    let h = harness(20);
    let alice = h.login("alice").await;
    let bob = h.login("bob").await;
    h.submit(&alice, "a").await;
    h.submit(&bob, "b").await;
    let start = h.log_len();
    let (status, report, _) = h.call(Method::POST, "/jobs/refresh", Some(&alice), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(report["user"], "alice");
    let sim = h.sim.sim.lock();
    assert!(sim.log_since(start as u64).iter().all(|e| e.user == "alice"));
}

#[tokio::test]
async fn diagnostics_are_for_admins() {
    let h = harness(20);
    let alice = h.login("alice").await;
    let root = h.login("root").await;
    h.submit(&alice, "a").await;
    h.sim.tick().await;
    assert_eq!(h.get("/diagnostics", &alice).await.0, StatusCode::FORBIDDEN);
    let (status, d) = h.get("/diagnostics", &root).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(d["transport"], "sim");
    assert_eq!(d["metrics"]["alice"]["admits"], 1);
    assert_eq!(d["poll"]["listedJobs"], 1);
    assert_eq!(d["openJobs"], 1);
}

#[tokio::test]
async fn predictions_come_from_the_archive() {
    let h = harness(20);
    let alice = h.login("alice").await;
    // elapsed = 3 * reads + 7, memory = 1000 * reads
    for (i, reads) in [10u64, 20, 30, 40].into_iter().enumerate() {
        let id = 1000 + i as u64;
        let store = h.sim.store();
        store
            .upsert_job(&JobRecord::new(id, format!("bwa_{reads}"), "alice", JobStatus::Running))
            .unwrap();
        let acct = AccountingRecord {
            job_id: id,
            final_status: JobStatus::Completed,
            final_run_time_secs: 3 * reads + 7,
            maximum_memory: 1000 * reads,
            exit_code: 0,
        };
        store.finalize_job(id, &acct).unwrap();
    }
    let before = h.log_len();
    let (status, p) = h.get("/predict?tool=bwa&reads=50&metric=elapsed", &alice).await;
    assert_eq!(status, StatusCode::OK, "{p}");
    assert_eq!(p["group"], "tool=bwa");
    let e = &p["estimates"][0];
    assert_eq!(e["metric"], "ElapsedSeconds");
    assert!((e["value"].as_f64().unwrap() - 157.0).abs() < 1e-9);
    assert!((e["slope"].as_f64().unwrap() - 3.0).abs() < 1e-9);
    assert_eq!(e["n"], 4);

    let (_, p) = h.get("/predict?tool=bwa&reads=1K", &alice).await;
    let est = p["estimates"].as_array().unwrap();
    assert_eq!(est.len(), 2);
    assert!((est[1]["value"].as_f64().unwrap() - 1_000_000.0).abs() < 1e-6);

    let (status, err) = h.get("/predict?tool=star&reads=5", &alice).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["stage"], "Analytics");
    assert_eq!(h.get("/predict?tool=bwa&reads=-5", &alice).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(h.get("/predict?tool=bwa&reads=5&metric=cpu", &alice).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(h.log_len(), before);
}
