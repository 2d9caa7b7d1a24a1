use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use tower::ServiceExt;

use semcache::cache::SemanticCache;
use semcache::model::CacheConfig;
use semcache::clock::VirtualClock;
use semcache::embed::HashedBowEmbedder;
use semcache::judge::{Judge, ReferenceJudge};
use semcache::kv::{decode_all, Record};
use semcache::proxy::{ModeConfig, Proxy, ServiceGroundTruth};
use semcache::recalibrate::AnnotatedSample;
use semcache::remote::{RemoteToolClient, SimulatedService, ToolEndpointConfig};
use semcache::server::router;

const MONA: &str = "Leonardo da Vinci painted the Mona Lisa";
const CANBERRA: &str = "Canberra is the capital city of Australia";

fn proxy() -> Arc<Proxy> {
    let clock = Arc::new(VirtualClock::default());
    let table = HashMap::from([
        ("mona".to_string(), MONA.to_string()),
        ("canberra".to_string(), CANBERRA.to_string()),
    ]);
    let resolver = HashMap::from([
        ("who painted the Mona Lisa?".to_string(), "mona".to_string()),
        ("the Mona Lisa was painted by whom?".to_string(), "mona".to_string()),
        ("what is the capital city of Australia".to_string(), "canberra".to_string()),
    ]);
    let service = Arc::new(SimulatedService::new(table, 400.0, 0.0, 1).with_resolver(resolver));
    let client =
        Arc::new(RemoteToolClient::new(ToolEndpointConfig::default(), service.clone(), clock.clone()).unwrap());
    let cache = Arc::new(
        SemanticCache::new(
            CacheConfig {
                tau_sim: 0.7,
                ..CacheConfig::default()
            },
            Arc::new(HashedBowEmbedder::default()),
            Arc::new(ReferenceJudge),
        )
        .unwrap(),
    );
    Arc::new(
        Proxy::new(cache, vec![client], clock, ModeConfig::Full)
            .with_ground_truth(Arc::new(ServiceGroundTruth(service))),
    )
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: String) -> (StatusCode, String) {
    let req = Request::builder().method(method).uri(uri).body(Body::from(body)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

fn query_body(text: &str) -> String {
    Record::new().with("tool", "search").with("text", text).encode()
}

fn field(body: &str, key: &str) -> String {
    Record::decode(body).unwrap().get(key).unwrap().to_string()
}

#[tokio::test]
async fn fresh_stats_are_zero() {
    let app = router(proxy(), 2);
    let (status, body) = call(&app, "GET", "/stats", String::new()).await;
    assert_eq!(status, StatusCode::OK);
    for key in ["requests", "hits", "misses", "errors", "api_calls", "usage_tokens"] {
        assert_eq!(field(&body, key), "0", "{key}");
    }
}

#[tokio::test]
async fn query_twice_gives_one_hit_one_miss() {
    let app = router(proxy(), 2);
    let (s1, b1) = call(&app, "POST", "/query", query_body("who painted the Mona Lisa?")).await;
    assert_eq!(s1, StatusCode::OK, "{b1}");
    assert_eq!(field(&b1, "source"), "remote");
    assert_eq!(field(&b1, "value"), MONA);
    let (_, b2) = call(&app, "POST", "/query", query_body("who painted the Mona Lisa?")).await;
    assert_eq!(field(&b2, "source"), "cache");
    let (_, stats) = call(&app, "GET", "/stats", String::new()).await;
    assert_eq!(field(&stats, "hits"), "1");
    assert_eq!(field(&stats, "misses"), "1");
    assert_eq!(field(&stats, "requests"), "2");
}

#[tokio::test]
async fn agent_output_is_parsed_into_calls() {
    let app = router(proxy(), 2);
    let body = Record::new()
        .with(
            "agent_output",
            "<think>look it up</think><search>who painted the Mona Lisa?</search>\
             <search>what is the capital city of Australia</search>",
        )
        .encode();
    let (status, text) = call(&app, "POST", "/query", body).await;
    assert_eq!(status, StatusCode::OK, "{text}");
    let records = decode_all(&text).unwrap();
    let values: Vec<&str> = records.iter().map(|r| r.get("value").unwrap()).collect();
    assert_eq!(values, vec![MONA, CANBERRA]);
}

#[tokio::test]
async fn bad_requests_are_rejected() {
    let app = router(proxy(), 2);
    let (s, _) = call(&app, "POST", "/query", Record::new().with("tool", "search").encode()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, b) = call(&app, "POST", "/query", Record::new().with("tool", "weather").with("text", "x").encode()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(field(&b, "error").contains("weather"));
    let (s, _) = call(&app, "POST", "/query", Record::new().with("agent_output", "<search>abc").encode()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "GET", "/nowhere", String::new()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

/// Smallest score whose accepted set reaches the target precision.
fn brute_force_threshold(scored: &[(f64, bool)], p_target: f64) -> Option<f64> {
    let mut ts: Vec<f64> = scored.iter().map(|s| s.0).collect();
    ts.sort_by(f64::total_cmp);
    ts.into_iter().find(|&t| {
        let accepted: Vec<_> = scored.iter().filter(|s| s.0 >= t).collect();
        accepted.iter().filter(|s| s.1).count() as f64 / accepted.len() as f64 >= p_target
    })
}

#[tokio::test]
async fn recalibrate_publishes_the_brute_force_threshold() {
    let proxy = proxy();
    let validation = vec![
        AnnotatedSample {
            query: "who painted the Mona Lisa?".into(),
            cached_query: "the Mona Lisa was painted by whom?".into(),
            cached_result: MONA.into(),
            s_lsm: 0.0,
            label: true,
        },
        AnnotatedSample {
            query: "who painted the Mona Lisa?".into(),
            cached_query: "what is the capital city of Australia".into(),
            cached_result: CANBERRA.into(),
            s_lsm: 0.0,
            label: false,
        },
        AnnotatedSample {
            query: "what is the capital city of Australia".into(),
            cached_query: "what is the capital city of Australia".into(),
            cached_result: CANBERRA.into(),
            s_lsm: 0.0,
            label: true,
        },
    ];
    proxy.add_validation(validation.clone());
    let app = router(proxy.clone(), 2);
    for q in ["who painted the Mona Lisa?", "the Mona Lisa was painted by whom?", "who painted the Mona Lisa?"] {
        call(&app, "POST", "/query", query_body(q)).await;
    }
    let log = proxy.cache().recent_log();
    assert!(!log.is_empty() && log.len() <= 5, "log fits one minute's sample budget");

    let judge = ReferenceJudge;
    let mut scored: Vec<(f64, bool)> = validation
        .iter()
        .map(|s| (judge.score(&s.query, &s.cached_query, &s.cached_result).unwrap(), s.label))
        .collect();
    for e in &log {
        scored.push((judge.score(&e.query, &e.cached_query, &e.served_result).unwrap(), e.served_result == MONA));
    }
    let p_target = proxy.cache().config().p_target;
    let expected = brute_force_threshold(&scored, p_target).expect("feasible");

    let (status, body) = call(&app, "POST", "/admin/recalibrate", String::new()).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let tau: f64 = field(&body, "tau_lsm").parse().unwrap();
    assert!((tau - expected).abs() < 1e-12, "{tau} vs {expected}");
    assert_eq!(field(&body, "feasible"), "true");
    let (_, stats) = call(&app, "GET", "/stats", String::new()).await;
    assert_eq!(field(&stats, "tau_lsm").parse::<f64>().unwrap(), tau);
}

#[tokio::test]
async fn snapshot_writes_to_requested_dir() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(proxy(), 1);
    call(&app, "POST", "/query", query_body("who painted the Mona Lisa?")).await;
    let target = dir.path().join("snap");
    let body = Record::new().with("dir", target.display()).encode();
    let (status, reply) = call(&app, "POST", "/admin/snapshot", body).await;
    assert_eq!(status, StatusCode::OK, "{reply}");
    assert!(target.exists());
}

#[tokio::test]
async fn graceful_shutdown_returns() {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(semcache::server::serve(listener, proxy(), 2, async {
        let _ = rx.await;
    }));
    tx.send(()).unwrap();
    server.await.unwrap().unwrap();
}
