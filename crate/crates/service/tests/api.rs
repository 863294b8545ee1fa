use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use retro_core::model::{Model, ModelConfig, Sample};
use retro_core::molgraph::parse_smiles;
use retro_core::planner::BuildingBlocks;
use retro_core::reaction::{build_vocab, extract_labels, load_corpus, Split, DEFAULT_MAX_H_CHANGE};
use retro_core::trainer::{TrainConfig, Trainer};
use retro_service::{router, AppState, ServiceConfig};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/data").join(name)
}

/// A small model trained on the route grammar, shared by every test.
fn model() -> &'static Model {
    static MODEL: OnceLock<Model> = OnceLock::new();
    MODEL.get_or_init(|| {
        let records = load_corpus(&data("route_grammar.csv"), Split::Train).unwrap().records;
        let vocab = build_vocab(&records, DEFAULT_MAX_H_CHANGE).0;
        let config = ModelConfig {
            d: 32,
            d_k: 8,
            n_head: 4,
            layers: 2,
            max_hop: 2,
            ..ModelConfig::default()
        };
        let model = Model::new(config, vocab).unwrap();
        let samples: Vec<Sample> = records
            .iter()
            .map(|r| Sample::new(&model, r, &extract_labels(r, DEFAULT_MAX_H_CHANGE).unwrap(), false).unwrap())
            .collect();
        let mut trainer = Trainer::new(
            model,
            TrainConfig {
                epochs: usize::MAX,
                ..TrainConfig::default()
            },
        );
        trainer.fit(&samples, 400, None, |_, _| false).unwrap();
        trainer.model
    })
}

fn blocks() -> BuildingBlocks {
    BuildingBlocks::load(&data("route_grammar_blocks.smi")).unwrap()
}

fn app_with(config: ServiceConfig) -> Router {
    router(AppState::new(model().clone(), blocks(), config))
}

fn app() -> Router {
    app_with(ServiceConfig::default())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

const TARGET: &str = "CC(=O)NCc1ccc(-c2ccccc2)cc1";

fn encode(s: &str) -> String {
    s.bytes()
        .map(|b| match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'.' | b'_' | b'~' => (b as char).to_string(),
            _ => format!("%{b:02X}"),
        })
        .collect()
}

#[tokio::test(flavor = "multi_thread")]
async fn predict_is_rank_sorted_and_self_consistent() {
    let app = app();
    let (status, body) = call(&app, "POST", "/predict", Some(json!({"smiles": TARGET, "topk": 5}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let cands = body["candidates"].as_array().unwrap();
    assert!(!cands.is_empty() && cands.len() <= 5);
    let energies: Vec<f64> = cands.iter().map(|c| c["total_energy"].as_f64().unwrap()).collect();
    assert!(energies.windows(2).all(|w| w[0] <= w[1]));
    for (i, c) in cands.iter().enumerate() {
        assert_eq!(c["rank"], i + 1);
        let deltas: f64 = c["deltas"].as_array().unwrap().iter().map(|d| d.as_f64().unwrap()).sum();
        assert!((deltas - energies[i]).abs() < 1e-12);
        let reactants: Vec<&str> = c["reactants"].as_array().unwrap().iter().map(|r| r.as_str().unwrap()).collect();
        for r in &reactants {
            parse_smiles(r).unwrap();
        }
        // Scoring the returned set reproduces its energy.
        let (qs, q) = call(
            &app,
            "POST",
            "/query",
            Some(json!({"product": TARGET, "reactants": reactants.join(".")})),
        )
        .await;
        assert_eq!(qs, StatusCode::OK, "{q}");
        assert_eq!(q["total_energy"].as_f64().unwrap().to_bits(), energies[i].to_bits());
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn predict_replays_identically() {
    let app = app();
    let body = json!({"smiles": "O=C(NCc1ccc(-c2ccccc2)cc1)C1CC1", "topk": 3});
    let a = call(&app, "POST", "/predict", Some(body.clone())).await;
    let b = call(&app, "POST", "/predict", Some(body)).await;
    assert_eq!(a.0, StatusCode::OK);
    assert_eq!(a.1.to_string(), b.1.to_string());
}

#[tokio::test(flavor = "multi_thread")]
async fn invalid_smiles_is_422_with_offset() {
    let app = app();
    let (status, body) = call(&app, "POST", "/predict", Some(json!({"smiles": "C1CC"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "invalid_smiles");
    assert!(body["offset"].is_u64());
    let (status, _) = call(&app, "POST", "/predict", Some(json!({"smiles": "CC", "class": 11}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, body) = call(&app, "GET", &format!("/model/heads?smiles={}", encode("C(C")), None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
}

#[tokio::test(flavor = "multi_thread")]
async fn empty_beam_is_409() {
    let mut m = model().clone();
    m.zero_all();
    let app = router(AppState::new(m, blocks(), ServiceConfig::default()));
    let (status, body) = call(&app, "POST", "/predict", Some(json!({"smiles": TARGET}))).await;
    assert_eq!(status, StatusCode::CONFLICT, "{body}");
    assert_eq!(body["error"], "empty_beam");
}

#[tokio::test(flavor = "multi_thread")]
async fn block_target_is_solved_at_creation() {
    let app = app();
    let (status, snap) = call(&app, "POST", "/plan/session", Some(json!({"target": "CC(=O)O"}))).await;
    assert_eq!(status, StatusCode::CREATED, "{snap}");
    assert_eq!(snap["version"], 1);
    assert_eq!(snap["molecules"][0]["status"], "solved");
    assert_eq!(snap["routes"][0]["cost"], 0.0);
    assert!(snap["routes"][0]["steps"].as_array().unwrap().is_empty());
}

async fn new_session(app: &Router, limits: Value) -> String {
    let (status, snap) = call(app, "POST", "/plan/session", Some(json!({"target": TARGET, "limits": limits}))).await;
    assert_eq!(status, StatusCode::CREATED, "{snap}");
    snap["session_id"].as_str().unwrap().to_string()
}

#[tokio::test(flavor = "multi_thread")]
async fn expand_matches_snapshot() {
    let app = app();
    let id = new_session(&app, json!({"topk_per_expand": 3})).await;
    let (status, exp) = call(&app, "POST", &format!("/plan/session/{id}/expand"), Some(json!({"node_id": 0}))).await;
    assert_eq!(status, StatusCode::OK, "{exp}");
    let added = exp["reactions"].as_array().unwrap();
    assert!(!added.is_empty() && added.len() <= 3);
    let (status, snap) = call(&app, "GET", &format!("/plan/session/{id}/tree"), None).await;
    assert_eq!(status, StatusCode::OK);
    let root = &snap["molecules"][0];
    assert_eq!(root["children"].as_array().unwrap().len(), added.len());
    assert_eq!(snap["reactions"].as_array().unwrap().len(), added.len());
    for r in added {
        let id = r["id"].as_u64().unwrap() as usize;
        assert_eq!(snap["reactions"][id]["energy"], r["energy"]);
        for child in r["children"].as_array().unwrap() {
            let m = child.as_u64().unwrap() as usize;
            assert!(exp["molecules"].as_array().unwrap().iter().any(|x| x["id"] == m));
        }
    }
    assert_eq!(snap["budget_remaining"], snap["limits"]["max_expansions"].as_u64().unwrap() - 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_double_expand_has_one_winner() {
    for _ in 0..5 {
        let app = app();
        let id = new_session(&app, json!({})).await;
        let uri = format!("/plan/session/{id}/expand");
        let (a, b) = tokio::join!(
            call(&app, "POST", &uri, Some(json!({"node_id": 0}))),
            call(&app, "POST", &uri, Some(json!({"node_id": 0}))),
        );
        let mut codes = [a.0, b.0];
        codes.sort();
        assert_eq!(codes, [StatusCode::OK, StatusCode::CONFLICT], "{} / {}", a.1, b.1);
        let loser = if a.0 == StatusCode::CONFLICT { a.1 } else { b.1 };
        assert_eq!(loser["error"], "already_expanded");
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn session_errors() {
    let app = app();
    let (status, _) = call(&app, "GET", "/plan/session/nope/tree", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let id = new_session(&app, json!({"max_expansions": 1})).await;
    let uri = format!("/plan/session/{id}/expand");
    let (status, body) = call(&app, "POST", &uri, Some(json!({"node_id": 999}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "unknown_node");
    let (status, exp) = call(&app, "POST", &uri, Some(json!({"node_id": 0}))).await;
    assert_eq!(status, StatusCode::OK);
    let open = exp["molecules"]
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["in_blocks"] == false)
        .expect("an intermediate to expand");
    let (status, body) = call(&app, "POST", &uri, Some(json!({"node_id": open["id"]}))).await;
    assert_eq!(status, StatusCode::TOO_MANY_REQUESTS, "{body}");
    let (status, _) = call(&app, "POST", "/plan/session", Some(json!({"target": "C1CC"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(&app, "DELETE", &format!("/plan/session/{id}"), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, _) = call(&app, "GET", &format!("/plan/session/{id}/tree"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn sessions_are_isolated() {
    let app = app();
    let a = new_session(&app, json!({})).await;
    let b = new_session(&app, json!({})).await;
    let (_, before) = call(&app, "GET", &format!("/plan/session/{b}/tree"), None).await;
    for node in [0, 1] {
        call(&app, "POST", &format!("/plan/session/{a}/expand"), Some(json!({"node_id": node}))).await;
        let (_, now) = call(&app, "GET", &format!("/plan/session/{b}/tree"), None).await;
        assert_eq!(now, before);
    }
    let (_, tree_a) = call(&app, "GET", &format!("/plan/session/{a}/tree"), None).await;
    assert_ne!(tree_a["molecules"], before["molecules"]);
}

#[tokio::test(flavor = "multi_thread")]
async fn run_finds_a_route() {
    let app = app();
    let id = new_session(&app, json!({"max_expansions": 20})).await;
    let (status, snap) = call(&app, "POST", &format!("/plan/session/{id}/run"), Some(json!({}))).await;
    assert_eq!(status, StatusCode::OK, "{snap}");
    assert_eq!(snap["molecules"][0]["status"], "solved");
    assert!(!snap["routes"][0]["steps"].as_array().unwrap().is_empty());
}

#[tokio::test(flavor = "multi_thread")]
async fn idle_sessions_expire() {
    let app = app_with(ServiceConfig {
        session_ttl: Duration::from_millis(50),
        ..ServiceConfig::default()
    });
    let id = new_session(&app, json!({})).await;
    tokio::time::sleep(Duration::from_millis(120)).await;
    let (status, body) = call(&app, "GET", &format!("/plan/session/{id}/tree"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "unknown_session");
}

#[tokio::test(flavor = "multi_thread")]
async fn slow_requests_get_503() {
    let app = app_with(ServiceConfig {
        request_timeout: Duration::ZERO,
        ..ServiceConfig::default()
    });
    let req = Request::builder()
        .method("POST")
        .uri("/predict")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(json!({"smiles": TARGET}).to_string()))
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::SERVICE_UNAVAILABLE);
    assert!(resp.headers().contains_key(header::RETRY_AFTER));
}

const REACTION: &str = "O[C:1](=[O:2])[CH3:4].[NH2:3][CH2:5][c:6]1[cH:7][cH:9][c:11](-[c:12]2[cH:13][cH:15][cH:17][cH:16][cH:14]2)[cH:10][cH:8]1>>[C:1](=[O:2])([NH:3][CH2:5][c:6]1[cH:7][cH:9][c:11](-[c:12]2[cH:13][cH:15][cH:17][cH:16][cH:14]2)[cH:10][cH:8]1)[CH3:4]";

#[tokio::test(flavor = "multi_thread")]
async fn explain_endpoints() {
    let app = app();
    let (status, body) = call(&app, "GET", &format!("/explain/apex?reaction={}&task=rcp", encode(REACTION)), None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["scores"].as_array().unwrap().len(), 17);
    assert_eq!(body["task"], "rcp");

    let (status, body) = call(&app, "GET", &format!("/explain/trace?reaction={}", encode(REACTION)), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "mode_error");

    let (status, _) = call(&app, "GET", &format!("/explain/apex?reaction={}&task=xyz", encode(REACTION)), None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (status, body) = call(&app, "GET", &format!("/model/heads?smiles={}", encode(TARGET)), None).await;
    assert_eq!(status, StatusCode::OK);
    let heads = body["heads"].as_array().unwrap();
    assert_eq!(heads.len(), model().config.n_head);
    for h in heads {
        let rv = h["rv"].as_f64().unwrap();
        assert!((-1.0..=1.0).contains(&rv));
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn trace_with_type_embeddings() {
    let mut m = model().clone();
    m.config.reaction_types = true;
    // A fresh type-aware model of the same shape.
    let typed = Model::new(m.config.clone(), m.vocab.clone()).unwrap();
    let app = router(AppState::new(typed, blocks(), ServiceConfig::default()));
    let (status, body) = call(&app, "GET", &format!("/explain/trace?reaction={}&task=lgm", encode(REACTION)), None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let vectors = body["vectors"].as_array().unwrap();
    assert_eq!(vectors.len(), 17);
    assert!(vectors.iter().all(|v| v.as_array().unwrap().len() == 10));
}

#[tokio::test(flavor = "multi_thread")]
async fn static_files_and_model_info() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>routes</html>").unwrap();
    let app = app_with(ServiceConfig {
        static_dir: Some(dir.path().to_path_buf()),
        ..ServiceConfig::default()
    });
    let (status, body) = call(&app, "GET", "/index.html", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, Value::String("<html>routes</html>".into()));
    let (status, info) = call(&app, "GET", "/model", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(info["config"]["n_head"], 4);
}
