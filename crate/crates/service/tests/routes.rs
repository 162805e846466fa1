use axum::body::Body;
use axum::http::{Request, StatusCode};
use fedgm_core::api::{
    ApiError, ConfigRequest, GenDataResponse, Health, PartitionResponse, QueryBatch, QueryResponse, SessionClosed,
    SessionInfo, SessionRequest, TrainRequest, TrainResponse,
};
use fedgm_core::net::QueryRequest;
use fedgm_core::orchestrate::{generate_base, run_federated, ExperimentConfig};
use fedgm_service::{router, AppState};
use http_body_util::BodyExt;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tower::ServiceExt;

fn tiny() -> ExperimentConfig {
    ExperimentConfig {
        name: "tiny".into(),
        n_silos: 2,
        total_epochs: 2,
        repeats: 1,
        ..ExperimentConfig::fast()
    }
}

async fn send<T: DeserializeOwned>(state: &AppState, req: Request<Body>) -> (StatusCode, T) {
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes)
        .unwrap_or_else(|e| panic!("{status}: {e}: {}", String::from_utf8_lossy(&bytes)));
    (status, value)
}

fn post<B: Serialize>(uri: &str, body: &B) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(serde_json::to_vec(body).unwrap()))
        .unwrap()
}

#[tokio::test]
async fn health_reports_no_sessions() {
    let state = AppState::default();
    let (status, h): (_, Health) = send(&state, Request::get("/health").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(h.status, "ok");
    assert_eq!(h.live_sessions, 0);
}

#[tokio::test]
async fn gen_data_matches_library() {
    let state = AppState::default();
    let cfg = tiny();
    let (status, resp): (_, GenDataResponse) = send(&state, post("/v1/data", &ConfigRequest { config: cfg.clone() })).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(resp.records, generate_base(&cfg).unwrap());
    assert_eq!(resp.frequent_classes + resp.rare_classes, resp.class_sizes.len());
    assert_eq!(resp.rare_classes, cfg.dataset.num_rare_classes);
}

#[tokio::test]
async fn partition_tags_every_record() {
    let state = AppState::default();
    let req = fedgm_core::api::PartitionRequest {
        config: tiny(),
        repeat: 0,
    };
    let (status, resp): (_, PartitionResponse) = send(&state, post("/v1/partition", &req)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(resp.partition.assignment.len(), 2);
    assert!(resp.records.iter().all(|r| r.split.is_some() && r.silo.is_some()));
}

#[tokio::test]
async fn invalid_config_is_a_client_error() {
    let state = AppState::default();
    let cfg = ExperimentConfig {
        total_epochs: 3,
        aggregation_interval: 2,
        ..tiny()
    };
    let req = TrainRequest {
        config: cfg,
        baseline: false,
    };
    let (status, err): (_, ApiError) = send(&state, post("/v1/train/federated", &req)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err.code, "config");
}

#[tokio::test]
async fn unknown_session_is_not_found() {
    let state = AppState::default();
    let batch = QueryBatch { queries: vec![] };
    let (status, err): (_, ApiError) = send(&state, post("/v1/sessions/nope/queries", &batch)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err.code, "unknown_session");
    let del = Request::delete("/v1/sessions/nope").body(Body::empty()).unwrap();
    let (status, _): (_, ApiError) = send(&state, del).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn federated_training_matches_library() {
    let state = AppState::default();
    let cfg = tiny();
    let req = TrainRequest {
        config: cfg.clone(),
        baseline: true,
    };
    let (status, resp): (_, TrainResponse) = send(&state, post("/v1/train/federated", &req)).await;
    assert_eq!(status, StatusCode::OK);
    let direct = run_federated(&cfg, None).unwrap();
    assert_eq!(resp.report.repeats, direct.repeats);
    assert!(resp.baseline.is_some());
    assert!(resp.report.ratio_to_centralized.is_some());
    assert_eq!(resp.models.len(), 1);
}

#[tokio::test]
async fn session_lifecycle() {
    let state = AppState::default();
    let cfg = tiny();
    let req = SessionRequest {
        config: cfg.clone(),
        repeat: 0,
    };
    let (status, info): (_, SessionInfo) = send(&state, post("/v1/sessions", &req)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(state.live_sessions(), 1);
    assert_eq!(info.rounds, 2);

    // a second open of the same session id conflicts
    let (status, err): (_, ApiError) = send(&state, post("/v1/sessions", &req)).await;
    assert_eq!(status, StatusCode::CONFLICT, "{}", err.message);

    let base = generate_base(&cfg).unwrap();
    let queries: Vec<QueryRequest> = base
        .iter()
        .take(3)
        .map(|r| QueryRequest {
            query_id: r.id,
            features: r.features.clone(),
            k: 5,
        })
        .collect();
    let uri = format!("/v1/sessions/{}/queries", info.session_id);
    let (status, resp): (_, QueryResponse) = send(&state, post(&uri, &QueryBatch { queries })).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(resp.answers.len(), 3);
    for a in &resp.answers {
        assert_eq!(a.ranked.len(), 5);
        assert!(a.ranked.windows(2).all(|w| w[0].distance <= w[1].distance));
    }

    let del = Request::delete(format!("/v1/sessions/{}", info.session_id))
        .body(Body::empty())
        .unwrap();
    let (status, closed): (_, SessionClosed) = send(&state, del).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(closed.result.model_sha256, info.model_sha256);
    assert!(closed.result.reports.iter().all(|r| r.is_monotone()));
    assert_eq!(state.live_sessions(), 0);
}
