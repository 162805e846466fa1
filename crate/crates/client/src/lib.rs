//! Async client for the fedgm HTTP service. One method per endpoint; bodies
//! are the shared types in [`fedgm_core::api`].

use fedgm_core::api::{
    ApiError, AttackRequest, AttackResponse, ConfigRequest, EvaluateRequest, EvaluateResponse, GenDataResponse,
    GridRequest, GridResponse, Health, PartitionRequest, PartitionResponse, QueryBatch, QueryResponse,
    SessionClosed, SessionInfo, SessionRequest, TrainRequest, TrainResponse,
};
use fedgm_core::model::EnsembleModel;
use fedgm_core::net::QueryRequest;
use fedgm_core::orchestrate::{AttackConfig, ExperimentConfig};
use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server answered {status} ({code}): {message}")]
    Api {
        status: StatusCode,
        code: String,
        message: String,
    },
}

#[derive(Clone, Debug)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:7480`.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn call<B: Serialize + ?Sized, T: DeserializeOwned>(
        &self,
        method: Method,
        path: &str,
        body: Option<&B>,
    ) -> Result<T, ClientError> {
        let mut req = self.http.request(method, format!("{}{path}", self.base));
        if let Some(b) = body {
            req = req.json(b);
        }
        let resp = req.send().await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await?;
        let (code, message) = match serde_json::from_str::<ApiError>(&text) {
            Ok(e) => (e.code, e.message),
            Err(_) => ("http".to_string(), text),
        };
        Err(ClientError::Api { status, code, message })
    }

    async fn post<B: Serialize + ?Sized, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        self.call(Method::POST, path, Some(body)).await
    }

    pub async fn health(&self) -> Result<Health, ClientError> {
        self.call::<(), _>(Method::GET, "/health", None).await
    }

    pub async fn gen_data(&self, config: &ExperimentConfig) -> Result<GenDataResponse, ClientError> {
        let body = ConfigRequest { config: config.clone() };
        self.post("/v1/data", &body).await
    }

    pub async fn partition(&self, config: &ExperimentConfig, repeat: usize) -> Result<PartitionResponse, ClientError> {
        let body = PartitionRequest {
            config: config.clone(),
            repeat,
        };
        self.post("/v1/partition", &body).await
    }

    pub async fn train_central(&self, config: &ExperimentConfig) -> Result<TrainResponse, ClientError> {
        let body = TrainRequest {
            config: config.clone(),
            baseline: false,
        };
        self.post("/v1/train/central", &body).await
    }

    pub async fn train_federated(&self, config: &ExperimentConfig, baseline: bool) -> Result<TrainResponse, ClientError> {
        let body = TrainRequest {
            config: config.clone(),
            baseline,
        };
        self.post("/v1/train/federated", &body).await
    }

    pub async fn evaluate(
        &self,
        config: &ExperimentConfig,
        model: &EnsembleModel,
        repeat: usize,
        export_embeddings: bool,
    ) -> Result<EvaluateResponse, ClientError> {
        let body = EvaluateRequest {
            config: config.clone(),
            model: model.clone(),
            repeat,
            export_embeddings,
        };
        self.post("/v1/evaluate", &body).await
    }

    pub async fn open_session(&self, config: &ExperimentConfig, repeat: usize) -> Result<SessionInfo, ClientError> {
        let body = SessionRequest {
            config: config.clone(),
            repeat,
        };
        self.post("/v1/sessions", &body).await
    }

    pub async fn query(&self, session_id: &str, queries: &[QueryRequest]) -> Result<QueryResponse, ClientError> {
        let body = QueryBatch {
            queries: queries.to_vec(),
        };
        self.post(&format!("/v1/sessions/{session_id}/queries"), &body).await
    }

    pub async fn close_session(&self, session_id: &str) -> Result<SessionClosed, ClientError> {
        self.call::<(), _>(Method::DELETE, &format!("/v1/sessions/{session_id}"), None)
            .await
    }

    pub async fn attack(&self, config: &ExperimentConfig, attack: &AttackConfig) -> Result<AttackResponse, ClientError> {
        let body = AttackRequest {
            config: config.clone(),
            attack: attack.clone(),
        };
        self.post("/v1/attack", &body).await
    }

    pub async fn grid(&self, request: &GridRequest) -> Result<GridResponse, ClientError> {
        self.post("/v1/grid", request).await
    }
}
