//! HTTP/JSON front end over the experiment runner.
//!
//! Every compute-heavy handler runs on the blocking pool. Live federated
//! sessions stay open between requests so late silos can keep querying the
//! gallery until the session is closed.

mod error;

use std::collections::BTreeMap;
use std::future::Future;
use std::sync::{Arc, Mutex};

use axum::extract::{DefaultBodyLimit, Path, State};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use fedgm_core::api::{
    AttackRequest, AttackResponse, ConfigRequest, EvaluateRequest, EvaluateResponse, GenDataResponse, GridRequest,
    GridResponse, Health, PartitionRequest, PartitionResponse, QueryAnswer, QueryBatch, QueryResponse,
    SessionClosed, SessionInfo, SessionRequest, TrainRequest, TrainResponse,
};
use fedgm_core::data::{class_distribution_sd, class_sizes, classify_frequency, FrequencyClass};
use fedgm_core::net::{DEFAULT_PORT, MAX_PAYLOAD};
use fedgm_core::orchestrate::{
    attack_demo, default_grid, evaluate_distance, evaluate_model, export_embeddings, generate_base, model_digest,
    prepare, run_centralized, run_centralized_with_models, run_federated_with_models, run_grid, start_session,
    ExperimentConfig, LiveSession, PreparedData, RepeatResult, SessionOptions, Transport,
};
use tokio::net::TcpListener;

pub use error::ServiceError;

type Reply<T> = Result<Json<T>, ServiceError>;

struct Live {
    session: LiveSession,
    data: PreparedData,
    config: ExperimentConfig,
    repeat: usize,
}

type Slot = Arc<Mutex<Option<Live>>>;

#[derive(Clone, Default)]
pub struct AppState {
    sessions: Arc<Mutex<BTreeMap<String, Slot>>>,
}

impl AppState {
    pub fn live_sessions(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    fn slot(&self, id: &str) -> Result<Slot, ServiceError> {
        self.sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(id.to_string()))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/data", post(gen_data))
        .route("/v1/partition", post(partition))
        .route("/v1/train/central", post(train_central))
        .route("/v1/train/federated", post(train_federated))
        .route("/v1/evaluate", post(evaluate))
        .route("/v1/sessions", post(open_session))
        .route("/v1/sessions/{id}/queries", post(query))
        .route("/v1/sessions/{id}", delete(close_session))
        .route("/v1/attack", post(attack))
        .route("/v1/grid", post(grid))
        .layer(DefaultBodyLimit::max(MAX_PAYLOAD))
        .with_state(state)
}

/// Serves until `shutdown` resolves. Live sessions are closed on the way out.
pub async fn serve(
    listener: TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    if let Ok(addr) = listener.local_addr() {
        tracing::info!(%addr, "listening");
    }
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    let open: Vec<Slot> = std::mem::take(&mut *state.sessions.lock().unwrap()).into_values().collect();
    tokio::task::spawn_blocking(move || {
        for slot in open {
            if let Some(live) = slot.lock().unwrap().take() {
                live.session.finish();
            }
        }
    })
    .await
    .ok();
    Ok(())
}

async fn blocking<T, F>(f: F) -> Result<T, ServiceError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Worker(e.to_string()))?
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        live_sessions: state.live_sessions(),
    })
}

async fn gen_data(Json(req): Json<ConfigRequest>) -> Reply<GenDataResponse> {
    tracing::info!(name = %req.config.name, "gen-data");
    blocking(move || {
        req.config.validate()?;
        let records = generate_base(&req.config)?;
        let sizes = class_sizes(&records);
        let frequent = sizes
            .values()
            .filter(|&&n| classify_frequency(n) == FrequencyClass::Frequent)
            .count();
        Ok(Json(GenDataResponse {
            rare_classes: sizes.len() - frequent,
            frequent_classes: frequent,
            class_sizes: sizes,
            records,
        }))
    })
    .await
}

async fn partition(Json(req): Json<PartitionRequest>) -> Reply<PartitionResponse> {
    tracing::info!(name = %req.config.name, scheme = req.config.scheme_name(), "partition");
    blocking(move || {
        let cfg = req.config;
        cfg.validate()?;
        let seed = cfg.run_seed(req.repeat);
        let data = prepare(&generate_base(&cfg)?, &cfg, cfg.n_silos, seed)?;
        Ok(Json(PartitionResponse {
            seed,
            class_sd: class_distribution_sd(&data.partition, &data.records),
            mean_class_sd: data.mean_class_sd(),
            partition: data.partition,
            records: data.records,
        }))
    })
    .await
}

async fn train_central(Json(req): Json<TrainRequest>) -> Reply<TrainResponse> {
    tracing::info!(name = %req.config.name, repeats = req.config.repeats, "train-central");
    blocking(move || {
        let (report, models) = run_centralized_with_models(&req.config)?;
        Ok(Json(TrainResponse {
            report,
            baseline: None,
            models,
        }))
    })
    .await
}

async fn train_federated(Json(req): Json<TrainRequest>) -> Reply<TrainResponse> {
    tracing::info!(
        name = %req.config.name,
        silos = req.config.n_silos,
        interval = req.config.aggregation_interval,
        "train-fed"
    );
    blocking(move || {
        let baseline = if req.baseline {
            Some(run_centralized(&req.config)?)
        } else {
            None
        };
        let (report, models) = run_federated_with_models(&req.config, baseline.as_ref())?;
        Ok(Json(TrainResponse {
            report,
            baseline,
            models,
        }))
    })
    .await
}

async fn evaluate(Json(req): Json<EvaluateRequest>) -> Reply<EvaluateResponse> {
    tracing::info!(name = %req.config.name, repeat = req.repeat, "evaluate");
    blocking(move || {
        let (data, reports, cluster) = evaluate_model(&req.config, &req.model, req.repeat)?;
        let embeddings_csv = if req.export_embeddings {
            Some(export_embeddings(&req.model, &data.eval_rows())?)
        } else {
            None
        };
        Ok(Json(EvaluateResponse {
            seed: req.config.run_seed(req.repeat),
            reports,
            cluster,
            embeddings_csv,
        }))
    })
    .await
}

async fn open_session(State(state): State<AppState>, Json(req): Json<SessionRequest>) -> Reply<SessionInfo> {
    tracing::info!(name = %req.config.name, silos = req.config.n_silos, "open session");
    let sessions = state.sessions.clone();
    blocking(move || {
        let mut cfg = req.config;
        cfg.validate()?;
        // long-lived aggregators listen on the well-known port unless told otherwise
        if cfg.transport == Transport::Tcp && cfg.bind.is_none() {
            cfg.bind = Some(format!("127.0.0.1:{DEFAULT_PORT}"));
        }
        let seed = cfg.run_seed(req.repeat);
        let data = prepare(&generate_base(&cfg)?, &cfg, cfg.n_silos, seed)?;
        let session = start_session(&cfg, &data, seed, &SessionOptions::default())?;
        let info = SessionInfo {
            session_id: session.session_id.clone(),
            seed,
            n_silos: cfg.n_silos,
            rounds: cfg.rounds(),
            model_sha256: model_digest(&session.model),
            aggregator_addr: session.local_addr().map(|a| a.to_string()),
        };
        let mut map = sessions.lock().unwrap();
        if map.contains_key(&info.session_id) {
            drop(map);
            session.finish();
            return Err(ServiceError::SessionExists(info.session_id));
        }
        let live = Live {
            session,
            data,
            config: cfg,
            repeat: req.repeat,
        };
        map.insert(info.session_id.clone(), Arc::new(Mutex::new(Some(live))));
        Ok(Json(info))
    })
    .await
}

async fn query(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(batch): Json<QueryBatch>,
) -> Reply<QueryResponse> {
    tracing::info!(session = %id, queries = batch.queries.len(), "query");
    let slot = state.slot(&id)?;
    blocking(move || {
        let mut guard = slot.lock().unwrap();
        let live = guard.as_mut().ok_or_else(|| ServiceError::UnknownSession(id.clone()))?;
        let answers = live
            .session
            .late_query(&batch.queries)?
            .into_iter()
            .map(|(query_id, ranked)| QueryAnswer { query_id, ranked })
            .collect();
        Ok(Json(QueryResponse {
            session_id: id,
            answers,
        }))
    })
    .await
}

async fn close_session(State(state): State<AppState>, Path(id): Path<String>) -> Reply<SessionClosed> {
    tracing::info!(session = %id, "close session");
    let slot = state
        .sessions
        .lock()
        .unwrap()
        .remove(&id)
        .ok_or_else(|| ServiceError::UnknownSession(id.clone()))?;
    blocking(move || {
        let live = slot
            .lock()
            .unwrap()
            .take()
            .ok_or_else(|| ServiceError::UnknownSession(id.clone()))?;
        let Live {
            session,
            data,
            config,
            repeat,
        } = live;
        let seed = session.seed;
        let model_sha256 = model_digest(&session.model);
        let final_train_loss = session
            .silos
            .iter()
            .filter_map(|s| s.loss_history.last())
            .sum::<f64>()
            / session.silos.len().max(1) as f64;
        let core = session.finish();
        let outcome = core.outcome().ok_or_else(|| ServiceError::NoGallery(id.clone()))?;
        let (reports, cluster) = evaluate_distance(&outcome.distance, &data.frequent, &config.k_list, seed)
            .map_err(ServiceError::from)?;
        Ok(Json(SessionClosed {
            session_id: id,
            result: RepeatResult {
                repeat,
                seed,
                reports,
                cluster,
                model_sha256,
                mean_class_sd: data.mean_class_sd(),
                final_train_loss,
                subgroups: outcome.subgroups.clone(),
            },
            events: core.events().to_vec(),
        }))
    })
    .await
}

async fn attack(Json(req): Json<AttackRequest>) -> Reply<AttackResponse> {
    tracing::info!(name = %req.config.name, "attack-demo");
    blocking(move || {
        let report = attack_demo(&req.config, &req.attack)?;
        Ok(Json(AttackResponse {
            pairs_csv: report.pairs_csv(),
            report,
        }))
    })
    .await
}

async fn grid(Json(req): Json<GridRequest>) -> Reply<GridResponse> {
    let configs = match req.configs {
        Some(c) => c,
        None => default_grid(&req.base.unwrap_or_else(ExperimentConfig::fast)),
    };
    tracing::info!(configs = configs.len(), "grid");
    blocking(move || Ok(Json(run_grid(&configs)))).await
}
