//! Request and response bodies of the HTTP/JSON service.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Partition, PatientRecord};
use crate::inference::EvalReport;
use crate::model::EnsembleModel;
use crate::net::{QueryRequest, RankedSyndrome};
use crate::orchestrate::{
    AttackConfig, AttackReport, ExperimentConfig, GridOutcome, RepeatResult, RunReport, ScopedMetrics,
};

pub const DEFAULT_HTTP_ADDR: &str = "127.0.0.1:7480";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
    pub live_sessions: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ConfigRequest {
    #[serde(default)]
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenDataResponse {
    pub records: Vec<PatientRecord>,
    pub class_sizes: BTreeMap<usize, usize>,
    pub frequent_classes: usize,
    pub rare_classes: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PartitionRequest {
    #[serde(default)]
    pub config: ExperimentConfig,
    #[serde(default)]
    pub repeat: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PartitionResponse {
    pub seed: u64,
    pub partition: Partition,
    /// Records with their split and silo tags filled in.
    pub records: Vec<PatientRecord>,
    pub class_sd: BTreeMap<usize, f64>,
    pub mean_class_sd: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainRequest {
    #[serde(default)]
    pub config: ExperimentConfig,
    /// Also run the centralized baseline and attach per-metric ratios.
    #[serde(default)]
    pub baseline: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainResponse {
    pub report: RunReport,
    pub baseline: Option<RunReport>,
    /// Trained model of every repeat, in repeat order.
    pub models: Vec<EnsembleModel>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluateRequest {
    #[serde(default)]
    pub config: ExperimentConfig,
    pub model: EnsembleModel,
    #[serde(default)]
    pub repeat: usize,
    #[serde(default)]
    pub export_embeddings: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluateResponse {
    pub seed: u64,
    pub reports: Vec<EvalReport>,
    pub cluster: Vec<ScopedMetrics>,
    pub embeddings_csv: Option<String>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SessionRequest {
    #[serde(default)]
    pub config: ExperimentConfig,
    #[serde(default)]
    pub repeat: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub seed: u64,
    pub n_silos: usize,
    pub rounds: u64,
    pub model_sha256: String,
    /// Aggregator TCP address when the session runs over TCP.
    pub aggregator_addr: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QueryBatch {
    pub queries: Vec<QueryRequest>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QueryAnswer {
    pub query_id: u64,
    pub ranked: Vec<RankedSyndrome>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QueryResponse {
    pub session_id: String,
    pub answers: Vec<QueryAnswer>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SessionClosed {
    pub session_id: String,
    pub result: RepeatResult,
    pub events: Vec<String>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AttackRequest {
    #[serde(default)]
    pub config: ExperimentConfig,
    #[serde(default)]
    pub attack: AttackConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackResponse {
    pub report: AttackReport,
    pub pairs_csv: String,
}

/// Either an explicit list of configs, or the default grid around `base`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GridRequest {
    #[serde(default)]
    pub configs: Option<Vec<ExperimentConfig>>,
    #[serde(default)]
    pub base: Option<ExperimentConfig>,
}

pub type GridResponse = GridOutcome;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
}
