//! Experiment runner: the centralized baseline, federated sessions over
//! either transport, parameter grids, and report files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::net::SocketAddr;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use ndarray::Array2;

use crate::attack::{
    decode, reconstruction_report, train_decoder, AttackError, DecoderConfig, DecoderTraining, MinMaxScaler,
    ReconstructionReport,
};
use crate::data::{
    assign_silos, class_distribution_sd, classify_frequency, class_sizes, generate_synthetic, partition, split_dataset,
    DataError, DatasetConfig, FrequencyClass, Partition, PartitionScheme, PatientRecord, Split, SplitRatios,
};
use crate::fixed::{quantize, FixedError, DEFAULT_SCALE_BITS};
use crate::flake::{
    cosine_distance_matrix, ensemble_distance, plain_gram, DistanceMatrix, FlakeError, LabeledMatrix, RowMeta,
    DEFAULT_EXTRA_DIMS,
};
use crate::inference::{
    cluster_metrics, discover_subgroups, evaluate_setting, ClusterMetrics, EvalReport, InferenceError, MetricScope,
    Setting, Subgroup, DEFAULT_K_LIST,
};
use crate::model::{EncoderConfig, EnsembleModel, LabeledSet, LossKind, ModelError, SgdConfig};
use crate::net::{
    bind_address, local_round, member_latents, run_query_client, run_silo, AggregatorConfig, AggregatorCore,
    AggregatorHandle, InProcConnector, Link, NetError, QueryRequest, RankedSyndrome, SiloConfig, SiloData, SiloError,
    SiloOutcome, TcpLink,
};
use crate::nn::Activation;
use crate::rng::derive_rng;

#[derive(Debug, Error)]
pub enum OrchestrateError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fixed(#[from] FixedError),
    #[error(transparent)]
    Flake(#[from] FlakeError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("silo {silo}: {source}")]
    Silo { silo: usize, source: SiloError },
    #[error("session failed: {0}")]
    Session(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    #[default]
    Inproc,
    Tcp,
}

/// Encoder architecture; input width and class count come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSpec {
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
    pub loss: LossKind,
    pub margin: f64,
    pub scale: f64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        let d = EncoderConfig::default();
        Self {
            hidden_dims: d.hidden_dims,
            embed_dim: d.embed_dim,
            activation: d.activation,
            loss: d.loss,
            margin: d.margin,
            scale: d.scale,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupConfig {
    pub tau: f64,
    pub min_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetConfig,
    pub split: SplitRatios,
    pub n_silos: usize,
    /// Local epochs between aggregations (`E`).
    pub aggregation_interval: usize,
    pub total_epochs: usize,
    pub scheme: PartitionScheme,
    pub ensemble_size: usize,
    pub encoder: EncoderSpec,
    pub sgd: SgdConfig,
    pub k_list: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
    pub scale_bits: u32,
    pub flake_extra_dims: usize,
    pub transport: Transport,
    pub subgroups: Option<SubgroupConfig>,
    /// Aggregator bind address for TCP runs; `FEDGM_BIND` takes precedence.
    pub bind: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            dataset: DatasetConfig::default(),
            split: SplitRatios::default(),
            n_silos: 8,
            aggregation_interval: 1,
            total_epochs: 50,
            scheme: PartitionScheme::NearUniform,
            ensemble_size: 2,
            encoder: EncoderSpec::default(),
            sgd: SgdConfig::default(),
            k_list: DEFAULT_K_LIST.to_vec(),
            repeats: 5,
            seed: 7,
            scale_bits: DEFAULT_SCALE_BITS,
            flake_extra_dims: DEFAULT_EXTRA_DIMS,
            transport: Transport::Inproc,
            subgroups: None,
            bind: None,
        }
    }
}

impl ExperimentConfig {
    /// Smaller data and encoder so the full default grid stays cheap.
    pub fn fast() -> Self {
        Self {
            name: "fast".into(),
            dataset: DatasetConfig {
                num_frequent_classes: 30,
                num_rare_classes: 15,
                frequent_max: 24,
                input_dim: 32,
                nuisance_dims: 8,
                ..DatasetConfig::default()
            },
            encoder: EncoderSpec {
                hidden_dims: vec![48],
                embed_dim: 32,
                ..EncoderSpec::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), OrchestrateError> {
        let bad = |m: &str| Err(OrchestrateError::Config(m.into()));
        if self.n_silos == 0 {
            return bad("n_silos must be at least 1");
        }
        if self.aggregation_interval == 0 || self.total_epochs == 0 {
            return bad("aggregation_interval and total_epochs must be positive");
        }
        if self.total_epochs % self.aggregation_interval != 0 {
            return bad("total_epochs must be a multiple of aggregation_interval");
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1");
        }
        if self.ensemble_size == 0 {
            return bad("ensemble_size must be at least 1");
        }
        if self.k_list.is_empty() || self.k_list.contains(&0) {
            return bad("k_list must hold positive values");
        }
        if let PartitionScheme::Dirichlet { alpha } = self.scheme {
            if !(alpha > 0.0) {
                return bad("dirichlet alpha must be positive");
            }
        }
        if let Some(s) = self.subgroups {
            if !(s.tau > 0.0 && s.tau < 2.0) || s.min_size < 2 {
                return bad("subgroups need tau in (0, 2) and min_size >= 2");
            }
        }
        Ok(())
    }

    pub fn rounds(&self) -> u64 {
        (self.total_epochs / self.aggregation_interval) as u64
    }

    /// Seed of repeat `r`.
    pub fn run_seed(&self, repeat: usize) -> u64 {
        self.seed.wrapping_add(repeat as u64)
    }

    pub fn encoder_config(&self, num_classes: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim: self.dataset.input_dim,
            hidden_dims: self.encoder.hidden_dims.clone(),
            embed_dim: self.encoder.embed_dim,
            num_classes,
            activation: self.encoder.activation,
            loss: self.encoder.loss,
            margin: self.encoder.margin,
            scale: self.encoder.scale,
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self.scheme {
            PartitionScheme::Dirichlet { alpha } => Some(alpha),
            _ => None,
        }
    }

    pub fn scheme_name(&self) -> &'static str {
        match self.scheme {
            PartitionScheme::NearUniform => "near_uniform",
            PartitionScheme::NonOverlapping => "non_overlapping",
            PartitionScheme::Dirichlet { .. } => "dirichlet",
        }
    }
}

/// Records with split and silo tags for one repeat.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub records: Vec<PatientRecord>,
    pub partition: Partition,
    pub frequent: BTreeSet<usize>,
    /// Frequent syndrome -> head index.
    pub class_index: BTreeMap<usize, usize>,
}

impl PreparedData {
    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    fn labeled(&self, rows: &[&PatientRecord], input_dim: usize) -> LabeledSet {
        let pairs: Vec<(&[f64], usize)> = rows
            .iter()
            .map(|r| (r.features.as_slice(), self.class_index[&r.syndrome]))
            .collect();
        LabeledSet::new(&pairs, input_dim)
    }

    /// Pooled train rows in id order.
    pub fn central_train(&self, input_dim: usize) -> LabeledSet {
        let rows: Vec<&PatientRecord> = self.records.iter().filter(|r| r.split == Some(Split::Train)).collect();
        self.labeled(&rows, input_dim)
    }

    pub fn silo_train(&self, silo: usize, input_dim: usize) -> LabeledSet {
        let rows: Vec<&PatientRecord> = self
            .records
            .iter()
            .filter(|r| r.split == Some(Split::Train) && r.silo == Some(silo))
            .collect();
        self.labeled(&rows, input_dim)
    }

    /// Test and gallery rows held by `silo`, in id order.
    pub fn silo_shared(&self, silo: usize) -> Vec<(RowMeta, Vec<f64>)> {
        self.records
            .iter()
            .filter(|r| r.silo == Some(silo) && matches!(r.split, Some(Split::Test | Split::Gallery)))
            .map(|r| (row_meta(r), r.features.clone()))
            .collect()
    }

    /// All test and gallery rows in the order a federated session pools them.
    pub fn eval_rows(&self) -> Vec<(RowMeta, Vec<f64>)> {
        (1..=self.partition.silos()).flat_map(|s| self.silo_shared(s)).collect()
    }

    pub fn mean_class_sd(&self) -> f64 {
        let sd = class_distribution_sd(&self.partition, &self.records);
        if sd.is_empty() {
            0.0
        } else {
            sd.values().sum::<f64>() / sd.len() as f64
        }
    }
}

fn row_meta(r: &PatientRecord) -> RowMeta {
    RowMeta {
        id: r.id,
        label: r.syndrome,
        silo: r.silo.unwrap_or(1),
        split: r.split.unwrap_or(Split::Gallery),
    }
}

/// Frequent syndromes of `records` and their head indices.
pub fn frequent_classes(records: &[PatientRecord]) -> (BTreeSet<usize>, BTreeMap<usize, usize>) {
    let frequent: BTreeSet<usize> = class_sizes(records)
        .into_iter()
        .filter(|&(_, n)| classify_frequency(n) == FrequencyClass::Frequent)
        .map(|(c, _)| c)
        .collect();
    let index = frequent.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    (frequent, index)
}

/// Splits, partitions train rows over `n` silos and deals the rest.
pub fn prepare(
    base: &[PatientRecord],
    cfg: &ExperimentConfig,
    n: usize,
    seed: u64,
) -> Result<PreparedData, OrchestrateError> {
    let split = split_dataset(base, cfg.split, seed)?;
    let train: Vec<&PatientRecord> = split.iter().filter(|r| r.split == Some(Split::Train)).collect();
    let part = partition(&train, n, cfg.scheme, seed)?;
    let records = assign_silos(&split, &part, seed);
    let (frequent, class_index) = frequent_classes(&records);
    if class_index.is_empty() {
        return Err(OrchestrateError::Config("dataset has no frequent syndromes".into()));
    }
    Ok(PreparedData {
        records,
        partition: part,
        frequent,
        class_index,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScopedMetrics {
    pub scope: MetricScope,
    pub metrics: ClusterMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub repeat: usize,
    pub seed: u64,
    pub reports: Vec<EvalReport>,
    pub cluster: Vec<ScopedMetrics>,
    /// SHA-256 of the final ensemble checkpoint.
    pub model_sha256: String,
    pub mean_class_sd: f64,
    pub final_train_loss: f64,
    #[serde(default)]
    pub subgroups: Vec<Subgroup>,
}

impl RepeatResult {
    pub fn accuracy(&self, setting: Setting, k: usize) -> Option<f64> {
        self.reports
            .iter()
            .find(|r| r.setting == setting)
            .and_then(|r| r.topk_acc.get(&k).copied())
    }

    pub fn cluster(&self, scope: MetricScope) -> Option<ClusterMetrics> {
        self.cluster.iter().find(|c| c.scope == scope).map(|c| c.metrics)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub setting: Setting,
    pub k: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub scope: MetricScope,
    pub intra_mean: f64,
    pub intra_std: f64,
    pub inter_mean: f64,
    pub inter_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub setting: Setting,
    pub k: usize,
    pub federated: f64,
    pub centralized: f64,
    pub ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Centralized,
    Federated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: RunMode,
    pub config: ExperimentConfig,
    pub repeats: Vec<RepeatResult>,
    pub summary: Vec<MetricSummary>,
    pub cluster_summary: Vec<ClusterSummary>,
    #[serde(default)]
    pub ratio_to_centralized: Option<Vec<RatioRow>>,
    pub wall_time_s: f64,
}

impl RunReport {
    fn assemble(mode: RunMode, config: &ExperimentConfig, repeats: Vec<RepeatResult>, started: Instant) -> Self {
        let mut summary = Vec::new();
        for setting in Setting::ALL {
            for &k in &config.k_list {
                let v: Vec<f64> = repeats.iter().filter_map(|r| r.accuracy(setting, k)).collect();
                if v.len() == repeats.len() {
                    let (mean, std) = mean_std(&v);
                    summary.push(MetricSummary { setting, k, mean, std });
                }
            }
        }
        let cluster_summary = [MetricScope::Test, MetricScope::RareGallery, MetricScope::TestAndRareGallery]
            .into_iter()
            .filter_map(|scope| {
                let m: Vec<ClusterMetrics> = repeats.iter().filter_map(|r| r.cluster(scope)).collect();
                (m.len() == repeats.len()).then(|| {
                    let (intra_mean, intra_std) = mean_std(&m.iter().map(|c| c.intra).collect::<Vec<_>>());
                    let (inter_mean, inter_std) = mean_std(&m.iter().map(|c| c.inter).collect::<Vec<_>>());
                    ClusterSummary {
                        scope,
                        intra_mean,
                        intra_std,
                        inter_mean,
                        inter_std,
                    }
                })
            })
            .collect();
        Self {
            mode,
            config: config.clone(),
            repeats,
            summary,
            cluster_summary,
            ratio_to_centralized: None,
            wall_time_s: started.elapsed().as_secs_f64(),
        }
    }

    pub fn mean(&self, setting: Setting, k: usize) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.setting == setting && s.k == k)
            .map(|s| s.mean)
    }

    /// Attaches `federated / centralized` for every shared (setting, k).
    pub fn with_baseline(mut self, baseline: &RunReport) -> Self {
        let rows = self
            .summary
            .iter()
            .filter_map(|s| {
                let c = baseline.mean(s.setting, s.k)?;
                Some(RatioRow {
                    setting: s.setting,
                    k: s.k,
                    federated: s.mean,
                    centralized: c,
                    ratio: if c > 0.0 { s.mean / c } else { f64::NAN },
                })
            })
            .collect();
        self.ratio_to_centralized = Some(rows);
        self
    }

    /// The report with wall time zeroed: a pure function of config and seed.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_time_s: 0.0,
            ..self.clone()
        }
    }

    pub fn all_monotone(&self) -> bool {
        self.repeats.iter().flat_map(|r| &r.reports).all(EvalReport::is_monotone)
            && Setting::ALL.iter().all(|&s| {
                let means: Vec<f64> = self.summary.iter().filter(|m| m.setting == s).map(|m| m.mean).collect();
                means.windows(2).all(|w| w[0] <= w[1])
            })
    }

    /// `setting,k,accuracy,n_test,seed`, one line per repeat and cell.
    pub fn eval_csv(&self) -> String {
        eval_csv(self.repeats.iter().flat_map(|r| &r.reports))
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("setting,k,mean,std,repeats\n");
        for s in &self.summary {
            let _ = writeln!(out, "{},{},{},{},{}", s.setting, s.k, s.mean, s.std, self.repeats.len());
        }
        out
    }

    /// Writes `report.json`, `eval.csv` and `summary.csv` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), OrchestrateError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        std::fs::write(dir.join("eval.csv"), self.eval_csv())?;
        std::fs::write(dir.join("summary.csv"), self.summary_csv())?;
        Ok(())
    }
}

pub fn eval_csv<'a>(reports: impl IntoIterator<Item = &'a EvalReport>) -> String {
    let mut out = String::from("setting,k,accuracy,n_test,seed\n");
    for r in reports {
        for (k, acc) in &r.topk_acc {
            let _ = writeln!(out, "{},{},{},{},{}", r.setting, k, acc, r.n_test, r.seed);
        }
    }
    out
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn model_digest(model: &EnsembleModel) -> String {
    let bytes = model.flatten().to_checkpoint_bytes();
    Sha256::digest(&bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Plaintext distance matrix of `rows` under `model` (mean over members).
pub fn plaintext_distance(model: &EnsembleModel, rows: &[(RowMeta, Vec<f64>)]) -> Result<DistanceMatrix, OrchestrateError> {
    let features: Vec<&[f64]> = rows.iter().map(|(_, x)| x.as_slice()).collect();
    let meta: Vec<RowMeta> = rows.iter().map(|(m, _)| m.clone()).collect();
    let per_member = member_latents(model, &features)?
        .iter()
        .map(|z| {
            cosine_distance_matrix(&LabeledMatrix {
                values: plain_gram(z),
                meta: meta.clone(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ensemble_distance(&per_member)?)
}

/// All four settings plus cluster metrics for one distance matrix.
pub fn evaluate_distance(
    d: &DistanceMatrix,
    frequent: &BTreeSet<usize>,
    k_list: &[usize],
    seed: u64,
) -> Result<(Vec<EvalReport>, Vec<ScopedMetrics>), OrchestrateError> {
    let reports = Setting::ALL
        .iter()
        .map(|&s| evaluate_setting(d, s, frequent, k_list, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let cluster = [MetricScope::Test, MetricScope::RareGallery, MetricScope::TestAndRareGallery]
        .into_iter()
        .filter_map(|scope| {
            cluster_metrics(d, &scope.rows(d, frequent))
                .ok()
                .map(|metrics| ScopedMetrics { scope, metrics })
        })
        .collect();
    Ok((reports, cluster))
}

pub fn init_ensemble(cfg: &ExperimentConfig, num_classes: usize, seed: u64) -> Result<EnsembleModel, OrchestrateError> {
    let enc = cfg.encoder_config(num_classes);
    enc.validate()?;
    Ok(EnsembleModel::init(&enc, cfg.ensemble_size, &derive_rng(seed, "init"))?)
}

/// Pooled training with the federated schedule: `rounds` blocks of `E`
/// epochs, quantized to the fixed-point grid at every block boundary exactly
/// as an unmasked aggregate would be.
pub fn train_centralized(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    seed: u64,
) -> Result<(EnsembleModel, Vec<f64>), OrchestrateError> {
    let train = data.central_train(cfg.dataset.input_dim);
    if train.is_empty() {
        return Err(OrchestrateError::Config("no training rows".into()));
    }
    let mut model = init_ensemble(cfg, data.num_classes(), seed)?;
    let mut history = Vec::new();
    for round in 0..cfg.rounds() {
        let (local, losses) = local_round(&model, &train, cfg.aggregation_interval, cfg.sgd, seed, round)?;
        history.extend(losses);
        model = local.with_flat(&quantize(&local.flatten(), cfg.scale_bits)?)?;
    }
    Ok((model, history))
}

pub fn generate_base(cfg: &ExperimentConfig) -> Result<Vec<PatientRecord>, OrchestrateError> {
    Ok(generate_synthetic(&cfg.dataset)?)
}

/// One centralized repeat; also returns the trained model.
pub fn centralized_repeat(
    cfg: &ExperimentConfig,
    base: &[PatientRecord],
    repeat: usize,
) -> Result<(RepeatResult, EnsembleModel), OrchestrateError> {
    let seed = cfg.run_seed(repeat);
    let data = prepare(base, cfg, 1, seed)?;
    let (model, history) = train_centralized(cfg, &data, seed)?;
    let d = plaintext_distance(&model, &data.eval_rows())?;
    let (reports, cluster) = evaluate_distance(&d, &data.frequent, &cfg.k_list, seed)?;
    let subgroups = cfg
        .subgroups
        .map(|s| discover_subgroups(&d, &(0..d.meta.len()).collect::<Vec<_>>(), s.tau, s.min_size))
        .unwrap_or_default();
    Ok((
        RepeatResult {
            repeat,
            seed,
            reports,
            cluster,
            model_sha256: model_digest(&model),
            mean_class_sd: 0.0,
            final_train_loss: history.last().copied().unwrap_or(f64::NAN),
            subgroups,
        },
        model,
    ))
}

pub fn run_centralized(cfg: &ExperimentConfig) -> Result<RunReport, OrchestrateError> {
    run_centralized_with_models(cfg).map(|(report, _)| report)
}

/// As [`run_centralized`], also returning each repeat's trained model.
pub fn run_centralized_with_models(cfg: &ExperimentConfig) -> Result<(RunReport, Vec<EnsembleModel>), OrchestrateError> {
    cfg.validate()?;
    let started = Instant::now();
    let base = generate_base(cfg)?;
    let (repeats, models): (Vec<_>, Vec<_>) = (0..cfg.repeats)
        .map(|r| centralized_repeat(cfg, &base, r))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .unzip();
    Ok((RunReport::assemble(RunMode::Centralized, cfg, repeats, started), models))
}

/// Extra inputs for a federated session.
#[derive(Clone, Debug, Default)]
pub struct SessionOptions {
    pub record_plaintext: bool,
    /// Queries issued by founding silo `i` (index `i - 1`) after uploading.
    pub silo_queries: Vec<Vec<QueryRequest>>,
    /// Queries issued by a late-joining silo after training.
    pub late_queries: Vec<QueryRequest>,
    pub state_dir: Option<std::path::PathBuf>,
}

/// Everything a federated repeat produced, for tests and audits.
#[derive(Debug)]
pub struct FederatedArtifacts {
    pub result: RepeatResult,
    pub model: EnsembleModel,
    pub distance: DistanceMatrix,
    pub data: PreparedData,
    pub silos: Vec<SiloOutcome>,
    pub late_responses: Vec<(u64, Vec<RankedSyndrome>)>,
    pub aggregator_dump: serde_json::Value,
    /// Every payload the aggregator received; empty unless plaintext is recorded.
    pub aggregator_transcript: Vec<Vec<u8>>,
}

/// A running aggregator with its gallery built, ready for late queries.
pub struct LiveSession {
    handle: AggregatorHandle,
    connector: Option<InProcConnector>,
    addr: Option<SocketAddr>,
    pub session_id: String,
    pub seed: u64,
    pub model: EnsembleModel,
    pub silos: Vec<SiloOutcome>,
    n_silos: usize,
    extra_dims: usize,
    next_late: usize,
}

impl LiveSession {
    fn link(&self) -> Result<Box<dyn Link>, OrchestrateError> {
        match (&self.connector, self.addr) {
            (Some(c), _) => Ok(Box::new(c.connect())),
            (None, Some(addr)) => Ok(Box::new(TcpLink::connect(addr)?)),
            (None, None) => Err(OrchestrateError::Session("no transport".into())),
        }
    }

    fn late_config(&mut self) -> SiloConfig {
        self.next_late += 1;
        SiloConfig {
            session_id: self.session_id.clone(),
            silo_id: self.n_silos + self.next_late,
            n_silos: self.n_silos,
            seed: self.seed,
            local_epochs: 1,
            sgd: SgdConfig::default(),
            scale_bits: DEFAULT_SCALE_BITS,
            flake_extra_dims: self.extra_dims,
            state_file: None,
            record_plaintext: false,
        }
    }

    /// Queries as a newly onboarded silo holding the global model and seed.
    pub fn late_query(&mut self, queries: &[QueryRequest]) -> Result<Vec<(u64, Vec<RankedSyndrome>)>, OrchestrateError> {
        let cfg = self.late_config();
        let link = self.link()?;
        run_query_client(&cfg, &self.model, queries, link).map_err(|source| OrchestrateError::Silo {
            silo: cfg.silo_id,
            source,
        })
    }

    pub fn local_addr(&self) -> Option<SocketAddr> {
        self.addr
    }

    pub fn finish(self) -> AggregatorCore {
        self.handle.finish()
    }
}

/// Starts an aggregator, runs every founding silo to completion and returns
/// the live session.
pub fn start_session(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    seed: u64,
    opts: &SessionOptions,
) -> Result<LiveSession, OrchestrateError> {
    let n = cfg.n_silos;
    let session_id = format!("{}-{seed}", cfg.name);
    let agg_cfg = AggregatorConfig {
        session_id: session_id.clone(),
        n_silos: n,
        rounds: cfg.rounds(),
        members: cfg.ensemble_size,
        subgroups: cfg.subgroups.map(|s| (s.tau, s.min_size)),
    };
    let silo_data: Vec<SiloData> = (1..=n)
        .map(|s| SiloData {
            train: data.silo_train(s, cfg.dataset.input_dim),
            shared: data.silo_shared(s),
        })
        .collect();
    if let Some(i) = silo_data.iter().position(|d| d.train.is_empty()) {
        return Err(OrchestrateError::Silo {
            silo: i + 1,
            source: SiloError::EmptyTrain(i + 1),
        });
    }
    let init = init_ensemble(cfg, data.num_classes(), seed)?;
    let mut core = AggregatorCore::new(agg_cfg);
    if opts.record_plaintext {
        core.keep_transcript();
    }
    let (handle, connector, addr) = match cfg.transport {
        Transport::Inproc => {
            let (h, c) = AggregatorHandle::spawn_inproc(core);
            (h, Some(c), None)
        }
        Transport::Tcp => {
            let bind = bind_address(Some(cfg.bind.as_deref().unwrap_or("127.0.0.1:0")))?;
            let h = AggregatorHandle::spawn_tcp(core, bind)?;
            let addr = h.local_addr();
            (h, None, addr)
        }
    };
    let mut session = LiveSession {
        handle,
        connector,
        addr,
        session_id: session_id.clone(),
        seed,
        model: init.clone(),
        silos: Vec::new(),
        n_silos: n,
        extra_dims: cfg.flake_extra_dims,
        next_late: 0,
    };
    let links = (0..n).map(|_| session.link()).collect::<Result<Vec<_>, _>>();
    let links = match links {
        Ok(l) => l,
        Err(e) => {
            session.finish();
            return Err(e);
        }
    };
    let results: Vec<Result<SiloOutcome, SiloError>> = std::thread::scope(|scope| {
        let workers: Vec<_> = links
            .into_iter()
            .zip(&silo_data)
            .enumerate()
            .map(|(i, (link, sd))| {
                let silo_cfg = SiloConfig {
                    session_id: session_id.clone(),
                    silo_id: i + 1,
                    n_silos: n,
                    seed,
                    local_epochs: cfg.aggregation_interval,
                    sgd: cfg.sgd,
                    scale_bits: cfg.scale_bits,
                    flake_extra_dims: cfg.flake_extra_dims,
                    state_file: opts.state_dir.as_ref().map(|d| d.join(format!("silo-{}.json", i + 1))),
                    record_plaintext: opts.record_plaintext,
                };
                let queries = opts.silo_queries.get(i).cloned().unwrap_or_default();
                let init = init.clone();
                scope.spawn(move || run_silo(&silo_cfg, init, sd, &queries, link))
            })
            .collect();
        workers
            .into_iter()
            .map(|w| w.join().expect("silo thread panicked"))
            .collect()
    });
    let mut outcomes = Vec::with_capacity(n);
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(o) => outcomes.push(o),
            Err(source) => {
                session.finish();
                return Err(OrchestrateError::Silo { silo: i + 1, source });
            }
        }
    }
    let digest = model_digest(&outcomes[0].model);
    if outcomes.iter().any(|o| model_digest(&o.model) != digest) {
        session.finish();
        return Err(OrchestrateError::Session("silos disagree on the global model".into()));
    }
    session.model = outcomes[0].model.clone();
    session.silos = outcomes;
    Ok(session)
}

/// One federated repeat over the configured transport.
pub fn federated_repeat(
    cfg: &ExperimentConfig,
    base: &[PatientRecord],
    repeat: usize,
    opts: &SessionOptions,
) -> Result<FederatedArtifacts, OrchestrateError> {
    let seed = cfg.run_seed(repeat);
    let data = prepare(base, cfg, cfg.n_silos, seed)?;
    let mut session = start_session(cfg, &data, seed, opts)?;
    let late_responses = if opts.late_queries.is_empty() {
        Vec::new()
    } else {
        match session.late_query(&opts.late_queries) {
            Ok(r) => r,
            Err(e) => {
                session.finish();
                return Err(e);
            }
        }
    };
    let model = session.model.clone();
    let silos = std::mem::take(&mut session.silos);
    let core = session.finish();
    let outcome = core
        .outcome()
        .ok_or_else(|| OrchestrateError::Session(format!("gallery was not built: {:?}", core.events().last())))?;
    let distance = outcome.distance.clone();
    let (reports, cluster) = evaluate_distance(&distance, &data.frequent, &cfg.k_list, seed)?;
    let result = RepeatResult {
        repeat,
        seed,
        reports,
        cluster,
        model_sha256: model_digest(&model),
        mean_class_sd: data.mean_class_sd(),
        final_train_loss: silos
            .iter()
            .filter_map(|s| s.loss_history.last())
            .sum::<f64>()
            / silos.len() as f64,
        subgroups: outcome.subgroups.clone(),
    };
    Ok(FederatedArtifacts {
        result,
        model,
        distance,
        data,
        silos,
        late_responses,
        aggregator_dump: core.state_dump(),
        aggregator_transcript: core.transcript().to_vec(),
    })
}

pub fn run_federated(cfg: &ExperimentConfig, baseline: Option<&RunReport>) -> Result<RunReport, OrchestrateError> {
    run_federated_with_models(cfg, baseline).map(|(report, _)| report)
}

/// As [`run_federated`], also returning each repeat's global model.
pub fn run_federated_with_models(
    cfg: &ExperimentConfig,
    baseline: Option<&RunReport>,
) -> Result<(RunReport, Vec<EnsembleModel>), OrchestrateError> {
    cfg.validate()?;
    let started = Instant::now();
    let base = generate_base(cfg)?;
    let (repeats, models): (Vec<_>, Vec<_>) = (0..cfg.repeats)
        .map(|r| federated_repeat(cfg, &base, r, &SessionOptions::default()).map(|a| (a.result, a.model)))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .unzip();
    let report = RunReport::assemble(RunMode::Federated, cfg, repeats, started);
    let report = match baseline {
        Some(b) => report.with_baseline(b),
        None => report,
    };
    Ok((report, models))
}

/// Plaintext evaluation of a trained ensemble on the rows of repeat `repeat`.
pub fn evaluate_model(
    cfg: &ExperimentConfig,
    model: &EnsembleModel,
    repeat: usize,
) -> Result<(PreparedData, Vec<EvalReport>, Vec<ScopedMetrics>), OrchestrateError> {
    cfg.validate()?;
    let seed = cfg.run_seed(repeat);
    let data = prepare(&generate_base(cfg)?, cfg, cfg.n_silos, seed)?;
    let d = plaintext_distance(model, &data.eval_rows())?;
    let (reports, cluster) = evaluate_distance(&d, &data.frequent, &cfg.k_list, seed)?;
    Ok((data, reports, cluster))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub config: String,
    pub scheme: String,
    pub n_silos: usize,
    pub interval: usize,
    pub alpha: Option<f64>,
    pub k: usize,
    pub setting: Setting,
    pub mean: f64,
    pub std: f64,
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFailure {
    pub index: usize,
    pub config: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub rows: Vec<GridRow>,
    pub failures: Vec<GridFailure>,
    pub reports: Vec<Option<RunReport>>,
}

impl GridOutcome {
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("config,scheme,n_silos,interval,alpha,k,setting,mean,std,repeats\n");
        for r in &self.rows {
            let alpha = r.alpha.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.config, r.scheme, r.n_silos, r.interval, alpha, r.k, r.setting, r.mean, r.std, r.repeats
            );
        }
        out
    }

    /// `summary.csv`, `failures.json` and one directory per successful config.
    pub fn write_to(&self, dir: &Path) -> Result<(), OrchestrateError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("summary.csv"), self.summary_csv())?;
        std::fs::write(dir.join("failures.json"), serde_json::to_string_pretty(&self.failures)?)?;
        for (i, report) in self.reports.iter().enumerate() {
            if let Some(r) = report {
                r.write_to(&dir.join(format!("{i:03}-{}", r.config.name)))?;
            }
        }
        Ok(())
    }
}

fn grid_rows(cfg: &ExperimentConfig, report: &RunReport) -> Vec<GridRow> {
    let mut rows = Vec::new();
    for setting in Setting::ALL {
        for &k in &cfg.k_list {
            if let Some(s) = report.summary.iter().find(|s| s.setting == setting && s.k == k) {
                rows.push(GridRow {
                    config: cfg.name.clone(),
                    scheme: cfg.scheme_name().into(),
                    n_silos: cfg.n_silos,
                    interval: cfg.aggregation_interval,
                    alpha: cfg.alpha(),
                    k,
                    setting,
                    mean: s.mean,
                    std: s.std,
                    repeats: report.repeats.len(),
                });
            }
        }
    }
    rows
}

/// Runs every config in parallel; a failing config is recorded and the rest
/// continue.
pub fn run_grid(configs: &[ExperimentConfig]) -> GridOutcome {
    let results: Vec<Result<RunReport, OrchestrateError>> =
        configs.par_iter().map(|c| run_federated(c, None)).collect();
    let mut outcome = GridOutcome {
        rows: Vec::new(),
        failures: Vec::new(),
        reports: Vec::new(),
    };
    for (i, (cfg, r)) in configs.iter().zip(results).enumerate() {
        match r {
            Ok(report) => {
                outcome.rows.extend(grid_rows(cfg, &report));
                outcome.reports.push(Some(report));
            }
            Err(e) => {
                outcome.failures.push(GridFailure {
                    index: i,
                    config: cfg.name.clone(),
                    error: e.to_string(),
                });
                outcome.reports.push(None);
            }
        }
    }
    outcome
}

/// Silo counts {4, 8, 16} x intervals {1, 5, 10, 25, 50} x schemes
/// {near-uniform, non-overlapping, dirichlet 0.5/1/5/10}.
pub fn default_grid(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let schemes = [
        PartitionScheme::NearUniform,
        PartitionScheme::NonOverlapping,
        PartitionScheme::Dirichlet { alpha: 0.5 },
        PartitionScheme::Dirichlet { alpha: 1.0 },
        PartitionScheme::Dirichlet { alpha: 5.0 },
        PartitionScheme::Dirichlet { alpha: 10.0 },
    ];
    let mut out = Vec::new();
    for scheme in schemes {
        for n in [4, 8, 16] {
            for e in [1, 5, 10, 25, 50] {
                let mut c = base.clone();
                c.scheme = scheme;
                c.n_silos = n;
                c.aggregation_interval = e;
                c.name = match scheme {
                    PartitionScheme::Dirichlet { alpha } => format!("dirichlet{alpha}-n{n}-e{e}"),
                    _ => format!("{}-n{n}-e{e}", c.scheme_name()),
                };
                out.push(c);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub hidden_dims: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Ensemble member whose latents are attacked.
    pub member: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            hidden_dims: Vec::new(),
            epochs: 400,
            lr: 0.05,
            batch_size: 32,
            member: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub report: ReconstructionReport,
    pub train_pairs: usize,
    pub loss_history: Vec<f64>,
    /// Held-out `(input, reconstruction)` pairs on the scaled `[-1, 1]` grid.
    #[serde(skip)]
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AttackReport {
    pub fn pairs_csv(&self) -> String {
        let width = self.pairs.first().map_or(0, |p| p.0.len());
        let mut out = String::from("row");
        for j in 0..width {
            let _ = write!(out, ",x{j}");
        }
        for j in 0..width {
            let _ = write!(out, ",r{j}");
        }
        out.push('\n');
        for (i, (x, r)) in self.pairs.iter().enumerate() {
            let _ = write!(out, "{i}");
            for v in x.iter().chain(r) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Trains the centralized model of repeat 0, then a decoder from the plaintext
/// latents of train and val rows back to their (min-max scaled) inputs, and
/// scores it on the test and gallery rows.
pub fn attack_demo(cfg: &ExperimentConfig, attack: &AttackConfig) -> Result<AttackReport, OrchestrateError> {
    cfg.validate()?;
    let base = generate_base(cfg)?;
    let seed = cfg.run_seed(0);
    let data = prepare(&base, cfg, 1, seed)?;
    let (model, _) = train_centralized(cfg, &data, seed)?;
    if attack.member >= model.len() {
        return Err(OrchestrateError::Config(format!("no ensemble member {}", attack.member)));
    }
    let single = EnsembleModel {
        members: vec![model.members[attack.member].clone()],
    };
    let pick = |splits: &[Split]| -> Vec<&PatientRecord> {
        data.records
            .iter()
            .filter(|r| r.split.is_some_and(|s| splits.contains(&s)))
            .collect()
    };
    let fit_rows = pick(&[Split::Train, Split::Val]);
    let held_rows = pick(&[Split::Test, Split::Gallery]);
    let to_array = |rows: &[&PatientRecord]| {
        Array2::from_shape_fn((rows.len(), cfg.dataset.input_dim), |(i, j)| rows[i].features[j])
    };
    let latents = |rows: &[&PatientRecord]| -> Result<Array2<f64>, OrchestrateError> {
        let feats: Vec<&[f64]> = rows.iter().map(|r| r.features.as_slice()).collect();
        let z = member_latents(&single, &feats)?.remove(0);
        Ok(Array2::from_shape_vec((z.rows, z.cols), z.data).expect("row-major latents"))
    };
    let (x_fit, x_held) = (to_array(&fit_rows), to_array(&held_rows));
    let scaler = MinMaxScaler::fit(x_fit.view());
    let (t_fit, t_held) = (scaler.transform(x_fit.view()), scaler.transform(x_held.view()));
    let (z_fit, z_held) = (latents(&fit_rows)?, latents(&held_rows)?);
    let dcfg = DecoderConfig {
        embed_dim: cfg.encoder.embed_dim,
        hidden_dims: attack.hidden_dims.clone(),
        output_dim: cfg.dataset.input_dim,
        hidden_activation: Activation::Relu,
        output_activation: Activation::Tanh,
    };
    let training = DecoderTraining {
        epochs: attack.epochs,
        lr: attack.lr,
        batch_size: attack.batch_size,
        seed,
    };
    let (decoder, loss_history) = train_decoder(z_fit.view(), t_fit.view(), &dcfg, training)?;
    let recon = decode(&decoder, &dcfg, z_held.view());
    let report = reconstruction_report(&recon, t_held.view());
    let pairs = t_held
        .rows()
        .into_iter()
        .zip(recon.rows())
        .map(|(x, r)| (x.to_vec(), r.to_vec()))
        .collect();
    Ok(AttackReport {
        report,
        train_pairs: fit_rows.len(),
        loss_history,
        pairs,
    })
}

/// `id,syndrome,split,silo,member,z0..` rows for external plotting.
pub fn export_embeddings(model: &EnsembleModel, rows: &[(RowMeta, Vec<f64>)]) -> Result<String, OrchestrateError> {
    let features: Vec<&[f64]> = rows.iter().map(|(_, x)| x.as_slice()).collect();
    let latents = member_latents(model, &features)?;
    let width = latents.first().map_or(0, |z| z.cols);
    let mut out = String::from("id,syndrome,split,silo,member");
    for j in 0..width {
        let _ = write!(out, ",z{j}");
    }
    out.push('\n');
    for (m, z) in latents.iter().enumerate() {
        for (i, (meta, _)) in rows.iter().enumerate() {
            let split = serde_json::to_value(meta.split)?;
            let _ = write!(
                out,
                "{},{},{},{},{m}",
                meta.id,
                meta.label,
                split.as_str().unwrap_or_default(),
                meta.silo
            );
            for v in z.row(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    Ok(out)
}
