//! Silo client: a sequential state machine over any [`Link`].

use std::path::PathBuf;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::message::{decode_message, encode_message, Body, HelloRole, Message, RankedSyndrome, WireMatrix, WireWords};
use super::transport::Link;
use super::NetError;
use crate::fixed::{encode_fixed, FixedError, RingVec, DEFAULT_SCALE_BITS};
use crate::flake::{
    check_norms, gen_common_mask, mask_embeddings, sample_left_inverse, CommonMask, FlakeError, LeftInverse, Matrix,
    RowMeta, DEFAULT_EXTRA_DIMS,
};
use crate::inference::Subgroup;
use crate::model::{embed_batch, train_local, EnsembleModel, LabeledSet, ModelError, SgdConfig};
use crate::rng::derive_rng;
use crate::secagg::{gen_round_masks, mask_local, unmask_global, SecAggError};

#[derive(Debug, Error)]
pub enum SiloError {
    #[error("silo {0} has an empty train split")]
    EmptyTrain(usize),
    #[error("connection lost ({source}); state saved to {state_file:?}")]
    ConnectionLost {
        source: NetError,
        state_file: Option<PathBuf>,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    SecAgg(#[from] SecAggError),
    #[error(transparent)]
    Fixed(#[from] FixedError),
    #[error(transparent)]
    Flake(#[from] FlakeError),
    #[error("state file: {0}")]
    State(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiloConfig {
    pub session_id: String,
    pub silo_id: usize,
    pub n_silos: usize,
    /// Seed shared by all silos (and handed to late joiners); the aggregator never sees it.
    pub seed: u64,
    pub local_epochs: usize,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default = "default_scale_bits")]
    pub scale_bits: u32,
    #[serde(default = "default_extra_dims")]
    pub flake_extra_dims: usize,
    #[serde(default)]
    pub state_file: Option<PathBuf>,
    /// Keep plaintext local models and embeddings for leak audits.
    #[serde(default)]
    pub record_plaintext: bool,
}

fn default_scale_bits() -> u32 {
    DEFAULT_SCALE_BITS
}

fn default_extra_dims() -> usize {
    DEFAULT_EXTRA_DIMS
}

/// A silo's training rows plus the test/gallery rows it contributes.
#[derive(Clone, Debug)]
pub struct SiloData {
    pub train: LabeledSet,
    pub shared: Vec<(RowMeta, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub query_id: u64,
    pub features: Vec<f64>,
    pub k: usize,
}

/// Written when the link drops; restart by passing `model` back as the init.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiloState {
    pub session_id: String,
    pub silo_id: usize,
    pub completed_rounds: u64,
    pub model: EnsembleModel,
}

impl SiloState {
    pub fn load(path: &std::path::Path) -> Result<Self, SiloError> {
        let text = std::fs::read_to_string(path).map_err(|e| SiloError::State(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| SiloError::State(e.to_string()))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlaintextTrace {
    pub local_models: Vec<Vec<f64>>,
    pub embeddings: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiloOutcome {
    pub model: EnsembleModel,
    pub rounds: u64,
    pub loss_history: Vec<f64>,
    pub responses: Vec<(u64, Vec<RankedSyndrome>)>,
    pub notices: Vec<Subgroup>,
    pub plaintext: Option<PlaintextTrace>,
}

/// One local step of federated training: every member trains `epochs` on
/// `data` from a stream keyed by round and member. The centralized baseline
/// calls the same function, so both paths draw identical shuffles, and
/// silos holding identical data produce identical models.
pub fn local_round(
    model: &EnsembleModel,
    data: &LabeledSet,
    epochs: usize,
    sgd: SgdConfig,
    seed: u64,
    round: u64,
) -> Result<(EnsembleModel, Vec<f64>), ModelError> {
    let mut members = Vec::with_capacity(model.len());
    let mut losses = Vec::new();
    for (m, (cfg, params)) in model.members.iter().enumerate() {
        let mut rng = derive_rng(seed, format!("train/r={round}/m={m}"));
        let (p, hist) = train_local(params, cfg, data, epochs, sgd, &mut rng)?;
        losses.extend(hist);
        members.push((cfg.clone(), p));
    }
    Ok((EnsembleModel { members }, losses))
}

/// Label of member `m`'s common mask.
pub fn common_mask_label(m: usize) -> String {
    format!("flake/common/m={m}")
}

pub fn common_masks(model: &EnsembleModel, seed: u64, extra_dims: usize) -> Result<Vec<CommonMask>, FlakeError> {
    model
        .members
        .iter()
        .enumerate()
        .map(|(m, (cfg, _))| gen_common_mask(seed, &common_mask_label(m), cfg.embed_dim, cfg.embed_dim + extra_dims))
        .collect()
}

/// The silo's own left inverses; the stream is keyed by silo id so no
/// other party can reproduce it without the seed.
pub fn silo_left_inverses(masks: &[CommonMask], seed: u64, silo: usize) -> Result<Vec<LeftInverse>, FlakeError> {
    masks
        .iter()
        .enumerate()
        .map(|(m, cm)| sample_left_inverse(cm, &mut derive_rng(seed, format!("flake/left/silo={silo}/m={m}"))))
        .collect()
}

/// Latents of `rows` for every member, one `rows x f` matrix each.
pub fn member_latents(model: &EnsembleModel, rows: &[&[f64]]) -> Result<Vec<Matrix>, ModelError> {
    model
        .members
        .iter()
        .map(|(cfg, params)| {
            let mut x = Array2::zeros((rows.len(), cfg.input_dim));
            for (i, r) in rows.iter().enumerate() {
                if r.len() != cfg.input_dim {
                    return Err(ModelError::Dimension {
                        expected: cfg.input_dim,
                        got: r.len(),
                    });
                }
                x.row_mut(i).assign(&ndarray::ArrayView1::from(*r));
            }
            let z = embed_batch(params, cfg, x.view())?;
            Ok(Matrix {
                rows: z.nrows(),
                cols: z.ncols(),
                data: z.iter().copied().collect(),
            })
        })
        .collect()
}

struct Session<'a, L: Link> {
    cfg: &'a SiloConfig,
    link: L,
    notices: Vec<Subgroup>,
}

impl<L: Link> Session<'_, L> {
    fn send(&mut self, body: Body) -> Result<(), NetError> {
        let msg = Message::new(&self.cfg.session_id, Some(self.cfg.silo_id), body);
        self.link.send(&encode_message(&msg)?)
    }

    /// Next message that is not a subgroup notice; aggregator errors surface as `Remote`.
    fn recv(&mut self) -> Result<Body, NetError> {
        loop {
            let payload = self.link.recv()?;
            let msg = decode_message(&payload)?;
            match msg.body {
                Body::SubgroupNotice { groups } => self.notices.extend(groups),
                Body::Error { code, message } => return Err(NetError::Remote { code, message }),
                body => return Ok(body),
            }
        }
    }

    fn query(
        &mut self,
        model: &EnsembleModel,
        lefts: &[LeftInverse],
        q: &QueryRequest,
    ) -> Result<Vec<RankedSyndrome>, SiloError> {
        let latents = member_latents(model, &[&q.features])?;
        let mut rows = Vec::with_capacity(latents.len());
        for (z, l) in latents.iter().zip(lefts) {
            check_norms(z)?;
            rows.push(WireMatrix(mask_embeddings(z, l)?));
        }
        self.send(Body::Query {
            query_id: q.query_id,
            k: q.k,
            rows,
        })?;
        match self.recv()? {
            Body::QueryResponse { query_id, ranked } if query_id == q.query_id => Ok(ranked),
            other => Err(NetError::Protocol(format!("expected query_response, got {other:?}")).into()),
        }
    }
}

fn save_state(cfg: &SiloConfig, model: &EnsembleModel, completed_rounds: u64) -> Option<PathBuf> {
    let path = cfg.state_file.clone()?;
    let state = SiloState {
        session_id: cfg.session_id.clone(),
        silo_id: cfg.silo_id,
        completed_rounds,
        model: model.clone(),
    };
    let text = serde_json::to_string(&state).ok()?;
    std::fs::write(&path, text).ok()?;
    Some(path)
}

fn lost(cfg: &SiloConfig, model: &EnsembleModel, rounds: u64, e: SiloError) -> SiloError {
    match e {
        SiloError::Net(source @ (NetError::Closed | NetError::Io(_))) => SiloError::ConnectionLost {
            source,
            state_file: save_state(cfg, model, rounds),
        },
        other => other,
    }
}

/// Full founding-silo protocol: hello, masked training rounds, masked
/// embedding upload (plus the helper matrices from silo 1), then queries.
pub fn run_silo<L: Link>(
    cfg: &SiloConfig,
    init: EnsembleModel,
    data: &SiloData,
    queries: &[QueryRequest],
    link: L,
) -> Result<SiloOutcome, SiloError> {
    if data.train.is_empty() {
        return Err(SiloError::EmptyTrain(cfg.silo_id));
    }
    let mut session = Session {
        cfg,
        link,
        notices: Vec::new(),
    };
    let mut model = init;
    let mut done = 0u64;
    let mut history = Vec::new();
    let mut trace = cfg.record_plaintext.then(PlaintextTrace::default);
    let result = (|| -> Result<Vec<(u64, Vec<RankedSyndrome>)>, SiloError> {
        session.send(Body::Hello {
            role: HelloRole::Founding,
        })?;
        let layout = model.flatten().layout().to_vec();
        loop {
            let (round, rounds) = match session.recv()? {
                Body::RoundStart { round, rounds } if round == done => (round, rounds),
                other => return Err(NetError::Protocol(format!("expected round_start {done}, got {other:?}")).into()),
            };
            let (local, losses) = local_round(&model, &data.train, cfg.local_epochs, cfg.sgd, cfg.seed, round)?;
            history.extend(losses);
            let flat = local.flatten();
            if let Some(t) = trace.as_mut() {
                t.local_models.push(flat.values().to_vec());
            }
            let masks = gen_round_masks(cfg.seed, round, cfg.n_silos, &layout, cfg.scale_bits)?;
            let masked = mask_local(&encode_fixed(&flat, cfg.scale_bits)?, cfg.silo_id, &masks)?;
            session.send(Body::MaskedModel {
                round,
                scale_bits: cfg.scale_bits,
                words: WireWords(masked.words.words),
            })?;
            let words = match session.recv()? {
                Body::MaskedGlobal { round: r, words, .. } if r == round => words,
                other => return Err(NetError::Protocol(format!("expected masked_global {round}, got {other:?}")).into()),
            };
            let sum = RingVec {
                words: words.0,
                scale_bits: cfg.scale_bits,
                layout: layout.clone(),
            };
            model = model.with_flat(&unmask_global(&sum, &masks)?)?;
            done = round + 1;
            if done >= rounds {
                break;
            }
        }

        let masks = common_masks(&model, cfg.seed, cfg.flake_extra_dims)?;
        let lefts = silo_left_inverses(&masks, cfg.seed, cfg.silo_id)?;
        let features: Vec<&[f64]> = data.shared.iter().map(|(_, x)| x.as_slice()).collect();
        let meta: Vec<RowMeta> = data.shared.iter().map(|(m, _)| m.clone()).collect();
        let latents = member_latents(&model, &features)?;
        for (m, (z, l)) in latents.iter().zip(&lefts).enumerate() {
            check_norms(z)?;
            if let Some(t) = trace.as_mut() {
                t.embeddings.extend_from_slice(&z.data);
            }
            let masked = if z.rows == 0 {
                Matrix::zeros(0, l.l.ncols())
            } else {
                mask_embeddings(z, l)?
            };
            session.send(Body::EmbeddingsUpload {
                member: m,
                rows: WireMatrix(masked),
                meta: meta.clone(),
            })?;
        }
        if cfg.silo_id == 1 {
            for (m, cm) in masks.iter().enumerate() {
                session.send(Body::HelperUpload {
                    member: m,
                    k: WireMatrix(cm.helper()),
                })?;
            }
        }
        queries
            .iter()
            .map(|q| Ok((q.query_id, session.query(&model, &lefts, q)?)))
            .collect()
    })();
    match result {
        Ok(responses) => Ok(SiloOutcome {
            model,
            rounds: done,
            loss_history: history,
            responses,
            notices: session.notices,
            plaintext: trace,
        }),
        Err(e) => Err(lost(cfg, &model, done, e)),
    }
}

/// A silo that joined after training: it holds the global model and the
/// shared seed, introduces itself, and only queries.
pub fn run_query_client<L: Link>(
    cfg: &SiloConfig,
    model: &EnsembleModel,
    queries: &[QueryRequest],
    link: L,
) -> Result<Vec<(u64, Vec<RankedSyndrome>)>, SiloError> {
    let mut session = Session {
        cfg,
        link,
        notices: Vec::new(),
    };
    session.send(Body::Hello { role: HelloRole::Late })?;
    let masks = common_masks(model, cfg.seed, cfg.flake_extra_dims)?;
    let lefts = silo_left_inverses(&masks, cfg.seed, cfg.silo_id)?;
    queries
        .iter()
        .map(|q| Ok((q.query_id, session.query(model, &lefts, q)?)))
        .collect()
}
