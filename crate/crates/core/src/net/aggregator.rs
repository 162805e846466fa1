//! Transport-independent aggregator. Transports feed it decoded connection
//! events and deliver the frames it returns; it never sees plaintext models
//! or embeddings and has no code path that could produce them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::frame::FrameError;
use super::message::{decode_message, encode_message, Body, HelloRole, Message, RankedSyndrome, WireMatrix, WireWords, PROTOCOL_VERSION};
use crate::data::Split;
use crate::fixed::RingVec;
use crate::flake::{compute_gram, cosine_distance_matrix, cross_gram, ensemble_distance, DistanceMatrix, Matrix, MaskedEmbeddings};
use crate::inference::{discover_subgroups, rank_unique, Subgroup};
use crate::param::Layer;
use crate::secagg::{aggregate_masked, MaskedModel};

pub type ConnId = u64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub session_id: String,
    pub n_silos: usize,
    pub rounds: u64,
    pub members: usize,
    /// `(tau, min_size)` for subgroup discovery over the pooled rows.
    #[serde(default)]
    pub subgroups: Option<(f64, usize)>,
}

/// A frame addressed to one connection.
#[derive(Clone, Debug, PartialEq)]
pub struct Outgoing {
    pub conn: ConnId,
    pub frame: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum Phase {
    Joining,
    Training,
    Collecting,
    Serving,
    Aborted,
}

struct MemberGallery {
    k: Matrix,
    rows: Matrix,
    diag: Vec<f64>,
}

/// Everything the aggregator learns once the gallery is built.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryOutcome {
    pub distance: DistanceMatrix,
    pub member_distances: Vec<DistanceMatrix>,
    pub subgroups: Vec<Subgroup>,
}

struct PendingQuery {
    conn: ConnId,
    silo: usize,
    query_id: u64,
    k: usize,
    rows: Vec<Matrix>,
}

pub struct AggregatorCore {
    cfg: AggregatorConfig,
    phase: Phase,
    open: BTreeSet<ConnId>,
    conn_silo: BTreeMap<ConnId, usize>,
    silo_conn: BTreeMap<usize, ConnId>,
    late: BTreeSet<usize>,
    round: u64,
    submissions: BTreeMap<usize, MaskedModel>,
    last_global: Option<RingVec>,
    uploads: BTreeMap<(usize, usize), MaskedEmbeddings>,
    helpers: BTreeMap<usize, Matrix>,
    gallery: Vec<MemberGallery>,
    gallery_rows: Vec<usize>,
    outcome: Option<GalleryOutcome>,
    pending: Vec<PendingQuery>,
    answered: u64,
    events: Vec<String>,
    transcript: Option<Vec<Vec<u8>>>,
}

impl AggregatorCore {
    pub fn new(cfg: AggregatorConfig) -> Self {
        Self {
            cfg,
            phase: Phase::Joining,
            open: BTreeSet::new(),
            conn_silo: BTreeMap::new(),
            silo_conn: BTreeMap::new(),
            late: BTreeSet::new(),
            round: 0,
            submissions: BTreeMap::new(),
            last_global: None,
            uploads: BTreeMap::new(),
            helpers: BTreeMap::new(),
            gallery: Vec::new(),
            gallery_rows: Vec::new(),
            outcome: None,
            pending: Vec::new(),
            answered: 0,
            events: Vec::new(),
            transcript: None,
        }
    }

    /// Keep a copy of every inbound payload, for audits of what the
    /// aggregator was able to see.
    pub fn keep_transcript(&mut self) {
        self.transcript.get_or_insert_with(Vec::new);
    }

    pub fn transcript(&self) -> &[Vec<u8>] {
        self.transcript.as_deref().unwrap_or(&[])
    }

    pub fn config(&self) -> &AggregatorConfig {
        &self.cfg
    }

    pub fn outcome(&self) -> Option<&GalleryOutcome> {
        self.outcome.as_ref()
    }

    pub fn is_aborted(&self) -> bool {
        self.phase == Phase::Aborted
    }

    pub fn open_connections(&self) -> usize {
        self.open.len()
    }

    pub fn events(&self) -> &[String] {
        &self.events
    }

    pub fn connected(&mut self, conn: ConnId) {
        self.open.insert(conn);
    }

    pub fn disconnected(&mut self, conn: ConnId) -> Vec<Outgoing> {
        self.open.remove(&conn);
        let Some(silo) = self.conn_silo.remove(&conn) else {
            return Vec::new();
        };
        if self.silo_conn.get(&silo) == Some(&conn) {
            self.silo_conn.remove(&silo);
        }
        self.pending.retain(|q| q.conn != conn);
        let founding = !self.late.contains(&silo);
        let owes_uploads = (0..self.cfg.members).any(|m| !self.uploads.contains_key(&(m, silo)))
            || (silo == 1 && self.helpers.len() < self.cfg.members);
        let midway = self.phase == Phase::Training || (self.phase == Phase::Collecting && owes_uploads);
        if founding && midway {
            self.events.push(format!("silo {silo} lost during {:?}", self.phase));
            self.phase = Phase::Aborted;
            return self.broadcast(
                self.error(None, "session_aborted", &format!("silo {silo} disconnected; session aborted")),
            );
        }
        Vec::new()
    }

    /// Handles one frame payload from `conn`.
    pub fn handle(&mut self, conn: ConnId, payload: &[u8]) -> Vec<Outgoing> {
        self.open.insert(conn);
        if let Some(t) = self.transcript.as_mut() {
            t.push(payload.to_vec());
        }
        let msg = match decode_message(payload) {
            Ok(m) => m,
            Err(FrameError::UnknownType(t)) => {
                return self.reply(conn, "unknown_type", &format!("unknown message type {t:?}"));
            }
            Err(e) => return self.reply(conn, "malformed", &e.to_string()),
        };
        if msg.protocol_version != PROTOCOL_VERSION {
            return self.reply(
                conn,
                "version_mismatch",
                &format!("protocol {} not supported, expected {PROTOCOL_VERSION}", msg.protocol_version),
            );
        }
        if msg.session_id != self.cfg.session_id {
            return self.reply(conn, "session_mismatch", &format!("unknown session {:?}", msg.session_id));
        }
        if self.phase == Phase::Aborted {
            return self.reply(conn, "session_aborted", "session aborted");
        }
        if let Body::Hello { role } = msg.body {
            return self.hello(conn, msg.silo_id, role);
        }
        let Some(&silo) = self.conn_silo.get(&conn) else {
            return self.reply(conn, "unknown_silo", "send hello before any other message");
        };
        if msg.silo_id.is_some_and(|s| s != silo) {
            return self.reply(conn, "silo_mismatch", &format!("connection belongs to silo {silo}"));
        }
        let founding = !self.late.contains(&silo);
        match msg.body {
            Body::MaskedModel {
                round,
                scale_bits,
                words,
            } if founding => self.masked_model(conn, silo, round, scale_bits, words),
            Body::EmbeddingsUpload { member, rows, meta } if founding => {
                self.embeddings(conn, silo, member, rows, meta)
            }
            Body::HelperUpload { member, k } if founding => self.helper(conn, silo, member, k),
            Body::Query { query_id, k, rows } => self.query(conn, silo, query_id, k, rows),
            _ => {
                let t = msg.type_name();
                self.reply(conn, "unexpected", &format!("{t} not accepted from silo {silo}"))
            }
        }
    }

    fn hello(&mut self, conn: ConnId, silo_id: Option<usize>, role: HelloRole) -> Vec<Outgoing> {
        let Some(silo) = silo_id else {
            return self.reply(conn, "unknown_silo", "hello without silo_id");
        };
        if self.conn_silo.contains_key(&conn) {
            return self.reply(conn, "unexpected", "connection already registered");
        }
        if self.silo_conn.contains_key(&silo) {
            return self.reply(conn, "duplicate_silo", &format!("silo {silo} is already connected"));
        }
        match role {
            HelloRole::Founding => {
                if silo == 0 || silo > self.cfg.n_silos {
                    return self.reply(
                        conn,
                        "unknown_silo",
                        &format!("founding silo ids are 1..={}", self.cfg.n_silos),
                    );
                }
                if self.phase != Phase::Joining {
                    return self.reply(conn, "unexpected", "training already started");
                }
            }
            HelloRole::Late => {
                if (1..=self.cfg.n_silos).contains(&silo) {
                    return self.reply(conn, "duplicate_silo", &format!("silo {silo} is a founding silo"));
                }
                self.late.insert(silo);
            }
        }
        self.conn_silo.insert(conn, silo);
        self.silo_conn.insert(silo, conn);
        self.events.push(format!("hello from silo {silo} ({role:?})"));
        let founding_ready = (1..=self.cfg.n_silos).all(|s| self.silo_conn.contains_key(&s));
        if self.phase == Phase::Joining && founding_ready {
            if self.cfg.rounds == 0 {
                self.phase = Phase::Collecting;
                return Vec::new();
            }
            self.phase = Phase::Training;
            return self.round_start();
        }
        Vec::new()
    }

    fn round_start(&mut self) -> Vec<Outgoing> {
        let msg = Message::new(
            &self.cfg.session_id,
            None,
            Body::RoundStart {
                round: self.round,
                rounds: self.cfg.rounds,
            },
        );
        self.broadcast(msg)
    }

    fn masked_model(&mut self, conn: ConnId, silo: usize, round: u64, scale_bits: u32, words: WireWords) -> Vec<Outgoing> {
        if self.phase != Phase::Training || round != self.round {
            return self.reply(
                conn,
                "wrong_round",
                &format!("submission for round {round}, current round {} ({:?})", self.round, self.phase),
            );
        }
        if self.submissions.contains_key(&silo) {
            return self.reply(conn, "duplicate_submission", &format!("silo {silo} already submitted round {round}"));
        }
        let len = words.0.len();
        if let Some(first) = self.submissions.values().next() {
            if first.words.len() != len || first.words.scale_bits != scale_bits {
                return self.reply(conn, "dimension", "masked model shape differs from other silos");
            }
        }
        self.submissions.insert(
            silo,
            MaskedModel {
                silo,
                round,
                words: RingVec {
                    words: words.0,
                    scale_bits,
                    layout: vec![Layer::new("masked", &[len])],
                },
            },
        );
        if self.submissions.len() < self.cfg.n_silos {
            return Vec::new();
        }
        let subs: Vec<MaskedModel> = std::mem::take(&mut self.submissions).into_values().collect();
        let sum = match aggregate_masked(&subs, self.cfg.n_silos) {
            Ok(s) => s,
            Err(e) => {
                self.phase = Phase::Aborted;
                return self.broadcast(self.error(None, "aggregation_failed", &e.to_string()));
            }
        };
        self.events.push(format!("round {round} aggregated"));
        let out = self.broadcast(Message::new(
            &self.cfg.session_id,
            None,
            Body::MaskedGlobal {
                round,
                scale_bits: sum.scale_bits,
                words: WireWords(sum.words.clone()),
            },
        ));
        self.last_global = Some(sum);
        self.round += 1;
        if self.round == self.cfg.rounds {
            self.phase = Phase::Collecting;
            out
        } else {
            let mut out = out;
            out.extend(self.round_start());
            out
        }
    }

    fn embeddings(
        &mut self,
        conn: ConnId,
        silo: usize,
        member: usize,
        rows: WireMatrix,
        meta: Vec<crate::flake::RowMeta>,
    ) -> Vec<Outgoing> {
        if self.phase != Phase::Collecting {
            return self.reply(conn, "unexpected", &format!("embeddings not accepted while {:?}", self.phase));
        }
        if member >= self.cfg.members {
            return self.reply(conn, "dimension", &format!("member {member} outside 0..{}", self.cfg.members));
        }
        if rows.0.rows != meta.len() || meta.iter().any(|m| m.silo != silo) {
            return self.reply(conn, "dimension", "row metadata does not match the uploaded rows");
        }
        if self.uploads.contains_key(&(member, silo)) {
            return self.reply(conn, "duplicate_submission", &format!("member {member} already uploaded"));
        }
        self.uploads.insert(
            (member, silo),
            MaskedEmbeddings {
                silo,
                member,
                rows: rows.0,
                meta,
            },
        );
        self.try_build()
    }

    fn helper(&mut self, conn: ConnId, silo: usize, member: usize, k: WireMatrix) -> Vec<Outgoing> {
        if silo != 1 {
            return self.reply(conn, "unexpected", "only silo 1 sends the helper matrix");
        }
        if self.phase != Phase::Collecting {
            return self.reply(conn, "unexpected", &format!("helper not accepted while {:?}", self.phase));
        }
        if member >= self.cfg.members || k.0.rows != k.0.cols {
            return self.reply(conn, "dimension", "helper must be square and belong to a known member");
        }
        if self.helpers.contains_key(&member) {
            return self.reply(conn, "duplicate_submission", &format!("helper for member {member} already received"));
        }
        self.helpers.insert(member, k.0);
        self.try_build()
    }

    fn try_build(&mut self) -> Vec<Outgoing> {
        let want = self.cfg.members * self.cfg.n_silos;
        if self.uploads.len() < want || self.helpers.len() < self.cfg.members {
            return Vec::new();
        }
        match self.build_gallery() {
            Ok(mut out) => {
                self.phase = Phase::Serving;
                self.events.push("gallery built".into());
                for q in std::mem::take(&mut self.pending) {
                    out.extend(self.answer(q));
                }
                out
            }
            Err(e) => {
                self.phase = Phase::Aborted;
                self.broadcast(self.error(None, "gallery_failed", &e))
            }
        }
    }

    fn build_gallery(&mut self) -> Result<Vec<Outgoing>, String> {
        let mut member_d = Vec::with_capacity(self.cfg.members);
        for m in 0..self.cfg.members {
            let k = &self.helpers[&m];
            let pooled: Vec<&MaskedEmbeddings> = (1..=self.cfg.n_silos).map(|s| &self.uploads[&(m, s)]).collect();
            let gram = compute_gram(k, &pooled).map_err(|e| e.to_string())?;
            let diag = (0..gram.values.rows).map(|p| gram.values.get(p, p)).collect();
            let mut data = Vec::new();
            for p in &pooled {
                data.extend_from_slice(&p.rows.data);
            }
            self.gallery.push(MemberGallery {
                k: k.clone(),
                rows: Matrix {
                    rows: gram.values.rows,
                    cols: k.rows,
                    data,
                },
                diag,
            });
            member_d.push(cosine_distance_matrix(&gram).map_err(|e| e.to_string())?);
        }
        let distance = ensemble_distance(&member_d).map_err(|e| e.to_string())?;
        self.gallery_rows = distance
            .meta
            .iter()
            .enumerate()
            .filter(|(_, m)| m.split == Split::Gallery)
            .map(|(i, _)| i)
            .collect();
        let mut out = Vec::new();
        let subgroups = match self.cfg.subgroups {
            Some((tau, min_size)) => {
                let rows: Vec<usize> = (0..distance.meta.len()).collect();
                discover_subgroups(&distance, &rows, tau, min_size)
            }
            None => Vec::new(),
        };
        let involved: BTreeSet<usize> = subgroups.iter().flat_map(|g| g.silos.iter().copied()).collect();
        for silo in involved {
            let groups: Vec<Subgroup> = subgroups.iter().filter(|g| g.silos.contains(&silo)).cloned().collect();
            match self.silo_conn.get(&silo) {
                Some(&conn) => {
                    let msg = Message::new(&self.cfg.session_id, Some(silo), Body::SubgroupNotice { groups });
                    out.push(self.frame(conn, &msg));
                }
                None => self.events.push(format!("subgroup notice for silo {silo} undeliverable")),
            }
        }
        self.outcome = Some(GalleryOutcome {
            distance,
            member_distances: member_d,
            subgroups,
        });
        Ok(out)
    }

    fn query(&mut self, conn: ConnId, silo: usize, query_id: u64, k: usize, rows: Vec<WireMatrix>) -> Vec<Outgoing> {
        if k == 0 {
            return self.reply(conn, "dimension", "k must be positive");
        }
        if rows.len() != self.cfg.members || rows.iter().any(|r| r.0.rows != 1) {
            return self.reply(
                conn,
                "dimension",
                &format!("query needs one 1-row matrix per member ({})", self.cfg.members),
            );
        }
        let q = PendingQuery {
            conn,
            silo,
            query_id,
            k,
            rows: rows.into_iter().map(|r| r.0).collect(),
        };
        if self.phase == Phase::Serving {
            self.answer(q)
        } else {
            self.pending.push(q);
            Vec::new()
        }
    }

    fn answer(&mut self, q: PendingQuery) -> Vec<Outgoing> {
        let n = self.gallery_rows.len();
        if n == 0 {
            return self.reply(q.conn, "empty_gallery", "gallery has no rows");
        }
        let mut dist = vec![0.0; n];
        for (g, row) in self.gallery.iter().zip(&q.rows) {
            if row.cols != g.k.rows {
                return self.reply(q.conn, "dimension", &format!("query width {} vs helper {}", row.cols, g.k.rows));
            }
            let qq = match cross_gram(&g.k, row, row) {
                Ok(m) => m.data[0],
                Err(e) => return self.reply(q.conn, "dimension", &e.to_string()),
            };
            if !(qq > 0.0) {
                return self.reply(q.conn, "dimension", "query has non-positive self product");
            }
            let qg = match cross_gram(&g.k, row, &g.rows) {
                Ok(m) => m,
                Err(e) => return self.reply(q.conn, "dimension", &e.to_string()),
            };
            for (slot, &r) in dist.iter_mut().zip(&self.gallery_rows) {
                *slot += 1.0 - qg.data[r] / (qq.sqrt() * g.diag[r].sqrt());
            }
        }
        let members = self.gallery.len() as f64;
        dist.iter_mut().for_each(|d| *d /= members);
        let meta = &self.outcome.as_ref().expect("gallery built").distance.meta;
        let labels: Vec<usize> = self.gallery_rows.iter().map(|&r| meta[r].label).collect();
        let ranked = rank_unique(&dist, &labels)
            .into_iter()
            .take(q.k)
            .map(|(syndrome, distance)| RankedSyndrome { syndrome, distance })
            .collect();
        self.answered += 1;
        let msg = Message::new(
            &self.cfg.session_id,
            Some(q.silo),
            Body::QueryResponse {
                query_id: q.query_id,
                ranked,
            },
        );
        vec![self.frame(q.conn, &msg)]
    }

    /// Everything the aggregator holds, as plain JSON numbers (no base64), so
    /// a scan can compare every value it could leak.
    pub fn state_dump(&self) -> serde_json::Value {
        let matrix = |m: &Matrix| json!({"rows": m.rows, "cols": m.cols, "data": m.data});
        json!({
            "config": self.cfg,
            "phase": self.phase,
            "round": self.round,
            "silos": self.silo_conn.keys().collect::<Vec<_>>(),
            "late": self.late,
            "pending_submissions": self.submissions.values().map(|s| json!({
                "silo": s.silo, "round": s.round, "words": s.words.words,
            })).collect::<Vec<_>>(),
            "last_masked_global": self.last_global.as_ref().map(|g| &g.words),
            "uploads": self.uploads.values().map(|u| json!({
                "silo": u.silo, "member": u.member, "rows": matrix(&u.rows), "meta": u.meta,
            })).collect::<Vec<_>>(),
            "helpers": self.helpers.values().map(matrix).collect::<Vec<_>>(),
            "gallery": self.gallery.iter().map(|g| json!({
                "k": matrix(&g.k), "rows": matrix(&g.rows), "diag": g.diag,
            })).collect::<Vec<_>>(),
            "distance": self.outcome.as_ref().map(|o| matrix(&o.distance.values)),
            "member_distances": self.outcome.as_ref().map(|o| {
                o.member_distances.iter().map(|d| matrix(&d.values)).collect::<Vec<_>>()
            }),
            "subgroups": self.outcome.as_ref().map(|o| &o.subgroups),
            "pending_queries": self.pending.iter().map(|q| json!({
                "silo": q.silo, "query_id": q.query_id, "k": q.k,
                "rows": q.rows.iter().map(matrix).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
            "answered_queries": self.answered,
            "events": self.events,
        })
    }

    fn error(&self, silo: Option<usize>, code: &str, message: &str) -> Message {
        Message::new(
            &self.cfg.session_id,
            silo,
            Body::Error {
                code: code.into(),
                message: message.into(),
            },
        )
    }

    fn reply(&mut self, conn: ConnId, code: &str, message: &str) -> Vec<Outgoing> {
        self.events.push(format!("error {code} to connection {conn}"));
        let silo = self.conn_silo.get(&conn).copied();
        let msg = self.error(silo, code, message);
        vec![self.frame(conn, &msg)]
    }

    fn frame(&self, conn: ConnId, msg: &Message) -> Outgoing {
        Outgoing {
            conn,
            frame: encode_message(msg).expect("aggregator messages fit in a frame"),
        }
    }

    /// One encoding shared by every founding silo.
    fn broadcast(&self, msg: Message) -> Vec<Outgoing> {
        let frame = encode_message(&msg).expect("aggregator messages fit in a frame");
        (1..=self.cfg.n_silos)
            .filter_map(|s| self.silo_conn.get(&s))
            .map(|&conn| Outgoing {
                conn,
                frame: frame.clone(),
            })
            .collect()
    }
}
