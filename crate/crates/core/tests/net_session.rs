use fedgm_core::data::{DatasetConfig, PartitionScheme, Split};
use fedgm_core::fixed::encode_fixed;
use fedgm_core::flake::{Matrix, RowMeta};
use fedgm_core::model::{EncoderConfig, EnsembleModel, LabeledSet};
use fedgm_core::net::{
    decode_frame, decode_message, encode_message, run_silo, AggregatorConfig, AggregatorCore, AggregatorHandle, Body,
    HelloRole, Link, Message, NetError, Outgoing, QueryRequest, SiloConfig, SiloData, SiloError, SiloState, WireMatrix,
    WireWords, PROTOCOL_VERSION,
};
use fedgm_core::orchestrate::{
    centralized_repeat, federated_repeat, generate_base, model_digest, EncoderSpec, ExperimentConfig, SessionOptions,
    Transport,
};
use fedgm_core::param::ParamVec;
use fedgm_core::rng::derive_rng;
use fedgm_core::secagg::{gen_round_masks, mask_local, unmask_global};
use fedgm_core::RingVec;

fn agg(n: usize, rounds: u64, members: usize) -> AggregatorCore {
    AggregatorCore::new(AggregatorConfig {
        session_id: "s".into(),
        n_silos: n,
        rounds,
        members,
        subgroups: None,
    })
}

fn payload(msg: &Message) -> Vec<u8> {
    let frame = encode_message(msg).unwrap();
    decode_frame(&frame).unwrap().0.to_vec()
}

fn send(core: &mut AggregatorCore, conn: u64, silo: usize, body: Body) -> Vec<Outgoing> {
    core.handle(conn, &payload(&Message::new("s", Some(silo), body)))
}

fn bodies(out: &[Outgoing]) -> Vec<(u64, Body)> {
    out.iter()
        .map(|o| {
            let (p, _) = decode_frame(&o.frame).unwrap();
            (o.conn, decode_message(p).unwrap().body)
        })
        .collect()
}

fn hello(core: &mut AggregatorCore, conn: u64, silo: usize) -> Vec<Outgoing> {
    core.connected(conn);
    send(core, conn, silo, Body::Hello { role: HelloRole::Founding })
}

fn masked(round: u64, words: Vec<u64>) -> Body {
    Body::MaskedModel {
        round,
        scale_bits: 24,
        words: WireWords(words),
    }
}

fn is_error(out: &[Outgoing], code: &str) -> bool {
    bodies(out)
        .iter()
        .any(|(_, b)| matches!(b, Body::Error { code: c, .. } if c == code))
}

#[test]
fn two_silos_get_identical_masked_global_bytes() {
    let mut core = agg(2, 1, 1);
    assert!(hello(&mut core, 10, 1).is_empty());
    let start = hello(&mut core, 11, 2);
    assert_eq!(start.len(), 2);
    assert!(matches!(bodies(&start)[0].1, Body::RoundStart { round: 0, rounds: 1 }));

    // Barrier: nothing is emitted until the last submission arrives.
    assert!(send(&mut core, 10, 1, masked(0, vec![5, 6])).is_empty());
    let out = send(&mut core, 11, 2, masked(0, vec![7, u64::MAX]));
    assert_eq!(out.len(), 2);
    assert_eq!(out[0].frame, out[1].frame);
    assert_eq!((out[0].conn, out[1].conn), (10, 11));
    match &bodies(&out)[0].1 {
        Body::MaskedGlobal { round: 0, words, .. } => assert_eq!(words.0, vec![12, 5]),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn duplicate_submission_keeps_the_first() {
    let mut core = agg(2, 1, 1);
    hello(&mut core, 1, 1);
    hello(&mut core, 2, 2);
    assert!(send(&mut core, 1, 1, masked(0, vec![1])).is_empty());
    let dup = send(&mut core, 1, 1, masked(0, vec![1000]));
    assert!(is_error(&dup, "duplicate_submission"));
    let out = send(&mut core, 2, 2, masked(0, vec![2]));
    match &bodies(&out)[0].1 {
        Body::MaskedGlobal { words, .. } => assert_eq!(words.0, vec![3]),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn protocol_errors_keep_the_connection() {
    let mut core = agg(1, 2, 1);
    core.connected(1);
    // Unknown type, then a perfectly good hello on the same connection.
    let out = core.handle(1, br#"{"type":"ping"}"#);
    assert!(is_error(&out, "unknown_type"));
    let out = core.handle(1, b"not json");
    assert!(is_error(&out, "malformed"));
    let mut old = Message::new("s", Some(1), Body::Hello { role: HelloRole::Founding });
    old.protocol_version = PROTOCOL_VERSION + 1;
    assert!(is_error(&core.handle(1, &payload(&old)), "version_mismatch"));
    let wrong_session = Message::new("other", Some(1), Body::Hello { role: HelloRole::Founding });
    assert!(is_error(&core.handle(1, &payload(&wrong_session)), "session_mismatch"));

    let start = send(&mut core, 1, 1, Body::Hello { role: HelloRole::Founding });
    assert!(matches!(bodies(&start)[0].1, Body::RoundStart { round: 0, .. }));
    assert!(is_error(&send(&mut core, 1, 1, masked(1, vec![0])), "wrong_round"));
    let out = send(&mut core, 1, 1, masked(0, vec![4]));
    let b = bodies(&out);
    assert!(matches!(b[0].1, Body::MaskedGlobal { round: 0, .. }));
    assert!(matches!(b[1].1, Body::RoundStart { round: 1, rounds: 2 }));
}

#[test]
fn registration_rules() {
    let mut core = agg(2, 1, 1);
    hello(&mut core, 1, 1);
    assert!(is_error(&hello(&mut core, 2, 1), "duplicate_silo"));
    assert!(is_error(&hello(&mut core, 3, 9), "unknown_silo"));
    core.connected(4);
    let q = Body::Query {
        query_id: 1,
        k: 1,
        rows: vec![WireMatrix(Matrix::zeros(1, 3))],
    };
    let out = core.handle(4, &payload(&Message::new("s", Some(7), q)));
    assert!(is_error(&out, "unknown_silo"));
    let late = send(&mut core, 4, 7, Body::Hello { role: HelloRole::Founding });
    assert!(is_error(&late, "unknown_silo"));
    assert!(send(&mut core, 4, 7, Body::Hello { role: HelloRole::Late }).is_empty());
    assert!(is_error(&send(&mut core, 4, 7, masked(0, vec![1])), "unexpected"));
}

#[test]
fn dropped_silo_aborts_training() {
    let mut core = agg(2, 1, 1);
    hello(&mut core, 1, 1);
    hello(&mut core, 2, 2);
    let out = core.disconnected(2);
    assert!(is_error(&out, "session_aborted"));
    assert!(core.is_aborted());
}

fn tiny(n: usize) -> ExperimentConfig {
    ExperimentConfig {
        name: "tiny".into(),
        dataset: DatasetConfig {
            num_frequent_classes: 10,
            num_rare_classes: 5,
            frequent_max: 16,
            input_dim: 12,
            nuisance_dims: 4,
            class_separation: 2.0,
            ..DatasetConfig::default()
        },
        n_silos: n,
        aggregation_interval: 2,
        total_epochs: 6,
        encoder: EncoderSpec {
            hidden_dims: vec![16],
            embed_dim: 8,
            ..EncoderSpec::default()
        },
        repeats: 1,
        ..ExperimentConfig::default()
    }
}

#[test]
fn single_silo_matches_centralized_bit_for_bit() {
    let cfg = tiny(1);
    let base = generate_base(&cfg).unwrap();
    let (central, central_model) = centralized_repeat(&cfg, &base, 0).unwrap();
    let fed = federated_repeat(&cfg, &base, 0, &SessionOptions::default()).unwrap();
    assert_eq!(fed.model.flatten().values(), central_model.flatten().values());
    assert_eq!(fed.result.model_sha256, central.model_sha256);
    assert_eq!(fed.result.reports, central.reports);
}

#[test]
fn inproc_and_tcp_agree() {
    let mut cfg = tiny(3);
    cfg.subgroups = Some(fedgm_core::orchestrate::SubgroupConfig { tau: 0.05, min_size: 2 });
    let base = generate_base(&cfg).unwrap();
    let a = federated_repeat(&cfg, &base, 0, &SessionOptions::default()).unwrap();
    cfg.transport = Transport::Tcp;
    let b = federated_repeat(&cfg, &base, 0, &SessionOptions::default()).unwrap();
    assert_eq!(a.model.flatten().to_checkpoint_bytes(), b.model.flatten().to_checkpoint_bytes());
    assert_eq!(a.result, b.result);
    assert_eq!(a.distance, b.distance);
}

#[test]
fn late_silo_answers_match_founding_silo() {
    let cfg = tiny(2);
    let base = generate_base(&cfg).unwrap();
    // Query with a gallery patient's own features and with a test patient.
    let probe = federated_repeat(&cfg, &base, 0, &SessionOptions::default()).unwrap();
    let gallery = probe
        .data
        .records
        .iter()
        .find(|r| r.split == Some(Split::Gallery) && r.silo == Some(1))
        .unwrap();
    let test = probe.data.records.iter().find(|r| r.split == Some(Split::Test)).unwrap();
    let queries = vec![
        QueryRequest {
            query_id: 1,
            features: gallery.features.clone(),
            k: 3,
        },
        QueryRequest {
            query_id: 2,
            features: test.features.clone(),
            k: 5,
        },
    ];
    let opts = SessionOptions {
        silo_queries: vec![queries.clone()],
        late_queries: queries,
        ..SessionOptions::default()
    };
    let run = federated_repeat(&cfg, &base, 0, &opts).unwrap();
    let founding = &run.silos[0].responses;
    let late = &run.late_responses;
    assert_eq!(founding.len(), 2);
    assert_eq!(late.len(), 2);
    assert_eq!(founding[0].1[0].syndrome, gallery.syndrome);
    assert!(founding[0].1[0].distance.abs() < 1e-9);
    assert_eq!(founding[1].1.len(), 5);
    for ((fa, fr), (la, lr)) in founding.iter().zip(late) {
        assert_eq!(fa, la);
        assert_eq!(fr.len(), lr.len());
        for (x, y) in fr.iter().zip(lr) {
            assert_eq!(x.syndrome, y.syndrome);
            assert!((x.distance - y.distance).abs() < 1e-9);
        }
        assert!(fr.windows(2).all(|w| w[0].distance <= w[1].distance));
    }
}

#[test]
fn identical_silos_reduce_to_local_training() {
    let cfg = tiny(1);
    let base = generate_base(&cfg).unwrap();
    let data = fedgm_core::orchestrate::prepare(&base, &cfg, 1, 7).unwrap();
    let train = data.central_train(cfg.dataset.input_dim);
    let init = fedgm_core::orchestrate::init_ensemble(&cfg, data.num_classes(), 7).unwrap();
    let (local, _) = fedgm_core::net::local_round(&init, &train, 6, cfg.sgd, 7, 0).unwrap();
    let expected = fedgm_core::fixed::quantize(&local.flatten(), 24).unwrap();

    let n = 8;
    let core = AggregatorCore::new(AggregatorConfig {
        session_id: "copies".into(),
        n_silos: n,
        rounds: 1,
        members: init.len(),
        subgroups: None,
    });
    let (handle, conn) = AggregatorHandle::spawn_inproc(core);
    let models: Vec<EnsembleModel> = std::thread::scope(|s| {
        let workers: Vec<_> = (1..=n)
            .map(|i| {
                let cfg = SiloConfig {
                    session_id: "copies".into(),
                    silo_id: i,
                    n_silos: n,
                    seed: 7,
                    local_epochs: 6,
                    sgd: cfg.sgd,
                    scale_bits: 24,
                    flake_extra_dims: 4,
                    state_file: None,
                    record_plaintext: false,
                };
                let sd = SiloData {
                    train: train.clone(),
                    shared: Vec::new(),
                };
                let link = conn.connect();
                let init = init.clone();
                s.spawn(move || run_silo(&cfg, init, &sd, &[], link).unwrap().model)
            })
            .collect();
        workers.into_iter().map(|w| w.join().unwrap()).collect()
    });
    handle.finish();
    for m in &models {
        assert_eq!(m.flatten().values(), expected.values());
    }
}

fn one_member() -> (EncoderConfig, EnsembleModel) {
    let enc = EncoderConfig {
        input_dim: 3,
        hidden_dims: vec![],
        embed_dim: 2,
        num_classes: 2,
        ..EncoderConfig::default()
    };
    let m = EnsembleModel::init(&enc, 1, &derive_rng(1, "init")).unwrap();
    (enc, m)
}

fn silo_cfg(id: usize) -> SiloConfig {
    SiloConfig {
        session_id: "s".into(),
        silo_id: id,
        n_silos: 1,
        seed: 3,
        local_epochs: 1,
        sgd: Default::default(),
        scale_bits: 24,
        flake_extra_dims: 2,
        state_file: None,
        record_plaintext: false,
    }
}

struct DeadLink;

impl Link for DeadLink {
    fn send(&mut self, _: &[u8]) -> Result<(), NetError> {
        Ok(())
    }

    fn recv(&mut self) -> Result<Vec<u8>, NetError> {
        Err(NetError::Closed)
    }
}

#[test]
fn empty_train_split_is_a_startup_error() {
    let (_, model) = one_member();
    let data = SiloData {
        train: LabeledSet::new(&[], 3),
        shared: Vec::new(),
    };
    let err = run_silo(&silo_cfg(1), model, &data, &[], DeadLink).unwrap_err();
    assert!(matches!(err, SiloError::EmptyTrain(1)));
}

#[test]
fn connection_loss_writes_state_file() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = one_member();
    let mut cfg = silo_cfg(1);
    cfg.state_file = Some(dir.path().join("silo-1.json"));
    let x = [1.0, 0.0, 0.5];
    let data = SiloData {
        train: LabeledSet::new(&[(&x[..], 0)], 3),
        shared: vec![(
            RowMeta {
                id: 0,
                label: 0,
                silo: 1,
                split: Split::Gallery,
            },
            x.to_vec(),
        )],
    };
    let err = run_silo(&cfg, model.clone(), &data, &[], DeadLink).unwrap_err();
    match err {
        SiloError::ConnectionLost { state_file, .. } => {
            let state = SiloState::load(state_file.as_ref().unwrap()).unwrap();
            assert_eq!(state.completed_rounds, 0);
            assert_eq!(state.silo_id, 1);
            assert_eq!(model_digest(&state.model), model_digest(&model));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn masked_round_trip_through_the_core() {
    // Three silos with known models; the aggregator output unmasks to their mean.
    let n = 3;
    let layout = vec![fedgm_core::Layer::new("w", &[4])];
    let models: Vec<ParamVec> = (0..n)
        .map(|i| ParamVec::new(vec![i as f64, -0.5, 0.25 * i as f64, 3.0], layout.clone()).unwrap())
        .collect();
    let masks = gen_round_masks(11, 0, n, &layout, 24).unwrap();
    let mut core = agg(n, 1, 1);
    for i in 1..=n {
        hello(&mut core, i as u64, i);
    }
    let mut out = Vec::new();
    for (i, m) in models.iter().enumerate() {
        let mm = mask_local(&encode_fixed(m, 24).unwrap(), i + 1, &masks).unwrap();
        out = send(&mut core, (i + 1) as u64, i + 1, masked(0, mm.words.words));
    }
    let words = match &bodies(&out)[0].1 {
        Body::MaskedGlobal { words, .. } => words.0.clone(),
        other => panic!("unexpected {other:?}"),
    };
    let global = unmask_global(
        &RingVec {
            words,
            scale_bits: 24,
            layout: layout.clone(),
        },
        &masks,
    )
    .unwrap();
    assert_eq!(global.values(), &[1.0, -0.5, 0.25, 3.0]);
}

#[test]
fn partition_schemes_run_end_to_end() {
    for scheme in [PartitionScheme::NonOverlapping, PartitionScheme::Dirichlet { alpha: 1.0 }] {
        let mut cfg = tiny(2);
        cfg.scheme = scheme;
        let base = generate_base(&cfg).unwrap();
        let run = federated_repeat(&cfg, &base, 0, &SessionOptions::default()).unwrap();
        assert!(run.result.reports.iter().all(|r| r.is_monotone()));
    }
}
