//! `fedgm`: command-line front end. Every subcommand except `serve` is a
//! request to the HTTP service; without `--server` an embedded service is
//! started on a loopback port for the duration of the command.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use fedgm_client::Client;
use fedgm_core::api::{GridRequest, DEFAULT_HTTP_ADDR};
use fedgm_core::data::{read_jsonl, write_jsonl, PatientRecord};
use fedgm_core::model::EnsembleModel;
use fedgm_core::net::QueryRequest;
use fedgm_core::orchestrate::{eval_csv, AttackConfig, ExperimentConfig, Transport};
use fedgm_service::AppState;
use serde::Serialize;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

#[derive(Parser, Debug)]
#[command(name = "fedgm", version, about = "Federated syndrome retrieval experiments")]
struct Cli {
    /// Service URL. Without it an embedded service is started.
    #[arg(long, global = true, env = "FEDGM_SERVER")]
    server: Option<String>,
    /// Experiment config (JSON). Missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Silo transport; overrides the config.
    #[arg(long, global = true, value_enum)]
    transport: Option<TransportArg>,
    /// Number of repeats; overrides the config.
    #[arg(long, global = true)]
    repeats: Option<usize>,
    /// Start from the reduced "fast" profile instead of the full defaults.
    #[arg(long, global = true)]
    fast: bool,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TransportArg {
    Inproc,
    Tcp,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the HTTP service in the foreground.
    Serve {
        #[arg(long, env = "FEDGM_HTTP", default_value = DEFAULT_HTTP_ADDR)]
        http: String,
    },
    /// Generate the synthetic dataset (records.jsonl).
    GenData,
    /// Split and partition one repeat's data over the silos.
    Partition {
        #[arg(long, default_value_t = 0)]
        repeat: usize,
    },
    /// Centralized baseline training and evaluation.
    TrainCentral,
    /// Federated training over masked aggregation, then masked evaluation.
    TrainFed {
        /// Also run the centralized baseline and report ratios.
        #[arg(long)]
        baseline: bool,
    },
    /// Evaluate a saved model checkpoint in plaintext.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        repeat: usize,
        /// Also write per-row latents for external plotting.
        #[arg(long)]
        export_embeddings: bool,
    },
    /// Query a live session's gallery as a late-joining silo.
    Query {
        /// Records (JSONL) whose features are sent as queries.
        #[arg(long)]
        rows: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Only query the first N rows.
        #[arg(long)]
        limit: Option<usize>,
        /// Reuse an open session instead of training a new one.
        #[arg(long)]
        session: Option<String>,
        /// Leave the session open afterwards.
        #[arg(long)]
        keep_open: bool,
        #[arg(long, default_value_t = 0)]
        repeat: usize,
    },
    /// Reconstruction attack on plaintext latents.
    AttackDemo {
        /// Attack settings (JSON).
        #[arg(long)]
        attack: Option<PathBuf>,
    },
    /// Run a grid of configs; defaults to the full sweep around the config.
    Grid {
        /// JSON array of configs to run instead of the default sweep.
        #[arg(long)]
        configs: Option<PathBuf>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => read_json(path)?,
        None if cli.fast => ExperimentConfig::fast(),
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(t) = cli.transport {
        cfg.transport = match t {
            TransportArg::Inproc => Transport::Inproc,
            TransportArg::Tcp => Transport::Tcp,
        };
    }
    if let Some(r) = cli.repeats {
        cfg.repeats = r;
    }
    Ok(cfg)
}

/// A service running inside this process until the command finishes.
struct Embedded {
    stop: oneshot::Sender<()>,
    task: JoinHandle<std::io::Result<()>>,
}

async fn connect(server: Option<&str>) -> Result<(Client, Option<Embedded>)> {
    if let Some(url) = server {
        return Ok((Client::new(url), None));
    }
    let listener = TcpListener::bind("127.0.0.1:0").await?;
    let addr = listener.local_addr()?;
    let (stop, rx) = oneshot::channel();
    let task = tokio::spawn(fedgm_service::serve(listener, AppState::default(), async {
        rx.await.ok();
    }));
    Ok((Client::new(format!("http://{addr}")), Some(Embedded { stop, task })))
}

fn print_summary(label: &str, report: &fedgm_core::orchestrate::RunReport) {
    println!("{label}: {} repeat(s), {:.1}s", report.repeats.len(), report.wall_time_s);
    for s in &report.summary {
        println!("  {:<5} top-{:<2} {:.3} ± {:.3}", s.setting.to_string(), s.k, s.mean, s.std);
    }
    if let Some(ratios) = &report.ratio_to_centralized {
        for r in ratios.iter().filter(|r| r.k == 1) {
            println!("  {:<5} top-1 federated/centralized {:.3}", r.setting.to_string(), r.ratio);
        }
    }
}

async fn run(cli: Cli) -> Result<()> {
    if let Command::Serve { http } = &cli.command {
        let listener = TcpListener::bind(http).await.with_context(|| format!("binding {http}"))?;
        println!("serving on http://{}", listener.local_addr()?);
        fedgm_service::serve(listener, AppState::default(), async {
            tokio::signal::ctrl_c().await.ok();
        })
        .await?;
        return Ok(());
    }

    let cfg = load_config(&cli)?;
    cfg.validate()?;
    let out = cli.out.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let (client, embedded) = connect(cli.server.as_deref()).await?;
    let result = dispatch(&cli.command, &client, &cfg, &out).await;
    if let Some(e) = embedded {
        e.stop.send(()).ok();
        e.task.await??;
    }
    result
}

async fn dispatch(command: &Command, client: &Client, cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    match command {
        Command::Serve { .. } => unreachable!("handled before connecting"),
        Command::GenData => {
            let resp = client.gen_data(cfg).await?;
            write_jsonl(&resp.records, fs::File::create(out.join("records.jsonl"))?)?;
            write_json(&out.join("class_sizes.json"), &resp.class_sizes)?;
            println!(
                "{} records, {} frequent and {} rare syndromes -> {}",
                resp.records.len(),
                resp.frequent_classes,
                resp.rare_classes,
                out.join("records.jsonl").display()
            );
        }
        Command::Partition { repeat } => {
            let resp = client.partition(cfg, *repeat).await?;
            write_json(&out.join("partition.json"), &resp.partition)?;
            write_jsonl(&resp.records, fs::File::create(out.join("records.jsonl"))?)?;
            let mut csv = String::from("syndrome,sd\n");
            for (c, sd) in &resp.class_sd {
                csv.push_str(&format!("{c},{sd}\n"));
            }
            fs::write(out.join("class_sd.csv"), csv)?;
            for (silo, ids) in &resp.partition.assignment {
                println!("silo {silo}: {} train rows", ids.len());
            }
            println!("mean class-distribution SD {:.4} (seed {})", resp.mean_class_sd, resp.seed);
        }
        Command::TrainCentral => {
            let resp = client.train_central(cfg).await?;
            resp.report.write_to(out)?;
            save_models(out, &resp.models)?;
            print_summary("centralized", &resp.report);
        }
        Command::TrainFed { baseline } => {
            let resp = client.train_federated(cfg, *baseline).await?;
            resp.report.write_to(out)?;
            if let Some(b) = &resp.baseline {
                b.write_to(&out.join("centralized"))?;
            }
            save_models(out, &resp.models)?;
            print_summary("federated", &resp.report);
        }
        Command::Evaluate {
            model,
            repeat,
            export_embeddings,
        } => {
            let model: EnsembleModel = read_json(model)?;
            let resp = client.evaluate(cfg, &model, *repeat, *export_embeddings).await?;
            write_json(&out.join("eval.json"), &resp)?;
            fs::write(out.join("eval.csv"), eval_csv(&resp.reports))?;
            if let Some(csv) = &resp.embeddings_csv {
                fs::write(out.join("embeddings.csv"), csv)?;
            }
            for r in &resp.reports {
                let accs: Vec<String> = r.topk_acc.iter().map(|(k, a)| format!("top-{k} {a:.3}")).collect();
                println!("{:<5} n={:<4} {}", r.setting.to_string(), r.n_test, accs.join("  "));
            }
        }
        Command::Query {
            rows,
            k,
            limit,
            session,
            keep_open,
            repeat,
        } => {
            let file = fs::File::open(rows).with_context(|| format!("opening {}", rows.display()))?;
            let mut records: Vec<PatientRecord> = read_jsonl(BufReader::new(file))?;
            if let Some(n) = limit {
                records.truncate(*n);
            }
            if records.is_empty() {
                bail!("no query rows in {}", rows.display());
            }
            let session_id = match session {
                Some(id) => id.clone(),
                None => {
                    let info = client.open_session(cfg, *repeat).await?;
                    println!("opened session {} ({} silos, {} rounds)", info.session_id, info.n_silos, info.rounds);
                    info.session_id
                }
            };
            let queries: Vec<QueryRequest> = records
                .iter()
                .map(|r| QueryRequest {
                    query_id: r.id,
                    features: r.features.clone(),
                    k: *k,
                })
                .collect();
            let resp = client.query(&session_id, &queries).await?;
            let truth: std::collections::BTreeMap<u64, usize> = records.iter().map(|r| (r.id, r.syndrome)).collect();
            let mut csv = String::from("query_id,true_syndrome,rank,syndrome,distance\n");
            let mut hits = 0;
            for a in &resp.answers {
                let t = truth.get(&a.query_id).copied();
                if a.ranked.iter().any(|r| Some(r.syndrome) == t) {
                    hits += 1;
                }
                for (i, r) in a.ranked.iter().enumerate() {
                    let t = t.map(|v| v.to_string()).unwrap_or_default();
                    csv.push_str(&format!("{},{t},{},{},{}\n", a.query_id, i + 1, r.syndrome, r.distance));
                }
            }
            write_json(&out.join("answers.json"), &resp)?;
            fs::write(out.join("answers.csv"), csv)?;
            println!("{} queries, true syndrome within top-{k} for {hits}", resp.answers.len());
            if !keep_open {
                let closed = client.close_session(&session_id).await?;
                write_json(&out.join("session.json"), &closed)?;
                println!("closed session {session_id}");
            }
        }
        Command::AttackDemo { attack } => {
            let attack_cfg: AttackConfig = match attack {
                Some(p) => read_json(p)?,
                None => AttackConfig::default(),
            };
            let resp = client.attack(cfg, &attack_cfg).await?;
            write_json(&out.join("attack.json"), &resp.report)?;
            fs::write(out.join("attack_pairs.csv"), &resp.pairs_csv)?;
            println!(
                "reconstruction rel_mse {:.3} on {} held-out pairs (mean predictor 1.0)",
                resp.report.report.rel_mse, resp.report.report.n_pairs
            );
        }
        Command::Grid { configs } => {
            let request = match configs {
                Some(p) => GridRequest {
                    configs: Some(read_json(p)?),
                    base: None,
                },
                None => GridRequest {
                    configs: None,
                    base: Some(cfg.clone()),
                },
            };
            let outcome = client.grid(&request).await?;
            outcome.write_to(out)?;
            let ok = outcome.reports.iter().filter(|r| r.is_some()).count();
            println!(
                "{ok} of {} configs finished, {} summary rows -> {}",
                outcome.reports.len(),
                outcome.rows.len(),
                out.join("summary.csv").display()
            );
            for f in &outcome.failures {
                println!("  config {} ({}) failed: {}", f.index, f.config, f.error);
            }
        }
    }
    Ok(())
}

fn save_models(out: &Path, models: &[EnsembleModel]) -> Result<()> {
    for (r, m) in models.iter().enumerate() {
        write_json(&out.join(format!("model-r{r}.json")), m)?;
    }
    Ok(())
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    run(Cli::parse()).await
}
