use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use curata::engine::{evaluate_test_set, SamplerKind};
use curata::llmfn::http::{HttpBackendConfig, DEFAULT_API_KEY_ENV};
use curata::sim::{compare_samplers, default_session, generate_synthetic_pool, run_simulation, PoolSpec, SimConfig};
use curata_service::api::{self, AppState};
use curata_service::store::{backend_for, lock, BackendSetting, Store};
use curata_service::{read_records, write_records};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "curata", version, about = "Interactive few-shot curation service and tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Static bearer token required on /v1 requests.
        #[arg(long, env = "CURATA_TOKEN")]
        token: Option<String>,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Evaluate a stored session's function on a test file.
    Eval {
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        #[arg(long)]
        session: String,
        #[arg(long)]
        test: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Print the next batch of a stored session without recording it.
    Sample {
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        #[arg(long)]
        session: String,
        #[arg(long, value_enum, default_value_t = Sampler::Slice)]
        sampler: Sampler,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Run one simulated session with an oracle annotator.
    Sim {
        #[arg(long, value_enum, default_value_t = Sampler::Slice)]
        sampler: Sampler,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Compare the slice and random samplers over several seeds.
    Compare {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Write a synthetic temporal pool and test set.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Sampler {
    Slice,
    Random,
}

impl From<Sampler> for SamplerKind {
    fn from(s: Sampler) -> Self {
        match s {
            Sampler::Slice => SamplerKind::Slice,
            Sampler::Random => SamplerKind::Random,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Mock,
    Http,
}

#[derive(Args)]
struct BackendArgs {
    #[arg(long, value_enum, default_value_t = BackendKind::Mock)]
    backend: BackendKind,
    #[arg(long, env = "CURATA_BASE_URL")]
    base_url: Option<String>,
    #[arg(long, env = "CURATA_MODEL")]
    model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long, default_value = DEFAULT_API_KEY_ENV)]
    api_key_env: String,
    /// Append every completion request/response to this JSONL file.
    #[arg(long)]
    audit: Option<PathBuf>,
}

impl BackendArgs {
    fn setting(&self) -> BackendSetting {
        match self.backend {
            BackendKind::Mock => BackendSetting::Mock,
            BackendKind::Http => {
                let mut cfg = HttpBackendConfig::default();
                if let Some(u) = &self.base_url {
                    cfg.base_url = u.clone();
                }
                if let Some(m) = &self.model {
                    cfg.model = m.clone();
                }
                cfg.api_key_env = self.api_key_env.clone();
                cfg.audit_path = self.audit.clone();
                BackendSetting::Http(cfg)
            }
        }
    }
}

fn print_json<T: serde::Serialize>(value: &T, report: Option<&PathBuf>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match report {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Serve {
            port,
            data_dir,
            host,
            token,
            backend,
        } => {
            let store = Arc::new(Store::open(&data_dir, backend.setting())?);
            let app = api::router(AppState { store, token });
            let addr: SocketAddr = format!("{host}:{port}").parse().context("bad listen address")?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                tracing::info!(%addr, "listening");
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                anyhow::Ok(())
            })?;
        }
        Command::Eval {
            data_dir,
            session,
            test,
            backend,
        } => {
            let store = Store::open(&data_dir, backend.setting())?;
            let s = store.get(&session).ok_or_else(|| anyhow!("no session {session}"))?;
            let s = lock(&s);
            let test = read_records(&test)?;
            let mut known: Vec<_> = test.clone();
            known.extend(s.state.pool.values().map(|e| curata::session::PoolRecord {
                id: e.id.clone(),
                input: e.input.clone(),
                gold_output: e.gold_output.clone(),
                meta: e.meta.clone(),
            }));
            let engine = curata::engine::Engine::new(
                curata::lingo::Lingo::default(),
                backend_for(&known, store.backend())?,
                curata::llmfn::RetryPolicy::default(),
            );
            print_json(&evaluate_test_set(&engine, &s.state, &test)?, None)?;
        }
        Command::Sample {
            data_dir,
            session,
            sampler,
            backend,
        } => {
            let store = Store::open(&data_dir, backend.setting())?;
            let s = store.get(&session).ok_or_else(|| anyhow!("no session {session}"))?;
            let s = lock(&s);
            let batch = match &s.state.open_batch {
                Some(b) => b.clone(),
                None => {
                    let mut scratch = s.state.clone();
                    s.engine.next_batch(&mut scratch, sampler.into(), None)?
                }
            };
            print_json(&batch, None)?;
        }
        Command::Sim {
            sampler,
            seed,
            pool,
            test,
            report,
            backend,
        } => {
            let pool = read_records(&pool)?;
            let test = read_records(&test)?;
            let known: Vec<_> = pool.iter().chain(&test).cloned().collect();
            let cfg = SimConfig {
                sampler: sampler.into(),
                seed,
                session: default_session(),
                ..SimConfig::default()
            };
            let result = run_simulation(&cfg, backend_for(&known, &backend.setting())?, &pool, &test)?;
            print_json(&result, report.as_ref())?;
        }
        Command::Compare {
            seeds,
            pool,
            test,
            report,
            backend,
        } => {
            let pool = read_records(&pool)?;
            let test = read_records(&test)?;
            let known: Vec<_> = pool.iter().chain(&test).cloned().collect();
            let base = SimConfig {
                session: default_session(),
                ..SimConfig::default()
            };
            let seeds: Vec<u64> = (0..seeds).collect();
            let report_value = compare_samplers(&base, &seeds, backend_for(&known, &backend.setting())?, &pool, &test)?;
            eprintln!(
                "presented-to-coverage: slice {:.2} random {:.2} (reduction {:.1}%, sign test p = {:.4})",
                report_value.slice.presented_to_coverage.mean,
                report_value.random.presented_to_coverage.mean,
                100.0 * report_value.coverage_reduction,
                report_value.sign_test.p_value,
            );
            print_json(&report_value, report.as_ref())?;
        }
        Command::Synth { seed, pool, test } => {
            let (p, t) = generate_synthetic_pool(&PoolSpec::default(), seed)?;
            write_records(&pool, &p)?;
            write_records(&test, &t)?;
            eprintln!("wrote {} pool and {} test records", p.len(), t.len());
        }
    }
    Ok(())
}
