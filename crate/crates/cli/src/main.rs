//! `fleet-cli`: runs the broker, the advisory service or a live fleet,
//! posts advisories, encodes and decodes frames, and runs scenarios.

mod codec;
mod fleet;
mod routes;

use std::io::Read;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tokio_util::sync::CancellationToken;
use tracing_subscriber::EnvFilter;

use cda_core::link::{builtin_profile, LinkOverrides};
use cda_core::wire::AdvisoryCause;
use cda_service::book::AdvisoryRequest;
use cda_service::{RouteMap, ServiceConfig};
use cda_sim::{run_scenario, Scenario};
use cda_transport::BrokerConfig;

#[derive(Parser)]
#[command(name = "fleet-cli", version, about = "Cooperative driving stack at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the publish/subscribe broker.
    Broker {
        #[arg(long, default_value = "127.0.0.1:7320")]
        tcp: SocketAddr,
        /// BSM datagram ingress.
        #[arg(long, default_value = "127.0.0.1:7321")]
        udp: SocketAddr,
        #[arg(long)]
        no_udp: bool,
        #[arg(long, default_value = "fl")]
        region: String,
        #[arg(long, default_value_t = 1024)]
        queue_limit: usize,
    },
    /// Run the advisory service (HTTP API plus broker publisher).
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        http: SocketAddr,
        #[arg(long, default_value = "127.0.0.1:7320")]
        broker: SocketAddr,
        /// Run without a broker; advisories stay pending.
        #[arg(long)]
        no_broker: bool,
        #[arg(long, default_value = "fl")]
        region: String,
        /// Advisory log.
        #[arg(long, default_value = "advisories.log")]
        log: PathBuf,
        /// Traffic feed URL or file.
        #[arg(long)]
        feed: Option<String>,
        /// Seconds between feed refreshes.
        #[arg(long)]
        feed_refresh: Option<f64>,
        #[arg(long)]
        routes: Option<PathBuf>,
    },
    /// Run simulated vehicles against a live broker.
    Fleet {
        #[arg(long, default_value_t = 10)]
        n: u32,
        #[arg(long, default_value = "wifi6")]
        profile: String,
        #[arg(long)]
        loss: Option<f64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        routes: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:7320")]
        broker: SocketAddr,
        /// Send BSMs as datagrams to this address.
        #[arg(long)]
        udp: Option<SocketAddr>,
        #[arg(long, default_value = "fl")]
        region: String,
        #[arg(long, default_value_t = 30.0)]
        speed: f64,
        #[arg(long, default_value_t = 50.0)]
        spacing: f64,
        /// Stop after this many seconds instead of on Ctrl-C.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Post an advisory to the service and print its id.
    #[command(allow_negative_numbers = true)]
    Advise {
        segment: u16,
        /// m/s
        speed: f64,
        /// seconds
        duration: f64,
        #[arg(long, default_value = "none")]
        cause: String,
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        url: String,
    },
    /// Encode or decode wire frames.
    Codec {
        #[command(subcommand)]
        op: CodecOp,
    },
    /// Seeded end-to-end scenarios.
    Scenario {
        #[command(subcommand)]
        op: ScenarioOp,
    },
}

#[derive(Subcommand)]
enum CodecOp {
    /// JSON message document (argument, file or stdin) to frame hex.
    Encode { input: Option<String> },
    /// Frame hex (argument or stdin) to JSON message document.
    Decode { hex: Option<String> },
}

#[derive(Subcommand)]
enum ScenarioOp {
    /// Run a scenario file, or a bundled scenario by name.
    Run {
        file: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Names of the bundled scenarios.
    List,
}

fn read_input(arg: Option<String>) -> Result<String> {
    match arg.as_deref() {
        None | Some("-") => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s)?;
            Ok(s)
        }
        Some(a) if std::path::Path::new(a).is_file() => Ok(std::fs::read_to_string(a)?),
        Some(a) => Ok(a.to_owned()),
    }
}

async fn until_signal(stop: CancellationToken, duration: Option<f64>) {
    match duration {
        Some(s) => {
            tokio::select! {
                _ = tokio::time::sleep(Duration::from_secs_f64(s)) => {}
                _ = tokio::signal::ctrl_c() => {}
            }
        }
        None => {
            let _ = tokio::signal::ctrl_c().await;
        }
    }
    stop.cancel();
}

async fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Broker {
            tcp,
            udp,
            no_udp,
            region,
            queue_limit,
        } => {
            let handle = cda_transport::broker_serve(BrokerConfig {
                tcp_addr: tcp,
                udp_addr: (!no_udp).then_some(udp),
                queue_limit,
                region,
            })
            .await?;
            println!("broker listening on {}", handle.tcp_addr());
            if let Some(u) = handle.udp_addr() {
                println!("bsm datagrams on {u}");
            }
            let _ = tokio::signal::ctrl_c().await;
            handle.shutdown().await;
        }
        Command::Serve {
            http,
            broker,
            no_broker,
            region,
            log,
            feed,
            feed_refresh,
            routes,
        } => {
            let routes = match routes {
                Some(p) => routes::load_routes(&p)?,
                None => routes::default_route(),
            };
            let handle = cda_service::serve(ServiceConfig {
                http_addr: http,
                broker_addr: (!no_broker).then_some(broker),
                region,
                log_path: log,
                feed_source: feed,
                feed_refresh: feed_refresh.map(Duration::from_secs_f64),
                routes: RouteMap::new(routes.segments().to_vec()),
                ..ServiceConfig::default()
            })
            .await?;
            println!("advisory service on http://{}", handle.http_addr());
            tokio::select! {
                _ = tokio::signal::ctrl_c() => {}
                _ = handle.wait() => {}
            }
            handle.shutdown().await;
        }
        Command::Fleet {
            n,
            profile,
            loss,
            seed,
            routes,
            broker,
            udp,
            region,
            speed,
            spacing,
            duration,
        } => {
            if n == 0 {
                bail!("--n must be at least 1");
            }
            let profile = match loss {
                Some(l) => LinkOverrides {
                    profile,
                    latency_min_ms: None,
                    latency_max_ms: None,
                    loss_rate: Some(l),
                }
                .resolve()?,
                None => builtin_profile(&profile)?,
            };
            let route = match routes {
                Some(p) => routes::load_routes(&p)?,
                None => routes::default_route(),
            };
            let stop = CancellationToken::new();
            tokio::spawn(until_signal(stop.clone(), duration));
            let reports = fleet::run_fleet(
                fleet::FleetOptions {
                    count: n,
                    profile,
                    seed,
                    route: Arc::new(route),
                    broker,
                    udp,
                    region,
                    speed_mps: speed,
                    spacing_m: spacing,
                    first_id: 1,
                },
                stop,
            )
            .await?;
            println!("{}", serde_json::to_string_pretty(&reports)?);
        }
        Command::Advise {
            segment,
            speed,
            duration,
            cause,
            url,
        } => {
            let cause: AdvisoryCause =
                serde_json::from_value(serde_json::Value::String(cause.clone())).with_context(|| format!("cause {cause}"))?;
            let req = AdvisoryRequest {
                segment_id: segment,
                speed_mps: speed,
                duration_s: duration,
                cause,
            };
            let resp = reqwest::Client::new()
                .post(format!("{}/advisories", url.trim_end_matches('/')))
                .json(&req)
                .send()
                .await
                .with_context(|| format!("connect to {url}"))?;
            let status = resp.status();
            let body: serde_json::Value = resp.json().await.context("service response")?;
            if !status.is_success() {
                let msg = body["message"].as_str().unwrap_or("request rejected");
                bail!("{status}: {msg}");
            }
            println!("{}", body["advisory_id"]);
        }
        Command::Codec { op } => match op {
            CodecOp::Encode { input } => println!("{}", codec::encode(&read_input(input)?)?),
            CodecOp::Decode { hex } => {
                let (frame, msg) = codec::decode(&read_input(hex)?)?;
                eprintln!("{}", codec::describe(&frame));
                println!("{}", codec::document(&msg));
            }
        },
        Command::Scenario { op } => match op {
            ScenarioOp::List => {
                for name in Scenario::bundled_names() {
                    println!("{name}");
                }
            }
            ScenarioOp::Run { file, out } => {
                let scenario = match Scenario::bundled(&file) {
                    Some(s) if !std::path::Path::new(&file).exists() => s,
                    _ => Scenario::load(&file)?,
                };
                let metrics = run_scenario(&scenario)?;
                let path = metrics.write(&out, &scenario.metrics_path)?;
                for a in &metrics.advisories {
                    println!(
                        "advisory {} segment {}: delivered {}/{}",
                        a.advisory_id, a.segment_id, a.delivered, a.targets
                    );
                }
                println!("metrics written to {}", path.display());
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    match rt.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
