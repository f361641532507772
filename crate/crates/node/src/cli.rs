use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use marketpalace_core::door::{AttributeDisclosure, MockIssuer};
use marketpalace_core::gossip::{Channel, PeerId, PeerInfo, ReceivedBid};
use marketpalace_core::market::{ContentId, ListingDraft, SignedListing, Tombstone, DEFAULT_LISTING_TTL_S};
use marketpalace_core::sim::{format_delays, sweep, write_csv, Observer, SimConfig, Topology};

use crate::api::{BidRequest, ChatRequest, Delivered, NodeStatus};
use crate::client::{register, ApiClient, ClientError, Registration, EXIT_FAILURE, EXIT_NETWORK, EXIT_OK};
use crate::config::{read_json, write_json, DoorConfig, NodeConfig};
use crate::keys::{keygen, load_identity, load_keypair, passphrase};

#[derive(Parser, Debug)]
#[command(name = "marketpalace", version, about = "Sybil-resistant peer-to-peer marketplace node")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Args, Debug)]
pub struct ConfigArg {
    /// Node configuration file (JSON).
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate an RSA key pair with a passphrase-encrypted private key.
    Keygen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Register this node's key with the door server.
    Register {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Issuer-signed attribute disclosure (JSON), e.g. from `issuer issue`.
        #[arg(long)]
        attribute: PathBuf,
    },
    /// Run the node daemon.
    Serve(ConfigArg),
    /// Publish a signed listing through the running node.
    AddListing {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        title: String,
        #[arg(long, default_value = "")]
        description: String,
        /// Price in minor units (cents).
        #[arg(long)]
        price: u64,
        #[arg(long)]
        currency: String,
        #[arg(long, default_value_t = DEFAULT_LISTING_TTL_S)]
        ttl: u64,
    },
    /// Print the listings this node currently knows.
    List(ConfigArg),
    /// Remove one of your own listings.
    Remove {
        #[command(flatten)]
        cfg: ConfigArg,
        content_id: ContentId,
    },
    /// Send a bid for a listing to its seller.
    Bid {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        listing: ContentId,
        #[arg(long)]
        amount: u64,
        #[arg(long)]
        currency: String,
        /// Peer id of the seller.
        #[arg(long)]
        to: PeerId,
    },
    /// Show chats, or send a message when --body is given.
    Chat {
        #[command(flatten)]
        cfg: ConfigArg,
        channel_id: Option<String>,
        #[arg(long)]
        body: Option<String>,
        #[arg(long)]
        to: Option<PeerId>,
        #[arg(long)]
        listing: Option<ContentId>,
    },
    /// Show node status.
    Status(ConfigArg),
    /// Run the propagation simulator. Comma-separated values sweep.
    Simulate {
        #[arg(long, value_delimiter = ',', default_value = "4")]
        nodes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "90")]
        period: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "20")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        trials: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "complete")]
        topology: String,
        #[arg(long, default_value_t = 0.0)]
        link_delay: f64,
        #[arg(long, default_value = "neighbor")]
        observer: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the door (registration) server.
    Door {
        #[arg(long)]
        config: PathBuf,
    },
    /// Mock credential issuer.
    #[command(subcommand)]
    Issuer(IssuerCmd),
}

#[derive(Subcommand, Debug)]
pub enum IssuerCmd {
    /// Sign an attribute disclosure with an issuer key from `keygen`.
    Issue {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        issuer_id: String,
        #[arg(long, default_value = "ssn")]
        name: String,
        #[arg(long)]
        value: String,
        #[arg(long, default_value = "")]
        subject: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

pub fn main() -> ExitCode {
    // Usage errors exit 1; clap's default of 2 would read as "duplicate".
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_FAILURE } else { EXIT_OK });
        }
    };
    init_logging();
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    let code = rt.block_on(run(cli.command));
    ExitCode::from(code)
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn report(err: &ClientError) -> u8 {
    eprintln!("error: {err}");
    if err.exit_code() == EXIT_NETWORK {
        eprintln!("hint: is the server running and reachable? The command can be retried.");
    }
    err.exit_code()
}

async fn api_call<T, F, Fut>(cfg: &ConfigArg, f: F) -> u8
where
    T: serde::Serialize,
    F: FnOnce(ApiClient) -> Fut,
    Fut: std::future::Future<Output = Result<T, ClientError>>,
{
    let config = match NodeConfig::load(&cfg.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FAILURE;
        }
    };
    match f(ApiClient::new(&config.api_addr)).await {
        Ok(v) => {
            print_json(&v);
            EXIT_OK
        }
        Err(e) => report(&e),
    }
}

async fn run(cmd: Cmd) -> u8 {
    let res: Result<u8> = match cmd {
        Cmd::Keygen { out, force } => cmd_keygen(&out, force),
        Cmd::Register { cfg, attribute } => cmd_register(&cfg.config, &attribute).await,
        Cmd::Serve(cfg) => cmd_serve(&cfg.config).await,
        Cmd::Door { config } => cmd_door(&config).await,
        Cmd::Issuer(IssuerCmd::Issue { key, issuer_id, name, value, subject, out }) => {
            cmd_issue(&key, issuer_id, &name, &value, &subject, &out)
        }
        Cmd::Simulate { nodes, period, k, trials, seed, topology, link_delay, observer, out } => {
            cmd_simulate(&nodes, &period, &k, trials, seed, &topology, link_delay, &observer, &out)
        }
        Cmd::AddListing { cfg, title, description, price, currency, ttl } => {
            let draft = ListingDraft { title, description, price_amount: price, currency, ttl_s: ttl };
            Ok(api_call(&cfg, |c| async move { c.post::<_, SignedListing>("/listings", &draft).await }).await)
        }
        Cmd::List(cfg) => Ok(api_call(&cfg, |c| async move { c.get::<Vec<SignedListing>>("/listings").await }).await),
        Cmd::Remove { cfg, content_id } => {
            Ok(api_call(&cfg, |c| async move { c.delete::<Tombstone>(&format!("/listings/{content_id}")).await }).await)
        }
        Cmd::Bid { cfg, listing, amount, currency, to } => {
            let req = BidRequest { content_id: listing, amount, currency, target_peer: to };
            Ok(api_call(&cfg, |c| async move { c.post::<_, Delivered>("/bids", &req).await }).await)
        }
        Cmd::Chat { cfg, channel_id, body, to, listing } => Ok(match (channel_id, body) {
            (None, _) => api_call(&cfg, |c| async move { c.get::<Vec<Channel>>("/chats").await }).await,
            (Some(id), None) => {
                api_call(&cfg, |c| async move { c.get::<Channel>(&format!("/chats/{id}")).await }).await
            }
            (Some(id), Some(body)) => {
                let req = ChatRequest { body, target_peer: to, content_id: listing };
                api_call(&cfg, |c| async move { c.post::<_, Delivered>(&format!("/chats/{id}"), &req).await }).await
            }
        }),
        Cmd::Status(cfg) => Ok(api_call(&cfg, |c| async move {
            let status = c.get::<NodeStatus>("/status").await?;
            let peers = c.get::<Vec<PeerInfo>>("/peers").await?;
            let bids = c.get::<Vec<ReceivedBid>>("/bids").await?;
            Ok(serde_json::json!({ "status": status, "peers": peers.len(), "bids_received": bids.len() }))
        })
        .await),
    };
    res.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        EXIT_FAILURE
    })
}

fn cmd_keygen(out: &Path, force: bool) -> Result<u8> {
    let pw = passphrase("Passphrase for the new private key: ")?;
    let (sk, pk) = keygen(out, &pw, force)?;
    println!("wrote {} and {}", sk.display(), pk.display());
    Ok(EXIT_OK)
}

async fn cmd_register(config: &Path, attribute: &Path) -> Result<u8> {
    let cfg = NodeConfig::load(config)?;
    let disclosure: AttributeDisclosure = read_json(attribute)?;
    let pw = passphrase("Private key passphrase: ")?;
    Ok(match register(&cfg, &pw, &disclosure).await {
        Ok(Registration::Registered(_)) => {
            println!("registered; certified key bundle saved to {}", cfg.key_bundle_path.display());
            EXIT_OK
        }
        Ok(Registration::AlreadyRegistered(_)) => {
            println!("already registered; using existing bundle {}", cfg.key_bundle_path.display());
            EXIT_OK
        }
        Err(e) => report(&e),
    })
}

async fn wait_for_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("SIGTERM handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    let _ = tokio::signal::ctrl_c().await;
}

async fn cmd_serve(config: &Path) -> Result<u8> {
    let cfg = NodeConfig::load(config)?;
    let pw = passphrase("Private key passphrase: ")?;
    let (identity, server_key) = match load_identity(&cfg, &pw) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            eprintln!("refusing to start: this node has no valid certified key");
            return Ok(EXIT_FAILURE);
        }
    };
    let node = crate::daemon::start(&cfg, identity, server_key).await?;
    println!("node {} listening on {}, api on {}", node.peer_id, node.listen_addr, node.api_addr);
    wait_for_signal().await;
    tracing::info!("shutting down");
    node.shutdown().await;
    Ok(EXIT_OK)
}

async fn cmd_door(config: &Path) -> Result<u8> {
    let cfg = DoorConfig::load(config)?;
    let pw = passphrase("Door server key passphrase: ")?;
    let keys = load_keypair(&cfg.server_key_path, &pw)?;
    let door = crate::door_http::start(&cfg, keys).await?;
    println!("door server listening on {}", door.addr);
    wait_for_signal().await;
    door.shutdown().await;
    Ok(EXIT_OK)
}

fn cmd_issue(key: &Path, issuer_id: String, name: &str, value: &str, subject: &str, out: &Path) -> Result<u8> {
    let pw = passphrase("Issuer key passphrase: ")?;
    let issuer = MockIssuer::new(issuer_id, load_keypair(key, &pw)?);
    write_json(out, &issuer.issue(name, value, subject)).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {}", out.display());
    Ok(EXIT_OK)
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    nodes: &[usize],
    periods: &[f64],
    ks: &[usize],
    trials: u32,
    seed: u64,
    topology: &str,
    link_delay: f64,
    observer: &str,
    out: &Path,
) -> Result<u8> {
    let topology: Topology = topology.parse()?;
    let observer: Observer = observer.parse()?;
    let mut configs = Vec::new();
    for &num_nodes in nodes {
        for &timer_period_s in periods {
            for &k in ks {
                configs.push(SimConfig {
                    num_nodes,
                    timer_period_s,
                    k,
                    seed,
                    topology,
                    link_delay_s: link_delay,
                    trials,
                    observer,
                });
            }
        }
    }
    let rows = sweep(&configs);
    let file = std::fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_csv(&rows, file)?;
    let mut failed = false;
    for (i, row) in rows.iter().enumerate() {
        let raw_path = raw_path(out, (rows.len() > 1).then_some(i));
        match &row.result {
            Ok((s, delays)) => {
                std::fs::write(&raw_path, format_delays(delays))?;
                println!(
                    "nodes={} period={} k={}: n={} mean={:.1}s median={:.1}s sd={:.1}s mode={}s p95={:.1}s",
                    row.config.num_nodes,
                    row.config.timer_period_s,
                    row.config.k,
                    s.n,
                    s.mean_s,
                    s.median_s,
                    s.stddev_s,
                    s.mode_s,
                    s.p95_s
                );
            }
            Err(e) => {
                failed = true;
                eprintln!("config {i}: {e}");
            }
        }
    }
    println!("wrote {}", out.display());
    Ok(if failed { EXIT_FAILURE } else { EXIT_OK })
}

fn raw_path(out: &Path, index: Option<usize>) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("results");
    let name = match index {
        Some(i) => format!("{stem}.{i}.raw.txt"),
        None => format!("{stem}.raw.txt"),
    };
    out.with_file_name(name)
}
