//! The node event loop. Network frames, timer fires and API calls all become
//! [`Command`]s processed one at a time by the task that owns the
//! [`GossipNode`].

use std::net::SocketAddr;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use marketpalace_core::clock::{Clock, SystemClock};
use marketpalace_core::crypto::PublicKey;
use marketpalace_core::gossip::{
    GossipNode, MessageType, NodeIdentity, PeerId, PeerInfo, PeersRequest, PushTimer, WireMessage,
};
use marketpalace_core::market::{ListingStore, MergeReport};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::JoinHandle;

use crate::config::NodeConfig;
use crate::transport::{Conn, Transport};

const COMMAND_DEPTH: usize = 1024;

pub fn now() -> u64 {
    SystemClock.now()
}

/// State owned by the event loop.
pub struct State {
    pub node: GossipNode,
    pub started: Instant,
    pub transport: Transport,
}

type Job = Box<dyn FnOnce(&mut State) + Send>;

pub enum Command {
    Frame { from: PeerInfo, msg: WireMessage, conn: Conn },
    TimerFire,
    Run(Job),
}

#[derive(Debug, thiserror::Error)]
#[error("node event loop has stopped")]
pub struct NodeStopped;

#[derive(Clone)]
pub struct NodeHandle {
    tx: mpsc::Sender<Command>,
}

impl NodeHandle {
    pub async fn send(&self, cmd: Command) -> Result<(), NodeStopped> {
        self.tx.send(cmd).await.map_err(|_| NodeStopped)
    }

    /// Runs `f` on the event loop and returns its result.
    pub async fn call<R, F>(&self, f: F) -> Result<R, NodeStopped>
    where
        R: Send + 'static,
        F: FnOnce(&mut State) -> R + Send + 'static,
    {
        let (tx, rx) = oneshot::channel();
        self.send(Command::Run(Box::new(move |st| {
            let _ = tx.send(f(st));
        })))
        .await?;
        rx.await.map_err(|_| NodeStopped)
    }
}

fn dispatch(st: &mut State, cmd: Command, handle: &NodeHandle) {
    match cmd {
        Command::Run(job) => job(st),
        Command::TimerFire => {
            let t = now();
            let pushes = st.node.on_timer_fire(t);
            tracing::debug!(targets = pushes.len(), listings = st.node.store().len(), "timer fired");
            let ask = st.node.peers_request();
            for (peer, msg) in pushes {
                let transport = st.transport.clone();
                let handle = handle.clone();
                let ask = ask.clone();
                tokio::spawn(async move {
                    let res = transport.deliver(&peer, msg).await;
                    if res.is_ok() {
                        let _ = transport.deliver(&peer, ask).await;
                    }
                    let id = peer.peer_id;
                    let _ = handle
                        .call(move |st| match res {
                            Ok(()) => st.node.mark_reachable(&id, now()),
                            Err(err) => {
                                tracing::info!(peer = %id, %err, "push failed");
                                st.node.mark_unreachable(&id);
                            }
                        })
                        .await;
                });
            }
        }
        Command::Frame { from, msg, conn } => handle_frame(st, &from, msg, &conn),
    }
}

fn handle_frame(st: &mut State, from: &PeerInfo, msg: WireMessage, conn: &Conn) {
    let t = now();
    match msg.kind {
        MessageType::Push => match st.node.handle_push(from, &msg, t) {
            Ok((report, ack)) => {
                tracing::debug!(peer = %from.peer_id, accepted = report.accepted, "push merged");
                conn.post(ack);
            }
            Err(err) => tracing::warn!(peer = %from.peer_id, %err, "push rejected"),
        },
        MessageType::PushAck => {
            if let Ok(report) = msg.decode::<MergeReport>() {
                tracing::trace!(peer = %from.peer_id, ?report, "push acknowledged");
            }
            st.node.mark_reachable(&from.peer_id, t);
        }
        MessageType::PeersRequest => conn.post(st.node.peers_response()),
        MessageType::PeersResponse => match st.node.handle_peers_response(&msg) {
            Ok(added) if added > 0 => tracing::debug!(added, "learned peers"),
            Ok(_) => {}
            Err(err) => tracing::debug!(%err, "bad peers-response"),
        },
        MessageType::Envelope => match st.node.handle_envelope(&msg, t) {
            Ok(inbound) => tracing::info!(peer = %from.peer_id, ?inbound, "direct message received"),
            Err(err) => tracing::warn!(peer = %from.peer_id, %err, "envelope dropped"),
        },
        MessageType::Hello | MessageType::HelloAck => {
            if let Err(err) = st.node.handle_hello(&msg, t) {
                tracing::debug!(%err, "late hello ignored");
            }
        }
    }
}

/// A daemon running inside the current tokio runtime.
pub struct RunningNode {
    pub handle: NodeHandle,
    pub transport: Transport,
    pub peer_id: PeerId,
    pub listen_addr: SocketAddr,
    pub api_addr: SocketAddr,
    pub timer: PushTimer,
    shutdown: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl RunningNode {
    /// Stops all tasks. The store is written through on every change, so
    /// nothing is pending.
    pub async fn shutdown(mut self) {
        let _ = self.shutdown.send(true);
        self.transport.close_all();
        for t in self.tasks.drain(..) {
            t.abort();
            let _ = t.await;
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("bootstrap failed: no address in {addrs:?} reachable after {attempts} attempts")]
pub struct BootstrapFailed {
    pub addrs: Vec<String>,
    pub attempts: u32,
}

/// Dials the bootstrap addresses until one answers, then asks it for peers.
/// Returns the number of bootstrap nodes joined.
pub async fn bootstrap(transport: &Transport, addrs: &[String], retries: u32) -> Result<usize, BootstrapFailed> {
    for attempt in 0..=retries {
        let mut joined = 0;
        for addr in addrs {
            match transport.connect(addr).await {
                Ok((info, conn)) => {
                    tracing::info!(%addr, peer = %info.peer_id, "joined via bootstrap");
                    let ask = WireMessage::new(MessageType::PeersRequest, &PeersRequest {});
                    if conn.send(ask).await.is_ok() {
                        joined += 1;
                    }
                }
                Err(err) => tracing::info!(%addr, %err, attempt, "bootstrap attempt failed"),
            }
        }
        if joined > 0 {
            return Ok(joined);
        }
        if attempt < retries {
            tokio::time::sleep(Duration::from_millis(250 * u64::from(attempt + 1))).await;
        }
    }
    Err(BootstrapFailed { addrs: addrs.to_vec(), attempts: retries + 1 })
}

/// Starts the daemon: peer listener, event loop, push timer, local API and
/// bootstrap. Binding failures are returned; bootstrap failure is logged.
pub async fn start(cfg: &NodeConfig, identity: NodeIdentity, server_key: PublicKey) -> Result<RunningNode> {
    let listener = TcpListener::bind(&cfg.listen_addr)
        .await
        .with_context(|| format!("binding peer listener on {}", cfg.listen_addr))?;
    let listen_addr = listener.local_addr()?;
    let api_listener =
        TcpListener::bind(&cfg.api_addr).await.with_context(|| format!("binding API on {}", cfg.api_addr))?;
    let api_addr = api_listener.local_addr()?;

    let store = ListingStore::open(cfg.listings_dir(), server_key.clone(), now())
        .with_context(|| format!("opening listing store in {}", cfg.listings_dir().display()))?;
    tracing::info!(listings = store.len(), "listing store loaded");
    let advertised = if cfg.listen_addr.ends_with(":0") { listen_addr.to_string() } else { cfg.listen_addr.clone() };
    let node = GossipNode::new(identity, server_key, advertised, cfg.k, store)?;
    let peer_id = node.id();

    let (tx, mut rx) = mpsc::channel(COMMAND_DEPTH);
    let handle = NodeHandle { tx };
    let transport = Transport::new(handle.clone());
    let (shutdown, _) = watch::channel(false);
    let mut tasks = Vec::new();

    let mut state = State { node, started: Instant::now(), transport: transport.clone() };
    let loop_handle = handle.clone();
    tasks.push(tokio::spawn(async move {
        while let Some(cmd) = rx.recv().await {
            dispatch(&mut state, cmd, &loop_handle);
        }
    }));

    tasks.push(tokio::spawn(transport.clone().accept_loop(listener)));

    let period = Duration::from_secs_f64(cfg.timer_period_s);
    let timer = PushTimer::random(period, &mut rand::thread_rng());
    let timer_handle = handle.clone();
    tasks.push(tokio::spawn(async move {
        let start = tokio::time::Instant::now();
        for n in 0u32.. {
            tokio::time::sleep_until(start + timer.fire_time(n)).await;
            if timer_handle.send(Command::TimerFire).await.is_err() {
                break;
            }
        }
    }));

    let app = crate::api::router(handle.clone(), transport.clone());
    let mut stop = shutdown.subscribe();
    tasks.push(tokio::spawn(async move {
        let serve = axum::serve(api_listener, app).with_graceful_shutdown(async move {
            let _ = stop.wait_for(|s| *s).await;
        });
        if let Err(err) = serve.await {
            tracing::error!(%err, "API server failed");
        }
    }));

    if !cfg.bootstrap_addrs.is_empty() {
        let (t, addrs, retries) = (transport.clone(), cfg.bootstrap_addrs.clone(), cfg.bootstrap_retries);
        tasks.push(tokio::spawn(async move {
            if let Err(err) = bootstrap(&t, &addrs, retries).await {
                tracing::error!(%err, "continuing without bootstrap; peers may still connect to us");
            }
        }));
    }

    tracing::info!(%peer_id, %listen_addr, %api_addr, phase_ms = timer.phase().as_millis() as u64, "node started");
    Ok(RunningNode { handle, transport, peer_id, listen_addr, api_addr, timer, shutdown, tasks })
}
