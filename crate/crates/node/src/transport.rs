//! Persistent framed TCP connections between nodes.
//!
//! Each side opens with `hello`/`hello-ack`; after that every frame is handed
//! to the node's event loop together with the verified sender.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use marketpalace_core::gossip::{
    frame_encode, frame_len, FrameError, MessageType, PeerId, PeerInfo, WireMessage, HEADER_LEN,
};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot, watch};

use crate::daemon::{Command, NodeHandle};

pub const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
const OUTBOX_DEPTH: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("{addr} unreachable: {reason}")]
    Unreachable { addr: String, reason: String },
    #[error("handshake with {addr} failed: {reason}")]
    Handshake { addr: String, reason: String },
    #[error("peer at {addr} is {actual}, expected {expected}")]
    WrongPeer { addr: String, expected: PeerId, actual: PeerId },
}

type Outgoing = (WireMessage, Option<oneshot::Sender<std::io::Result<()>>>);

/// Sending side of one live connection.
#[derive(Clone, Debug)]
pub struct Conn {
    id: u64,
    tx: mpsc::Sender<Outgoing>,
}

impl Conn {
    /// Queues a frame without waiting for it to be written.
    pub fn post(&self, msg: WireMessage) {
        if self.tx.try_send((msg, None)).is_err() {
            tracing::debug!("connection outbox full or closed, dropping frame");
        }
    }

    /// Resolves once the frame has been written to the socket.
    pub async fn send(&self, msg: WireMessage) -> std::io::Result<()> {
        let (done, wait) = oneshot::channel();
        self.tx.send((msg, Some(done))).await.map_err(|_| std::io::Error::other("connection closed"))?;
        wait.await.map_err(|_| std::io::Error::other("connection closed"))?
    }
}

#[derive(Clone)]
pub struct Transport {
    inner: Arc<Inner>,
}

struct Inner {
    conns: Mutex<HashMap<PeerId, Conn>>,
    next_id: Mutex<u64>,
    node: NodeHandle,
    closed: watch::Sender<bool>,
}

async fn read_frame<R: AsyncRead + Unpin>(r: &mut R) -> std::io::Result<WireMessage> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header).await?;
    let len = frame_len(header).map_err(std::io::Error::other)?;
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).await?;
    WireMessage::from_body(&body).map_err(std::io::Error::other)
}

async fn write_frame(w: &mut (impl AsyncWriteExt + Unpin), msg: &WireMessage) -> std::io::Result<()> {
    let bytes = frame_encode(msg).map_err(|e: FrameError| std::io::Error::other(e))?;
    w.write_all(&bytes).await
}

impl Transport {
    pub fn new(node: NodeHandle) -> Self {
        let (closed, _) = watch::channel(false);
        let inner = Inner { conns: Mutex::new(HashMap::new()), next_id: Mutex::new(0), node, closed };
        Self { inner: Arc::new(inner) }
    }

    pub fn connected(&self) -> Vec<PeerId> {
        self.inner.conns.lock().expect("conns poisoned").keys().copied().collect()
    }

    fn existing(&self, peer: &PeerId) -> Option<Conn> {
        self.inner.conns.lock().expect("conns poisoned").get(peer).cloned()
    }

    fn forget(&self, peer: &PeerId, id: u64) {
        let mut conns = self.inner.conns.lock().expect("conns poisoned");
        if conns.get(peer).is_some_and(|c| c.id == id) {
            conns.remove(peer);
        }
    }

    /// Accepts inbound connections until the listener fails.
    pub async fn accept_loop(self, listener: TcpListener) {
        loop {
            let (stream, addr) = match listener.accept().await {
                Ok(s) => s,
                Err(err) => {
                    tracing::warn!(%err, "accept failed");
                    continue;
                }
            };
            let t = self.clone();
            tokio::spawn(async move {
                if let Err(err) = t.answer(stream).await {
                    tracing::debug!(%addr, %err, "inbound handshake failed");
                }
            });
        }
    }

    async fn answer(&self, mut stream: TcpStream) -> anyhow::Result<()> {
        let hello = tokio::time::timeout(CONNECT_TIMEOUT, read_frame(&mut stream)).await??;
        if hello.kind != MessageType::Hello {
            anyhow::bail!("expected hello, got {:?}", hello.kind);
        }
        let (info, ack) = self
            .inner
            .node
            .call(move |st| {
                let info = st.node.handle_hello(&hello, crate::daemon::now())?;
                Ok::<_, marketpalace_core::gossip::GossipError>((info, st.node.hello(MessageType::HelloAck)))
            })
            .await??;
        write_frame(&mut stream, &ack).await?;
        self.attach(stream, info);
        Ok(())
    }

    /// Dials `addr`, exchanges hellos and registers the connection.
    pub async fn connect(&self, addr: &str) -> Result<(PeerInfo, Conn), TransportError> {
        let unreachable = |reason: String| TransportError::Unreachable { addr: addr.to_owned(), reason };
        let handshake = |reason: String| TransportError::Handshake { addr: addr.to_owned(), reason };
        let mut stream = tokio::time::timeout(CONNECT_TIMEOUT, TcpStream::connect(addr))
            .await
            .map_err(|_| unreachable("connect timed out".into()))?
            .map_err(|e| unreachable(e.to_string()))?;
        let hello =
            self.inner.node.call(|st| st.node.hello(MessageType::Hello)).await.map_err(|e| handshake(e.to_string()))?;
        write_frame(&mut stream, &hello).await.map_err(|e| unreachable(e.to_string()))?;
        let ack = tokio::time::timeout(CONNECT_TIMEOUT, read_frame(&mut stream))
            .await
            .map_err(|_| handshake("no hello-ack within timeout".into()))?
            .map_err(|e| handshake(e.to_string()))?;
        if ack.kind != MessageType::HelloAck {
            return Err(handshake(format!("expected hello-ack, got {:?}", ack.kind)));
        }
        let info = self
            .inner
            .node
            .call(move |st| st.node.handle_hello(&ack, crate::daemon::now()))
            .await
            .map_err(|e| handshake(e.to_string()))?
            .map_err(|e| handshake(e.to_string()))?;
        let conn = self.attach(stream, info.clone());
        Ok((info, conn))
    }

    fn attach(&self, stream: TcpStream, peer: PeerInfo) -> Conn {
        let id = {
            let mut n = self.inner.next_id.lock().expect("id poisoned");
            *n += 1;
            *n
        };
        let (tx, mut rx) = mpsc::channel::<Outgoing>(OUTBOX_DEPTH);
        let conn = Conn { id, tx };
        self.inner.conns.lock().expect("conns poisoned").insert(peer.peer_id, conn.clone());
        let (mut reader, mut writer) = stream.into_split();

        let mut closed = self.inner.closed.subscribe();
        tokio::spawn(async move {
            loop {
                let (msg, done) = tokio::select! {
                    next = rx.recv() => match next {
                        Some(m) => m,
                        None => break,
                    },
                    _ = closed.wait_for(|c| *c) => break,
                };
                let res = write_frame(&mut writer, &msg).await;
                let failed = res.is_err();
                if let Some(done) = done {
                    let _ = done.send(res);
                }
                if failed {
                    break;
                }
            }
        });

        let t = self.clone();
        let reply = conn.clone();
        let mut closed = self.inner.closed.subscribe();
        tokio::spawn(async move {
            loop {
                let next = tokio::select! {
                    r = read_frame(&mut reader) => r,
                    _ = closed.wait_for(|c| *c) => break,
                };
                match next {
                    Ok(msg) => {
                        let cmd = Command::Frame { from: peer.clone(), msg, conn: reply.clone() };
                        if t.inner.node.send(cmd).await.is_err() {
                            break;
                        }
                    }
                    Err(err) => {
                        tracing::debug!(peer = %peer.peer_id, %err, "connection closed");
                        break;
                    }
                }
            }
            t.forget(&peer.peer_id, id);
        });
        conn
    }

    /// Delivers `msg` to `peer`, reusing a live connection or dialing the
    /// peer's advertised address.
    pub async fn deliver(&self, peer: &PeerInfo, msg: WireMessage) -> Result<(), TransportError> {
        if let Some(conn) = self.existing(&peer.peer_id) {
            if conn.send(msg.clone()).await.is_ok() {
                return Ok(());
            }
            self.forget(&peer.peer_id, conn.id);
        }
        let (info, conn) = self.connect(&peer.address).await?;
        if info.peer_id != peer.peer_id {
            return Err(TransportError::WrongPeer {
                addr: peer.address.clone(),
                expected: peer.peer_id,
                actual: info.peer_id,
            });
        }
        conn.send(msg)
            .await
            .map_err(|e| TransportError::Unreachable { addr: peer.address.clone(), reason: e.to_string() })
    }

    /// Closes every connection; frames still queued are dropped.
    pub fn close_all(&self) {
        let _ = self.inner.closed.send(true);
        self.inner.conns.lock().expect("conns poisoned").clear();
    }
}
