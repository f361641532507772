//! Local HTTP API used by the web UI and the CLI client.

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get};
use axum::{Json, Router};
use marketpalace_core::canonical::{hex32, to_canonical_vec};
use marketpalace_core::gossip::{Channel, GossipError, PeerId, PeerInfo, ReceivedBid, WireMessage};
use marketpalace_core::market::{
    verify_signed_listing, ContentId, ListingDraft, ListingVerdict, MarketError, SignedListing, Tombstone,
};
use serde::{Deserialize, Serialize};

use crate::daemon::{now, NodeHandle, NodeStopped};
use crate::transport::{Transport, TransportError};

#[derive(Clone)]
struct AppState {
    node: NodeHandle,
    transport: Transport,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeStatus {
    pub peer_id: PeerId,
    pub peer_count: usize,
    pub listing_count: usize,
    pub uptime_s: u64,
    pub registered: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BidRequest {
    pub content_id: ContentId,
    pub amount: u64,
    pub currency: String,
    pub target_peer: PeerId,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatRequest {
    pub body: String,
    /// Needed only for the first message of a new channel.
    #[serde(default)]
    pub target_peer: Option<PeerId>,
    #[serde(default)]
    pub content_id: Option<ContentId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivered {
    pub delivered: bool,
    pub target_peer: PeerId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub detail: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, detail: impl ToString) -> Self {
        Self { status, body: ErrorBody { error: error.into(), detail: detail.to_string() } }
    }

    fn bad_request(detail: impl ToString) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad-request", detail)
    }
}

impl From<NodeStopped> for ApiError {
    fn from(e: NodeStopped) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "node-stopped", e)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl From<TransportError> for ApiError {
    fn from(e: TransportError) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "unreachable", e)
    }
}

impl From<GossipError> for ApiError {
    fn from(e: GossipError) -> Self {
        match &e {
            GossipError::NotFound(_) => Self::new(StatusCode::NOT_FOUND, "unknown-peer", e),
            GossipError::UnknownChannel => Self::new(StatusCode::NOT_FOUND, "unknown-channel", e),
            GossipError::Market(MarketError::NotFound(_)) => Self::new(StatusCode::NOT_FOUND, "not-found", e),
            GossipError::Market(MarketError::NotOwner) => Self::new(StatusCode::UNAUTHORIZED, "not-owner", e),
            GossipError::Market(MarketError::Io(_)) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "storage", e),
            GossipError::Market(MarketError::Validation(_)) => Self::new(StatusCode::BAD_REQUEST, "validation", e),
            _ => Self::bad_request(e),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        Canonical(self.status, self.body).into_response()
    }
}

/// JSON response body with sorted keys and no whitespace.
pub struct Canonical<T>(pub StatusCode, pub T);

impl<T: Serialize> IntoResponse for Canonical<T> {
    fn into_response(self) -> Response {
        match to_canonical_vec(&self.1) {
            Ok(bytes) => (self.0, [(header::CONTENT_TYPE, "application/json")], bytes).into_response(),
            Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
        }
    }
}

type ApiResult<T> = Result<Canonical<T>, ApiError>;

fn ok<T>(v: T) -> ApiResult<T> {
    Ok(Canonical(StatusCode::OK, v))
}

pub fn router(node: NodeHandle, transport: Transport) -> Router {
    Router::new()
        .route("/status", get(status))
        .route("/listings", get(listings).post(add_listing))
        .route("/listings/{id}", delete(remove_listing))
        .route("/bids", get(bids).post(bid))
        .route("/chats", get(chats))
        .route("/chats/{channel_id}", get(chat).post(post_chat))
        .route("/peers", get(peers))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not-found", "no such endpoint") })
        .with_state(AppState { node, transport })
}

async fn status(State(s): State<AppState>) -> ApiResult<NodeStatus> {
    ok(s.node
        .call(|st| NodeStatus {
            peer_id: st.node.id(),
            peer_count: st.node.table().len(),
            listing_count: st.node.store().len(),
            uptime_s: st.started.elapsed().as_secs(),
            // The daemon refuses to start without a verified bundle.
            registered: true,
        })
        .await?)
}

async fn listings(State(s): State<AppState>) -> ApiResult<Vec<SignedListing>> {
    ok(s.node
        .call(|st| {
            let t = now();
            let key = st.node.server_key().clone();
            st.node
                .store()
                .listings()
                .filter(|l| verify_signed_listing(&key, l, t) == ListingVerdict::Valid)
                .cloned()
                .collect()
        })
        .await?)
}

async fn add_listing(
    State(s): State<AppState>,
    body: Result<Json<ListingDraft>, JsonRejection>,
) -> ApiResult<SignedListing> {
    let Json(draft) = body?;
    let sl = s.node.call(move |st| st.node.add_listing(&draft, now())).await??;
    Ok(Canonical(StatusCode::CREATED, sl))
}

async fn remove_listing(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Tombstone> {
    let id: ContentId = id.parse().map_err(|e: MarketError| ApiError::bad_request(e))?;
    let res = s
        .node
        .call(move |st| {
            if st.node.store().is_removed(&id) {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    "already-removed",
                    format!("listing {id} was removed"),
                ));
            }
            st.node.remove_listing(&id, now()).map_err(ApiError::from)
        })
        .await??;
    ok(res)
}

async fn deliver(s: &AppState, peer: PeerInfo, msg: WireMessage) -> ApiResult<Delivered> {
    s.transport.deliver(&peer, msg).await?;
    ok(Delivered { delivered: true, target_peer: peer.peer_id })
}

async fn bid(State(s): State<AppState>, body: Result<Json<BidRequest>, JsonRejection>) -> ApiResult<Delivered> {
    let Json(req) = body?;
    let (peer, msg) = s
        .node
        .call(move |st| st.node.make_bid(req.content_id, req.amount, &req.currency, &req.target_peer, now()))
        .await??;
    deliver(&s, peer, msg).await
}

async fn bids(State(s): State<AppState>) -> ApiResult<Vec<ReceivedBid>> {
    ok(s.node.call(|st| st.node.bids().to_vec()).await?)
}

async fn chats(State(s): State<AppState>) -> ApiResult<Vec<Channel>> {
    ok(s.node.call(|st| st.node.channels().cloned().collect()).await?)
}

fn parse_channel(raw: &str) -> Result<[u8; 32], ApiError> {
    hex32::parse(raw).map_err(ApiError::bad_request)
}

async fn chat(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Channel> {
    let id = parse_channel(&id)?;
    let ch = s.node.call(move |st| st.node.channel(&id).cloned()).await?;
    ch.map(|c| Canonical(StatusCode::OK, c))
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown-channel", "no such channel"))
}

async fn post_chat(
    State(s): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<ChatRequest>, JsonRejection>,
) -> ApiResult<Delivered> {
    let id = parse_channel(&id)?;
    let Json(req) = body?;
    let route = match (req.target_peer, req.content_id) {
        (Some(p), Some(c)) => Some((p, c)),
        (None, None) => None,
        _ => return Err(ApiError::bad_request("target_peer and content_id must be given together")),
    };
    let (peer, msg) = s.node.call(move |st| st.node.send_chat(id, &req.body, route, now())).await??;
    deliver(&s, peer, msg).await
}

async fn peers(State(s): State<AppState>) -> ApiResult<Vec<PeerInfo>> {
    ok(s.node.call(|st| st.node.table().iter().cloned().collect()).await?)
}
