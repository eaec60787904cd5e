//! The data server: HTTP ingestion and queries, plus a TCP socket that pushes
//! seat broadcasts to stop displays.
//!
//! Bus to server traffic is HTTP; server to stop traffic is newline-delimited
//! envelopes over TCP. A stop subscribes by sending an ack for seq 0 whose
//! sender is `stop:<id>`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::DateTime;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{broadcast, oneshot};
use tokio::task::JoinHandle;

use smartbus_core::netproto::{self, Body, Envelope, Outbox, RetransmitPolicy, Sequencer};
use smartbus_core::ridership::{Granularity, Timestamp};
use smartbus_core::server::{Credentials, IngestError, Network, QueryError, ReportError, Role, Store};

use crate::{now_ms, ServiceError};

const BROADCAST_BUFFER: usize = 1024;

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub http_addr: SocketAddr,
    pub broadcast_addr: SocketAddr,
    pub log_path: PathBuf,
    pub network: Network,
    pub credentials: Credentials,
    pub retransmit: RetransmitPolicy,
}

pub struct AppState {
    store: RwLock<Store>,
    credentials: Credentials,
    /// Broadcast seqs start at the boot time in microseconds so a restarted
    /// server never reuses numbers the stops have already seen.
    seq: Mutex<Sequencer>,
    broadcasts: broadcast::Sender<Envelope>,
    retransmit: RetransmitPolicy,
}

impl AppState {
    /// Number of envelopes in the durable log.
    pub fn log_len(&self) -> usize {
        self.store.read().unwrap().log().len()
    }

    fn broadcast_bus(&self, bus_id: &str) {
        let envelopes = {
            let store = self.store.read().unwrap();
            let mut seq = self.seq.lock().unwrap();
            let ts = now_ms();
            store
                .seat_broadcasts(bus_id)
                .into_iter()
                .map(|b| seq.envelope(ts, Body::SeatBroadcast(b)))
                .collect::<Vec<_>>()
        };
        for env in envelopes {
            // No subscribers is fine.
            let _ = self.broadcasts.send(env);
        }
    }

    /// Fresh broadcasts for one stop, for a newly connected display.
    fn snapshot_for(&self, stop_id: &str) -> Vec<Envelope> {
        let store = self.store.read().unwrap();
        let mut buses: Vec<String> = store.network().buses.keys().cloned().collect();
        buses.extend(store.buses().map(str::to_owned));
        buses.sort();
        buses.dedup();
        let mut seq = self.seq.lock().unwrap();
        let ts = now_ms();
        buses
            .iter()
            .flat_map(|bus| store.seat_broadcasts(bus))
            .filter(|b| b.stop_id == stop_id)
            .map(|b| seq.envelope(ts, Body::SeatBroadcast(b)))
            .collect()
    }
}

pub struct RunningServer {
    pub http_addr: SocketAddr,
    pub broadcast_addr: SocketAddr,
    pub state: Arc<AppState>,
    shutdown: Option<oneshot::Sender<()>>,
    tasks: Vec<JoinHandle<()>>,
}

impl RunningServer {
    /// Stops accepting connections and waits for the listeners to exit.
    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        for t in self.tasks.drain(..) {
            t.abort();
            let _ = t.await;
        }
    }

    pub async fn wait(mut self) {
        for t in self.tasks.drain(..) {
            let _ = t.await;
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/ingest", post(ingest))
        .route("/bus/{id}/location", get(location))
        .route("/bus/{id}/eta", get(eta))
        .route("/bus/{id}/occupancy", get(occupancy))
        .route("/report", get(report))
        .route("/healthz", get(|| async { "ok" }))
        .with_state(state)
}

/// Replays the log, binds both listeners, and serves in the background.
pub async fn start(opts: ServerOptions) -> Result<RunningServer, ServiceError> {
    let store = Store::open(&opts.log_path, opts.network)?;
    let (tx, _) = broadcast::channel(BROADCAST_BUFFER);
    let state = Arc::new(AppState {
        store: RwLock::new(store),
        credentials: opts.credentials,
        seq: Mutex::new(Sequencer::starting_at("server", now_ms() as u64 * 1000)),
        broadcasts: tx,
        retransmit: opts.retransmit,
    });

    let http = TcpListener::bind(opts.http_addr).await?;
    let stops = TcpListener::bind(opts.broadcast_addr).await?;
    let http_addr = http.local_addr()?;
    let broadcast_addr = stops.local_addr()?;
    let (shutdown_tx, shutdown_rx) = oneshot::channel::<()>();

    let app = router(state.clone());
    let http_task = tokio::spawn(async move {
        let _ = axum::serve(http, app)
            .with_graceful_shutdown(async {
                let _ = shutdown_rx.await;
            })
            .await;
    });
    let link_state = state.clone();
    let stop_task = tokio::spawn(async move {
        while let Ok((stream, _)) = stops.accept().await {
            tokio::spawn(stop_link(link_state.clone(), stream));
        }
    });

    Ok(RunningServer {
        http_addr,
        broadcast_addr,
        state,
        shutdown: Some(shutdown_tx),
        tasks: vec![http_task, stop_task],
    })
}

fn error(status: StatusCode, message: impl ToString) -> Response {
    (status, Json(json!({ "error": message.to_string() }))).into_response()
}

async fn ingest(State(app): State<Arc<AppState>>, body: Bytes) -> Response {
    let env = match netproto::decode(&body) {
        Ok(env) => env,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let bus = match &env.body {
        Body::Telemetry(t) => Some(t.bus_id.clone()),
        Body::Punch(p) => Some(p.bus_id.clone()),
        _ => None,
    };
    let outcome = app.store.write().unwrap().ingest(env, now_ms());
    match outcome {
        Ok(o) => {
            if o.applied {
                if let Some(bus) = bus {
                    app.broadcast_bus(&bus);
                }
            }
            (
                StatusCode::OK,
                [(header::CONTENT_TYPE, "application/x-ndjson")],
                netproto::encode(&o.ack),
            )
                .into_response()
        }
        Err(IngestError::Io(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
        Err(e) => error(StatusCode::BAD_REQUEST, e),
    }
}

async fn location(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    match app.store.read().unwrap().latest_location(&id) {
        Ok(t) => Json(t.clone()).into_response(),
        Err(e) => error(StatusCode::NOT_FOUND, e),
    }
}

#[derive(Deserialize)]
struct EtaQuery {
    stop: String,
}

#[derive(Serialize)]
struct EtaBody<'a> {
    bus_id: &'a str,
    stop_id: &'a str,
    eta_s: f64,
}

async fn eta(State(app): State<Arc<AppState>>, Path(id): Path<String>, Query(q): Query<EtaQuery>) -> Response {
    match app.store.read().unwrap().eta_seconds(&id, &q.stop) {
        Ok(eta_s) => Json(EtaBody {
            bus_id: &id,
            stop_id: &q.stop,
            eta_s,
        })
        .into_response(),
        Err(e @ (QueryError::UnknownBus(_) | QueryError::UnknownStop(_))) => error(StatusCode::NOT_FOUND, e),
        Err(e) => error(StatusCode::UNPROCESSABLE_ENTITY, e),
    }
}

async fn occupancy(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    let store = app.store.read().unwrap();
    Json(json!({
        "bus_id": id,
        "occupancy": store.occupancy(&id),
        "seats_available": store.seats_available(&id),
    }))
    .into_response()
}

#[derive(Deserialize)]
struct ReportQuery {
    from: String,
    to: String,
    granularity: String,
}

/// Milliseconds since the epoch, or an RFC 3339 date-time.
pub fn parse_timestamp(s: &str) -> Result<Timestamp, String> {
    if let Ok(ms) = s.parse::<Timestamp>() {
        return Ok(ms);
    }
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.timestamp_millis())
        .map_err(|e| format!("{s:?} is neither epoch milliseconds nor RFC 3339: {e}"))
}

fn credential(app: &AppState, headers: &HeaderMap) -> Option<Role> {
    let value = headers.get(header::AUTHORIZATION)?.to_str().ok()?;
    app.credentials.role_of(value.strip_prefix("Bearer ")?.trim())
}

async fn report(State(app): State<Arc<AppState>>, headers: HeaderMap, Query(q): Query<ReportQuery>) -> Response {
    let role = credential(&app, &headers);
    if role.is_none() {
        return error(StatusCode::UNAUTHORIZED, ReportError::Unauthorized);
    }
    let (from, to) = match (parse_timestamp(&q.from), parse_timestamp(&q.to)) {
        (Ok(f), Ok(t)) => (f, t),
        (Err(e), _) | (_, Err(e)) => return error(StatusCode::BAD_REQUEST, e),
    };
    let granularity: Granularity = match q.granularity.parse() {
        Ok(g) => g,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    match app.store.read().unwrap().passenger_report(role, from, to, granularity) {
        Ok(buckets) => Json(buckets).into_response(),
        Err(ReportError::Unauthorized) => error(StatusCode::FORBIDDEN, ReportError::Unauthorized),
        Err(e) => error(StatusCode::BAD_REQUEST, e),
    }
}

async fn write_env(w: &mut (impl AsyncWriteExt + Unpin), env: &Envelope) -> std::io::Result<()> {
    w.write_all(&netproto::encode(env)).await?;
    w.flush().await
}

/// One stop display connection: subscription, pushes, acks, retransmission.
async fn stop_link(app: Arc<AppState>, stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    let (r, mut w) = stream.into_split();
    let mut lines = BufReader::new(r).lines();
    let stop_id = match lines.next_line().await {
        Ok(Some(line)) => match netproto::decode(line.as_bytes()) {
            Ok(Envelope {
                seq: 0,
                sender,
                body: Body::Ack(_),
                ..
            }) => match sender.strip_prefix("stop:") {
                Some(id) => id.to_owned(),
                None => return,
            },
            _ => return,
        },
        _ => return,
    };
    let mut rx = app.broadcasts.subscribe();
    let mut outbox = Outbox::new(app.retransmit);
    let clock = tokio::time::Instant::now();
    let elapsed = |c: tokio::time::Instant| c.elapsed().as_millis() as u64;

    for env in app.snapshot_for(&stop_id) {
        if write_env(&mut w, &env).await.is_err() {
            return;
        }
        outbox.track(&stop_id, env, elapsed(clock));
    }
    let mut tick = tokio::time::interval(Duration::from_millis(app.retransmit.interval_ms.max(1)));
    loop {
        tokio::select! {
            msg = rx.recv() => match msg {
                Ok(env) => {
                    let Body::SeatBroadcast(b) = &env.body else { continue };
                    if b.stop_id != stop_id {
                        continue;
                    }
                    if write_env(&mut w, &env).await.is_err() {
                        return;
                    }
                    outbox.track(&stop_id, env, elapsed(clock));
                }
                Err(broadcast::error::RecvError::Lagged(_)) => {
                    for env in app.snapshot_for(&stop_id) {
                        if write_env(&mut w, &env).await.is_err() {
                            return;
                        }
                        outbox.track(&stop_id, env, elapsed(clock));
                    }
                }
                Err(broadcast::error::RecvError::Closed) => return,
            },
            line = lines.next_line() => match line {
                Ok(Some(line)) => {
                    if let Ok(Envelope { body: Body::Ack(a), .. }) = netproto::decode(line.as_bytes()) {
                        outbox.ack(a.seq);
                    }
                }
                _ => return,
            },
            _ = tick.tick() => {
                let batch = outbox.due(elapsed(clock));
                for (_, env) in &batch.resend {
                    if write_env(&mut w, env).await.is_err() {
                        return;
                    }
                }
            }
        }
    }
}
