//! WebSocket render service.
//!
//! `GET /health` answers `ok`; `/` and `/ws` upgrade to the message
//! protocol in [`crate::protocol`]. Each session owns one latest-value slot
//! and at most one in-flight render: state messages arriving while a frame
//! renders replace whatever is waiting, so only the newest pose is drawn
//! next.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use gs3_core::relight::render_request;
use gs3_core::{Exec, ImageBuffer, RenderRequest, SceneModel};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use crate::protocol::{encode_frame, parse_client_message, ClientMessage, FrameFormat, SceneContext, ServerMessage};

/// Environment variable capping render threads.
pub const THREADS_ENV: &str = "GS3_THREADS";

/// Anything that can turn a request into an image. Tests substitute
/// instrumented renderers.
pub trait FrameRenderer: Send + Sync + 'static {
    fn render(&self, request: &RenderRequest) -> Result<ImageBuffer, String>;
}

pub struct ModelRenderer {
    model: SceneModel,
    pool: Option<rayon::ThreadPool>,
}

impl ModelRenderer {
    /// `threads` of `None` or 1 renders serially on the calling thread.
    pub fn new(model: SceneModel, threads: Option<usize>) -> Result<Self, rayon::ThreadPoolBuildError> {
        let pool = match threads {
            Some(n) if n > 1 => Some(rayon::ThreadPoolBuilder::new().num_threads(n).build()?),
            _ => None,
        };
        Ok(ModelRenderer { model, pool })
    }
}

impl FrameRenderer for ModelRenderer {
    fn render(&self, request: &RenderRequest) -> Result<ImageBuffer, String> {
        let r = match &self.pool {
            Some(pool) => pool.install(|| render_request(&self.model, request, Exec::Parallel)),
            None => render_request(&self.model, request, Exec::Serial),
        };
        r.map_err(|e| e.to_string())
    }
}

/// Thread cap from `GS3_THREADS`, if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

#[derive(Clone)]
pub struct AppState {
    pub renderer: Arc<dyn FrameRenderer>,
    pub context: Arc<SceneContext>,
}

impl AppState {
    pub fn new(renderer: impl FrameRenderer, context: SceneContext) -> Self {
        AppState { renderer: Arc::new(renderer), context: Arc::new(context) }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new().route("/health", get(health)).route("/", get(upgrade)).route("/ws", get(upgrade)).with_state(state)
}

async fn health() -> &'static str {
    "ok"
}

async fn upgrade(ws: WebSocketUpgrade, State(state): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| session(socket, state))
}

/// Binds `addr` and serves until the task is dropped. Returns the bound address.
pub async fn spawn_server(addr: SocketAddr, state: AppState) -> std::io::Result<(SocketAddr, JoinHandle<std::io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let handle = tokio::spawn(async move { axum::serve(listener, router(state)).await });
    Ok((local, handle))
}

struct Job {
    seq: u32,
    format: FrameFormat,
    request: RenderRequest,
}

type Rendered = (u32, FrameFormat, Result<ImageBuffer, String>);

fn start(renderer: &Arc<dyn FrameRenderer>, job: Job) -> JoinHandle<Rendered> {
    let renderer = renderer.clone();
    tokio::task::spawn_blocking(move || (job.seq, job.format, renderer.render(&job.request)))
}

async fn send_text(socket: &mut WebSocket, msg: ServerMessage) -> bool {
    socket.send(Message::Text(msg.to_json().into())).await.is_ok()
}

/// Runs one client connection to completion.
pub async fn session(mut socket: WebSocket, app: AppState) {
    let mut pending: Option<Job> = None;
    let mut in_flight: Option<JoinHandle<Rendered>> = None;
    let (mut states, mut pings) = (0u32, 0u32);
    loop {
        tokio::select! {
            incoming = socket.recv() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Binary(_))) => {
                        if !send_text(&mut socket, ServerMessage::Error { message: "binary messages are not accepted".into(), seq: None }).await {
                            break;
                        }
                        continue;
                    }
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => continue,
                };
                let reply = match parse_client_message(&text) {
                    Ok(ClientMessage::Ping { seq }) => {
                        pings = pings.wrapping_add(1);
                        Some(ServerMessage::Pong { seq: seq.unwrap_or(pings) })
                    }
                    Ok(ClientMessage::State(state)) => {
                        states = states.wrapping_add(1);
                        let seq = state.seq.unwrap_or(states);
                        match app.context.request(&state) {
                            Ok(request) => {
                                pending = Some(Job { seq, format: state.format, request });
                                None
                            }
                            Err(message) => Some(ServerMessage::Error { message, seq: Some(seq) }),
                        }
                    }
                    Err(message) => Some(ServerMessage::Error { message, seq: None }),
                };
                if let Some(r) = reply {
                    if !send_text(&mut socket, r).await {
                        break;
                    }
                }
            }
            done = async { in_flight.as_mut().expect("guarded by the branch condition").await }, if in_flight.is_some() => {
                in_flight = None;
                let ok = match done {
                    Ok((seq, format, Ok(img))) => socket.send(Message::Binary(encode_frame(seq, &img, format).into())).await.is_ok(),
                    Ok((seq, _, Err(message))) => send_text(&mut socket, ServerMessage::Error { message, seq: Some(seq) }).await,
                    Err(e) => send_text(&mut socket, ServerMessage::Error { message: format!("render task failed: {e}"), seq: None }).await,
                };
                if !ok {
                    break;
                }
            }
        }
        if in_flight.is_none() {
            if let Some(job) = pending.take() {
                in_flight = Some(start(&app.renderer, job));
            }
        }
    }
}
