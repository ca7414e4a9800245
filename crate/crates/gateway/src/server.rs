//! WebSocket endpoint: one socket per session, frames in, audio and
//! captions out.

use std::net::SocketAddr;
use std::sync::Arc;

use amava_core::frame::{to_grayscale, GrayFrame, RgbFrame, MIN_FEATURE_SIDE};
use amava_core::pipeline::{Clock, Components, EventLog, Ingested, Session, TokioClock};
use axum::extract::ws::{CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use base64::Engine;
use bytes::Bytes;
use futures_util::stream::SplitSink;
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::mpsc;
use tokio::task::JoinHandle;
use tracing::{debug, info, warn};

use crate::config::Resolved;
use crate::protocol::{ClientMessage, ErrorCode, ServerMessage, StatusState};

/// Close code sent after a handshake violation.
pub const POLICY_VIOLATION: u16 = 1008;

pub fn router(state: Arc<Resolved>) -> Router {
    Router::new().route("/ws", get(upgrade)).with_state(state)
}

/// Serves on an already bound listener until the future is dropped.
pub async fn serve(listener: TcpListener, state: Resolved) -> std::io::Result<()> {
    axum::serve(listener, router(Arc::new(state))).await
}

/// Binds and serves in the background; returns the bound address.
pub async fn spawn(state: Resolved) -> std::io::Result<(SocketAddr, JoinHandle<std::io::Result<()>>)> {
    let listener = TcpListener::bind(state.config.listen).await?;
    let addr = listener.local_addr()?;
    Ok((addr, tokio::spawn(serve(listener, state))))
}

async fn upgrade(ws: WebSocketUpgrade, State(state): State<Arc<Resolved>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| handle_socket(socket, state))
}

/// Decodes a base64 JPEG into a grayscale frame no larger than `max_side`.
pub fn decode_frame(jpeg_b64: &str, captured_at_ms: u64, max_side: usize) -> Result<(GrayFrame, Bytes), String> {
    let jpeg = base64::engine::general_purpose::STANDARD
        .decode(jpeg_b64)
        .map_err(|e| format!("payload is not base64: {e}"))?;
    let img = image::load_from_memory_with_format(&jpeg, image::ImageFormat::Jpeg)
        .map_err(|e| format!("payload is not a JPEG image: {e}"))?
        .to_rgb8();
    let rgb = RgbFrame {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.as_raw(),
    };
    let frame = to_grayscale(&rgb, captured_at_ms)
        .map_err(|e| e.to_string())?
        .downscale_to_fit(max_side);
    if frame.width() < MIN_FEATURE_SIDE || frame.height() < MIN_FEATURE_SIDE {
        return Err(format!(
            "frame is {}x{} after scaling, below the {MIN_FEATURE_SIDE} px minimum",
            frame.width(),
            frame.height()
        ));
    }
    Ok((frame, Bytes::from(jpeg)))
}

fn text(msg: &ServerMessage) -> Message {
    Message::Text(msg.to_json().into())
}

async fn reject(sink: &mut SplitSink<WebSocket, Message>, code: ErrorCode, message: &str) {
    let _ = sink.send(text(&ServerMessage::error(code, message))).await;
    let _ = sink
        .send(Message::Close(Some(CloseFrame {
            code: POLICY_VIOLATION,
            reason: message.to_string().into(),
        })))
        .await;
}

async fn handle_socket(socket: WebSocket, state: Arc<Resolved>) {
    let (mut sink, mut stream) = socket.split();

    let client_version = loop {
        let msg = match stream.next().await {
            Some(Ok(m)) => m,
            _ => return,
        };
        match msg {
            Message::Text(t) => match ClientMessage::parse(&t) {
                Ok(ClientMessage::Hello { client_version }) => break client_version,
                Ok(_) => return reject(&mut sink, ErrorCode::Protocol, "expected hello").await,
                Err(e) => return reject(&mut sink, ErrorCode::Malformed, &format!("expected hello: {e}")).await,
            },
            Message::Binary(_) => return reject(&mut sink, ErrorCode::Protocol, "expected hello").await,
            Message::Close(_) => return,
            Message::Ping(_) | Message::Pong(_) => continue,
        }
    };

    let id = uuid::Uuid::new_v4().simple().to_string();
    let cfg = &state.config;
    let log = match EventLog::file(&cfg.log_dir.join(format!("{id}.ndjson"))) {
        Ok(l) => Arc::new(l),
        Err(e) => {
            warn!(error = %e, "cannot open session log");
            return reject(&mut sink, ErrorCode::Protocol, "server cannot open a session log").await;
        }
    };
    let components = Components {
        model: state.model.clone(),
        interpreter: (state.interpreter)(),
        synth: state.synth.clone(),
        cache: state.cache.clone(),
        clock: Arc::new(TokioClock::new()) as Arc<dyn Clock>,
    };
    let (session, mut events) = match Session::start(id.clone(), components, cfg.pipeline, log) {
        Ok(s) => s,
        Err(e) => return reject(&mut sink, ErrorCode::Protocol, &e.to_string()).await,
    };
    info!(session = %id, client_version, "session started");

    let (out, mut outbox) = mpsc::unbounded_channel::<Message>();
    let _ = out.send(text(&ServerMessage::HelloAck {
        session_id: id.clone(),
        capture_hz: cfg.capture_hz,
    }));

    let writer = {
        let session = session.clone();
        tokio::spawn(async move {
            while let Some(msg) = outbox.recv().await {
                if sink.send(msg).await.is_err() {
                    session.close();
                    return;
                }
            }
            let _ = sink.send(Message::Close(None)).await;
        })
    };
    let forwarder = {
        let out = out.clone();
        let id = id.clone();
        tokio::spawn(async move {
            while let Some(ev) = events.recv().await {
                for msg in ServerMessage::for_event(&id, &ev) {
                    if out.send(text(&msg)).is_err() {
                        return;
                    }
                }
            }
        })
    };

    let send = |msg: ServerMessage| {
        let _ = out.send(text(&msg));
    };
    let mut last_seq: Option<u64> = None;
    while let Some(msg) = stream.next().await {
        let raw = match msg {
            Ok(Message::Text(t)) => t,
            Ok(Message::Binary(_)) => {
                send(ServerMessage::error(ErrorCode::Malformed, "binary messages are not supported"));
                continue;
            }
            Ok(Message::Ping(_) | Message::Pong(_)) => continue,
            Ok(Message::Close(_)) | Err(_) => break,
        };
        let (sid, seq, captured_at_ms, jpeg_b64) = match ClientMessage::parse(&raw) {
            Ok(ClientMessage::Frame {
                session_id,
                seq,
                captured_at_ms,
                jpeg_b64,
            }) => (session_id, seq, captured_at_ms, jpeg_b64),
            Ok(ClientMessage::Bye { .. }) => {
                send(ServerMessage::Status {
                    session_id: id.clone(),
                    state: StatusState::Closing,
                    batch_index: None,
                });
                break;
            }
            Ok(ClientMessage::Hello { .. }) => {
                send(ServerMessage::error(ErrorCode::Protocol, "session already established"));
                continue;
            }
            Err(e) => {
                send(ServerMessage::error(ErrorCode::Malformed, e.to_string()));
                continue;
            }
        };
        if sid != id {
            send(ServerMessage::error(ErrorCode::UnknownSession, format!("no session {sid} on this socket")));
            continue;
        }
        if let Some(prev) = last_seq {
            if seq != prev.wrapping_add(1) {
                warn!(session = %id, prev, seq, "frame sequence gap");
            }
        }
        last_seq = Some(seq);

        let max_side = cfg.max_frame_side;
        let decoded = tokio::task::spawn_blocking(move || decode_frame(&jpeg_b64, captured_at_ms, max_side))
            .await
            .unwrap_or_else(|e| Err(e.to_string()));
        let (frame, jpeg) = match decoded {
            Ok(f) => f,
            Err(e) => {
                debug!(session = %id, seq, error = %e, "undecodable frame");
                send(ServerMessage::error(ErrorCode::BadFrame, format!("frame {seq}: {e}")));
                continue;
            }
        };
        match session.ingest(frame, jpeg) {
            Ok(Ingested::Dropped { batch_index }) => send(ServerMessage::Status {
                session_id: id.clone(),
                state: StatusState::Dropped,
                batch_index: Some(batch_index),
            }),
            Ok(Ingested::Unpaired { reason }) => debug!(session = %id, seq, reason = %reason, "frame discarded"),
            Ok(_) => {}
            Err(_) => break,
        }
    }

    session.close();
    drop(out);
    let _ = forwarder.await;
    let _ = writer.await;
    info!(session = %id, "session ended");
}
