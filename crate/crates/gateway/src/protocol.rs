//! JSON text messages exchanged over the session socket.

use amava_core::category::AudioCategory;
use amava_core::pipeline::EmissionEvent;
use base64::Engine;
use serde::{Deserialize, Serialize};

/// Client to server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Hello {
        #[serde(default)]
        client_version: String,
    },
    Frame {
        session_id: String,
        seq: u64,
        captured_at_ms: u64,
        jpeg_b64: String,
    },
    Bye {
        #[serde(default)]
        session_id: String,
    },
}

impl ClientMessage {
    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    /// Anything other than hello before the handshake, or a second hello.
    Protocol,
    /// Not a recognised message.
    Malformed,
    /// Frame for a different session.
    UnknownSession,
    /// Frame payload could not be decoded as an image.
    BadFrame,
}

/// What a status message reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatusState {
    /// A batch was dropped because the session was at its in-flight cap.
    Dropped,
    /// The server is ending the session after a bye.
    Closing,
}

/// Server to client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ServerMessage {
    HelloAck {
        session_id: String,
        capture_hz: u32,
    },
    Audio {
        session_id: String,
        batch_index: u64,
        category: AudioCategory,
        mime: String,
        audio_b64: String,
    },
    Caption {
        session_id: String,
        batch_index: u64,
        text: String,
    },
    Status {
        session_id: String,
        state: StatusState,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        batch_index: Option<u64>,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
}

impl ServerMessage {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Self::Error {
            code,
            message: message.into(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages always serialize")
    }

    /// Audio then caption for a played event; nothing otherwise.
    pub fn for_event(session_id: &str, ev: &EmissionEvent) -> Vec<ServerMessage> {
        let Some(clip) = ev.clip.as_ref().filter(|_| ev.is_play()) else {
            return Vec::new();
        };
        vec![
            ServerMessage::Audio {
                session_id: session_id.to_string(),
                batch_index: ev.batch_index,
                category: ev.category,
                mime: clip.mime.clone(),
                audio_b64: base64::engine::general_purpose::STANDARD.encode(&clip.bytes),
            },
            ServerMessage::Caption {
                session_id: session_id.to_string(),
                batch_index: ev.batch_index,
                text: ev.text.clone(),
            },
        ]
    }
}
