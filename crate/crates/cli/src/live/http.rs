// SPDX-License-Identifier: Apache-2.0

//! Key-service session protocol over HTTP.
//!
//! `POST /handshake/hello` takes a handshake message and returns
//! `{"session", "reply"}`. `POST /handshake/finish` and every route in
//! [`Route`] carry the session token in `x-session`; route bodies are raw
//! channel-sealed envelopes. Failures are `{"error", "message"}` with a 4xx
//! status.

use std::sync::OnceLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use teeinfer::attestation::{HandshakeError, HandshakeMessage};
use teeinfer::keyservice::{KsTransport, Route, TransportError};

pub const SESSION_HEADER: &str = "x-session";

#[derive(Serialize, Deserialize)]
pub struct HelloReply {
    pub session: String,
    pub reply: HandshakeMessage,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

impl ErrorBody {
    pub fn of(e: &TransportError) -> (u16, Self) {
        let (status, kind) = match e {
            TransportError::Handshake(h) => (
                403,
                match h {
                    HandshakeError::ReportMissing => "report_missing",
                    HandshakeError::ReportRejected => "report_rejected",
                    HandshakeError::BindingMismatch => "binding_mismatch",
                    HandshakeError::Malformed(_) => "malformed_handshake",
                    HandshakeError::KeyAgreement => "key_agreement",
                },
            ),
            TransportError::UnknownSession => (401, "unknown_session"),
            TransportError::Rejected(_) => (400, "rejected"),
            TransportError::Io(_) => (502, "io"),
        };
        (status, ErrorBody { error: kind.into(), message: e.to_string() })
    }

    pub fn into_error(self) -> TransportError {
        match self.error.as_str() {
            "report_missing" => HandshakeError::ReportMissing.into(),
            "report_rejected" => HandshakeError::ReportRejected.into(),
            "binding_mismatch" => HandshakeError::BindingMismatch.into(),
            "malformed_handshake" => HandshakeError::Malformed(self.message).into(),
            "key_agreement" => HandshakeError::KeyAgreement.into(),
            "unknown_session" => TransportError::UnknownSession,
            "rejected" => TransportError::Rejected(self.message),
            _ => TransportError::Io(self.message),
        }
    }
}

/// Blocking client end. Must not be used from inside an async task.
pub struct HttpTransport {
    base: String,
}

/// One blocking client per process. It is never dropped, so dropping a
/// transport is safe from any context.
fn client() -> Result<&'static reqwest::blocking::Client, TransportError> {
    static CLIENT: OnceLock<reqwest::blocking::Client> = OnceLock::new();
    if let Some(c) = CLIENT.get() {
        return Ok(c);
    }
    let c = reqwest::blocking::Client::builder().timeout(Duration::from_secs(30)).build().map_err(io)?;
    Ok(CLIENT.get_or_init(|| c))
}

impl HttpTransport {
    pub fn new(base: &str) -> Result<Self, TransportError> {
        if !base.starts_with("http://") && !base.starts_with("https://") {
            return Err(TransportError::Io(format!("not an http url: {base}")));
        }
        Ok(HttpTransport { base: base.trim_end_matches('/').to_owned() })
    }

    fn post(&self, path: &str, session: Option<&str>, body: Vec<u8>, content_type: &str) -> Result<Vec<u8>, TransportError> {
        let mut req = client()?.post(format!("{}{path}", self.base)).header("content-type", content_type).body(body);
        if let Some(s) = session {
            req = req.header(SESSION_HEADER, s);
        }
        let resp = req.send().map_err(io)?;
        let status = resp.status();
        let bytes = resp.bytes().map_err(io)?.to_vec();
        if status.is_success() {
            return Ok(bytes);
        }
        Err(match serde_json::from_slice::<ErrorBody>(&bytes) {
            Ok(e) => e.into_error(),
            Err(_) => TransportError::Io(format!("{path}: http {status}")),
        })
    }
}

fn io(e: impl std::fmt::Display) -> TransportError {
    TransportError::Io(e.to_string())
}

impl KsTransport for HttpTransport {
    fn hello(&self, hello: &HandshakeMessage) -> Result<(String, HandshakeMessage), TransportError> {
        let body = self.post("/handshake/hello", None, hello.to_json().into_bytes(), "application/json")?;
        let r: HelloReply = serde_json::from_slice(&body).map_err(io)?;
        Ok((r.session, r.reply))
    }

    fn finish(&self, session: &str, finish: &HandshakeMessage) -> Result<(), TransportError> {
        self.post("/handshake/finish", Some(session), finish.to_json().into_bytes(), "application/json").map(|_| ())
    }

    fn call(&self, session: &str, route: Route, body: &[u8]) -> Result<Vec<u8>, TransportError> {
        self.post(route.path(), Some(session), body.to_vec(), "application/octet-stream")
    }
}

/// Blocking JSON POST for action calls. Error bodies of the form
/// `{"error": ...}` are surfaced as the message.
pub fn post_json<T: Serialize, R: serde::de::DeserializeOwned>(url: &str, body: &T) -> Result<R, String> {
    let resp = client().map_err(|e| e.to_string())?.post(url).json(body).send().map_err(|e| e.to_string())?;
    let status = resp.status();
    let bytes = resp.bytes().map_err(|e| e.to_string())?;
    if !status.is_success() {
        let msg = serde_json::from_slice::<serde_json::Value>(&bytes)
            .ok()
            .and_then(|v| v.get("error").and_then(|e| e.as_str()).map(str::to_owned))
            .unwrap_or_default();
        return Err(format!("http {status}: {msg}"));
    }
    serde_json::from_slice(&bytes).map_err(|e| e.to_string())
}
