//! JSON wire protocol shared by every scoring backend.
//!
//! Request: `{"mode": "forward" | "infill", "pre": [str], "suf": [str], "candidates": [str]}`.
//! Response: `{"logprobs": {str: float}, "model_id": str}`.
//!
//! The same messages travel over HTTP (`POST /score`; 4xx for malformed requests, 5xx for
//! backend faults) or as line-delimited JSON over stdio, where a failure is answered with
//! `{"error": str}`. Two optional extensions are understood by the servers in this crate:
//! `"mode": "backward"` (served natively by n-gram backends) and `"swapped": true` (suffix-first
//! infill query order).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::backend::ScoringBackend;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    Forward,
    Infill,
    Backward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub mode: ScoreMode,
    #[serde(default)]
    pub pre: Vec<String>,
    #[serde(default)]
    pub suf: Vec<String>,
    pub candidates: Vec<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub swapped: bool,
}

impl ScoreRequest {
    pub fn new(
        mode: ScoreMode,
        pre: Vec<String>,
        suf: Vec<String>,
        candidates: Vec<String>,
    ) -> Self {
        ScoreRequest {
            mode,
            pre,
            suf,
            candidates,
            swapped: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::Protocol("request has no candidates".into()));
        }
        Ok(())
    }

    /// Content hash identifying this request against a given backend.
    pub fn cache_key(&self, model_id: &str) -> String {
        let mut h = Sha256::new();
        h.update(model_id.as_bytes());
        h.update([0u8]);
        h.update(serde_json::to_vec(self).expect("requests serialize"));
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub logprobs: BTreeMap<String, f64>,
    pub model_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
}

/// Answers line-delimited requests from `input` until EOF.
pub fn serve_lines<R: BufRead, W: Write>(
    backend: &dyn ScoringBackend,
    input: R,
    mut output: W,
) -> Result<()> {
    for line in input.lines() {
        let line = line.map_err(|e| Error::Transport(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<ScoreRequest>(&line)
            .map_err(|e| Error::Protocol(e.to_string()))
            .and_then(|req| {
                req.validate()?;
                backend.score(&req)
            }) {
            Ok(resp) => serde_json::to_string(&resp)?,
            Err(e) => serde_json::to_string(&ErrorResponse {
                error: e.to_string(),
            })?,
        };
        writeln!(output, "{reply}").map_err(|e| Error::Transport(e.to_string()))?;
        output
            .flush()
            .map_err(|e| Error::Transport(e.to_string()))?;
    }
    Ok(())
}

/// Minimal HTTP scorer on `addr` (`host:port`). Blocks forever unless `max_requests` is set.
pub fn serve_http(
    backend: &dyn ScoringBackend,
    addr: &str,
    max_requests: Option<usize>,
) -> Result<()> {
    let server = ScoreServer::bind(addr)?;
    log::info!("scoring server listening on {}", server.local_addr());
    server.serve(backend, max_requests)
}

/// A bound HTTP scoring endpoint (`POST /score`); bind to port 0 to get a free port.
pub struct ScoreServer {
    server: tiny_http::Server,
}

impl ScoreServer {
    pub fn bind(addr: &str) -> Result<Self> {
        let server =
            tiny_http::Server::http(addr).map_err(|e| Error::Transport(format!("{addr}: {e}")))?;
        Ok(ScoreServer { server })
    }

    /// `host:port` actually bound.
    pub fn local_addr(&self) -> String {
        self.server.server_addr().to_string()
    }

    /// Answers requests until `max_requests` have been handled (forever when `None`).
    pub fn serve(&self, backend: &dyn ScoringBackend, max_requests: Option<usize>) -> Result<()> {
        serve_http_on(backend, &self.server, max_requests)
    }
}

fn serve_http_on(
    backend: &dyn ScoringBackend,
    server: &tiny_http::Server,
    max_requests: Option<usize>,
) -> Result<()> {
    for (handled, mut request) in (1usize..).zip(server.incoming_requests()) {
        let (status, body) = if request.url() != "/score" {
            (404, error_body("not found"))
        } else if *request.method() != tiny_http::Method::Post {
            (405, error_body("POST required"))
        } else {
            let mut text = String::new();
            match request.as_reader().read_to_string(&mut text) {
                Err(e) => (400, error_body(&e.to_string())),
                Ok(_) => match serde_json::from_str::<ScoreRequest>(&text)
                    .map_err(|e| Error::Protocol(e.to_string()))
                    .and_then(|r| r.validate().map(|_| r))
                {
                    Err(e) => (400, error_body(&e.to_string())),
                    Ok(req) => match backend.score(&req) {
                        Ok(resp) => (200, serde_json::to_string(&resp)?),
                        Err(e @ Error::Protocol(_)) => (400, error_body(&e.to_string())),
                        Err(e) => (500, error_body(&e.to_string())),
                    },
                },
            }
        };
        let header = tiny_http::Header::from_bytes("Content-Type", "application/json")
            .expect("static header");
        let response = tiny_http::Response::from_string(body)
            .with_status_code(status)
            .with_header(header);
        if let Err(e) = request.respond(response) {
            log::warn!("failed to send response: {e}");
        }
        if max_requests.is_some_and(|m| handled >= m) {
            break;
        }
    }
    Ok(())
}

fn error_body(message: &str) -> String {
    serde_json::to_string(&ErrorResponse {
        error: message.to_string(),
    })
    .expect("error body serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_schema_matches_wire_format() {
        let req = ScoreRequest::new(
            ScoreMode::Infill,
            vec!["a".into()],
            vec![],
            vec!["b".into()],
        );
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"mode":"infill","pre":["a"],"suf":[],"candidates":["b"]}"#
        );
        let parsed: ScoreRequest =
            serde_json::from_str(r#"{"mode":"forward","pre":[],"suf":[],"candidates":["x"]}"#)
                .unwrap();
        assert_eq!(parsed.mode, ScoreMode::Forward);
        assert!(!parsed.swapped);
    }

    #[test]
    fn cache_key_depends_on_model_and_content() {
        let req = ScoreRequest::new(ScoreMode::Forward, vec![], vec![], vec!["b".into()]);
        let mut other = req.clone();
        other.swapped = true;
        assert_eq!(req.cache_key("m"), req.cache_key("m"));
        assert_ne!(req.cache_key("m"), req.cache_key("n"));
        assert_ne!(req.cache_key("m"), other.cache_key("m"));
    }

    #[test]
    fn empty_candidates_rejected() {
        let req = ScoreRequest::new(ScoreMode::Forward, vec![], vec![], vec![]);
        assert!(req.validate().is_err());
    }
}
