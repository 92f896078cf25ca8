//! Scoring backends: the in-process n-gram pair, an HTTP scorer, or a child process speaking
//! line-delimited JSON on stdin/stdout.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use sha2::{Digest, Sha256};

use super::wire::{ErrorResponse, ScoreMode, ScoreRequest, ScoreResponse};
use crate::corpus::{Vocabulary, WordId};
use crate::error::{Error, Result};
use crate::ngram::{Direction, NGramModel};

/// A source of conditional word log-probabilities.
pub trait ScoringBackend: Send + Sync {
    /// Stable identifier; part of every cache key.
    fn model_id(&self) -> String;

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse>;

    /// Whether [`ScoreMode::Backward`] requests are served natively.
    fn supports_backward(&self) -> bool {
        false
    }

    /// The backend's full outcome space, when known.
    fn outcomes(&self) -> Option<Vec<String>> {
        None
    }
}

/// Forward (and optionally backward) n-gram models behind the wire contract.
#[derive(Debug, Clone)]
pub struct NGramBackend {
    forward: Arc<NGramModel>,
    backward: Option<Arc<NGramModel>>,
    id: String,
}

impl NGramBackend {
    pub fn new(forward: Arc<NGramModel>, backward: Option<Arc<NGramModel>>) -> Result<Self> {
        if forward.direction() != Direction::Forward {
            return Err(Error::InvalidArgument(
                "forward model has backward direction".into(),
            ));
        }
        if let Some(b) = &backward {
            if b.direction() != Direction::Backward {
                return Err(Error::InvalidArgument(
                    "backward model has forward direction".into(),
                ));
            }
            if b.vocab().words() != forward.vocab().words() {
                return Err(Error::InvalidArgument(
                    "forward and backward vocabularies differ".into(),
                ));
            }
        }
        let mut h = Sha256::new();
        h.update(forward.to_json());
        if let Some(b) = &backward {
            h.update(b.to_json());
        }
        let id = format!("ngram:{}", &hex::encode(h.finalize())[..16]);
        Ok(NGramBackend {
            forward,
            backward,
            id,
        })
    }

    pub fn forward(&self) -> &NGramModel {
        &self.forward
    }

    pub fn backward(&self) -> Option<&NGramModel> {
        self.backward.as_deref()
    }

    fn ids(&self, words: &[String]) -> Vec<WordId> {
        self.forward.vocab().encode(words)
    }
}

impl ScoringBackend for NGramBackend {
    fn model_id(&self) -> String {
        self.id.clone()
    }

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse> {
        request.validate()?;
        let vocab = self.forward.vocab();
        let pre = self.ids(&request.pre);
        let suf = self.ids(&request.suf);
        let mut logprobs = BTreeMap::new();
        match request.mode {
            ScoreMode::Forward => {
                for c in &request.candidates {
                    logprobs.insert(c.clone(), self.forward.cond_logprob(vocab.lookup(c), &pre));
                }
            }
            ScoreMode::Backward => {
                let model = self.backward.as_ref().ok_or_else(|| {
                    Error::Protocol("backward mode needs a backward model".into())
                })?;
                for c in &request.candidates {
                    logprobs.insert(c.clone(), model.backward_logprob(vocab.lookup(c), &suf));
                }
            }
            // Enumeration is exact, so the query order (swapped or not) is irrelevant here.
            ScoreMode::Infill => {
                let support = self.forward.support();
                let dist = self.forward.infill_distribution(&pre, &suf);
                for c in &request.candidates {
                    let id = vocab.lookup(c);
                    let lp = match support.iter().position(|&w| w == id) {
                        Some(i) => dist[i],
                        None => self.forward.infill_logprob(id, &pre, &suf),
                    };
                    logprobs.insert(c.clone(), lp);
                }
            }
        }
        Ok(ScoreResponse {
            logprobs,
            model_id: self.id.clone(),
        })
    }

    fn supports_backward(&self) -> bool {
        self.backward.is_some()
    }

    fn outcomes(&self) -> Option<Vec<String>> {
        let vocab: &Vocabulary = self.forward.vocab();
        Some(
            self.forward
                .support()
                .iter()
                .map(|&w| vocab.word(w).to_owned())
                .collect(),
        )
    }
}

/// Scorer reached with `POST <base>/score`.
pub struct HttpBackend {
    url: String,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        let trimmed = base_url.trim_end_matches('/');
        let url = if trimmed.ends_with("/score") {
            trimmed.to_string()
        } else {
            format!("{trimmed}/score")
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend { url, agent }
    }
}

impl ScoringBackend for HttpBackend {
    fn model_id(&self) -> String {
        format!("http:{}", self.url)
    }

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse> {
        let body = serde_json::to_string(request)?;
        let mut response = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json")
            .send(body.as_str())
            .map_err(|e| Error::Transport(format!("{}: {e}", self.url)))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Transport(format!("{}: {e}", self.url)))?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| Error::Protocol(format!("bad response: {e}"))),
            400..=499 => Err(Error::Protocol(format!(
                "HTTP {status}: {}",
                error_message(&text)
            ))),
            _ => Err(Error::Transport(format!(
                "HTTP {status}: {}",
                error_message(&text)
            ))),
        }
    }
}

fn error_message(body: &str) -> String {
    serde_json::from_str::<ErrorResponse>(body)
        .map(|e| e.error)
        .unwrap_or_else(|_| body.to_string())
}

struct StdioChild {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Child process answering one JSON request per line with one JSON response per line.
pub struct StdioBackend {
    command: String,
    inner: Mutex<StdioChild>,
}

impl StdioBackend {
    /// Spawns `command` through `sh -c`.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Transport(format!("spawning {command:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(StdioBackend {
            command: command.to_string(),
            inner: Mutex::new(StdioChild {
                child,
                stdin,
                stdout,
            }),
        })
    }
}

impl ScoringBackend for StdioBackend {
    fn model_id(&self) -> String {
        format!("stdio:{}", self.command)
    }

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse> {
        let mut io = self.inner.lock().expect("stdio backend lock poisoned");
        let line = serde_json::to_string(request)?;
        writeln!(io.stdin, "{line}")
            .and_then(|_| io.stdin.flush())
            .map_err(|e| Error::Transport(format!("writing to scorer: {e}")))?;
        let mut reply = String::new();
        let n = io
            .stdout
            .read_line(&mut reply)
            .map_err(|e| Error::Transport(format!("reading from scorer: {e}")))?;
        if n == 0 {
            return Err(Error::Transport("scorer closed its output".into()));
        }
        let value: serde_json::Value = serde_json::from_str(&reply)
            .map_err(|e| Error::Protocol(format!("bad response: {e}")))?;
        if let Some(msg) = value.get("error").and_then(|m| m.as_str()) {
            return Err(Error::Protocol(msg.to_string()));
        }
        serde_json::from_value(value).map_err(|e| Error::Protocol(format!("bad response: {e}")))
    }
}

impl Drop for StdioBackend {
    fn drop(&mut self) {
        if let Ok(io) = self.inner.get_mut() {
            let _ = io.child.kill();
            let _ = io.child.wait();
        }
    }
}
