//! Client for hosted chat-completion models, with scripted and replayed
//! stand-ins for offline runs.
//!
//! Live requests are sent as
//!
//! ```json
//! {"model": "...", "temperature": 0, "max_tokens": 512,
//!  "messages": [
//!    {"role": "system", "content": "..."},
//!    {"role": "user", "content": [
//!      {"type": "text", "text": "..."},
//!      {"type": "image_url", "image_url": {"url": "data:image/png;base64,..."}}]}]}
//! ```
//!
//! and the reply text is read from `choices[0].message.content`.
//!
//! Every exchange is kept in a transcript that can be written as a session
//! file; the same file feeds the mock (keyed by request hash) and replay
//! (consumed in order) modes.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("gateway configuration: {0}")]
    Config(String),
    #[error("model endpoint unavailable after {attempts} attempt(s): {reason}")]
    Unavailable { attempts: u32, reason: String },
    #[error("model endpoint rejected the request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed model response: {0}")]
    Protocol(String),
    #[error("replay session exhausted after {consumed} response(s)")]
    ReplayUnderrun { consumed: usize },
    #[error("no scripted response for request {hash}")]
    MockMiss { hash: String },
    #[error("session file {path}: {msg}")]
    Session { path: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePart {
    pub mime: String,
    /// Base64 payload.
    pub data: String,
}

impl ImagePart {
    pub fn encode(mime: &str, bytes: &[u8]) -> Self {
        ImagePart {
            mime: mime.into(),
            data: base64::engine::general_purpose::STANDARD.encode(bytes),
        }
    }

    pub fn png(bytes: &[u8]) -> Self {
        Self::encode("image/png", bytes)
    }

    fn data_uri(&self) -> String {
        format!("data:{};base64,{}", self.mime, self.data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub system: String,
    pub user: String,
    #[serde(default)]
    pub images: Vec<ImagePart>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ModelRequest {
    pub fn new(system: impl Into<String>, user: impl Into<String>) -> Self {
        ModelRequest {
            system: system.into(),
            user: user.into(),
            images: Vec::new(),
            temperature: 0.0,
            max_tokens: 512,
        }
    }

    pub fn with_image(mut self, image: ImagePart) -> Self {
        self.images.push(image);
        self
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("serializable request");
        hex(&Sha256::digest(bytes))
    }

    fn body(&self, model: &str) -> serde_json::Value {
        let mut content = vec![serde_json::json!({"type": "text", "text": self.user})];
        for img in &self.images {
            content.push(
                serde_json::json!({"type": "image_url", "image_url": {"url": img.data_uri()}}),
            );
        }
        serde_json::json!({
            "model": model,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "messages": [
                {"role": "system", "content": self.system},
                {"role": "user", "content": content},
            ],
        })
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayMode {
    Live,
    #[default]
    Mock,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub mode: GatewayMode,
    pub endpoint: Option<String>,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_secs: f64,
    /// Total attempts per request, including the first.
    pub retries: u32,
    /// Base delay, doubled after each failed attempt.
    pub backoff_ms: u64,
    /// Mock table source or replay source.
    pub session_file: Option<PathBuf>,
    /// Reply used by the mock when the table has no entry.
    pub mock_default: Option<String>,
    pub max_in_flight: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            mode: GatewayMode::Mock,
            endpoint: None,
            model: "gpt-4o".into(),
            token_env: "FUNCGRAPH_API_TOKEN".into(),
            timeout_secs: 60.0,
            retries: 3,
            backoff_ms: 500,
            session_file: None,
            mock_default: None,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub hash: String,
    pub request: ModelRequest,
    pub response: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub exchanges: Vec<Exchange>,
}

impl Session {
    pub fn read(path: &Path) -> Result<Session, GatewayError> {
        let err = |msg: String| GatewayError::Session {
            path: path.display().to_string(),
            msg,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<(), GatewayError> {
        let err = |msg: String| GatewayError::Session {
            path: path.display().to_string(),
            msg,
        };
        let text = serde_json::to_string_pretty(self).expect("serializable session");
        std::fs::write(path, text).map_err(|e| err(e.to_string()))
    }
}

enum Backend {
    Live {
        client: reqwest::blocking::Client,
        endpoint: String,
        token: String,
    },
    Mock {
        table: BTreeMap<String, String>,
        default: Option<String>,
    },
    Replay {
        queue: Mutex<VecDeque<Exchange>>,
    },
}

struct Limiter {
    in_flight: Mutex<usize>,
    freed: Condvar,
    cap: usize,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.cap {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// Thread-safe model client. At most `max_in_flight` requests run at once.
pub struct Gateway {
    cfg: GatewayConfig,
    backend: Backend,
    limiter: Limiter,
    transcript: Mutex<Vec<Exchange>>,
    consumed: Mutex<usize>,
}

impl Gateway {
    pub fn new(cfg: GatewayConfig) -> Result<Gateway, GatewayError> {
        let backend = match cfg.mode {
            GatewayMode::Live => {
                let endpoint = cfg
                    .endpoint
                    .clone()
                    .ok_or_else(|| GatewayError::Config("live mode needs an endpoint".into()))?;
                let token = std::env::var(&cfg.token_env).map_err(|_| {
                    GatewayError::Config(format!("live mode needs a token in ${}", cfg.token_env))
                })?;
                if !(cfg.timeout_secs > 0.0) {
                    return Err(GatewayError::Config("timeout must be positive".into()));
                }
                let client = reqwest::blocking::Client::builder()
                    .timeout(Duration::from_secs_f64(cfg.timeout_secs))
                    .build()
                    .map_err(|e| GatewayError::Config(e.to_string()))?;
                Backend::Live {
                    client,
                    endpoint,
                    token,
                }
            }
            GatewayMode::Mock => {
                let mut table = BTreeMap::new();
                if let Some(path) = &cfg.session_file {
                    for ex in Session::read(path)?.exchanges {
                        table.insert(ex.hash, ex.response);
                    }
                }
                Backend::Mock {
                    table,
                    default: cfg.mock_default.clone(),
                }
            }
            GatewayMode::Replay => {
                let path = cfg.session_file.as_ref().ok_or_else(|| {
                    GatewayError::Config("replay mode needs a session file".into())
                })?;
                Backend::Replay {
                    queue: Mutex::new(Session::read(path)?.exchanges.into()),
                }
            }
        };
        if cfg.retries == 0 {
            return Err(GatewayError::Config("retries must be at least 1".into()));
        }
        Ok(Gateway {
            limiter: Limiter {
                in_flight: Mutex::new(0),
                freed: Condvar::new(),
                cap: cfg.max_in_flight.max(1),
            },
            cfg,
            backend,
            transcript: Mutex::new(Vec::new()),
            consumed: Mutex::new(0),
        })
    }

    /// Mock gateway answering from an in-memory table.
    pub fn mock(table: BTreeMap<String, String>, default: Option<String>) -> Gateway {
        let mut g = Gateway::new(GatewayConfig::default()).expect("default mock config");
        g.backend = Backend::Mock { table, default };
        g
    }

    pub fn mode(&self) -> GatewayMode {
        self.cfg.mode
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.cfg
    }

    pub fn complete(&self, req: &ModelRequest) -> Result<String, GatewayError> {
        let _permit = self.limiter.acquire();
        let hash = req.hash();
        let response = match &self.backend {
            Backend::Live {
                client,
                endpoint,
                token,
            } => self.post(client, endpoint, token, req)?,
            Backend::Mock { table, default } => table
                .get(&hash)
                .or(default.as_ref())
                .cloned()
                .ok_or_else(|| GatewayError::MockMiss { hash: hash.clone() })?,
            Backend::Replay { queue } => {
                let next = queue.lock().unwrap().pop_front();
                let mut consumed = self.consumed.lock().unwrap();
                let ex = next.ok_or(GatewayError::ReplayUnderrun {
                    consumed: *consumed,
                })?;
                *consumed += 1;
                if ex.hash != hash {
                    log::warn!(
                        "replayed response {} was recorded for a different request",
                        *consumed
                    );
                }
                ex.response
            }
        };
        self.transcript.lock().unwrap().push(Exchange {
            hash,
            request: req.clone(),
            response: response.clone(),
        });
        Ok(response)
    }

    fn post(
        &self,
        client: &reqwest::blocking::Client,
        endpoint: &str,
        token: &str,
        req: &ModelRequest,
    ) -> Result<String, GatewayError> {
        let body = req.body(&self.cfg.model);
        let mut reason = String::new();
        for attempt in 1..=self.cfg.retries {
            if attempt > 1 {
                let delay = self
                    .cfg
                    .backoff_ms
                    .saturating_mul(1 << (attempt - 2).min(16));
                thread::sleep(Duration::from_millis(delay));
            }
            let resp = match client.post(endpoint).bearer_auth(token).json(&body).send() {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("attempt {attempt}: {e}");
                    reason = e.to_string();
                    continue;
                }
            };
            let status = resp.status();
            let text = match resp.text() {
                Ok(t) => t,
                Err(e) => {
                    reason = e.to_string();
                    continue;
                }
            };
            if status.as_u16() == 429 || status.is_server_error() {
                log::warn!("attempt {attempt}: status {status}");
                reason = format!("status {status}");
                continue;
            }
            if !status.is_success() {
                return Err(GatewayError::Rejected {
                    status: status.as_u16(),
                    body: text,
                });
            }
            return parse_content(&text);
        }
        Err(GatewayError::Unavailable {
            attempts: self.cfg.retries,
            reason,
        })
    }

    pub fn transcript(&self) -> Vec<Exchange> {
        self.transcript.lock().unwrap().clone()
    }

    pub fn write_session(&self, path: &Path) -> Result<(), GatewayError> {
        Session {
            exchanges: self.transcript(),
        }
        .write(path)
    }
}

fn parse_content(text: &str) -> Result<String, GatewayError> {
    let v: serde_json::Value =
        serde_json::from_str(text).map_err(|e| GatewayError::Protocol(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| GatewayError::Protocol("missing choices[0].message.content".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::{TcpListener, TcpStream};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn read_request(stream: &mut TcpStream) -> String {
        let mut buf = Vec::new();
        let mut chunk = [0u8; 4096];
        loop {
            let n = stream.read(&mut chunk).unwrap();
            if n == 0 {
                break;
            }
            buf.extend_from_slice(&chunk[..n]);
            let text = String::from_utf8_lossy(&buf);
            if let Some(end) = text.find("\r\n\r\n") {
                let len = text[..end]
                    .lines()
                    .find_map(|l| {
                        let (k, v) = l.split_once(':')?;
                        k.eq_ignore_ascii_case("content-length")
                            .then(|| v.trim().parse::<usize>().ok())?
                    })
                    .unwrap_or(0);
                if buf.len() >= end + 4 + len {
                    return String::from_utf8_lossy(&buf[end + 4..end + 4 + len]).into_owned();
                }
            }
        }
        String::new()
    }

    fn live_cfg(addr: &str, token_env: &str, retries: u32, timeout: f64) -> GatewayConfig {
        std::env::set_var(token_env, "test-token");
        GatewayConfig {
            mode: GatewayMode::Live,
            endpoint: Some(format!("http://{addr}/v1/chat/completions")),
            token_env: token_env.into(),
            retries,
            timeout_secs: timeout,
            backoff_ms: 1,
            ..GatewayConfig::default()
        }
    }

    #[test]
    fn mock_returns_scripted_string() {
        let req = ModelRequest::new("sys", "which handle?");
        let table = BTreeMap::from([(req.hash(), "Freezer Handle".to_string())]);
        let g = Gateway::mock(table, None);
        assert_eq!(g.complete(&req).unwrap(), "Freezer Handle");
        assert!(matches!(
            g.complete(&ModelRequest::new("sys", "other")),
            Err(GatewayError::MockMiss { .. })
        ));
        assert_eq!(g.transcript().len(), 1);
    }

    #[test]
    fn live_stub_returns_canned_content() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let server = thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            let body = read_request(&mut s);
            let reply = r#"{"choices":[{"message":{"role":"assistant","content":"on top of"}}]}"#;
            write!(
                s,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                reply.len(),
                reply
            )
            .unwrap();
            body
        });
        let g = Gateway::new(live_cfg(&addr, "FUNCGRAPH_TEST_TOKEN_A", 3, 5.0)).unwrap();
        let req = ModelRequest::new("sys", "relation?").with_image(ImagePart::png(&[1, 2, 3]));
        assert_eq!(g.complete(&req).unwrap(), "on top of");
        let sent: serde_json::Value = serde_json::from_str(&server.join().unwrap()).unwrap();
        assert_eq!(sent["temperature"], 0.0);
        assert_eq!(sent["messages"][0]["role"], "system");
        assert_eq!(
            sent["messages"][1]["content"][1]["image_url"]["url"],
            "data:image/png;base64,AQID"
        );
    }

    #[test]
    fn timeout_gives_unavailable_after_exact_attempts() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let accepted = Arc::new(AtomicUsize::new(0));
        let counter = accepted.clone();
        thread::spawn(move || {
            let mut held = Vec::new();
            for s in listener.incoming() {
                counter.fetch_add(1, Ordering::SeqCst);
                held.push(s.unwrap());
            }
        });
        let g = Gateway::new(live_cfg(&addr, "FUNCGRAPH_TEST_TOKEN_B", 3, 0.2)).unwrap();
        match g.complete(&ModelRequest::new("s", "u")) {
            Err(GatewayError::Unavailable { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("expected unavailable, got {other:?}"),
        }
        thread::sleep(Duration::from_millis(50));
        assert_eq!(accepted.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn replay_is_sequential_and_underruns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("session.json");
        let reqs = [ModelRequest::new("s", "a"), ModelRequest::new("s", "b")];
        let recorder = Gateway::mock(BTreeMap::new(), Some("x".into()));
        for r in &reqs {
            recorder.complete(r).unwrap();
        }
        let mut session = Session {
            exchanges: recorder.transcript(),
        };
        session.exchanges[1].response = "y".into();
        session.write(&path).unwrap();

        let cfg = GatewayConfig {
            mode: GatewayMode::Replay,
            session_file: Some(path),
            ..GatewayConfig::default()
        };
        let run = || {
            let g = Gateway::new(cfg.clone()).unwrap();
            let out: Vec<String> = reqs.iter().map(|r| g.complete(r).unwrap()).collect();
            assert!(matches!(
                g.complete(&reqs[0]),
                Err(GatewayError::ReplayUnderrun { consumed: 2 })
            ));
            out
        };
        assert_eq!(run(), vec!["x", "y"]);
        assert_eq!(run(), run());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let live = GatewayConfig {
            mode: GatewayMode::Live,
            ..GatewayConfig::default()
        };
        assert!(matches!(Gateway::new(live), Err(GatewayError::Config(_))));
        let replay = GatewayConfig {
            mode: GatewayMode::Replay,
            ..GatewayConfig::default()
        };
        assert!(matches!(Gateway::new(replay), Err(GatewayError::Config(_))));
    }

    #[test]
    fn limiter_bounds_concurrency() {
        let g = Arc::new(Gateway::mock(BTreeMap::new(), Some("ok".into())));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..16)
            .map(|i| {
                let g = g.clone();
                let peak = peak.clone();
                thread::spawn(move || {
                    let _p = g.limiter.acquire();
                    let now = *g.limiter.in_flight.lock().unwrap();
                    peak.fetch_max(now, Ordering::SeqCst);
                    thread::sleep(Duration::from_millis(2));
                    drop(_p);
                    g.complete(&ModelRequest::new("s", format!("{i}"))).unwrap()
                })
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), "ok");
        }
        assert!(peak.load(Ordering::SeqCst) <= 4);
    }
}
