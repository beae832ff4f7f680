//! Chat-completions client for the hallucination judge, a bounded-window
//! batch runner and a scriptable stub server for tests.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{AsukaError, Result};
use crate::image::Image;
use crate::metrics::{parse_verdict, JudgeVerdict};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JudgeConfig {
    /// Endpoint root; `/chat/completions` is appended.
    pub base_url: String,
    pub model_id: String,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub max_retries: usize,
    pub backoff_ms: u64,
    pub timeout_ms: u64,
    pub in_flight: usize,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model_id: "judge-vlm".into(),
            token_env: "ASUKA_JUDGE_TOKEN".into(),
            max_retries: 3,
            backoff_ms: 200,
            timeout_ms: 60_000,
            in_flight: 4,
        }
    }
}

pub struct JudgeClient {
    cfg: JudgeConfig,
    agent: ureq::Agent,
    token: Option<String>,
}

impl JudgeClient {
    /// Reads the token from `cfg.token_env`; a missing variable sends no
    /// `Authorization` header.
    pub fn new(cfg: JudgeConfig) -> Result<Self> {
        if cfg.in_flight == 0 {
            return Err(AsukaError::Config("judge.in_flight must be at least 1".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let token = std::env::var(&cfg.token_env).ok().filter(|t| !t.is_empty());
        Ok(Self { cfg, agent, token })
    }

    pub fn config(&self) -> &JudgeConfig {
        &self.cfg
    }

    fn request_body(&self, png: &[u8], prompt: &str, item_id: &str) -> Value {
        let url = format!("data:image/png;base64,{}", base64::engine::general_purpose::STANDARD.encode(png));
        json!({
            "model": self.cfg.model_id,
            "user": item_id,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "image_url", "image_url": {"url": url}},
                    {"type": "text", "text": prompt},
                ],
            }],
        })
    }

    /// One attempt. `Ok(Err(_))` is a retryable failure.
    fn attempt(&self, body: &Value) -> Result<std::result::Result<String, String>> {
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let mut req = self.agent.post(&url);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(e) => return Ok(Err(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Ok(Err(e.to_string())),
        };
        if status == 429 || status >= 500 {
            return Ok(Err(format!("http {status}")));
        }
        if status >= 400 {
            return Err(AsukaError::Transport(format!("http {status}: {text}")));
        }
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| AsukaError::Protocol { message: format!("response is not JSON: {e}"), raw_response: text.clone() })?;
        match v.pointer("/choices/0/message/content").and_then(Value::as_str) {
            Some(content) => Ok(Ok(content.to_string())),
            None => Err(AsukaError::Protocol { message: "no choices[0].message.content".into(), raw_response: text }),
        }
    }

    /// Sends the composite and prompt, retrying transport failures, 429 and
    /// 5xx replies up to `max_retries` times.
    pub fn judge_png(&self, png: &[u8], prompt: &str, item_id: &str) -> Result<JudgeVerdict> {
        let body = self.request_body(png, prompt, item_id);
        let mut last = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                thread::sleep(Duration::from_millis(self.cfg.backoff_ms << (attempt - 1).min(6)));
            }
            match self.attempt(&body)? {
                Ok(raw) => {
                    let hallucination = parse_verdict(&raw)?;
                    return Ok(JudgeVerdict { hallucination, raw_response: raw, model_id: self.cfg.model_id.clone() });
                }
                Err(e) => last = e,
            }
        }
        Err(AsukaError::Transport(format!("{} attempts failed, last: {last}", self.cfg.max_retries + 1)))
    }

    pub fn judge(&self, composite: &Image, prompt: &str, item_id: &str) -> Result<JudgeVerdict> {
        self.judge_png(&composite.to_png_bytes()?, prompt, item_id)
    }
}

/// One line of the verdict log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeRecord {
    pub id: String,
    /// `None` when the item failed; see `error`.
    pub verdict: Option<bool>,
    pub raw_response: String,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub struct JudgeItem {
    pub id: String,
    pub composite: Image,
}

/// Judges every item with at most `in_flight` concurrent requests. Records
/// are written as JSONL by the calling thread in completion order and
/// returned in input order. Per-item failures become records, never abort
/// the batch; only a failing `sink` does.
pub fn judge_batch(client: &JudgeClient, items: &[JudgeItem], prompt: &str, sink: &mut dyn Write) -> Result<Vec<JudgeRecord>> {
    let next = Arc::new(AtomicUsize::new(0));
    let (tx, rx) = mpsc::channel::<(usize, JudgeRecord)>();
    let workers = client.cfg.in_flight.min(items.len()).max(1);
    thread::scope(|s| -> Result<Vec<JudgeRecord>> {
        for _ in 0..workers {
            let (tx, next) = (tx.clone(), Arc::clone(&next));
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                let t0 = Instant::now();
                let outcome = client.judge(&item.composite, prompt, &item.id);
                let latency_ms = t0.elapsed().as_millis() as u64;
                let record = match outcome {
                    Ok(v) => JudgeRecord {
                        id: item.id.clone(),
                        verdict: Some(v.hallucination),
                        raw_response: v.raw_response,
                        latency_ms,
                        error: None,
                    },
                    Err(e) => {
                        let raw = match &e {
                            AsukaError::Protocol { raw_response, .. } => raw_response.clone(),
                            _ => String::new(),
                        };
                        JudgeRecord { id: item.id.clone(), verdict: None, raw_response: raw, latency_ms, error: Some(e.to_string()) }
                    }
                };
                if tx.send((i, record)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut out: Vec<Option<JudgeRecord>> = vec![None; items.len()];
        for (i, rec) in rx {
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(sink, "{line}").map_err(|e| AsukaError::io("<judge log>", e))?;
            out[i] = Some(rec);
        }
        Ok(out.into_iter().map(|r| r.expect("every item reports")).collect())
    })
}

/// Scripted reply of the stub server.
#[derive(Clone, Debug)]
pub enum StubReply {
    /// 200 with this assistant message.
    Content(String),
    /// Bare HTTP status with an empty body.
    Status(u16),
    /// Wait, then reply.
    Delayed(Duration, Box<StubReply>),
}

type Script = dyn Fn(&str, usize) -> StubReply + Send + Sync;

/// Local chat-completions stand-in. The script sees the request's `user`
/// field (the item id) and the 0-based attempt count for that id.
pub struct StubServer {
    server: Arc<tiny_http::Server>,
    port: u16,
    threads: Vec<thread::JoinHandle<()>>,
    stats: Arc<StubStats>,
}

#[derive(Default)]
pub struct StubStats {
    pub requests: AtomicUsize,
    active: AtomicUsize,
    pub max_active: AtomicUsize,
    attempts: std::sync::Mutex<std::collections::HashMap<String, usize>>,
}

impl StubServer {
    pub fn start(threads: usize, script: impl Fn(&str, usize) -> StubReply + Send + Sync + 'static) -> Result<Self> {
        let server = tiny_http::Server::http("127.0.0.1:0").map_err(|e| AsukaError::Transport(e.to_string()))?;
        let port = server.server_addr().to_ip().map(|a| a.port()).ok_or_else(|| AsukaError::Transport("no ip".into()))?;
        let server = Arc::new(server);
        let script: Arc<Script> = Arc::new(script);
        let stats = Arc::new(StubStats::default());
        let threads = (0..threads.max(1))
            .map(|_| {
                let (server, script, stats) = (Arc::clone(&server), Arc::clone(&script), Arc::clone(&stats));
                thread::spawn(move || {
                    for mut req in server.incoming_requests() {
                        stats.requests.fetch_add(1, Ordering::SeqCst);
                        let now = stats.active.fetch_add(1, Ordering::SeqCst) + 1;
                        stats.max_active.fetch_max(now, Ordering::SeqCst);
                        let mut body = String::new();
                        let _ = req.as_reader().read_to_string(&mut body);
                        let id = serde_json::from_str::<Value>(&body)
                            .ok()
                            .and_then(|v| v.get("user").and_then(Value::as_str).map(str::to_string))
                            .unwrap_or_default();
                        let attempt = {
                            let mut map = stats.attempts.lock().expect("stub lock");
                            let n = map.entry(id.clone()).or_insert(0);
                            *n += 1;
                            *n - 1
                        };
                        let mut reply = script(&id, attempt);
                        while let StubReply::Delayed(d, inner) = reply {
                            thread::sleep(d);
                            reply = *inner;
                        }
                        stats.active.fetch_sub(1, Ordering::SeqCst);
                        let resp = match reply {
                            StubReply::Content(text) => {
                                let body = json!({
                                    "id": "stub",
                                    "object": "chat.completion",
                                    "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
                                });
                                tiny_http::Response::from_string(body.to_string()).with_header(
                                    "Content-Type: application/json".parse::<tiny_http::Header>().expect("static header"),
                                )
                            }
                            StubReply::Status(code) => tiny_http::Response::from_string(String::new()).with_status_code(code),
                            StubReply::Delayed(..) => unreachable!(),
                        };
                        let _ = req.respond(resp);
                    }
                })
            })
            .collect();
        Ok(Self { server, port, threads, stats })
    }

    pub fn base_url(&self) -> String {
        format!("http://127.0.0.1:{}/v1", self.port)
    }

    pub fn stats(&self) -> &StubStats {
        &self.stats
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        for _ in 1..self.threads.len() {
            self.server.unblock();
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}
