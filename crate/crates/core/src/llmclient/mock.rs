//! In-process completions endpoint for tests and offline runs.
//!
//! Responds to `POST …/completions` in echo mode: the prompt is split on
//! whitespace, the first token gets a null log-prob and the rest get values
//! from a deterministic function. Failures and delays can be scripted for
//! the next requests.

use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde_json::{json, Value};
use tiny_http::{Header, Response, Server};

type LogprobFn = dyn Fn(&[&str]) -> Vec<Option<f64>> + Send + Sync;

/// What to do with one upcoming request instead of answering normally.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scripted {
    Status(u16),
    /// Sleep before answering normally.
    Delay(Duration),
}

struct State {
    requests: AtomicUsize,
    prompts: Mutex<Vec<String>>,
    auth: Mutex<Vec<String>>,
    script: Mutex<VecDeque<Scripted>>,
    failing: Mutex<HashMap<String, u16>>,
    logprobs: Box<LogprobFn>,
    stop: AtomicBool,
}

pub struct MockServer {
    addr: SocketAddr,
    state: Arc<State>,
    handle: Option<JoinHandle<()>>,
}

/// Default log-prob of every token after the first: `-(1 + len/4)`.
pub fn default_logprobs(tokens: &[&str]) -> Vec<Option<f64>> {
    tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (i > 0).then(|| -(1.0 + t.len() as f64 / 4.0)))
        .collect()
}

impl MockServer {
    pub fn start() -> std::io::Result<Self> {
        Self::with_logprobs(default_logprobs)
    }

    pub fn with_logprobs<F>(f: F) -> std::io::Result<Self>
    where
        F: Fn(&[&str]) -> Vec<Option<f64>> + Send + Sync + 'static,
    {
        let server = Server::http("127.0.0.1:0").map_err(std::io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("mock server has no IP address"))?;
        let state = Arc::new(State {
            requests: AtomicUsize::new(0),
            prompts: Mutex::new(Vec::new()),
            auth: Mutex::new(Vec::new()),
            script: Mutex::new(VecDeque::new()),
            failing: Mutex::new(HashMap::new()),
            logprobs: Box::new(f),
            stop: AtomicBool::new(false),
        });
        let st = Arc::clone(&state);
        let handle = thread::spawn(move || {
            while !st.stop.load(Ordering::SeqCst) {
                match server.recv_timeout(Duration::from_millis(20)) {
                    Ok(Some(req)) => {
                        let st = Arc::clone(&st);
                        thread::spawn(move || handle(req, &st));
                    }
                    Ok(None) => {}
                    Err(_) => break,
                }
            }
        });
        Ok(Self {
            addr,
            state,
            handle: Some(handle),
        })
    }

    /// Base URL to put in an endpoint config.
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    /// Requests received so far, including scripted failures.
    pub fn request_count(&self) -> usize {
        self.state.requests.load(Ordering::SeqCst)
    }

    pub fn prompts(&self) -> Vec<String> {
        self.state.prompts.lock().unwrap().clone()
    }

    /// `Authorization` header values received.
    pub fn auth_headers(&self) -> Vec<String> {
        self.state.auth.lock().unwrap().clone()
    }

    /// Queues behaviour for the next requests, in order.
    pub fn script(&self, steps: impl IntoIterator<Item = Scripted>) {
        self.state.script.lock().unwrap().extend(steps);
    }

    /// Every request for `prompt` gets `status` from now on.
    pub fn fail_prompt(&self, prompt: &str, status: u16) {
        self.state.failing.lock().unwrap().insert(prompt.to_string(), status);
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.state.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn json_response(status: u16, body: &Value) -> Response<std::io::Cursor<Vec<u8>>> {
    Response::from_string(body.to_string())
        .with_status_code(status)
        .with_header(Header::from_bytes("Content-Type", "application/json").unwrap())
}

fn handle(mut req: tiny_http::Request, st: &State) {
    st.requests.fetch_add(1, Ordering::SeqCst);
    if let Some(h) = req.headers().iter().find(|h| h.field.equiv("Authorization")) {
        st.auth.lock().unwrap().push(h.value.to_string());
    }
    let step = st.script.lock().unwrap().pop_front();
    match step {
        Some(Scripted::Status(code)) => {
            let _ = req.respond(json_response(code, &json!({"error": {"message": "scripted failure"}})));
            return;
        }
        Some(Scripted::Delay(d)) => thread::sleep(d),
        None => {}
    }
    if !req.url().ends_with("/completions") {
        let _ = req.respond(json_response(404, &json!({"error": {"message": "not found"}})));
        return;
    }
    let mut body = String::new();
    let parsed: Option<Value> = req
        .as_reader()
        .read_to_string(&mut body)
        .ok()
        .and_then(|_| serde_json::from_str(&body).ok());
    let prompt = parsed
        .as_ref()
        .and_then(|v| v.get("prompt"))
        .and_then(Value::as_str)
        .map(str::to_string);
    let Some(prompt) = prompt else {
        let _ = req.respond(json_response(400, &json!({"error": {"message": "missing prompt"}})));
        return;
    };
    st.prompts.lock().unwrap().push(prompt.clone());
    let failing = st.failing.lock().unwrap().get(&prompt).copied();
    if let Some(code) = failing {
        let _ = req.respond(json_response(code, &json!({"error": {"message": "rejected prompt"}})));
        return;
    }
    let tokens: Vec<&str> = prompt.split_whitespace().collect();
    let lps = (st.logprobs)(&tokens);
    let reply = json!({
        "object": "text_completion",
        "choices": [{
            "text": prompt,
            "index": 0,
            "logprobs": {"tokens": tokens, "token_logprobs": lps},
            "finish_reason": "length",
        }],
    });
    let _ = req.respond(json_response(200, &reply));
}
